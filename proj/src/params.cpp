/*
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "m3dbfs/params.hpp"

#include <cmath>
#include <stdexcept>

namespace m3dbfs {

TensorPtr ParameterStore::add(const std::string& name, TensorPtr t, bool frozen) {
    if (index_.count(name)) throw std::invalid_argument("ParameterStore: duplicate name " + name);
    t->requires_grad = !frozen;
    if (t->requires_grad)
        t->ensure_grad();
    else
        t->grad.clear();
    index_[name] = entries_.size();
    entries_.push_back({name, t, frozen});
    return entries_.back().tensor;
}

bool ParameterStore::has(const std::string& name) const { return index_.count(name) > 0; }

const TensorPtr& ParameterStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParameterStore: no parameter " + name);
    return entries_[it->second].tensor;
}

bool ParameterStore::is_frozen(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParameterStore: no parameter " + name);
    return entries_[it->second].frozen;
}

void ParameterStore::set_frozen(const std::string& name, bool frozen) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParameterStore: no parameter " + name);
    ParamEntry& e = entries_[it->second];
    e.frozen = frozen;
    e.tensor->requires_grad = !frozen;
    if (frozen)
        e.tensor->grad.clear();
    else
        e.tensor->ensure_grad();
}

void ParameterStore::set_frozen_prefix(const std::string& prefix, bool frozen) {
    for (ParamEntry& e : entries_)
        if (e.name.rfind(prefix, 0) == 0) set_frozen(e.name, frozen);
}

void ParameterStore::zero_grad() {
    for (ParamEntry& e : entries_)
        if (!e.frozen) e.tensor->zero_grad();
}

std::vector<std::vector<double>> ParameterStore::snapshot() const {
    std::vector<std::vector<double>> snap;
    snap.reserve(entries_.size());
    for (const ParamEntry& e : entries_) snap.push_back(e.tensor->values);
    return snap;
}

void ParameterStore::restore(const std::vector<std::vector<double>>& snap) {
    if (snap.size() != entries_.size())
        throw std::invalid_argument("ParameterStore::restore: snapshot size mismatch");
    for (std::size_t i = 0; i < snap.size(); ++i) {
        if (snap[i].size() != entries_[i].tensor->values.size())
            throw std::invalid_argument("ParameterStore::restore: shape mismatch at " +
                                        entries_[i].name);
        entries_[i].tensor->values = snap[i];
    }
}

TensorPtr glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> v(fan_in * fan_out);
    for (double& x : v) x = rng.uniform(-limit, limit);
    return Tensor::matrix(fan_in, fan_out, std::move(v));
}

}  // namespace m3dbfs
