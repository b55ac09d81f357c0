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
#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "m3dbfs/rng.hpp"
#include "m3dbfs/tensor.hpp"

namespace m3dbfs {

struct ParamEntry {
    std::string name;
    TensorPtr tensor;
    bool frozen = false;
};

/// Ordered registry of named parameter tensors with freeze flags. Freezing a
/// parameter clears requires_grad, so frozen weights stay out of the graph
/// entirely and their bytes cannot change.
class ParameterStore {
public:
    TensorPtr add(const std::string& name, TensorPtr t, bool frozen = false);
    bool has(const std::string& name) const;
    const TensorPtr& get(const std::string& name) const;
    bool is_frozen(const std::string& name) const;
    void set_frozen(const std::string& name, bool frozen);
    /// Freeze/unfreeze every parameter whose name starts with `prefix`.
    void set_frozen_prefix(const std::string& prefix, bool frozen);

    void zero_grad();

    const std::vector<ParamEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    /// Deep copy of current parameter values, ordered like entries().
    std::vector<std::vector<double>> snapshot() const;
    void restore(const std::vector<std::vector<double>>& snap);

private:
    std::vector<ParamEntry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Glorot-uniform weight matrix [fan_in x fan_out].
TensorPtr glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);

}  // namespace m3dbfs
