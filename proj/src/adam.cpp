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
#include "m3dbfs/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace m3dbfs {

void Adam::step(ParameterStore& params) {
    ++step_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (const ParamEntry& e : params.entries()) {
        if (e.frozen) continue;
        Tensor& t = *e.tensor;
        if (t.grad.size() != t.values.size())
            throw std::runtime_error("Adam: missing gradient on unfrozen parameter " + e.name);
        Moments& mo = state_[e.tensor.get()];
        if (mo.m.empty()) {
            mo.m.assign(t.values.size(), 0.0);
            mo.v.assign(t.values.size(), 0.0);
        }
        for (std::size_t i = 0; i < t.values.size(); ++i) {
            double g = t.grad[i] + cfg_.weight_decay * t.values[i];
            mo.m[i] = cfg_.beta1 * mo.m[i] + (1.0 - cfg_.beta1) * g;
            mo.v[i] = cfg_.beta2 * mo.v[i] + (1.0 - cfg_.beta2) * g * g;
            double mhat = mo.m[i] / bc1;
            double vhat = mo.v[i] / bc2;
            t.values[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

}  // namespace m3dbfs
