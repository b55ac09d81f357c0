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

#include <cstdint>
#include <unordered_map>
#include <vector>

#include "m3dbfs/params.hpp"

namespace m3dbfs {

struct AdamConfig {
    double lr = 0.005;
    double weight_decay = 0.0001;  // classic L2: added to the gradient
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Weight decay is applied by adding wd*w to the
/// gradient. Frozen parameters are skipped; an unfrozen parameter with no
/// gradient buffer is an error.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(ParameterStore& params);
    std::int64_t steps() const { return step_; }
    const AdamConfig& config() const { return cfg_; }

private:
    struct Moments {
        std::vector<double> m, v;
    };
    AdamConfig cfg_;
    std::int64_t step_ = 0;
    std::unordered_map<const Tensor*, Moments> state_;
};

}  // namespace m3dbfs
