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
#include <string>

#include "m3dbfs/braindata.hpp"
#include "m3dbfs/losses.hpp"

namespace m3dbfs {

/// Every tunable of the library in one flat record. Parsed from line-based
/// `key = value` files; unset keys keep the defaults below.
struct RunConfig {
    // synthetic data
    std::size_t n_samples = 40;
    std::size_t regions = 30;
    std::size_t timepoints = 120;
    double class_gap = 2.0;
    double noise = 1.0;

    // graph construction
    double fc_density = 0.2;
    double sc_threshold = 0.0;

    // model
    std::size_t encoder_layers = 2;
    std::size_t encoder_hidden = 64;
    std::size_t embed_dim = 32;
    std::size_t expert_hidden = 64;
    std::size_t experts = 4;
    std::size_t k_top = 1;
    std::size_t moe_depth = 2;
    bool warm_start = false;   // init stage-2 encoders from the stage-1 weights
    bool moe_balance = true;   // keep the importance/load balance term in stage 3

    // loss temperatures and mixing weights
    double tau = 4.0;
    double tau_c = 0.5;
    double tau_d = 0.5;
    double alpha = 0.6;
    double beta = 0.3;

    // optimization
    double lr = 0.005;
    double weight_decay = 0.0001;
    std::size_t max_epochs = 500;
    std::size_t patience = 300;
    std::size_t batch = 16;
    double val_fraction = 0.1;   // early-stopping holdout carved from the train set
    double test_fraction = 0.2;  // train command's final holdout
    std::size_t threads = 1;
    std::uint64_t seed = 7;

    // paths
    std::string data_dir = "data";
    std::string out_dir = "runs";

    /// Cross-field range checks; throws std::runtime_error on violation.
    void validate() const;

    LossConfig loss_config() const;
    SynthConfig synth_config() const;
    ThresholdOptions threshold_options() const;
};

/// Parse `key = value` lines; `#` starts a comment, blank lines are skipped.
/// Unknown keys, unparsable values, and range violations are reported with the
/// line number. Missing keys keep their defaults; an empty file is valid.
RunConfig parse_config(const std::string& path);
/// Same grammar over an in-memory string; `origin` names the source in errors.
RunConfig parse_config_text(const std::string& text, const std::string& origin);
/// Optional config file layered under `key=value` override assignments (the
/// command line's --set); cross-field checks run once everything is applied.
RunConfig parse_config_with_overrides(const std::string& path,
                                      const std::vector<std::string>& overrides);

/// Full effective configuration as config-file text. Doubles are printed with
/// shortest round-trip precision, so parse_config_text(config_echo(c)) == c.
std::string config_echo(const RunConfig& cfg);

}  // namespace m3dbfs
