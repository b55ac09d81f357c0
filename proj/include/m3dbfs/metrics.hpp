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
#include <vector>

namespace m3dbfs {

/// Binary-classification metrics. A metric whose denominator is empty (e.g.
/// sensitivity without positive samples) is flagged undefined rather than
/// silently zeroed.
struct Metrics {
    double acc = 0.0;
    double sen = 0.0;
    double spe = 0.0;
    double f1 = 0.0;
    double auc = 0.0;
    bool sen_defined = false;
    bool spe_defined = false;
    bool f1_defined = false;
    bool auc_defined = false;
};

/// Confusion-count metrics plus rank-statistic AUC. scores are class-1
/// probabilities (or any monotone score); ties contribute through midranks.
Metrics compute_metrics(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                        const std::vector<double>& scores);

/// Midrank (Mann-Whitney) AUC. Requires both classes present.
double auc_midrank(const std::vector<int>& y_true, const std::vector<double>& scores);

/// Aggregate repeated runs into a TSV table `metric<TAB>mean<TAB>std`, values
/// as percentages with two decimals; undefined metrics are skipped per run.
/// The std is the population standard deviation across runs.
std::string metrics_table_tsv(const std::vector<Metrics>& runs);

/// Table-style "81.21 ± 0.85" formatting of a percent mean/std pair.
std::string format_mean_std(double mean_pct, double std_pct);

}  // namespace m3dbfs
