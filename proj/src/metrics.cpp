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
#include "m3dbfs/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace m3dbfs {

double auc_midrank(const std::vector<int>& y_true, const std::vector<double>& scores) {
    if (y_true.size() != scores.size() || y_true.empty())
        throw std::invalid_argument("auc_midrank: size mismatch or empty input");
    std::size_t n = y_true.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Midranks: tied scores share the average of their 1-based rank range.
    std::vector<double> rank(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        double mid = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
        i = j + 1;
    }
    double pos = 0.0, rank_sum = 0.0;
    for (std::size_t k = 0; k < n; ++k)
        if (y_true[k] == 1) {
            pos += 1.0;
            rank_sum += rank[k];
        }
    double neg = static_cast<double>(n) - pos;
    if (pos == 0.0 || neg == 0.0)
        throw std::invalid_argument("auc_midrank: both classes required");
    return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

Metrics compute_metrics(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                        const std::vector<double>& scores) {
    if (y_true.empty() || y_true.size() != y_pred.size() || y_true.size() != scores.size())
        throw std::invalid_argument("compute_metrics: size mismatch or empty input");
    double tp = 0, tn = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        if (y_true[i] == 1)
            (y_pred[i] == 1 ? tp : fn) += 1;
        else
            (y_pred[i] == 1 ? fp : tn) += 1;
    }
    Metrics m;
    m.acc = (tp + tn) / static_cast<double>(y_true.size());
    if (tp + fn > 0) {
        m.sen = tp / (tp + fn);
        m.sen_defined = true;
    }
    if (tn + fp > 0) {
        m.spe = tn / (tn + fp);
        m.spe_defined = true;
    }
    if (2 * tp + fp + fn > 0) {
        m.f1 = 2 * tp / (2 * tp + fp + fn);
        m.f1_defined = true;
    }
    if (tp + fn > 0 && tn + fp > 0) {
        m.auc = auc_midrank(y_true, scores);
        m.auc_defined = true;
    }
    return m;
}

std::string metrics_table_tsv(const std::vector<Metrics>& runs) {
    if (runs.empty()) throw std::invalid_argument("metrics_table_tsv: no runs");
    struct Col {
        const char* name;
        double Metrics::* value;
        bool Metrics::* defined;
    };
    const Col cols[] = {
        {"ACC", &Metrics::acc, nullptr},  // accuracy is always defined
        {"SEN", &Metrics::sen, &Metrics::sen_defined},
        {"SPE", &Metrics::spe, &Metrics::spe_defined},
        {"F1", &Metrics::f1, &Metrics::f1_defined},
        {"AUC", &Metrics::auc, &Metrics::auc_defined},
    };
    std::string out = "metric\tmean\tstd\n";
    char buf[64];
    for (const Col& c : cols) {
        std::vector<double> vals;
        for (const Metrics& m : runs)
            if (c.defined == nullptr || m.*(c.defined)) vals.push_back(m.*(c.value) * 100.0);
        if (vals.empty()) continue;
        double mean = std::accumulate(vals.begin(), vals.end(), 0.0) /
                      static_cast<double>(vals.size());
        double var = 0.0;
        for (double v : vals) var += (v - mean) * (v - mean);
        double sd = std::sqrt(var / static_cast<double>(vals.size()));
        std::snprintf(buf, sizeof buf, "%s\t%.2f\t%.2f\n", c.name, mean, sd);
        out += buf;
    }
    return out;
}

std::string format_mean_std(double mean_pct, double std_pct) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f +/- %.2f", mean_pct, std_pct);
    return buf;
}

}  // namespace m3dbfs
