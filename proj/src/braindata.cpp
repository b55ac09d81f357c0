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
#include "m3dbfs/braindata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "m3dbfs/rng.hpp"

namespace m3dbfs {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::runtime_error(msg);
}

void check_symmetric(const std::vector<double>& v, std::size_t n, double tol,
                     const std::string& who) {
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (std::fabs(v[i * n + j] - v[j * n + i]) > tol)
                throw std::runtime_error(who + ": asymmetric at (" + std::to_string(i) +
                                         ", " + std::to_string(j) + ")");
}

}  // namespace

void ConnectivityMatrix::validate() const {
    require(size > 0 && values.size() == size * size,
            "ConnectivityMatrix: shape mismatch");
    check_symmetric(values, size, 1e-9, "ConnectivityMatrix");
    if (kind == ConnKind::functional) {
        for (std::size_t i = 0; i < size; ++i)
            require(values[i * size + i] == 1.0,
                    "ConnectivityMatrix: functional diagonal must be 1 at region " +
                        std::to_string(i));
        for (double v : values)
            require(v >= -1.0 && v <= 1.0,
                    "ConnectivityMatrix: functional entry outside [-1, 1]");
    } else {
        for (double v : values)
            require(v >= 0.0, "ConnectivityMatrix: negative structural entry");
    }
}

std::size_t Adjacency::edge_count() const {
    std::size_t c = 0;
    for (std::size_t i = 0; i < size; ++i)
        for (std::size_t j = i + 1; j < size; ++j)
            if (values[i * size + j] != 0.0) ++c;
    return c;
}

ConnectivityMatrix pearson_fc(const TimeSeries& ts) {
    std::size_t n = ts.regions, t = ts.timepoints;
    require(n > 0 && t >= 2 && ts.values.size() == n * t,
            "pearson_fc: need at least two timepoints");
    std::vector<double> mean(n, 0.0), ssd(n, 0.0);
    std::vector<double> centered(n * t);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t s = 0; s < t; ++s) mean[i] += ts.at(i, s);
        mean[i] /= static_cast<double>(t);
        for (std::size_t s = 0; s < t; ++s) {
            double c = ts.at(i, s) - mean[i];
            centered[i * t + s] = c;
            ssd[i] += c * c;
        }
        if (ssd[i] == 0.0)
            throw std::runtime_error("pearson_fc: region " + std::to_string(i) +
                                     " has a constant time series");
    }
    ConnectivityMatrix out;
    out.size = n;
    out.kind = ConnKind::functional;
    out.values.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        out.values[i * n + i] = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t s = 0; s < t; ++s) dot += centered[i * t + s] * centered[j * t + s];
            double r = dot / std::sqrt(ssd[i] * ssd[j]);
            r = std::clamp(r, -1.0, 1.0);  // guard rounding overshoot
            out.values[i * n + j] = r;
            out.values[j * n + i] = r;
        }
    }
    return out;
}

Adjacency threshold_proportional(const ConnectivityMatrix& m, double density) {
    require(density > 0.0 && density <= 1.0,
            "threshold_proportional: density must be in (0, 1]");
    std::size_t n = m.size;
    check_symmetric(m.values, n, 1e-9, "threshold_proportional");
    std::size_t pairs = n * (n - 1) / 2;
    // Small slack so exact-arithmetic ceilings survive binary rounding of
    // density * pairs (e.g. 0.2 * 435).
    auto keep = static_cast<std::size_t>(
        std::ceil(density * static_cast<double>(pairs) - 1e-9));
    struct Entry {
        double mag;
        std::size_t i, j;
    };
    std::vector<Entry> order;
    order.reserve(pairs);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            order.push_back({std::fabs(m.at(i, j)), i, j});
    std::sort(order.begin(), order.end(), [](const Entry& a, const Entry& b) {
        if (a.mag != b.mag) return a.mag > b.mag;
        if (a.i != b.i) return a.i < b.i;
        return a.j < b.j;
    });
    Adjacency adj;
    adj.size = n;
    adj.values.assign(n * n, 0.0);
    for (std::size_t e = 0; e < keep && e < order.size(); ++e) {
        adj.values[order[e].i * n + order[e].j] = 1.0;
        adj.values[order[e].j * n + order[e].i] = 1.0;
    }
    return adj;
}

Adjacency threshold_absolute(const ConnectivityMatrix& m, double t) {
    require(m.kind == ConnKind::structural,
            "threshold_absolute: structural input required");
    std::size_t n = m.size;
    Adjacency adj;
    adj.size = n;
    adj.values.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (m.at(i, j) > t) {
                adj.values[i * n + j] = 1.0;
                adj.values[j * n + i] = 1.0;
            }
    return adj;
}

BrainGraph build_graph(const ConnectivityMatrix& m, const Adjacency& adj) {
    require(m.size == adj.size, "build_graph: connectivity is " + std::to_string(m.size) +
                                    "x" + std::to_string(m.size) + " but adjacency is " +
                                    std::to_string(adj.size) + "x" + std::to_string(adj.size));
    BrainGraph g;
    g.modality = m.kind == ConnKind::structural ? Modality::sc : Modality::fc;
    g.regions = m.size;
    g.adjacency = adj.values;
    g.features = m.values;  // connectivity rows verbatim; feature dim = N
    bool all_zero = std::all_of(m.values.begin(), m.values.end(),
                                [](double v) { return v == 0.0; });
    if (all_zero)
        std::cerr << "build_graph: warning: all-zero connectivity, graph has no signal\n";
    return g;
}

Dataset synth_generate(const SynthConfig& cfg) {
    require(cfg.n_samples >= 4, "synth_generate: n_samples must be >= 4");
    require(cfg.regions >= 8, "synth_generate: regions must be >= 8");
    require(cfg.timepoints >= 2, "synth_generate: timepoints must be >= 2");
    require(cfg.class_gap >= 0.0 && cfg.noise >= 0.0,
            "synth_generate: class_gap and noise must be nonnegative");
    std::size_t n = cfg.regions, t = cfg.timepoints;
    std::size_t half = n / 2;  // shared two-community partition
    Dataset d;
    d.region_count = n;
    d.samples.reserve(cfg.n_samples);
    for (std::size_t s = 0; s < cfg.n_samples; ++s) {
        int label = static_cast<int>(s % 2);  // balanced within one
        Rng rng = derive_rng(cfg.seed, "synth/sample/" + std::to_string(s));
        // Structural counts: Poisson block model; class 1 strengthens the
        // in-community mean by class_gap.
        double lam_in = 8.0 + (label == 1 ? cfg.class_gap : 0.0);
        double lam_cross = 2.0;
        ConnectivityMatrix sc;
        sc.size = n;
        sc.kind = ConnKind::structural;
        sc.values.assign(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
                bool same = (i < half) == (j < half);
                double f = static_cast<double>(rng.poisson(same ? lam_in : lam_cross));
                sc.values[i * n + j] = f;
                sc.values[j * n + i] = f;
            }
        // Functional series: one latent factor per community; class 1 couples
        // more strongly, so in-community correlation rises with class_gap.
        double w = 1.0 + (label == 1 ? 0.5 * cfg.class_gap : 0.0);
        std::vector<double> z0(t), z1(t);
        for (std::size_t p = 0; p < t; ++p) {
            z0[p] = rng.normal();
            z1[p] = rng.normal();
        }
        TimeSeries ts;
        ts.regions = n;
        ts.timepoints = t;
        ts.values.resize(n * t);
        for (std::size_t i = 0; i < n; ++i) {
            const std::vector<double>& z = i < half ? z0 : z1;
            for (std::size_t p = 0; p < t; ++p)
                ts.values[i * t + p] = w * z[p] + cfg.noise * rng.normal();
        }
        ConnectivityMatrix fc = pearson_fc(ts);
        Sample sample;
        char idbuf[16];
        std::snprintf(idbuf, sizeof idbuf, "s%04zu", s);
        sample.id = idbuf;
        sample.label = label;
        sample.sc = build_graph(sc, threshold_absolute(sc, 0.0));
        sample.fc = build_graph(fc, threshold_proportional(fc, 0.2));
        d.samples.push_back(std::move(sample));
    }
    return d;
}

void rethreshold(Dataset& d, const ThresholdOptions& opts) {
    for (Sample& s : d.samples) {
        ConnectivityMatrix sc{s.sc.regions, ConnKind::structural, s.sc.features};
        ConnectivityMatrix fc{s.fc.regions, ConnKind::functional, s.fc.features};
        s.sc.adjacency = threshold_absolute(sc, opts.sc_threshold).values;
        s.fc.adjacency = threshold_proportional(fc, opts.fc_density).values;
    }
}

void write_matrix_csv(const std::string& path, const std::vector<double>& values,
                      std::size_t rows, std::size_t cols) {
    require(values.size() == rows * cols, "write_matrix_csv: shape mismatch");
    std::ofstream out(path, std::ios::binary);  // binary keeps LF endings
    require(out.good(), "write_matrix_csv: cannot open " + path);
    char buf[32];
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", values[i * cols + j]);
            if (j) out << ',';
            out << buf;
        }
        out << '\n';
    }
    require(out.good(), "write_matrix_csv: write failed for " + path);
}

std::vector<double> read_matrix_csv(const std::string& path, std::size_t& rows,
                                    std::size_t& cols) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "read_matrix_csv: cannot open " + path);
    std::vector<double> values;
    rows = 0;
    cols = 0;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::size_t count = 0;
        std::size_t pos = 0;
        while (true) {
            std::size_t comma = line.find(',', pos);
            std::string cell = line.substr(pos, comma == std::string::npos
                                                    ? std::string::npos
                                                    : comma - pos);
            try {
                std::size_t used = 0;
                double v = std::stod(cell, &used);
                if (used != cell.size()) throw std::invalid_argument(cell);
                values.push_back(v);
            } catch (const std::exception&) {
                throw std::runtime_error("read_matrix_csv: parse error at " + path + ":" +
                                         std::to_string(lineno) + ": '" + cell + "'");
            }
            ++count;
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (rows == 0)
            cols = count;
        else if (count != cols)
            throw std::runtime_error("read_matrix_csv: parse error at " + path + ":" +
                                     std::to_string(lineno) + ": expected " +
                                     std::to_string(cols) + " columns, got " +
                                     std::to_string(count));
        ++rows;
    }
    require(rows > 0, "read_matrix_csv: empty file " + path);
    return values;
}

void save_dataset(const Dataset& d, const std::string& dir) {
    require(!d.samples.empty(), "save_dataset: empty dataset");
    std::filesystem::create_directories(dir);
    std::ofstream man(dir + "/manifest.tsv", std::ios::binary);
    require(man.good(), "save_dataset: cannot open " + dir + "/manifest.tsv");
    man << "id\tlabel\tsc_file\tfc_file\n";
    for (const Sample& s : d.samples) {
        std::string sc_file = s.id + "_sc.csv";
        std::string fc_file = s.id + "_fc.csv";
        man << s.id << '\t' << s.label << '\t' << sc_file << '\t' << fc_file << '\n';
        // Features hold the connectivity verbatim, so adjacency is recoverable
        // at load and only one matrix per modality needs to be stored.
        write_matrix_csv(dir + "/" + sc_file, s.sc.features, s.sc.regions, s.sc.regions);
        write_matrix_csv(dir + "/" + fc_file, s.fc.features, s.fc.regions, s.fc.regions);
    }
    require(man.good(), "save_dataset: write failed for manifest.tsv");
}

Dataset load_dataset(const std::string& dir, const ThresholdOptions& opts) {
    std::string man_path = dir + "/manifest.tsv";
    std::ifstream man(man_path, std::ios::binary);
    require(man.good(), "load_dataset: cannot open " + man_path);
    std::string line;
    require(static_cast<bool>(std::getline(man, line)), "load_dataset: empty manifest " + man_path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    bool has_ts = line == "id\tlabel\tsc_file\tfc_file\tts_file";
    require(has_ts || line == "id\tlabel\tsc_file\tfc_file",
            "load_dataset: bad manifest header in " + man_path);
    Dataset d;
    std::size_t lineno = 1;
    while (std::getline(man, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t pos = 0;
        while (true) {
            std::size_t tab = line.find('\t', pos);
            fields.push_back(line.substr(pos, tab == std::string::npos ? std::string::npos
                                                                       : tab - pos));
            if (tab == std::string::npos) break;
            pos = tab + 1;
        }
        require(fields.size() == (has_ts ? 5u : 4u),
                "load_dataset: malformed manifest row at " + man_path + ":" +
                    std::to_string(lineno));
        int label = 0;
        try {
            label = std::stoi(fields[1]);
        } catch (const std::exception&) {
            throw std::runtime_error("load_dataset: bad label at " + man_path + ":" +
                                     std::to_string(lineno));
        }
        require(label == 0 || label == 1, "load_dataset: label must be 0 or 1 at " +
                                              man_path + ":" + std::to_string(lineno));
        auto load_matrix = [&](const std::string& rel, ConnKind kind) {
            std::string path = dir + "/" + rel;
            if (!std::filesystem::exists(path))
                throw std::runtime_error("load_dataset: missing matrix file " + path);
            std::size_t r = 0, c = 0;
            ConnectivityMatrix m;
            m.values = read_matrix_csv(path, r, c);
            require(r == c, "load_dataset: non-square matrix in " + path);
            m.size = r;
            m.kind = kind;
            m.validate();
            return m;
        };
        ConnectivityMatrix sc = load_matrix(fields[2], ConnKind::structural);
        ConnectivityMatrix fc = load_matrix(fields[3], ConnKind::functional);
        require(sc.size == fc.size, "load_dataset: SC/FC region counts disagree for " +
                                        fields[0]);
        if (d.region_count == 0)
            d.region_count = sc.size;
        else
            require(sc.size == d.region_count,
                    "load_dataset: inconsistent region count for " + fields[0]);
        Sample s;
        s.id = fields[0];
        s.label = label;
        s.sc = build_graph(sc, threshold_absolute(sc, opts.sc_threshold));
        s.fc = build_graph(fc, threshold_proportional(fc, opts.fc_density));
        d.samples.push_back(std::move(s));
    }
    require(!d.samples.empty(), "load_dataset: no samples in " + man_path);
    return d;
}

std::vector<FoldSplit> kfold_split(std::size_t n, std::size_t k,
                                   const std::vector<int>& labels, std::uint64_t seed) {
    require(labels.size() == n, "kfold_split: labels length mismatch");
    require(k >= 2, "kfold_split: k must be >= 2");
    require(k <= n, "kfold_split: k exceeds sample count");
    std::vector<std::size_t> by_class[2];
    for (std::size_t i = 0; i < n; ++i) {
        require(labels[i] == 0 || labels[i] == 1, "kfold_split: labels must be 0/1");
        by_class[labels[i]].push_back(i);
    }
    require(!by_class[0].empty() && !by_class[1].empty(),
            "kfold_split: both classes must be present");
    std::vector<std::vector<std::size_t>> folds(k);
    // Remainder slots rotate across classes so total fold sizes differ by at
    // most one even when both per-class remainders land unevenly.
    std::size_t next_extra = 0;
    for (int c = 0; c < 2; ++c) {
        Rng rng = derive_rng(seed, std::string("kfold/class/") + std::to_string(c));
        std::vector<std::size_t>& idx = by_class[c];
        rng.shuffle(idx);
        std::size_t base = idx.size() / k, rem = idx.size() % k;
        std::vector<std::size_t> take(k, base);
        for (std::size_t r = 0; r < rem; ++r) take[(next_extra + r) % k] += 1;
        next_extra = (next_extra + rem) % k;
        std::size_t at = 0;
        for (std::size_t f = 0; f < k; ++f)
            for (std::size_t c2 = 0; c2 < take[f]; ++c2) folds[f].push_back(idx[at++]);
    }
    std::vector<FoldSplit> out(k);
    for (std::size_t f = 0; f < k; ++f) {
        std::sort(folds[f].begin(), folds[f].end());
        out[f].test_idx = folds[f];
        for (std::size_t g = 0; g < k; ++g)
            if (g != f)
                out[f].train_idx.insert(out[f].train_idx.end(), folds[g].begin(),
                                        folds[g].end());
        std::sort(out[f].train_idx.begin(), out[f].train_idx.end());
    }
    return out;
}

}  // namespace m3dbfs
