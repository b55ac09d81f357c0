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
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "m3dbfs/braindata.hpp"
#include "m3dbfs/rng.hpp"

using namespace m3dbfs;
namespace fs = std::filesystem;

namespace {

TimeSeries random_series(std::size_t n, std::size_t t, Rng& rng) {
    TimeSeries ts;
    ts.regions = n;
    ts.timepoints = t;
    ts.values.resize(n * t);
    for (double& v : ts.values) v = rng.normal();
    return ts;
}

// Textbook product-moment formula, algebraically distinct from the centered
// accumulation used by the implementation.
double pearson_oracle(const TimeSeries& ts, std::size_t a, std::size_t b) {
    double t = static_cast<double>(ts.timepoints);
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (std::size_t s = 0; s < ts.timepoints; ++s) {
        double x = ts.at(a, s), y = ts.at(b, s);
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
    }
    return (t * sxy - sx * sy) /
           std::sqrt((t * sxx - sx * sx) * (t * syy - sy * sy));
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("m3dbfs_test_" + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

double mean_off_diagonal(const std::vector<double>& m, std::size_t n) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) s += m[i * n + j];
    return s / static_cast<double>(n * (n - 1));
}

// Threshold classifier on the per-sample mean structural edge weight: train on
// the first half, test on the second. Used as a separability oracle.
double probe_accuracy(const Dataset& d) {
    std::size_t n = d.samples.size(), half = n / 2;
    double m0 = 0, m1 = 0;
    std::size_t c0 = 0, c1 = 0;
    auto stat = [&](const Sample& s) {
        return mean_off_diagonal(s.sc.features, s.sc.regions);
    };
    for (std::size_t i = 0; i < half; ++i) {
        if (d.samples[i].label == 0) {
            m0 += stat(d.samples[i]);
            ++c0;
        } else {
            m1 += stat(d.samples[i]);
            ++c1;
        }
    }
    m0 /= static_cast<double>(c0);
    m1 /= static_cast<double>(c1);
    double thr = 0.5 * (m0 + m1);
    bool high_is_one = m1 > m0;
    std::size_t hits = 0;
    for (std::size_t i = half; i < n; ++i) {
        int pred = (stat(d.samples[i]) > thr) == high_is_one ? 1 : 0;
        if (pred == d.samples[i].label) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n - half);
}

}  // namespace

TEST_CASE("pearson matches hand values and the product-moment oracle") {
    TimeSeries ts;
    ts.regions = 2;
    ts.timepoints = 5;
    ts.values = {1, 2, 3, 4, 5, /* 2x+3 */ 5, 7, 9, 11, 13};
    auto fc = pearson_fc(ts);
    CHECK(fc.at(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(fc.at(0, 0) == 1.0);
    CHECK(fc.at(1, 1) == 1.0);

    ts.values = {1, 2, 3, 4, 5, -1, -2, -3, -4, -5};
    CHECK(pearson_fc(ts).at(0, 1) == doctest::Approx(-1.0).epsilon(1e-12));

    Rng rng(21);
    auto big = random_series(5, 100, rng);
    auto m = pearson_fc(big);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
            CHECK(m.at(i, j) == m.at(j, i));
            if (i != j)
                CHECK(std::fabs(m.at(i, j) - pearson_oracle(big, i, j)) < 1e-10);
        }
    m.validate();
}

TEST_CASE("pearson is invariant under per-row affine rescaling") {
    Rng rng(22);
    auto ts = random_series(6, 80, rng);
    auto base = pearson_fc(ts);
    TimeSeries scaled = ts;
    for (std::size_t i = 0; i < ts.regions; ++i) {
        double a = rng.uniform(0.5, 3.0), b = rng.uniform(-5.0, 5.0);
        for (std::size_t s = 0; s < ts.timepoints; ++s)
            scaled.values[i * ts.timepoints + s] = a * ts.at(i, s) + b;
    }
    auto again = pearson_fc(scaled);
    for (std::size_t i = 0; i < base.values.size(); ++i)
        CHECK(std::fabs(base.values[i] - again.values[i]) < 1e-9);
}

TEST_CASE("pearson rejects constant rows naming the region") {
    TimeSeries ts;
    ts.regions = 3;
    ts.timepoints = 4;
    ts.values = {1, 2, 3, 4, 7, 7, 7, 7, 0, 1, 0, 1};
    try {
        pearson_fc(ts);
        FAIL("expected error");
    } catch (const std::exception& e) {
        CHECK(std::string(e.what()).find("region 1") != std::string::npos);
    }
}

TEST_CASE("proportional threshold keeps the largest magnitudes") {
    ConnectivityMatrix m;
    m.size = 4;
    m.kind = ConnKind::functional;
    // Upper triangle magnitudes: (0,1)=.9 (0,2)=.1 (0,3)=.5 (1,2)=.7 (1,3)=.2 (2,3)=.4
    m.values = {1, .9, -.1, .5,
                .9, 1, .7, -.2,
                -.1, .7, 1, .4,
                .5, -.2, .4, 1};
    auto adj = threshold_proportional(m, 0.5);
    CHECK(adj.edge_count() == 3);

    // Brute-force oracle: sort the six pairs by |value|.
    struct P {
        double mag;
        std::size_t i, j;
    };
    std::vector<P> pairs;
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = i + 1; j < 4; ++j)
            pairs.push_back({std::fabs(m.at(i, j)), i, j});
    std::sort(pairs.begin(), pairs.end(), [](const P& a, const P& b) { return a.mag > b.mag; });
    for (std::size_t e = 0; e < 3; ++e) CHECK(adj.at(pairs[e].i, pairs[e].j) == 1.0);
    for (std::size_t e = 3; e < 6; ++e) CHECK(adj.at(pairs[e].i, pairs[e].j) == 0.0);

    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(adj.at(i, i) == 0.0);
        for (std::size_t j = 0; j < 4; ++j) CHECK(adj.at(i, j) == adj.at(j, i));
    }

    auto full = threshold_proportional(m, 1.0);
    CHECK(full.edge_count() == 6);

    CHECK_THROWS(threshold_proportional(m, 0.0));
    CHECK_THROWS(threshold_proportional(m, 1.5));
}

TEST_CASE("proportional threshold tie rule prefers lexicographically smaller pairs") {
    ConnectivityMatrix m;
    m.size = 4;
    m.kind = ConnKind::functional;
    m.values.assign(16, 0.5);
    for (std::size_t i = 0; i < 4; ++i) m.values[i * 4 + i] = 1.0;
    auto adj = threshold_proportional(m, 0.5);
    CHECK(adj.edge_count() == 3);
    CHECK(adj.at(0, 1) == 1.0);
    CHECK(adj.at(0, 2) == 1.0);
    CHECK(adj.at(0, 3) == 1.0);
    CHECK(adj.at(1, 2) == 0.0);
}

TEST_CASE("proportional threshold edge count is exact under binary rounding") {
    Rng rng(31);
    ConnectivityMatrix m;
    m.size = 30;
    m.kind = ConnKind::functional;
    m.values.assign(30 * 30, 0.0);
    for (std::size_t i = 0; i < 30; ++i) {
        m.values[i * 30 + i] = 1.0;
        for (std::size_t j = i + 1; j < 30; ++j) {
            double v = rng.uniform(-1.0, 1.0);
            m.values[i * 30 + j] = v;
            m.values[j * 30 + i] = v;
        }
    }
    // 0.2 * 435 rounds up in binary floating point; the ceiling must still be 87.
    CHECK(threshold_proportional(m, 0.2).edge_count() == 87);
}

TEST_CASE("absolute threshold is a strict elementwise comparison") {
    Rng rng(32);
    ConnectivityMatrix m;
    m.size = 8;
    m.kind = ConnKind::structural;
    m.values.assign(64, 0.0);
    double maxv = 0.0;
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = i + 1; j < 8; ++j) {
            double v = std::floor(rng.uniform(0.0, 20.0));
            m.values[i * 8 + j] = v;
            m.values[j * 8 + i] = v;
            maxv = std::max(maxv, v);
        }
    CHECK(threshold_absolute(m, -1.0).edge_count() == 28);
    CHECK(threshold_absolute(m, maxv).edge_count() == 0);

    double t = 9.5;
    auto adj = threshold_absolute(m, t);
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) {
            double want = (i != j && m.at(i, j) > t) ? 1.0 : 0.0;
            CHECK(adj.at(i, j) == want);
        }

    ConnectivityMatrix fcm;
    fcm.size = 2;
    fcm.kind = ConnKind::functional;
    fcm.values = {1, 0, 0, 1};
    CHECK_THROWS(threshold_absolute(fcm, 0.0));
}

TEST_CASE("build_graph copies connectivity rows into features") {
    ConnectivityMatrix m;
    m.size = 4;
    m.kind = ConnKind::structural;
    m.values = {0, 3, 1, 0, 3, 0, 2, 5, 1, 2, 0, 4, 0, 5, 4, 0};
    auto adj = threshold_absolute(m, 1.5);
    auto g = build_graph(m, adj);
    CHECK(g.modality == Modality::sc);
    CHECK(g.regions == 4);
    CHECK(g.features == m.values);
    CHECK(g.adjacency == adj.values);

    Adjacency wrong;
    wrong.size = 3;
    wrong.values.assign(9, 0.0);
    CHECK_THROWS(build_graph(m, wrong));
}

TEST_CASE("synthetic generation is deterministic and well formed") {
    SynthConfig cfg;
    cfg.n_samples = 8;
    cfg.regions = 12;
    cfg.timepoints = 40;
    cfg.seed = 5;
    auto a = synth_generate(cfg);
    auto b = synth_generate(cfg);
    REQUIRE(a.samples.size() == 8);
    CHECK(a.region_count == 12);
    int ones = 0;
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        const Sample &x = a.samples[i], &y = b.samples[i];
        CHECK(x.id == y.id);
        CHECK(x.label == y.label);
        CHECK(x.sc.features == y.sc.features);
        CHECK(x.fc.features == y.fc.features);
        CHECK(x.sc.adjacency == y.sc.adjacency);
        CHECK(x.fc.adjacency == y.fc.adjacency);
        ones += x.label;
        ConnectivityMatrix fc{x.fc.regions, ConnKind::functional, x.fc.features};
        fc.validate();
        ConnectivityMatrix sc{x.sc.regions, ConnKind::structural, x.sc.features};
        sc.validate();
        for (std::size_t r = 0; r < x.sc.regions; ++r) {
            CHECK(x.sc.adjacency[r * x.sc.regions + r] == 0.0);
            CHECK(x.fc.adjacency[r * x.fc.regions + r] == 0.0);
        }
    }
    CHECK(ones == 4);
    CHECK_THROWS(synth_generate(SynthConfig{2, 12, 40, 1.0, 1.0, 5}));
    CHECK_THROWS(synth_generate(SynthConfig{8, 4, 40, 1.0, 1.0, 5}));
}

TEST_CASE("class gap controls probe separability") {
    double chance_sum = 0.0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        SynthConfig cfg;
        cfg.n_samples = 40;
        cfg.regions = 16;
        cfg.timepoints = 60;
        cfg.class_gap = 0.0;
        cfg.seed = 100 + s;
        chance_sum += probe_accuracy(synth_generate(cfg));
    }
    double chance = chance_sum / 10.0;
    CHECK(chance > 0.4);
    CHECK(chance < 0.6);

    for (std::uint64_t s = 0; s < 3; ++s) {
        SynthConfig cfg;
        cfg.n_samples = 40;
        cfg.regions = 16;
        cfg.timepoints = 60;
        cfg.class_gap = 3.0;
        cfg.seed = 200 + s;
        CHECK(probe_accuracy(synth_generate(cfg)) >= 0.9);
    }
}

TEST_CASE("dataset save and load round trips bit-exactly") {
    SynthConfig cfg;
    cfg.n_samples = 6;
    cfg.regions = 12;
    cfg.timepoints = 40;
    cfg.seed = 77;
    auto d = synth_generate(cfg);
    TempDir tmp("roundtrip");
    save_dataset(d, tmp.path.string());
    auto back = load_dataset(tmp.path.string());
    REQUIRE(back.samples.size() == d.samples.size());
    CHECK(back.region_count == d.region_count);
    for (std::size_t i = 0; i < d.samples.size(); ++i) {
        CHECK(back.samples[i].id == d.samples[i].id);
        CHECK(back.samples[i].label == d.samples[i].label);
        CHECK(back.samples[i].sc.features == d.samples[i].sc.features);
        CHECK(back.samples[i].fc.features == d.samples[i].fc.features);
        CHECK(back.samples[i].sc.adjacency == d.samples[i].sc.adjacency);
        CHECK(back.samples[i].fc.adjacency == d.samples[i].fc.adjacency);
    }

    // Different thresholds change adjacency only.
    ThresholdOptions denser{0.5, 2.0};
    auto alt = load_dataset(tmp.path.string(), denser);
    CHECK(alt.samples[0].fc.features == d.samples[0].fc.features);
    Adjacency fc_adj{alt.samples[0].fc.regions, alt.samples[0].fc.adjacency};
    std::size_t pairs = cfg.regions * (cfg.regions - 1) / 2;
    CHECK(fc_adj.edge_count() ==
          static_cast<std::size_t>(std::ceil(0.5 * static_cast<double>(pairs) - 1e-9)));

    auto re = d;
    rethreshold(re, denser);
    CHECK(re.samples[0].fc.adjacency == alt.samples[0].fc.adjacency);
    CHECK(re.samples[0].sc.adjacency == alt.samples[0].sc.adjacency);
}

TEST_CASE("loader reports missing files and malformed rows") {
    TempDir tmp("badmanifest");
    {
        std::ofstream man(tmp.path / "manifest.tsv", std::ios::binary);
        man << "id\tlabel\tsc_file\tfc_file\n";
        man << "s0\t0\tnope_sc.csv\tnope_fc.csv\n";
    }
    try {
        load_dataset(tmp.path.string());
        FAIL("expected error");
    } catch (const std::exception& e) {
        CHECK(std::string(e.what()).find("nope_sc.csv") != std::string::npos);
    }

    TempDir tmp2("badmatrix");
    {
        std::ofstream man(tmp2.path / "manifest.tsv", std::ios::binary);
        man << "id\tlabel\tsc_file\tfc_file\n";
        man << "s0\t0\tm_sc.csv\tm_fc.csv\n";
        std::ofstream sc(tmp2.path / "m_sc.csv", std::ios::binary);
        sc << "0,1\n1,0,7\n";  // ragged second row
        std::ofstream fc(tmp2.path / "m_fc.csv", std::ios::binary);
        fc << "1,0\n0,1\n";
    }
    try {
        load_dataset(tmp2.path.string());
        FAIL("expected error");
    } catch (const std::exception& e) {
        std::string msg = e.what();
        CHECK(msg.find(":2") != std::string::npos);
        CHECK(msg.find("columns") != std::string::npos);
    }
}

TEST_CASE("stratified folds are disjoint, exhaustive, and balanced") {
    std::vector<int> labels64 = {0, 0, 0, 0, 0, 0, 1, 1, 1, 1};
    auto singles = kfold_split(10, 10, labels64, 3);
    REQUIRE(singles.size() == 10);
    for (const auto& f : singles) CHECK(f.test_idx.size() == 1);

    auto thirds = kfold_split(10, 3, labels64, 3);
    std::multiset<std::size_t> sizes;
    for (const auto& f : thirds) sizes.insert(f.test_idx.size());
    CHECK(sizes == std::multiset<std::size_t>({3, 3, 4}));

    std::vector<int> balanced = {0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
    auto thirds2 = kfold_split(10, 3, balanced, 9);
    sizes.clear();
    for (const auto& f : thirds2) sizes.insert(f.test_idx.size());
    CHECK(sizes == std::multiset<std::size_t>({3, 3, 4}));

    auto halves = kfold_split(10, 2, labels64, 4);
    for (const auto& f : halves) {
        std::size_t c0 = 0, c1 = 0;
        for (auto i : f.test_idx) (labels64[i] == 0 ? c0 : c1) += 1;
        CHECK(c0 == 3);
        CHECK(c1 == 2);
    }

    // Disjoint and exhaustive; train is the complement of test.
    std::set<std::size_t> seen;
    for (const auto& f : thirds) {
        for (auto i : f.test_idx) {
            CHECK(seen.insert(i).second);
            CHECK(std::find(f.train_idx.begin(), f.train_idx.end(), i) == f.train_idx.end());
        }
        CHECK(f.train_idx.size() + f.test_idx.size() == 10);
    }
    CHECK(seen.size() == 10);

    auto again = kfold_split(10, 3, labels64, 3);
    for (std::size_t f = 0; f < 3; ++f) {
        CHECK(again[f].test_idx == thirds[f].test_idx);
        CHECK(again[f].train_idx == thirds[f].train_idx);
    }

    CHECK_THROWS(kfold_split(10, 11, labels64, 1));
    std::vector<int> oneclass(10, 0);
    CHECK_THROWS(kfold_split(10, 2, oneclass, 1));
}
