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

#include <cmath>
#include <filesystem>
#include <fstream>

#include "m3dbfs/checkpoint.hpp"
#include "m3dbfs/metrics.hpp"
#include "testutil.hpp"

using namespace m3dbfs;
namespace fs = std::filesystem;

namespace {

// O(n^2) pairwise oracle: ties between a positive and a negative count half.
double auc_oracle(const std::vector<int>& y, const std::vector<double>& s) {
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i)
        for (std::size_t j = 0; j < y.size(); ++j)
            if (y[i] == 1 && y[j] == 0) {
                pairs += 1.0;
                if (s[i] > s[j])
                    wins += 1.0;
                else if (s[i] == s[j])
                    wins += 0.5;
            }
    return wins / pairs;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
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

}  // namespace

TEST_CASE("confusion arithmetic on a worked example") {
    // TP=3, FN=1, TN=4, FP=2.
    std::vector<int> yt = {1, 1, 1, 1, 0, 0, 0, 0, 0, 0};
    std::vector<int> yp = {1, 1, 1, 0, 1, 1, 0, 0, 0, 0};
    std::vector<double> s = {.9, .8, .7, .4, .6, .55, .3, .2, .1, .05};
    auto m = compute_metrics(yt, yp, s);
    CHECK(m.acc == doctest::Approx(0.7).epsilon(1e-15));
    CHECK(m.sen == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(m.spe == doctest::Approx(4.0 / 6.0).epsilon(1e-12));
    CHECK(m.f1 == doctest::Approx(6.0 / 9.0).epsilon(1e-12));
    CHECK(m.sen_defined);
    CHECK(m.spe_defined);
    CHECK(m.auc_defined);
}

TEST_CASE("auc corners and the pairwise oracle") {
    std::vector<int> yt = {0, 0, 1, 1};
    CHECK(auc_midrank(yt, {.1, .2, .8, .9}) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(auc_midrank(yt, {.9, .8, .2, .1}) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(auc_midrank(yt, {.5, .5, .5, .5}) == doctest::Approx(0.5).epsilon(1e-15));

    Rng rng(71);
    for (int trial = 0; trial < 100; ++trial) {
        std::size_t n = 50;
        std::vector<int> y(n);
        std::vector<double> s(n);
        bool has0 = false, has1 = false;
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = static_cast<int>(rng.index(2));
            (y[i] ? has1 : has0) = true;
            // Coarse grid forces plenty of ties.
            s[i] = static_cast<double>(rng.index(8)) / 8.0;
        }
        if (!has0 || !has1) continue;
        CHECK(std::fabs(auc_midrank(y, s) - auc_oracle(y, s)) < 1e-9);
    }
}

TEST_CASE("single-class sets flag undefined metrics") {
    std::vector<int> yt = {1, 1, 1};
    auto m = compute_metrics(yt, {1, 0, 1}, {.9, .4, .8});
    CHECK(m.sen_defined);
    CHECK_FALSE(m.spe_defined);
    CHECK_FALSE(m.auc_defined);
    CHECK(m.acc == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

    std::vector<int> yneg = {0, 0};
    auto m2 = compute_metrics(yneg, {0, 0}, {.1, .2});
    CHECK_FALSE(m2.sen_defined);
    CHECK(m2.spe_defined);
    CHECK_FALSE(m2.f1_defined);  // no true or predicted positives
}

TEST_CASE("metrics table emits two-decimal percent rows") {
    Metrics a;
    a.acc = 0.8125;
    a.sen = 0.75;
    a.spe = 0.875;
    a.f1 = 0.8;
    a.auc = 0.9;
    a.sen_defined = a.spe_defined = a.f1_defined = a.auc_defined = true;
    Metrics b = a;
    b.acc = 0.8175;
    auto tsv = metrics_table_tsv({a, b});
    CHECK(tsv.find("metric\tmean\tstd") == 0);
    CHECK(tsv.find("ACC\t81.50\t0.25") != std::string::npos);
    CHECK(tsv.find("SEN\t75.00\t0.00") != std::string::npos);
    CHECK(format_mean_std(81.21, 0.85) == "81.21 +/- 0.85");
}

TEST_CASE("checkpoint round trip is byte-identical") {
    ParameterStore store;
    Rng rng(72);
    store.add("enc.w0", testutil::random_tensor({4, 3}, rng));
    store.add("enc.w1", testutil::random_tensor({3, 2}, rng));
    store.add("head.b", testutil::random_tensor({2}, rng), true);

    auto ckpt = checkpoint_from_store(store, 2, "alpha = 0.6\nbeta = 0.3\n");
    TempDir tmp("ckpt");
    auto p1 = (tmp.path / "a.ckpt").string();
    auto p2 = (tmp.path / "b.ckpt").string();
    save_checkpoint(ckpt, p1);
    auto back = load_checkpoint(p1);
    save_checkpoint(back, p2);
    CHECK(slurp(p1) == slurp(p2));

    REQUIRE(back.records.size() == 3);
    CHECK(back.stage == 2);
    CHECK(back.config_echo == "alpha = 0.6\nbeta = 0.3\n");
    CHECK(back.records[0].name == "enc.w0");
    CHECK(back.records[0].values == store.get("enc.w0")->values);
    CHECK(back.records[2].frozen);
    CHECK_FALSE(back.records[0].frozen);

    // Applying restores values and freeze flags into a fresh model.
    ParameterStore other;
    Rng rng2(99);
    other.add("enc.w0", testutil::random_tensor({4, 3}, rng2));
    other.add("enc.w1", testutil::random_tensor({3, 2}, rng2));
    other.add("head.b", testutil::random_tensor({2}, rng2));
    apply_checkpoint_to_store(back, other);
    CHECK(other.get("enc.w0")->values == store.get("enc.w0")->values);
    CHECK(other.is_frozen("head.b"));

    ParameterStore missing;
    missing.add("enc.w0", testutil::random_tensor({4, 3}, rng2));
    CHECK_THROWS(apply_checkpoint_to_store(back, missing));

    ParameterStore wrong;
    wrong.add("enc.w0", testutil::random_tensor({4, 4}, rng2));
    wrong.add("enc.w1", testutil::random_tensor({3, 2}, rng2));
    wrong.add("head.b", testutil::random_tensor({2}, rng2));
    CHECK_THROWS(apply_checkpoint_to_store(back, wrong));
}

TEST_CASE("checkpoint loader rejects malformed files with offsets") {
    TempDir tmp("ckpt_bad");
    ParameterStore store;
    Rng rng(73);
    store.add("w", testutil::random_tensor({2, 2}, rng));
    auto path = (tmp.path / "good.ckpt").string();
    save_checkpoint(checkpoint_from_store(store, 1, "seed = 7\n"), path);
    std::string bytes = slurp(path);

    auto write_bytes = [&](const std::string& name, const std::string& content) {
        std::ofstream f(tmp.path / name, std::ios::binary);
        f.write(content.data(), static_cast<std::streamsize>(content.size()));
        return (tmp.path / name).string();
    };

    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_WITH_AS(load_checkpoint(write_bytes("magic.ckpt", bad_magic)),
                         doctest::Contains("bad magic"), std::runtime_error);

    std::string truncated = bytes.substr(0, bytes.size() - 5);
    try {
        load_checkpoint(write_bytes("trunc.ckpt", truncated));
        FAIL("expected error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
    }

    // Corrupt the name-length field (bytes 4+4+1+4 .. +4) to a huge value.
    std::string bad_len = bytes;
    bad_len[13] = '\xff';
    bad_len[14] = '\xff';
    bad_len[15] = '\xff';
    bad_len[16] = '\x7f';
    try {
        load_checkpoint(write_bytes("len.ckpt", bad_len));
        FAIL("expected error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
    }

    std::string bad_version = bytes;
    bad_version[4] = '\x09';
    CHECK_THROWS_WITH_AS(load_checkpoint(write_bytes("ver.ckpt", bad_version)),
                         doctest::Contains("format version"), std::runtime_error);

    auto good = load_checkpoint(path);
    expect_stage(good, 1);
    try {
        expect_stage(good, 2);
        FAIL("expected error");
    } catch (const std::runtime_error& e) {
        std::string msg = e.what();
        CHECK(msg.find("stage 2") != std::string::npos);
        CHECK(msg.find("stage 1") != std::string::npos);
    }
}
