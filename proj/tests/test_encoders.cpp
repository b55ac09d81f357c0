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
#include <numeric>

#include "m3dbfs/encoders.hpp"
#include "m3dbfs/ops.hpp"
#include "testutil.hpp"

using namespace m3dbfs;
using testutil::check_gradient_of;
using testutil::random_tensor;

namespace {

// Random symmetric zero-diagonal 0/1 adjacency.
std::vector<double> random_adjacency(std::size_t n, double p, Rng& rng) {
    std::vector<double> a(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (rng.uniform(0.0, 1.0) < p) {
                a[i * n + j] = 1.0;
                a[j * n + i] = 1.0;
            }
    return a;
}

void set_identity(const TensorPtr& w) {
    std::size_t n = w->shape[0];
    std::fill(w->values.begin(), w->values.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) w->values[i * n + i] = 1.0;
}

}  // namespace

TEST_CASE("isolated nodes with identity weights pass features through") {
    ParameterStore store;
    Rng rng(1);
    auto enc = make_gcn_encoder(store, "enc", 3, 3, 3, 1, rng);
    set_identity(enc.weights[0]);
    BrainGraph g;
    g.regions = 3;
    g.adjacency.assign(9, 0.0);  // no edges: Ahat = I
    g.features = {1, -2, 3, 4, 5, -6, 7, 8, 9};
    auto h = gcn_forward(enc, g);
    REQUIRE(h->shape == std::vector<std::size_t>({3, 3}));
    for (std::size_t i = 0; i < 9; ++i) CHECK(h->values[i] == g.features[i]);
}

TEST_CASE("two-node complete graph matches the hand-computed propagation") {
    // A = [[0,1],[1,0]], degrees of A+I are 2, so Ahat is all 0.5.
    auto ahat = normalized_adjacency({0, 1, 1, 0}, 2);
    CHECK(ahat->values[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(ahat->values[1] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(ahat->values[2] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(ahat->values[3] == doctest::Approx(0.5).epsilon(1e-15));

    ParameterStore store;
    Rng rng(2);
    auto enc = make_gcn_encoder(store, "enc", 2, 2, 2, 1, rng);
    auto x = Tensor::matrix(2, 2, {1, 0, 0, 1});  // X = I
    auto h = gcn_forward(enc, ahat, x);
    // H = Ahat * I * W = 0.5 * (row sums of W per column), identical rows.
    const auto& w = enc.weights[0]->values;
    for (std::size_t j = 0; j < 2; ++j) {
        double want = 0.5 * (w[0 * 2 + j] + w[1 * 2 + j]);
        CHECK(h->at(0, j) == doctest::Approx(want).epsilon(1e-14));
        CHECK(h->at(1, j) == doctest::Approx(want).epsilon(1e-14));
    }
}

TEST_CASE("normalized adjacency of a regular graph has unit row sums") {
    // Ring over 6 nodes: every degree is 2.
    std::size_t n = 6;
    std::vector<double> a(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        a[i * n + (i + 1) % n] = 1.0;
        a[((i + 1) % n) * n + i] = 1.0;
    }
    auto ahat = normalized_adjacency(a, n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < n; ++j) s += ahat->at(i, j);
        CHECK(std::fabs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("gcn gradient against finite differences") {
    Rng rng(3);
    std::size_t n = 5;
    auto ahat = normalized_adjacency(random_adjacency(n, 0.5, rng), n);
    auto x = random_tensor({n, n}, rng, -1.0, 1.0, false);
    ParameterStore store;
    auto enc = make_gcn_encoder(store, "enc", n, 4, 3, 2, rng);
    auto res = check_gradient_of(
        [&] {
            auto h = gcn_forward(enc, ahat, x);
            return ops::sum(ops::mul(h, h));
        },
        {enc.weights[0], enc.weights[1]}, 1e-5, 1e-4);
    CHECK(res.ok);
}

TEST_CASE("gcn commutes with node permutation") {
    Rng rng(4);
    std::size_t n = 7;
    auto a = random_adjacency(n, 0.4, rng);
    std::vector<double> x(n * n);
    for (double& v : x) v = rng.uniform(-1.0, 1.0);

    ParameterStore store;
    auto enc = make_gcn_encoder(store, "enc", n, 6, 4, 2, rng);

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    std::vector<double> pa(n * n), px(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            pa[i * n + j] = a[perm[i] * n + perm[j]];
            px[i * n + j] = x[perm[i] * n + j];  // rows permute, feature axis fixed
        }

    BrainGraph g{Modality::fc, n, a, x};
    BrainGraph pg{Modality::fc, n, pa, px};
    auto h = gcn_forward(enc, g);
    auto ph = gcn_forward(enc, pg);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            CHECK(std::fabs(ph->at(i, j) - h->at(perm[i], j)) < 1e-9);
}

TEST_CASE("gcn rejects feature width mismatch") {
    ParameterStore store;
    Rng rng(5);
    auto enc = make_gcn_encoder(store, "enc", 4, 4, 4, 1, rng);
    auto ahat = normalized_adjacency(std::vector<double>(9, 0.0), 3);
    auto x = Tensor::zeros({3, 3});
    CHECK_THROWS(gcn_forward(enc, ahat, x));
}

TEST_CASE("readout is the row mean and ignores row order") {
    auto h = Tensor::matrix(2, 2, {1, 2, 3, 4});
    auto z = readout(h);
    REQUIRE(z->shape == std::vector<std::size_t>({2}));
    CHECK(z->values[0] == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(z->values[1] == doctest::Approx(3.0).epsilon(1e-15));

    auto single = readout(Tensor::matrix(1, 3, {5, 6, 7}));
    CHECK(single->values == std::vector<double>({5, 6, 7}));

    auto swapped = readout(Tensor::matrix(2, 2, {3, 4, 1, 2}));
    CHECK(swapped->values[0] == z->values[0]);
    CHECK(swapped->values[1] == z->values[1]);
}

TEST_CASE("classifier head is affine with hand-checkable special cases") {
    ParameterStore store;
    Rng rng(6);
    auto head = make_classifier_head(store, "head", 3, rng);
    std::fill(head.w->values.begin(), head.w->values.end(), 0.0);
    auto z = Tensor::row({1.0, -2.0, 0.5});
    auto logits = classify(head, z);
    REQUIRE(logits->shape == std::vector<std::size_t>({2}));
    CHECK(logits->values[0] == 0.0);
    CHECK(logits->values[1] == 0.0);

    head.b->values = {0.7, -0.3};
    auto biased = classify(head, z);
    CHECK(biased->values[0] == doctest::Approx(0.7).epsilon(1e-15));
    CHECK(biased->values[1] == doctest::Approx(-0.3).epsilon(1e-15));

    CHECK_THROWS(classify(head, Tensor::row({1.0, 2.0})));

    auto batch = Tensor::matrix(4, 3, std::vector<double>(12, 0.25));
    CHECK(classify(head, batch)->shape == std::vector<std::size_t>({4, 2}));
}

TEST_CASE("classifier gradient against finite differences") {
    Rng rng(7);
    ParameterStore store;
    auto head = make_classifier_head(store, "head", 5, rng);
    auto z = random_tensor({5}, rng);
    auto res = check_gradient_of(
        [&] {
            auto logits = classify(head, z);
            return ops::sum(ops::mul(logits, logits));
        },
        {head.w, head.b, z}, 1e-5, 1e-5);
    CHECK(res.ok);
}

TEST_CASE("projection applies the same map to every token row") {
    Rng rng(8);
    ParameterStore store;
    auto proj = make_projection(store, "proj", 4, 3, rng);
    auto h = random_tensor({6, 4}, rng, -1.0, 1.0, false);
    auto all = project_tokens(proj, h);
    REQUIRE(all->shape == std::vector<std::size_t>({6, 3}));
    for (std::size_t i = 0; i < 6; ++i) {
        auto row = ops::reshape(ops::gather_rows(h, {i}), {1, 4});
        auto one = project_tokens(proj, row);
        for (std::size_t j = 0; j < 3; ++j) CHECK(one->at(0, j) == all->at(i, j));
    }
}
