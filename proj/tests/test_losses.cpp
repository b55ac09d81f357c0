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
#include <vector>

#include "m3dbfs/losses.hpp"
#include "m3dbfs/ops.hpp"
#include "testutil.hpp"

using namespace m3dbfs;
using testutil::check_gradient_of;
using testutil::random_tensor;

TEST_CASE("cross entropy closed forms") {
    auto uniform = cross_entropy(Tensor::row({0.0, 0.0}), 1);
    CHECK(uniform->values[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    auto confident = cross_entropy(Tensor::row({10.0, -10.0}), 0);
    // -log(sigmoid(20)) = log1p(exp(-20))
    CHECK(confident->values[0] == doctest::Approx(std::log1p(std::exp(-20.0))).epsilon(1e-9));

    auto batch = cross_entropy(Tensor::matrix(2, 2, {0, 0, 10, -10}), {1, 0});
    double want = 0.5 * (std::log(2.0) + std::log1p(std::exp(-20.0)));
    CHECK(batch->values[0] == doctest::Approx(want).epsilon(1e-12));

    // Stays finite at logit gaps that underflow a naive softmax-then-log.
    auto extreme = cross_entropy(Tensor::row({800.0, -800.0}), 1);
    CHECK(std::isfinite(extreme->values[0]));
    CHECK(extreme->values[0] == doctest::Approx(1600.0).epsilon(1e-12));

    CHECK_THROWS(cross_entropy(Tensor::row({0.0, 0.0}), 2));
}

TEST_CASE("cross entropy gradient") {
    Rng rng(41);
    auto logits = random_tensor({6, 2}, rng, -2.0, 2.0);
    std::vector<int> y = {0, 1, 1, 0, 1, 0};
    auto res = check_gradient_of([&] { return cross_entropy(logits, y); }, {logits}, 1e-5,
                                 1e-6);
    CHECK(res.ok);
}

TEST_CASE("distillation vanishes on identical pairs and matches the KL oracle") {
    Rng rng(42);
    auto t_sc = random_tensor({8}, rng, -1.0, 1.0, false);
    auto t_fc = random_tensor({8}, rng, -1.0, 1.0, false);
    auto s_sc = Tensor::row(t_sc->values, true);
    auto s_fc = Tensor::row(t_fc->values, true);
    CHECK(std::fabs(distill_loss(s_sc, s_fc, t_sc, t_fc, 4.0)->values[0]) < 1e-12);

    // Direct sum p log(p/q) at tau = 2.
    auto u_sc = random_tensor({8}, rng, -1.5, 1.5);
    auto u_fc = random_tensor({8}, rng, -1.5, 1.5);
    double tau = 2.0;
    auto softmax_of = [tau](const std::vector<double>& v) {
        std::vector<double> p(v.size());
        double mx = *std::max_element(v.begin(), v.end());
        double z = 0;
        for (std::size_t i = 0; i < v.size(); ++i) z += (p[i] = std::exp((v[i] - mx) / tau));
        for (double& x : p) x /= z;
        return p;
    };
    double want = 0.0;
    for (auto [s, t] : {std::pair{u_fc, t_fc}, std::pair{u_sc, t_sc}}) {
        auto p = softmax_of(t->values), q = softmax_of(s->values);
        for (std::size_t i = 0; i < p.size(); ++i) want += p[i] * std::log(p[i] / q[i]);
    }
    want *= tau * tau / 2.0;
    auto got = distill_loss(u_sc, u_fc, t_sc, t_fc, tau);
    CHECK(std::fabs(got->values[0] - want) < 1e-10);
    CHECK(got->values[0] >= 0.0);
}

TEST_CASE("distillation is shift invariant and batch-averaged") {
    Rng rng(43);
    auto t_sc = random_tensor({3, 6}, rng, -1.0, 1.0, false);
    auto t_fc = random_tensor({3, 6}, rng, -1.0, 1.0, false);
    auto s_sc = random_tensor({3, 6}, rng, -1.0, 1.0, false);
    auto s_fc = random_tensor({3, 6}, rng, -1.0, 1.0, false);
    double base = distill_loss(s_sc, s_fc, t_sc, t_fc, 4.0)->values[0];

    auto shifted = ops::shift(s_sc, 7.5);
    CHECK(std::fabs(distill_loss(shifted, s_fc, t_sc, t_fc, 4.0)->values[0] - base) < 1e-9);

    double acc = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
        auto row = [&](const TensorPtr& m) {
            return ops::reshape(ops::gather_rows(m, {i}), {6});
        };
        acc += distill_loss(row(s_sc), row(s_fc), row(t_sc), row(t_fc), 4.0)->values[0];
    }
    CHECK(std::fabs(base - acc / 3.0) < 1e-12);

    auto live_teacher = random_tensor({3, 6}, rng, -1.0, 1.0, true);
    CHECK_THROWS(distill_loss(s_sc, s_fc, live_teacher, t_fc, 4.0));
    CHECK_THROWS(distill_loss(s_sc, s_fc, t_sc, t_fc, 0.0));
}

TEST_CASE("distillation gradient reaches the students only") {
    Rng rng(44);
    auto t_sc = random_tensor({2, 5}, rng, -1.0, 1.0, false);
    auto t_fc = random_tensor({2, 5}, rng, -1.0, 1.0, false);
    auto s_sc = random_tensor({2, 5}, rng, -1.0, 1.0);
    auto s_fc = random_tensor({2, 5}, rng, -1.0, 1.0);
    auto res = check_gradient_of(
        [&] { return distill_loss(s_sc, s_fc, t_sc, t_fc, 4.0); }, {s_sc, s_fc}, 1e-5, 1e-5);
    CHECK(res.ok);
}

TEST_CASE("contrastive loss closed forms") {
    auto z = Tensor::matrix(1, 3, {0.2, -0.4, 0.9});
    CHECK(std::fabs(cmbp_contrast(z, z, 0.5)->values[0]) < 1e-12);

    // Orthonormal pairs, tau 1: every direction gives -log(e/(e+1)).
    auto a = Tensor::matrix(2, 2, {1, 0, 0, 1});
    auto b = Tensor::matrix(2, 2, {1, 0, 0, 1});
    double want = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    CHECK(cmbp_contrast(a, b, 1.0)->values[0] == doctest::Approx(want).epsilon(1e-12));

    CHECK_THROWS(cmbp_contrast(Tensor::matrix(2, 2, {0, 0, 1, 0}), b, 1.0));
    CHECK_THROWS(cmbp_contrast(a, b, 0.0));
}

TEST_CASE("contrastive loss respects pairing structure") {
    Rng rng(45);
    auto a = random_tensor({5, 4}, rng, -1.0, 1.0, false);
    auto b = random_tensor({5, 4}, rng, -1.0, 1.0, false);
    double base = cmbp_contrast(a, b, 0.5)->values[0];

    std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
    auto pa = ops::gather_rows(a, perm);
    auto pb = ops::gather_rows(b, perm);
    CHECK(std::fabs(cmbp_contrast(pa, pb, 0.5)->values[0] - base) < 1e-12);

    // Tightening one positive pair with negatives fixed lowers the loss.
    double prev = 1e9;
    for (double theta : {1.2, 0.8, 0.4, 0.1}) {
        auto sc = Tensor::matrix(2, 3,
                                 {std::cos(theta), 0.0, std::sin(theta), 0.0, 1.0, 0.0});
        auto fc = Tensor::matrix(2, 3, {1, 0, 0, 0, 1, 0});
        double v = cmbp_contrast(sc, fc, 1.0)->values[0];
        CHECK(v < prev);
        prev = v;
    }
}

TEST_CASE("contrastive gradient") {
    Rng rng(46);
    auto a = random_tensor({4, 5}, rng, -1.0, 1.0);
    auto b = random_tensor({4, 5}, rng, -1.0, 1.0);
    auto res =
        check_gradient_of([&] { return cmbp_contrast(a, b, 0.5); }, {a, b}, 1e-5, 1e-4);
    CHECK(res.ok);
}

TEST_CASE("disentanglement closed forms") {
    auto v = Tensor::matrix(1, 4, {0.3, -0.7, 0.2, 0.5});
    auto same = disentangle_loss(v, v, v, v, 1.0);
    CHECK(same->values[0] == doctest::Approx(std::log(3.0)).epsilon(1e-12));

    // Orthogonal types with equal anchor similarity s: each of the three terms
    // is -log(e^s / (e^s + 2)), decreasing in s.
    double prev = 1e9;
    for (double s : {0.1, 0.3, 0.5}) {
        double g = std::sqrt(1.0 - 3.0 * s * s);
        auto sc = Tensor::matrix(1, 4, {1, 0, 0, 0});
        auto fc = Tensor::matrix(1, 4, {0, 1, 0, 0});
        auto fu = Tensor::matrix(1, 4, {0, 0, 1, 0});
        auto an = Tensor::matrix(1, 4, {s, s, s, g});
        double want = -std::log(std::exp(s) / (std::exp(s) + 2.0));
        double got = disentangle_loss(sc, fc, fu, an, 1.0)->values[0];
        CHECK(got == doctest::Approx(want).epsilon(1e-12));
        CHECK(got < prev);
        prev = got;
    }

    CHECK_THROWS(disentangle_loss(v, v, v, v, -1.0));
}

TEST_CASE("disentanglement gradient") {
    Rng rng(47);
    auto s = random_tensor({3, 6}, rng, -1.0, 1.0);
    auto f = random_tensor({3, 6}, rng, -1.0, 1.0);
    auto u = random_tensor({3, 6}, rng, -1.0, 1.0);
    auto a = random_tensor({3, 6}, rng, -1.0, 1.0);
    auto res = check_gradient_of([&] { return disentangle_loss(s, f, u, a, 0.5); },
                                 {s, f, u, a}, 1e-5, 1e-4);
    CHECK(res.ok);
}

TEST_CASE("stage composites are the documented affine mixes") {
    auto ce = Tensor::scalar(1.0);
    auto distill = Tensor::scalar(0.2);
    auto contrast = Tensor::scalar(0.4);
    CHECK(stage2_loss(ce, distill, contrast, 0.5)->values[0] ==
          doctest::Approx(1.3).epsilon(1e-15));
    CHECK(stage2_loss(ce, distill, contrast, 1e-9)->values[0] ==
          doctest::Approx(1.0).epsilon(1e-8));

    auto moe = Tensor::scalar(0.5);
    auto disen = Tensor::scalar(0.2);
    CHECK(stage3_loss(ce, moe, disen, 0.6)->values[0] ==
          doctest::Approx(1.38).epsilon(1e-15));
    auto zero = Tensor::scalar(0.0);
    CHECK(stage3_loss(ce, zero, zero, 0.6)->values[0] == doctest::Approx(1.0).epsilon(1e-15));

    CHECK_THROWS(stage2_loss(ce, distill, contrast, 0.0));
    CHECK_THROWS(stage2_loss(ce, distill, contrast, 1.0));
    CHECK_THROWS(stage3_loss(ce, moe, disen, 1.2));

    LossConfig good;
    good.validate();
    LossConfig bad = good;
    bad.alpha = 1.0;
    CHECK_THROWS(bad.validate());
}
