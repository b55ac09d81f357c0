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
#include "m3dbfs/losses.hpp"

#include <algorithm>
#include <stdexcept>

#include "m3dbfs/ops.hpp"

namespace m3dbfs {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

TensorPtr as_rows(const TensorPtr& x) {
    return x->rank() == 1 ? ops::reshape(x, {1, x->shape[0]}) : x;
}

/// Row sums of a matrix as a rank-1 tensor.
TensorPtr row_sums(const TensorPtr& x) { return ops::sum_rows(ops::transpose(x)); }

/// [rows x cols] matrix whose row i is filled with vals[i].
TensorPtr fill_rows(const TensorPtr& vals, std::size_t cols) {
    auto ones = Tensor::create({vals->shape[0], cols},
                               std::vector<double>(vals->shape[0] * cols, 1.0), false);
    return ops::scale_rows(ones, vals);
}

/// Numerically stable log-softmax along rows: x - max (constant shift) minus
/// the log-sum-exp of the shifted row. Never feeds log a zero.
TensorPtr row_log_softmax(const TensorPtr& x) {
    std::size_t m = x->shape[0], n = x->shape[1];
    std::vector<double> mx(m);
    for (std::size_t i = 0; i < m; ++i)
        mx[i] = *std::max_element(&x->values[i * n], &x->values[i * n] + n);
    auto shift = fill_rows(Tensor::create({m}, std::move(mx), false), n);
    auto shifted = ops::sub(x, shift);
    auto lse = ops::log(row_sums(ops::exp(shifted)));
    return ops::sub(shifted, fill_rows(lse, n));
}

/// Rowwise dot products of equal-shape matrices -> rank-1 [B].
TensorPtr row_dots(const TensorPtr& a, const TensorPtr& b) {
    return row_sums(ops::mul(a, b));
}

}  // namespace

void LossConfig::validate() const {
    require(tau > 0.0 && tau_c > 0.0 && tau_d > 0.0,
            "LossConfig: temperatures must be positive");
    require(alpha > 0.0 && alpha < 1.0, "LossConfig: alpha must lie in (0, 1)");
    require(beta > 0.0 && beta < 1.0, "LossConfig: beta must lie in (0, 1)");
}

TensorPtr cross_entropy(const TensorPtr& logits, const std::vector<int>& y) {
    auto rows = as_rows(logits);
    std::size_t b = rows->shape[0], classes = rows->shape[1];
    require(y.size() == b, "cross_entropy: label count mismatch");
    check_finite(*rows, "cross_entropy logits");
    std::vector<std::size_t> picked(b);
    for (std::size_t i = 0; i < b; ++i) {
        require(y[i] >= 0 && static_cast<std::size_t>(y[i]) < classes,
                "cross_entropy: label out of range");
        picked[i] = i * classes + static_cast<std::size_t>(y[i]);
    }
    auto logp = row_log_softmax(rows);
    auto chosen = ops::gather_elems(logp, picked);
    return ops::scale(ops::sum(chosen), -1.0 / static_cast<double>(b));
}

TensorPtr cross_entropy(const TensorPtr& logits, int y) {
    return cross_entropy(logits, std::vector<int>{y});
}

TensorPtr distill_loss(const TensorPtr& student_sc, const TensorPtr& student_fc,
                       const TensorPtr& teacher_sc, const TensorPtr& teacher_fc,
                       double tau) {
    require(tau > 0.0, "distill_loss: temperature must be positive");
    require(!teacher_sc->requires_grad && !teacher_fc->requires_grad,
            "distill_loss: teachers must not carry gradients");
    auto one_side = [tau](const TensorPtr& student, const TensorPtr& teacher) {
        auto s = as_rows(student);
        auto t = as_rows(teacher);
        require(s->shape == t->shape, "distill_loss: student/teacher shapes disagree");
        std::size_t b = s->shape[0];
        // Teacher distribution and entropy are constants of the graph.
        auto logp = row_log_softmax(ops::scale(t, 1.0 / tau));
        auto p = ops::exp(logp);
        auto logq = row_log_softmax(ops::scale(s, 1.0 / tau));
        auto kl = row_sums(ops::mul(p, ops::sub(logp, logq)));
        return ops::scale(ops::sum(kl), 1.0 / static_cast<double>(b));
    };
    auto both = ops::add(one_side(student_fc, teacher_fc), one_side(student_sc, teacher_sc));
    return ops::scale(both, tau * tau / 2.0);
}

TensorPtr cmbp_contrast(const TensorPtr& z_sc, const TensorPtr& z_fc, double tau_c) {
    require(tau_c > 0.0, "cmbp_contrast: temperature must be positive");
    auto a = ops::l2_normalize_rows(as_rows(z_sc));
    auto b = ops::l2_normalize_rows(as_rows(z_fc));
    require(a->shape == b->shape, "cmbp_contrast: batch shapes disagree");
    std::size_t n = a->shape[0];
    auto sim = ops::scale(ops::matmul(a, ops::transpose(b)), 1.0 / tau_c);
    std::vector<std::size_t> diag(n);
    for (std::size_t i = 0; i < n; ++i) diag[i] = i * n + i;
    auto rows_lp = ops::gather_elems(row_log_softmax(sim), diag);
    auto cols_lp = ops::gather_elems(row_log_softmax(ops::transpose(sim)), diag);
    auto total = ops::add(ops::sum(rows_lp), ops::sum(cols_lp));
    return ops::scale(total, -0.5 / static_cast<double>(n));
}

TensorPtr disentangle_loss(const TensorPtr& z_sc, const TensorPtr& z_fc,
                           const TensorPtr& z_fusion, const TensorPtr& z_anchor,
                           double tau_d) {
    require(tau_d > 0.0, "disentangle_loss: temperature must be positive");
    auto s = ops::l2_normalize_rows(as_rows(z_sc));
    auto f = ops::l2_normalize_rows(as_rows(z_fc));
    auto u = ops::l2_normalize_rows(as_rows(z_fusion));
    auto anchor = ops::l2_normalize_rows(as_rows(z_anchor));
    require(s->shape == f->shape && s->shape == u->shape && s->shape == anchor->shape,
            "disentangle_loss: embedding shapes disagree");
    std::size_t n = s->shape[0];
    std::vector<std::size_t> first_col(n);
    for (std::size_t i = 0; i < n; ++i) first_col[i] = i * 3;
    // Per type: classify the anchor (positive) against the other two types.
    auto type_term = [&](const TensorPtr& self, const TensorPtr& o1, const TensorPtr& o2) {
        auto logits = ops::scale(
            ops::transpose(ops::vstack(
                {row_dots(self, anchor), row_dots(self, o1), row_dots(self, o2)})),
            1.0 / tau_d);
        return ops::sum(ops::gather_elems(row_log_softmax(logits), first_col));
    };
    auto total = ops::sum_of(
        {type_term(s, f, u), type_term(f, s, u), type_term(u, s, f)});
    return ops::scale(total, -1.0 / (3.0 * static_cast<double>(n)));
}

TensorPtr stage2_loss(const TensorPtr& ce, const TensorPtr& distill,
                      const TensorPtr& contrast, double beta) {
    require(beta > 0.0 && beta < 1.0, "stage2_loss: beta must lie in (0, 1)");
    return ops::add(ce, ops::scale(ops::add(distill, contrast), beta));
}

TensorPtr stage3_loss(const TensorPtr& ce, const TensorPtr& moe, const TensorPtr& disen,
                      double alpha) {
    require(alpha > 0.0 && alpha < 1.0, "stage3_loss: alpha must lie in (0, 1)");
    return ops::add(ce, ops::add(ops::scale(moe, alpha), ops::scale(disen, 1.0 - alpha)));
}

}  // namespace m3dbfs
