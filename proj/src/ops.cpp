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
#include "m3dbfs/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace m3dbfs::ops {

namespace {

TensorPtr make_node(std::vector<std::size_t> shape, std::vector<double> vals,
                    std::vector<TensorPtr> parents) {
    bool rg = false;
    for (const auto& p : parents)
        if (p->requires_grad) rg = true;
    auto out = Tensor::create(std::move(shape), std::move(vals), rg);
    if (rg) out->parents = std::move(parents);
    return out;
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// Supported broadcast modes for binary elementwise ops.
enum class BCast { None, Scalar, RowVec };

struct BPlan {
    std::vector<std::size_t> shape;  // output shape
    BCast a = BCast::None;
    BCast b = BCast::None;
};

BPlan plan_broadcast(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape == b.shape) return {a.shape, BCast::None, BCast::None};
    if (b.is_scalar()) return {a.shape, BCast::None, BCast::Scalar};
    if (a.is_scalar()) return {b.shape, BCast::Scalar, BCast::None};
    if (a.rank() == 2 && b.rank() == 1 && a.shape[1] == b.shape[0])
        return {a.shape, BCast::None, BCast::RowVec};
    if (b.rank() == 2 && a.rank() == 1 && b.shape[1] == a.shape[0])
        return {b.shape, BCast::RowVec, BCast::None};
    throw std::invalid_argument(std::string(op) + ": shapes " + a.shape_str() + " and " +
                                b.shape_str() + " are not broadcast-compatible");
}

inline std::size_t bidx(BCast mode, std::size_t i, std::size_t ncols) {
    switch (mode) {
        case BCast::None: return i;
        case BCast::Scalar: return 0;
        case BCast::RowVec: return i % ncols;
    }
    return i;
}

template <typename Fwd, typename BwdA, typename BwdB>
TensorPtr binary_op(const TensorPtr& a, const TensorPtr& b, const char* name, Fwd fwd, BwdA dfa,
                    BwdB dfb) {
    BPlan plan = plan_broadcast(*a, *b, name);
    std::size_t n = shape_numel(plan.shape);
    std::size_t ncols = plan.shape.back();
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i)
        v[i] = fwd(a->values[bidx(plan.a, i, ncols)], b->values[bidx(plan.b, i, ncols)]);
    auto out = make_node(plan.shape, std::move(v), {a, b});
    if (out->requires_grad) {
        Tensor *ap = a.get(), *bp = b.get(), *o = out.get();
        out->backward_fn = [ap, bp, o, plan, n, ncols, dfa, dfb] {
            for (std::size_t i = 0; i < n; ++i) {
                std::size_t ia = bidx(plan.a, i, ncols);
                std::size_t ib = bidx(plan.b, i, ncols);
                double g = o->grad[i];
                if (ap->requires_grad) ap->grad[ia] += g * dfa(ap->values[ia], bp->values[ib]);
                if (bp->requires_grad) bp->grad[ib] += g * dfb(ap->values[ia], bp->values[ib]);
            }
        };
    }
    return out;
}

template <typename Fwd, typename Bwd>
TensorPtr unary_op(const TensorPtr& x, Fwd fwd, Bwd dfdx) {
    std::size_t n = x->numel();
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = fwd(x->values[i]);
    auto out = make_node(x->shape, std::move(v), {x});
    if (out->requires_grad) {
        Tensor *xp = x.get(), *o = out.get();
        out->backward_fn = [xp, o, n, dfdx] {
            for (std::size_t i = 0; i < n; ++i)
                xp->grad[i] += o->grad[i] * dfdx(xp->values[i], o->values[i]);
        };
    }
    return out;
}

double softplus_val(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

double sigmoid_val(double x) { return 1.0 / (1.0 + std::exp(-x)); }

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    require(a->rank() == 2 && b->rank() == 2, "matmul: both operands must be rank-2");
    require(a->shape[1] == b->shape[0], "matmul: inner extents disagree, " + a->shape_str() +
                                            " vs " + b->shape_str());
    std::size_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
    std::vector<double> v(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            double av = a->values[i * k + p];
            if (av == 0.0) continue;
            const double* brow = &b->values[p * n];
            double* vrow = &v[i * n];
            for (std::size_t j = 0; j < n; ++j) vrow[j] += av * brow[j];
        }
    auto out = make_node({m, n}, std::move(v), {a, b});
    if (out->requires_grad) {
        Tensor *ap = a.get(), *bp = b.get(), *o = out.get();
        out->backward_fn = [ap, bp, o, m, k, n] {
            if (ap->requires_grad)  // dL/da = g * b^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j)
                            acc += o->grad[i * n + j] * bp->values[p * n + j];
                        ap->grad[i * k + p] += acc;
                    }
            if (bp->requires_grad)  // dL/db = a^T * g
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t i = 0; i < m; ++i) {
                        double av = ap->values[i * k + p];
                        if (av == 0.0) continue;
                        for (std::size_t j = 0; j < n; ++j)
                            bp->grad[p * n + j] += av * o->grad[i * n + j];
                    }
        };
    }
    return out;
}

TensorPtr transpose(const TensorPtr& x) {
    require(x->rank() == 2, "transpose: rank-2 required");
    std::size_t m = x->shape[0], n = x->shape[1];
    std::vector<double> v(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) v[j * m + i] = x->values[i * n + j];
    auto out = make_node({n, m}, std::move(v), {x});
    if (out->requires_grad) {
        Tensor *xp = x.get(), *o = out.get();
        out->backward_fn = [xp, o, m, n] {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) xp->grad[i * n + j] += o->grad[j * m + i];
        };
    }
    return out;
}

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    return binary_op(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    return binary_op(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    return binary_op(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double, double y) { return y; }, [](double x, double) { return x; });
}

TensorPtr div(const TensorPtr& a, const TensorPtr& b) {
    for (double d : b->values)
        if (d == 0.0) throw std::domain_error("div: zero denominator");
    return binary_op(
        a, b, "div", [](double x, double y) { return x / y; },
        [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

TensorPtr scale(const TensorPtr& x, double c) {
    return unary_op(
        x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

TensorPtr shift(const TensorPtr& x, double c) {
    return unary_op(
        x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

TensorPtr relu(const TensorPtr& x) {
    return unary_op(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

TensorPtr exp(const TensorPtr& x) {
    auto out = unary_op(
        x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
    check_finite(*out, "exp");
    return out;
}

TensorPtr log(const TensorPtr& x) {
    for (std::size_t i = 0; i < x->numel(); ++i)
        if (x->values[i] <= 0.0)
            throw std::domain_error("log: non-positive value at index " + std::to_string(i));
    return unary_op(
        x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

TensorPtr softplus(const TensorPtr& x) {
    return unary_op(
        x, [](double v) { return softplus_val(v); },
        [](double v, double) { return sigmoid_val(v); });
}

TensorPtr normal_cdf(const TensorPtr& x) {
    return unary_op(
        x, [](double v) { return 0.5 * std::erfc(-v * kInvSqrt2); },
        [](double v, double) { return kInvSqrt2Pi * std::exp(-0.5 * v * v); });
}

TensorPtr sum(const TensorPtr& x) {
    double acc = 0.0;
    for (double v : x->values) acc += v;
    auto out = make_node({1}, {acc}, {x});
    if (out->requires_grad) {
        Tensor *xp = x.get(), *o = out.get();
        out->backward_fn = [xp, o] {
            double g = o->grad[0];
            for (double& gv : xp->grad) gv += g;
        };
    }
    return out;
}

TensorPtr sum_rows(const TensorPtr& x) {
    require(x->rank() == 2, "sum_rows: rank-2 required");
    std::size_t m = x->shape[0], n = x->shape[1];
    std::vector<double> v(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) v[j] += x->values[i * n + j];
    auto out = make_node({n}, std::move(v), {x});
    if (out->requires_grad) {
        Tensor *xp = x.get(), *o = out.get();
        out->backward_fn = [xp, o, m, n] {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) xp->grad[i * n + j] += o->grad[j];
        };
    }
    return out;
}

TensorPtr mean_rows(const TensorPtr& x) {
    require(x->rank() == 2, "mean_rows: rank-2 required");
    return scale(sum_rows(x), 1.0 / static_cast<double>(x->shape[0]));
}

TensorPtr row_softmax(const TensorPtr& x) {
    check_finite(*x, "row_softmax input");
    std::size_t m = x->rows(), n = x->cols();
    std::vector<double> v(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* xi = &x->values[i * n];
        double mx = *std::max_element(xi, xi + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += (v[i * n + j] = std::exp(xi[j] - mx));
        for (std::size_t j = 0; j < n; ++j) v[i * n + j] /= z;
    }
    auto out = make_node(x->shape, std::move(v), {x});
    if (out->requires_grad) {
        Tensor *xp = x.get(), *o = out.get();
        out->backward_fn = [xp, o, m, n] {
            for (std::size_t i = 0; i < m; ++i) {
                const double* p = &o->values[i * n];
                const double* g = &o->grad[i * n];
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += p[j] * g[j];
                for (std::size_t j = 0; j < n; ++j) xp->grad[i * n + j] += p[j] * (g[j] - dot);
            }
        };
    }
    return out;
}

TensorPtr masked_row_softmax(const TensorPtr& x, const std::vector<std::uint8_t>& keep) {
    require(keep.size() == x->numel(), "masked_row_softmax: mask size mismatch");
    std::size_t m = x->rows(), n = x->cols();
    std::vector<double> v(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (keep[i * n + j]) mx = std::max(mx, x->values[i * n + j]);
        require(std::isfinite(mx), "masked_row_softmax: row " + std::to_string(i) +
                                       " keeps no entries");
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if (keep[i * n + j]) z += (v[i * n + j] = std::exp(x->values[i * n + j] - mx));
        for (std::size_t j = 0; j < n; ++j) v[i * n + j] /= z;
    }
    auto out = make_node(x->shape, std::move(v), {x});
    if (out->requires_grad) {
        Tensor *xp = x.get(), *o = out.get();
        out->backward_fn = [xp, o, m, n] {
            // masked-out entries have p == 0, so the dense formula is exact
            for (std::size_t i = 0; i < m; ++i) {
                const double* p = &o->values[i * n];
                const double* g = &o->grad[i * n];
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += p[j] * g[j];
                for (std::size_t j = 0; j < n; ++j) xp->grad[i * n + j] += p[j] * (g[j] - dot);
            }
        };
    }
    return out;
}

TensorPtr l2_normalize_rows(const TensorPtr& x) {
    std::size_t m = x->rows(), n = x->cols();
    std::vector<double> norms(m);
    std::vector<double> v(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += x->values[i * n + j] * x->values[i * n + j];
        if (s == 0.0)
            throw std::domain_error("l2_normalize: zero-norm row " + std::to_string(i));
        norms[i] = std::sqrt(s);
        for (std::size_t j = 0; j < n; ++j) v[i * n + j] = x->values[i * n + j] / norms[i];
    }
    auto out = make_node(x->shape, std::move(v), {x});
    if (out->requires_grad) {
        Tensor *xp = x.get(), *o = out.get();
        out->backward_fn = [xp, o, m, n, norms] {
            for (std::size_t i = 0; i < m; ++i) {
                const double* u = &o->values[i * n];  // already x / ||x||
                const double* g = &o->grad[i * n];
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += u[j] * g[j];
                for (std::size_t j = 0; j < n; ++j)
                    xp->grad[i * n + j] += (g[j] - u[j] * dot) / norms[i];
            }
        };
    }
    return out;
}

TensorPtr reshape(const TensorPtr& x, std::vector<std::size_t> shape) {
    require(shape_numel(shape) == x->numel(),
            "reshape: element count mismatch for " + x->shape_str());
    auto out = make_node(std::move(shape), x->values, {x});
    if (out->requires_grad) {
        Tensor *xp = x.get(), *o = out.get();
        out->backward_fn = [xp, o] {
            for (std::size_t i = 0; i < xp->numel(); ++i) xp->grad[i] += o->grad[i];
        };
    }
    return out;
}

TensorPtr concat(const std::vector<TensorPtr>& parts) {
    require(!parts.empty(), "concat: empty list");
    std::vector<double> v;
    for (const auto& p : parts) {
        require(p->rank() == 1, "concat: rank-1 parts required");
        v.insert(v.end(), p->values.begin(), p->values.end());
    }
    std::size_t total = v.size();
    auto out = make_node({total}, std::move(v), parts);
    if (out->requires_grad) {
        Tensor* o = out.get();
        std::vector<Tensor*> raw;
        for (const auto& p : parts) raw.push_back(p.get());
        out->backward_fn = [raw, o] {
            std::size_t off = 0;
            for (Tensor* p : raw) {
                if (p->requires_grad)
                    for (std::size_t i = 0; i < p->numel(); ++i) p->grad[i] += o->grad[off + i];
                off += p->numel();
            }
        };
    }
    return out;
}

TensorPtr vstack(const std::vector<TensorPtr>& parts) {
    require(!parts.empty(), "vstack: empty list");
    std::size_t n = parts.front()->cols();
    std::size_t m = 0;
    for (const auto& p : parts) {
        require(p->rank() <= 2, "vstack: rank-1 or rank-2 parts required");
        require(p->cols() == n, "vstack: column counts disagree");
        m += p->rows();
    }
    std::vector<double> v;
    v.reserve(m * n);
    for (const auto& p : parts) v.insert(v.end(), p->values.begin(), p->values.end());
    auto out = make_node({m, n}, std::move(v), parts);
    if (out->requires_grad) {
        Tensor* o = out.get();
        std::vector<Tensor*> raw;
        for (const auto& p : parts) raw.push_back(p.get());
        out->backward_fn = [raw, o] {
            std::size_t off = 0;
            for (Tensor* p : raw) {
                if (p->requires_grad)
                    for (std::size_t i = 0; i < p->numel(); ++i) p->grad[i] += o->grad[off + i];
                off += p->numel();
            }
        };
    }
    return out;
}

TensorPtr gather_rows(const TensorPtr& x, const std::vector<std::size_t>& idx) {
    require(x->rank() == 2, "gather_rows: rank-2 required");
    std::size_t n = x->shape[1];
    std::vector<double> v(idx.size() * n);
    for (std::size_t j = 0; j < idx.size(); ++j) {
        require(idx[j] < x->shape[0], "gather_rows: index out of range");
        std::copy_n(&x->values[idx[j] * n], n, &v[j * n]);
    }
    auto out = make_node({idx.size(), n}, std::move(v), {x});
    if (out->requires_grad) {
        Tensor *xp = x.get(), *o = out.get();
        out->backward_fn = [xp, o, idx, n] {
            for (std::size_t j = 0; j < idx.size(); ++j)
                for (std::size_t c = 0; c < n; ++c)
                    xp->grad[idx[j] * n + c] += o->grad[j * n + c];
        };
    }
    return out;
}

TensorPtr scatter_rows(const TensorPtr& src, const std::vector<std::size_t>& idx,
                       std::size_t total_rows) {
    require(src->rank() == 2, "scatter_rows: rank-2 required");
    require(src->shape[0] == idx.size(), "scatter_rows: row/index count mismatch");
    std::size_t n = src->shape[1];
    std::vector<double> v(total_rows * n, 0.0);
    for (std::size_t j = 0; j < idx.size(); ++j) {
        require(idx[j] < total_rows, "scatter_rows: index out of range");
        for (std::size_t c = 0; c < n; ++c) v[idx[j] * n + c] += src->values[j * n + c];
    }
    auto out = make_node({total_rows, n}, std::move(v), {src});
    if (out->requires_grad) {
        Tensor *sp = src.get(), *o = out.get();
        out->backward_fn = [sp, o, idx, n] {
            for (std::size_t j = 0; j < idx.size(); ++j)
                for (std::size_t c = 0; c < n; ++c)
                    sp->grad[j * n + c] += o->grad[idx[j] * n + c];
        };
    }
    return out;
}

TensorPtr scale_rows(const TensorPtr& x, const TensorPtr& w) {
    require(x->rank() == 2 && w->rank() == 1, "scale_rows: matrix and rank-1 weights required");
    require(x->shape[0] == w->shape[0], "scale_rows: row count mismatch");
    std::size_t m = x->shape[0], n = x->shape[1];
    std::vector<double> v(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) v[i * n + j] = x->values[i * n + j] * w->values[i];
    auto out = make_node({m, n}, std::move(v), {x, w});
    if (out->requires_grad) {
        Tensor *xp = x.get(), *wp = w.get(), *o = out.get();
        out->backward_fn = [xp, wp, o, m, n] {
            for (std::size_t i = 0; i < m; ++i) {
                double wi = wp->values[i];
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    double g = o->grad[i * n + j];
                    if (xp->requires_grad) xp->grad[i * n + j] += g * wi;
                    acc += g * xp->values[i * n + j];
                }
                if (wp->requires_grad) wp->grad[i] += acc;
            }
        };
    }
    return out;
}

TensorPtr gather_cols_per_row(const TensorPtr& x, const std::vector<std::size_t>& idx) {
    require(x->rank() == 2, "gather_cols_per_row: rank-2 required");
    require(idx.size() == x->numel(), "gather_cols_per_row: index matrix size mismatch");
    std::size_t m = x->shape[0], n = x->shape[1];
    std::vector<double> v(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            require(idx[i * n + j] < n, "gather_cols_per_row: column index out of range");
            v[i * n + j] = x->values[i * n + idx[i * n + j]];
        }
    auto out = make_node({m, n}, std::move(v), {x});
    if (out->requires_grad) {
        Tensor *xp = x.get(), *o = out.get();
        out->backward_fn = [xp, o, idx, m, n] {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    xp->grad[i * n + idx[i * n + j]] += o->grad[i * n + j];
        };
    }
    return out;
}

TensorPtr gather_elems(const TensorPtr& x, const std::vector<std::size_t>& idx) {
    std::vector<double> v(idx.size());
    for (std::size_t j = 0; j < idx.size(); ++j) {
        require(idx[j] < x->numel(), "gather_elems: index out of range");
        v[j] = x->values[idx[j]];
    }
    auto out = make_node({idx.size()}, std::move(v), {x});
    if (out->requires_grad) {
        Tensor *xp = x.get(), *o = out.get();
        out->backward_fn = [xp, o, idx] {
            for (std::size_t j = 0; j < idx.size(); ++j) xp->grad[idx[j]] += o->grad[j];
        };
    }
    return out;
}

TensorPtr get(const TensorPtr& x, std::size_t i) {
    require(i < x->numel(), "get: index out of range");
    auto out = make_node({1}, {x->values[i]}, {x});
    if (out->requires_grad) {
        Tensor *xp = x.get(), *o = out.get();
        out->backward_fn = [xp, o, i] { xp->grad[i] += o->grad[0]; };
    }
    return out;
}

TensorPtr get(const TensorPtr& x, std::size_t i, std::size_t j) {
    require(x->rank() == 2, "get(i,j): rank-2 required");
    return get(x, i * x->shape[1] + j);
}

TensorPtr sum_of(const std::vector<TensorPtr>& parts) {
    require(!parts.empty(), "sum_of: empty list");
    TensorPtr acc = parts.front();
    for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
    return acc;
}

}  // namespace m3dbfs::ops
