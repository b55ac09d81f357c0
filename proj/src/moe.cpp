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
#include "m3dbfs/moe.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "m3dbfs/ops.hpp"

namespace m3dbfs {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

/// CV^2 of the column sums of a [tokens x experts] matrix as a graph node.
TensorPtr cv2_of_column_sums(const TensorPtr& matrix) {
    std::size_t experts = matrix->shape[1];
    auto per_expert = ops::sum_rows(matrix);
    double total = std::accumulate(per_expert->values.begin(), per_expert->values.end(), 0.0);
    if (total == 0.0) return Tensor::scalar(0.0);
    auto mean = ops::scale(ops::sum(per_expert), 1.0 / static_cast<double>(experts));
    auto dev = ops::sub(per_expert, mean);
    auto var = ops::scale(ops::sum(ops::mul(dev, dev)), 1.0 / static_cast<double>(experts));
    return ops::div(var, ops::mul(mean, mean));
}

}  // namespace

ExpertMLP make_expert(ParameterStore& store, const std::string& prefix, std::size_t d,
                      std::size_t d_hidden, Rng& rng) {
    ExpertMLP e;
    e.w1 = store.add(prefix + ".w1", glorot_uniform(d, d_hidden, rng));
    e.b1 = store.add(prefix + ".b1", Tensor::zeros({d_hidden}, true));
    e.w2 = store.add(prefix + ".w2", glorot_uniform(d_hidden, d, rng));
    e.b2 = store.add(prefix + ".b2", Tensor::zeros({d}, true));
    return e;
}

GatingNetwork make_gating(ParameterStore& store, const std::string& prefix, std::size_t d,
                          std::size_t experts, std::size_t k, Rng& rng) {
    require(experts >= 1, "make_gating: need at least one expert");
    require(k >= 1 && k <= experts, "make_gating: k must be in [1, expert count]");
    GatingNetwork g;
    g.w_g = store.add(prefix + ".wg", glorot_uniform(d, experts, rng));
    g.w_noise = store.add(prefix + ".wnoise", Tensor::zeros({d, experts}, true));
    g.k = k;
    return g;
}

MoEBlock make_moe_block(ParameterStore& store, const std::string& prefix, MoEKind kind,
                        std::size_t d, std::size_t d_hidden, std::size_t experts,
                        std::size_t k, Rng& rng) {
    MoEBlock b;
    b.kind = kind;
    for (std::size_t e = 0; e < experts; ++e)
        b.experts.push_back(
            make_expert(store, prefix + ".expert" + std::to_string(e), d, d_hidden, rng));
    b.gate = make_gating(store, prefix + ".gate", d, experts, k, rng);
    return b;
}

MoEStack make_moe_stack(ParameterStore& store, const std::string& prefix, MoEKind kind,
                        std::size_t d, std::size_t d_hidden, std::size_t experts,
                        std::size_t k, std::size_t depth, Rng& rng) {
    require(depth >= 1, "make_moe_stack: depth must be >= 1");
    MoEStack s;
    for (std::size_t l = 0; l < depth; ++l)
        s.blocks.push_back(make_moe_block(store, prefix + ".block" + std::to_string(l), kind,
                                          d, d_hidden, experts, k, rng));
    return s;
}

ExpertMLP expert_from_store(const ParameterStore& store, const std::string& prefix) {
    return {store.get(prefix + ".w1"), store.get(prefix + ".b1"), store.get(prefix + ".w2"),
            store.get(prefix + ".b2")};
}

MoEStack moe_stack_from_store(const ParameterStore& store, const std::string& prefix,
                              MoEKind kind, std::size_t experts, std::size_t k,
                              std::size_t depth) {
    MoEStack s;
    for (std::size_t l = 0; l < depth; ++l) {
        std::string bp = prefix + ".block" + std::to_string(l);
        MoEBlock b;
        b.kind = kind;
        for (std::size_t e = 0; e < experts; ++e)
            b.experts.push_back(expert_from_store(store, bp + ".expert" + std::to_string(e)));
        b.gate.w_g = store.get(bp + ".gate.wg");
        b.gate.w_noise = store.get(bp + ".gate.wnoise");
        b.gate.k = k;
        s.blocks.push_back(std::move(b));
    }
    return s;
}

TensorPtr expert_forward(const ExpertMLP& e, const TensorPtr& x) {
    auto h = ops::relu(ops::add(ops::matmul(x, e.w1), e.b1));
    return ops::add(ops::matmul(h, e.w2), e.b2);
}

TensorPtr expert_stack_forward(const ExpertMLP& e, const TensorPtr& h, std::size_t depth) {
    TensorPtr cur = h;
    for (std::size_t l = 0; l < depth; ++l) {
        if (l > 0) cur = ops::relu(cur);
        cur = ops::add(cur, expert_forward(e, cur));
    }
    return cur;
}

GateResult gate_forward_batch(const GatingNetwork& g, const TensorPtr& h, bool train,
                              Rng& rng) {
    std::size_t experts = g.expert_count();
    require(g.k >= 1 && g.k <= experts, "gate_forward: k must be in [1, expert count]");
    require(h->rank() == 2 && h->shape[1] == g.w_g->shape[0],
            "gate_forward: token width does not match gate");
    check_finite(*h, "gate_forward input");
    std::size_t tokens = h->shape[0];

    auto clean = ops::matmul(h, g.w_g);
    auto noise_std = ops::softplus(ops::matmul(h, g.w_noise));
    TensorPtr noisy;
    if (train) {
        std::vector<double> eps(tokens * experts);
        for (double& e : eps) e = rng.normal();
        auto eps_t = Tensor::create({tokens, experts}, std::move(eps), false);
        noisy = ops::add(clean, ops::mul(eps_t, noise_std));
    } else {
        noisy = clean;  // inference consumes no randomness
    }

    // Realized top-k per token; equal logits break toward the lower index.
    std::size_t keff = std::min(g.k, experts);
    std::vector<std::uint8_t> keep(tokens * experts, 0);
    std::vector<std::vector<std::size_t>> selected(tokens);
    std::vector<std::vector<std::size_t>> ranked(tokens);
    for (std::size_t t = 0; t < tokens; ++t) {
        std::vector<std::size_t> order(experts);
        std::iota(order.begin(), order.end(), 0);
        const double* row = &noisy->values[t * experts];
        std::sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) {
            if (row[a] != row[b]) return row[a] > row[b];
            return a < b;
        });
        for (std::size_t r = 0; r < keff; ++r) {
            keep[t * experts + order[r]] = 1;
            selected[t].push_back(order[r]);
        }
        ranked[t] = std::move(order);
    }
    auto gates = ops::masked_row_softmax(noisy, keep);

    // Smooth load: P(token, i) is the probability that a fresh noise draw for
    // expert i clears the realized k-th highest noisy logit of the others.
    // That threshold is the (k+1)-th ranked logit when i itself is in the top
    // k, and the k-th otherwise. With k = E every expert is always kept.
    TensorPtr load;
    if (keff >= experts) {
        load = Tensor::create({tokens, experts}, std::vector<double>(tokens * experts, 1.0),
                              false);
    } else {
        std::vector<std::size_t> thr_idx(tokens * experts);
        for (std::size_t t = 0; t < tokens; ++t)
            for (std::size_t i = 0; i < experts; ++i)
                thr_idx[t * experts + i] =
                    keep[t * experts + i] ? ranked[t][keff] : ranked[t][keff - 1];
        auto thr = ops::gather_cols_per_row(noisy, thr_idx);
        load = ops::normal_cdf(ops::div(ops::sub(clean, thr), noise_std));
    }
    return {gates, load, std::move(selected)};
}

GateResult gate_forward(const GatingNetwork& g, const TensorPtr& x, bool train, Rng& rng) {
    require(x->rank() == 1, "gate_forward: single-token form expects a rank-1 input");
    auto batch = gate_forward_batch(g, ops::reshape(x, {1, x->shape[0]}), train, rng);
    std::size_t experts = g.expert_count();
    return {ops::reshape(batch.gates, {experts}), ops::reshape(batch.load, {experts}),
            std::move(batch.selected)};
}

MoEOutput moe_forward(const MoEBlock& b, const TensorPtr& h, bool train, Rng& rng) {
    require(!b.experts.empty(), "moe_forward: block has no experts");
    require(h->rank() == 2 && h->shape[1] == b.experts.front().w1->shape[0],
            "moe_forward: token width " + h->shape_str() + " does not match experts");
    std::size_t tokens = h->shape[0], experts = b.experts.size();
    auto gr = gate_forward_batch(b.gate, h, train, rng);

    std::vector<TensorPtr> parts;
    for (std::size_t e = 0; e < experts; ++e) {
        std::vector<std::size_t> rows, flat;
        for (std::size_t t = 0; t < tokens; ++t)
            if (std::find(gr.selected[t].begin(), gr.selected[t].end(), e) !=
                gr.selected[t].end()) {
                rows.push_back(t);
                flat.push_back(t * experts + e);
            }
        if (rows.empty()) continue;
        auto out = expert_forward(b.experts[e], ops::gather_rows(h, rows));
        auto weighted = ops::scale_rows(out, ops::gather_elems(gr.gates, flat));
        parts.push_back(ops::scatter_rows(weighted, rows, tokens));
    }
    MoEOutput res;
    res.y = ops::sum_of(parts);  // every token keeps >= 1 expert, so parts is nonempty
    res.record.tokens = tokens;
    res.record.experts = experts;
    res.record.gate_matrix = gr.gates;
    res.record.load_matrix = gr.load;
    res.record.selected = std::move(gr.selected);
    return res;
}

StackOutput moe_stack_forward(const MoEStack& s, const TensorPtr& h, bool train, Rng& rng) {
    require(!s.blocks.empty(), "moe_stack_forward: empty stack");
    StackOutput out;
    TensorPtr cur = h;
    for (std::size_t l = 0; l < s.blocks.size(); ++l) {
        if (l > 0) cur = ops::relu(cur);
        auto block_out = moe_forward(s.blocks[l], cur, train, rng);
        cur = ops::add(cur, block_out.y);  // residual around each block
        out.records.push_back(std::move(block_out.record));
    }
    out.y = cur;
    return out;
}

double cv_squared(const std::vector<double>& v) {
    if (v.empty()) throw std::invalid_argument("cv_squared: empty input");
    double sum = std::accumulate(v.begin(), v.end(), 0.0);
    if (sum == 0.0) return 0.0;
    double mean = sum / static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size());
    return var / (mean * mean);
}

TensorPtr importance_loss(const RoutingRecord& r) {
    require(r.tokens >= 1 && r.gate_matrix != nullptr, "importance_loss: empty record");
    return cv2_of_column_sums(r.gate_matrix);
}

TensorPtr load_loss(const RoutingRecord& r) {
    require(r.tokens >= 1 && r.load_matrix != nullptr, "load_loss: empty record");
    return cv2_of_column_sums(r.load_matrix);
}

void init_experts_from(MoEBlock& b, const ExpertMLP& src, Rng& rng) {
    require(!b.experts.empty(), "init_experts_from: block has no experts");
    for (ExpertMLP& e : b.experts) {
        require(e.w1->shape == src.w1->shape && e.b1->shape == src.b1->shape &&
                    e.w2->shape == src.w2->shape && e.b2->shape == src.b2->shape,
                "init_experts_from: expert shape mismatch");
        e.w1->values = src.w1->values;
        e.b1->values = src.b1->values;
        e.w2->values = src.w2->values;
        e.b2->values = src.b2->values;
    }
    std::size_t d = b.gate.w_g->shape[0], experts = b.gate.w_g->shape[1];
    auto fresh = glorot_uniform(d, experts, rng);
    b.gate.w_g->values = fresh->values;
    std::fill(b.gate.w_noise->values.begin(), b.gate.w_noise->values.end(), 0.0);
}

}  // namespace m3dbfs
