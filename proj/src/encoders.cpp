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
#include "m3dbfs/encoders.hpp"

#include <cmath>
#include <stdexcept>

#include "m3dbfs/ops.hpp"

namespace m3dbfs {

GCNEncoder make_gcn_encoder(ParameterStore& store, const std::string& prefix,
                            std::size_t in_dim, std::size_t hidden_dim,
                            std::size_t out_dim, std::size_t layers, Rng& rng) {
    if (layers < 1) throw std::invalid_argument("make_gcn_encoder: need at least one layer");
    GCNEncoder enc;
    for (std::size_t l = 0; l < layers; ++l) {
        std::size_t fi = l == 0 ? in_dim : hidden_dim;
        std::size_t fo = l + 1 == layers ? out_dim : hidden_dim;
        enc.weights.push_back(
            store.add(prefix + ".w" + std::to_string(l), glorot_uniform(fi, fo, rng)));
    }
    return enc;
}

ClassifierHead make_classifier_head(ParameterStore& store, const std::string& prefix,
                                    std::size_t in_dim, Rng& rng) {
    ClassifierHead head;
    head.w = store.add(prefix + ".w", glorot_uniform(in_dim, 2, rng));
    head.b = store.add(prefix + ".b", Tensor::zeros({2}, true));
    return head;
}

Projection make_projection(ParameterStore& store, const std::string& prefix,
                           std::size_t in_dim, std::size_t out_dim, Rng& rng) {
    Projection p;
    p.w = store.add(prefix + ".w", glorot_uniform(in_dim, out_dim, rng));
    return p;
}

GCNEncoder gcn_from_store(const ParameterStore& store, const std::string& prefix,
                          std::size_t layers) {
    GCNEncoder enc;
    for (std::size_t l = 0; l < layers; ++l)
        enc.weights.push_back(store.get(prefix + ".w" + std::to_string(l)));
    return enc;
}

ClassifierHead head_from_store(const ParameterStore& store, const std::string& prefix) {
    return {store.get(prefix + ".w"), store.get(prefix + ".b")};
}

Projection projection_from_store(const ParameterStore& store, const std::string& prefix) {
    return {store.get(prefix + ".w")};
}

TensorPtr normalized_adjacency(const std::vector<double>& adjacency, std::size_t n) {
    if (adjacency.size() != n * n)
        throw std::invalid_argument("normalized_adjacency: shape mismatch");
    // Degrees of A + I; the self-loop keeps every degree >= 1.
    std::vector<double> inv_sqrt_deg(n);
    for (std::size_t i = 0; i < n; ++i) {
        double d = 1.0;
        for (std::size_t j = 0; j < n; ++j) d += adjacency[i * n + j];
        inv_sqrt_deg[i] = 1.0 / std::sqrt(d);
    }
    std::vector<double> ahat(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double a = adjacency[i * n + j] + (i == j ? 1.0 : 0.0);
            ahat[i * n + j] = a * inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    return Tensor::create({n, n}, std::move(ahat), false);
}

TensorPtr gcn_forward(const GCNEncoder& enc, const TensorPtr& ahat, const TensorPtr& x) {
    if (x->rank() != 2 || x->shape[1] != enc.in_dim())
        throw std::invalid_argument("gcn_forward: features are " + x->shape_str() +
                                    " but the first layer expects width " +
                                    std::to_string(enc.in_dim()));
    TensorPtr h = x;
    for (std::size_t l = 0; l < enc.weights.size(); ++l) {
        h = ops::matmul(ahat, ops::matmul(h, enc.weights[l]));
        if (l + 1 < enc.weights.size()) h = ops::relu(h);
    }
    return h;
}

TensorPtr gcn_forward(const GCNEncoder& enc, const BrainGraph& g) {
    auto ahat = normalized_adjacency(g.adjacency, g.regions);
    auto x = Tensor::create({g.regions, g.regions}, g.features, false);
    return gcn_forward(enc, ahat, x);
}

TensorPtr readout(const TensorPtr& h) { return ops::mean_rows(h); }

TensorPtr classify(const ClassifierHead& head, const TensorPtr& z) {
    bool single = z->rank() == 1;
    TensorPtr rows = single ? ops::reshape(z, {1, z->shape[0]}) : z;
    if (rows->shape[1] != head.w->shape[0])
        throw std::invalid_argument("classify: embedding width " +
                                    std::to_string(rows->shape[1]) + " does not match head");
    auto logits = ops::add(ops::matmul(rows, head.w), head.b);
    return single ? ops::reshape(logits, {2}) : logits;
}

TensorPtr project_tokens(const Projection& proj, const TensorPtr& h) {
    return ops::matmul(h, proj.w);
}

}  // namespace m3dbfs
