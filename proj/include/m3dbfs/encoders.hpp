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
#pragma once

#include <string>
#include <vector>

#include "m3dbfs/braindata.hpp"
#include "m3dbfs/params.hpp"
#include "m3dbfs/tensor.hpp"

namespace m3dbfs {

/// Stack of graph-convolution layers. Layer l maps H to relu(Ahat H W_l);
/// the final layer stays linear so embeddings keep their sign.
struct GCNEncoder {
    std::vector<TensorPtr> weights;

    std::size_t layer_count() const { return weights.size(); }
    std::size_t in_dim() const { return weights.front()->shape[0]; }
    std::size_t out_dim() const { return weights.back()->shape[1]; }
};

/// Single affine map from a pooled embedding to two class logits.
struct ClassifierHead {
    TensorPtr w;  // in_dim x 2
    TensorPtr b;  // 2
};

/// Linear map aligning encoder output to the MoE token width.
struct Projection {
    TensorPtr w;  // in_dim x out_dim
};

/// Factories register weights under "<prefix>.w<l>" (plus ".b" for heads) so
/// checkpoints and freeze rules can address them by name.
GCNEncoder make_gcn_encoder(ParameterStore& store, const std::string& prefix,
                            std::size_t in_dim, std::size_t hidden_dim,
                            std::size_t out_dim, std::size_t layers, Rng& rng);
ClassifierHead make_classifier_head(ParameterStore& store, const std::string& prefix,
                                    std::size_t in_dim, Rng& rng);
Projection make_projection(ParameterStore& store, const std::string& prefix,
                           std::size_t in_dim, std::size_t out_dim, Rng& rng);

/// Rebuild encoder/head/projection views over tensors already present in a
/// store (e.g. after loading a checkpoint).
GCNEncoder gcn_from_store(const ParameterStore& store, const std::string& prefix,
                          std::size_t layers);
ClassifierHead head_from_store(const ParameterStore& store, const std::string& prefix);
Projection projection_from_store(const ParameterStore& store, const std::string& prefix);

/// Symmetric-normalized adjacency with self-loops as a constant tensor:
/// Ahat = D^{-1/2} (A + I) D^{-1/2} with D the degree of A + I.
TensorPtr normalized_adjacency(const std::vector<double>& adjacency, std::size_t n);

/// Per-region embeddings. The BrainGraph overload normalizes the adjacency on
/// the fly; the tensor overload takes a precomputed Ahat for hot loops.
TensorPtr gcn_forward(const GCNEncoder& enc, const TensorPtr& ahat, const TensorPtr& x);
TensorPtr gcn_forward(const GCNEncoder& enc, const BrainGraph& g);

/// Mean over region rows -> rank-1 embedding.
TensorPtr readout(const TensorPtr& h);

/// Affine map to two logits. Accepts a rank-1 embedding (returns rank-1
/// logits) or a batch of row embeddings (returns [B x 2]).
TensorPtr classify(const ClassifierHead& head, const TensorPtr& z);

/// Apply the projection to every token row.
TensorPtr project_tokens(const Projection& proj, const TensorPtr& h);

}  // namespace m3dbfs
