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

/// Two-layer perceptron with equal input and output width so blocks stack.
struct ExpertMLP {
    TensorPtr w1;  // d x d_hidden
    TensorPtr b1;  // d_hidden
    TensorPtr w2;  // d_hidden x d
    TensorPtr b2;  // d
};

/// Noisy top-k gate. Clean logits come from w_g; per-expert noise scale is
/// softplus of the w_noise logits, so zero noise weights still give a noise
/// floor of softplus(0) = ln 2.
struct GatingNetwork {
    TensorPtr w_g;      // d x E
    TensorPtr w_noise;  // d x E
    std::size_t k = 1;

    std::size_t expert_count() const { return w_g->shape[1]; }
};

enum class MoEKind { sc, fc, fusion };

struct MoEBlock {
    MoEKind kind = MoEKind::fusion;
    std::vector<ExpertMLP> experts;
    GatingNetwork gate;
};

/// Several blocks of the same kind applied in sequence, each wrapped in a
/// residual connection with relu between blocks.
struct MoEStack {
    std::vector<MoEBlock> blocks;
};

/// Routing telemetry for one block invocation. The gate and load matrices are
/// live graph nodes so the balance losses differentiate through them; their
/// values double as the realized per-token records.
struct RoutingRecord {
    std::size_t tokens = 0;
    std::size_t experts = 0;
    TensorPtr gate_matrix;  // [tokens x experts], rows sparse, kept entries sum to 1
    TensorPtr load_matrix;  // [tokens x experts], smooth top-k inclusion probabilities
    std::vector<std::vector<std::size_t>> selected;  // per-token expert indices
    std::vector<Modality> token_modality;            // filled by the caller for fusion blocks
};

struct GateResult {
    TensorPtr gates;  // [E] for the single-token form, [T x E] for the batch form
    TensorPtr load;
    std::vector<std::vector<std::size_t>> selected;
};

struct MoEOutput {
    TensorPtr y;
    RoutingRecord record;
};

struct StackOutput {
    TensorPtr y;
    std::vector<RoutingRecord> records;  // one per block
};

ExpertMLP make_expert(ParameterStore& store, const std::string& prefix, std::size_t d,
                      std::size_t d_hidden, Rng& rng);
/// w_g is Glorot-initialized, w_noise starts at zero (noise std ln 2).
GatingNetwork make_gating(ParameterStore& store, const std::string& prefix, std::size_t d,
                          std::size_t experts, std::size_t k, Rng& rng);
MoEBlock make_moe_block(ParameterStore& store, const std::string& prefix, MoEKind kind,
                        std::size_t d, std::size_t d_hidden, std::size_t experts,
                        std::size_t k, Rng& rng);
MoEStack make_moe_stack(ParameterStore& store, const std::string& prefix, MoEKind kind,
                        std::size_t d, std::size_t d_hidden, std::size_t experts,
                        std::size_t k, std::size_t depth, Rng& rng);

ExpertMLP expert_from_store(const ParameterStore& store, const std::string& prefix);
MoEStack moe_stack_from_store(const ParameterStore& store, const std::string& prefix,
                              MoEKind kind, std::size_t experts, std::size_t k,
                              std::size_t depth);

TensorPtr expert_forward(const ExpertMLP& e, const TensorPtr& x);

/// Residual single-expert reference: the same arrangement as a stack in which
/// every block routes all tokens to one expert. Stage-2 models use this, and a
/// freshly cloned stack must reproduce it exactly.
TensorPtr expert_stack_forward(const ExpertMLP& e, const TensorPtr& h, std::size_t depth);

/// Noisy top-k gate for one token (x is rank-1 [d]).
/// Training draws one standard normal per expert; inference uses the clean
/// logits only and consumes no randomness. selected holds the kept experts;
/// gates is a softmax over exactly those entries (so k=1 gives a gate of 1).
/// load[i] is the smooth probability that expert i lands in the top k under
/// fresh noise for i against the realized noisy logits of the other experts.
GateResult gate_forward(const GatingNetwork& g, const TensorPtr& x, bool train, Rng& rng);
/// Batched form over token rows; noise is drawn row-major per (token, expert).
GateResult gate_forward_batch(const GatingNetwork& g, const TensorPtr& h, bool train,
                              Rng& rng);

/// Dispatch each token to its selected experts and combine outputs weighted by
/// the gates. Only selected experts are evaluated.
MoEOutput moe_forward(const MoEBlock& b, const TensorPtr& h, bool train, Rng& rng);
StackOutput moe_stack_forward(const MoEStack& s, const TensorPtr& h, bool train, Rng& rng);

/// Squared coefficient of variation with the population standard deviation;
/// zero-sum input returns 0.
double cv_squared(const std::vector<double>& v);

/// CV^2 of the per-expert gate mass, differentiable through the gates.
TensorPtr importance_loss(const RoutingRecord& r);
/// CV^2 of the per-expert smooth load, differentiable through the loads.
TensorPtr load_loss(const RoutingRecord& r);

/// Copy one expert's weights into every expert of the block and reinitialize
/// the gate (fresh Glorot w_g, zero w_noise).
void init_experts_from(MoEBlock& b, const ExpertMLP& src, Rng& rng);

}  // namespace m3dbfs
