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

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "m3dbfs/braindata.hpp"
#include "m3dbfs/checkpoint.hpp"
#include "m3dbfs/config.hpp"
#include "m3dbfs/encoders.hpp"
#include "m3dbfs/metrics.hpp"
#include "m3dbfs/moe.hpp"
#include "m3dbfs/params.hpp"

namespace m3dbfs {

/// A dataset sample with its normalized adjacencies and feature matrices
/// prebuilt as constant tensors, so training epochs skip the graph setup.
struct PreparedSample {
    std::string id;
    int label = 0;
    TensorPtr ahat_sc, x_sc;
    TensorPtr ahat_fc, x_fc;
};

std::vector<PreparedSample> prepare_samples(const Dataset& d);
std::vector<PreparedSample> select_samples(const std::vector<PreparedSample>& all,
                                           const std::vector<std::size_t>& idx);

/// Stratified split: per class, `frac` of the samples (at least one, at most
/// all but one) go to `held`; classes with a single sample stay in `rest`.
/// `held` can come back empty when no class has two samples.
void stratified_split(const std::vector<PreparedSample>& data, double frac, Rng& rng,
                      std::vector<PreparedSample>& rest, std::vector<PreparedSample>& held);

/// Independent per-modality encoder + head pairs. Parameter names start with
/// "s1.".
struct Stage1Model {
    GCNEncoder enc_sc, enc_fc;
    ClassifierHead head_sc, head_fc;
};

/// Fusion model with one expert per kind, applied in the same stacked residual
/// arrangement the stage-3 MoE uses. Parameter names start with "s2.".
struct Stage2Model {
    GCNEncoder enc_sc, enc_fc;
    Projection proj_sc, proj_fc;
    ExpertMLP expert_sc, expert_fc, expert_fusion;
    ClassifierHead ffn;  // over concat(z_sc, z_fc, z_fusion)
    std::size_t depth = 2;
};

/// Stage-2 model kept frozen, plus trainable MoE stacks, the anchor projection
/// (3d -> d), and the final classifier. New parameter names start with "s3.".
struct Stage3Model {
    Stage2Model base;
    MoEStack moe_sc, moe_fc, moe_fusion;
    Projection anchor;
    ClassifierHead head;
};

Stage1Model build_stage1(ParameterStore& store, const RunConfig& cfg, Rng& rng);
Stage2Model build_stage2(ParameterStore& store, const RunConfig& cfg, Rng& rng);
Stage3Model build_stage3(ParameterStore& store, const RunConfig& cfg, Rng& rng);

Stage1Model stage1_from_store(const ParameterStore& store, const RunConfig& cfg);
Stage2Model stage2_from_store(const ParameterStore& store, const RunConfig& cfg);
Stage3Model stage3_from_store(const ParameterStore& store, const RunConfig& cfg);

/// Build the stage's parameter skeleton in `store`, copy the checkpoint into
/// it, and require the two to cover each other exactly. The stage-3 loader
/// also refreezes the stage-2 subset.
Stage1Model stage1_model_from_checkpoint(ParameterStore& store, const Checkpoint& ckpt,
                                         const RunConfig& cfg);
Stage2Model stage2_model_from_checkpoint(ParameterStore& store, const Checkpoint& ckpt,
                                         const RunConfig& cfg);
Stage3Model stage3_model_from_checkpoint(ParameterStore& store, const Checkpoint& ckpt,
                                         const RunConfig& cfg);

TensorPtr stage1_logits(const Stage1Model& m, const PreparedSample& s, Modality mod);

struct Stage2Forward {
    TensorPtr logits;                // [2]
    TensorPtr pooled_sc, pooled_fc;  // pooled encoder representations, [d]
    TensorPtr z_sc, z_fc, z_fusion;  // pooled expert outputs, [d]
};
Stage2Forward stage2_forward(const Stage2Model& m, const PreparedSample& s);

struct Stage3Forward {
    TensorPtr logits;      // anchor-head logits, the stage-3 prediction
    TensorPtr ffn_logits;  // frozen stage-2 head over the MoE embeddings
    TensorPtr z_sc, z_fc, z_fusion, z_anchor;
    std::vector<RoutingRecord> rec_sc, rec_fc, rec_fusion;  // one record per block
};
Stage3Forward stage3_forward(const Stage3Model& m, const PreparedSample& s, bool train,
                             Rng& rng);

struct EpochLog {
    std::size_t epoch = 0;
    double loss = 0.0;
    double val_acc = 0.0;
    double ce = 0.0, distill = 0.0, contrast = 0.0, moe = 0.0, disen = 0.0;
    /// Realized importance CV^2 of the fusion stack, averaged over this
    /// epoch's training batches (stage 3 only).
    double fusion_cv2 = 0.0;
};

struct StageHistory {
    std::string name;  // "stage1_sc", "stage1_fc", "stage2", "stage3"
    std::vector<EpochLog> epochs;
};

struct TrainResult {
    Checkpoint ckpt;
    std::vector<StageHistory> histories;
};

/// Early-stopped minibatch Adam training. `data` is the training split; a
/// stratified val_fraction slice is carved out internally for early stopping
/// and the best-validation weights are restored before checkpointing. Throws
/// with the epoch index if the loss turns non-finite.
TrainResult train_stage1(const std::vector<PreparedSample>& data, const RunConfig& cfg,
                         std::uint64_t seed);
TrainResult train_stage2(const std::vector<PreparedSample>& data, const Checkpoint& stage1,
                         const RunConfig& cfg, std::uint64_t seed);
TrainResult train_stage3(const std::vector<PreparedSample>& data, const Checkpoint& stage2,
                         const RunConfig& cfg, std::uint64_t seed);

/// Per-epoch TSV: epoch, composite loss, val accuracy, then the individual
/// loss terms (zero where a term does not apply to the stage).
std::string history_tsv(const StageHistory& h);

/// Argmax predictions and class-1 softmax scores from a per-sample logits
/// function; ties prefer class 0.
Metrics evaluate(const std::function<TensorPtr(const PreparedSample&)>& logits_fn,
                 const std::vector<PreparedSample>& data);

struct CvResult {
    std::vector<Metrics> runs;  // repeat-major, fold-minor
    std::string table_tsv;
};

/// Stratified k-fold cross-validation with `repeats` reshuffles: every
/// (repeat, fold) trains stages 1 -> 2 -> 3 on the train split under a derived
/// seed and evaluates stage 3 on the held-out fold. Runs execute on up to
/// cfg.threads threads; results are deterministic regardless of thread count.
CvResult run_cv(const Dataset& data, const RunConfig& cfg, std::size_t k,
                std::size_t repeats, std::uint64_t seed);

/// Inference-mode routing census over a dataset. fractions[kind][block][e] is
/// the share of routing selections block `block` of that kind sent to expert
/// e; fusion_counts and fusion_sc_frac additionally split each fusion expert's
/// tokens by originating modality. Kind order is SC, FC, Fusion.
struct RoutingSummary {
    std::size_t experts = 0;
    std::size_t depth = 0;
    std::array<std::vector<std::vector<double>>, 3> fractions;
    std::vector<std::vector<std::size_t>> fusion_counts;
    std::vector<std::vector<double>> fusion_sc_frac;
};
RoutingSummary aggregate_routing(const Stage3Model& m,
                                 const std::vector<PreparedSample>& data);

/// True when every checkpoint record with the given name prefix matches the
/// store's current values bit-exactly.
bool frozen_matches_checkpoint(const ParameterStore& store, const Checkpoint& ckpt,
                               const std::string& prefix);

}  // namespace m3dbfs
