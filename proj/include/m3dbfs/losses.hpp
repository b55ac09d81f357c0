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

#include <vector>

#include "m3dbfs/tensor.hpp"

namespace m3dbfs {

struct LossConfig {
    double tau = 4.0;    // distillation temperature
    double tau_c = 0.5;  // contrastive temperature
    double tau_d = 0.5;  // disentanglement temperature
    double alpha = 0.6;  // stage-3 mix
    double beta = 0.3;   // stage-2 mix

    /// Throws std::invalid_argument unless temperatures are positive and the
    /// mixing weights lie in the open unit interval.
    void validate() const;
};

/// Mean negative log-likelihood over rows of [B x 2] logits. The rank-1
/// overload scores a single sample. Computed via a stabilized log-softmax, so
/// extreme logits stay finite.
TensorPtr cross_entropy(const TensorPtr& logits, const std::vector<int>& y);
TensorPtr cross_entropy(const TensorPtr& logits, int y);

/// Temperature-softened distillation on pooled representations:
/// (tau^2/2) * [KL(softmax(t_fc/tau) || softmax(s_fc/tau)) + same for SC],
/// averaged over the batch. Teachers must be constants (no gradient).
TensorPtr distill_loss(const TensorPtr& student_sc, const TensorPtr& student_fc,
                       const TensorPtr& teacher_sc, const TensorPtr& teacher_fc, double tau);

/// Symmetric InfoNCE over the B x B cosine-similarity matrix of paired
/// batches: rows contrast SC against all FC, columns the reverse; the result
/// is the mean of the two directions. B = 1 gives exactly zero.
TensorPtr cmbp_contrast(const TensorPtr& z_sc, const TensorPtr& z_fc, double tau_c);

/// Per sample and per type m in {SC, FC, Fusion}: softmax classification of
/// the anchor against the other two types on cosine similarities, averaged
/// over the 3B terms. Pushes type embeddings apart while each stays close to
/// the anchor.
TensorPtr disentangle_loss(const TensorPtr& z_sc, const TensorPtr& z_fc,
                           const TensorPtr& z_fusion, const TensorPtr& z_anchor,
                           double tau_d);

/// ce + beta * (distill + contrast); beta must lie in (0,1).
TensorPtr stage2_loss(const TensorPtr& ce, const TensorPtr& distill,
                      const TensorPtr& contrast, double beta);
/// ce + alpha * moe + (1 - alpha) * disen; alpha must lie in (0,1).
TensorPtr stage3_loss(const TensorPtr& ce, const TensorPtr& moe, const TensorPtr& disen,
                      double alpha);

}  // namespace m3dbfs
