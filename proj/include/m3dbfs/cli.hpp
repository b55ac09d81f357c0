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

#include <iosfwd>
#include <string>

#include "m3dbfs/config.hpp"

namespace m3dbfs::cli {

/// Fresh run directory under cfg.out_dir, named by timestamp and seed (with a
/// numeric suffix on collision). The directory is created.
std::string make_run_dir(const RunConfig& cfg);

/// Generate a synthetic dataset into cfg.data_dir and print a summary.
void cmd_gen_data(const RunConfig& cfg, std::ostream& out);

/// Build a dataset from raw per-sample CSVs listed in raw_dir/manifest.tsv
/// (columns id, label, sc_file, ts_file): Pearson correlation over the time
/// series, thresholding per the config, result written to cfg.data_dir.
/// Structural matrices may be asymmetric up to 1e-6 and are symmetrized;
/// anything worse, negative fiber counts, and constant series rows are errors.
void cmd_preprocess(const RunConfig& cfg, const std::string& raw_dir, std::ostream& out);

/// Train the requested stage(s) ("1", "2", "3", or "all") on cfg.data_dir,
/// holding out a stratified test_fraction split for final metrics. Writes
/// checkpoints, per-epoch history TSVs, metrics TSVs, and the effective config
/// into run_dir. Stages 2 and 3 load their prerequisite checkpoint from
/// run_dir when not trained in the same invocation.
void cmd_train(const RunConfig& cfg, const std::string& stage, const std::string& run_dir,
               std::ostream& out);

/// With ckpt_path: evaluate a stage-2 or stage-3 checkpoint on the whole
/// dataset (model shape comes from the checkpoint's embedded config). With
/// cv_k > 0: run repeated stratified k-fold cross-validation, training all
/// three stages per fold, and emit the mean +/- std metrics table.
void cmd_eval(const RunConfig& cfg, const std::string& ckpt_path, std::size_t cv_k,
              std::size_t repeats, const std::string& run_dir, std::ostream& out);

/// Routing census of a stage-3 checkpoint over the dataset, at inference.
/// Writes expert_fractions.csv (per MoE, per block, per expert share of
/// routing selections) and fusion_origin.csv (per fusion expert, share of its
/// tokens coming from SC vs FC) into run_dir.
void cmd_inspect_experts(const RunConfig& cfg, const std::string& ckpt_path,
                         const std::string& run_dir, std::ostream& out);

}  // namespace m3dbfs::cli
