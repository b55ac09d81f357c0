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

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace m3dbfs {

/// Region-by-timepoint BOLD-style series. Row i is region i.
struct TimeSeries {
    std::size_t regions = 0;
    std::size_t timepoints = 0;
    std::vector<double> values;  // regions x timepoints, row-major

    double at(std::size_t i, std::size_t t) const { return values[i * timepoints + t]; }
};

enum class ConnKind { functional, structural };

/// Dense symmetric connectivity. Functional matrices are Pearson correlations
/// (unit diagonal, entries in [-1, 1]); structural matrices are nonnegative
/// fiber counts.
struct ConnectivityMatrix {
    std::size_t size = 0;
    ConnKind kind = ConnKind::functional;
    std::vector<double> values;  // size x size, row-major

    double at(std::size_t i, std::size_t j) const { return values[i * size + j]; }
    /// Throws std::runtime_error on any invariant violation (asymmetry beyond
    /// 1e-9, out-of-range functional entries, negative structural entries).
    void validate() const;
};

/// Binary edge indicator produced by the thresholding ops. Symmetric with a
/// zero diagonal.
struct Adjacency {
    std::size_t size = 0;
    std::vector<double> values;  // size x size, entries in {0, 1}

    double at(std::size_t i, std::size_t j) const { return values[i * size + j]; }
    std::size_t edge_count() const;  // undirected edges
};

enum class Modality { sc, fc };

/// One modality of a sample: thresholded adjacency plus node features. Node
/// features are the raw connectivity rows, so feature dimension equals the
/// region count.
struct BrainGraph {
    Modality modality = Modality::sc;
    std::size_t regions = 0;
    std::vector<double> adjacency;  // regions x regions, binary
    std::vector<double> features;   // regions x regions
};

struct Sample {
    std::string id;
    BrainGraph sc;
    BrainGraph fc;
    int label = 0;  // {0, 1}
};

struct Dataset {
    std::vector<Sample> samples;
    std::size_t region_count = 0;
};

/// Pearson correlation matrix of the region series. Diagonal exactly 1;
/// symmetric; throws naming the region index if any row is constant.
ConnectivityMatrix pearson_fc(const TimeSeries& ts);

/// Keep the ceil(density * P) largest-magnitude off-diagonal entries
/// (P = N(N-1)/2 upper-triangle pairs) as binary edges. Ties prefer the
/// lexicographically smaller (i, j). density must lie in (0, 1].
Adjacency threshold_proportional(const ConnectivityMatrix& m, double density);

/// Edge wherever the entry is strictly greater than t. Structural input only.
Adjacency threshold_absolute(const ConnectivityMatrix& m, double t);

/// Pair connectivity with its adjacency: features are the connectivity rows
/// verbatim, modality follows the connectivity kind.
BrainGraph build_graph(const ConnectivityMatrix& m, const Adjacency& adj);

/// Two-class synthetic generator standing in for restricted clinical data.
/// Both classes share a two-community partition; class 1 strengthens the
/// in-community structural block mean and the functional latent coupling by
/// class_gap, so class_gap = 0 makes the classes indistinguishable.
struct SynthConfig {
    std::size_t n_samples = 40;
    std::size_t regions = 30;
    std::size_t timepoints = 120;
    double class_gap = 2.0;
    double noise = 1.0;
    std::uint64_t seed = 7;
};

Dataset synth_generate(const SynthConfig& cfg);

/// Thresholds applied when rebuilding adjacency from stored connectivity.
struct ThresholdOptions {
    double fc_density = 0.2;
    double sc_threshold = 0.0;
};

/// Re-derive every adjacency from the stored feature rows (which hold the
/// connectivity verbatim) under new thresholds.
void rethreshold(Dataset& d, const ThresholdOptions& opts);

/// Directory layout: manifest.tsv with header id/label/sc_file/fc_file plus
/// one CSV matrix file per modality per sample. Floats are written with 17
/// significant digits so the round trip is bit-exact.
void save_dataset(const Dataset& d, const std::string& dir);
Dataset load_dataset(const std::string& dir, const ThresholdOptions& opts = {});

struct FoldSplit {
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> test_idx;
};

/// Stratified k-fold partition: per-class fold sizes differ by at most one,
/// and remainder slots rotate across classes so total fold sizes also differ
/// by at most one. Deterministic given the seed.
std::vector<FoldSplit> kfold_split(std::size_t n, std::size_t k,
                                   const std::vector<int>& labels, std::uint64_t seed);

/// Plain-text matrix IO: comma-separated decimal values, LF endings, no
/// header. Read infers the shape and reports parse errors with line numbers.
std::vector<double> read_matrix_csv(const std::string& path, std::size_t& rows,
                                    std::size_t& cols);
void write_matrix_csv(const std::string& path, const std::vector<double>& values,
                      std::size_t rows, std::size_t cols);

}  // namespace m3dbfs
