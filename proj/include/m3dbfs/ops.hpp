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

#include <cstdint>
#include <vector>

#include "m3dbfs/tensor.hpp"

namespace m3dbfs::ops {

/// Matrix product [m x k] * [k x n] -> [m x n].
TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
TensorPtr transpose(const TensorPtr& x);

// Elementwise with limited broadcasting: same shape, scalar against anything,
// or a rank-1 row vector [n] against a matrix [m x n]. Anything else throws.
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr div(const TensorPtr& a, const TensorPtr& b);

TensorPtr scale(const TensorPtr& x, double c);
TensorPtr shift(const TensorPtr& x, double c);
TensorPtr relu(const TensorPtr& x);
TensorPtr exp(const TensorPtr& x);
/// Natural log; throws on any non-positive entry.
TensorPtr log(const TensorPtr& x);
TensorPtr softplus(const TensorPtr& x);
/// Standard normal CDF, elementwise.
TensorPtr normal_cdf(const TensorPtr& x);

/// Sum of all entries -> scalar [1].
TensorPtr sum(const TensorPtr& x);
/// Column sums of a matrix [m x n] -> [n].
TensorPtr sum_rows(const TensorPtr& x);
/// Column means of a matrix [m x n] -> [n] (the mean of the row vectors).
TensorPtr mean_rows(const TensorPtr& x);

/// Numerically stable softmax along each row; a rank-1 input is one row.
TensorPtr row_softmax(const TensorPtr& x);
/// Softmax over the mask-selected entries of each row; masked-out entries are
/// exactly zero. Every row must keep at least one entry.
TensorPtr masked_row_softmax(const TensorPtr& x, const std::vector<std::uint8_t>& keep);
/// Divide each row by its L2 norm; throws on a zero-norm row.
TensorPtr l2_normalize_rows(const TensorPtr& x);

/// Same data, new shape; element count must match.
TensorPtr reshape(const TensorPtr& x, std::vector<std::size_t> shape);

/// Concatenate rank-1 vectors.
TensorPtr concat(const std::vector<TensorPtr>& parts);
/// Stack matrices (or rank-1 rows) vertically; column counts must agree.
TensorPtr vstack(const std::vector<TensorPtr>& parts);

/// Select rows of a matrix: out[j] = x[idx[j]].
TensorPtr gather_rows(const TensorPtr& x, const std::vector<std::size_t>& idx);
/// Place rows into a zero matrix of `total_rows` rows: out[idx[j]] += src[j].
TensorPtr scatter_rows(const TensorPtr& src, const std::vector<std::size_t>& idx,
                       std::size_t total_rows);
/// Multiply row i of x by w[i]; differentiable in both operands.
TensorPtr scale_rows(const TensorPtr& x, const TensorPtr& w);
/// Per-row column regather: out(i,j) = x(i, idx[i*n+j]); idx is fixed.
TensorPtr gather_cols_per_row(const TensorPtr& x, const std::vector<std::size_t>& idx);
/// Pick flat-indexed elements into a rank-1 tensor: out[j] = x.values[idx[j]].
TensorPtr gather_elems(const TensorPtr& x, const std::vector<std::size_t>& idx);

/// Extract one entry as a scalar node.
TensorPtr get(const TensorPtr& x, std::size_t i);
TensorPtr get(const TensorPtr& x, std::size_t i, std::size_t j);

/// Fold a nonempty list with add().
TensorPtr sum_of(const std::vector<TensorPtr>& parts);

}  // namespace m3dbfs::ops
