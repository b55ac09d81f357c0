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
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace m3dbfs {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

/// Dense row-major float64 tensor participating in a define-by-run reverse-mode
/// graph. Operations in ops.hpp build fresh nodes on every forward pass; a node
/// owns shared_ptrs to its inputs, so the graph stays alive exactly as long as
/// its outputs do. Gradient buffers exist iff requires_grad and accumulate
/// across backward() calls until zero_grad().
class Tensor {
public:
    std::vector<std::size_t> shape;  // empty shape is not used; scalars are {1}
    std::vector<double> values;      // row-major
    std::vector<double> grad;        // same size as values when requires_grad
    bool requires_grad = false;

    // Reverse-mode bookkeeping. parents keeps inputs alive; backward_fn
    // scatters this node's grad into the parents' grads.
    std::vector<TensorPtr> parents;
    std::function<void()> backward_fn;

    Tensor() = default;
    Tensor(std::vector<std::size_t> shp, std::vector<double> vals, bool req_grad);

    static TensorPtr create(std::vector<std::size_t> shape, std::vector<double> values,
                            bool requires_grad = false);
    static TensorPtr zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    static TensorPtr full(std::vector<std::size_t> shape, double value,
                          bool requires_grad = false);
    static TensorPtr scalar(double value, bool requires_grad = false);
    /// 1-D tensor from a value list.
    static TensorPtr row(std::vector<double> values, bool requires_grad = false);
    /// rows x cols matrix from row-major data.
    static TensorPtr matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                            bool requires_grad = false);

    std::size_t numel() const { return values.size(); }
    std::size_t rank() const { return shape.size(); }
    bool is_scalar() const { return values.size() == 1; }
    bool is_matrix() const { return shape.size() == 2; }

    /// Row/column extents; a rank-1 tensor counts as a single row.
    std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
    std::size_t cols() const { return shape.size() == 2 ? shape[1] : (shape.empty() ? 1 : shape[0]); }

    double& at(std::size_t i) { return values[i]; }
    double at(std::size_t i) const { return values[i]; }
    double& at(std::size_t i, std::size_t j) { return values[i * cols() + j]; }
    double at(std::size_t i, std::size_t j) const { return values[i * cols() + j]; }

    void ensure_grad();
    void zero_grad();

    std::string shape_str() const;
};

/// Run reverse-mode accumulation from a scalar loss. Every requires_grad tensor
/// reachable from `loss` receives its accumulated dLoss/dTensor; repeated calls
/// without zero_grad() accumulate. Throws if loss is not a single element.
void backward(const TensorPtr& loss);

/// Number of elements implied by a shape.
std::size_t shape_numel(const std::vector<std::size_t>& shape);

/// Throws std::runtime_error naming `what` if any value is NaN/Inf.
void check_finite(const Tensor& t, const char* what);

}  // namespace m3dbfs
