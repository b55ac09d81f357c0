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
#include "m3dbfs/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace m3dbfs {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

Tensor::Tensor(std::vector<std::size_t> shp, std::vector<double> vals, bool req_grad)
    : shape(std::move(shp)), values(std::move(vals)), requires_grad(req_grad) {
    if (shape.empty()) throw std::invalid_argument("Tensor: empty shape");
    for (std::size_t e : shape)
        if (e == 0) throw std::invalid_argument("Tensor: zero extent in shape");
    if (shape_numel(shape) != values.size())
        throw std::invalid_argument("Tensor: shape/value count mismatch (" + shape_str() + " vs " +
                                    std::to_string(values.size()) + " values)");
    if (requires_grad) grad.assign(values.size(), 0.0);
}

TensorPtr Tensor::create(std::vector<std::size_t> shape, std::vector<double> values,
                         bool requires_grad) {
    return std::make_shared<Tensor>(std::move(shape), std::move(values), requires_grad);
}

TensorPtr Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return create(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

TensorPtr Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return create(std::move(shape), std::vector<double>(n, value), requires_grad);
}

TensorPtr Tensor::scalar(double value, bool requires_grad) {
    return create({1}, {value}, requires_grad);
}

TensorPtr Tensor::row(std::vector<double> values, bool requires_grad) {
    std::size_t n = values.size();
    return create({n}, std::move(values), requires_grad);
}

TensorPtr Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                         bool requires_grad) {
    return create({rows, cols}, std::move(values), requires_grad);
}

void Tensor::ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
}

void Tensor::zero_grad() {
    if (!grad.empty()) grad.assign(values.size(), 0.0);
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

void check_finite(const Tensor& t, const char* what) {
    for (double v : t.values)
        if (!std::isfinite(v))
            throw std::runtime_error(std::string(what) + ": non-finite value produced");
}

namespace {

// Iterative post-order topological sort over the parent DAG.
void topo_collect(Tensor* root, std::vector<Tensor*>& order) {
    std::unordered_set<Tensor*> visited;
    std::vector<std::pair<Tensor*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Tensor* p = node->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

}  // namespace

void backward(const TensorPtr& loss) {
    if (!loss) throw std::invalid_argument("backward: null tensor");
    if (!loss->is_scalar())
        throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                    loss->shape_str());
    if (!loss->requires_grad) return;  // nothing reachable requires grad

    std::vector<Tensor*> order;
    topo_collect(loss.get(), order);

    // Interior nodes restart from zero on every call; leaf grads accumulate
    // across calls until zero_grad().
    for (Tensor* t : order)
        if (t->backward_fn) {
            t->ensure_grad();
            t->zero_grad();
        }
    loss->ensure_grad();
    loss->grad[0] += 1.0;
    // order is post-order (leaves first); run backward functions root-first.
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn();
}

}  // namespace m3dbfs
