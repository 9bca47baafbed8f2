#include "delta/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <unordered_set>
#include <utility>

#include "delta/errors.hpp"

namespace delta {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::string out = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(shape[i]);
    }
    return out + ")";
}

void TensorImpl::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor::Tensor() = default;
Tensor::Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
    return from_data(shape, std::vector<double>(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data, bool requires_grad) {
    for (auto extent : shape) {
        if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (data.size() != shape_numel(shape)) {
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = shape;
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from_data({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= impl_->shape.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(impl_->shape));
    }
    return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<double> Tensor::data() { return impl_->data; }
std::span<const double> Tensor::data() const { return impl_->data; }
std::vector<double>& Tensor::values() { return impl_->data; }
const std::vector<double>& Tensor::values() const { return impl_->data; }

std::span<const double> Tensor::grad() const { return impl_->grad; }

std::span<double> Tensor::grad_mut() {
    impl_->ensure_grad();
    return impl_->grad;
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
    if (!is_leaf()) throw ContractError("requires_grad can only be changed on leaf tensors");
    impl_->requires_grad = flag;
    return *this;
}

bool Tensor::is_leaf() const { return impl_->grad_fn == nullptr; }

double Tensor::item() const {
    if (impl_->data.size() != 1) {
        throw ShapeError("item() needs a single-element tensor, got shape " + shape_str(impl_->shape));
    }
    return impl_->data[0];
}

Tensor Tensor::clone() const { return from_data(impl_->shape, impl_->data, false); }

void Tensor::backward() const {
    if (!impl_) throw ContractError("backward on an undefined tensor");
    if (impl_->data.size() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " + shape_str(impl_->shape));
    }
    if (!impl_->requires_grad) throw ContractError("backward on a tensor that does not require grad");

    // Iterative post-order DFS yields inputs before their consumers.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack{{impl_.get(), 0}};
    visited.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, next_input] = stack.back();
        const auto& fn = node->grad_fn;
        if (fn && next_input < fn->inputs.size()) {
            TensorImpl* child = fn->inputs[next_input++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }

    for (TensorImpl* node : order) {
        if (node->grad_fn) node->grad.assign(node->data.size(), 0.0);
    }
    impl_->ensure_grad();
    impl_->grad[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (!node->grad_fn) continue;
        for (const auto& input : node->grad_fn->inputs) {
            if (input->requires_grad) input->ensure_grad();
        }
        node->grad_fn->backward(*node);
        node->grad.clear();
        node->grad.shrink_to_fit();
    }
}

}  // namespace delta
