#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace delta {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

/// One recorded primitive. `backward` receives the output's impl (holding the
/// upstream gradient) and adds into the grads of `inputs`.
struct GraphNode {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::function<void(const TensorImpl& out)> backward;
    const char* name = "";
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first written
    bool requires_grad = false;
    std::shared_ptr<GraphNode> grad_fn;

    void ensure_grad();
};

/// Dense row-major float64 tensor with reverse-mode autodiff.
///
/// `Tensor` is a handle: copies share storage and graph identity. Use
/// `clone()` for an independent deep copy. Operations in ops.hpp record a
/// node whenever grad mode is enabled and any input requires grad; the graph
/// is rebuilt on every forward pass and released with the last handle.
class Tensor {
public:
    Tensor();
    explicit Tensor(std::shared_ptr<TensorImpl> impl);

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value, bool requires_grad = false);
    static Tensor from_data(const Shape& shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const noexcept { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;

    std::span<double> data();
    std::span<const double> data() const;
    std::vector<double>& values();
    const std::vector<double>& values() const;

    /// Gradient buffer; empty span when no gradient has been written yet.
    std::span<const double> grad() const;
    std::span<double> grad_mut();
    bool has_grad() const;
    void zero_grad();

    bool requires_grad() const;
    Tensor& set_requires_grad(bool flag);
    bool is_leaf() const;

    /// Value of a single-element tensor.
    double item() const;

    /// Deep copy of the values, detached from any graph.
    Tensor clone() const;
    /// Shares no graph with this tensor; values are copied.
    Tensor detach() const { return clone(); }

    /// Populate grads of every requires_grad leaf reachable from this scalar.
    /// Leaf grads accumulate across calls until `zero_grad()`.
    void backward() const;

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

/// Thread-local switch for graph recording.
bool grad_enabled() noexcept;

/// RAII guard that disables graph recording for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

}  // namespace delta
