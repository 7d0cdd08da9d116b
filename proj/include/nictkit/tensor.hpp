#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace nictkit::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tensor;
struct TensorImpl;

/// Vector-Jacobian product of one recorded kernel. Receives the output
/// gradient and the kernel inputs; accumulates into the inputs' gradients.
using BackwardFn = std::function<void(std::span<const float> grad_out, std::span<const Tensor> inputs)>;

struct Node {
    std::string kernel;
    std::vector<Tensor> inputs;
    BackwardFn backward;
};

struct TensorImpl {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::shared_ptr<Node> producer;
    // 64-bit value of a single-element result of reductions and scalar
    // arithmetic; NaN when not tracked.
    double precise = std::numeric_limits<double>::quiet_NaN();
};

/// Dense float32 tensor with define-by-run gradient recording. Copies share
/// storage; use clone() for an independent leaf.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float fill, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
    static Tensor scalar(float v, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    /// Negative indices count from the back.
    std::size_t dim(int i) const;
    std::size_t numel() const { return impl_->value.size(); }

    std::span<const float> values() const { return impl_->value; }
    /// Mutable access for leaves (optimizer updates, initialisation).
    std::span<float> mutable_values() { return impl_->value; }
    const float* data() const { return impl_->value.data(); }
    float item() const;
    // item() at 64 bits when the producing kernel kept it.
    double precise_item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on) { impl_->requires_grad = on; }
    bool is_leaf() const { return impl_->producer == nullptr; }
    const Node* producer() const { return impl_->producer.get(); }

    /// Zeros when nothing has been accumulated.
    std::vector<float> grad() const;
    bool has_grad() const { return !impl_->grad.empty(); }
    void zero_grad() { impl_->grad.clear(); }

    /// Independent leaf holding a copy of the values.
    Tensor clone(bool requires_grad = false) const;
    /// Leaf sharing nothing with the graph (same values, no producer).
    Tensor detach() const { return clone(false); }

    TensorImpl* impl() const { return impl_.get(); }
    bool same(const Tensor& other) const { return impl_ == other.impl_; }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    friend Tensor make_result(std::string, Shape, std::vector<float>, std::vector<Tensor>, BackwardFn);
    std::shared_ptr<TensorImpl> impl_;
};

/// Name -> tensor table, iterated in name order.
using ParamTable = std::map<std::string, Tensor>;

/// Records a kernel result. If no input requires grad (or recording is
/// disabled) the backward rule is dropped. Rejects non-finite outputs.
Tensor make_result(std::string kernel, Shape shape, std::vector<float> value, std::vector<Tensor> inputs,
                   BackwardFn backward);

/// Gradient buffer of `t`, allocated on first use; nullptr when `t` does not
/// take gradients.
float* grad_buffer(const Tensor& t);

/// Disables recording for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};
bool grad_enabled();

/// Reverse sweep from a scalar loss. Each recorded node runs exactly once;
/// gradients accumulate additively across fan-out.
void backward(const Tensor& loss);

}  // namespace nictkit::ad
