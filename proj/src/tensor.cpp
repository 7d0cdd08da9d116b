#include "nictkit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "nictkit/error.hpp"

namespace nictkit::ad {
namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string to_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
    return s + "]";
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float fill, bool requires_grad) {
    const auto n = ad::numel(shape);
    return from(std::move(shape), std::vector<float>(n, fill), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
    if (ad::numel(shape) != values.size())
        throw ShapeMismatch("shape " + to_string(shape) + " needs " + std::to_string(ad::numel(shape)) +
                            " values, got " + std::to_string(values.size()));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->value = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float v, bool requires_grad) { return from({}, {v}, requires_grad); }

std::size_t Tensor::dim(int i) const {
    const int r = static_cast<int>(rank());
    const int k = i < 0 ? r + i : i;
    if (k < 0 || k >= r) throw ShapeMismatch("dim " + std::to_string(i) + " out of range for " + to_string(shape()));
    return impl_->shape[static_cast<std::size_t>(k)];
}

float Tensor::item() const {
    if (numel() != 1) throw ShapeMismatch("item() on tensor of shape " + to_string(shape()));
    return impl_->value[0];
}

double Tensor::precise_item() const {
    const float v = item();
    return std::isnan(impl_->precise) ? static_cast<double>(v) : impl_->precise;
}

std::vector<float> Tensor::grad() const {
    if (impl_->grad.empty()) return std::vector<float>(numel(), 0.0f);
    return impl_->grad;
}

Tensor Tensor::clone(bool requires_grad) const { return from(shape(), impl_->value, requires_grad); }

Tensor make_result(std::string kernel, Shape shape, std::vector<float> value, std::vector<Tensor> inputs,
                   BackwardFn backward) {
    for (float v : value)
        if (!std::isfinite(v)) throw NonFiniteValue("kernel '" + kernel + "' produced NaN/Inf");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->value = std::move(value);
    const bool track = g_grad_enabled &&
                       std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (track) {
        impl->requires_grad = true;
        impl->producer = std::make_shared<Node>(Node{std::move(kernel), std::move(inputs), std::move(backward)});
    }
    return Tensor(std::move(impl));
}

float* grad_buffer(const Tensor& t) {
    auto* impl = t.impl();
    if (!impl->requires_grad) return nullptr;
    if (impl->grad.empty()) impl->grad.assign(impl->value.size(), 0.0f);
    return impl->grad.data();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw NonScalarLoss("loss has shape " + to_string(loss.shape()));
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS over producers gives a topological order.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack{{loss.impl(), 0}};
    seen.insert(loss.impl());
    while (!stack.empty()) {
        auto& [impl, next] = stack.back();
        const Node* node = impl->producer.get();
        if (node && next < node->inputs.size()) {
            TensorImpl* child = node->inputs[next++].impl();
            if (child->producer && seen.insert(child).second) stack.emplace_back(child, 0);
            continue;
        }
        order.push_back(impl);
        stack.pop_back();
    }

    float* g = grad_buffer(loss);
    g[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* impl = *it;
        if (impl->grad.empty()) continue;
        const Node& node = *impl->producer;
        node.backward(impl->grad, node.inputs);
    }
}

}  // namespace nictkit::ad
