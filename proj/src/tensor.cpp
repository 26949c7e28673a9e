#include "doremi/tensor.hpp"

#include <cmath>
#include <unordered_set>

namespace doremi {

std::int64_t shape_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ConfigError("negative dimension in shape");
        n *= d;
    }
    return n;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto node = std::make_shared<TensorNode>();
    node->value.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::full(std::vector<int> shape, double v, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.node->value) x = v;
    return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
        throw ConfigError("tensor data length does not match shape");
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.node->value) x = rng.normal(0.0, stddev);
    return t;
}

int Tensor::rows() const {
    int r = 1;
    for (std::size_t i = 0; i + 1 < node->shape.size(); ++i) r *= node->shape[i];
    return r;
}

int Tensor::cols() const {
    if (node->shape.empty()) return 1;
    return node->shape.back();
}

double Tensor::scalar() const {
    if (numel() != 1) throw UsageError("scalar() on tensor with more than one element");
    return node->value[0];
}

std::span<double> Tensor::grad() {
    if (node->grad.size() != node->value.size()) node->grad.assign(node->value.size(), 0.0);
    return node->grad;
}

void Tensor::zero_grad() {
    if (!node->grad.empty()) std::fill(node->grad.begin(), node->grad.end(), 0.0);
}

namespace detail {

void check_finite(const Tensor& t, const char* op) {
    for (double v : t.node->value) {
        if (!std::isfinite(v))
            throw NumericsError(std::string("non-finite value produced by ") + op);
    }
}

bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts)
        if (t->node && t->node->requires_grad) return true;
    return false;
}

std::span<double> grad_of(const std::shared_ptr<TensorNode>& n) {
    if (n->grad.size() != n->value.size()) n->grad.assign(n->value.size(), 0.0);
    return n->grad;
}

void accum_grad(const std::shared_ptr<TensorNode>& n, const double* src, std::size_t count) {
    if (!n->requires_grad) return;
    auto g = grad_of(n);
    for (std::size_t i = 0; i < count; ++i) g[i] += src[i];
}

}  // namespace detail

void Tape::record(std::vector<std::shared_ptr<TensorNode>> inputs,
                  std::shared_ptr<TensorNode> output, BackwardFn fn, const char* name) {
    records_.push_back(Record{std::move(inputs), std::move(output), std::move(fn), name});
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw UsageError("backward requires a scalar loss");

    // Intermediate gradients belong to this traversal only.
    for (auto& r : records_) {
        r.output->grad.assign(r.output->value.size(), 0.0);
    }
    detail::grad_of(loss.node);
    loss.node->grad[0] = 1.0;

    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
        it->fn();
    }
}

bool Tape::touches(const TensorNode* n) const {
    for (const auto& r : records_) {
        for (const auto& in : r.inputs)
            if (in.get() == n) return true;
        if (r.output.get() == n) return true;
    }
    return false;
}

std::vector<double> finite_difference_gradient(const std::function<double()>& f, Tensor& x,
                                               double h) {
    if (h <= 0.0) throw UsageError("finite difference step must be positive");
    std::vector<double> g(static_cast<std::size_t>(x.numel()));
    auto vals = x.values();
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double orig = vals[i];
        vals[i] = orig + h;
        const double fp = f();
        vals[i] = orig - h;
        const double fm = f();
        vals[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

}  // namespace doremi
