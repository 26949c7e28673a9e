#pragma once

// Dense fp64 tensors with tape-based reverse-mode gradients. Tensors are
// cheap handles onto shared nodes; a Tape records every op whose inputs
// require gradients and replays the records in reverse on backward().
//
// Every forward op checks its output for NaN/Inf and throws NumericsError;
// non-finite values never propagate.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "doremi/common.hpp"
#include "doremi/rng.hpp"

namespace doremi {

struct TensorNode {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized on first accumulation
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : node(std::move(n)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double v, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev,
                        bool requires_grad = false);

    bool defined() const { return node != nullptr; }
    const std::vector<int>& shape() const { return node->shape; }
    int dim(int i) const { return node->shape[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(node->value.size()); }
    int rows() const;  // product of all dims but the last
    int cols() const;  // last dim
    bool requires_grad() const { return node->requires_grad; }
    void set_requires_grad(bool b) { node->requires_grad = b; }

    std::span<double> values() { return node->value; }
    std::span<const double> values() const { return node->value; }
    double& at(std::int64_t i) { return node->value[static_cast<std::size_t>(i)]; }
    double at(std::int64_t i) const { return node->value[static_cast<std::size_t>(i)]; }
    double scalar() const;

    // Gradient buffer; sized and zeroed on first access.
    std::span<double> grad();
    bool has_grad() const { return !node->grad.empty(); }
    void zero_grad();

    std::shared_ptr<TensorNode> node;
};

std::int64_t shape_numel(const std::vector<int>& shape);

class Tape {
public:
    using BackwardFn = std::function<void()>;

    void record(std::vector<std::shared_ptr<TensorNode>> inputs,
                std::shared_ptr<TensorNode> output, BackwardFn fn, const char* name);

    // Seeds d(loss)/d(loss) = 1 and replays records newest-to-oldest, visiting
    // each exactly once. Leaf gradients accumulate across calls; intermediate
    // (recorded-output) gradients are reset here.
    void backward(const Tensor& loss);

    std::size_t size() const { return records_.size(); }
    bool touches(const TensorNode* n) const;
    void clear() { records_.clear(); }

private:
    struct Record {
        std::vector<std::shared_ptr<TensorNode>> inputs;
        std::shared_ptr<TensorNode> output;
        BackwardFn fn;
        const char* name;
    };
    std::vector<Record> records_;
};

namespace detail {
void check_finite(const Tensor& t, const char* op);
bool any_requires_grad(std::initializer_list<const Tensor*> ts);
// Accumulate src into node's grad buffer if it participates in backward.
void accum_grad(const std::shared_ptr<TensorNode>& n, const double* src, std::size_t count);
std::span<double> grad_of(const std::shared_ptr<TensorNode>& n);
}  // namespace detail

// ---- differentiable ops -------------------------------------------------

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double c);
Tensor sum(Tape& tape, const Tensor& a);  // -> [1]

// out[i,j] = sum_m x[i,m] * w[m,j]
Tensor matmul(Tape& tape, const Tensor& x, const Tensor& w);
// out = x * w + bias row
Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias);
// out[i,c] = sum_d x[i,d] * e[c,d]   (e used transposed)
Tensor matmul_bt(Tape& tape, const Tensor& x, const Tensor& e);

Tensor gelu(Tape& tape, const Tensor& x);  // exact erf form
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& offset,
                  double eps = 1e-6);
Tensor softmax_last(Tape& tape, const Tensor& x);
Tensor row_l2_normalize(Tape& tape, const Tensor& x);

Tensor gather_rows(Tape& tape, const Tensor& x, std::vector<int> idx);
Tensor scatter_add_rows(Tape& tape, const Tensor& base, const Tensor& y, std::vector<int> idx);
Tensor rows_scale(Tape& tape, const Tensor& x, const Tensor& s);  // s: [n] or [n,1]
Tensor column(Tape& tape, const Tensor& x, int j);                // -> [n,1]
Tensor broadcast_row_add(Tape& tape, const Tensor& x, const Tensor& v);  // v: [d] or [1,d]

// Mean over rows of -log softmax(logits)[label].
Tensor cross_entropy_labels(Tape& tape, const Tensor& logits, const std::vector<int>& labels);
// Mean over rows of cross-entropy against a fixed target distribution.
Tensor cross_entropy_soft(Tape& tape, const Tensor& logits, const Tensor& target_probs);
// Over given probabilities: -(1/n) sum log(max(q[label], 1e-12)).
Tensor cross_entropy_probs(Tape& tape, const Tensor& probs, const std::vector<int>& labels);

// ---- gradient-check oracle ----------------------------------------------

// Central difference (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate of x.
// f must not mutate anything it reads besides x's values.
std::vector<double> finite_difference_gradient(const std::function<double()>& f, Tensor& x,
                                               double h);

}  // namespace doremi
