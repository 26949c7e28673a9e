#pragma once

#include <string>
#include <utility>
#include <vector>

#include "doremi/tensor.hpp"

namespace doremi {

struct LinearParams {
    Tensor weight;  // [in x out]
    Tensor bias;    // [out]
};

LinearParams make_linear(int in, int out, Rng& rng, bool trainable = true);

// in -> hidden... -> out with gelu between layers, linear output.
struct MlpParams {
    std::vector<LinearParams> layers;
    int in_dim() const { return layers.front().weight.dim(0); }
    int out_dim() const { return layers.back().weight.dim(1); }
};

MlpParams make_mlp(const std::vector<int>& dims, Rng& rng, bool trainable = true);
Tensor mlp(Tape& tape, const Tensor& x, const MlpParams& p);

// Transformer-style FFN: d -> mult*d -> d with gelu.
struct FfnParams {
    LinearParams up;
    LinearParams down;
    int width() const { return up.weight.dim(0); }
};

FfnParams make_ffn(int d, int mult, Rng& rng, bool trainable = true);
Tensor ffn(Tape& tape, const Tensor& x, const FfnParams& p);
FfnParams clone_ffn(const FfnParams& p, bool trainable);

// Deterministically ordered name -> tensor map. Iteration order is the
// registration order; training, checkpoints, and hashing all rely on it.
class ParamRegistry {
public:
    void add(const std::string& name, const Tensor& t);
    void add_linear(const std::string& prefix, const LinearParams& p);
    void add_mlp(const std::string& prefix, const MlpParams& p);
    void add_ffn(const std::string& prefix, const FfnParams& p);
    void merge(const std::string& prefix, const ParamRegistry& other);

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
    Tensor find(const std::string& name) const;  // throws if absent
    bool contains(const std::string& name) const;
    std::int64_t total_params() const;
    std::int64_t trainable_params() const;

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
};

// Decoupled weight decay Adam. Moment slots are keyed by registry order.
class AdamW {
public:
    struct Options {
        double lr = 4e-4;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.01;
    };

    explicit AdamW(const ParamRegistry& params) : AdamW(params, Options()) {}
    AdamW(const ParamRegistry& params, Options opt);

    void zero_grad();
    void step();
    std::int64_t step_count() const { return t_; }

private:
    struct Slot {
        Tensor param;
        std::vector<double> m;
        std::vector<double> v;
    };
    std::vector<Slot> slots_;
    Options opt_;
    std::int64_t t_ = 0;
};

}  // namespace doremi
