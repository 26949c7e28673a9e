#include "doremi/nn.hpp"

#include <cmath>

namespace doremi {

LinearParams make_linear(int in, int out, Rng& rng, bool trainable) {
    // Scaled-normal init, std 1/sqrt(in).
    LinearParams p;
    p.weight = Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)), trainable);
    p.bias = Tensor::zeros({out}, trainable);
    return p;
}

MlpParams make_mlp(const std::vector<int>& dims, Rng& rng, bool trainable) {
    if (dims.size() < 2) throw ConfigError("mlp needs at least input and output dims");
    MlpParams p;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i)
        p.layers.push_back(make_linear(dims[i], dims[i + 1], rng, trainable));
    return p;
}

Tensor mlp(Tape& tape, const Tensor& x, const MlpParams& p) {
    Tensor h = x;
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        h = linear(tape, h, p.layers[i].weight, p.layers[i].bias);
        if (i + 1 < p.layers.size()) h = gelu(tape, h);
    }
    return h;
}

FfnParams make_ffn(int d, int mult, Rng& rng, bool trainable) {
    FfnParams p;
    p.up = make_linear(d, d * mult, rng, trainable);
    p.down = make_linear(d * mult, d, rng, trainable);
    return p;
}

Tensor ffn(Tape& tape, const Tensor& x, const FfnParams& p) {
    return linear(tape, gelu(tape, linear(tape, x, p.up.weight, p.up.bias)), p.down.weight,
                  p.down.bias);
}

FfnParams clone_ffn(const FfnParams& p, bool trainable) {
    FfnParams c;
    c.up.weight = Tensor::from_data(p.up.weight.shape(),
                                    {p.up.weight.values().begin(), p.up.weight.values().end()},
                                    trainable);
    c.up.bias = Tensor::from_data(p.up.bias.shape(),
                                  {p.up.bias.values().begin(), p.up.bias.values().end()},
                                  trainable);
    c.down.weight = Tensor::from_data(
        p.down.weight.shape(), {p.down.weight.values().begin(), p.down.weight.values().end()},
        trainable);
    c.down.bias = Tensor::from_data(p.down.bias.shape(),
                                    {p.down.bias.values().begin(), p.down.bias.values().end()},
                                    trainable);
    return c;
}

void ParamRegistry::add(const std::string& name, const Tensor& t) {
    if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
    entries_.emplace_back(name, t);
}

void ParamRegistry::add_linear(const std::string& prefix, const LinearParams& p) {
    add(prefix + ".weight", p.weight);
    add(prefix + ".bias", p.bias);
}

void ParamRegistry::add_mlp(const std::string& prefix, const MlpParams& p) {
    for (std::size_t i = 0; i < p.layers.size(); ++i)
        add_linear(prefix + ".l" + std::to_string(i), p.layers[i]);
}

void ParamRegistry::add_ffn(const std::string& prefix, const FfnParams& p) {
    add_linear(prefix + ".up", p.up);
    add_linear(prefix + ".down", p.down);
}

void ParamRegistry::merge(const std::string& prefix, const ParamRegistry& other) {
    for (const auto& [name, t] : other.entries_) add(prefix + name, t);
}

Tensor ParamRegistry::find(const std::string& name) const {
    for (const auto& [n, t] : entries_)
        if (n == name) return t;
    throw ConfigError("unknown parameter name: " + name);
}

bool ParamRegistry::contains(const std::string& name) const {
    for (const auto& [n, t] : entries_)
        if (n == name) return true;
    return false;
}

std::int64_t ParamRegistry::total_params() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
}

std::int64_t ParamRegistry::trainable_params() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : entries_)
        if (t.requires_grad()) n += t.numel();
    return n;
}

AdamW::AdamW(const ParamRegistry& params, Options opt) : opt_(opt) {
    for (const auto& [name, t] : params.entries()) {
        if (!t.requires_grad()) continue;
        Slot s;
        s.param = t;
        s.m.assign(static_cast<std::size_t>(t.numel()), 0.0);
        s.v.assign(static_cast<std::size_t>(t.numel()), 0.0);
        slots_.push_back(std::move(s));
    }
}

void AdamW::zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
}

void AdamW::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (auto& s : slots_) {
        auto p = s.param.values();
        auto g = s.param.grad();
        for (std::size_t i = 0; i < p.size(); ++i) {
            s.m[i] = opt_.beta1 * s.m[i] + (1.0 - opt_.beta1) * g[i];
            s.v[i] = opt_.beta2 * s.v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
            const double mhat = s.m[i] / bc1;
            const double vhat = s.v[i] / bc2;
            p[i] -= opt_.lr * (mhat / (std::sqrt(vhat) + opt_.eps) + opt_.weight_decay * p[i]);
        }
    }
}

}  // namespace doremi
