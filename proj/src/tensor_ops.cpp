#include <algorithm>
#include <cmath>

#include "doremi/kernels.hpp"
#include "doremi/tensor.hpp"

namespace doremi {

using detail::accum_grad;
using detail::any_requires_grad;
using detail::check_finite;
using detail::grad_of;

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ConfigError(std::string(op) + ": operand shapes differ");
}

void require_matrix(const Tensor& t, const char* op) {
    if (t.shape().size() != 2)
        throw ConfigError(std::string(op) + ": expected a 2-d tensor");
}

Tensor make_output(std::vector<int> shape, bool requires_grad) {
    Tensor t = Tensor::zeros(std::move(shape), false);
    t.node->requires_grad = requires_grad;
    return t;
}

std::vector<double> transposed(const std::vector<double>& m, int rows, int cols) {
    std::vector<double> t(m.size());
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            t[static_cast<std::size_t>(j) * rows + i] = m[static_cast<std::size_t>(i) * cols + j];
    return t;
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    const bool rg = any_requires_grad({&a, &b});
    Tensor out = make_output(a.shape(), rg);
    kernels::ops().add(out.node->value.data(), a.node->value.data(), b.node->value.data(),
                       a.node->value.size());
    check_finite(out, "add");
    if (rg) {
        auto an = a.node, bn = b.node, on = out.node;
        tape.record({an, bn}, on,
                    [an, bn, on] {
                        accum_grad(an, on->grad.data(), on->grad.size());
                        accum_grad(bn, on->grad.data(), on->grad.size());
                    },
                    "add");
    }
    return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    const bool rg = any_requires_grad({&a, &b});
    Tensor out = make_output(a.shape(), rg);
    kernels::ops().sub(out.node->value.data(), a.node->value.data(), b.node->value.data(),
                       a.node->value.size());
    check_finite(out, "sub");
    if (rg) {
        auto an = a.node, bn = b.node, on = out.node;
        tape.record({an, bn}, on,
                    [an, bn, on] {
                        accum_grad(an, on->grad.data(), on->grad.size());
                        if (bn->requires_grad)
                            kernels::ops().axpy(grad_of(bn).data(), -1.0, on->grad.data(),
                                                on->grad.size());
                    },
                    "sub");
    }
    return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    const bool rg = any_requires_grad({&a, &b});
    Tensor out = make_output(a.shape(), rg);
    kernels::ops().mul(out.node->value.data(), a.node->value.data(), b.node->value.data(),
                       a.node->value.size());
    check_finite(out, "mul");
    if (rg) {
        auto an = a.node, bn = b.node, on = out.node;
        tape.record({an, bn}, on,
                    [an, bn, on] {
                        if (an->requires_grad)
                            kernels::ops().mul_acc(grad_of(an).data(), on->grad.data(),
                                                   bn->value.data(), on->grad.size());
                        if (bn->requires_grad)
                            kernels::ops().mul_acc(grad_of(bn).data(), on->grad.data(),
                                                   an->value.data(), on->grad.size());
                    },
                    "mul");
    }
    return out;
}

Tensor scale(Tape& tape, const Tensor& a, double c) {
    const bool rg = a.requires_grad();
    Tensor out = make_output(a.shape(), rg);
    out.node->value = a.node->value;
    kernels::ops().scale(out.node->value.data(), c, out.node->value.size());
    check_finite(out, "scale");
    if (rg) {
        auto an = a.node, on = out.node;
        tape.record({an}, on,
                    [an, on, c] {
                        kernels::ops().axpy(grad_of(an).data(), c, on->grad.data(),
                                            on->grad.size());
                    },
                    "scale");
    }
    return out;
}

Tensor sum(Tape& tape, const Tensor& a) {
    const bool rg = a.requires_grad();
    Tensor out = make_output({1}, rg);
    double s = 0.0;
    for (double v : a.node->value) s += v;
    out.node->value[0] = s;
    check_finite(out, "sum");
    if (rg) {
        auto an = a.node, on = out.node;
        tape.record({an}, on,
                    [an, on] {
                        const double g = on->grad[0];
                        auto ga = grad_of(an);
                        for (auto& v : ga) v += g;
                    },
                    "sum");
    }
    return out;
}

Tensor matmul(Tape& tape, const Tensor& x, const Tensor& w) {
    require_matrix(x, "matmul");
    require_matrix(w, "matmul");
    const int n = x.dim(0), m = x.dim(1), k = w.dim(1);
    if (w.dim(0) != m) throw ConfigError("matmul: inner dimensions do not conform");
    const bool rg = any_requires_grad({&x, &w});
    Tensor out = make_output({n, k}, rg);
    kernels::ops().gemm_acc(out.node->value.data(), x.node->value.data(), w.node->value.data(), n,
                            m, k);
    check_finite(out, "matmul");
    if (rg) {
        auto xn = x.node, wn = w.node, on = out.node;
        tape.record({xn, wn}, on,
                    [xn, wn, on, n, m, k] {
                        if (xn->requires_grad) {
                            auto wt = transposed(wn->value, m, k);  // [k x m]
                            kernels::ops().gemm_acc(grad_of(xn).data(), on->grad.data(), wt.data(),
                                                    n, k, m);
                        }
                        if (wn->requires_grad) {
                            auto xt = transposed(xn->value, n, m);  // [m x n]
                            kernels::ops().gemm_acc(grad_of(wn).data(), xt.data(), on->grad.data(),
                                                    m, n, k);
                        }
                    },
                    "matmul");
    }
    return out;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
    require_matrix(x, "linear");
    require_matrix(weight, "linear");
    const int n = x.dim(0), m = x.dim(1), k = weight.dim(1);
    if (weight.dim(0) != m) throw ConfigError("linear: weight rows must match input width");
    if (bias.numel() != k) throw ConfigError("linear: bias length must match output width");
    const bool rg = any_requires_grad({&x, &weight, &bias});
    Tensor out = make_output({n, k}, rg);
    kernels::ops().gemm_acc(out.node->value.data(), x.node->value.data(),
                            weight.node->value.data(), n, m, k);
    kernels::ops().add_row_broadcast(out.node->value.data(), bias.node->value.data(), n, k);
    check_finite(out, "linear");
    if (rg) {
        auto xn = x.node, wn = weight.node, bn = bias.node, on = out.node;
        tape.record({xn, wn, bn}, on,
                    [xn, wn, bn, on, n, m, k] {
                        const double* go = on->grad.data();
                        if (xn->requires_grad) {
                            auto wt = transposed(wn->value, m, k);
                            kernels::ops().gemm_acc(grad_of(xn).data(), go, wt.data(), n, k, m);
                        }
                        if (wn->requires_grad) {
                            auto xt = transposed(xn->value, n, m);
                            kernels::ops().gemm_acc(grad_of(wn).data(), xt.data(), go, m, n, k);
                        }
                        if (bn->requires_grad) {
                            auto gb = grad_of(bn);
                            for (int i = 0; i < n; ++i)
                                for (int j = 0; j < k; ++j)
                                    gb[static_cast<std::size_t>(j)] +=
                                        go[static_cast<std::size_t>(i) * k + j];
                        }
                    },
                    "linear");
    }
    return out;
}

Tensor matmul_bt(Tape& tape, const Tensor& x, const Tensor& e) {
    require_matrix(x, "matmul_bt");
    require_matrix(e, "matmul_bt");
    const int n = x.dim(0), d = x.dim(1), c = e.dim(0);
    if (e.dim(1) != d) throw ConfigError("matmul_bt: operand widths differ");
    const bool rg = any_requires_grad({&x, &e});
    Tensor out = make_output({n, c}, rg);
    auto et = transposed(e.node->value, c, d);  // [d x c]
    kernels::ops().gemm_acc(out.node->value.data(), x.node->value.data(), et.data(), n, d, c);
    check_finite(out, "matmul_bt");
    if (rg) {
        auto xn = x.node, en = e.node, on = out.node;
        tape.record({xn, en}, on,
                    [xn, en, on, n, d, c] {
                        const double* go = on->grad.data();
                        if (xn->requires_grad)
                            kernels::ops().gemm_acc(grad_of(xn).data(), go, en->value.data(), n, c,
                                                    d);
                        if (en->requires_grad) {
                            auto got = transposed(on->grad, n, c);  // [c x n]
                            kernels::ops().gemm_acc(grad_of(en).data(), got.data(),
                                                    xn->value.data(), c, n, d);
                        }
                    },
                    "matmul_bt");
    }
    return out;
}

Tensor gelu(Tape& tape, const Tensor& x) {
    const bool rg = x.requires_grad();
    Tensor out = make_output(x.shape(), rg);
    const auto& xv = x.node->value;
    auto& yv = out.node->value;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double cdf = 0.5 * (1.0 + std::erf(xv[i] * kInvSqrt2));
        yv[i] = xv[i] * cdf;
    }
    check_finite(out, "gelu");
    if (rg) {
        auto xn = x.node, on = out.node;
        tape.record({xn}, on,
                    [xn, on] {
                        auto gx = grad_of(xn);
                        const double* go = on->grad.data();
                        for (std::size_t i = 0; i < gx.size(); ++i) {
                            const double v = xn->value[i];
                            const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                            gx[i] += go[i] * (cdf + v * pdf);
                        }
                    },
                    "gelu");
    }
    return out;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& offset,
                  double eps) {
    const int d = x.cols();
    const int n = x.rows();
    if (gain.numel() != d || offset.numel() != d)
        throw ConfigError("layer_norm: gain/offset length must match feature width");
    const bool rg = any_requires_grad({&x, &gain, &offset});
    Tensor out = make_output(x.shape(), rg);

    auto xhat = std::make_shared<std::vector<double>>(x.node->value.size());
    auto inv = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
    const double* xv = x.node->value.data();
    const double* gv = gain.node->value.data();
    const double* bv = offset.node->value.data();
    double* yv = out.node->value.data();
    for (int i = 0; i < n; ++i) {
        const double* row = xv + static_cast<std::size_t>(i) * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += row[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = row[j] - mu;
            var += c * c;
        }
        var /= d;
        const double iv = 1.0 / std::sqrt(var + eps);
        (*inv)[static_cast<std::size_t>(i)] = iv;
        for (int j = 0; j < d; ++j) {
            const double h = (row[j] - mu) * iv;
            (*xhat)[static_cast<std::size_t>(i) * d + j] = h;
            yv[static_cast<std::size_t>(i) * d + j] = gv[j] * h + bv[j];
        }
    }
    check_finite(out, "layer_norm");
    if (rg) {
        auto xn = x.node, gn = gain.node, bn = offset.node, on = out.node;
        tape.record({xn, gn, bn}, on,
                    [xn, gn, bn, on, xhat, inv, n, d] {
                        const double* go = on->grad.data();
                        for (int i = 0; i < n; ++i) {
                            const double* grow = go + static_cast<std::size_t>(i) * d;
                            const double* hrow = xhat->data() + static_cast<std::size_t>(i) * d;
                            if (gn->requires_grad) {
                                auto gg = grad_of(gn);
                                for (int j = 0; j < d; ++j) gg[j] += grow[j] * hrow[j];
                            }
                            if (bn->requires_grad) {
                                auto gb = grad_of(bn);
                                for (int j = 0; j < d; ++j) gb[j] += grow[j];
                            }
                            if (xn->requires_grad) {
                                double m1 = 0.0, m2 = 0.0;
                                for (int j = 0; j < d; ++j) {
                                    const double h = grow[j] * gn->value[static_cast<std::size_t>(j)];
                                    m1 += h;
                                    m2 += h * hrow[j];
                                }
                                m1 /= d;
                                m2 /= d;
                                auto gx = grad_of(xn);
                                const double iv = (*inv)[static_cast<std::size_t>(i)];
                                for (int j = 0; j < d; ++j) {
                                    const double h =
                                        grow[j] * gn->value[static_cast<std::size_t>(j)];
                                    gx[static_cast<std::size_t>(i) * d + j] +=
                                        (h - m1 - hrow[j] * m2) * iv;
                                }
                            }
                        }
                    },
                    "layer_norm");
    }
    return out;
}

Tensor softmax_last(Tape& tape, const Tensor& x) {
    const int k = x.cols();
    const int n = x.rows();
    if (k < 1) throw ConfigError("softmax_last: empty last dimension");
    const bool rg = x.requires_grad();
    Tensor out = make_output(x.shape(), rg);
    const double* xv = x.node->value.data();
    double* pv = out.node->value.data();
    for (int i = 0; i < n; ++i) {
        const double* row = xv + static_cast<std::size_t>(i) * k;
        double* prow = pv + static_cast<std::size_t>(i) * k;
        double m = row[0];
        for (int j = 1; j < k; ++j) m = std::max(m, row[j]);
        double s = 0.0;
        for (int j = 0; j < k; ++j) {
            prow[j] = std::exp(row[j] - m);
            s += prow[j];
        }
        for (int j = 0; j < k; ++j) prow[j] /= s;
    }
    check_finite(out, "softmax_last");
    if (rg) {
        auto xn = x.node, on = out.node;
        tape.record({xn}, on,
                    [xn, on, n, k] {
                        auto gx = grad_of(xn);
                        const double* go = on->grad.data();
                        const double* p = on->value.data();
                        for (int i = 0; i < n; ++i) {
                            const std::size_t base = static_cast<std::size_t>(i) * k;
                            double dot = 0.0;
                            for (int j = 0; j < k; ++j) dot += go[base + j] * p[base + j];
                            for (int j = 0; j < k; ++j)
                                gx[base + j] += p[base + j] * (go[base + j] - dot);
                        }
                    },
                    "softmax_last");
    }
    return out;
}

Tensor row_l2_normalize(Tape& tape, const Tensor& x) {
    const int d = x.cols();
    const int n = x.rows();
    const bool rg = x.requires_grad();
    Tensor out = make_output(x.shape(), rg);
    auto rnorm = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
    const double* xv = x.node->value.data();
    double* yv = out.node->value.data();
    for (int i = 0; i < n; ++i) {
        const double* row = xv + static_cast<std::size_t>(i) * d;
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += row[j] * row[j];
        const double r = std::max(std::sqrt(s), 1e-12);
        (*rnorm)[static_cast<std::size_t>(i)] = r;
        for (int j = 0; j < d; ++j) yv[static_cast<std::size_t>(i) * d + j] = row[j] / r;
    }
    check_finite(out, "row_l2_normalize");
    if (rg) {
        auto xn = x.node, on = out.node;
        tape.record({xn}, on,
                    [xn, on, rnorm, n, d] {
                        auto gx = grad_of(xn);
                        const double* go = on->grad.data();
                        const double* y = on->value.data();
                        for (int i = 0; i < n; ++i) {
                            const std::size_t base = static_cast<std::size_t>(i) * d;
                            double dot = 0.0;
                            for (int j = 0; j < d; ++j) dot += go[base + j] * y[base + j];
                            const double r = (*rnorm)[static_cast<std::size_t>(i)];
                            for (int j = 0; j < d; ++j)
                                gx[base + j] += (go[base + j] - y[base + j] * dot) / r;
                        }
                    },
                    "row_l2_normalize");
    }
    return out;
}

Tensor gather_rows(Tape& tape, const Tensor& x, std::vector<int> idx) {
    const int d = x.cols();
    const int n = x.rows();
    for (int i : idx)
        if (i < 0 || i >= n) throw ConfigError("gather_rows: index out of range");
    const bool rg = x.requires_grad();
    Tensor out = make_output({static_cast<int>(idx.size()), d}, rg);
    const double* xv = x.node->value.data();
    double* yv = out.node->value.data();
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(xv + static_cast<std::size_t>(idx[r]) * d, d, yv + r * d);
    if (rg) {
        auto xn = x.node, on = out.node;
        auto ix = std::make_shared<std::vector<int>>(std::move(idx));
        tape.record({xn}, on,
                    [xn, on, ix, d] {
                        auto gx = grad_of(xn);
                        const double* go = on->grad.data();
                        for (std::size_t r = 0; r < ix->size(); ++r) {
                            double* dst = gx.data() + static_cast<std::size_t>((*ix)[r]) * d;
                            const double* src = go + r * static_cast<std::size_t>(d);
                            for (int j = 0; j < d; ++j) dst[j] += src[j];
                        }
                    },
                    "gather_rows");
    }
    return out;
}

Tensor scatter_add_rows(Tape& tape, const Tensor& base, const Tensor& y, std::vector<int> idx) {
    const int d = base.cols();
    const int n = base.rows();
    if (y.cols() != d) throw ConfigError("scatter_add_rows: widths differ");
    if (static_cast<std::size_t>(y.rows()) != idx.size())
        throw ConfigError("scatter_add_rows: index count must match row count");
    for (int i : idx)
        if (i < 0 || i >= n) throw ConfigError("scatter_add_rows: index out of range");
    const bool rg = any_requires_grad({&base, &y});
    Tensor out = make_output(base.shape(), rg);
    out.node->value = base.node->value;
    const double* yv = y.node->value.data();
    double* ov = out.node->value.data();
    for (std::size_t r = 0; r < idx.size(); ++r) {
        double* dst = ov + static_cast<std::size_t>(idx[r]) * d;
        const double* src = yv + r * static_cast<std::size_t>(d);
        for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
    check_finite(out, "scatter_add_rows");
    if (rg) {
        auto bn = base.node, yn = y.node, on = out.node;
        auto ix = std::make_shared<std::vector<int>>(std::move(idx));
        tape.record({bn, yn}, on,
                    [bn, yn, on, ix, d] {
                        accum_grad(bn, on->grad.data(), on->grad.size());
                        if (yn->requires_grad) {
                            auto gy = grad_of(yn);
                            const double* go = on->grad.data();
                            for (std::size_t r = 0; r < ix->size(); ++r) {
                                const double* src = go + static_cast<std::size_t>((*ix)[r]) * d;
                                double* dst = gy.data() + r * static_cast<std::size_t>(d);
                                for (int j = 0; j < d; ++j) dst[j] += src[j];
                            }
                        }
                    },
                    "scatter_add_rows");
    }
    return out;
}

Tensor rows_scale(Tape& tape, const Tensor& x, const Tensor& s) {
    const int d = x.cols();
    const int n = x.rows();
    if (s.numel() != n) throw ConfigError("rows_scale: scale length must match row count");
    const bool rg = any_requires_grad({&x, &s});
    Tensor out = make_output(x.shape(), rg);
    const double* xv = x.node->value.data();
    const double* sv = s.node->value.data();
    double* yv = out.node->value.data();
    for (int i = 0; i < n; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) yv[base + j] = sv[i] * xv[base + j];
    }
    check_finite(out, "rows_scale");
    if (rg) {
        auto xn = x.node, sn = s.node, on = out.node;
        tape.record({xn, sn}, on,
                    [xn, sn, on, n, d] {
                        const double* go = on->grad.data();
                        if (xn->requires_grad) {
                            auto gx = grad_of(xn);
                            for (int i = 0; i < n; ++i) {
                                const std::size_t base = static_cast<std::size_t>(i) * d;
                                const double sv = sn->value[static_cast<std::size_t>(i)];
                                for (int j = 0; j < d; ++j) gx[base + j] += sv * go[base + j];
                            }
                        }
                        if (sn->requires_grad) {
                            auto gs = grad_of(sn);
                            for (int i = 0; i < n; ++i) {
                                const std::size_t base = static_cast<std::size_t>(i) * d;
                                double acc = 0.0;
                                for (int j = 0; j < d; ++j)
                                    acc += go[base + j] * xn->value[base + j];
                                gs[static_cast<std::size_t>(i)] += acc;
                            }
                        }
                    },
                    "rows_scale");
    }
    return out;
}

Tensor column(Tape& tape, const Tensor& x, int j) {
    require_matrix(x, "column");
    const int n = x.dim(0), k = x.dim(1);
    if (j < 0 || j >= k) throw ConfigError("column: index out of range");
    const bool rg = x.requires_grad();
    Tensor out = make_output({n, 1}, rg);
    for (int i = 0; i < n; ++i)
        out.node->value[static_cast<std::size_t>(i)] =
            x.node->value[static_cast<std::size_t>(i) * k + j];
    if (rg) {
        auto xn = x.node, on = out.node;
        tape.record({xn}, on,
                    [xn, on, j, n, k] {
                        auto gx = grad_of(xn);
                        for (int i = 0; i < n; ++i)
                            gx[static_cast<std::size_t>(i) * k + j] +=
                                on->grad[static_cast<std::size_t>(i)];
                    },
                    "column");
    }
    return out;
}

Tensor broadcast_row_add(Tape& tape, const Tensor& x, const Tensor& v) {
    const int d = x.cols();
    const int n = x.rows();
    if (v.numel() != d) throw ConfigError("broadcast_row_add: row length must match width");
    const bool rg = any_requires_grad({&x, &v});
    Tensor out = make_output(x.shape(), rg);
    out.node->value = x.node->value;
    kernels::ops().add_row_broadcast(out.node->value.data(), v.node->value.data(), n, d);
    check_finite(out, "broadcast_row_add");
    if (rg) {
        auto xn = x.node, vn = v.node, on = out.node;
        tape.record({xn, vn}, on,
                    [xn, vn, on, n, d] {
                        accum_grad(xn, on->grad.data(), on->grad.size());
                        if (vn->requires_grad) {
                            auto gv = grad_of(vn);
                            const double* go = on->grad.data();
                            for (int i = 0; i < n; ++i)
                                for (int j = 0; j < d; ++j)
                                    gv[static_cast<std::size_t>(j)] +=
                                        go[static_cast<std::size_t>(i) * d + j];
                        }
                    },
                    "broadcast_row_add");
    }
    return out;
}

namespace {

// Shared softmax-cross-entropy core; target filled per flavor.
Tensor ce_core(Tape& tape, const Tensor& logits, std::vector<double> target,
               const char* name) {
    const int c = logits.cols();
    const int n = logits.rows();
    const bool rg = logits.requires_grad();
    Tensor out = make_output({1}, rg);
    auto probs = std::make_shared<std::vector<double>>(logits.node->value.size());
    const double* lv = logits.node->value.data();
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* row = lv + static_cast<std::size_t>(i) * c;
        double m = row[0];
        for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += std::exp(row[j] - m);
        const double lse = m + std::log(s);
        double dot = 0.0;
        for (int j = 0; j < c; ++j) {
            (*probs)[static_cast<std::size_t>(i) * c + j] = std::exp(row[j] - m) / s;
            dot += target[static_cast<std::size_t>(i) * c + j] * row[j];
        }
        loss += lse - dot;
    }
    out.node->value[0] = loss / n;
    check_finite(out, name);
    if (rg) {
        auto ln = logits.node, on = out.node;
        auto tgt = std::make_shared<std::vector<double>>(std::move(target));
        tape.record({ln}, on,
                    [ln, on, probs, tgt, n, c, name] {
                        (void)name;
                        auto gl = grad_of(ln);
                        const double g = on->grad[0] / n;
                        for (std::size_t i = 0; i < gl.size(); ++i)
                            gl[i] += g * ((*probs)[i] - (*tgt)[i]);
                    },
                    name);
    }
    return out;
}

}  // namespace

Tensor cross_entropy_labels(Tape& tape, const Tensor& logits, const std::vector<int>& labels) {
    const int c = logits.cols();
    const int n = logits.rows();
    if (static_cast<int>(labels.size()) != n)
        throw ConfigError("cross_entropy_labels: label count must match row count");
    std::vector<double> target(logits.node->value.size(), 0.0);
    for (int i = 0; i < n; ++i) {
        if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= c)
            throw ConfigError("cross_entropy_labels: label out of range");
        target[static_cast<std::size_t>(i) * c + labels[static_cast<std::size_t>(i)]] = 1.0;
    }
    return ce_core(tape, logits, std::move(target), "cross_entropy_labels");
}

Tensor cross_entropy_soft(Tape& tape, const Tensor& logits, const Tensor& target_probs) {
    require_same_shape(logits, target_probs, "cross_entropy_soft");
    std::vector<double> target(target_probs.node->value.begin(), target_probs.node->value.end());
    return ce_core(tape, logits, std::move(target), "cross_entropy_soft");
}

Tensor cross_entropy_probs(Tape& tape, const Tensor& probs, const std::vector<int>& labels) {
    const int c = probs.cols();
    const int n = probs.rows();
    if (static_cast<int>(labels.size()) != n)
        throw ConfigError("cross_entropy_probs: label count must match row count");
    constexpr double kClamp = 1e-12;
    const bool rg = probs.requires_grad();
    Tensor out = make_output({1}, rg);
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= c) throw ConfigError("cross_entropy_probs: label out of range");
        loss -= std::log(std::max(probs.node->value[static_cast<std::size_t>(i) * c + y], kClamp));
    }
    out.node->value[0] = loss / n;
    check_finite(out, "cross_entropy_probs");
    if (rg) {
        auto pn = probs.node, on = out.node;
        auto lab = std::make_shared<std::vector<int>>(labels);
        tape.record({pn}, on,
                    [pn, on, lab, n, c] {
                        auto gp = grad_of(pn);
                        const double g = on->grad[0] / n;
                        for (int i = 0; i < n; ++i) {
                            const int y = (*lab)[static_cast<std::size_t>(i)];
                            const double q = pn->value[static_cast<std::size_t>(i) * c + y];
                            if (q > 1e-12) gp[static_cast<std::size_t>(i) * c + y] -= g / q;
                        }
                    },
                    "cross_entropy_probs");
    }
    return out;
}

}  // namespace doremi
