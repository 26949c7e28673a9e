#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "doremi/nn.hpp"
#include "doremi/tensor.hpp"
#include "oracles.hpp"

using namespace doremi;
using doremi::testing::close_rel;

TEST_CASE("linear: identity and hand-summed cases") {
    Tape tape;
    Tensor x = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor w = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor b = Tensor::zeros({2});
    Tensor y = linear(tape, x, w, b);
    CHECK(y.at(0) == 1.0);
    CHECK(y.at(1) == 0.0);
    CHECK(y.at(3) == 1.0);

    Tensor x2 = Tensor::from_data({1, 2}, {1, 2});
    Tensor w2 = Tensor::from_data({2, 1}, {1, 1});
    Tensor b2 = Tensor::from_data({1}, {3});
    CHECK(linear(tape, x2, w2, b2).at(0) == 6.0);
}

TEST_CASE("linear: random case against the triple-loop oracle") {
    Rng rng(5);
    Tensor x = Tensor::randn({3, 4}, rng, 1.0);
    Tensor w = Tensor::randn({4, 2}, rng, 1.0);
    Tensor b = Tensor::zeros({2});
    Tape tape;
    Tensor y = matmul(tape, x, w);
    auto want = testing::naive_matmul({x.values().begin(), x.values().end()},
                                      {w.values().begin(), w.values().end()}, 3, 4, 2);
    for (std::int64_t i = 0; i < y.numel(); ++i)
        CHECK(close_rel(y.at(i), want[static_cast<std::size_t>(i)], 1e-12));
}

TEST_CASE("linear: shape mismatch is a configuration error") {
    Tape tape;
    Tensor x = Tensor::zeros({2, 3});
    Tensor w = Tensor::zeros({4, 2});
    Tensor b = Tensor::zeros({2});
    CHECK_THROWS_AS(linear(tape, x, w, b), ConfigError);
}

TEST_CASE("softmax_last: symmetry, stability, oracle") {
    Tape tape;
    Tensor z = Tensor::from_data({1, 4}, {0, 0, 0, 0});
    Tensor p = softmax_last(tape, z);
    for (int j = 0; j < 4; ++j) CHECK(p.at(j) == doctest::Approx(0.25).epsilon(1e-15));

    Tensor big = Tensor::from_data({1, 2}, {1000.0, 0.0});
    Tensor pb = softmax_last(tape, big);
    CHECK(pb.at(0) == doctest::Approx(1.0));
    CHECK(pb.at(1) == doctest::Approx(0.0).epsilon(1e-300));

    Rng rng(7);
    std::vector<double> row(6);
    for (auto& v : row) v = rng.uniform(-3.0, 3.0);
    Tensor xr = Tensor::from_data({1, 6}, row);
    Tensor pr = softmax_last(tape, xr);
    auto want = testing::naive_softmax_row(row);
    double s = 0.0;
    for (int j = 0; j < 6; ++j) {
        CHECK(std::fabs(pr.at(j) - want[static_cast<std::size_t>(j)]) < 1e-12);
        s += pr.at(j);
    }
    CHECK(std::fabs(s - 1.0) <= 1e-12);
}

TEST_CASE("softmax rows sum to one and are permutation-equivariant") {
    Rng rng(17);
    for (int trial = 0; trial < 30; ++trial) {
        const int k = rng.uniform_int(2, 9);
        std::vector<double> row(static_cast<std::size_t>(k));
        for (auto& v : row) v = rng.uniform(-4.0, 4.0);
        Tape tape;
        Tensor p = softmax_last(tape, Tensor::from_data({1, k}, row));
        double s = 0.0;
        for (int j = 0; j < k; ++j) s += p.at(j);
        CHECK(std::fabs(s - 1.0) <= 1e-12);

        std::vector<int> perm(static_cast<std::size_t>(k));
        for (int j = 0; j < k; ++j) perm[static_cast<std::size_t>(j)] = j;
        rng.shuffle(perm);
        std::vector<double> prow(static_cast<std::size_t>(k));
        for (int j = 0; j < k; ++j) prow[static_cast<std::size_t>(j)] = row[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)])];
        // Equivariant up to summation rounding: permuting the row permutes
        // the reduction order.
        Tensor pp = softmax_last(tape, Tensor::from_data({1, k}, prow));
        for (int j = 0; j < k; ++j)
            CHECK(std::fabs(pp.at(j) - p.at(perm[static_cast<std::size_t>(j)])) <= 1e-14);
    }
}

TEST_CASE("gelu and layer_norm basics") {
    Tape tape;
    Tensor zero = Tensor::from_data({1, 1}, {0.0});
    CHECK(gelu(tape, zero).at(0) == 0.0);

    Tensor flat = Tensor::from_data({1, 4}, {3.0, 3.0, 3.0, 3.0});
    Tensor gain = Tensor::full({4}, 1.0);
    Tensor offset = Tensor::zeros({4});
    Tensor ln = layer_norm(tape, flat, gain, offset);
    for (int j = 0; j < 4; ++j) CHECK(std::fabs(ln.at(j)) < 1e-9);
}

TEST_CASE("mlp forward equals an independently composed stack") {
    Rng rng(23);
    MlpParams p = make_mlp({3, 5, 2}, rng);
    Tensor x = Tensor::randn({4, 3}, rng, 1.0);
    Tape tape;
    Tensor y = mlp(tape, x, p);

    // Same math, hand-composed.
    Tape tape2;
    Tensor h = linear(tape2, x, p.layers[0].weight, p.layers[0].bias);
    h = gelu(tape2, h);
    h = linear(tape2, h, p.layers[1].weight, p.layers[1].bias);
    for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.at(i) == h.at(i));
}

TEST_CASE("backward: trivial analytic gradients") {
    Tape tape;
    Tensor x = Tensor::from_data({1, 3}, {1, 2, 3}, true);
    Tensor s = sum(tape, x);
    tape.backward(s);
    for (int i = 0; i < 3; ++i) CHECK(x.grad()[static_cast<std::size_t>(i)] == 1.0);

    Tape t2;
    Tensor x2 = Tensor::from_data({1, 3}, {1, 2, 3}, true);
    Tensor sq = mul(t2, x2, x2);
    Tensor loss = sum(t2, sq);
    t2.backward(loss);
    CHECK(x2.grad()[0] == 2.0);
    CHECK(x2.grad()[1] == 4.0);
    CHECK(x2.grad()[2] == 6.0);
}

TEST_CASE("backward rejects a non-scalar loss") {
    Tape tape;
    Tensor x = Tensor::from_data({1, 2}, {1, 2}, true);
    Tensor y = add(tape, x, x);
    CHECK_THROWS_AS(tape.backward(y), UsageError);
}

TEST_CASE("finite_difference_gradient basics") {
    Tensor x = Tensor::from_data({1}, {3.0});
    auto f = [&] { return x.at(0) * x.at(0); };
    auto g = finite_difference_gradient(f, x, 1e-6);
    CHECK(std::fabs(g[0] - 6.0) < 1e-8);

    Tensor v = Tensor::from_data({3}, {1.0, -2.0, 0.5});
    auto fs = [&] { return v.at(0) + v.at(1) + v.at(2); };
    for (double gi : finite_difference_gradient(fs, v, 1e-6))
        CHECK(std::fabs(gi - 1.0) < 1e-9);
}

namespace {

// Generic gradient check: loss = sum(op(x) * mask) for a random fixed mask,
// so every output coordinate is exercised.
void check_op_gradients(const std::function<Tensor(Tape&, const Tensor&)>& op,
                        std::vector<int> shape, std::uint64_t seed, double tol = 1e-4) {
    Rng rng(seed);
    Tensor x = Tensor::randn(shape, rng, 0.8, true);
    Tape probe_tape;
    Tensor probe = op(probe_tape, x);
    Tensor mask = Tensor::randn(probe.shape(), rng, 1.0, false);

    Tape tape;
    Tensor loss = sum(tape, mul(tape, op(tape, x), mask));
    tape.backward(loss);
    std::vector<double> analytic(x.grad().begin(), x.grad().end());

    auto recompute = [&] {
        Tape t;
        return sum(t, mul(t, op(t, x), mask)).scalar();
    };
    CHECK(testing::gradcheck_param(recompute, x, analytic, 1e-6, tol));
}

}  // namespace

TEST_CASE("backward matches central finite differences for every op") {
    check_op_gradients([](Tape& t, const Tensor& x) { return gelu(t, x); }, {3, 4}, 101);
    check_op_gradients([](Tape& t, const Tensor& x) { return softmax_last(t, x); }, {3, 5}, 102);
    check_op_gradients([](Tape& t, const Tensor& x) { return row_l2_normalize(t, x); }, {3, 4},
                       103);
    check_op_gradients([](Tape& t, const Tensor& x) { return scale(t, x, -1.7); }, {2, 6}, 104);

    Rng rng(105);
    Tensor gain = Tensor::randn({5}, rng, 0.5, false);
    Tensor offset = Tensor::randn({5}, rng, 0.5, false);
    check_op_gradients(
        [&](Tape& t, const Tensor& x) { return layer_norm(t, x, gain, offset); }, {4, 5}, 106);

    Tensor w = Tensor::randn({4, 3}, rng, 0.7, false);
    check_op_gradients([&](Tape& t, const Tensor& x) { return matmul(t, x, w); }, {2, 4}, 107);
    Tensor e = Tensor::randn({6, 4}, rng, 0.7, false);
    check_op_gradients([&](Tape& t, const Tensor& x) { return matmul_bt(t, x, e); }, {3, 4}, 108);

    check_op_gradients(
        [](Tape& t, const Tensor& x) { return gather_rows(t, x, {2, 0, 2, 1}); }, {3, 4}, 109);
    Tensor s = Tensor::randn({4}, rng, 0.8, false);
    check_op_gradients([&](Tape& t, const Tensor& x) { return rows_scale(t, x, s); }, {4, 3},
                       110);
    Tensor vrow = Tensor::randn({3}, rng, 0.8, false);
    check_op_gradients(
        [&](Tape& t, const Tensor& x) { return broadcast_row_add(t, x, vrow); }, {5, 3}, 111);
    check_op_gradients([](Tape& t, const Tensor& x) { return column(t, x, 1); }, {4, 3}, 112);

    Tensor base = Tensor::randn({5, 3}, rng, 0.8, false);
    check_op_gradients(
        [&](Tape& t, const Tensor& x) { return scatter_add_rows(t, base, x, {4, 0, 2}); },
        {3, 3}, 113);
}

TEST_CASE("gradcheck: 3-layer MLP against finite differences") {
    Rng rng(31);
    MlpParams p = make_mlp({4, 6, 5, 3}, rng);
    Tensor x = Tensor::randn({3, 4}, rng, 0.9, false);
    std::vector<int> labels{0, 2, 1};

    auto loss_fn = [&](Tape& t) {
        return cross_entropy_labels(t, mlp(t, x, p), labels);
    };
    Tape tape;
    Tensor loss = loss_fn(tape);
    tape.backward(loss);

    for (auto& layer : p.layers) {
        for (Tensor* param : {&layer.weight, &layer.bias}) {
            std::vector<double> analytic(param->grad().begin(), param->grad().end());
            auto recompute = [&] {
                Tape t;
                return loss_fn(t).scalar();
            };
            CHECK(testing::gradcheck_param(recompute, *param, analytic));
        }
    }
}

TEST_CASE("cross-entropy losses: closed forms") {
    Tape tape;
    // Uniform probabilities over 4 classes.
    Tensor probs = Tensor::from_data({1, 4}, {0.25, 0.25, 0.25, 0.25});
    CHECK(cross_entropy_probs(tape, probs, {2}).scalar() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
    Tensor onehot = Tensor::from_data({1, 3}, {0.0, 1.0, 0.0});
    CHECK(cross_entropy_probs(tape, onehot, {1}).scalar() == doctest::Approx(0.0));

    // Soft-target CE with matching target equals the target entropy.
    Tensor logits = Tensor::from_data({1, 3}, {0.3, -0.2, 0.9});
    Tensor p = softmax_last(tape, logits);
    Tensor target = Tensor::from_data({1, 3}, {p.at(0), p.at(1), p.at(2)});
    double entropy = 0.0;
    for (int j = 0; j < 3; ++j) entropy -= p.at(j) * std::log(p.at(j));
    CHECK(cross_entropy_soft(tape, logits, target).scalar() ==
          doctest::Approx(entropy).epsilon(1e-12));
}

TEST_CASE("forward+backward is bit-identical across reruns with one seed") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        MlpParams p = make_mlp({4, 8, 3}, rng, true);
        Tensor x = Tensor::randn({5, 4}, rng, 1.0, false);
        Tape tape;
        Tensor loss = cross_entropy_labels(tape, mlp(tape, x, p), {0, 1, 2, 1, 0});
        tape.backward(loss);
        std::vector<double> out;
        out.push_back(loss.scalar());
        for (auto& l : p.layers) {
            out.insert(out.end(), l.weight.grad().begin(), l.weight.grad().end());
            out.insert(out.end(), l.bias.grad().begin(), l.bias.grad().end());
        }
        return out;
    };
    auto a = run(99), b = run(99);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("non-finite forward values raise NumericsError") {
    Tape tape;
    Tensor huge = Tensor::from_data({1, 2}, {1e308, 1e308});
    CHECK_THROWS_AS(add(tape, huge, huge), NumericsError);
}

TEST_CASE("AdamW: decoupled decay shrinks unused parameters deterministically") {
    Rng rng(77);
    ParamRegistry reg;
    Tensor p = Tensor::randn({4}, rng, 1.0, true);
    reg.add("p", p);
    AdamW opt(reg, {.lr = 0.1, .weight_decay = 0.5});
    std::vector<double> before(p.values().begin(), p.values().end());
    opt.zero_grad();
    p.grad();  // zero gradient
    opt.step();
    for (int i = 0; i < 4; ++i)
        CHECK(p.values()[static_cast<std::size_t>(i)] ==
              doctest::Approx(before[static_cast<std::size_t>(i)] * (1.0 - 0.05)).epsilon(1e-12));
}
