#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "constraintnet/autodiff.hpp"
#include "constraintnet/errors.hpp"
#include "support/gradcheck.hpp"

using namespace cnet;

namespace {

// Runs op on a tape, contracts the output with probe weights and returns the
// tape gradient of the wrapped leaf parameter.
std::vector<double> tape_gradient(const std::vector<double>& x,
                                  const std::vector<std::size_t>& shape,
                                  const std::function<Value(Tape&, Value)>& op,
                                  const std::vector<double>& probe) {
    Parameter leaf("x", Tensor(shape, x));
    Tape tape;
    Value out = op(tape, tape.param(leaf));
    Value flat = tape.reshape(out, {tape.value(out).size()});
    Value w = tape.input(Tensor::vector(probe));
    Value row = tape.reshape(flat, {1, probe.size()});
    Value col = tape.reshape(w, {probe.size(), 1});
    Value loss = tape.reshape(tape.matmul(row, col), {1});
    tape.backward(loss);
    return leaf.grad().vec();
}

double eval_probe(const std::vector<double>& x, const std::vector<std::size_t>& shape,
                  const std::function<Value(Tape&, Value)>& op, const std::vector<double>& probe) {
    Tape tape;
    Value out = op(tape, tape.input(Tensor(shape, x)));
    const Tensor& y = tape.value(out);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += probe[i] * y[i];
    return acc;
}

void check_op_gradient(const std::vector<std::size_t>& shape,
                       const std::function<Value(Tape&, Value)>& op, Rng& rng,
                       double rel_tol = 1e-6, double lo = -3.0, double hi = 3.0) {
    auto x = gradcheck::random_vector(shape_product(shape), rng, lo, hi);
    Tape probe_tape;
    Value probe_out = op(probe_tape, probe_tape.input(Tensor(shape, x)));
    auto probe = gradcheck::probe_weights(probe_tape.value(probe_out).size(), rng);
    auto analytic = tape_gradient(x, shape, op, probe);
    auto numeric = gradcheck::fd_gradient(
        [&](const std::vector<double>& v) { return eval_probe(v, shape, op, probe); }, x);
    CHECK(gradcheck::compare_gradients(analytic, numeric, rel_tol, 1e-9) == 0);
}

}  // namespace

TEST_CASE("matmul identity and scalar cases") {
    Tape tape;
    Value a = tape.input(Tensor({2, 2}, {1, 0, 0, 1}));
    Value b = tape.input(Tensor({2, 1}, {3, 4}));
    const Tensor& y = tape.value(tape.matmul(a, b));
    CHECK(y[0] == 3.0);
    CHECK(y[1] == 4.0);

    Value c = tape.input(Tensor({1, 1}, {2}));
    Value d = tape.input(Tensor({1, 1}, {5}));
    CHECK(tape.value(tape.matmul(c, d))[0] == 10.0);
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
    Tape tape;
    Value a = tape.input(Tensor({2, 3}));
    Value b = tape.input(Tensor({2, 2}));
    CHECK_THROWS_WITH_AS(tape.matmul(a, b), doctest::Contains("[2, 3]"), DimensionError);
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(101);
    Tensor b({3, 2}, gradcheck::random_vector(6, rng));
    for (int i = 0; i < 5; ++i) {
        check_op_gradient({4, 3}, [&](Tape& t, Value a) { return t.matmul(a, t.input(b)); }, rng);
    }
    // Gradient w.r.t. the right operand as well.
    Tensor a({4, 3}, gradcheck::random_vector(12, rng));
    for (int i = 0; i < 5; ++i) {
        check_op_gradient({3, 2}, [&](Tape& t, Value v) { return t.matmul(t.input(a), v); }, rng);
    }
}

TEST_CASE("add_broadcast values and errors") {
    Tape tape;
    Value a = tape.input(Tensor::vector({1, 2, 3}));
    Value z = tape.input(Tensor::vector({0, 0, 0}));
    const Tensor& y = tape.value(tape.add_broadcast(a, z));
    CHECK(y.vec() == std::vector<double>{1, 2, 3});

    Value m = tape.input(Tensor({2, 2}, {1, 2, 3, 4}));
    Value r = tape.input(Tensor::vector({10, 20}));
    const Tensor& y2 = tape.value(tape.add_broadcast(m, r));
    CHECK(y2.vec() == std::vector<double>{11, 22, 13, 24});

    Value bad = tape.input(Tensor::vector({1, 2, 3}));
    CHECK_THROWS_AS(tape.add_broadcast(m, bad), DimensionError);
}

TEST_CASE("add_broadcast gradient sums over broadcast axes") {
    Rng rng(102);
    Tensor big({3, 4}, gradcheck::random_vector(12, rng));
    for (int i = 0; i < 5; ++i) {
        check_op_gradient({3, 4},
                          [&](Tape& t, Value a) { return t.add_broadcast(a, t.input(big)); }, rng);
        check_op_gradient({4},
                          [&](Tape& t, Value b) { return t.add_broadcast(t.input(big), b); }, rng);
    }
}

TEST_CASE("relu forward and subgradient") {
    Tape tape;
    Value a = tape.input(Tensor::vector({-1, 0, 2}));
    CHECK(tape.value(tape.relu(a)).vec() == std::vector<double>{0, 0, 2});

    Parameter leaf("x", Tensor::vector({-5, -1, -0.5}));
    Tape t2;
    Value out = t2.relu(t2.param(leaf));
    CHECK(t2.value(out).vec() == std::vector<double>{0, 0, 0});
    Value loss = t2.mse_loss(out, t2.input(Tensor::vector({1, 1, 1})));
    t2.backward(loss);
    CHECK(leaf.grad().vec() == std::vector<double>{0, 0, 0});
}

TEST_CASE("relu gradient away from the kink") {
    Rng rng(103);
    for (int i = 0; i < 8; ++i) {
        auto x = gradcheck::random_vector(9, rng);
        for (auto& v : x) {
            if (std::abs(v) < 1e-3) v = 0.5;  // keep finite differences valid
        }
        auto probe = gradcheck::probe_weights(9, rng);
        auto op = [](Tape& t, Value v) { return t.relu(v); };
        auto analytic = tape_gradient(x, {9}, op, probe);
        auto numeric = gradcheck::fd_gradient(
            [&](const std::vector<double>& v) { return eval_probe(v, {9}, op, probe); }, x);
        CHECK(gradcheck::compare_gradients(analytic, numeric, 1e-6, 1e-9) == 0);
    }
}

TEST_CASE("sigmoid is stable and bounded") {
    Tape tape;
    Value a = tape.input(Tensor::vector({0.0, 700.0, -700.0}));
    const Tensor& y = tape.value(tape.sigmoid(a));
    CHECK(y[0] == 0.5);
    CHECK(y[1] < 1.0);
    CHECK(y[1] > 0.0);
    CHECK(std::isfinite(y[1]));
    CHECK(y[2] > 0.0);
    CHECK(std::isfinite(y[2]));
}

TEST_CASE("sigmoid gradient matches finite differences") {
    Rng rng(104);
    for (int i = 0; i < 8; ++i) {
        check_op_gradient({6}, [](Tape& t, Value v) { return t.sigmoid(v); }, rng);
    }
}

TEST_CASE("softmax basics") {
    Tape tape;
    const Tensor& y = tape.value(tape.softmax(tape.input(Tensor::vector({0, 0, 0}))));
    for (int i = 0; i < 3; ++i) CHECK(y[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    // Closed form: first weight is 1 / (1 + 2 exp(-50)).
    const Tensor& big = tape.value(tape.softmax(tape.input(Tensor::vector({50, 0, 0}))));
    CHECK(big[0] >= 1.0 - 2e-22);
    double sum = big[0] + big[1] + big[2];
    CHECK(std::abs(sum - 1.0) < 1e-12);
    CHECK(big[1] > 0.0);
}

TEST_CASE("softmax invariance under constant shifts") {
    Rng rng(105);
    for (int i = 0; i < 20; ++i) {
        auto x = gradcheck::random_vector(5, rng, -10.0, 10.0);
        const double shift = rng.uniform(-100.0, 100.0);
        Tape tape;
        const Tensor& a = tape.value(tape.softmax(tape.input(Tensor::vector(x))));
        auto shifted = x;
        for (auto& v : shifted) v += shift;
        const Tensor& b = tape.value(tape.softmax(tape.input(Tensor::vector(shifted))));
        double min_v = 1.0, sum = 0.0;
        for (std::size_t k = 0; k < 5; ++k) {
            CHECK(std::abs(a[k] - b[k]) < 1e-12);
            min_v = std::min(min_v, a[k]);
            sum += a[k];
        }
        CHECK(min_v > 0.0);
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("softmax full Jacobian matches finite differences") {
    Rng rng(106);
    for (int i = 0; i < 8; ++i) {
        check_op_gradient({5}, [](Tape& t, Value v) { return t.softmax(v); }, rng, 1e-5);
    }
}

TEST_CASE("conv2d identity and counting kernels") {
    Tape tape;
    Tensor img({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Value out = tape.conv2d(tape.input(img), tape.input(Tensor({1, 1, 1, 1}, {1})), 1);
    CHECK(tape.value(out).vec() == img.vec());
    CHECK(tape.value(out).shape() == std::vector<std::size_t>{1, 3, 3});

    Tensor ones({1, 4, 4});
    ones.fill(1.0);
    Tensor k({1, 1, 2, 2});
    k.fill(1.0);
    Value pooled = tape.conv2d(tape.input(ones), tape.input(k), 2);
    CHECK(tape.value(pooled).shape() == std::vector<std::size_t>{1, 2, 2});
    for (double v : tape.value(pooled).vec()) CHECK(v == 4.0);
}

TEST_CASE("conv2d rejects oversized kernels") {
    Tape tape;
    Value img = tape.input(Tensor({1, 3, 3}));
    Value k = tape.input(Tensor({1, 1, 5, 5}));
    CHECK_THROWS_AS(tape.conv2d(img, k, 1), DimensionError);
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(107);
    Tensor kernels({3, 2, 3, 3}, gradcheck::random_vector(54, rng, -1.0, 1.0));
    for (int i = 0; i < 3; ++i) {
        check_op_gradient(
            {2, 6, 6}, [&](Tape& t, Value v) { return t.conv2d(v, t.input(kernels), 1); }, rng,
            1e-5);
    }
    Tensor image({2, 6, 6}, gradcheck::random_vector(72, rng, -1.0, 1.0));
    for (int i = 0; i < 3; ++i) {
        check_op_gradient(
            {3, 2, 3, 3}, [&](Tape& t, Value v) { return t.conv2d(t.input(image), v, 2); }, rng,
            1e-5);
    }
}

TEST_CASE("mse_loss values and gradient") {
    Tape tape;
    Value p = tape.input(Tensor::vector({2}));
    Value z = tape.input(Tensor::vector({0}));
    CHECK(tape.value(tape.mse_loss(p, p))[0] == 0.0);
    CHECK(tape.value(tape.mse_loss(p, z))[0] == 4.0);
    CHECK_THROWS_AS(tape.mse_loss(p, tape.input(Tensor::vector({1, 2}))), DimensionError);

    Rng rng(108);
    for (int i = 0; i < 5; ++i) {
        auto target = Tensor::vector(gradcheck::random_vector(7, rng));
        Parameter leaf("x", Tensor::vector(gradcheck::random_vector(7, rng)));
        Tape t2;
        Value loss = t2.mse_loss(t2.param(leaf), t2.input(target));
        t2.backward(loss);
        // d/dp mean((p - t)^2) = 2 (p - t) / N
        for (std::size_t k = 0; k < 7; ++k) {
            const double expected = 2.0 * (leaf.value()[k] - target[k]) / 7.0;
            CHECK(gradcheck::close(leaf.grad()[k], expected, 1e-12, 1e-15));
        }
    }
}

TEST_CASE("backward materializes gradients in parameters") {
    // loss = mse(theta, 0) with theta = [1, 2]: gradient 2 theta / N = theta.
    Parameter theta("theta", Tensor::vector({1, 2}));
    Tape tape;
    Value loss = tape.mse_loss(tape.param(theta), tape.input(Tensor::vector({0, 0})));
    tape.backward(loss);
    CHECK(theta.grad()[0] == doctest::Approx(1.0));
    CHECK(theta.grad()[1] == doctest::Approx(2.0));

    // loss = sum(theta) via an all-ones probe: gradient all ones.
    Parameter theta2("theta2", Tensor::vector({3, -4, 5}));
    Tape t2;
    Value row = t2.reshape(t2.param(theta2), {1, 3});
    Value ones = t2.input(Tensor({3, 1}, {1, 1, 1}));
    Value loss2 = t2.reshape(t2.matmul(row, ones), {1});
    t2.backward(loss2);
    for (int i = 0; i < 3; ++i) CHECK(theta2.grad()[i] == 1.0);
}

TEST_CASE("backward without a forward pass is a usage error") {
    Tape tape;
    CHECK_THROWS_AS(tape.backward(Value{}), UsageError);
}

TEST_CASE("backward requires a scalar loss") {
    Tape tape;
    Value v = tape.input(Tensor::vector({1, 2}));
    CHECK_THROWS_AS(tape.backward(v), UsageError);
}

TEST_CASE("three-layer MLP gradients match finite differences") {
    Rng rng(109);
    const std::size_t in = 6, h1 = 5, h2 = 4, out = 3;
    std::vector<Parameter> params;
    params.emplace_back("w0", Tensor({h1, in}, gradcheck::random_vector(h1 * in, rng, -1, 1)));
    params.emplace_back("b0", Tensor::vector(gradcheck::random_vector(h1, rng, -1, 1)));
    params.emplace_back("w1", Tensor({h2, h1}, gradcheck::random_vector(h2 * h1, rng, -1, 1)));
    params.emplace_back("b1", Tensor::vector(gradcheck::random_vector(h2, rng, -1, 1)));
    params.emplace_back("w2", Tensor({out, h2}, gradcheck::random_vector(out * h2, rng, -1, 1)));
    params.emplace_back("b2", Tensor::vector(gradcheck::random_vector(out, rng, -1, 1)));
    const Tensor x = Tensor::vector(gradcheck::random_vector(in, rng, -1, 1));
    const Tensor target = Tensor::vector(gradcheck::random_vector(out, rng, -1, 1));

    auto run = [&](std::vector<Parameter>& ps, bool bind) {
        Tape tape;
        std::vector<Value> vals;
        for (auto& p : ps) vals.push_back(bind ? tape.param(p) : tape.input(p.value()));
        Value cur = tape.input(x);
        for (int layer = 0; layer < 3; ++layer) {
            Value col = tape.reshape(cur, {tape.value(cur).size(), 1});
            Value y = tape.matmul(vals[2 * layer], col);
            y = tape.reshape(y, {tape.value(y).size()});
            y = tape.add_broadcast(y, vals[2 * layer + 1]);
            cur = layer < 2 ? tape.relu(y) : y;
        }
        Value loss = tape.mse_loss(cur, tape.input(target));
        if (bind) tape.backward(loss);
        return tape.value(loss)[0];
    };

    run(params, true);
    for (auto& p : params) {
        std::vector<double> numeric(p.value().size());
        for (std::size_t i = 0; i < p.value().size(); ++i) {
            const double keep = p.value()[i];
            p.value()[i] = keep + gradcheck::kStep;
            const double hi = run(params, false);
            p.value()[i] = keep - gradcheck::kStep;
            const double lo = run(params, false);
            p.value()[i] = keep;
            numeric[i] = (hi - lo) / (2.0 * gradcheck::kStep);
        }
        CHECK(gradcheck::compare_gradients(p.grad().vec(), numeric, 1e-5, 1e-8) == 0);
    }
}

TEST_CASE("forward and backward are deterministic") {
    Rng rng(110);
    auto x = gradcheck::random_vector(12, rng);
    auto probe = gradcheck::probe_weights(12, rng);
    auto op = [](Tape& t, Value v) { return t.sigmoid(t.relu(v)); };
    auto g1 = tape_gradient(x, {12}, op, probe);
    auto g2 = tape_gradient(x, {12}, op, probe);
    CHECK(g1 == g2);
    CHECK(eval_probe(x, {12}, op, probe) == eval_probe(x, {12}, op, probe));
}

TEST_CASE("forward passes stay finite for inputs up to 1e3") {
    Rng rng(111);
    for (int i = 0; i < 10; ++i) {
        auto x = gradcheck::random_vector(16, rng, -1e3, 1e3);
        Tape tape;
        Value v = tape.input(Tensor::vector(x));
        Value s = tape.softmax(tape.slice(v, 0, 8));
        Value g = tape.sigmoid(tape.slice(v, 8, 16));
        Value both = tape.concat(s, g);
        CHECK(tape.value(both).all_finite());
        CHECK(tape.value(tape.relu(v)).all_finite());
    }
}

TEST_CASE("slice and concat round trip with gradients") {
    Rng rng(112);
    for (int i = 0; i < 5; ++i) {
        check_op_gradient({10}, [](Tape& t, Value v) {
            Value lo = t.slice(v, 0, 4);
            Value hi = t.slice(v, 4, 10);
            return t.concat(hi, lo);
        }, rng);
    }
}
