#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "bdet/autodiff.hpp"
#include "bdet/errors.hpp"
#include "bdet/rng.hpp"
#include "bdet/tensor.hpp"
#include "testutil.hpp"

using namespace bdet;
using testutil::central_diff;
using testutil::rel_err;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

// Checks d(sum(w .* op(x))) / dx against central differences for every input
// element. Random weights probe the full Jacobian.
template <typename BuildOp>
double max_grad_error(Tensor x, BuildOp build, Rng& rng, double h) {
    Tensor w = random_tensor({1}, rng);  // resized on first use below
    {
        Tape t;
        Var xv = t.leaf(x, true);
        Var y = build(xv);
        w = random_tensor(y.value().shape(), rng);
    }
    auto loss_value = [&]() {
        Tape t;
        Var xv = t.leaf(x, false);
        Var y = build(xv);
        const Tensor& yv = y.value();
        double s = 0.0;
        for (std::size_t i = 0; i < yv.numel(); ++i) s += yv[i] * w[i];
        return s;
    };
    Tape t;
    Var xv = t.leaf(x, true);
    Var y = build(xv);
    Var loss = vsum(vmul(y, t.constant(w)));
    t.backward(loss);
    Tensor g = t.gradient(xv);

    double worst = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        double fd = central_diff(x, i, h, loss_value);
        worst = std::max(worst, rel_err(g[i], fd));
    }
    return worst;
}

}  // namespace

TEST_CASE("conv2d identity kernel reproduces input") {
    Tape t;
    Rng rng(7);
    Tensor in = random_tensor({1, 3, 3}, rng);
    Tensor k({1, 1, 1, 1}, {1.0});
    Tensor b({1}, {0.0});
    Var out = conv2d(t.leaf(in, false), t.leaf(k, false), t.leaf(b, false), 1, Padding::Same);
    for (std::size_t i = 0; i < in.numel(); ++i) CHECK(out.value()[i] == in[i]);
}

TEST_CASE("conv2d zero input yields bias everywhere") {
    Tape t;
    Rng rng(8);
    Tensor in = Tensor::zeros({2, 4, 4});
    Tensor k = random_tensor({3, 2, 3, 3}, rng);
    Tensor b({3}, {0.5, -1.0, 2.0});
    Var out = conv2d(t.leaf(in, false), t.leaf(k, false), t.leaf(b, false), 1, Padding::Same);
    const Tensor& o = out.value();
    for (int kk = 0; kk < 3; ++kk) {
        for (int y = 0; y < 4; ++y) {
            for (int x = 0; x < 4; ++x) CHECK(o.at3(kk, y, x) == b[kk]);
        }
    }
}

TEST_CASE("conv2d same padding output extent is ceil(H/stride)") {
    Tape t;
    Rng rng(9);
    Tensor in = random_tensor({1, 7, 5}, rng);
    Tensor k = random_tensor({2, 1, 3, 3}, rng);
    Tensor b = Tensor::zeros({2});
    Var out = conv2d(t.leaf(in, false), t.leaf(k, false), t.leaf(b, false), 2, Padding::Same);
    CHECK(out.value().shape() == std::vector<int>{2, 4, 3});
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(42);
    Tensor in = random_tensor({2, 8, 8}, rng);
    Tensor k = random_tensor({4, 2, 3, 3}, rng);
    Tensor b = random_tensor({4}, rng);

    auto loss_value = [&]() {
        Tape t;
        Var out = conv2d(t.leaf(in, false), t.leaf(k, false), t.leaf(b, false), 1, Padding::Same);
        double s = 0.0;
        for (std::size_t i = 0; i < out.value().numel(); ++i) s += out.value()[i];
        return s;
    };

    Tape t;
    Var iv = t.leaf(in, true), kv = t.leaf(k, true), bv = t.leaf(b, true);
    Var loss = vsum(conv2d(iv, kv, bv, 1, Padding::Same));
    t.backward(loss);
    Tensor gk = t.gradient(kv), gi = t.gradient(iv), gb = t.gradient(bv);

    double worst = 0.0;
    for (std::size_t i = 0; i < k.numel(); ++i) worst = std::max(worst, rel_err(gk[i], central_diff(k, i, 1e-5, loss_value)));
    for (std::size_t i = 0; i < in.numel(); ++i) worst = std::max(worst, rel_err(gi[i], central_diff(in, i, 1e-5, loss_value)));
    for (std::size_t i = 0; i < b.numel(); ++i) worst = std::max(worst, rel_err(gb[i], central_diff(b, i, 1e-5, loss_value)));
    CHECK(worst < 1e-4);
}

TEST_CASE("strided valid conv gradient") {
    Rng rng(43);
    Tensor in = random_tensor({2, 9, 9}, rng);
    Tensor k = random_tensor({3, 2, 3, 3}, rng);
    Tensor b = random_tensor({3}, rng);
    auto loss_value = [&]() {
        Tape t;
        Var out = conv2d(t.leaf(in, false), t.leaf(k, false), t.leaf(b, false), 2, Padding::Valid);
        double s = 0.0;
        for (std::size_t i = 0; i < out.value().numel(); ++i) s += out.value()[i];
        return s;
    };
    Tape t;
    Var iv = t.leaf(in, true), kv = t.leaf(k, true), bv = t.leaf(b, true);
    Var loss = vsum(conv2d(iv, kv, bv, 2, Padding::Valid));
    CHECK(loss.value().shape() == std::vector<int>{1});
    t.backward(loss);
    Tensor gi = t.gradient(iv), gk = t.gradient(kv);
    double worst = 0.0;
    for (std::size_t i = 0; i < in.numel(); ++i) worst = std::max(worst, rel_err(gi[i], central_diff(in, i, 1e-5, loss_value)));
    for (std::size_t i = 0; i < k.numel(); ++i) worst = std::max(worst, rel_err(gk[i], central_diff(k, i, 1e-5, loss_value)));
    CHECK(worst < 1e-4);
}

TEST_CASE("elementwise basics") {
    Tape t;
    Var x = t.leaf(Tensor({3}, {0.0, -2.0, 1.0}), false);
    CHECK(vsigmoid(x).value()[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(leaky_relu(x, 0.1).value()[1] == doctest::Approx(-0.2).epsilon(1e-15));
    CHECK(vexp(x).value()[2] == doctest::Approx(std::exp(1.0)));
    CHECK_THROWS_AS(vlog(x), NumericError);
}

TEST_CASE("sigmoid gradient at 1 matches finite differences tightly") {
    Tensor x({1}, {1.0});
    auto loss_value = [&]() {
        Tape t;
        return vsigmoid(t.leaf(x, false)).value()[0];
    };
    Tape t;
    Var xv = t.leaf(x, true);
    Var loss = vsum(vsigmoid(xv));
    t.backward(loss);
    double fd = central_diff(x, 0, 1e-6, loss_value);
    CHECK(std::abs(t.gradient(xv)[0] - fd) < 1e-6);
}

TEST_CASE("softmax symmetry, stability, and normalization") {
    Tape t;
    Var z = t.leaf(Tensor({3}, {0.0, 0.0, 0.0}), false);
    const Tensor& p = softmax_lastdim(z).value();
    for (int i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    Var big = t.leaf(Tensor({2}, {1000.0, 0.0}), false);
    const Tensor& q = softmax_lastdim(big).value();
    CHECK(q[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(q[1] < 1e-300);

    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor logits = random_tensor({4, 5}, rng, -3.0, 3.0);
        Var lv = t.leaf(logits, false);
        const Tensor& pp = softmax_lastdim(lv).value();
        for (int r = 0; r < 4; ++r) {
            double s = 0.0;
            for (int c = 0; c < 5; ++c) s += pp[static_cast<std::size_t>(r) * 5 + c];
            CHECK(std::abs(s - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("softmax jacobian matches finite differences") {
    Rng rng(12);
    Tensor z = random_tensor({2, 4}, rng, -2.0, 2.0);
    double worst = max_grad_error(z, [](Var x) { return softmax_lastdim(x); }, rng, 1e-6);
    CHECK(worst < 1e-5);
}

TEST_CASE("dropout identity, determinism, and expectation") {
    Rng rng(13);
    Tensor x = random_tensor({64}, rng);
    Tape t;
    Var xv = t.leaf(x, false);
    Var out0 = dropout(xv, 0.0, 123);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(out0.value()[i] == x[i]);

    Var a = dropout(xv, 0.5, 999);
    Var b = dropout(xv, 0.5, 999);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(a.value()[i] == b.value()[i]);

    Tensor ones = Tensor::full({1000000}, 1.0);
    Tensor dropped = dropout_forward(ones, 0.1, 77);
    double mean = 0.0;
    for (std::size_t i = 0; i < dropped.numel(); ++i) mean += dropped[i];
    mean /= static_cast<double>(dropped.numel());
    CHECK(mean > 0.99);
    CHECK(mean < 1.01);

    CHECK_THROWS_AS(dropout(xv, 1.0, 1), DataError);
    CHECK_THROWS_AS(dropout(xv, -0.1, 1), DataError);
}

TEST_CASE("dropout gradient uses the same mask") {
    Rng rng(14);
    Tensor x = random_tensor({40}, rng);
    double worst = max_grad_error(x, [](Var v) { return dropout(v, 0.3, 4242); }, rng, 1e-6);
    CHECK(worst < 1e-8);
}

TEST_CASE("batch norm train mode statistics") {
    Rng rng(15);
    Tensor x = random_tensor({3, 8, 8}, rng, -2.0, 5.0);
    Tensor gamma = Tensor::full({3}, 1.0), beta = Tensor::zeros({3});
    Tensor rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1.0);
    Tape t;
    Var out = batch_norm(t.leaf(x, false), t.leaf(gamma, false), t.leaf(beta, false), rm, rv, true);
    const Tensor& o = out.value();
    for (int c = 0; c < 3; ++c) {
        double m = 0.0, v = 0.0;
        for (int i = 0; i < 64; ++i) m += o[static_cast<std::size_t>(c) * 64 + i];
        m /= 64.0;
        for (int i = 0; i < 64; ++i) {
            double d = o[static_cast<std::size_t>(c) * 64 + i] - m;
            v += d * d;
        }
        v /= 64.0;
        CHECK(std::abs(m) < 1e-10);
        CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
    }
}

TEST_CASE("batch norm constant channel maps to beta") {
    Tensor x = Tensor::full({1, 4, 4}, 3.7);
    Tensor gamma = Tensor::full({1}, 2.0), beta = Tensor::full({1}, -0.25);
    Tensor rm = Tensor::zeros({1}), rv = Tensor::full({1}, 1.0);
    Tape t;
    Var out = batch_norm(t.leaf(x, false), t.leaf(gamma, false), t.leaf(beta, false), rm, rv, true);
    for (std::size_t i = 0; i < out.value().numel(); ++i) CHECK(out.value()[i] == doctest::Approx(-0.25).epsilon(1e-12));
}

TEST_CASE("batch norm passes normalized input through unchanged") {
    // Construct a channel with exact zero mean and unit (population) variance.
    Tensor x({1, 1, 4}, {-1.0, 1.0, -1.0, 1.0});
    Tensor gamma = Tensor::full({1}, 1.0), beta = Tensor::zeros({1});
    Tensor rm = Tensor::zeros({1}), rv = Tensor::full({1}, 1.0);
    Tape t;
    Var out = batch_norm(t.leaf(x, false), t.leaf(gamma, false), t.leaf(beta, false), rm, rv, true);
    for (std::size_t i = 0; i < 4; ++i) CHECK(out.value()[i] == doctest::Approx(x[i]).epsilon(1e-5));
}

TEST_CASE("batch norm gradient matches finite differences in both modes") {
    Rng rng(16);
    Tensor x = random_tensor({2, 4, 4}, rng);
    Tensor gamma = random_tensor({2}, rng, 0.5, 1.5);
    Tensor beta = random_tensor({2}, rng, -0.5, 0.5);
    Tensor rm = random_tensor({2}, rng, -0.2, 0.2);
    Tensor rv = random_tensor({2}, rng, 0.5, 1.5);

    for (bool training : {true, false}) {
        Tensor w = random_tensor({2, 4, 4}, rng);
        auto loss_value = [&]() {
            Tape t;
            Var out = batch_norm(t.leaf(x, false), t.leaf(gamma, false), t.leaf(beta, false), rm, rv, training);
            double s = 0.0;
            for (std::size_t i = 0; i < w.numel(); ++i) s += out.value()[i] * w[i];
            return s;
        };
        Tape t;
        Var xv = t.leaf(x, true), gv = t.leaf(gamma, true), bv = t.leaf(beta, true);
        Var loss = vsum(vmul(batch_norm(xv, gv, bv, rm, rv, training), t.constant(w)));
        t.backward(loss);
        double worst = 0.0;
        Tensor gx = t.gradient(xv), gg = t.gradient(gv), gb = t.gradient(bv);
        for (std::size_t i = 0; i < x.numel(); ++i) worst = std::max(worst, rel_err(gx[i], central_diff(x, i, 1e-5, loss_value)));
        for (std::size_t i = 0; i < 2; ++i) worst = std::max(worst, rel_err(gg[i], central_diff(gamma, i, 1e-5, loss_value)));
        for (std::size_t i = 0; i < 2; ++i) worst = std::max(worst, rel_err(gb[i], central_diff(beta, i, 1e-5, loss_value)));
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("nearest upsample") {
    Tape t;
    Tensor x({1, 1, 1}, {4.25});
    Var out = upsample_nearest(t.leaf(x, false), 3);
    CHECK(out.value().shape() == std::vector<int>{1, 3, 3});
    for (std::size_t i = 0; i < 9; ++i) CHECK(out.value()[i] == 4.25);

    Rng rng(17);
    Tensor y = random_tensor({2, 3, 3}, rng);
    Var id1 = upsample_nearest(t.leaf(y, false), 1);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(id1.value()[i] == y[i]);

    double worst = max_grad_error(y, [](Var v) { return upsample_nearest(v, 2); }, rng, 1e-6);
    CHECK(worst < 1e-6);
}

TEST_CASE("backward on sum of a parameter gives ones, unused parameters zeros") {
    Tape t;
    Parameter p{"w", Tensor({2, 3}, {1, 2, 3, 4, 5, 6}), true, Parameter::Kind::Weight};
    Parameter q{"unused", Tensor({2}, {1, 1}), true, Parameter::Kind::Weight};
    Var pv = t.parameter(p);
    t.parameter(q);
    Var loss = vsum(pv);
    t.backward(loss);
    auto grads = t.parameter_gradients();
    for (std::size_t i = 0; i < 6; ++i) CHECK(grads["w"][i] == 1.0);
    for (std::size_t i = 0; i < 2; ++i) CHECK(grads["unused"][i] == 0.0);
}

TEST_CASE("backward rejects non-scalar loss") {
    Tape t;
    Var x = t.leaf(Tensor({3}, {1, 2, 3}), true);
    CHECK_THROWS_AS(t.backward(x), DataError);
}

TEST_CASE("clip forwards values and gates gradients") {
    Tape t;
    Tensor x({4}, {-50.0, -1.0, 2.0, 45.0});
    Var xv = t.leaf(x, true);
    Var y = vclip(xv, -40.0, 40.0);
    CHECK(y.value()[0] == -40.0);
    CHECK(y.value()[1] == -1.0);
    CHECK(y.value()[2] == 2.0);
    CHECK(y.value()[3] == 40.0);
    t.backward(vsum(y));
    Tensor g = t.gradient(xv);
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 1.0);
    CHECK(g[2] == 1.0);
    CHECK(g[3] == 0.0);
}

TEST_CASE("gather, concat, bce and cross entropy gradients match finite differences") {
    Rng rng(18);

    Tensor x = random_tensor({12}, rng);
    double worst = max_grad_error(x, [](Var v) { return gather(v, {0, 5, 5, 11, 3}); }, rng, 1e-6);
    CHECK(worst < 1e-8);

    Tensor a = random_tensor({2, 3, 3}, rng);
    worst = max_grad_error(a, [](Var v) { return concat_channels(v, v); }, rng, 1e-6);
    CHECK(worst < 1e-8);

    Tensor z = random_tensor({10}, rng, -3.0, 3.0);
    Tensor y({10});
    Tensor wt({10});
    for (int i = 0; i < 10; ++i) {
        y[static_cast<std::size_t>(i)] = (i % 3 == 0) ? 1.0 : 0.0;
        wt[static_cast<std::size_t>(i)] = 0.5 + 0.1 * i;
    }
    auto bce_value = [&]() {
        Tape t;
        return bce_with_logits_sum(t.leaf(z, false), y, wt).value()[0];
    };
    {
        Tape t;
        Var zv = t.leaf(z, true);
        t.backward(bce_with_logits_sum(zv, y, wt));
        Tensor g = t.gradient(zv);
        double w2 = 0.0;
        for (std::size_t i = 0; i < z.numel(); ++i) w2 = std::max(w2, rel_err(g[i], central_diff(z, i, 1e-6, bce_value)));
        CHECK(w2 < 1e-7);
    }

    Tensor logits = random_tensor({6}, rng, -2.0, 2.0);
    auto ce_value = [&]() {
        Tape t;
        return cross_entropy_logits(t.leaf(logits, false), 2).value()[0];
    };
    {
        Tape t;
        Var lv = t.leaf(logits, true);
        t.backward(cross_entropy_logits(lv, 2));
        Tensor g = t.gradient(lv);
        double w2 = 0.0;
        for (std::size_t i = 0; i < logits.numel(); ++i) w2 = std::max(w2, rel_err(g[i], central_diff(logits, i, 1e-6, ce_value)));
        CHECK(w2 < 1e-7);
    }
}

TEST_CASE("objectness-style bce stays finite for extreme logits") {
    Tape t;
    Tensor z({1}, {-1000.0});
    Tensor y({1}, {1.0});
    Tensor w({1}, {1.0});
    Var loss = bce_with_logits_sum(t.leaf(z, false), y, w);
    CHECK(std::isfinite(loss.value()[0]));
    CHECK(loss.value()[0] == doctest::Approx(1000.0).epsilon(1e-12));
}

TEST_CASE("weight decay value and gradient") {
    Tape t;
    Parameter p{"w", Tensor({2}, {3.0, 4.0}), true, Parameter::Kind::Weight};
    Var wv = t.parameter(p);
    Var wd0 = weight_decay_term(t, {wv}, 0.0);
    CHECK(wd0.value()[0] == 0.0);
    Var wd = weight_decay_term(t, {wv}, 1.0);
    CHECK(wd.value()[0] == doctest::Approx(12.5).epsilon(1e-15));
    t.backward(wd);
    Tensor g = t.gradient(wv);
    CHECK(g[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(g[1] == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("every differentiable op passes 100 randomized gradient checks") {
    Rng rng(20250809);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        int n = 3 + static_cast<int>(rng.uniform_index(6));
        Tensor x = random_tensor({n}, rng, -2.0, 2.0);
        // keep clear of the leaky-relu kink and clip edges so the finite
        // difference stays in the smooth region
        for (std::size_t i = 0; i < x.numel(); ++i) {
            if (std::abs(x[i]) < 1e-3) x[i] = 1e-3;
        }
        int which = trial % 10;
        switch (which) {
            case 0: worst = std::max(worst, max_grad_error(x, [](Var v) { return vsigmoid(v); }, rng, 1e-6)); break;
            case 1: worst = std::max(worst, max_grad_error(x, [](Var v) { return vexp(v); }, rng, 1e-6)); break;
            case 2: {
                for (std::size_t i = 0; i < x.numel(); ++i) x[i] = std::abs(x[i]) + 0.1;
                worst = std::max(worst, max_grad_error(x, [](Var v) { return vlog(v); }, rng, 1e-6));
                break;
            }
            case 3: worst = std::max(worst, max_grad_error(x, [](Var v) { return leaky_relu(v, 0.1); }, rng, 1e-5)); break;
            case 4: worst = std::max(worst, max_grad_error(x, [](Var v) { return vclip(v, -1.5, 1.5); }, rng, 1e-5)); break;
            case 5: worst = std::max(worst, max_grad_error(x, [](Var v) { return vadd(v, vmul(v, v)); }, rng, 1e-6)); break;
            case 6: worst = std::max(worst, max_grad_error(x, [](Var v) { return vsub(vscale(v, 2.5), v); }, rng, 1e-6)); break;
            case 7: worst = std::max(worst, max_grad_error(x, [](Var v) { return vshift(vmean(v), 1.0); }, rng, 1e-6)); break;
            case 8: worst = std::max(worst, max_grad_error(x, [](Var v) { return softmax_lastdim(v); }, rng, 1e-6)); break;
            case 9: worst = std::max(worst, max_grad_error(x, [n](Var v) { return gather(v, {0, n - 1, 0}); }, rng, 1e-6)); break;
        }
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("tape evaluation is referentially transparent") {
    Rng rng(21);
    Tensor x = random_tensor({3, 6, 6}, rng);
    Tensor k = random_tensor({2, 3, 3, 3}, rng);
    Tensor b = random_tensor({2}, rng);
    auto run = [&]() {
        Tape t;
        Var out = dropout(leaky_relu(conv2d(t.leaf(x, false), t.leaf(k, false), t.leaf(b, false), 1, Padding::Same), 0.1),
                          0.25, 555);
        return out.value();
    };
    Tensor r1 = run(), r2 = run();
    for (std::size_t i = 0; i < r1.numel(); ++i) CHECK(r1[i] == r2[i]);
}

TEST_CASE("non-finite inputs are rejected") {
    Tape t;
    Tensor bad({2}, {1.0, std::nan("")});
    CHECK_THROWS_AS(vsum(vadd(t.leaf(bad, false), t.leaf(bad, false))), NumericError);
}
