#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <sstream>

#include "oracles.hpp"
#include "protodet/params.hpp"
#include "protodet/rng.hpp"
#include "protodet/tensor.hpp"

using namespace protodet;

namespace {

Tensor sum_all(const Tensor& t) {
    // scalar reduction helper: <ones, flat(t)>
    Tensor flat = reshape(t, {static_cast<int>(t.numel())});
    Tensor w = Tensor::full({1, static_cast<int>(t.numel())}, 1.0);
    return linear(flat, w, Tensor::zeros({1}));
}

}  // namespace

TEST_CASE("matmul identity and hand cases") {
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
    Tensor out = matmul(eye, b);
    CHECK(out.data() == b.data());

    Tensor row = Tensor::from_data({1, 2}, {1, 2});
    Tensor col = Tensor::from_data({2, 1}, {3, 4});
    CHECK(matmul(row, col).item() == 11.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
    Rng rng(7);
    Tensor a = Tensor::uniform({3, 4}, -1, 1, rng);
    Tensor b = Tensor::uniform({4, 2}, -1, 1, rng);
    auto expect = oracle::matmul(a.data(), b.data(), 3, 4, 2);
    Tensor out = matmul(a, b);
    for (size_t i = 0; i < expect.size(); ++i)
        CHECK(std::abs(out.data()[i] - expect[i]) <= 1e-12);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 2});
    try {
        matmul(a, b);
        FAIL("expected throw");
    } catch (const std::invalid_argument& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[2,2]") != std::string::npos);
    }
}

TEST_CASE("softmax basics") {
    Tensor t = softmax(Tensor::from_data({2}, {0, 0}), 0);
    CHECK(t.data()[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(t.data()[1] == doctest::Approx(0.5).epsilon(1e-15));

    Tensor u = softmax(Tensor::from_data({3}, {1, 2, 3}), 0);
    CHECK(std::abs(u.data()[0] - 0.09003057317038046) < 1e-12);
    CHECK(std::abs(u.data()[1] - 0.24472847105479767) < 1e-12);
    CHECK(std::abs(u.data()[2] - 0.66524095577482186) < 1e-12);

    Tensor big = softmax(Tensor::from_data({2}, {1000, 1000}), 0);
    CHECK(std::isfinite(big.data()[0]));
    CHECK(big.data()[0] == doctest::Approx(0.5).epsilon(1e-15));

    CHECK_THROWS_AS(softmax(Tensor::zeros({2, 2}), 2), std::invalid_argument);
}

TEST_CASE("softmax slices sum to one on random tensors") {
    Rng rng(11);
    for (int axis = 0; axis < 3; ++axis) {
        Tensor x = Tensor::uniform({3, 4, 5}, -8, 8, rng);
        Tensor s = softmax(x, axis);
        for (double v : s.data()) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
        }
        // sum along axis
        const int n = x.dim(axis);
        int64_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= x.dim(i);
        for (int i = axis + 1; i < 3; ++i) inner *= x.dim(i);
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t in = 0; in < inner; ++in) {
                double sum = 0;
                for (int i = 0; i < n; ++i) sum += s.data()[o * n * inner + i * inner + in];
                CHECK(std::abs(sum - 1.0) <= 1e-12);
            }
    }
}

TEST_CASE("conv2d identity kernel k=1") {
    Rng rng(3);
    Tensor x = Tensor::uniform({3, 4, 4}, -1, 1, rng);
    Tensor w = Tensor::zeros({3, 3, 1, 1});
    for (int c = 0; c < 3; ++c) w.data()[(c * 3 + c)] = 1.0;
    Tensor out = conv2d(x, w, Tensor::zeros({3}));
    for (size_t i = 0; i < x.data().size(); ++i) CHECK(out.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d k=3 all-ones padding arithmetic") {
    Tensor x = Tensor::full({1, 4, 4}, 1.0);
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor out = conv2d(x, w, Tensor::zeros({1}));
    CHECK(out.data()[0] == 4.0);              // corner
    CHECK(out.data()[1] == 6.0);              // edge
    CHECK(out.data()[4 * 1 + 1] == 9.0);      // interior
    CHECK(out.data()[15] == 4.0);             // opposite corner
}

TEST_CASE("conv2d matches six-loop oracle") {
    Rng rng(17);
    for (int k : {1, 3}) {
        Tensor x = Tensor::uniform({3, 5, 4}, -1, 1, rng);
        Tensor w = Tensor::uniform({2, 3, k, k}, -1, 1, rng);
        Tensor b = Tensor::uniform({2}, -1, 1, rng);
        Tensor out = conv2d(x, w, b);
        auto expect = oracle::conv2d(x.data(), w.data(), b.data(), 3, 5, 4, 2, k);
        for (size_t i = 0; i < expect.size(); ++i)
            CHECK(std::abs(out.data()[i] - expect[i]) <= 1e-12);
    }
    CHECK_THROWS_AS(conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({1, 3, 1, 1}), Tensor::zeros({1})),
                    std::invalid_argument);
}

TEST_CASE("gap values and gradient") {
    Tensor c = Tensor::full({3, 2, 5}, 2.5);
    Tensor cg = gap(c);
    for (double v : cg.data()) CHECK(v == 2.5);

    Tensor x = Tensor::from_data({1, 2, 2}, {1, 3, 5, 7});
    CHECK(gap(x).item() == 4.0);

    Rng rng(5);
    Tensor y = Tensor::uniform({2, 3, 4}, -1, 1, rng);
    y.set_requires_grad(true);
    sum_all(gap(y)).backward();
    for (double g : y.grad()) CHECK(g == doctest::Approx(1.0 / 12).epsilon(1e-15));
}

TEST_CASE("cosine_map analytic cases") {
    // self similarity
    Tensor v = Tensor::from_data({2}, {0.3, -0.7});
    Tensor x = Tensor::zeros({2, 2, 2});
    for (int i = 0; i < 4; ++i) {
        x.data()[i] = 0.3;
        x.data()[4 + i] = -0.7;
    }
    Tensor self = cosine_map(v, x);
    for (double o : self.data()) CHECK(std::abs(o - 1.0) <= 1e-12);

    // orthogonality
    Tensor v2 = Tensor::from_data({2}, {1, 0});
    Tensor x2 = Tensor::from_data({2, 1, 1}, {0, 1});
    CHECK(cosine_map(v2, x2).item() == 0.0);

    // analytic sqrt(2)/2
    Tensor v3 = Tensor::from_data({2}, {1, 1});
    Tensor x3 = Tensor::from_data({2, 1, 1}, {1, 0});
    CHECK(std::abs(cosine_map(v3, x3).item() - 0.70710678118654752) <= 1e-12);

    // zero vector guarded by eps
    Tensor v4 = Tensor::from_data({2}, {0, 0});
    CHECK(cosine_map(v4, x3).item() == 0.0);
}

TEST_CASE("cosine_map stays in [-1,1] on random inputs") {
    Rng rng(23);
    for (int trial = 0; trial < 50; ++trial) {
        double scale_v = std::pow(10.0, rng.uniform(-6, 6));
        Tensor v = Tensor::uniform({4}, -scale_v, scale_v, rng);
        Tensor x = Tensor::uniform({4, 3, 3}, -scale_v, scale_v, rng);
        Tensor cm = cosine_map(v, x);
        for (double o : cm.data()) CHECK(std::abs(o) <= 1.0 + 1e-9);
    }
}

TEST_CASE("elementwise basics") {
    Rng rng(9);
    Tensor any = Tensor::uniform({2, 3}, -5, 5, rng);
    Tensor zeros = Tensor::zeros({2, 3});
    Tensor hz = hadamard(zeros, any);
    for (double v : hz.data()) CHECK(v == 0.0);
    CHECK(sigmoid(Tensor::scalar(0)).item() == 0.5);
    Tensor summed = add(any, zeros);
    CHECK(summed.data() == any.data());
    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), std::invalid_argument);
}

TEST_CASE("mask broadcast against [C,H,W] in both orders") {
    Rng rng(13);
    Tensor x = Tensor::uniform({3, 2, 2}, -1, 1, rng);
    Tensor m = Tensor::uniform({2, 2}, -1, 1, rng);
    Tensor a = hadamard(x, m);
    Tensor b = hadamard(m, x);
    CHECK(a.shape() == Shape{3, 2, 2});
    CHECK(a.data() == b.data());
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 4; ++i)
            CHECK(a.data()[c * 4 + i] == x.data()[c * 4 + i] * m.data()[i]);

    Tensor s = add(m, x);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 4; ++i)
            CHECK(s.data()[c * 4 + i] == x.data()[c * 4 + i] + m.data()[i]);
}

TEST_CASE("linear cases and oracle") {
    Rng rng(29);
    Tensor x = Tensor::uniform({3}, -1, 1, rng);
    CHECK(linear(x, Tensor::zeros({2, 3}), Tensor::zeros({2})).data() ==
          std::vector<double>{0, 0});

    Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    CHECK(linear(x, eye, Tensor::zeros({3})).data() == x.data());

    Tensor w = Tensor::uniform({4, 3}, -1, 1, rng);
    Tensor b = Tensor::uniform({4}, -1, 1, rng);
    auto expect = oracle::linear(x.data(), w.data(), b.data(), 4, 3);
    Tensor out = linear(x, w, b);
    for (int i = 0; i < 4; ++i) CHECK(std::abs(out.data()[i] - expect[i]) <= 1e-12);
}

TEST_CASE("cross_entropy hand values") {
    Tensor uniform = Tensor::zeros({1, 4});
    CHECK(std::abs(cross_entropy(uniform, {2}).item() - std::log(4.0)) <= 1e-15);

    Tensor confident = Tensor::from_data({1, 2}, {10, -10});
    const double expect = std::log1p(std::exp(-20.0));
    CHECK(std::abs(cross_entropy(confident, {0}).item() - expect) <= 1e-12);

    Rng rng(31);
    Tensor row = Tensor::uniform({1, 5}, -2, 2, rng);
    Tensor two = Tensor::from_data({2, 5}, [&] {
        std::vector<double> d = row.data();
        d.insert(d.end(), row.data().begin(), row.data().end());
        return d;
    }());
    CHECK(std::abs(cross_entropy(two, {3, 3}).item() - cross_entropy(row, {3}).item()) <= 1e-15);

    CHECK_THROWS_AS(cross_entropy(uniform, {4}), std::invalid_argument);
    CHECK_THROWS_AS(cross_entropy(uniform, {-1}), std::invalid_argument);
}

TEST_CASE("l1_loss values and kink convention") {
    Rng rng(37);
    Tensor p = Tensor::uniform({3, 2}, -1, 1, rng);
    CHECK(l1_loss(p, p.detach()).item() == 0.0);

    Tensor a = Tensor::from_data({2}, {1, 2});
    Tensor b = Tensor::zeros({2});
    CHECK(l1_loss(a, b).item() == 1.5);

    // subgradient at equality is zero
    Tensor x = Tensor::from_data({2}, {1, 1}).set_requires_grad(true);
    l1_loss(x, Tensor::from_data({2}, {1, 1})).backward();
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 0.0);

    CHECK_THROWS_AS(l1_loss(a, Tensor::zeros({3})), std::invalid_argument);
}

TEST_CASE("backward chain rule and accumulation") {
    Tensor x = Tensor::scalar(2).set_requires_grad(true);
    scale(x, 3).backward();
    CHECK(x.grad()[0] == 3.0);

    Tensor y = Tensor::scalar(5).set_requires_grad(true);
    hadamard(y, y).backward();
    CHECK(y.grad()[0] == 10.0);

    // two consumers: z = x*x + 3x, dz/dx = 2x + 3
    Tensor z = Tensor::scalar(4).set_requires_grad(true);
    add(hadamard(z, z), scale(z, 3)).backward();
    CHECK(z.grad()[0] == 11.0);

    CHECK_THROWS_AS(Tensor::zeros({2}).backward(), std::invalid_argument);
}

TEST_CASE("no gradient flows into untracked tensors") {
    Tensor x = Tensor::scalar(2).set_requires_grad(true);
    Tensor c = Tensor::scalar(7);
    Tensor out = hadamard(x, c);
    out.backward();
    CHECK(x.grad()[0] == 7.0);
    CHECK_FALSE(c.has_grad());
}

TEST_CASE("sgd step semantics") {
    // vanilla step
    {
        ParamRegistry reg;
        Tensor& p = reg.add("p", Tensor::from_data({2}, {1.0, 2.0}));
        SgdOptimizer opt(reg, 0.1, 0.0, 0.0);
        p.grad()[0] = 0.5;
        p.grad()[1] = -0.5;
        opt.step();
        CHECK(p.data()[0] == doctest::Approx(0.95).epsilon(1e-15));
        CHECK(p.data()[1] == doctest::Approx(2.05).epsilon(1e-15));
        CHECK_FALSE(p.has_grad());
    }
    // zero grad, zero decay: unchanged
    {
        ParamRegistry reg;
        Tensor& p = reg.add("p", Tensor::from_data({1}, {3.25}));
        SgdOptimizer opt(reg, 0.1, 0.9, 0.0);
        opt.step();
        CHECK(p.data()[0] == 3.25);
    }
    // two momentum steps with constant grad: total change -2.9 g
    {
        ParamRegistry reg;
        Tensor& p = reg.add("p", Tensor::from_data({1}, {10.0}));
        SgdOptimizer opt(reg, 1.0, 0.9, 0.0);
        const double g = 0.7;
        p.grad()[0] = g;
        opt.step();
        p.grad()[0] = g;
        opt.step();
        CHECK(p.data()[0] == doctest::Approx(10.0 - 2.9 * g).epsilon(1e-15));
    }
    // missing grad still decays
    {
        ParamRegistry reg;
        Tensor& p = reg.add("p", Tensor::from_data({1}, {2.0}));
        SgdOptimizer opt(reg, 0.5, 0.0, 0.1);
        opt.step();
        CHECK(p.data()[0] == doctest::Approx(2.0 - 0.5 * 0.1 * 2.0).epsilon(1e-15));
    }
}

TEST_CASE("registry names are unique and ordered") {
    ParamRegistry reg;
    reg.add("b", Tensor::zeros({1}));
    reg.add("a", Tensor::zeros({1}));
    CHECK_THROWS_AS(reg.add("a", Tensor::zeros({1})), std::invalid_argument);
    CHECK(reg.entries()[0].first == "b");
    CHECK(reg.entries()[1].first == "a");
}

TEST_CASE("checkpoint round-trip is bit exact") {
    Rng rng(41);
    ParamRegistry reg;
    reg.add("layer.weight", Tensor::uniform({3, 4}, -1, 1, rng));
    reg.add("layer.bias", Tensor::uniform({3}, -1, 1, rng));
    // include values that stress the payload: denormals, negative zero
    reg.entries()[1].second.data()[0] = -0.0;
    reg.entries()[1].second.data()[1] = 5e-324;

    std::stringstream buf;
    reg.save(buf);

    ParamRegistry reg2;
    Rng rng2(99);
    reg2.add("layer.weight", Tensor::uniform({3, 4}, -1, 1, rng2));
    reg2.add("layer.bias", Tensor::uniform({3}, -1, 1, rng2));
    reg2.load(buf);
    for (size_t e = 0; e < 2; ++e) {
        const auto& a = reg.entries()[e].second.data();
        const auto& b = reg2.entries()[e].second.data();
        REQUIRE(a.size() == b.size());
        CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
    }

    // shape mismatch rejected
    ParamRegistry reg3;
    reg3.add("layer.weight", Tensor::zeros({4, 3}));
    reg3.add("layer.bias", Tensor::zeros({3}));
    std::stringstream buf2;
    reg.save(buf2);
    CHECK_THROWS_AS(reg3.load(buf2), std::runtime_error);
}

TEST_CASE("rng reproducibility") {
    Rng a(12345), b(12345);
    for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
    Rng c = a.fork(1), d = b.fork(1);
    for (int i = 0; i < 10; ++i) CHECK(c.next() == d.next());

    Rng r1(7), r2(7);
    Tensor t1 = Tensor::uniform({4, 4}, -1, 1, r1);
    Tensor t2 = Tensor::uniform({4, 4}, -1, 1, r2);
    CHECK(std::memcmp(t1.data().data(), t2.data().data(), 16 * sizeof(double)) == 0);
}

TEST_CASE("shape plumbing ops") {
    Rng rng(43);
    Tensor x = Tensor::uniform({2, 3}, -1, 1, rng);
    Tensor r = reshape(x, {3, 2});
    CHECK(r.data() == x.data());
    CHECK_THROWS_AS(reshape(x, {4, 2}), std::invalid_argument);

    Tensor t = transpose(x);
    CHECK(t.dim(0) == 3);
    CHECK(t.data()[0 * 2 + 1] == x.data()[1 * 3 + 0]);

    Tensor a = Tensor::from_data({2}, {1, 2});
    Tensor b = Tensor::from_data({3}, {3, 4, 5});
    CHECK(concat({a, b}).data() == std::vector<double>{1, 2, 3, 4, 5});
    CHECK(stack_rows({a, a}).shape() == Shape{2, 2});

    Tensor m = Tensor::from_data({1, 2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(crop_mean(m, 0, 2, 1, 2).item() == doctest::Approx(3.5).epsilon(1e-15));

    Tensor p = avgpool2(Tensor::from_data({1, 2, 2}, {1, 2, 3, 4}));
    CHECK(p.item() == 2.5);

    Tensor g = gmp(Tensor::from_data({2, 1, 2}, {1, 5, -3, -7}));
    CHECK(g.data() == std::vector<double>{5, -3});
}

TEST_CASE("mul_scalar gradients") {
    Tensor x = Tensor::from_data({2}, {2, 3}).set_requires_grad(true);
    Tensor s = Tensor::scalar(4).set_requires_grad(true);
    sum_all(mul_scalar(x, s)).backward();
    CHECK(x.grad()[0] == 4.0);
    CHECK(x.grad()[1] == 4.0);
    CHECK(s.grad()[0] == 5.0);
}
