#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "protodet/gradcheck.hpp"

using namespace protodet;

TEST_CASE("primitive op scope passes") {
    GradCheckReport report = run_grad_check_suite(GradCheckScope::ops);
    INFO(report.summary());
    CHECK(report.ok());
    CHECK(report.passed.size() > 15);
    CHECK(report.max_rel_error <= 1e-4);
}

TEST_CASE("a corrupted gradient is caught") {
    // test double: forward value of 3x but a backward that claims 6x
    Tensor x = Tensor::scalar(1.5);
    auto broken = [&] {
        auto xi = x.impl();
        return make_op("broken_scale", {1}, {x.data()[0] * 3.0}, {x},
                       [xi](const std::vector<double>& g) {
                           if (xi->grad.empty()) xi->grad.assign(1, 0.0);
                           xi->grad[0] += g[0] * 6.0;  // off by 2
                       });
    };
    GradCheckReport report;
    const bool ok = check_gradients("broken_scale", {{"x", x}}, broken, report);
    CHECK_FALSE(ok);
    REQUIRE(report.failures.size() == 1);
    CHECK(report.failures[0].check == "broken_scale");
    CHECK(report.failures[0].analytic == doctest::Approx(6.0).epsilon(1e-9));
    CHECK(report.failures[0].numeric == doctest::Approx(3.0).epsilon(1e-6));
    CHECK(report.summary().find("FAIL") != std::string::npos);
}

TEST_CASE("scope parsing") {
    CHECK(parse_grad_scope("ops") == GradCheckScope::ops);
    CHECK(parse_grad_scope("modules") == GradCheckScope::modules);
    CHECK(parse_grad_scope("end2end") == GradCheckScope::end2end);
    CHECK(parse_grad_scope("all") == GradCheckScope::all);
    CHECK_THROWS_AS(parse_grad_scope("everything"), std::invalid_argument);
}

TEST_CASE("kink coordinates are skipped when requested") {
    Tensor x = Tensor::from_data({2}, {0.0, 1.0});
    GradCheckReport report;
    int checked = 0;
    const bool ok = check_gradients(
        "relu_kink", {{"x", x}},
        [&] {
            Tensor w = Tensor::full({1, 2}, 1.0);
            return linear(relu(x), w, Tensor::zeros({1}));
        },
        report, 1e-5, 1e-4,
        [&](const std::string&, size_t j) {
            const bool skip = std::abs(x.data()[j]) < 1e-6;
            if (!skip) ++checked;
            return skip;
        });
    CHECK(ok);
    CHECK(checked == 1);  // only the off-kink coordinate was compared
}
