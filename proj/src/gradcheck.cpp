#include "protodet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "protodet/aggregation.hpp"
#include "protodet/coupling.hpp"
#include "protodet/detector.hpp"
#include "protodet/rng.hpp"

namespace protodet {

std::string GradCheckReport::summary() const {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "gradcheck: %zu checks passed, %zu failed, max rel err %.3e",
                  passed.size(), failures.size(), max_rel_error);
    std::string out = buf;
    for (const auto& f : failures) {
        std::snprintf(buf, sizeof(buf), "\n  FAIL %s / %s[%zu]: analytic %.9e numeric %.9e rel %.3e",
                      f.check.c_str(), f.input.c_str(), f.index, f.analytic, f.numeric, f.rel_error);
        out += buf;
    }
    return out;
}

GradCheckScope parse_grad_scope(const std::string& name) {
    if (name == "ops") return GradCheckScope::ops;
    if (name == "modules") return GradCheckScope::modules;
    if (name == "end2end") return GradCheckScope::end2end;
    if (name == "all") return GradCheckScope::all;
    throw std::invalid_argument("unknown gradcheck scope '" + name +
                                "' (expected ops|modules|end2end|all)");
}

bool check_gradients(const std::string& name, std::vector<std::pair<std::string, Tensor>> inputs,
                     const std::function<Tensor()>& forward, GradCheckReport& report, double h,
                     double tolerance, const std::function<bool(const std::string&, size_t)>& skip) {
    for (auto& [iname, t] : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    Tensor loss = forward();
    loss.backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto& [iname, t] : inputs) analytic.push_back(t.grad());

    bool ok = true;
    for (size_t ii = 0; ii < inputs.size(); ++ii) {
        auto& t = inputs[ii].second;
        for (size_t j = 0; j < t.data().size(); ++j) {
            if (skip && skip(inputs[ii].first, j)) continue;
            const double saved = t.data()[j];
            t.data()[j] = saved + h;
            const double fp = forward().item();
            t.data()[j] = saved - h;
            const double fm = forward().item();
            t.data()[j] = saved;
            const double numeric = (fp - fm) / (2 * h);
            const double a = analytic[ii][j];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1.0});
            report.max_rel_error = std::max(report.max_rel_error, rel);
            if (rel > tolerance) {
                report.failures.push_back({name, inputs[ii].first, j, a, numeric, rel});
                ok = false;
            }
        }
    }
    if (ok) report.passed.push_back(name);
    for (auto& [iname, t] : inputs) t.zero_grad();
    return ok;
}

namespace {

// scalarizes an arbitrary tensor with fixed weights so every output
// coordinate influences the checked gradient
Tensor reduce_weighted(const Tensor& t, Rng& rng) {
    const int n = static_cast<int>(t.numel());
    Tensor w = Tensor::uniform({1, n}, -1, 1, rng);
    return linear(reshape(t, {n}), w, Tensor::zeros({1}));
}

void check_primitive_ops(GradCheckReport& report, Rng& rng) {
    {
        Tensor a = Tensor::uniform({3, 4}, -1, 1, rng);
        Tensor b = Tensor::uniform({4, 2}, -1, 1, rng);
        Rng wr = rng.fork(1);
        check_gradients("matmul", {{"a", a}, {"b", b}},
                        [&] { Rng r = wr; return reduce_weighted(matmul(a, b), r); }, report);
    }
    {
        Tensor a = Tensor::uniform({3, 4}, -1, 1, rng);
        Rng wr = rng.fork(2);
        check_gradients("transpose", {{"a", a}},
                        [&] { Rng r = wr; return reduce_weighted(transpose(a), r); }, report);
    }
    for (int axis : {0, 1}) {
        Tensor x = Tensor::uniform({3, 4}, -2, 2, rng);
        Rng wr = rng.fork(3 + axis);
        check_gradients("softmax.axis" + std::to_string(axis), {{"x", x}},
                        [&, axis] { Rng r = wr; return reduce_weighted(softmax(x, axis), r); },
                        report);
    }
    for (int k : {1, 3}) {
        Tensor x = Tensor::uniform({2, 4, 4}, -1, 1, rng);
        Tensor w = Tensor::uniform({2, 2, k, k}, -1, 1, rng);
        Tensor b = Tensor::uniform({2}, -1, 1, rng);
        Rng wr = rng.fork(5 + k);
        check_gradients("conv2d.k" + std::to_string(k), {{"x", x}, {"w", w}, {"b", b}},
                        [&] { Rng r = wr; return reduce_weighted(conv2d(x, w, b), r); }, report);
    }
    {
        Tensor x = Tensor::uniform({3, 4, 4}, -1, 1, rng);
        Rng wr = rng.fork(8);
        check_gradients("gap", {{"x", x}},
                        [&] { Rng r = wr; return reduce_weighted(gap(x), r); }, report);
    }
    {
        Tensor x = Tensor::uniform({3, 3, 3}, -1, 1, rng);
        Rng wr = rng.fork(9);
        check_gradients("gmp", {{"x", x}},
                        [&] { Rng r = wr; return reduce_weighted(gmp(x), r); }, report);
    }
    {
        Tensor x = Tensor::uniform({2, 4, 4}, -1, 1, rng);
        Rng wr = rng.fork(10);
        check_gradients("avgpool2", {{"x", x}},
                        [&] { Rng r = wr; return reduce_weighted(avgpool2(x), r); }, report);
    }
    {
        Tensor x = Tensor::uniform({2, 4, 4}, -1, 1, rng);
        Rng wr = rng.fork(11);
        check_gradients("crop_mean", {{"x", x}},
                        [&] { Rng r = wr; return reduce_weighted(crop_mean(x, 1, 3, 0, 2), r); },
                        report);
    }
    {
        // norms bounded away from the eps guard
        Tensor v = Tensor::uniform({3}, 0.3, 1.0, rng);
        Tensor x = Tensor::uniform({3, 3, 3}, 0.3, 1.0, rng);
        Rng wr = rng.fork(12);
        check_gradients("cosine_map", {{"v", v}, {"x", x}},
                        [&] { Rng r = wr; return reduce_weighted(cosine_map(v, x), r); }, report);
    }
    {
        Tensor a = Tensor::uniform({3, 4}, -1, 1, rng);
        Tensor b = Tensor::uniform({3, 4}, -1, 1, rng);
        Rng wr = rng.fork(13);
        check_gradients("add", {{"a", a}, {"b", b}},
                        [&] { Rng r = wr; return reduce_weighted(add(a, b), r); }, report);
        Rng wr2 = rng.fork(14);
        Tensor big = Tensor::uniform({2, 3, 3}, -1, 1, rng);
        Tensor mask = Tensor::uniform({3, 3}, -1, 1, rng);
        check_gradients("add.broadcast", {{"big", big}, {"mask", mask}},
                        [&] { Rng r = wr2; return reduce_weighted(add(big, mask), r); }, report);
    }
    {
        Tensor a = Tensor::uniform({3, 4}, -1, 1, rng);
        Tensor b = Tensor::uniform({3, 4}, -1, 1, rng);
        Rng wr = rng.fork(15);
        check_gradients("hadamard", {{"a", a}, {"b", b}},
                        [&] { Rng r = wr; return reduce_weighted(hadamard(a, b), r); }, report);
        Rng wr2 = rng.fork(16);
        Tensor big = Tensor::uniform({2, 3, 3}, -1, 1, rng);
        Tensor mask = Tensor::uniform({3, 3}, -1, 1, rng);
        check_gradients("hadamard.broadcast", {{"big", big}, {"mask", mask}},
                        [&] { Rng r = wr2; return reduce_weighted(hadamard(mask, big), r); },
                        report);
    }
    {
        Tensor x = Tensor::uniform({3, 3}, -1, 1, rng);
        Rng wr = rng.fork(17);
        check_gradients("scale", {{"x", x}},
                        [&] { Rng r = wr; return reduce_weighted(scale(x, -1.7), r); }, report);
    }
    {
        Tensor x = Tensor::uniform({4}, -1, 1, rng);
        Tensor s = Tensor::uniform({1}, 0.5, 1.5, rng);
        Rng wr = rng.fork(18);
        check_gradients("mul_scalar", {{"x", x}, {"s", s}},
                        [&] { Rng r = wr; return reduce_weighted(mul_scalar(x, s), r); }, report);
    }
    {
        Tensor x = Tensor::uniform({3, 3}, -2, 2, rng);
        Rng wr = rng.fork(19);
        check_gradients("sigmoid", {{"x", x}},
                        [&] { Rng r = wr; return reduce_weighted(sigmoid(x), r); }, report);
    }
    {
        // inputs bounded away from the kink at 0; guard skips any that drift in
        Tensor x = Tensor::uniform({3, 3}, 0.1, 1.0, rng);
        for (size_t i = 0; i < x.data().size(); i += 2) x.data()[i] *= -1;
        Rng wr = rng.fork(20);
        check_gradients("relu", {{"x", x}},
                        [&] { Rng r = wr; return reduce_weighted(relu(x), r); }, report, 1e-5, 1e-4,
                        [&](const std::string&, size_t j) { return std::abs(x.data()[j]) < 1e-6; });
    }
    {
        Tensor x = Tensor::uniform({4}, 0.5, 2.0, rng);
        Rng wr = rng.fork(21);
        check_gradients("reciprocal", {{"x", x}},
                        [&] { Rng r = wr; return reduce_weighted(reciprocal(x), r); }, report);
    }
    {
        Tensor x = Tensor::uniform({5}, 0.3, 1.0, rng);
        Rng wr = rng.fork(24);
        check_gradients("l2_normalize", {{"x", x}},
                        [&] { Rng r = wr; return reduce_weighted(l2_normalize(x), r); }, report);
    }
    {
        Tensor x = Tensor::uniform({4}, -1, 1, rng);
        Tensor w = Tensor::uniform({3, 4}, -1, 1, rng);
        Tensor b = Tensor::uniform({3}, -1, 1, rng);
        Rng wr = rng.fork(22);
        check_gradients("linear", {{"x", x}, {"w", w}, {"b", b}},
                        [&] { Rng r = wr; return reduce_weighted(linear(x, w, b), r); }, report);
    }
    {
        Tensor logits = Tensor::uniform({3, 4}, -2, 2, rng);
        check_gradients("cross_entropy", {{"logits", logits}},
                        [&] { return cross_entropy(logits, {1, 3, 0}); }, report);
    }
    {
        Tensor pred = Tensor::uniform({3, 3}, 1.0, 2.0, rng);
        Tensor target = Tensor::uniform({3, 3}, -1.0, 0.5, rng);
        check_gradients("l1_loss", {{"pred", pred}}, [&] { return l1_loss(pred, target); }, report,
                        1e-5, 1e-4, [&](const std::string&, size_t j) {
                            return std::abs(pred.data()[j] - target.data()[j]) < 1e-6;
                        });
    }
    {
        Tensor a = Tensor::uniform({3}, -1, 1, rng);
        Tensor b = Tensor::uniform({3}, -1, 1, rng);
        Tensor c = Tensor::uniform({2}, -1, 1, rng);
        Rng wr = rng.fork(23);
        check_gradients("stack_concat_reshape", {{"a", a}, {"b", b}, {"c", c}},
                        [&] {
                            Rng r = wr;
                            Tensor rows = stack_rows({a, b});
                            Tensor flat = concat({reshape(rows, {6}), c});
                            return reduce_weighted(flat, r);
                        },
                        report);
    }
}

void check_modules(GradCheckReport& report, Rng& rng) {
    {
        Rng init = rng.fork(100);
        CouplingParams params = CouplingParams::init(3, 2, init);
        // give proj_out non-zero values so its gradient path is exercised
        Tensor wout = Tensor::uniform({3, 2, 1, 1}, -0.5, 0.5, init);
        params.wout = wout;
        Tensor x_q = Tensor::uniform({3, 2, 2}, 0.2, 1.0, init);
        Tensor x_s = Tensor::uniform({3, 2, 2}, 0.2, 1.0, init);
        std::vector<std::pair<std::string, Tensor>> inputs = {
            {"wq", params.wq}, {"bq", params.bq}, {"wk", params.wk},   {"bk", params.bk},
            {"wv", params.wv}, {"bv", params.bv}, {"wout", params.wout}, {"bout", params.bout},
            {"x_q", x_q},      {"x_s", x_s}};
        Rng wr = rng.fork(101);
        check_gradients("coupling_forward", inputs,
                        [&] {
                            Rng r = wr;
                            CoupledFeature out = coupling_forward(x_q, x_s, params, true, true);
                            return add(reduce_weighted(out.feature, r),
                                       reduce_weighted(out.attention, r));
                        },
                        report);
    }
    {
        Rng init = rng.fork(102);
        Tensor feat = Tensor::uniform({3, 2, 2}, 0.2, 1.0, init);
        Rng wr = rng.fork(103);
        check_gradients("intra_dam", {{"feat", feat}},
                        [&] {
                            Rng r = wr;
                            ImagePrototype p = intra_dam(feat, 1.0);
                            return add(reduce_weighted(p.v, r), reduce_weighted(p.weights, r));
                        },
                        report);
    }
    for (bool normalize : {false, true}) {
        Rng init = rng.fork(104 + normalize);
        InterDamParams params = InterDamParams::init(4, init);
        std::vector<Tensor> vs = {Tensor::uniform({4}, -1, 1, init),
                                  Tensor::uniform({4}, -1, 1, init),
                                  Tensor::uniform({4}, -1, 1, init)};
        Rng wr = rng.fork(106 + normalize);
        check_gradients(
            normalize ? "inter_dam.normalized" : "inter_dam",
            {{"v0", vs[0]}, {"v1", vs[1]}, {"v2", vs[2]}, {"fc_w", params.fc_weight},
             {"fc_b", params.fc_bias}},
            [&] {
                Rng r = wr;
                std::vector<ImagePrototype> protos;
                for (const auto& v : vs)
                    protos.push_back({v, Tensor::full({1, 1}, 1.0), 0});
                ClassPrototype cp = inter_dam(protos, params, normalize);
                Tensor loss = reduce_weighted(cp.v, r);
                for (const auto& c : cp.contributions) loss = add(loss, scale(c, 0.25));
                return loss;
            },
            report);
    }
    {
        Rng init = rng.fork(108);
        InterDamParams params = InterDamParams::init(3, init);
        CouplingParams cparams = CouplingParams::init(3, 2, init);
        cparams.wout = Tensor::uniform({3, 2, 1, 1}, -0.5, 0.5, init);
        Tensor x_q = Tensor::uniform({3, 2, 2}, 0.2, 1.0, init);
        std::vector<Tensor> sup = {Tensor::uniform({3, 2, 2}, 0.2, 1.0, init),
                                   Tensor::uniform({3, 2, 2}, 0.2, 1.0, init)};
        AggregationOptions opt;
        Rng wr = rng.fork(109);
        check_gradients("aggregate_prototypes",
                        {{"x_q", x_q}, {"s0", sup[0]}, {"s1", sup[1]},
                         {"fc_w", params.fc_weight}, {"fc_b", params.fc_bias}},
                        [&] {
                            Rng r = wr;
                            std::map<int, std::vector<CoupledFeature>> coupled;
                            for (const auto& s : sup) {
                                CoupledFeature c = coupling_forward(x_q, s, cparams, true, true);
                                c.class_id = 5;
                                coupled[5].push_back(std::move(c));
                            }
                            auto protos = aggregate_prototypes(coupled, opt, params);
                            return reduce_weighted(protos.at(5).v, r);
                        },
                        report);
    }
    {
        Rng init = rng.fork(110);
        BackboneParams params = BackboneParams::init(3, init);
        Tensor input = Tensor::uniform({4, 8, 8}, 0.0, 1.0, init);
        Rng wr = rng.fork(111);
        check_gradients("backbone_forward",
                        {{"input", input}, {"w1", params.w1}, {"b1", params.b1},
                         {"w2", params.w2}, {"b2", params.b2}, {"w3", params.w3},
                         {"b3", params.b3}},
                        [&] {
                            Rng r = wr;
                            return reduce_weighted(backbone_forward_raw(input, params), r);
                        },
                        report);
    }
    {
        Rng init = rng.fork(112);
        HeadParams heads = HeadParams::init(4, 3, init);
        Tensor proto0 = Tensor::uniform({4}, -1, 1, init);
        Tensor proto1 = Tensor::uniform({4}, -1, 1, init);
        Tensor roi0 = Tensor::uniform({4}, -1, 1, init);
        Tensor roi1 = Tensor::uniform({4}, -1, 1, init);
        check_gradients(
            "detection_forward+total_loss",
            {{"proto0", proto0}, {"proto1", proto1}, {"roi0", roi0}, {"roi1", roi1},
             {"cls_w", heads.cls_weight}, {"cls_b", heads.cls_bias},
             {"bg_w", heads.bg_weight}, {"bg_b", heads.bg_bias},
             {"reg_w", heads.reg_weight}, {"reg_b", heads.reg_bias},
             {"meta_w", heads.meta_weight}, {"meta_b", heads.meta_bias}},
            [&] {
                std::map<int, ClassPrototype> protos;
                protos[0] = {proto0, 0, {}};
                protos[2] = {proto1, 2, {}};
                std::vector<RoI> rois(2);
                rois[0].feature = roi0;
                rois[0].label = 2;
                rois[0].positive = true;
                rois[0].reg_target = {0.1, -0.2, 0.05, 0.0};
                rois[1].feature = roi1;
                DetectionOutputs out = detection_forward(rois, protos, heads);
                // labels: roster index of class 2 is 1; background index 2
                return total_loss(out.logits, {1, 2}, {out.deltas[0][1]}, {rois[0].reg_target},
                                  meta_logits(protos, heads), {0, 2}, 1.0);
            },
            report);
    }
}

void check_end2end(GradCheckReport& report, Rng& rng) {
    // one class, one shot, one positive RoI plus a background RoI
    ModelConfig config;
    config.channels = 5;
    config.embed_dim = 3;
    config.num_classes = 2;
    Model model = Model::init(config, rng.next());
    // zero-initialized proj_out would hide the coupling path
    Rng init = rng.fork(200);
    model.coupling.wout.data() = Tensor::uniform({5, 3, 1, 1}, -0.4, 0.4, init).data();

    Rng data = rng.fork(201);
    Tensor query = Tensor::uniform({3, 16, 16}, 0.0, 1.0, data);
    SupportInstance support;
    support.image = Tensor::uniform({3, 16, 16}, 0.0, 1.0, data);
    support.mask = Tensor::zeros({1, 16, 16});
    for (int y = 4; y < 12; ++y)
        for (int x = 4; x < 12; ++x) support.mask.data()[y * 16 + x] = 1.0;
    support.class_id = 1;

    std::vector<std::pair<std::string, Tensor>> inputs;
    for (auto& [name, t] : model.registry.entries()) inputs.emplace_back(name, t);

    check_gradients("end2end_episode_loss", inputs,
                    [&] {
                        Tensor qfeat = model.query_features(query);
                        std::map<int, std::vector<Tensor>> sfeats;
                        sfeats[1].push_back(model.support_features(support));
                        auto protos = model.build_prototypes(qfeat, sfeats);
                        std::vector<BoxAnnotation> anns = {{Box{3, 3, 11, 11}, 1}};
                        std::vector<RoI> rois = extract_roi_features(qfeat, anns, 16, 16);
                        RoI neg;
                        neg.box = Box{10, 10, 16, 16};
                        neg.feature = roi_feature(qfeat, neg.box, 16, 16);
                        rois.push_back(neg);
                        DetectionOutputs out = detection_forward(rois, protos, model.heads);
                        return total_loss(out.logits, {0, 1}, {out.deltas[0][0]},
                                          {rois[0].reg_target}, meta_logits(protos, model.heads),
                                          {1}, model.config.lambda);
                    },
                    report);
}

}  // namespace

GradCheckReport run_grad_check_suite(GradCheckScope scope, uint64_t seed) {
    GradCheckReport report;
    Rng rng(seed);
    if (scope == GradCheckScope::ops || scope == GradCheckScope::all)
        check_primitive_ops(report, rng);
    if (scope == GradCheckScope::modules || scope == GradCheckScope::all)
        check_modules(report, rng);
    if (scope == GradCheckScope::end2end || scope == GradCheckScope::all)
        check_end2end(report, rng);
    return report;
}

}  // namespace protodet
