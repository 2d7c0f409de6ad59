#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "protodet/detector.hpp"

using namespace protodet;

namespace {

std::map<int, ClassPrototype> two_prototypes(uint64_t seed, int c) {
    Rng rng(seed);
    std::map<int, ClassPrototype> protos;
    protos[1] = {Tensor::uniform({c}, -1, 1, rng), 1, {}};
    protos[4] = {Tensor::uniform({c}, -1, 1, rng), 4, {}};
    return protos;
}

HeadParams zero_heads(int c, int num_classes) {
    Rng rng(1);
    HeadParams h = HeadParams::init(c, num_classes, rng);
    for (Tensor* t : {&h.proto_weight, &h.proto_bias, &h.cls_weight, &h.cls_bias, &h.bg_weight,
                      &h.bg_bias, &h.reg_weight, &h.reg_bias, &h.meta_weight, &h.meta_bias})
        std::fill(t->data().begin(), t->data().end(), 0.0);
    return h;
}

}  // namespace

TEST_CASE("backbone zero input gives zero features") {
    Rng rng(3);
    BackboneParams params = BackboneParams::init(8, rng);
    Tensor image = Tensor::zeros({3, 16, 16});
    Tensor feat = backbone_forward(image, nullptr, params);
    CHECK(feat.shape() == Shape{8, 2, 2});
    for (double v : feat.data()) CHECK(v == 0.0);
}

TEST_CASE("backbone stride arithmetic and divisibility") {
    Rng rng(5);
    BackboneParams params = BackboneParams::init(4, rng);
    Tensor image = Tensor::uniform({3, 64, 64}, 0, 1, rng);
    CHECK(backbone_forward(image, nullptr, params).shape() == Shape{4, 8, 8});
    CHECK_THROWS_AS(backbone_forward(Tensor::zeros({3, 20, 20}), nullptr, params),
                    std::invalid_argument);
    CHECK_THROWS_AS(backbone_forward(Tensor::zeros({4, 16, 16}), nullptr, params),
                    std::invalid_argument);
}

TEST_CASE("mask channel changes the support branch only through shared weights") {
    Rng rng(7);
    BackboneParams params = BackboneParams::init(4, rng);
    Tensor image = Tensor::uniform({3, 16, 16}, 0, 1, rng);
    Tensor mask = Tensor::zeros({1, 16, 16});
    for (int i = 0; i < 64; ++i) mask.data()[i] = 1.0;
    Tensor with_mask = backbone_forward(image, &mask, params);
    Tensor without = backbone_forward(image, nullptr, params);
    bool differs = false;
    for (size_t i = 0; i < with_mask.data().size(); ++i)
        differs = differs || with_mask.data()[i] != without.data()[i];
    CHECK(differs);

    // weight sharing: mutating the backbone moves both branches
    Tensor before_q = backbone_forward(image, nullptr, params);
    params.w1.data()[0] += 0.25;
    Tensor after_q = backbone_forward(image, nullptr, params);
    Tensor after_s = backbone_forward(image, &mask, params);
    bool q_moved = false;
    for (size_t i = 0; i < after_q.data().size(); ++i)
        q_moved = q_moved || after_q.data()[i] != before_q.data()[i];
    CHECK(q_moved);
    CHECK(after_s.shape() == after_q.shape());
    CHECK_THROWS_AS(backbone_forward(image, &with_mask, params), std::invalid_argument);
}

TEST_CASE("roi features: full map crop equals gap") {
    Rng rng(11);
    Tensor feat = Tensor::uniform({4, 8, 8}, -1, 1, rng);
    Tensor full = roi_feature(feat, Box{0, 0, 64, 64}, 64, 64);
    CHECK(full.data() == gap(feat).data());
}

TEST_CASE("roi features: constant map and hand-set crops") {
    Tensor feat = Tensor::full({3, 8, 8}, 1.75);
    Tensor r = roi_feature(feat, Box{10, 20, 30, 40}, 64, 64);
    for (double v : r.data()) CHECK(v == 1.75);

    // two-cell crop of a hand-set map: cells (0,0) and (0,1)
    Tensor small = Tensor::zeros({1, 2, 2});
    small.data() = {1, 3, 5, 7};
    Tensor two = roi_feature(small, Box{0, 0, 16, 8}, 16, 16);
    CHECK(two.item() == 2.0);

    // degenerate box clamps to the nearest single cell
    Tensor deg = roi_feature(small, Box{100, 100, 101, 101}, 16, 16);
    CHECK(deg.item() == 7.0);
}

TEST_CASE("extract_roi_features labels positives") {
    Rng rng(13);
    Tensor feat = Tensor::uniform({4, 8, 8}, -1, 1, rng);
    std::vector<BoxAnnotation> anns = {{Box{0, 0, 24, 24}, 3}, {Box{32, 32, 60, 60}, 5}};
    auto rois = extract_roi_features(feat, anns, 64, 64);
    REQUIRE(rois.size() == 2);
    CHECK(rois[0].label == 3);
    CHECK(rois[0].positive);
    CHECK(rois[1].label == 5);
    for (double t : rois[0].reg_target) CHECK(t == 0.0);
}

TEST_CASE("channel_attention values") {
    Tensor roi = Tensor::from_data({3}, {1, -2, 4});
    CHECK(channel_attention(roi, Tensor::zeros({3})).data() ==
          std::vector<double>{0.5, -1.0, 2.0});
    Tensor hot = channel_attention(roi, Tensor::full({3}, 100.0));
    for (int i = 0; i < 3; ++i) CHECK(hot.data()[i] == doctest::Approx(roi.data()[i]).epsilon(1e-12));
    Tensor cold = channel_attention(roi, Tensor::full({3}, -100.0));
    for (double v : cold.data()) CHECK(std::abs(v) <= 1e-12);
    CHECK_THROWS_AS(channel_attention(roi, Tensor::zeros({4})), std::invalid_argument);
}

TEST_CASE("detection_forward uniform logits under zero heads") {
    Rng rng(17);
    HeadParams heads = zero_heads(6, 8);
    auto protos = two_prototypes(19, 6);
    std::vector<RoI> rois(2);
    rois[0].feature = Tensor::uniform({6}, -1, 1, rng);
    rois[1].feature = rois[0].feature;
    DetectionOutputs out = detection_forward(rois, protos, heads);
    REQUIRE(out.roster == std::vector<int>{1, 4});
    Tensor probs = softmax(out.logits[0], 0);
    for (double p : probs.data()) CHECK(p == doctest::Approx(1.0 / 3).epsilon(1e-12));
    // identical RoIs give identical outputs
    CHECK(out.logits[0].data() == out.logits[1].data());
    CHECK(out.deltas[0][0].data() == out.deltas[1][0].data());
}

TEST_CASE("total_loss values") {
    // uniform logits over 5 entries, exact deltas, uniform meta over 8
    std::vector<Tensor> logits = {Tensor::zeros({5}), Tensor::zeros({5})};
    std::vector<Tensor> deltas = {Tensor::zeros({4})};
    std::vector<std::array<double, 4>> targets = {{0, 0, 0, 0}};
    Tensor proto_logits = Tensor::zeros({3, 8});
    Tensor loss = total_loss(logits, {0, 4}, deltas, targets, proto_logits, {0, 1, 2}, 1.0);
    CHECK(std::abs(loss.item() - (std::log(5.0) + std::log(8.0))) <= 1e-12);

    // lambda zero removes the meta term
    Tensor no_meta = total_loss(logits, {0, 4}, deltas, targets, proto_logits, {0, 1, 2}, 0.0);
    CHECK(std::abs(no_meta.item() - std::log(5.0)) <= 1e-12);

    // saturated correct predictions drive the loss to zero
    Tensor sat = Tensor::from_data({3}, {50, -50, -50});
    std::vector<Tensor> sat_logits = {sat};
    Tensor sat_meta = Tensor::from_data({1, 2}, {50, -50});
    Tensor tiny = total_loss(sat_logits, {0}, deltas, targets, sat_meta, {0}, 1.0);
    CHECK(tiny.item() < 1e-6);
    CHECK(tiny.item() >= 0.0);

    CHECK_THROWS_AS(total_loss(logits, {0, 9}, deltas, targets, proto_logits, {0, 1, 2}, 1.0),
                    std::invalid_argument);
    CHECK_THROWS_AS(total_loss(logits, {0, 4}, deltas, targets, proto_logits, {0, 1, 2}, -0.5),
                    std::invalid_argument);
}

TEST_CASE("nms keeps the higher-scored of identical boxes and spares disjoint ones") {
    Box a{0, 0, 10, 10};
    Box b{20, 20, 30, 30};
    std::vector<Detection> dets = {{a, 0, 0.8}, {a, 0, 0.9}, {b, 0, 0.3}, {a, 1, 0.5}};
    auto kept = nms(dets, 0.5);
    REQUIRE(kept.size() == 3);
    CHECK(kept[0].score == 0.9);
    CHECK(kept[1].class_id == 1);   // other class untouched by suppression
    CHECK(kept[2].score == 0.3);    // disjoint box survives

    // tie on score: the earlier box wins
    std::vector<Detection> tie = {{a, 0, 0.7}, {a, 0, 0.7}};
    auto kept_tie = nms(tie, 0.5);
    REQUIRE(kept_tie.size() == 1);
}

TEST_CASE("candidate grid covers every generator object size") {
    const auto grid = candidate_grid(64, 64);
    CHECK(!grid.empty());
    // every interior object of the discrete sizes has a candidate at IoU >= 0.5
    for (double size : {24.0, 32.0, 44.0}) {
        Box gt{20.5, 17.25, 20.5 + size, 17.25 + size};
        if (gt.x2 > 63 || gt.y2 > 63) gt = Box{2, 2, 2 + size, 2 + size};
        double best = 0;
        for (const auto& c : grid) best = std::max(best, iou(c, gt));
        CHECK(best >= 0.5);
    }
    Box bar{11.0, 30.0, 51.0, 50.0};
    double best = 0;
    for (const auto& c : grid) best = std::max(best, iou(c, bar));
    CHECK(best >= 0.5);
}

TEST_CASE("predict returns nothing when the background dominates") {
    ModelConfig cfg;
    cfg.channels = 8;
    cfg.embed_dim = 4;
    cfg.num_classes = 4;
    Model model = Model::init(cfg, 7);
    std::fill(model.heads.bg_bias.data().begin(), model.heads.bg_bias.data().end(), 25.0);
    Rng rng(23);
    Tensor image = Tensor::uniform({3, 32, 32}, 0, 1, rng);
    std::map<int, std::vector<SupportInstance>> supports;
    for (int c = 0; c < 2; ++c) {
        SupportInstance s;
        s.image = Tensor::uniform({3, 32, 32}, 0, 1, rng);
        s.mask = Tensor::zeros({1, 32, 32});
        for (int i = 0; i < 256; ++i) s.mask.data()[i] = 1.0;
        s.class_id = c;
        supports[c].push_back(std::move(s));
    }
    auto dets = predict(model, image, supports, 0.05, 0.5);
    CHECK(dets.empty());
}

TEST_CASE("prototype specificity: different queries change scores for the same roi vector") {
    ModelConfig cfg;
    cfg.channels = 8;
    cfg.embed_dim = 4;
    cfg.num_classes = 4;
    Model model = Model::init(cfg, 11);
    // non-zero output projection so the coupling actually injects
    Rng wr(13);
    model.coupling.wout.data() = Tensor::uniform({8, 4, 1, 1}, -0.5, 0.5, wr).data();

    Rng rng(29);
    std::map<int, std::vector<Tensor>> sfeats;
    sfeats[0] = {Tensor::uniform({8, 2, 2}, 0.1, 1, rng)};
    sfeats[2] = {Tensor::uniform({8, 2, 2}, 0.1, 1, rng)};
    Tensor q1 = Tensor::uniform({8, 2, 2}, 0.1, 1, rng);
    Tensor q2 = Tensor::uniform({8, 2, 2}, 0.1, 1, rng);
    auto protos1 = model.build_prototypes(q1, sfeats);
    auto protos2 = model.build_prototypes(q2, sfeats);

    RoI roi;
    roi.feature = Tensor::uniform({8}, -1, 1, rng);
    auto out1 = detection_forward({roi}, protos1, model.heads);
    auto out2 = detection_forward({roi}, protos2, model.heads);
    bool differs = false;
    for (int i = 0; i < 2; ++i)
        differs = differs || out1.logits[0].data()[i] != out2.logits[0].data()[i];
    CHECK(differs);
}

TEST_CASE("delta decoding round-trips the encoding") {
    Box roi{10, 20, 34, 44};
    Box target{12, 18, 38, 46};
    auto d = encode_deltas(roi, target);
    Box decoded = decode_deltas(roi, d, 64, 64);
    CHECK(decoded.x1 == doctest::Approx(target.x1).epsilon(1e-9));
    CHECK(decoded.y1 == doctest::Approx(target.y1).epsilon(1e-9));
    CHECK(decoded.x2 == doctest::Approx(target.x2).epsilon(1e-9));
    CHECK(decoded.y2 == doctest::Approx(target.y2).epsilon(1e-9));
}
