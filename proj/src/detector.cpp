#include "protodet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace protodet {

BackboneParams BackboneParams::init(int out_channels, Rng& rng) {
    BackboneParams p;
    p.out_channels = out_channels;
    // relu-gain bound keeps feature magnitude roughly constant across stages
    const auto bound = [](int fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); };
    p.w1 = Tensor::uniform({16, 4, 3, 3}, -bound(4 * 9), bound(4 * 9), rng);
    p.b1 = Tensor::zeros({16});
    p.w2 = Tensor::uniform({32, 16, 3, 3}, -bound(16 * 9), bound(16 * 9), rng);
    p.b2 = Tensor::zeros({32});
    p.w3 = Tensor::uniform({out_channels, 32, 3, 3}, -bound(32 * 9), bound(32 * 9), rng);
    p.b3 = Tensor::zeros({out_channels});
    return p;
}

void BackboneParams::register_into(ParamRegistry& registry, const std::string& prefix) {
    registry.add(prefix + ".conv1.weight", w1);
    registry.add(prefix + ".conv1.bias", b1);
    registry.add(prefix + ".conv2.weight", w2);
    registry.add(prefix + ".conv2.bias", b2);
    registry.add(prefix + ".conv3.weight", w3);
    registry.add(prefix + ".conv3.bias", b3);
}

HeadParams HeadParams::init(int channels, int num_classes, Rng& rng) {
    HeadParams p;
    p.num_classes = num_classes;
    const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
    p.proto_weight = Tensor::uniform({channels, channels}, -bound, bound, rng);
    p.proto_bias = Tensor::zeros({channels});
    p.cls_weight = Tensor::uniform({1, channels}, -bound, bound, rng);
    p.cls_bias = Tensor::zeros({1});
    p.bg_weight = Tensor::uniform({1, channels}, -bound, bound, rng);
    p.bg_bias = Tensor::zeros({1});
    p.reg_weight = Tensor::uniform({4, channels}, -bound, bound, rng);
    p.reg_bias = Tensor::zeros({4});
    p.meta_weight = Tensor::uniform({num_classes, channels}, -bound, bound, rng);
    p.meta_bias = Tensor::zeros({num_classes});
    return p;
}

void HeadParams::register_into(ParamRegistry& registry, const std::string& prefix) {
    registry.add(prefix + ".proto.weight", proto_weight);
    registry.add(prefix + ".proto.bias", proto_bias);
    registry.add(prefix + ".cls.weight", cls_weight);
    registry.add(prefix + ".cls.bias", cls_bias);
    registry.add(prefix + ".bg.weight", bg_weight);
    registry.add(prefix + ".bg.bias", bg_bias);
    registry.add(prefix + ".reg.weight", reg_weight);
    registry.add(prefix + ".reg.bias", reg_bias);
    registry.add(prefix + ".meta.weight", meta_weight);
    registry.add(prefix + ".meta.bias", meta_bias);
}

Tensor backbone_forward_raw(const Tensor& input4, const BackboneParams& params) {
    if (input4.rank() != 3 || input4.dim(0) != 4)
        throw std::invalid_argument("backbone: expected [4,H,W] input, got " +
                                    shape_str(input4.shape()));
    if (input4.dim(1) % 8 || input4.dim(2) % 8)
        throw std::invalid_argument("backbone: spatial dims must be divisible by 8, got " +
                                    shape_str(input4.shape()));
    Tensor h1 = avgpool2(relu(conv2d(input4, params.w1, params.b1)));
    Tensor h2 = avgpool2(relu(conv2d(h1, params.w2, params.b2)));
    return avgpool2(relu(conv2d(h2, params.w3, params.b3)));
}

Tensor backbone_forward(const Tensor& image, const Tensor* mask, const BackboneParams& params) {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw std::invalid_argument("backbone: expected [3,H,W] image, got " +
                                    shape_str(image.shape()));
    const int h = image.dim(1), w = image.dim(2);
    if (mask && (mask->rank() != 3 || mask->dim(0) != 1 || mask->dim(1) != h || mask->dim(2) != w))
        throw std::invalid_argument("backbone: mask " + shape_str(mask->shape()) +
                                    " does not match image " + shape_str(image.shape()));
    std::vector<double> data(static_cast<size_t>(4) * h * w, 0.0);
    std::copy(image.data().begin(), image.data().end(), data.begin());
    if (mask)
        std::copy(mask->data().begin(), mask->data().end(),
                  data.begin() + static_cast<size_t>(3) * h * w);
    return backbone_forward_raw(Tensor::from_data({4, h, w}, std::move(data)), params);
}

Tensor roi_feature(const Tensor& feat, const Box& box, int image_w, int image_h, int stride) {
    const int fh = feat.dim(1), fw = feat.dim(2);
    (void)image_w;
    (void)image_h;
    int y0 = static_cast<int>(std::floor(box.y1 / stride));
    int y1 = static_cast<int>(std::ceil(box.y2 / stride));
    int x0 = static_cast<int>(std::floor(box.x1 / stride));
    int x1 = static_cast<int>(std::ceil(box.x2 / stride));
    y0 = std::clamp(y0, 0, fh - 1);
    x0 = std::clamp(x0, 0, fw - 1);
    y1 = std::clamp(y1, y0 + 1, fh);
    x1 = std::clamp(x1, x0 + 1, fw);
    return crop_mean(feat, y0, y1, x0, x1);
}

std::vector<RoI> extract_roi_features(const Tensor& feat, const std::vector<BoxAnnotation>& boxes,
                                      int image_w, int image_h, int stride) {
    std::vector<RoI> out;
    out.reserve(boxes.size());
    for (const auto& ann : boxes) {
        RoI roi;
        roi.box = ann.box;
        roi.feature = roi_feature(feat, ann.box, image_w, image_h, stride);
        roi.label = ann.class_id;
        roi.positive = ann.class_id >= 0;
        roi.reg_target = {0, 0, 0, 0};  // positives are the ground-truth boxes themselves
        out.push_back(std::move(roi));
    }
    return out;
}

Tensor channel_attention(const Tensor& roi, const Tensor& prototype) {
    if (roi.shape() != prototype.shape())
        throw std::invalid_argument("channel_attention: length mismatch " + shape_str(roi.shape()) +
                                    " vs " + shape_str(prototype.shape()));
    return hadamard(roi, sigmoid(prototype));
}

DetectionOutputs detection_forward(const std::vector<RoI>& rois,
                                   const std::map<int, ClassPrototype>& prototypes,
                                   const HeadParams& heads) {
    DetectionOutputs out;
    out.roster.reserve(prototypes.size());
    for (const auto& [class_id, proto] : prototypes) out.roster.push_back(class_id);

    // transformed and squashed prototypes shared across RoIs
    std::vector<Tensor> squashed;
    squashed.reserve(out.roster.size());
    for (int class_id : out.roster)
        squashed.push_back(sigmoid(
            linear(prototypes.at(class_id).v, heads.proto_weight, heads.proto_bias)));

    out.logits.reserve(rois.size());
    out.deltas.reserve(rois.size());
    for (const auto& roi : rois) {
        // the matching path reads a unit-norm RoI vector so class contrast is
        // scale-free; the background head keeps the raw vector for objectness
        Tensor unit = l2_normalize(roi.feature);
        std::vector<Tensor> class_logits;
        std::vector<Tensor> class_deltas;
        class_logits.reserve(out.roster.size() + 1);
        class_deltas.reserve(out.roster.size());
        for (size_t c = 0; c < out.roster.size(); ++c) {
            Tensor attended = hadamard(unit, squashed[c]);
            class_logits.push_back(linear(attended, heads.cls_weight, heads.cls_bias));
            class_deltas.push_back(linear(attended, heads.reg_weight, heads.reg_bias));
        }
        class_logits.push_back(linear(roi.feature, heads.bg_weight, heads.bg_bias));
        out.logits.push_back(concat(class_logits));
        out.deltas.push_back(std::move(class_deltas));
    }
    return out;
}

Tensor meta_logits(const std::map<int, ClassPrototype>& prototypes, const HeadParams& heads) {
    std::vector<Tensor> rows;
    rows.reserve(prototypes.size());
    for (const auto& [class_id, proto] : prototypes)
        rows.push_back(linear(proto.v, heads.meta_weight, heads.meta_bias));
    return stack_rows(rows);
}

Tensor total_loss(const std::vector<Tensor>& cls_logits, const std::vector<int>& cls_labels,
                  const std::vector<Tensor>& positive_deltas,
                  const std::vector<std::array<double, 4>>& reg_targets, const Tensor& proto_logits,
                  const std::vector<int>& proto_labels, double lambda) {
    if (cls_logits.empty()) throw std::invalid_argument("total_loss: no RoIs");
    if (cls_logits.size() != cls_labels.size())
        throw std::invalid_argument("total_loss: label count mismatch");
    if (positive_deltas.size() != reg_targets.size())
        throw std::invalid_argument("total_loss: reg target count mismatch");
    if (lambda < 0) throw std::invalid_argument("total_loss: lambda must be non-negative");

    Tensor loss = cross_entropy(stack_rows(cls_logits), cls_labels);
    if (!positive_deltas.empty()) {
        std::vector<double> targets;
        targets.reserve(reg_targets.size() * 4);
        for (const auto& t : reg_targets) targets.insert(targets.end(), t.begin(), t.end());
        Tensor pred = stack_rows(positive_deltas);
        Tensor target = Tensor::from_data({static_cast<int>(reg_targets.size()), 4},
                                          std::move(targets));
        loss = add(loss, l1_loss(pred, target));
    }
    loss = add(loss, scale(cross_entropy(proto_logits, proto_labels), lambda));
    return loss;
}

std::vector<Box> candidate_grid(int image_w, int image_h, int stride) {
    // shapes match the generator's discrete object sizes: squares at the
    // 3 scales plus 2:1 bars at the same scales
    static const std::array<std::pair<double, double>, 6> kShapes = {{
        {24, 24}, {32, 32}, {44, 44}, {30, 15}, {40, 20}, {54, 27},
    }};
    std::vector<Box> out;
    for (int cy = stride / 2; cy < image_h; cy += stride)
        for (int cx = stride / 2; cx < image_w; cx += stride)
            for (const auto& [w, h] : kShapes) {
                Box b{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
                b.x1 = std::max(b.x1, 0.0);
                b.y1 = std::max(b.y1, 0.0);
                b.x2 = std::min(b.x2, static_cast<double>(image_w));
                b.y2 = std::min(b.y2, static_cast<double>(image_h));
                if (b.width() >= 8 && b.height() >= 8) out.push_back(b);
            }
    return out;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh) {
    std::vector<size_t> order(dets.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return dets[a].score > dets[b].score; });
    std::vector<Detection> kept;
    std::vector<bool> suppressed(dets.size(), false);
    for (size_t oi = 0; oi < order.size(); ++oi) {
        const size_t i = order[oi];
        if (suppressed[i]) continue;
        kept.push_back(dets[i]);
        for (size_t oj = oi + 1; oj < order.size(); ++oj) {
            const size_t j = order[oj];
            if (suppressed[j] || dets[j].class_id != dets[i].class_id) continue;
            if (iou(dets[i].box, dets[j].box) >= iou_thresh) suppressed[j] = true;
        }
    }
    return kept;
}

Model Model::init(const ModelConfig& config, uint64_t seed) {
    Model m;
    m.config = config;
    Rng rng(Rng::mix(seed, 0x6d6f64656cULL));
    m.backbone = BackboneParams::init(config.channels, rng);
    m.coupling = CouplingParams::init(config.channels, config.embed_dim, rng);
    m.inter = InterDamParams::init(config.channels, rng);
    m.heads = HeadParams::init(config.channels, config.num_classes, rng);
    m.backbone.register_into(m.registry, "backbone");
    m.coupling.register_into(m.registry, "coupling");
    m.inter.register_into(m.registry, "inter");
    m.heads.register_into(m.registry, "heads");
    return m;
}

Model Model::clone() const {
    Model copy = Model::init(config, 0);
    for (size_t i = 0; i < registry.size(); ++i)
        copy.registry.entries()[i].second.data() = registry.entries()[i].second.data();
    return copy;
}

Tensor Model::query_features(const Tensor& image) const {
    return backbone_forward(image, nullptr, backbone);
}

Tensor Model::support_features(const SupportInstance& instance) const {
    return backbone_forward(instance.image, &instance.mask, backbone);
}

std::map<int, std::vector<Tensor>> Model::support_feature_map(
    const std::map<int, std::vector<SupportInstance>>& supports) const {
    std::map<int, std::vector<Tensor>> out;
    for (const auto& [class_id, instances] : supports) {
        auto& feats = out[class_id];
        feats.reserve(instances.size());
        for (const auto& inst : instances) feats.push_back(support_features(inst));
    }
    return out;
}

std::map<int, std::vector<CoupledFeature>> Model::couple_supports(
    const Tensor& query_feat, const std::map<int, std::vector<Tensor>>& support_feats) const {
    std::map<int, std::vector<CoupledFeature>> out;
    for (const auto& [class_id, feats] : support_feats) {
        auto& coupled = out[class_id];
        coupled.reserve(feats.size());
        for (const auto& f : feats) {
            if (config.use_coupling) {
                CoupledFeature c = coupling_forward(query_feat, f, coupling, config.use_condition,
                                                    config.clamp_condition);
                c.class_id = class_id;
                coupled.push_back(std::move(c));
            } else {
                CoupledFeature c;
                c.feature = f;
                c.condition = Tensor::full({f.dim(1), f.dim(2)}, 1.0);
                c.attention = Tensor::full({f.dim(1) * f.dim(2), 1}, 1.0);
                c.class_id = class_id;
                coupled.push_back(std::move(c));
            }
        }
    }
    return out;
}

AggregationOptions Model::aggregation_options() const {
    AggregationOptions opt;
    opt.use_intra = config.use_intra;
    opt.use_inter = config.use_inter;
    opt.img_proto = config.img_proto;
    opt.alpha = config.alpha;
    opt.normalize_contributions = config.normalize_contributions;
    return opt;
}

std::map<int, ClassPrototype> Model::build_prototypes(
    const Tensor& query_feat, const std::map<int, std::vector<Tensor>>& support_feats) const {
    return aggregate_prototypes(couple_supports(query_feat, support_feats), aggregation_options(),
                                inter);
}

std::vector<Detection> predict_with_features(const Model& model, const Tensor& query_image,
                                             const std::map<int, std::vector<Tensor>>& support_feats,
                                             double score_thresh, double nms_iou) {
    const int image_h = query_image.dim(1), image_w = query_image.dim(2);
    Tensor qfeat = model.query_features(query_image);
    auto prototypes = model.build_prototypes(qfeat, support_feats);

    const auto candidates = candidate_grid(image_w, image_h);
    std::vector<RoI> rois;
    rois.reserve(candidates.size());
    for (const auto& box : candidates) {
        RoI roi;
        roi.box = box;
        roi.feature = roi_feature(qfeat, box, image_w, image_h);
        rois.push_back(std::move(roi));
    }
    DetectionOutputs outputs = detection_forward(rois, prototypes, model.heads);

    std::vector<Detection> raw;
    for (size_t r = 0; r < rois.size(); ++r) {
        Tensor probs = softmax(outputs.logits[r], 0);
        for (size_t c = 0; c < outputs.roster.size(); ++c) {
            const double score = probs.data()[c];
            if (score < score_thresh) continue;
            std::array<double, 4> d;
            const auto& dt = outputs.deltas[r][c].data();
            std::copy(dt.begin(), dt.end(), d.begin());
            raw.push_back({decode_deltas(rois[r].box, d, image_w, image_h),
                           outputs.roster[c], score});
        }
    }
    return nms(raw, nms_iou);
}

std::vector<Detection> predict(const Model& model, const Tensor& query_image,
                               const std::map<int, std::vector<SupportInstance>>& supports,
                               double score_thresh, double nms_iou) {
    return predict_with_features(model, query_image, model.support_feature_map(supports),
                                 score_thresh, nms_iou);
}

}  // namespace protodet
