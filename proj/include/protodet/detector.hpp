#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "protodet/aggregation.hpp"
#include "protodet/coupling.hpp"
#include "protodet/geometry.hpp"
#include "protodet/params.hpp"
#include "protodet/tensor.hpp"

namespace protodet {

// Three conv3x3 + relu + 2x2 average pool stages, stride 8 overall.
// The first conv reads 4 channels: RGB plus the support object mask
// (zeros on the query branch, so both branches share every weight).
struct BackboneParams {
    Tensor w1, b1;  // [16,4,3,3]
    Tensor w2, b2;  // [32,16,3,3]
    Tensor w3, b3;  // [C,32,3,3]
    int out_channels = 0;

    static BackboneParams init(int out_channels, Rng& rng);
    void register_into(ParamRegistry& registry, const std::string& prefix);
};

struct SupportInstance {
    Tensor image;  // [3,H,W] in [0,1]
    Tensor mask;   // [1,H,W] binary
    int class_id = -1;
};

// Per-class binary logit from the prototype-modulated RoI vector, one shared
// background logit from the raw vector, per-class box deltas, and the
// prototype classifier over the full class roster.
struct HeadParams {
    // prototype-side transform applied before the sigmoid gate; keeps the
    // attention input in the sigmoid's sensitive range whatever scale the
    // raw prototypes reach
    Tensor proto_weight, proto_bias;  // [C,C],[C]
    Tensor cls_weight, cls_bias;      // [1,C],[1]
    Tensor bg_weight, bg_bias;        // [1,C],[1]
    Tensor reg_weight, reg_bias;      // [4,C],[4]
    Tensor meta_weight, meta_bias;    // [num_classes,C],[num_classes]
    int num_classes = 0;

    static HeadParams init(int channels, int num_classes, Rng& rng);
    void register_into(ParamRegistry& registry, const std::string& prefix);
};

struct RoI {
    Box box;
    Tensor feature;  // [C]
    int label = -1;  // class id, -1 for background
    std::array<double, 4> reg_target{0, 0, 0, 0};
    bool positive = false;
};

Tensor backbone_forward(const Tensor& image, const Tensor* mask, const BackboneParams& params);
// Variant taking a pre-assembled 4-channel input (used by gradient checks).
Tensor backbone_forward_raw(const Tensor& input4, const BackboneParams& params);

// Boxes in image coordinates are mapped to the stride-8 feature grid (round
// outward, clamped, minimum one cell) and pooled by mean.
Tensor roi_feature(const Tensor& feat, const Box& box, int image_w, int image_h, int stride = 8);
std::vector<RoI> extract_roi_features(const Tensor& feat, const std::vector<BoxAnnotation>& boxes,
                                      int image_w, int image_h, int stride = 8);

// roi o sigmoid(prototype)
Tensor channel_attention(const Tensor& roi, const Tensor& prototype);

struct DetectionOutputs {
    std::vector<Tensor> logits;                // per RoI: [M+1], background last
    std::vector<std::vector<Tensor>> deltas;   // per RoI, per roster class: [4]
    std::vector<int> roster;                   // class ids in logit order
};

DetectionOutputs detection_forward(const std::vector<RoI>& rois,
                                   const std::map<int, ClassPrototype>& prototypes,
                                   const HeadParams& heads);

// meta-classifier logits for every prototype, rows in roster order
Tensor meta_logits(const std::map<int, ClassPrototype>& prototypes, const HeadParams& heads);

// CE(cls) + L1 over positives + lambda * CE(meta). positive_deltas carries
// the predicted [4] delta of each positive's own class; reg loss is 0 when
// there are no positives.
Tensor total_loss(const std::vector<Tensor>& cls_logits, const std::vector<int>& cls_labels,
                  const std::vector<Tensor>& positive_deltas,
                  const std::vector<std::array<double, 4>>& reg_targets, const Tensor& proto_logits,
                  const std::vector<int>& proto_labels, double lambda);

// Fixed sliding-window candidates: 3 scales x 2 aspect ratios on a stride-8
// grid, clipped to the image.
std::vector<Box> candidate_grid(int image_w, int image_h, int stride = 8);

// Greedy per-class suppression, descending score, ties broken by the lower
// insertion index.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh);

struct ModelConfig {
    int channels = 32;
    int embed_dim = 32;
    int num_classes = 8;
    bool use_coupling = true;
    bool use_condition = true;
    bool clamp_condition = true;
    bool use_intra = true;
    bool use_inter = true;
    ImgProtoMode img_proto = ImgProtoMode::gap;
    bool normalize_contributions = false;
    double alpha = 1.0;
    double lambda = 1.0;
    double score_thresh = 0.05;
    double nms_iou = 0.5;
};

// Two-branch detector: shared backbone, coupling, aggregation, heads.
// Owns the registry; parameter tensors are shared into it.
struct Model {
    ModelConfig config;
    BackboneParams backbone;
    CouplingParams coupling;
    InterDamParams inter;
    HeadParams heads;
    ParamRegistry registry;

    static Model init(const ModelConfig& config, uint64_t seed);
    // same structure, parameter values copied (fresh registry)
    Model clone() const;

    Tensor query_features(const Tensor& image) const;
    Tensor support_features(const SupportInstance& instance) const;
    std::map<int, std::vector<Tensor>> support_feature_map(
        const std::map<int, std::vector<SupportInstance>>& supports) const;

    // Coupling (or pass-through) of every support feature against one query.
    std::map<int, std::vector<CoupledFeature>> couple_supports(
        const Tensor& query_feat, const std::map<int, std::vector<Tensor>>& support_feats) const;

    std::map<int, ClassPrototype> build_prototypes(
        const Tensor& query_feat, const std::map<int, std::vector<Tensor>>& support_feats) const;

    AggregationOptions aggregation_options() const;
};

std::vector<Detection> predict_with_features(const Model& model, const Tensor& query_image,
                                             const std::map<int, std::vector<Tensor>>& support_feats,
                                             double score_thresh, double nms_iou);
std::vector<Detection> predict(const Model& model, const Tensor& query_image,
                               const std::map<int, std::vector<SupportInstance>>& supports,
                               double score_thresh = 0.05, double nms_iou = 0.5);

}  // namespace protodet
