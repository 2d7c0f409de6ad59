#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "protodet/detector.hpp"
#include "protodet/shapeworld.hpp"

namespace protodet {

struct ScoredBox {
    double score = 0;
    int image_id = 0;
    Box box;
};

// All-point interpolated average precision. Detections are processed in
// descending score (ties by insertion order); each ground-truth box is
// matched at most once at IoU >= iou_thresh.
double voc_ap(const std::vector<ScoredBox>& detections,
              const std::map<int, std::vector<Box>>& gts_by_image, double iou_thresh = 0.5);

struct EvalReport {
    std::map<int, double> per_class_ap;  // classes with at least one GT
    std::map<int, int> gt_counts;
    std::map<int, int> detection_counts;
    double map_base = 0;
    double map_novel = 0;
    int n_images = 0;
    uint64_t seed = 0;
    std::string config_fingerprint;

    // versioned, deterministic text rendering
    std::string to_text(const ShapeWorldSpec& spec) const;
};

struct EvalOptions {
    uint64_t seed = 0;
    int k = 1;
    double score_thresh = 0.05;
    double nms_iou = 0.5;
    int first = 0;  // eval image index range [first, last)
    int last = 0;
    // fixed support indices per class (the committed novel k-shot pool);
    // other classes sample k supports from the full pool with `seed`
    std::map<int, std::vector<int>> fixed_supports;
    std::string config_fingerprint;
};

using DetectorFn = std::function<std::vector<Detection>(int image_index, const AnnotatedImage&)>;

// Metric core over an arbitrary detector callback (tests plug in stubs).
EvalReport evaluate_detections(const Dataset& dataset, int first, int last,
                               const DetectorFn& detector);

// Samples the episode supports once, then runs predict() per eval image.
EvalReport evaluate_map(const Model& model, const Dataset& dataset, const EvalOptions& options);

// Support indices per class under the evaluation protocol (fixed pools
// respected, k sampled from the rest).
std::map<int, std::vector<int>> eval_support_indices(const Dataset& dataset,
                                                     const EvalOptions& options);

}  // namespace protodet
