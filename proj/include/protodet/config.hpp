#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "protodet/ablation.hpp"
#include "protodet/detector.hpp"
#include "protodet/episodic.hpp"
#include "protodet/shapeworld.hpp"

namespace protodet {

// Complete run configuration. Every field has a default, so an empty config
// is runnable; keys mirror the `--section.key=value` flag convention
// one-to-one.
struct RunConfig {
    // [run]
    uint64_t seed = 42;
    std::string out = "out";
    int threads = 2;

    // [dataset]
    int image_size = 64;
    int train_images = 240;
    int eval_images = 48;
    int supports_per_class = 20;
    int clutter_blobs = 3;
    int noise_amplitude = 8;
    int num_classes = 8;
    int num_base = 6;

    // [model]
    int channels = 32;
    int embed_dim = 32;

    // [coupling]
    bool coupling_enabled = true;
    bool coupling_condition = true;
    bool coupling_clamp = true;

    // [aggregation]
    bool aggregation_intra = true;
    bool aggregation_inter = true;
    double alpha = 1.0;
    std::string img_proto = "gap";  // gap | gap_gmp
    bool normalize_contributions = false;

    // [loss]
    double lambda = 1.0;

    // [train]
    int train_iterations = 2000;
    double train_lr = 0.01;
    double train_momentum = 0.9;
    double train_weight_decay = 1e-4;
    int train_k = 1;
    bool train_flip = true;
    int negatives_per_positive = 3;

    // [finetune]
    int finetune_iterations = 400;
    double finetune_lr = 0.001;
    int finetune_k = 1;

    // [eval]
    double score_thresh = 0.05;
    double nms_iou = 0.5;

    // [ablate]
    int ablate_seeds = 5;
    std::string ablate_shots = "1,3";
    std::string ablate_arms = "table3";  // table3 | pooling | condition

    // [gradcheck]
    std::string gradcheck_scope = "all";

    // [viz]
    int viz_queries = 2;

    void set(const std::string& section, const std::string& key, const std::string& value);
    // resolved snapshot: every field materialized, fixed order, versioned header
    std::string serialize() const;
    std::string fingerprint() const;  // fnv1a-64 hex of the snapshot

    static RunConfig parse_text(const std::string& text);
    static RunConfig load_file(const std::string& path);

    ShapeWorldSpec world_spec() const;
    ModelConfig model_config() const;
    TrainSchedule train_schedule() const;
    TrainSchedule finetune_schedule() const;
    AblationRunConfig ablation_config() const;
    std::vector<int> shots_list() const;
};

uint64_t fnv1a64(const std::string& text);

}  // namespace protodet
