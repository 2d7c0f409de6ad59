#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "protodet/detector.hpp"
#include "protodet/shapeworld.hpp"

namespace protodet {

// One few-shot task: k support instances per class plus annotated queries,
// all referenced by dataset index.
struct Episode {
    std::map<int, std::vector<int>> support_indices;  // class -> indices into supports[class]
    std::vector<int> query_indices;                    // into dataset.images
    int k = 0;
};

// Uniform sampling without replacement. `query_pool` lists the eligible
// query image indices; `allowed_supports`, when present for a class,
// restricts its support pool (the novel k-instance discipline).
Episode sample_episode(const Dataset& dataset, const std::vector<int>& class_pool, int k,
                       int n_query, const std::vector<int>& query_pool, Rng& rng,
                       const std::map<int, std::vector<int>>* allowed_supports = nullptr);

// Indices of images whose annotations all fall inside the class pool.
std::vector<int> eligible_query_images(const Dataset& dataset, const std::vector<int>& class_pool,
                                       int first, int last);

SupportInstance support_instance(const Dataset& dataset, int class_id, int index);

struct TrainSchedule {
    int iterations = 2000;
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int k = 1;
    int n_query = 1;
    bool flip_augment = true;
    int negatives_per_positive = 3;
};

struct TrainResult {
    std::vector<double> loss_trace;
    std::vector<int> visited_images;  // sampler access log, in visit order
};

// Loss of one episode forward pass (mean over query images), shared by both
// training phases. Exposed for tests and gradient checks.
Tensor episode_loss(const Model& model, const Dataset& dataset, const Episode& episode, Rng& rng,
                    const TrainSchedule& schedule);

// Meta-training on base-class episodes. Throws on a non-finite loss, naming
// the iteration and episode seed.
TrainResult meta_train(Model& model, const Dataset& dataset, const TrainSchedule& schedule,
                       uint64_t seed, int train_first, int train_last);

// Fine-tuning over the full roster with balanced k-shot episodes; novel
// classes draw from a fixed k-instance pool chosen by `seed`.
TrainResult meta_finetune(Model& model, const Dataset& dataset, const TrainSchedule& schedule,
                          uint64_t seed, int train_first, int train_last,
                          const std::map<int, std::vector<int>>& novel_pool);

// The k support indices per novel class committed at fine-tuning time and
// reused at evaluation.
std::map<int, std::vector<int>> pick_novel_pool(const Dataset& dataset, int k, uint64_t seed);

}  // namespace protodet
