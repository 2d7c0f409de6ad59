#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "protodet/episodic.hpp"
#include "protodet/evalmetrics.hpp"

namespace protodet {

// One row of the ablation matrix: the mechanism switches, nothing else.
struct AblationArm {
    std::string name;
    bool use_coupling = false;
    bool use_condition = false;
    bool use_intra = false;
    bool use_inter = false;
    ImgProtoMode img_proto = ImgProtoMode::gap;

    std::string flags_text() const;
};

// The four mandatory arms: neither mechanism, coupling only, aggregation
// only, both.
std::vector<AblationArm> table3_arms();
// Image-prototype comparison: plain gap, gap+gmp, intra, intra+inter.
std::vector<AblationArm> pooling_arms();
// Coupling with and without the condition mask.
std::vector<AblationArm> condition_arms();

struct AblationRunConfig {
    ShapeWorldSpec world;            // world.seed is replaced by the run seed
    int train_images = 240;
    int eval_images = 48;
    ModelConfig model;               // flags replaced per arm
    TrainSchedule train;             // k replaced per shot
    TrainSchedule finetune;
    std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
    std::vector<int> shots{1, 3};
    int threads = 2;
    // also evaluate base-class mAP right after meta-training (before any
    // fine-tuning), once per (arm, seed) job
    bool record_prefinetune = false;
};

struct AblationCell {
    std::string arm;
    uint64_t seed = 0;
    int shot = 0;
    EvalReport report;
    double base_map_prefinetune = -1;  // filled when record_prefinetune is set
    double seconds = 0;
};

struct AblationTable {
    std::vector<AblationCell> cells;
    double total_seconds = 0;
    int num_base = 6;

    // `arm,seed,shot,split,class,AP` rows under a versioned header
    std::string to_csv() const;
    std::string summary(const std::vector<AblationArm>& arms) const;
    // median over all (seed, shot) runs of an arm's novel-class mAP
    double median_novel_map(const std::string& arm) const;
    double median_novel_map(const std::string& arm, int shot) const;
};

// Full matrix: per (arm, seed, shot) generate the seed's dataset, train both
// phases, evaluate. Datasets, schedules and initial weights are shared per
// seed; only the arm flags differ. Jobs run on `threads` workers; outputs are
// independent of scheduling. Partial results are written per completed cell
// when out_dir is non-empty.
AblationTable run_ablation(const std::vector<AblationArm>& arms, const AblationRunConfig& config,
                           const std::string& out_dir = "");

// Single cell (exposed for tests).
AblationCell run_ablation_cell(const AblationArm& arm, const AblationRunConfig& config,
                               uint64_t seed, int shot);

}  // namespace protodet
