#include "protodet/ablation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

namespace protodet {

std::string AblationArm::flags_text() const {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "coupling=%d condition=%d intra=%d inter=%d img_proto=%s",
                  use_coupling, use_condition, use_intra, use_inter,
                  img_proto == ImgProtoMode::gap ? "gap" : "gap_gmp");
    return buf;
}

std::vector<AblationArm> table3_arms() {
    return {
        {"baseline", false, false, false, false, ImgProtoMode::gap},
        {"coupling", true, true, false, false, ImgProtoMode::gap},
        {"aggregation", false, false, true, true, ImgProtoMode::gap},
        {"full", true, true, true, true, ImgProtoMode::gap},
    };
}

std::vector<AblationArm> pooling_arms() {
    return {
        {"gap", false, false, false, false, ImgProtoMode::gap},
        {"gap_gmp", false, false, false, false, ImgProtoMode::gap_gmp},
        {"intra", false, false, true, false, ImgProtoMode::gap},
        {"intra_inter", false, false, true, true, ImgProtoMode::gap},
    };
}

std::vector<AblationArm> condition_arms() {
    return {
        {"baseline", false, false, false, false, ImgProtoMode::gap},
        {"coupling_unmasked", true, false, false, false, ImgProtoMode::gap},
        {"coupling", true, true, false, false, ImgProtoMode::gap},
    };
}

namespace {

// One (arm, seed) job: meta-training is shared, then each shot branches into
// its own finetune + eval on a cloned model.
std::vector<AblationCell> run_arm_seed(const AblationArm& arm, const AblationRunConfig& config,
                                       uint64_t seed) {
    ShapeWorldSpec world = config.world;
    world.seed = Rng::mix(seed, 0x574f524c44ULL);
    Dataset dataset = generate_dataset(world, config.train_images + config.eval_images);

    ModelConfig mcfg = config.model;
    mcfg.num_classes = world.num_classes;
    mcfg.use_coupling = arm.use_coupling;
    mcfg.use_condition = arm.use_condition;
    mcfg.use_intra = arm.use_intra;
    mcfg.use_inter = arm.use_inter;
    mcfg.img_proto = arm.img_proto;
    Model trained = Model::init(mcfg, seed);  // identical initial weights across arms

    const auto start = std::chrono::steady_clock::now();
    meta_train(trained, dataset, config.train, seed, 0, config.train_images);
    const double meta_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    double prefinetune_base = -1;
    if (config.record_prefinetune && !config.shots.empty()) {
        EvalOptions pre;
        pre.seed = seed;
        pre.k = config.shots.front();
        pre.score_thresh = mcfg.score_thresh;
        pre.nms_iou = mcfg.nms_iou;
        pre.first = config.train_images;
        pre.last = config.train_images + config.eval_images;
        prefinetune_base = evaluate_map(trained, dataset, pre).map_base;
    }

    std::vector<AblationCell> cells;
    for (int shot : config.shots) {
        const auto shot_start = std::chrono::steady_clock::now();
        Model model = trained.clone();
        TrainSchedule finetune = config.finetune;
        finetune.k = shot;
        const auto novel_pool = pick_novel_pool(dataset, shot, seed);
        meta_finetune(model, dataset, finetune, seed, 0, config.train_images, novel_pool);

        EvalOptions eval;
        eval.seed = seed;
        eval.k = shot;
        eval.score_thresh = mcfg.score_thresh;
        eval.nms_iou = mcfg.nms_iou;
        eval.first = config.train_images;
        eval.last = config.train_images + config.eval_images;
        eval.fixed_supports = novel_pool;
        eval.config_fingerprint = arm.name;

        AblationCell cell;
        cell.arm = arm.name;
        cell.seed = seed;
        cell.shot = shot;
        cell.report = evaluate_map(model, dataset, eval);
        cell.base_map_prefinetune = prefinetune_base;
        cell.seconds =
            meta_seconds / static_cast<double>(config.shots.size()) +
            std::chrono::duration<double>(std::chrono::steady_clock::now() - shot_start).count();
        cells.push_back(std::move(cell));
    }
    return cells;
}

}  // namespace

AblationCell run_ablation_cell(const AblationArm& arm, const AblationRunConfig& config,
                               uint64_t seed, int shot) {
    AblationRunConfig one = config;
    one.shots = {shot};
    return run_arm_seed(arm, one, seed).front();
}

AblationTable run_ablation(const std::vector<AblationArm>& arms, const AblationRunConfig& config,
                           const std::string& out_dir) {
    struct Job {
        size_t arm_index;
        uint64_t seed;
    };
    std::vector<Job> jobs;
    for (size_t a = 0; a < arms.size(); ++a)
        for (uint64_t seed : config.seeds) jobs.push_back({a, seed});

    AblationTable table;
    table.cells.resize(jobs.size() * config.shots.size());
    table.num_base = config.world.num_base;
    const auto start = std::chrono::steady_clock::now();

    if (!out_dir.empty()) std::filesystem::create_directories(out_dir + "/partial");
    std::atomic<size_t> next{0};
    const int n_threads = std::max(1, config.threads);
    std::vector<std::thread> workers;
    workers.reserve(static_cast<size_t>(n_threads));
    for (int t = 0; t < n_threads; ++t)
        workers.emplace_back([&] {
            size_t j;
            while ((j = next.fetch_add(1)) < jobs.size()) {
                const Job& job = jobs[j];
                std::vector<AblationCell> cells = run_arm_seed(arms[job.arm_index], config, job.seed);
                for (size_t sh = 0; sh < cells.size(); ++sh) {
                    if (!out_dir.empty()) {
                        char name[256];
                        std::snprintf(name, sizeof(name), "%s/partial/%s_seed%llu_shot%d.txt",
                                      out_dir.c_str(), cells[sh].arm.c_str(),
                                      static_cast<unsigned long long>(cells[sh].seed),
                                      cells[sh].shot);
                        std::ofstream out(name);
                        out << cells[sh].report.to_text(config.world);
                    }
                    table.cells[j * config.shots.size() + sh] = std::move(cells[sh]);
                }
            }
        });
    for (auto& w : workers) w.join();
    table.total_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return table;
}

std::string AblationTable::to_csv() const {
    std::string out = "# protodet-ablation v1\narm,seed,shot,split,class,AP\n";
    char buf[192];
    for (const auto& cell : cells) {
        for (const auto& [class_id, ap] : cell.report.per_class_ap) {
            std::snprintf(buf, sizeof(buf), "%s,%llu,%d,%s,%s,%.17g\n", cell.arm.c_str(),
                          static_cast<unsigned long long>(cell.seed), cell.shot,
                          class_id < num_base ? "base" : "novel", shape_name(class_id), ap);
            out += buf;
        }
        std::snprintf(buf, sizeof(buf), "%s,%llu,%d,novel,mAP,%.17g\n", cell.arm.c_str(),
                      static_cast<unsigned long long>(cell.seed), cell.shot, cell.report.map_novel);
        out += buf;
        std::snprintf(buf, sizeof(buf), "%s,%llu,%d,base,mAP,%.17g\n", cell.arm.c_str(),
                      static_cast<unsigned long long>(cell.seed), cell.shot, cell.report.map_base);
        out += buf;
    }
    return out;
}

namespace {

double median(std::vector<double> values) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const size_t n = values.size();
    return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace

double AblationTable::median_novel_map(const std::string& arm) const {
    std::vector<double> values;
    for (const auto& cell : cells)
        if (cell.arm == arm) values.push_back(cell.report.map_novel);
    return median(std::move(values));
}

double AblationTable::median_novel_map(const std::string& arm, int shot) const {
    std::vector<double> values;
    for (const auto& cell : cells)
        if (cell.arm == arm && cell.shot == shot) values.push_back(cell.report.map_novel);
    return median(std::move(values));
}

std::string AblationTable::summary(const std::vector<AblationArm>& arms) const {
    std::string out = "# protodet-ablation-summary v1\n";
    char buf[256];
    for (const auto& arm : arms) {
        std::vector<double> novel, base;
        for (const auto& cell : cells)
            if (cell.arm == arm.name) {
                novel.push_back(cell.report.map_novel);
                base.push_back(cell.report.map_base);
            }
        if (novel.empty()) continue;
        const auto [lo, hi] = std::minmax_element(novel.begin(), novel.end());
        double mean = 0;
        for (double v : novel) mean += v;
        mean /= static_cast<double>(novel.size());
        std::snprintf(buf, sizeof(buf),
                      "arm %s runs %zu novel_median %.4f novel_mean %.4f novel_min %.4f "
                      "novel_max %.4f base_median %.4f [%s]\n",
                      arm.name.c_str(), novel.size(), median_novel_map(arm.name), mean, *lo, *hi,
                      median(base), arm.flags_text().c_str());
        out += buf;
    }
    std::snprintf(buf, sizeof(buf), "total_seconds %.1f\n", total_seconds);
    out += buf;
    return out;
}

}  // namespace protodet
