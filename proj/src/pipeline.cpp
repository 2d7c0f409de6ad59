#include "protodet/pipeline.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "protodet/evalmetrics.hpp"
#include "protodet/gradcheck.hpp"
#include "protodet/visualize.hpp"

namespace protodet {

namespace {

namespace fs = std::filesystem;

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << text;
}

void write_snapshot(const RunConfig& config) {
    fs::create_directories(config.out);
    write_text(config.out + "/config.resolved.txt", config.serialize());
}

void write_classes(const RunConfig& config) {
    std::string text = "# protodet-classes v1\n";
    for (int c = 0; c < config.num_classes; ++c) {
        text += std::to_string(c);
        text += " ";
        text += shape_name(c);
        text += (c < config.num_base) ? " base\n" : " novel\n";
    }
    write_text(config.out + "/classes.txt", text);
}

void write_trace(const std::string& path, const std::vector<double>& trace) {
    std::string text = "# protodet-loss-trace v1\n";
    char buf[64];
    for (size_t i = 0; i < trace.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu %.17g\n", i, trace[i]);
        text += buf;
    }
    write_text(path, text);
}

Dataset make_dataset(const RunConfig& config) {
    return generate_dataset(config.world_spec(), config.train_images + config.eval_images);
}

}  // namespace

void run_gen_data(const RunConfig& config) {
    write_snapshot(config);
    Dataset ds = make_dataset(config);
    save_dataset(ds, config.out + "/dataset");
    std::cout << "gen-data: wrote " << ds.images.size() << " images, "
              << config.num_classes * config.supports_per_class
              << " supports status=ok out=" << config.out << "/dataset\n";
}

void run_meta_train(const RunConfig& config) {
    write_snapshot(config);
    write_classes(config);
    Dataset ds = make_dataset(config);
    Model model = Model::init(config.model_config(), config.seed);
    TrainResult result =
        meta_train(model, ds, config.train_schedule(), config.seed, 0, config.train_images);
    model.registry.save_file(config.out + "/meta.ckpt");
    write_trace(config.out + "/meta_loss.txt", result.loss_trace);
    const double first = result.loss_trace.empty() ? 0.0 : result.loss_trace.front();
    const double last = result.loss_trace.empty() ? 0.0 : result.loss_trace.back();
    std::cout << "meta-train: iterations=" << result.loss_trace.size() << " first_loss=" << first
              << " last_loss=" << last << " status=ok\n";
}

void run_finetune(const RunConfig& config) {
    write_snapshot(config);
    Dataset ds = make_dataset(config);
    Model model = Model::init(config.model_config(), config.seed);
    model.registry.load_file(config.out + "/meta.ckpt");
    const auto novel_pool = pick_novel_pool(ds, config.finetune_k, config.seed);
    TrainResult result = meta_finetune(model, ds, config.finetune_schedule(), config.seed, 0,
                                       config.train_images, novel_pool);
    model.registry.save_file(config.out + "/final.ckpt");
    write_trace(config.out + "/finetune_loss.txt", result.loss_trace);
    std::string pool_text = "# protodet-novel-pool v1\n";
    for (const auto& [class_id, indices] : novel_pool) {
        pool_text += std::to_string(class_id);
        for (int idx : indices) pool_text += " " + std::to_string(idx);
        pool_text += "\n";
    }
    write_text(config.out + "/novel_pool.txt", pool_text);
    std::cout << "finetune: iterations=" << result.loss_trace.size() << " status=ok\n";
}

void run_eval(const RunConfig& config) {
    write_snapshot(config);
    Dataset ds = make_dataset(config);
    Model model = Model::init(config.model_config(), config.seed);
    model.registry.load_file(config.out + "/final.ckpt");

    EvalOptions options;
    options.seed = config.seed;
    options.k = config.finetune_k;
    options.score_thresh = config.score_thresh;
    options.nms_iou = config.nms_iou;
    options.first = config.train_images;
    options.last = config.train_images + config.eval_images;
    options.fixed_supports = pick_novel_pool(ds, config.finetune_k, config.seed);
    options.config_fingerprint = config.fingerprint();

    EvalReport report = evaluate_map(model, ds, options);
    write_text(config.out + "/eval_report.txt", report.to_text(ds.spec));
    std::cout << "eval: map_novel=" << report.map_novel << " map_base=" << report.map_base
              << " status=ok\n";
}

void run_ablate(const RunConfig& config) {
    write_snapshot(config);
    std::vector<AblationArm> arms;
    if (config.ablate_arms == "table3")
        arms = table3_arms();
    else if (config.ablate_arms == "pooling")
        arms = pooling_arms();
    else
        arms = condition_arms();
    AblationTable table = run_ablation(arms, config.ablation_config(), config.out);
    write_text(config.out + "/ablation.csv", table.to_csv());
    write_text(config.out + "/ablation_summary.txt", table.summary(arms));
    std::cout << table.summary(arms);
    std::cout << "ablate: cells=" << table.cells.size() << " seconds=" << table.total_seconds
              << " status=ok\n";
}

bool run_gradcheck(const RunConfig& config, std::string* report_text) {
    GradCheckReport report = run_grad_check_suite(parse_grad_scope(config.gradcheck_scope));
    if (report_text) *report_text = report.summary();
    std::cout << report.summary() << "\n";
    std::cout << "gradcheck: status=" << (report.ok() ? "ok" : "failed") << "\n";
    return report.ok();
}

void run_dump_viz(const RunConfig& config) {
    write_snapshot(config);
    Dataset ds = make_dataset(config);
    Model model = Model::init(config.model_config(), config.seed);
    if (fs::exists(config.out + "/final.ckpt"))
        model.registry.load_file(config.out + "/final.ckpt");
    else if (fs::exists(config.out + "/meta.ckpt"))
        model.registry.load_file(config.out + "/meta.ckpt");

    std::vector<int> all_classes;
    for (int c = 0; c < config.num_classes; ++c) all_classes.push_back(c);
    const auto query_pool =
        eligible_query_images(ds, all_classes, config.train_images,
                              config.train_images + config.eval_images);
    Rng rng(Rng::mix(config.seed, 0x56495aULL));
    Episode episode = sample_episode(ds, all_classes, config.finetune_k, config.viz_queries,
                                     query_pool, rng);
    dump_visualizations(model, ds, episode, config.out + "/viz");
    std::cout << "dump-viz: queries=" << episode.query_indices.size() << " out=" << config.out
              << "/viz status=ok\n";
}

void run_full_pipeline(const RunConfig& config) {
    run_meta_train(config);
    run_finetune(config);
    run_eval(config);
}

}  // namespace protodet
