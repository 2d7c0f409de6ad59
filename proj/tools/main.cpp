#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "protodet/pipeline.hpp"

namespace {

constexpr const char* kUsage = R"(usage: protodet <subcommand> [options]

subcommands:
  gen-data     render the synthetic dataset to <out>/dataset
  meta-train   train on base-class episodes, write <out>/meta.ckpt
  finetune     fine-tune on the full roster, write <out>/final.ckpt
  eval         evaluate <out>/final.ckpt, write <out>/eval_report.txt
  ablate       run the ablation matrix, write <out>/ablation.csv
  gradcheck    finite-difference verification of all gradients
  dump-viz     write condition/weight heatmaps to <out>/viz

options:
  --config=FILE           key=value config with [section] headers
  --<section>.<key>=VALUE override any config key (e.g. --train.lr=0.01)
  --out=DIR               shorthand for --run.out=DIR
  --help                  show this message

exit status: 0 success, 1 usage or validation error, 2 runtime failure
)";

int fail_usage(const std::string& message) {
    if (!message.empty()) std::cerr << "error: " << message << "\n\n";
    std::cerr << kUsage;
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    using namespace protodet;
    std::vector<std::string> args(argv + 1, argv + argc);
    if (args.empty()) return fail_usage("missing subcommand");
    const std::string subcommand = args[0];
    if (subcommand == "--help" || subcommand == "help") {
        std::cout << kUsage;
        return 0;
    }

    static const std::vector<std::string> kSubcommands = {
        "gen-data", "meta-train", "finetune", "eval", "ablate", "gradcheck", "dump-viz"};
    bool known = false;
    for (const auto& s : kSubcommands) known = known || s == subcommand;
    if (!known) return fail_usage("unknown subcommand '" + subcommand + "'");

    RunConfig config;
    try {
        // config file first, then flag overrides in order
        for (size_t i = 1; i < args.size(); ++i) {
            const std::string& arg = args[i];
            if (arg.rfind("--config=", 0) == 0)
                config = RunConfig::load_file(arg.substr(9));
        }
        for (size_t i = 1; i < args.size(); ++i) {
            const std::string& arg = args[i];
            if (arg == "--help") {
                std::cout << kUsage;
                return 0;
            }
            if (arg.rfind("--config=", 0) == 0) continue;
            if (arg.rfind("--out=", 0) == 0) {
                config.set("run", "out", arg.substr(6));
                continue;
            }
            if (arg.rfind("--", 0) != 0) return fail_usage("unexpected argument '" + arg + "'");
            const size_t eq = arg.find('=');
            if (eq == std::string::npos)
                return fail_usage("expected --section.key=value, got '" + arg + "'");
            const std::string path = arg.substr(2, eq - 2);
            const size_t dot = path.find('.');
            if (dot == std::string::npos)
                return fail_usage("expected --section.key=value, got '" + arg + "'");
            config.set(path.substr(0, dot), path.substr(dot + 1), arg.substr(eq + 1));
        }
    } catch (const std::invalid_argument& e) {
        return fail_usage(e.what());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (subcommand == "gen-data")
            run_gen_data(config);
        else if (subcommand == "meta-train")
            run_meta_train(config);
        else if (subcommand == "finetune")
            run_finetune(config);
        else if (subcommand == "eval")
            run_eval(config);
        else if (subcommand == "ablate")
            run_ablate(config);
        else if (subcommand == "gradcheck")
            return run_gradcheck(config) ? 0 : 2;
        else if (subcommand == "dump-viz")
            run_dump_viz(config);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
