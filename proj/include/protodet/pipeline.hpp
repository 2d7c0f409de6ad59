#pragma once

#include <string>

#include "protodet/config.hpp"

namespace protodet {

// Subcommand bodies shared by the CLI and the test suites. Every function
// materializes the resolved config snapshot next to its outputs and is
// deterministic byte-for-byte given (config, seed).
void run_gen_data(const RunConfig& config);
void run_meta_train(const RunConfig& config);
void run_finetune(const RunConfig& config);
void run_eval(const RunConfig& config);
void run_ablate(const RunConfig& config);
bool run_gradcheck(const RunConfig& config, std::string* report_text = nullptr);
void run_dump_viz(const RunConfig& config);

// Convenience for tests: meta-train, finetune, eval in one process.
void run_full_pipeline(const RunConfig& config);

}  // namespace protodet
