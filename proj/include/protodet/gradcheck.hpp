#pragma once

#include <functional>
#include <string>
#include <vector>

#include "protodet/tensor.hpp"

namespace protodet {

struct GradCheckFailure {
    std::string check;
    std::string input;
    size_t index = 0;
    double analytic = 0;
    double numeric = 0;
    double rel_error = 0;
};

struct GradCheckReport {
    std::vector<std::string> passed;
    std::vector<GradCheckFailure> failures;
    double max_rel_error = 0;
    bool ok() const { return failures.empty(); }
    std::string summary() const;
};

enum class GradCheckScope { ops, modules, end2end, all };
GradCheckScope parse_grad_scope(const std::string& name);

// Compares analytic gradients of every named input of a rebuilt-per-call
// scalar forward against central finite differences (h=1e-5). Relative error
// uses a unit floor: |a-n| / max(|a|,|n|,1). `skip` may exclude coordinates
// sitting on a kink.
bool check_gradients(const std::string& name, std::vector<std::pair<std::string, Tensor>> inputs,
                     const std::function<Tensor()>& forward, GradCheckReport& report,
                     double h = 1e-5, double tolerance = 1e-4,
                     const std::function<bool(const std::string&, size_t)>& skip = nullptr);

// Full verification battery: every primitive op, the coupling / aggregation /
// detection composites, and an end-to-end episode loss, on micro shapes.
GradCheckReport run_grad_check_suite(GradCheckScope scope, uint64_t seed = 20240001);

}  // namespace protodet
