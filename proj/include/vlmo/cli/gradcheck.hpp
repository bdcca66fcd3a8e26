#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "vlmo/backbone/config.hpp"

namespace vlmo::cli {

struct GradcheckOptions {
    std::uint64_t seed = 0;
    double tolerance = 1e-3;
    double step = 1e-5;
    // Elements probed per input tensor; op cases are small enough to probe
    // every element, model parameters are sampled.
    std::size_t max_per_tensor = 1u << 20;
    std::size_t model_per_tensor = 6;
};

struct GradcheckResult {
    std::string name;
    std::set<std::string> ops;  // primitive ops present in the checked graph
    std::size_t checked = 0;
    double worst_rel = 0;
    std::string worst_at;  // input and element of the worst mismatch
    bool passed = false;
};

// Names of the registered op cases, in report order.
std::vector<std::string> registered_op_cases();

// 64-bit central differences against backward for every registered case.
std::vector<GradcheckResult> gradcheck_ops(const GradcheckOptions& options);

// Full combined pretraining loss plus the masked-patch loss of a freshly
// initialized model, on a tiny synthetic batch.
std::vector<GradcheckResult> gradcheck_model(const model::ModelConfig& config, const GradcheckOptions& options);

// Primitive ops reached by the model losses that no op case covers.
std::vector<std::string> uncovered_ops(const std::vector<GradcheckResult>& op_results,
                                       const std::vector<GradcheckResult>& model_results);

}  // namespace vlmo::cli
