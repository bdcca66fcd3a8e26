#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "vlmo/backbone/config.hpp"
#include "vlmo/objectives/objectives.hpp"

namespace vlmo::cli {

// Everything a run depends on besides the corpus and --init checkpoint.
// Step counts of 0 mean "use the stage default".
struct RunConfig {
    model::ModelConfig model;
    std::uint64_t seed = 0;
    std::string data;

    std::size_t batch_size = 32;
    double lr = 1e-3;
    std::size_t vision_steps = 0, text_steps = 0, vl_steps = 0;
    std::size_t checkpoint_every = 0;
    std::size_t workers = 1;
    objectives::PretrainOptions objectives;
    double mlm_probability = 0.15;
    bool bert_corruption = false;
    double mim_ratio = 0.4;

    std::size_t finetune_steps = 0;
    std::size_t finetune_batch_size = 32;
    double finetune_lr = 5e-4;
    std::size_t task_examples = 1024;  // two-image examples drawn per corpus
    // 0 = derived from the task (D for classify, 2D for nlvr2).
    std::size_t head_in_dim = 0;
    std::size_t head_classes = 0;
};

// Flat "key = value" lines; '#' starts a comment. Unknown keys, repeated
// keys and malformed values throw ConfigError naming the line.
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);
// "key=value"; same validation as a file line.
void apply_setting(RunConfig& config, std::string_view assignment);

// Every key with its resolved value, one per line in a fixed order. The
// hash of this text identifies the run configuration.
std::string resolved_text(const RunConfig& config);
std::uint64_t config_hash(const RunConfig& config);

std::vector<std::string> config_keys();

}  // namespace vlmo::cli
