#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vlmo/backbone/model.hpp"
#include "vlmo/cli/checkpoint.hpp"
#include "vlmo/data/corpus.hpp"
#include "vlmo/numerics/adamw.hpp"
#include "vlmo/objectives/objectives.hpp"

namespace vlmo::training {

enum class Stage { vision, text, vision_language };

std::string_view to_string(Stage stage);
// Accepts vision, text, vl, vision-language; throws ConfigError otherwise.
Stage parse_stage(std::string_view name);

using Manifest = std::vector<std::pair<std::string, Shape>>;

// Names that stay fixed during the stage. Vision trains attention, the
// vision expert, image embeddings and the MIM head; text trains the
// language expert, text embeddings and the MLM head; VL trains everything.
// With a standard FFN the shared FFN plays the unimodal expert in both.
std::set<std::string> freeze_mask(Stage stage, const Manifest& manifest);

struct StagePlan {
    Stage stage = Stage::vision;
    std::size_t steps = 0;
    std::size_t batch_size = 32;
    double peak_lr = 1e-3;
    std::size_t warmup_steps = 0;
    std::set<std::string> frozen;
};

// Toy defaults: 2000 / 1000 / 3000 steps, batch 32, lr 1e-3, 10% warmup.
std::size_t default_steps(Stage stage);
StagePlan make_plan(Stage stage, const model::ModelConfig& config, std::size_t steps, std::size_t batch_size = 32,
                    double peak_lr = 1e-3);

// Linear warmup to peak_lr, then linear decay to 0 at plan.steps.
double lr_schedule(std::size_t step, const StagePlan& plan);

// Contiguous rectangles of patches on a grid_h x grid_w grid until exactly
// round(ratio * N) (at least one) patches are flagged.
std::vector<std::uint8_t> block_mask(std::size_t grid_h, std::size_t grid_w, double ratio, std::mt19937_64& rng);

// Each patch shifted to zero mean and scaled to unit variance.
std::vector<float> normalized_patch_targets(std::span<const float> patches, std::size_t patch_dim);

template <typename T>
Tensor<T> mim_head(const model::Model<T>& model, const Tensor<T>& rows);

// Pixel regression at masked patches of an image-only encoding (the input
// already carries the mask embedding). Targets are per-patch normalized
// pixels; `patches` are the unmasked originals.
template <typename T>
Tensor<T> mim_loss(const model::Model<T>& model, const model::Encoded<T>& image, std::span<const float> patches,
                   std::span<const std::uint8_t> masked);

// Encodes the masked grid and applies mim_loss.
template <typename T>
Tensor<T> mim_loss(const model::Model<T>& model, std::span<const float> patches, std::size_t batch,
                   std::span<const std::uint8_t> masked);

struct StepRecord {
    Stage stage = Stage::vision;
    std::size_t step = 0;
    double lr = 0;
    double loss = 0;
    double mim = 0, mlm = 0, itc = 0, itm = 0;
    double sigma = 0;
    double hard_negative_similarity = 0;
    bool mlm_skipped = false;
};

struct TrainOptions {
    objectives::PretrainOptions objectives;
    data::MaskingOptions masking;
    std::size_t workers = 1;
    double mim_ratio = 0.4;
    AdamWOptions adamw;  // lr is taken from the schedule
    std::size_t checkpoint_every = 0;
    std::function<void(const StepRecord&)> on_step;
    std::function<void(const cli::Checkpoint&)> on_checkpoint;
    std::function<void(const std::string&)> on_warning;
};

// Stage id recorded in checkpoints: "init", "vision", "text", "vl".
std::string checkpoint_stage(Stage stage);

cli::Checkpoint fresh_checkpoint(const model::ModelConfig& config, std::uint64_t seed);

// Throws UsageError if `init_stage` cannot precede `stage`. Returns a
// warning message (empty if none) for VL from a fresh model.
std::string check_stage_order(std::string_view init_stage, Stage stage);

// Runs plan.steps AdamW steps on the stage objective. Frozen parameters are
// never written and carry no optimizer state. Deterministic given seed.
cli::Checkpoint train_stage(const StagePlan& plan, std::span<const data::Example> data, const cli::Checkpoint& init,
                            std::uint64_t seed, const TrainOptions& options = {});

// Draws batches without replacement, reshuffling once an epoch runs out.
class EpochSampler {
  public:
    EpochSampler(std::size_t size, std::uint64_t seed);
    std::vector<std::size_t> next(std::size_t count);

  private:
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    std::mt19937_64 rng_;
};

// AdamW over the trainable subset of a parameter store. Moment buffers are
// created for trainable names only; parameters without a gradient this step
// are skipped. Weight decay applies to matrices, not to vectors or scalars.
class Optimizer {
  public:
    Optimizer(model::ParameterStore<float>& params, const std::set<std::string>& frozen, AdamWOptions options);
    void step(double lr);
    std::size_t state_count() const { return states_.size(); }
    bool has_state(const std::string& name) const;

  private:
    struct Slot {
        std::string name;
        Tensor<float>* param;
        AdamWState<float> state;
        bool decay;
    };
    std::vector<Slot> states_;
    AdamWOptions options_;
};

}  // namespace vlmo::training
