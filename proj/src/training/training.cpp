#include "vlmo/training/training.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "vlmo/errors.hpp"
#include "vlmo/numerics/ops.hpp"
#include "vlmo/util/files.hpp"

namespace vlmo::training {

namespace {

bool contains(std::string_view name, std::string_view part) { return name.find(part) != std::string_view::npos; }
bool starts_with(std::string_view name, std::string_view prefix) { return name.substr(0, prefix.size()) == prefix; }

bool trainable(Stage stage, std::string_view name) {
    switch (stage) {
        case Stage::vision:
            return starts_with(name, "image.") || contains(name, ".attn") || contains(name, ".ffn_v.") ||
                   contains(name, ".ffn.") || starts_with(name, "head.mim.");
        case Stage::text:
            return starts_with(name, "text.") || contains(name, ".ffn_l.") || contains(name, ".ffn.") ||
                   starts_with(name, "head.mlm.");
        case Stage::vision_language:
            return true;
    }
    return false;
}

int stage_rank(std::string_view stage) {
    if (stage == "init") return 0;
    if (stage == "vision") return 1;
    if (stage == "text") return 2;
    if (stage == "vl") return 3;
    return -1;
}

void check_data(Stage stage, std::span<const data::Example> pool, const model::ModelConfig& config,
                std::size_t batch) {
    if (pool.size() < batch) {
        throw DataError("training data holds " + std::to_string(pool.size()) + " examples, batch needs " +
                        std::to_string(batch));
    }
    const bool need_images = stage != Stage::text;
    const bool need_text = stage != Stage::vision;
    for (const auto& ex : pool) {
        if (need_images && ex.patches.patches.size() != config.num_patches() * config.patch_dim()) {
            throw DataError("example " + std::to_string(ex.index) + " has no image grid matching the model");
        }
        if (need_text && ex.tokens.size() == 0) {
            throw DataError("example " + std::to_string(ex.index) + " has no text");
        }
    }
}

}  // namespace

std::string_view to_string(Stage stage) {
    switch (stage) {
        case Stage::vision:
            return "vision";
        case Stage::text:
            return "text";
        case Stage::vision_language:
            return "vl";
    }
    return "?";
}

Stage parse_stage(std::string_view name) {
    if (name == "vision") return Stage::vision;
    if (name == "text") return Stage::text;
    if (name == "vl" || name == "vision-language") return Stage::vision_language;
    throw ConfigError("unknown stage '" + std::string(name) + "' (expected vision, text or vl)");
}

std::string checkpoint_stage(Stage stage) { return std::string(to_string(stage)); }

std::set<std::string> freeze_mask(Stage stage, const Manifest& manifest) {
    if (manifest.empty()) throw ContractError("freeze_mask: empty parameter manifest");
    std::set<std::string> frozen;
    for (const auto& [name, shape] : manifest) {
        if (!trainable(stage, name)) frozen.insert(name);
    }
    return frozen;
}

std::size_t default_steps(Stage stage) {
    switch (stage) {
        case Stage::vision:
            return 2000;
        case Stage::text:
            return 1000;
        case Stage::vision_language:
            return 3000;
    }
    return 0;
}

StagePlan make_plan(Stage stage, const model::ModelConfig& config, std::size_t steps, std::size_t batch_size,
                    double peak_lr) {
    StagePlan plan;
    plan.stage = stage;
    plan.steps = steps;
    plan.batch_size = batch_size;
    plan.peak_lr = peak_lr;
    plan.warmup_steps = steps / 10;
    plan.frozen = freeze_mask(stage, model::parameter_manifest(config));
    return plan;
}

double lr_schedule(std::size_t step, const StagePlan& plan) {
    if (step > plan.steps) {
        throw ContractError("lr_schedule: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(plan.steps) + "]");
    }
    if (plan.warmup_steps > plan.steps) throw ContractError("lr_schedule: warmup longer than the stage");
    if (step < plan.warmup_steps) return plan.peak_lr * double(step) / double(plan.warmup_steps);
    const std::size_t decay = plan.steps - plan.warmup_steps;
    if (decay == 0) return step == plan.steps ? 0.0 : plan.peak_lr;
    return plan.peak_lr * double(plan.steps - step) / double(decay);
}

std::vector<std::uint8_t> block_mask(std::size_t grid_h, std::size_t grid_w, double ratio, std::mt19937_64& rng) {
    if (grid_h == 0 || grid_w == 0) throw ContractError("block_mask: empty grid");
    if (!(ratio > 0.0 && ratio <= 1.0)) throw ContractError("block_mask: ratio must be in (0, 1]");
    const std::size_t n = grid_h * grid_w;
    const std::size_t target = std::clamp<std::size_t>(std::size_t(std::llround(ratio * double(n))), 1, n);
    std::vector<std::uint8_t> mask(n, 0);
    std::size_t count = 0;
    const std::size_t max_h = std::max<std::size_t>(1, grid_h / 2);
    const std::size_t max_w = std::max<std::size_t>(1, grid_w / 2);
    std::size_t failures = 0;
    while (count < target) {
        const std::size_t left = target - count;
        std::size_t h = 1 + rng() % max_h;
        std::size_t w = 1 + rng() % max_w;
        if (failures >= 8) h = w = 1;
        const std::size_t top = rng() % (grid_h - h + 1);
        const std::size_t col = rng() % (grid_w - w + 1);
        std::size_t fresh = 0;
        for (std::size_t r = top; r < top + h; ++r)
            for (std::size_t c = col; c < col + w; ++c) fresh += mask[r * grid_w + c] == 0;
        // Blocks that would overshoot or add nothing are redrawn.
        if (fresh == 0 || fresh > left) {
            ++failures;
            continue;
        }
        failures = 0;
        for (std::size_t r = top; r < top + h; ++r)
            for (std::size_t c = col; c < col + w; ++c) mask[r * grid_w + c] = 1;
        count += fresh;
    }
    return mask;
}

std::vector<float> normalized_patch_targets(std::span<const float> patches, std::size_t patch_dim) {
    if (patch_dim == 0 || patches.size() % patch_dim != 0) {
        throw DimensionError("normalized_patch_targets: " + std::to_string(patches.size()) +
                             " values do not split into patches of " + std::to_string(patch_dim));
    }
    std::vector<float> out(patches.size());
    for (std::size_t p = 0; p < patches.size(); p += patch_dim) {
        double mean = 0;
        for (std::size_t i = 0; i < patch_dim; ++i) mean += patches[p + i];
        mean /= double(patch_dim);
        double var = 0;
        for (std::size_t i = 0; i < patch_dim; ++i) var += (patches[p + i] - mean) * (patches[p + i] - mean);
        var /= double(patch_dim);
        const double inv = 1.0 / std::sqrt(var + 1e-6);
        for (std::size_t i = 0; i < patch_dim; ++i) out[p + i] = float((patches[p + i] - mean) * inv);
    }
    return out;
}

template <typename T>
Tensor<T> mim_head(const model::Model<T>& m, const Tensor<T>& rows) {
    auto h = layer_norm(rows, m.param("head.mim.ln.gamma"), m.param("head.mim.ln.beta"), T(m.config().ln_eps));
    return linear(h, m.param("head.mim.weight"), m.param("head.mim.bias"));
}

template <typename T>
Tensor<T> mim_loss(const model::Model<T>& m, const model::Encoded<T>& image, std::span<const float> patches,
                   std::span<const std::uint8_t> masked) {
    const auto& layout = image.layout;
    if (layout.mode != model::Modality::image) throw ContractError("mim_loss: expects an image-only encoding");
    const std::size_t n = m.config().num_patches();
    const std::size_t pd = m.config().patch_dim();
    if (masked.size() != layout.batch * n || patches.size() != layout.batch * n * pd) {
        throw DimensionError("mim_loss: mask or patches do not match a batch of " + std::to_string(layout.batch));
    }
    std::vector<std::size_t> rows;
    std::vector<float> picked;
    for (std::size_t b = 0; b < layout.batch; ++b) {
        for (std::size_t i = 0; i < n; ++i) {
            if (!masked[b * n + i]) continue;
            rows.push_back(layout.image_cls(b) + 1 + i);
            const auto patch = patches.subspan((b * n + i) * pd, pd);
            picked.insert(picked.end(), patch.begin(), patch.end());
        }
    }
    if (rows.empty()) throw ContractError("mim_loss: no patch is masked");
    const auto targets = normalized_patch_targets(picked, pd);
    auto pred = mim_head(m, gather_rows(image.hidden, std::span<const std::size_t>(rows)));
    auto target = Tensor<T>::from({rows.size(), pd}, std::vector<T>(targets.begin(), targets.end()));
    return mse_loss(pred, target);
}

template <typename T>
Tensor<T> mim_loss(const model::Model<T>& m, std::span<const float> patches, std::size_t batch,
                   std::span<const std::uint8_t> masked) {
    if (std::find(masked.begin(), masked.end(), std::uint8_t(1)) == masked.end()) {
        throw ContractError("mim_loss: no patch is masked");
    }
    auto enc = m.encode_image(model::ImageBatch{patches, batch, masked});
    return mim_loss(m, enc, patches, masked);
}

cli::Checkpoint fresh_checkpoint(const model::ModelConfig& config, std::uint64_t seed) {
    model::Model<float> m(config, seed);
    cli::Checkpoint ckpt;
    ckpt.config = config;
    ckpt.stage = "init";
    ckpt.seed = seed;
    ckpt.params = std::move(m.params());
    return ckpt;
}

std::string check_stage_order(std::string_view init_stage, Stage stage) {
    const int from = stage_rank(init_stage);
    const std::string target(to_string(stage));
    if (from < 0) {
        throw UsageError("cannot start " + target + " pretraining from a '" + std::string(init_stage) +
                         "' checkpoint");
    }
    if (stage == Stage::text && from != 1) {
        throw UsageError("text pretraining needs a vision-stage checkpoint as --init (got '" +
                         std::string(init_stage) + "')");
    }
    if (from >= stage_rank(target)) {
        throw UsageError("stage order violated: " + target + " cannot follow '" + std::string(init_stage) + "'");
    }
    if (stage == Stage::vision_language && from == 0) {
        return "vision-language pretraining from a fresh model: no unimodal stages were run";
    }
    return {};
}

EpochSampler::EpochSampler(std::size_t size, std::uint64_t seed) : order_(size), cursor_(size), rng_(seed) {
    std::iota(order_.begin(), order_.end(), std::size_t(0));
}

std::vector<std::size_t> EpochSampler::next(std::size_t count) {
    if (count > order_.size()) throw ContractError("EpochSampler: batch larger than the data");
    if (order_.size() - cursor_ < count) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
    }
    std::vector<std::size_t> out(order_.begin() + std::ptrdiff_t(cursor_),
                                 order_.begin() + std::ptrdiff_t(cursor_ + count));
    cursor_ += count;
    return out;
}

Optimizer::Optimizer(model::ParameterStore<float>& params, const std::set<std::string>& frozen,
                     AdamWOptions options)
    : options_(options) {
    for (auto& [name, t] : params.entries()) {
        if (frozen.count(name)) continue;
        states_.push_back({name, &t, AdamWState<float>::for_size(t.numel()), t.rank() >= 2});
    }
}

bool Optimizer::has_state(const std::string& name) const {
    return std::any_of(states_.begin(), states_.end(), [&](const Slot& s) { return s.name == name; });
}

void Optimizer::step(double lr) {
    for (auto& slot : states_) {
        if (!slot.param->has_grad()) continue;
        AdamWOptions o = options_;
        o.lr = lr;
        if (!slot.decay) o.weight_decay = 0.0;
        adamw_step(slot.param->mutable_data(), slot.param->grad(), slot.state, o);
    }
}

cli::Checkpoint train_stage(const StagePlan& plan, std::span<const data::Example> pool, const cli::Checkpoint& init,
                            std::uint64_t seed, const TrainOptions& options) {
    const std::string warning = check_stage_order(init.stage, plan.stage);
    if (!warning.empty()) {
        if (options.on_warning) {
            options.on_warning(warning);
        } else {
            std::cerr << "warning: " << warning << "\n";
        }
    }
    const auto& config = init.config;
    if (plan.steps > 0) check_data(plan.stage, pool, config, plan.batch_size);

    model::Model<float> m(config, init.params.cast<float>());
    Optimizer optimizer(m.params(), plan.frozen, options.adamw);
    const std::uint64_t stage_seed = util::mix_seed(seed, 0x5354'0000u + std::uint64_t(plan.stage));
    EpochSampler sampler(pool.size(), util::mix_seed(stage_seed, 1));
    std::mt19937_64 rng(util::mix_seed(stage_seed, 2));
    const std::size_t grid_h = config.image_height / config.patch;
    const std::size_t grid_w = config.image_width / config.patch;

    auto snapshot = [&](std::size_t step) {
        cli::Checkpoint out;
        out.config = config;
        out.stage = checkpoint_stage(plan.stage);
        out.step = step;
        out.seed = seed;
        out.extra = init.extra;
        out.params = m.params().cast<float>();
        return out;
    };

    for (std::size_t step = 0; step < plan.steps; ++step) {
        const auto picks = sampler.next(plan.batch_size);
        auto batch = data::make_batch(pool, picks, options.workers);
        StepRecord rec;
        rec.stage = plan.stage;
        rec.step = step;
        Tensor<float> loss;
        bool skip = false;
        switch (plan.stage) {
            case Stage::vision: {
                std::vector<std::uint8_t> masked;
                for (std::size_t b = 0; b < batch.size(); ++b) {
                    const auto mask = block_mask(grid_h, grid_w, options.mim_ratio, rng);
                    masked.insert(masked.end(), mask.begin(), mask.end());
                }
                loss = mim_loss(m, std::span<const float>(batch.patches), batch.size(), masked);
                rec.mim = double(loss.item());
                break;
            }
            case Stage::text: {
                data::apply_mlm_masks(batch, options.masking, rng);
                std::vector<data::TokenSequence> inputs;
                for (const auto& mt : batch.masked) inputs.push_back(mt.tokens);
                auto enc = m.encode_text(inputs);
                auto mlm = objectives::mlm_loss(m, enc, std::span<const data::MaskedTokens>(batch.masked));
                loss = mlm.loss;
                skip = mlm.skipped;
                rec.mlm = double(loss.item());
                rec.mlm_skipped = mlm.skipped;
                break;
            }
            case Stage::vision_language: {
                if (options.objectives.use_mlm) data::apply_mlm_masks(batch, options.masking, rng);
                auto parts = objectives::combined_pretrain_loss(m, batch, options.objectives, rng);
                loss = parts.total;
                rec.itc = parts.itc;
                rec.itm = parts.itm;
                rec.mlm = parts.mlm;
                rec.mlm_skipped = parts.mlm_skipped;
                rec.sigma = parts.sigma;
                rec.hard_negative_similarity = parts.hard_negative_similarity;
                skip = !loss.requires_grad();
                break;
            }
        }
        rec.loss = double(loss.item());
        if (!std::isfinite(rec.loss)) {
            throw NumericError(std::string(to_string(plan.stage)) + " loss is not finite at step " +
                               std::to_string(step));
        }
        rec.lr = lr_schedule(step + 1, plan);
        m.params().zero_grad();
        if (!skip) {
            loss.backward();
            optimizer.step(rec.lr);
        }
        if (options.on_step) options.on_step(rec);
        if (options.checkpoint_every > 0 && (step + 1) % options.checkpoint_every == 0 && step + 1 < plan.steps &&
            options.on_checkpoint) {
            options.on_checkpoint(snapshot(step + 1));
        }
    }
    m.params().zero_grad();
    return snapshot(plan.steps);
}

#define VLMO_TRAINING(T)                                                                                    \
    template Tensor<T> mim_head(const model::Model<T>&, const Tensor<T>&);                                  \
    template Tensor<T> mim_loss(const model::Model<T>&, const model::Encoded<T>&, std::span<const float>,   \
                                std::span<const std::uint8_t>);                                             \
    template Tensor<T> mim_loss(const model::Model<T>&, std::span<const float>, std::size_t,                \
                                std::span<const std::uint8_t>);

VLMO_TRAINING(float)
VLMO_TRAINING(double)

}  // namespace vlmo::training
