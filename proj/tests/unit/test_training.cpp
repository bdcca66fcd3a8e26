#include <algorithm>
#include <cstring>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "vlmo/errors.hpp"
#include "vlmo/numerics/ops.hpp"
#include "vlmo/training/training.hpp"

using namespace vlmo;
using namespace vlmo::training;

namespace {

model::ModelConfig small_config() {
    model::ModelConfig c;
    c.layers = 2;
    c.hidden = 16;
    c.heads = 2;
    c.ffn = 32;
    c.itc_dim = 8;
    return c;
}

std::vector<data::Example> toy_examples(std::size_t n, std::uint64_t seed) {
    return data::make_examples(data::generate_corpus(n, seed), 4, 24);
}

bool is_attention(const std::string& name) { return name.find(".attn") != std::string::npos; }
bool has(const std::string& name, const char* part) { return name.find(part) != std::string::npos; }

bool same_bytes(const Tensor<float>& a, const Tensor<float>& b) {
    return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin(),
                                                [](float x, float y) { return std::memcmp(&x, &y, 4) == 0; });
}

}  // namespace

TEST_CASE("stage names") {
    CHECK(parse_stage("vision") == Stage::vision);
    CHECK(parse_stage("text") == Stage::text);
    CHECK(parse_stage("vl") == Stage::vision_language);
    CHECK(parse_stage("vision-language") == Stage::vision_language);
    CHECK_THROWS_AS(parse_stage("audio"), ConfigError);
    CHECK(default_steps(Stage::vision) == 2000);
    CHECK(default_steps(Stage::text) == 1000);
    CHECK(default_steps(Stage::vision_language) == 3000);
}

TEST_CASE("freeze_mask") {
    CHECK_THROWS_AS(freeze_mask(Stage::text, {}), ContractError);
    for (auto attention : {model::AttentionMode::shared, model::AttentionMode::separate}) {
        auto c = small_config();
        c.attention = attention;
        const auto manifest = model::parameter_manifest(c);

        const auto text = freeze_mask(Stage::text, manifest);
        std::size_t attention_seen = 0;
        for (const auto& [name, shape] : manifest) {
            const bool frozen = text.count(name) > 0;
            if (is_attention(name)) {
                ++attention_seen;
                CHECK_MESSAGE(frozen, name);
            }
            if (has(name, ".ffn_v.") || has(name, ".ffn_vl.")) CHECK_MESSAGE(frozen, name);
            if (name.rfind("image.", 0) == 0) CHECK_MESSAGE(frozen, name);
            if (has(name, ".ffn_l.") || name.rfind("text.", 0) == 0 || name.rfind("head.mlm.", 0) == 0) {
                CHECK_MESSAGE(!frozen, name);
            }
            if (name.rfind("head.itc", 0) == 0 || name.rfind("head.itm", 0) == 0 || name == "itc.log_temperature") {
                CHECK_MESSAGE(frozen, name);
            }
        }
        CHECK(attention_seen > 0);
        CHECK(text.count("image.patch_proj.weight"));
        CHECK(text.count("image.pos"));
        CHECK(text.count("image.type"));
        CHECK_FALSE(text.count("text.pos"));

        const auto vision = freeze_mask(Stage::vision, manifest);
        for (const auto& [name, shape] : manifest) {
            const bool trainable = vision.count(name) == 0;
            const bool expected = is_attention(name) || has(name, ".ffn_v.") || name.rfind("image.", 0) == 0 ||
                                  name.rfind("head.mim.", 0) == 0;
            CHECK_MESSAGE(trainable == expected, name);
        }
        CHECK(freeze_mask(Stage::vision_language, manifest).empty());
    }
    SUBCASE("standard FFN is trained in both unimodal stages") {
        auto c = small_config();
        c.experts = model::ExpertMode::standard;
        const auto manifest = model::parameter_manifest(c);
        CHECK_FALSE(freeze_mask(Stage::vision, manifest).count("layer.1.ffn.fc1.weight"));
        CHECK_FALSE(freeze_mask(Stage::text, manifest).count("layer.1.ffn.fc1.weight"));
        CHECK(freeze_mask(Stage::text, manifest).count("layer.1.attn.qkv.weight"));
    }
}

TEST_CASE("lr_schedule") {
    StagePlan plan;
    plan.steps = 100;
    plan.warmup_steps = 10;
    plan.peak_lr = 1e-3;
    CHECK(lr_schedule(0, plan) == 0.0);
    CHECK(lr_schedule(10, plan) == doctest::Approx(1e-3));
    CHECK(lr_schedule(100, plan) == 0.0);
    CHECK(lr_schedule(5, plan) == doctest::Approx(5e-4));
    CHECK(lr_schedule(55, plan) == doctest::Approx(5e-4));
    CHECK_THROWS_AS(lr_schedule(101, plan), ContractError);
    double previous = 1.0;
    for (std::size_t s = 10; s <= 100; ++s) {
        CHECK(lr_schedule(s, plan) <= previous);
        previous = lr_schedule(s, plan);
    }
    auto made = make_plan(Stage::vision, small_config(), 2000);
    CHECK(made.warmup_steps == 200);
    CHECK(made.batch_size == 32);
    CHECK(made.peak_lr == 1e-3);
}

TEST_CASE("block_mask") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 300; ++trial) {
        auto mask = block_mask(4, 4, 0.4, rng);
        REQUIRE(mask.size() == 16);
        CHECK(std::count(mask.begin(), mask.end(), 1) == 6);
    }
    auto all = block_mask(4, 4, 1.0, rng);
    CHECK(std::count(all.begin(), all.end(), 1) == 16);
    auto one = block_mask(4, 4, 0.01, rng);
    CHECK(std::count(one.begin(), one.end(), 1) == 1);
    CHECK_THROWS_AS(block_mask(4, 4, 0.0, rng), ContractError);

    // Contiguity: on average masked patches touch other masked patches far
    // more often than a uniform draw of six patches would.
    std::mt19937_64 r2(5);
    double touching = 0, uniform_touching = 0;
    for (int trial = 0; trial < 500; ++trial) {
        auto mask = block_mask(4, 4, 0.4, r2);
        std::vector<std::uint8_t> uniform(16, 0);
        std::vector<int> idx(16);
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), r2);
        for (int k = 0; k < 6; ++k) uniform[idx[k]] = 1;
        auto count_pairs = [](const std::vector<std::uint8_t>& m) {
            int pairs = 0;
            for (int r = 0; r < 4; ++r)
                for (int c = 0; c < 4; ++c) {
                    if (!m[r * 4 + c]) continue;
                    if (c + 1 < 4 && m[r * 4 + c + 1]) ++pairs;
                    if (r + 1 < 4 && m[(r + 1) * 4 + c]) ++pairs;
                }
            return pairs;
        };
        touching += count_pairs(mask);
        uniform_touching += count_pairs(uniform);
    }
    CHECK(touching > 1.3 * uniform_touching);
}

TEST_CASE("normalized_patch_targets") {
    std::vector<float> patches{1, 2, 3, 4, 5, 5, 5, 5};
    auto t = normalized_patch_targets(patches, 4);
    double mean = (t[0] + t[1] + t[2] + t[3]) / 4.0;
    double var = 0;
    for (int i = 0; i < 4; ++i) var += (t[i] - mean) * (t[i] - mean) / 4.0;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-5));
    // 1.25 variance: (x - 2.5) / sqrt(1.25 + 1e-6)
    CHECK(t[0] == doctest::Approx(-1.5 / std::sqrt(1.25 + 1e-6)).epsilon(1e-6));
    for (int i = 4; i < 8; ++i) CHECK(t[i] == 0.0f);
    CHECK_THROWS_AS(normalized_patch_targets(patches, 3), DimensionError);
}

TEST_CASE("mim_loss") {
    SUBCASE("regression arithmetic") {
        auto target = Tensor<double>::from({2, 3}, {0.5, -1, 2, 0, 0, 1});
        CHECK(mse_loss(target, target).item() == 0.0);
        auto shifted = Tensor<double>::from({2, 3}, {1.5, 0, 3, 1, 1, 2});
        CHECK(mse_loss(shifted, target).item() == doctest::Approx(1.0));
    }
    auto c = small_config();
    model::Model<double> m(c, 3);
    auto examples = toy_examples(3, 4);
    std::vector<float> patches;
    for (const auto& ex : examples) patches.insert(patches.end(), ex.patches.patches.begin(), ex.patches.patches.end());
    const std::size_t n = c.num_patches();

    std::vector<std::uint8_t> none(3 * n, 0);
    CHECK_THROWS_AS(mim_loss(m, std::span<const float>(patches), 3, none), ContractError);

    std::mt19937_64 rng(9);
    std::vector<std::uint8_t> masked;
    for (int b = 0; b < 3; ++b) {
        auto mask = block_mask(4, 4, 0.4, rng);
        masked.insert(masked.end(), mask.begin(), mask.end());
    }
    auto loss = mim_loss(m, std::span<const float>(patches), 3, masked);
    CHECK(std::isfinite(loss.item()));
    CHECK(loss.item() > 0.0);

    SUBCASE("a zero head predicts zeros, so the loss is the target second moment") {
        model::Model<double> zero(c, 3);
        for (auto& v : zero.params().get("head.mim.weight").mutable_data()) v = 0;
        std::vector<float> picked;
        for (std::size_t r = 0; r < masked.size(); ++r) {
            if (!masked[r]) continue;
            auto p = std::span<const float>(patches).subspan(r * c.patch_dim(), c.patch_dim());
            picked.insert(picked.end(), p.begin(), p.end());
        }
        auto t = normalized_patch_targets(picked, c.patch_dim());
        double expected = 0;
        for (float v : t) expected += double(v) * v;
        expected /= double(t.size());
        CHECK(mim_loss(zero, std::span<const float>(patches), 3, masked).item() ==
              doctest::Approx(expected).epsilon(1e-9));
    }
    SUBCASE("unmasked patches do not feed the loss through the mask embedding") {
        m.params().zero_grad();
        mim_loss(m, std::span<const float>(patches), 3, masked).backward();
        CHECK(m.param("image.mask").has_grad());
        CHECK_FALSE(m.param("head.mlm.weight").has_grad());
        CHECK_FALSE(m.param("text.word").has_grad());
        m.params().zero_grad();
    }
    SUBCASE("gradient matches finite differences") {
        std::vector<Tensor<double>> inputs;
        std::vector<std::string> names;
        for (auto& [name, t] : m.params().entries()) {
            if (name.rfind("text.", 0) == 0 || has(name, "ffn_l") || has(name, "ffn_vl") || name.rfind("head.", 0) == 0 &&
                name.rfind("head.mim", 0) != 0 || name == "itc.log_temperature")
                continue;
            inputs.push_back(t);
            names.push_back(name);
        }
        auto worst = fd::worst_mismatch(
            inputs, [&] { return mim_loss(m, std::span<const float>(patches), 3, masked); }, 1e-5, 6);
        CHECK_MESSAGE(worst.rel < 1e-4, names[worst.input], " ", worst.analytic, " vs ", worst.numeric);
    }
}

TEST_CASE("stage order") {
    CHECK(check_stage_order("init", Stage::vision).empty());
    CHECK(check_stage_order("vision", Stage::text).empty());
    CHECK(check_stage_order("text", Stage::vision_language).empty());
    CHECK(check_stage_order("vision", Stage::vision_language).empty());
    CHECK_FALSE(check_stage_order("init", Stage::vision_language).empty());
    CHECK_THROWS_AS(check_stage_order("init", Stage::text), UsageError);
    CHECK_THROWS_AS(check_stage_order("vl", Stage::text), UsageError);
    CHECK_THROWS_AS(check_stage_order("vision", Stage::vision), UsageError);
    CHECK_THROWS_AS(check_stage_order("text", Stage::vision), UsageError);
    CHECK_THROWS_AS(check_stage_order("retrieval", Stage::vision_language), UsageError);
}

TEST_CASE("EpochSampler") {
    EpochSampler s(10, 1);
    std::vector<std::size_t> seen;
    for (int i = 0; i < 3; ++i) {
        auto b = s.next(3);
        seen.insert(seen.end(), b.begin(), b.end());
    }
    std::sort(seen.begin(), seen.end());
    CHECK(std::adjacent_find(seen.begin(), seen.end()) == seen.end());
    CHECK(s.next(3).size() == 3);  // reshuffles: only one left in the epoch
    CHECK_THROWS_AS(s.next(11), ContractError);
}

TEST_CASE("Optimizer keeps state for trainable parameters only") {
    auto c = small_config();
    auto ckpt = fresh_checkpoint(c, 1);
    auto plan = make_plan(Stage::text, c, 1);
    Optimizer opt(ckpt.params, plan.frozen, {});
    CHECK(opt.state_count() == ckpt.params.size() - plan.frozen.size());
    for (const auto& [name, t] : ckpt.params.entries()) CHECK(opt.has_state(name) == (plan.frozen.count(name) == 0));
}

TEST_CASE("train_stage") {
    auto c = small_config();
    auto pool = toy_examples(48, 2);
    auto fresh = fresh_checkpoint(c, 11);

    SUBCASE("zero steps return the input parameters") {
        auto out = train_stage(make_plan(Stage::vision, c, 0, 8), pool, fresh, 1);
        CHECK(out.stage == "vision");
        CHECK(out.step == 0);
        for (const auto& [name, t] : fresh.params.entries()) CHECK(same_bytes(t, out.params.get(name)));
    }
    SUBCASE("freeze contract and stage order") {
        auto vision = train_stage(make_plan(Stage::vision, c, 6, 8), pool, fresh, 1);
        CHECK_THROWS_AS(train_stage(make_plan(Stage::text, c, 6, 8), pool, fresh, 1), UsageError);
        auto plan = make_plan(Stage::text, c, 6, 8);
        auto text = train_stage(plan, pool, vision, 1);
        CHECK(text.stage == "text");
        std::size_t changed = 0;
        for (const auto& [name, t] : vision.params.entries()) {
            const bool same = same_bytes(t, text.params.get(name));
            if (plan.frozen.count(name)) {
                CHECK_MESSAGE(same, name);
            } else {
                changed += !same;
            }
        }
        CHECK(changed > 0);
        CHECK_FALSE(same_bytes(vision.params.get("layer.1.ffn_l.fc1.weight"), text.params.get("layer.1.ffn_l.fc1.weight")));

        // The vision stage leaves the language side alone.
        auto vplan = make_plan(Stage::vision, c, 6, 8);
        for (const auto& name : vplan.frozen) CHECK(same_bytes(fresh.params.get(name), vision.params.get(name)));
    }
    SUBCASE("VL from a fresh model warns and proceeds") {
        std::vector<std::string> warnings;
        TrainOptions o;
        o.on_warning = [&](const std::string& w) { warnings.push_back(w); };
        o.workers = 2;
        auto out = train_stage(make_plan(Stage::vision_language, c, 2, 8), pool, fresh, 1, o);
        CHECK(warnings.size() == 1);
        CHECK(out.stage == "vl");
    }
    SUBCASE("determinism") {
        TrainOptions o;
        auto a = train_stage(make_plan(Stage::vision_language, c, 3, 8), pool, fresh, 5, o);
        auto b = train_stage(make_plan(Stage::vision_language, c, 3, 8), pool, fresh, 5, o);
        CHECK(cli::serialize_checkpoint(a) == cli::serialize_checkpoint(b));
        auto d = train_stage(make_plan(Stage::vision_language, c, 3, 8), pool, fresh, 6, o);
        CHECK(cli::serialize_checkpoint(a) != cli::serialize_checkpoint(d));
    }
    SUBCASE("data errors") {
        auto small = toy_examples(4, 2);
        CHECK_THROWS_AS(train_stage(make_plan(Stage::vision, c, 2, 8), small, fresh, 1), DataError);
        auto broken = pool;
        broken[3].patches.patches.clear();
        CHECK_THROWS_AS(train_stage(make_plan(Stage::vision, c, 2, 8), broken, fresh, 1), DataError);
    }
    SUBCASE("metrics and periodic checkpoints") {
        TrainOptions o;
        std::vector<StepRecord> records;
        std::vector<std::uint64_t> saved;
        o.on_step = [&](const StepRecord& r) { records.push_back(r); };
        o.on_checkpoint = [&](const cli::Checkpoint& k) { saved.push_back(k.step); };
        o.checkpoint_every = 2;
        train_stage(make_plan(Stage::vision, c, 5, 8), pool, fresh, 1, o);
        REQUIRE(records.size() == 5);
        CHECK(records[0].step == 0);
        CHECK(records[4].lr == 0.0);
        CHECK(saved == std::vector<std::uint64_t>{2, 4});
    }
}

TEST_CASE("each stage lowers its training loss (3 seeds)") {
    auto c = small_config();
    auto pool = toy_examples(128, 3);
    const Stage stages[3] = {Stage::vision, Stage::text, Stage::vision_language};
    const std::size_t steps[3] = {80, 80, 40};
    double first[3] = {0, 0, 0}, last[3] = {0, 0, 0};
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        auto ckpt = fresh_checkpoint(c, seed);
        for (int k = 0; k < 3; ++k) {
            TrainOptions o;
            o.on_step = [&](const StepRecord& r) {
                if (r.step == 0) first[k] += r.loss / 3;
                if (r.step + 1 == steps[k]) last[k] += r.loss / 3;
            };
            ckpt = train_stage(make_plan(stages[k], c, steps[k], 16, 3e-3), pool, ckpt, seed, o);
        }
    }
    for (int k = 0; k < 3; ++k) {
        MESSAGE(to_string(stages[k]), " loss ", first[k], " -> ", last[k]);
        CHECK(last[k] < first[k]);
    }
}
