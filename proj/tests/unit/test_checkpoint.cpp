#include <cstring>
#include <filesystem>
#include <functional>
#include <random>

#include "doctest.h"
#include "vlmo/cli/checkpoint.hpp"
#include "vlmo/cli/run_config.hpp"
#include "vlmo/errors.hpp"
#include "vlmo/training/training.hpp"
#include "vlmo/util/files.hpp"

using namespace vlmo;

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

std::uint64_t meta_length(const std::string& bytes) { return util::get_u64(bytes, 8); }

// Rewrites the metadata JSON and fixes up the length field.
std::string with_meta(const std::string& bytes, const std::function<void(nlohmann::ordered_json&)>& edit) {
    const auto len = meta_length(bytes);
    auto meta = nlohmann::ordered_json::parse(bytes.substr(16, len));
    edit(meta);
    const auto text = meta.dump();
    std::string out = bytes.substr(0, 8);
    util::put_u64(out, text.size());
    return out + text + bytes.substr(16 + len);
}

}  // namespace

TEST_CASE("checkpoint layout and round trip") {
    auto ckpt = training::fresh_checkpoint(small_config(), 5);
    ckpt.stage = "vision";
    ckpt.step = 17;
    ckpt.extra["zeta"] = 1;
    ckpt.extra["alpha"] = "two";
    const auto bytes = cli::serialize_checkpoint(ckpt);

    CHECK(bytes.substr(0, 4) == "VLMO");
    CHECK(util::get_u32(bytes, 4) == cli::kCheckpointVersion);
    std::size_t floats = 0;
    for (const auto& [name, t] : ckpt.params.entries()) floats += t.numel();
    CHECK(bytes.size() == 16 + meta_length(bytes) + 4 * floats);

    auto back = cli::parse_checkpoint(bytes);
    CHECK(back.stage == "vision");
    CHECK(back.step == 17);
    CHECK(back.seed == 5);
    CHECK(cli::config_to_json(back.config) == cli::config_to_json(ckpt.config));
    CHECK(cli::serialize_checkpoint(back) == bytes);
    for (const auto& [name, t] : ckpt.params.entries()) {
        const auto& u = back.params.get(name);
        REQUIRE(u.shape() == t.shape());
        CHECK(std::memcmp(u.data().data(), t.data().data(), 4 * t.numel()) == 0);
    }

    SUBCASE("through a file") {
        const auto path = std::filesystem::temp_directory_path() / "vlmo_ckpt_roundtrip.bin";
        cli::save_checkpoint(ckpt, path);
        CHECK(util::read_file(path) == bytes);
        CHECK(cli::serialize_checkpoint(cli::load_checkpoint(path)) == bytes);
        std::filesystem::remove(path);
    }
    SUBCASE("payload values keep every bit") {
        auto odd = cli::clone(ckpt);
        auto data = odd.params.get("head.itc_image.weight").mutable_data();
        data[0] = -0.0f;
        data[1] = 1e-40f;  // subnormal
        data[2] = std::nextafter(1.0f, 2.0f);
        auto again = cli::parse_checkpoint(cli::serialize_checkpoint(odd));
        const auto d = again.params.get("head.itc_image.weight").data();
        CHECK(std::signbit(d[0]));
        CHECK(d[1] == 1e-40f);
        CHECK(d[2] == std::nextafter(1.0f, 2.0f));
    }
}

TEST_CASE("checkpoint integrity errors") {
    const auto bytes = cli::serialize_checkpoint(training::fresh_checkpoint(small_config(), 1));

    auto flipped = bytes;
    flipped[1] = 'X';
    CHECK_THROWS_AS(cli::parse_checkpoint(flipped), DataError);

    auto version = bytes;
    version[4] = 9;
    CHECK_THROWS_WITH_AS(cli::parse_checkpoint(version), doctest::Contains("version"), DataError);

    for (std::size_t cut : {std::size_t(0), std::size_t(3), std::size_t(15), std::size_t(40), bytes.size() - 1}) {
        CAPTURE(cut);
        CHECK_THROWS_AS(cli::parse_checkpoint(std::string_view(bytes).substr(0, cut)), DataError);
    }
    CHECK_THROWS_AS(cli::parse_checkpoint(bytes + "tail"), DataError);

    auto overlap = with_meta(bytes, [](auto& meta) {
        auto& m = meta["manifest"];
        auto it = std::next(m.begin());
        (*it)["offset"] = 0;
    });
    CHECK_THROWS_WITH_AS(cli::parse_checkpoint(overlap), doctest::Contains("overlap"), DataError);

    auto shape = with_meta(bytes, [](auto& meta) { meta["manifest"].begin().value()["shape"] = {3, 3, 3, 3}; });
    CHECK_THROWS_AS(cli::parse_checkpoint(shape), DataError);

    auto dtype = with_meta(bytes, [](auto& meta) { meta["manifest"].begin().value()["dtype"] = "f16"; });
    CHECK_THROWS_AS(cli::parse_checkpoint(dtype), DataError);

    auto garbage = bytes;
    garbage[16] = '!';
    CHECK_THROWS_AS(cli::parse_checkpoint(garbage), DataError);
}

TEST_CASE("run config parsing") {
    const auto base = cli::parse_run_config("");
    CHECK(base.model.layers == 4);
    CHECK(base.model.hidden == 64);
    CHECK(base.batch_size == 32);

    auto c = cli::parse_run_config(
        "# comment\n"
        "model.layers = 2\n"
        "model.experts = standard   # trailing comment\n"
        "loss.itm = false\n"
        "pretrain.hardneg = local\n"
        "pretrain.lr = 2.5e-4\n");
    CHECK(c.model.layers == 2);
    CHECK(c.model.experts == model::ExpertMode::standard);
    CHECK_FALSE(c.objectives.use_itm);
    CHECK(c.objectives.mining == objectives::MiningMode::local);
    CHECK(c.lr == 2.5e-4);

    CHECK_THROWS_WITH_AS(cli::parse_run_config("model.layerz = 2\n"), doctest::Contains("model.layerz"), ConfigError);
    CHECK_THROWS_WITH_AS(cli::parse_run_config("seed = 1\n\nseed = 2\n"), doctest::Contains("line 3"), ConfigError);
    CHECK_THROWS_AS(cli::parse_run_config("model.layers = -1\n"), ConfigError);
    CHECK_THROWS_AS(cli::parse_run_config("model.layers = 2x\n"), ConfigError);
    CHECK_THROWS_AS(cli::parse_run_config("loss.itc = maybe\n"), ConfigError);
    CHECK_THROWS_AS(cli::parse_run_config("pretrain.hardneg = everywhere\n"), ConfigError);
    CHECK_THROWS_AS(cli::parse_run_config("just words\n"), ConfigError);
    CHECK_THROWS_AS(cli::parse_run_config("model.hidden = 30\n"), ConfigError);  // not a multiple of heads
    CHECK_THROWS_AS(cli::parse_run_config("pretrain.workers = 5\n"), ConfigError);
    CHECK_THROWS_AS(cli::parse_run_config("loss.itc = 0\nloss.itm = 0\nloss.mlm = 0\n"), ConfigError);

    SUBCASE("resolved text reparses to the same config") {
        const auto text = cli::resolved_text(c);
        CHECK(cli::resolved_text(cli::parse_run_config(text)) == text);
        CHECK(cli::config_hash(cli::parse_run_config(text)) == cli::config_hash(c));
        CHECK(cli::config_hash(c) != cli::config_hash(base));
        // One line per key, in table order.
        std::vector<std::string> listed;
        for (std::size_t pos = 0; pos < text.size();) {
            const auto nl = text.find('\n', pos);
            const auto line = text.substr(pos, nl - pos);
            listed.push_back(line.substr(0, line.find('=')));
            pos = nl + 1;
        }
        CHECK(listed == cli::config_keys());
    }
    SUBCASE("overrides") {
        auto o = base;
        cli::apply_setting(o, "model.vl_layers=2");
        CHECK(o.model.vl_layers == 2);
        CHECK_THROWS_AS(cli::apply_setting(o, "nope=1"), ConfigError);
        CHECK_THROWS_AS(cli::apply_setting(o, "model.vl_layers"), ConfigError);
    }
}

TEST_CASE("shipped configs parse") {
    std::size_t n = 0;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(std::string(VLMO_SOURCE_DIR) + "/configs")) {
        if (entry.path().extension() != ".cfg") continue;
        CAPTURE(entry.path().string());
        CHECK_NOTHROW(cli::load_run_config(entry.path()));
        ++n;
    }
    CHECK(n >= 10);
    const auto local = cli::load_run_config(std::string(VLMO_SOURCE_DIR) + "/configs/ablation/hardneg_local.cfg");
    CHECK(local.workers == 4);
    CHECK(local.objectives.mining == objectives::MiningMode::local);
}
