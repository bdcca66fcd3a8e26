#include "vlmo/cli/checkpoint.hpp"

#include <algorithm>
#include <cstring>

#include "vlmo/errors.hpp"
#include "vlmo/util/files.hpp"

namespace vlmo::cli {

namespace {

constexpr char kMagic[4] = {'V', 'L', 'M', 'O'};
constexpr std::size_t kHeader = 4 + 4 + 8;

}  // namespace

nlohmann::ordered_json config_to_json(const model::ModelConfig& c) {
    return {{"layers", c.layers},
            {"hidden", c.hidden},
            {"heads", c.heads},
            {"ffn", c.ffn},
            {"vl_layers", c.vl_layers},
            {"patch", c.patch},
            {"image_height", c.image_height},
            {"image_width", c.image_width},
            {"channels", c.channels},
            {"vocab", c.vocab},
            {"max_text_length", c.max_text_length},
            {"itc_dim", c.itc_dim},
            {"attention", std::string(model::to_string(c.attention))},
            {"experts", std::string(model::to_string(c.experts))},
            {"ln_eps", c.ln_eps}};
}

model::ModelConfig config_from_json(const nlohmann::ordered_json& j) {
    model::ModelConfig c;
    try {
        c.layers = j.at("layers").get<std::size_t>();
        c.hidden = j.at("hidden").get<std::size_t>();
        c.heads = j.at("heads").get<std::size_t>();
        c.ffn = j.at("ffn").get<std::size_t>();
        c.vl_layers = j.at("vl_layers").get<std::size_t>();
        c.patch = j.at("patch").get<std::size_t>();
        c.image_height = j.at("image_height").get<std::size_t>();
        c.image_width = j.at("image_width").get<std::size_t>();
        c.channels = j.at("channels").get<std::size_t>();
        c.vocab = j.at("vocab").get<std::size_t>();
        c.max_text_length = j.at("max_text_length").get<std::size_t>();
        c.itc_dim = j.at("itc_dim").get<std::size_t>();
        c.attention = model::parse_attention_mode(j.at("attention").get<std::string>());
        c.experts = model::parse_expert_mode(j.at("experts").get<std::string>());
        c.ln_eps = j.at("ln_eps").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint config: ") + e.what());
    } catch (const ConfigError& e) {
        throw DataError(std::string("checkpoint config: ") + e.what());
    }
    return c;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    nlohmann::ordered_json manifest = nlohmann::ordered_json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.params.entries()) {
        const std::uint64_t length = t.numel() * 4;
        manifest[name] = {{"dtype", "f32"}, {"shape", t.shape()}, {"offset", offset}, {"length", length}};
        offset += length;
    }
    nlohmann::ordered_json meta{{"config", config_to_json(ckpt.config)},
                                {"stage", ckpt.stage},
                                {"step", ckpt.step},
                                {"seed", ckpt.seed},
                                {"extra", ckpt.extra},
                                {"manifest", manifest}};
    const std::string text = meta.dump();
    std::string out(kMagic, 4);
    util::put_u32(out, kCheckpointVersion);
    util::put_u64(out, text.size());
    out += text;
    out.reserve(out.size() + offset);
    for (const auto& [name, t] : ckpt.params.entries()) {
        for (float v : t.data()) util::put_f32(out, v);
    }
    return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
    if (bytes.size() < kHeader) throw DataError("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw DataError("checkpoint has bad magic bytes");
    const auto version = util::get_u32(bytes, 4);
    if (version != kCheckpointVersion) {
        throw DataError("checkpoint format version " + std::to_string(version) + " unsupported (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    }
    const auto meta_length = util::get_u64(bytes, 8);
    if (meta_length > bytes.size() - kHeader) throw DataError("checkpoint truncated inside metadata");
    nlohmann::ordered_json meta;
    try {
        meta = nlohmann::ordered_json::parse(bytes.substr(kHeader, meta_length));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
    }
    const std::string_view payload = bytes.substr(kHeader + meta_length);

    Checkpoint ckpt;
    ckpt.config = config_from_json(meta.at("config"));
    try {
        ckpt.stage = meta.at("stage").get<std::string>();
        ckpt.step = meta.at("step").get<std::uint64_t>();
        ckpt.seed = meta.at("seed").get<std::uint64_t>();
        ckpt.extra = meta.value("extra", nlohmann::ordered_json::object());

        struct Span {
            std::uint64_t offset, length;
            std::string name;
        };
        std::vector<Span> spans;
        // Parameter order follows offsets, whatever order the keys come in.
        for (const auto& [name, entry] : meta.at("manifest").items()) {
            if (entry.at("dtype").get<std::string>() != "f32") {
                throw DataError("checkpoint tensor '" + name + "' has unsupported dtype");
            }
            const auto shape = entry.at("shape").get<Shape>();
            const auto offset = entry.at("offset").get<std::uint64_t>();
            const auto length = entry.at("length").get<std::uint64_t>();
            if (length != shape_numel(shape) * 4) {
                throw DataError("checkpoint tensor '" + name + "' length " + std::to_string(length) +
                                " does not match shape " + shape_str(shape));
            }
            spans.push_back({offset, length, name});
        }
        std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) { return a.offset < b.offset; });
        std::uint64_t expected = 0;
        for (const auto& s : spans) {
            if (s.offset < expected) throw DataError("checkpoint manifest entries overlap at '" + s.name + "'");
            if (s.offset > expected) throw DataError("checkpoint manifest leaves a gap before '" + s.name + "'");
            expected = s.offset + s.length;
        }
        if (expected != payload.size()) {
            throw DataError("checkpoint payload holds " + std::to_string(payload.size()) + " bytes, manifest covers " +
                            std::to_string(expected));
        }
        for (const auto& s : spans) {
            const auto shape = meta.at("manifest").at(s.name).at("shape").get<Shape>();
            std::vector<float> values(shape_numel(shape));
            for (std::size_t i = 0; i < values.size(); ++i) values[i] = util::get_f32(payload, s.offset + i * 4);
            ckpt.params.add(s.name, Tensor<float>::from(shape, std::move(values), true));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint metadata malformed: ") + e.what());
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    util::write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(util::read_file(path)); }

Checkpoint clone(const Checkpoint& ckpt) {
    Checkpoint out;
    out.config = ckpt.config;
    out.stage = ckpt.stage;
    out.step = ckpt.step;
    out.seed = ckpt.seed;
    out.extra = ckpt.extra;
    out.params = ckpt.params.cast<float>();
    return out;
}

}  // namespace vlmo::cli
