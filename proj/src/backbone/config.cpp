#include "vlmo/backbone/config.hpp"

#include "vlmo/errors.hpp"
#include "vlmo/numerics/tensor.hpp"

namespace vlmo::model {

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (layers == 0) fail("layers must be positive");
    if (vl_layers > layers) fail("vl_layers (" + std::to_string(vl_layers) + ") exceeds layers");
    if (hidden == 0 || heads == 0 || hidden % heads != 0) {
        fail("hidden (" + std::to_string(hidden) + ") must be a positive multiple of heads (" + std::to_string(heads) +
             ")");
    }
    if (ffn == 0 || itc_dim == 0) fail("ffn and itc_dim must be positive");
    if (patch == 0 || image_height % patch != 0 || image_width % patch != 0) {
        fail("patch size " + std::to_string(patch) + " must divide the image extent");
    }
    if (channels == 0) fail("channels must be positive");
    if (vocab < 5) fail("vocab too small");
    if (max_text_length < 2) fail("max_text_length must be at least 2");
    if (!(ln_eps > 0)) fail("ln_eps must be positive");
}

ExpertKind route_expert(Modality mode, Segment segment, std::size_t layer, const ModelConfig& config) {
    if (layer < 1 || layer > config.layers) {
        throw ContractError("route_expert: layer " + std::to_string(layer) + " outside 1.." +
                            std::to_string(config.layers));
    }
    if ((mode == Modality::image && segment != Segment::image) ||
        (mode == Modality::text && segment != Segment::text)) {
        throw ContractError("route_expert: segment not present in a unimodal input");
    }
    if (config.experts == ExpertMode::standard) return ExpertKind::shared;
    const ExpertKind own = segment == Segment::image ? ExpertKind::vision : ExpertKind::language;
    if (mode != Modality::pair || config.experts == ExpertMode::mome_no_vl) return own;
    return layer > config.layers - config.vl_layers ? ExpertKind::vision_language : own;
}

std::string_view to_string(ExpertKind kind) {
    switch (kind) {
        case ExpertKind::vision: return "V-FFN";
        case ExpertKind::language: return "L-FFN";
        case ExpertKind::vision_language: return "VL-FFN";
        case ExpertKind::shared: return "FFN";
    }
    return "?";
}

std::string_view to_string(AttentionMode mode) { return mode == AttentionMode::shared ? "shared" : "separate"; }

std::string_view to_string(ExpertMode mode) {
    switch (mode) {
        case ExpertMode::mome: return "mome";
        case ExpertMode::standard: return "standard";
        case ExpertMode::mome_no_vl: return "mome_no_vl";
    }
    return "?";
}

std::string_view to_string(Modality mode) {
    switch (mode) {
        case Modality::image: return "image";
        case Modality::text: return "text";
        case Modality::pair: return "pair";
    }
    return "?";
}

AttentionMode parse_attention_mode(std::string_view s) {
    if (s == "shared") return AttentionMode::shared;
    if (s == "separate") return AttentionMode::separate;
    throw ConfigError("unknown attention mode '" + std::string(s) + "' (shared|separate)");
}

ExpertMode parse_expert_mode(std::string_view s) {
    if (s == "mome") return ExpertMode::mome;
    if (s == "standard") return ExpertMode::standard;
    if (s == "mome_no_vl") return ExpertMode::mome_no_vl;
    throw ConfigError("unknown expert mode '" + std::string(s) + "' (mome|standard|mome_no_vl)");
}

}  // namespace vlmo::model
