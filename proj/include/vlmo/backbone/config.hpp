#pragma once

#include <cstddef>
#include <string>
#include <string_view>

namespace vlmo::model {

enum class AttentionMode { shared, separate };
enum class ExpertMode { mome, standard, mome_no_vl };
enum class Modality { image, text, pair };
enum class Segment { image, text };
// `shared` is the single FFN of the standard-Transformer ablation.
enum class ExpertKind { vision, language, vision_language, shared };

struct ModelConfig {
    std::size_t layers = 4;
    std::size_t hidden = 64;
    std::size_t heads = 4;
    std::size_t ffn = 256;
    std::size_t vl_layers = 1;  // F: top layers routing pair input to the VL expert
    std::size_t patch = 4;
    std::size_t image_height = 16;
    std::size_t image_width = 16;
    std::size_t channels = 3;
    std::size_t vocab = 64;
    std::size_t max_text_length = 24;
    std::size_t itc_dim = 32;
    AttentionMode attention = AttentionMode::shared;
    ExpertMode experts = ExpertMode::mome;
    double ln_eps = 1e-5;

    std::size_t num_patches() const { return (image_height / patch) * (image_width / patch); }
    std::size_t patch_dim() const { return patch * patch * channels; }
    // Throws ConfigError.
    void validate() const;
    // Layers 1..L-F get modality-specific attention in separate mode.
    bool separate_attention_at(std::size_t layer) const {
        return attention == AttentionMode::separate && layer <= layers - vl_layers;
    }
};

// Expert FFN for positions of `segment` at 1-based `layer` when the input is
// of the given modality. Throws ContractError for a layer outside 1..L or a
// segment the modality does not contain.
ExpertKind route_expert(Modality mode, Segment segment, std::size_t layer, const ModelConfig& config);

std::string_view to_string(ExpertKind kind);
std::string_view to_string(AttentionMode mode);
std::string_view to_string(ExpertMode mode);
std::string_view to_string(Modality mode);
// Throw ConfigError on unknown names.
AttentionMode parse_attention_mode(std::string_view s);
ExpertMode parse_expert_mode(std::string_view s);

}  // namespace vlmo::model
