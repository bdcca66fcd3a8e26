#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace vlmo::data {

inline constexpr std::size_t kNumShapes = 8;
inline constexpr std::size_t kNumColors = 8;
inline constexpr std::size_t kNumPositions = 4;
inline constexpr std::size_t kNumSizes = 2;
inline constexpr std::size_t kNumLatentCombos = kNumShapes * kNumColors * kNumPositions * kNumSizes;

inline constexpr std::size_t kImageSize = 16;
inline constexpr std::size_t kImageChannels = 3;
inline constexpr float kPixelNoise = 0.05f;

// Attribute tuple that fully determines a rendered image and its caption.
struct LatentScene {
    std::uint8_t shape = 0;     // < kNumShapes
    std::uint8_t color = 0;     // < kNumColors
    std::uint8_t position = 0;  // quadrant: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right
    std::uint8_t size = 0;      // 0 small, 1 large
    std::uint64_t seed = 0;     // drives pixel noise and caption filler choice

    // Dense id in [0, kNumLatentCombos) ignoring the seed.
    std::size_t combo() const;
    static LatentScene from_combo(std::size_t combo, std::uint64_t seed);
    bool same_attributes(const LatentScene& other) const { return combo() == other.combo(); }
};

// H x W x C image, row-major, channel fastest.
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::vector<float> pixels;

    float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
};

struct ScenePair {
    Image image;
    std::string caption;
};

std::string_view shape_word(std::size_t shape);
std::string_view color_word(std::size_t color);
std::string_view size_word(std::size_t size);
// "top left", "top right", ...
std::string position_phrase(std::size_t position);

// Renders the latent's shape and color in its quadrant (plus seeded noise)
// and writes a caption from a fixed template; filler words depend only on
// the seed, so latents that differ in one attribute differ in one word.
ScenePair gen_pair(const LatentScene& latent);
Image render_image(const LatentScene& latent);
std::string make_caption(const LatentScene& latent);

}  // namespace vlmo::data
