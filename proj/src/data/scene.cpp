#include "vlmo/data/scene.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "vlmo/util/files.hpp"

namespace vlmo::data {

namespace {

constexpr std::array<std::string_view, kNumShapes> kShapeWords{"square", "circle", "triangle", "cross",
                                                               "ring",   "stripe", "checkerboard", "diagonal"};
constexpr std::array<std::string_view, kNumColors> kColorWords{"red",   "green",  "blue",    "yellow",
                                                               "white", "orange", "magenta", "turquoise"};
constexpr std::array<std::array<float, 3>, kNumColors> kColorRgb{{{1.f, 0.f, 0.f},
                                                                   {0.f, 1.f, 0.f},
                                                                   {0.f, 0.f, 1.f},
                                                                   {1.f, 1.f, 0.f},
                                                                   {1.f, 1.f, 1.f},
                                                                   {1.f, .5f, 0.f},
                                                                   {1.f, 0.f, 1.f},
                                                                   {0.f, 1.f, 1.f}}};
constexpr std::array<std::string_view, kNumSizes> kSizeWords{"small", "large"};
constexpr std::array<float, kNumSizes> kExtent{2.0f, 3.5f};
constexpr std::array<std::string_view, 6> kPrefixes{"", "an image of", "a picture of", "a photo of",
                                                    "an illustration of", "a rendering of"};

// dx, dy are pixel-center offsets from the quadrant center (multiples of 0.5).
bool covers(std::size_t shape, float dx, float dy, float e) {
    const float ax = std::abs(dx), ay = std::abs(dy);
    const bool in_box = ax <= e && ay <= e;
    switch (shape) {
        case 0: return in_box;
        case 1: return dx * dx + dy * dy <= e * e;
        case 2: return dy >= -e && dy <= e && ax <= (dy + e) * 0.5f + 0.25f;
        case 3: return in_box && (ax <= e / 3 + 0.2f || ay <= e / 3 + 0.2f);
        case 4: return in_box && std::max(ax, ay) >= e - 1.0f;
        case 5: return ax <= e && ay <= 0.5f;
        case 6: {
            const int cx = static_cast<int>(std::floor(dx + 4.f)), cy = static_cast<int>(std::floor(dy + 4.f));
            return in_box && (cx + cy) % 2 == 0;
        }
        case 7: return in_box && std::abs(dx - dy) <= 1.0f;
        default: throw std::out_of_range("unknown shape id");
    }
}

void check_latent(const LatentScene& latent) {
    if (latent.shape >= kNumShapes || latent.color >= kNumColors || latent.position >= kNumPositions ||
        latent.size >= kNumSizes) {
        throw std::out_of_range("latent attribute out of range");
    }
}

}  // namespace

std::size_t LatentScene::combo() const {
    return ((std::size_t(shape) * kNumColors + color) * kNumPositions + position) * kNumSizes + size;
}

LatentScene LatentScene::from_combo(std::size_t combo, std::uint64_t seed) {
    if (combo >= kNumLatentCombos) throw std::out_of_range("latent combo out of range");
    LatentScene s;
    s.size = static_cast<std::uint8_t>(combo % kNumSizes);
    combo /= kNumSizes;
    s.position = static_cast<std::uint8_t>(combo % kNumPositions);
    combo /= kNumPositions;
    s.color = static_cast<std::uint8_t>(combo % kNumColors);
    s.shape = static_cast<std::uint8_t>(combo / kNumColors);
    s.seed = seed;
    return s;
}

std::string_view shape_word(std::size_t shape) { return kShapeWords.at(shape); }
std::string_view color_word(std::size_t color) { return kColorWords.at(color); }
std::string_view size_word(std::size_t size) { return kSizeWords.at(size); }

std::string position_phrase(std::size_t position) {
    if (position >= kNumPositions) throw std::out_of_range("position out of range");
    std::string phrase = position < 2 ? "top" : "bottom";
    phrase += position % 2 == 0 ? " left" : " right";
    return phrase;
}

Image render_image(const LatentScene& latent) {
    check_latent(latent);
    Image img{kImageSize, kImageSize, kImageChannels, std::vector<float>(kImageSize * kImageSize * kImageChannels, 0.f)};
    const std::size_t half = kImageSize / 2;
    const std::size_t oy = (latent.position / 2) * half, ox = (latent.position % 2) * half;
    const float center = float(half) / 2.f;
    const auto& rgb = kColorRgb[latent.color];
    for (std::size_t y = 0; y < half; ++y) {
        for (std::size_t x = 0; x < half; ++x) {
            const float dx = float(x) + 0.5f - center, dy = float(y) + 0.5f - center;
            if (!covers(latent.shape, dx, dy, kExtent[latent.size])) continue;
            for (std::size_t c = 0; c < kImageChannels; ++c) {
                img.pixels[((oy + y) * kImageSize + ox + x) * kImageChannels + c] = rgb[c];
            }
        }
    }
    std::mt19937_64 rng(util::mix_seed(latent.seed, 2));
    std::normal_distribution<float> noise(0.f, kPixelNoise);
    for (auto& p : img.pixels) p += noise(rng);
    return img;
}

std::string make_caption(const LatentScene& latent) {
    check_latent(latent);
    std::mt19937_64 rng(util::mix_seed(latent.seed, 1));
    auto pick = [&rng](std::size_t n) { return static_cast<std::size_t>(rng() % n); };
    const auto prefix = kPrefixes[pick(kPrefixes.size())];
    const bool with_verb = pick(2) == 1;
    const bool at = pick(2) == 1;
    const bool corner = pick(2) == 1;

    std::string caption;
    if (!prefix.empty()) {
        caption += prefix;
        caption += ' ';
    }
    caption += "a ";
    caption += kSizeWords[latent.size];
    caption += ' ';
    caption += kColorWords[latent.color];
    caption += ' ';
    caption += kShapeWords[latent.shape];
    if (with_verb) caption += " is";
    caption += at ? " at the " : " in the ";
    caption += position_phrase(latent.position);
    if (corner) caption += " corner";
    return caption;
}

ScenePair gen_pair(const LatentScene& latent) { return {render_image(latent), make_caption(latent)}; }

}  // namespace vlmo::data
