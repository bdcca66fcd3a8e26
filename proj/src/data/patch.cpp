#include "vlmo/data/patch.hpp"

#include <string>

#include "vlmo/numerics/tensor.hpp"

namespace vlmo::data {

namespace {

void check_divisible(std::size_t height, std::size_t width, std::size_t patch) {
    if (patch == 0 || height % patch != 0 || width % patch != 0) {
        throw DimensionError("patch size " + std::to_string(patch) + " does not divide image " +
                             std::to_string(height) + "x" + std::to_string(width));
    }
}

}  // namespace

PatchGrid patchify(const Image& image, std::size_t patch) {
    check_divisible(image.height, image.width, patch);
    if (image.pixels.size() != image.height * image.width * image.channels) {
        throw DimensionError("image pixel buffer does not match its extents");
    }
    PatchGrid grid{{}, image.height, image.width, image.channels, patch};
    const std::size_t per_row = image.width / patch, dim = grid.patch_dim(), c = image.channels;
    grid.patches.resize(grid.count() * dim);
    for (std::size_t n = 0; n < grid.count(); ++n) {
        const std::size_t by = (n / per_row) * patch, bx = (n % per_row) * patch;
        float* out = grid.patches.data() + n * dim;
        for (std::size_t y = 0; y < patch; ++y) {
            for (std::size_t x = 0; x < patch; ++x) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    *out++ = image.pixels[((by + y) * image.width + bx + x) * c + ch];
                }
            }
        }
    }
    return grid;
}

Image unpatchify(const PatchGrid& grid) {
    check_divisible(grid.height, grid.width, grid.patch);
    Image image{grid.height, grid.width, grid.channels, std::vector<float>(grid.height * grid.width * grid.channels)};
    const std::size_t per_row = grid.width / grid.patch, dim = grid.patch_dim(), c = grid.channels;
    for (std::size_t n = 0; n < grid.count(); ++n) {
        const std::size_t by = (n / per_row) * grid.patch, bx = (n % per_row) * grid.patch;
        const float* in = grid.patches.data() + n * dim;
        for (std::size_t y = 0; y < grid.patch; ++y) {
            for (std::size_t x = 0; x < grid.patch; ++x) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    image.pixels[((by + y) * grid.width + bx + x) * c + ch] = *in++;
                }
            }
        }
    }
    return image;
}

}  // namespace vlmo::data
