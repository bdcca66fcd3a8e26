#pragma once

#include <cstddef>
#include <vector>

#include "vlmo/data/scene.hpp"

namespace vlmo::data {

// N = H*W/P^2 patches, each the flattened P x P x C block (row, column,
// channel order). Patches are numbered in row-major block order.
struct PatchGrid {
    std::vector<float> patches;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::size_t patch = 0;

    std::size_t count() const { return (height / patch) * (width / patch); }
    std::size_t patch_dim() const { return patch * patch * channels; }
};

PatchGrid patchify(const Image& image, std::size_t patch);
Image unpatchify(const PatchGrid& grid);

}  // namespace vlmo::data
