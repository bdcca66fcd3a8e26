#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vlmo/data/patch.hpp"
#include "vlmo/data/scene.hpp"
#include "vlmo/data/text.hpp"

namespace vlmo::data {

// Paired corpus: image i pairs with caption i.
struct Corpus {
    std::vector<LatentScene> latents;
    std::vector<Image> images;
    std::vector<std::string> captions;

    std::size_t size() const { return captions.size(); }
};

// The first min(pairs, 512) latents are distinct attribute combinations in
// a seed-dependent order; larger corpora cycle through the combinations
// again with fresh noise seeds.
Corpus generate_corpus(std::size_t pairs, std::uint64_t seed);

// images.bin (u32 LE header count,H,W,C then f32 LE pixels), captions.txt,
// latents.jsonl, vocab.txt.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus read_corpus(const std::filesystem::path& dir);

// Model-ready view of one pair.
struct Example {
    PatchGrid patches;
    TokenSequence tokens;
    std::size_t index = 0;
};

std::vector<Example> make_examples(const Corpus& corpus, std::size_t patch, std::size_t max_text_length);

struct MultimodalBatch {
    std::size_t num_patches = 0;
    std::size_t patch_dim = 0;
    std::vector<float> patches;  // batch x num_patches x patch_dim
    std::vector<TokenSequence> tokens;
    std::vector<MaskedTokens> masked;  // filled by apply_mlm_masks
    std::vector<std::size_t> pair_index;
    std::vector<std::size_t> worker;
    std::size_t num_workers = 1;

    std::size_t size() const { return tokens.size(); }
};

// Examples pool[picks[i]] become batch row i; rows are dealt round-robin to
// num_workers simulated workers.
MultimodalBatch make_batch(std::span<const Example> pool, std::span<const std::size_t> picks, std::size_t num_workers);

void apply_mlm_masks(MultimodalBatch& batch, const MaskingOptions& options, std::mt19937_64& rng);

}  // namespace vlmo::data
