#include "vlmo/data/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

#include "vlmo/errors.hpp"
#include "vlmo/util/files.hpp"

namespace vlmo::data {

namespace {

constexpr std::array<std::string_view, kNumPositions> kPositionKeys{"top-left", "top-right", "bottom-left",
                                                                    "bottom-right"};

template <std::size_t N, typename Fn>
std::uint8_t lookup(const std::string& word, Fn name_of, const char* what) {
    for (std::size_t i = 0; i < N; ++i) {
        if (name_of(i) == word) return static_cast<std::uint8_t>(i);
    }
    throw DataError(std::string("unknown ") + what + " '" + word + "' in latents.jsonl");
}

}  // namespace

Corpus generate_corpus(std::size_t pairs, std::uint64_t seed) {
    std::vector<std::size_t> order(kNumLatentCombos);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(util::mix_seed(seed, 0));
    std::shuffle(order.begin(), order.end(), rng);
    Corpus corpus;
    corpus.latents.reserve(pairs);
    for (std::size_t i = 0; i < pairs; ++i) {
        auto latent = LatentScene::from_combo(order[i % kNumLatentCombos], util::mix_seed(seed, 1000 + i));
        auto pair = gen_pair(latent);
        corpus.latents.push_back(latent);
        corpus.images.push_back(std::move(pair.image));
        corpus.captions.push_back(std::move(pair.caption));
    }
    return corpus;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());

    std::string images;
    util::put_u32(images, static_cast<std::uint32_t>(corpus.size()));
    util::put_u32(images, static_cast<std::uint32_t>(kImageSize));
    util::put_u32(images, static_cast<std::uint32_t>(kImageSize));
    util::put_u32(images, static_cast<std::uint32_t>(kImageChannels));
    for (const auto& img : corpus.images) {
        if (img.height != kImageSize || img.width != kImageSize || img.channels != kImageChannels) {
            throw DataError("corpus image extents differ from the header");
        }
        for (float p : img.pixels) util::put_f32(images, p);
    }
    util::write_file_atomic(dir / "images.bin", images);

    std::string captions, latents;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        captions += corpus.captions[i];
        captions += '\n';
        const auto& l = corpus.latents[i];
        nlohmann::ordered_json record{{"index", i},
                                      {"shape", shape_word(l.shape)},
                                      {"color", color_word(l.color)},
                                      {"position", kPositionKeys[l.position]},
                                      {"size", size_word(l.size)},
                                      {"seed", l.seed}};
        latents += record.dump();
        latents += '\n';
    }
    util::write_file_atomic(dir / "captions.txt", captions);
    util::write_file_atomic(dir / "latents.jsonl", latents);

    std::string vocab;
    for (const auto& token : Vocabulary::toy().tokens()) {
        vocab += token;
        vocab += '\n';
    }
    util::write_file_atomic(dir / "vocab.txt", vocab);
}

Corpus read_corpus(const std::filesystem::path& dir) {
    Corpus corpus;
    const std::string images = util::read_file(dir / "images.bin");
    const std::size_t count = util::get_u32(images, 0);
    const std::size_t h = util::get_u32(images, 4), w = util::get_u32(images, 8), c = util::get_u32(images, 12);
    const std::size_t per_image = h * w * c;
    if (images.size() != 16 + count * per_image * 4) {
        throw DataError("images.bin holds " + std::to_string(images.size()) + " bytes, header implies " +
                        std::to_string(16 + count * per_image * 4));
    }
    for (std::size_t i = 0; i < count; ++i) {
        Image img{h, w, c, std::vector<float>(per_image)};
        for (std::size_t k = 0; k < per_image; ++k) img.pixels[k] = util::get_f32(images, 16 + (i * per_image + k) * 4);
        corpus.images.push_back(std::move(img));
    }

    std::istringstream captions(util::read_file(dir / "captions.txt"));
    for (std::string line; std::getline(captions, line);) corpus.captions.push_back(line);

    std::istringstream latents(util::read_file(dir / "latents.jsonl"));
    for (std::string line; std::getline(latents, line);) {
        if (line.empty()) continue;
        nlohmann::json record;
        try {
            record = nlohmann::json::parse(line);
            LatentScene l;
            l.shape = lookup<kNumShapes>(record.at("shape").get<std::string>(), shape_word, "shape");
            l.color = lookup<kNumColors>(record.at("color").get<std::string>(), color_word, "color");
            l.position = lookup<kNumPositions>(record.at("position").get<std::string>(),
                                               [](std::size_t i) { return kPositionKeys[i]; }, "position");
            l.size = lookup<kNumSizes>(record.at("size").get<std::string>(), size_word, "size");
            l.seed = record.at("seed").get<std::uint64_t>();
            corpus.latents.push_back(l);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("malformed latents.jsonl record: ") + e.what());
        }
    }
    if (corpus.captions.size() != count || corpus.latents.size() != count) {
        throw DataError("corpus files disagree on pair count: images " + std::to_string(count) + ", captions " +
                        std::to_string(corpus.captions.size()) + ", latents " + std::to_string(corpus.latents.size()));
    }
    return corpus;
}

std::vector<Example> make_examples(const Corpus& corpus, std::size_t patch, std::size_t max_text_length) {
    std::vector<Example> out;
    out.reserve(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        out.push_back({patchify(corpus.images[i], patch), tokenize(corpus.captions[i], max_text_length), i});
    }
    return out;
}

MultimodalBatch make_batch(std::span<const Example> pool, std::span<const std::size_t> picks, std::size_t num_workers) {
    if (num_workers == 0 || picks.empty() || picks.size() % num_workers != 0) {
        throw ConfigError("batch size " + std::to_string(picks.size()) + " is not divisible by " +
                          std::to_string(num_workers) + " workers");
    }
    MultimodalBatch batch;
    batch.num_workers = num_workers;
    const auto& first = pool[picks.front()].patches;
    batch.num_patches = first.count();
    batch.patch_dim = first.patch_dim();
    batch.patches.reserve(picks.size() * batch.num_patches * batch.patch_dim);
    for (std::size_t i = 0; i < picks.size(); ++i) {
        const auto& ex = pool[picks[i]];
        if (ex.patches.count() != batch.num_patches || ex.patches.patch_dim() != batch.patch_dim) {
            throw DataError("make_batch: examples disagree on patch layout");
        }
        batch.patches.insert(batch.patches.end(), ex.patches.patches.begin(), ex.patches.patches.end());
        batch.tokens.push_back(ex.tokens);
        batch.pair_index.push_back(ex.index);
        batch.worker.push_back(i % num_workers);
    }
    return batch;
}

void apply_mlm_masks(MultimodalBatch& batch, const MaskingOptions& options, std::mt19937_64& rng) {
    batch.masked.clear();
    for (const auto& t : batch.tokens) batch.masked.push_back(whole_word_mask(t, options, rng));
}

}  // namespace vlmo::data
