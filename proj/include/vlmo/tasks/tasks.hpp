#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "vlmo/backbone/model.hpp"
#include "vlmo/cli/checkpoint.hpp"
#include "vlmo/data/corpus.hpp"

namespace vlmo::tasks {

// Unit-norm ITC embeddings from image-only and text-only encodes.
struct RetrievalIndex {
    Tensor<float> images;  // N_img x itc_dim
    Tensor<float> texts;   // N_txt x itc_dim
    std::vector<std::size_t> image_ids;
    std::vector<std::size_t> text_ids;
};

// One backbone forward per image and per text; `chunk` bounds batch size.
RetrievalIndex build_index(const model::Model<float>& model, std::span<const data::Example> images,
                           std::span<const data::Example> texts, std::size_t chunk = 64);

struct Rankings {
    std::size_t images = 0, texts = 0;
    std::vector<float> scores;                     // images x texts, s[i][j] = <img_i, txt_j>
    std::vector<std::vector<std::size_t>> i2t;     // per image: text ids, best first
    std::vector<std::vector<std::size_t>> t2i;     // per text: image ids, best first
};

// Plain sequential dot product; both the index scoring and any pairwise
// recomputation go through it, so they agree bit for bit.
float pair_score(const RetrievalIndex& index, std::size_t image, std::size_t text);

// Stable descending sort, lower id first on ties.
Rankings score_and_rank(const RetrievalIndex& index);
Rankings rank_scores(std::vector<float> scores, std::size_t images, std::size_t texts);

// Fraction of queries whose ground-truth candidate is in the top k.
double recall_at_k(const std::vector<std::vector<std::size_t>>& rankings, std::span<const std::size_t> truth,
                   std::size_t k);

struct RecallReport {
    double i2t[3] = {0, 0, 0};  // R@1, R@5, R@10
    double t2i[3] = {0, 0, 0};
};

// Ground truth is the diagonal (image i pairs with text i).
RecallReport diagonal_recall(const Rankings& rankings);

// Fusion-encoder scoring of every (image, text) combination through the
// ITM head: probability of "match". N*M pair forwards.
std::vector<float> fusion_scores(const model::Model<float>& model, std::span<const data::Example> images,
                                 std::span<const data::Example> texts, std::size_t chunk = 64);

struct RetrievalOptions {
    std::size_t steps = 500;
    std::size_t batch_size = 32;
    double peak_lr = 5e-4;
    std::size_t workers = 1;
    std::function<void(std::size_t step, double loss, double lr)> on_step;
};

// ITC-only training through the dual-encoder routes.
cli::Checkpoint finetune_retrieval(const cli::Checkpoint& ckpt, std::span<const data::Example> pool,
                                   std::uint64_t seed, const RetrievalOptions& options = {});

struct ClassifierHead {
    Tensor<float> weight;  // in_dim x classes
    Tensor<float> bias;    // classes

    std::size_t in_dim() const { return weight.dim(0); }
    std::size_t classes() const { return weight.dim(1); }
    static ClassifierHead init(std::size_t in_dim, std::size_t classes, std::uint64_t seed);
};

// Fusion encode, T_CLS rows, head. Head input must be D.
Tensor<float> classify_pair(const model::Model<float>& model, std::span<const float> patches,
                            std::span<const data::TokenSequence> texts, const ClassifierHead& head);

// Two fusion encodes sharing the text; [T_CLS(a), T_CLS(b)] feeds a 2D head.
Tensor<float> classify_two_images(const model::Model<float>& model, std::span<const float> patches_a,
                                  std::span<const float> patches_b, std::span<const data::TokenSequence> texts,
                                  const ClassifierHead& head);

// Question answering stand-in: a templated question about one attribute
// of the image; the answer is one of 22 attribute values.
inline constexpr std::size_t kQaClasses = data::kNumColors + data::kNumShapes + data::kNumSizes + data::kNumPositions;

struct QaExample {
    data::PatchGrid patches;
    data::TokenSequence question;
    std::int64_t label = 0;
};

std::vector<QaExample> make_qa_task(std::size_t n, std::uint64_t seed, std::size_t patch, std::size_t max_text_length);
// One question per corpus image, kind drawn from the seed.
std::vector<QaExample> qa_from_corpus(const data::Corpus& corpus, std::uint64_t seed, std::size_t patch,
                                      std::size_t max_text_length);

// Two-image reasoning stand-in: "both images show a <color> <shape>" is
// true iff both images contain that color and shape. Half the examples
// are true; false ones break it in image a, image b or both.
struct TwoImageExample {
    data::PatchGrid a, b;
    data::TokenSequence statement;
    std::int64_t label = 0;
};

std::vector<TwoImageExample> make_two_image_task(std::size_t n, std::uint64_t seed, std::size_t patch,
                                                 std::size_t max_text_length);
// Same construction drawing the images from a corpus; throws DataError when
// the corpus lacks a second image of some color and shape it needs.
std::vector<TwoImageExample> two_image_from_corpus(const data::Corpus& corpus, std::size_t n, std::uint64_t seed,
                                                   std::size_t patch, std::size_t max_text_length);

struct ClassifierOptions {
    std::size_t steps = 300;
    std::size_t batch_size = 32;
    double peak_lr = 5e-4;
    std::function<void(std::size_t step, double loss, double lr)> on_step;
};

struct ClassifierResult {
    cli::Checkpoint checkpoint;  // backbone plus head under task.<name>.*
    ClassifierHead head;
};

ClassifierResult finetune_qa(const cli::Checkpoint& ckpt, std::span<const QaExample> train, std::uint64_t seed,
                             const ClassifierOptions& options = {});
ClassifierResult finetune_two_image(const cli::Checkpoint& ckpt, std::span<const TwoImageExample> train,
                                    std::uint64_t seed, const ClassifierOptions& options = {});

double qa_accuracy(const model::Model<float>& model, const ClassifierHead& head, std::span<const QaExample> data);
double two_image_accuracy(const model::Model<float>& model, const ClassifierHead& head,
                          std::span<const TwoImageExample> data);

// Head stored in a checkpoint under task.<name>.weight / .bias.
ClassifierHead head_from(const cli::Checkpoint& ckpt, const std::string& name);

// Matched vs hard-negative discrimination on held-out pairs: every image
// is scored with its own caption and with the most ITC-similar other
// caption, and every caption with the most similar other image. Accuracy
// is balanced between positives and negatives (chance 0.5).
struct ItmReport {
    double accuracy = 0;
    double positive_accuracy = 0;
    double negative_accuracy = 0;
};

ItmReport itm_accuracy(const model::Model<float>& model, std::span<const data::Example> heldout,
                       std::size_t chunk = 64);

}  // namespace vlmo::tasks
