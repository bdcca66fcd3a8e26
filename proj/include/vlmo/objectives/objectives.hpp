#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "vlmo/backbone/model.hpp"
#include "vlmo/data/corpus.hpp"
#include "vlmo/numerics/tensor.hpp"

namespace vlmo::objectives {

inline constexpr double kMinTemperature = 0.01;
inline constexpr double kMaxTemperature = 100.0;

// sigma = clamp(exp(log_temperature), 0.01, 100).
template <typename T>
Tensor<T> temperature(const Tensor<T>& log_temperature);

template <typename T>
struct SimilarityMatrix {
    Tensor<T> i2t;  // image i vs text j
    Tensor<T> t2i;  // exact transpose of i2t
};

template <typename T>
SimilarityMatrix<T> similarity(const Tensor<T>& image, const Tensor<T>& text);

// Symmetric contrastive loss over an N x N similarity matrix with the
// diagonal as targets. Rows of both inputs are expected to be unit norm.
template <typename T>
Tensor<T> itc_loss(const Tensor<T>& image, const Tensor<T>& text, const Tensor<T>& sigma);

// Candidates visible to one worker: every worker's rows concatenated in
// worker-id order, rows of other workers detached.
template <typename T>
struct CandidatePool {
    Tensor<T> embeddings;
    std::vector<std::size_t> source_row;  // batch row of each pool entry
    std::vector<std::size_t> worker;
};

template <typename T>
CandidatePool<T> gather_candidates(const Tensor<T>& embeddings, std::span<const std::size_t> worker,
                                   std::size_t num_workers, std::size_t local_worker);

// ITC as each simulated worker computes it: local queries against the
// gathered pool, averaged over workers. Equals itc_loss for one worker.
template <typename T>
Tensor<T> itc_loss_gathered(const Tensor<T>& image, const Tensor<T>& text, const Tensor<T>& sigma,
                            std::span<const std::size_t> worker, std::size_t num_workers);

enum class MiningMode { local, global };

struct HardNegativeAssignment {
    std::vector<std::size_t> negative_text;   // per anchor image i
    std::vector<std::size_t> negative_image;  // per anchor text i
    MiningMode mode = MiningMode::global;
};

// s_i2t is N x N row-major (image i vs text j). For each i a negative text
// is drawn from softmax(s_i2t[i, j]/sigma) over candidates j != i, and a
// negative image from softmax(s_i2t[j, i]/sigma). Local mode restricts
// candidates to the anchor's worker. `hardest` takes the argmax instead.
HardNegativeAssignment sample_hard_negatives(std::span<const double> s_i2t, std::size_t n, double sigma,
                                             std::span<const std::size_t> worker, MiningMode mode, bool hardest,
                                             std::mt19937_64& rng);

// Mean of s_i2t[i, negative_text[i]] and s_i2t[negative_image[i], i].
double mean_negative_similarity(std::span<const double> s_i2t, std::size_t n, const HardNegativeAssignment& a);

// 3N pairs: N positives, N (image i, negative text), N (negative image, text i).
struct ItmBatch {
    std::vector<float> patches;
    std::vector<data::TokenSequence> texts;
    std::vector<std::int64_t> labels;  // 1 matched, 0 not
    std::size_t size() const { return texts.size(); }
};

ItmBatch build_itm_batch(const data::MultimodalBatch& batch, const HardNegativeAssignment& negatives);

template <typename T>
Tensor<T> itm_logits(const model::Model<T>& model, const model::Encoded<T>& pair);

template <typename T>
Tensor<T> itm_loss(const model::Model<T>& model, const ItmBatch& itm);

template <typename T>
struct MlmResult {
    Tensor<T> loss;
    bool skipped = false;  // nothing was masked
};

// Cross-entropy of the vocabulary head at masked text positions of a pair
// or text-only encoding; masked[i] describes example i.
template <typename T>
MlmResult<T> mlm_loss(const model::Model<T>& model, const model::Encoded<T>& pair,
                      std::span<const data::MaskedTokens> masked);

template <typename T>
Tensor<T> mlm_head(const model::Model<T>& model, const Tensor<T>& rows);

struct PretrainOptions {
    bool use_itc = true;
    bool use_itm = true;
    bool use_mlm = true;
    MiningMode mining = MiningMode::global;
    bool hardest_negatives = false;
};

template <typename T>
struct PretrainLoss {
    Tensor<T> total;
    double itc = 0, itm = 0, mlm = 0;
    double sigma = 0;
    double hard_negative_similarity = 0;
    bool mlm_skipped = false;
    HardNegativeAssignment negatives;
};

// Unweighted sum of the enabled components. The batch must carry MLM masks
// when MLM is enabled. `fixed_negatives` bypasses sampling.
template <typename T>
PretrainLoss<T> combined_pretrain_loss(const model::Model<T>& model, const data::MultimodalBatch& batch,
                                       const PretrainOptions& options, std::mt19937_64& rng,
                                       const HardNegativeAssignment* fixed_negatives = nullptr);

template <typename T>
Tensor<T> sum_losses(const std::vector<Tensor<T>>& parts);

}  // namespace vlmo::objectives
