#include "vlmo/objectives/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "vlmo/numerics/ops.hpp"

namespace vlmo::objectives {

namespace {

std::vector<std::vector<std::size_t>> partition(std::span<const std::size_t> worker, std::size_t num_workers) {
    if (num_workers == 0) throw ContractError("worker partition needs at least one worker");
    std::vector<std::vector<std::size_t>> members(num_workers);
    for (std::size_t i = 0; i < worker.size(); ++i) {
        if (worker[i] >= num_workers) {
            throw ContractError("worker id " + std::to_string(worker[i]) + " outside " + std::to_string(num_workers) +
                                " workers");
        }
        members[worker[i]].push_back(i);
    }
    return members;
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::vector<std::int64_t> arange(std::size_t n, std::size_t offset = 0) {
    std::vector<std::int64_t> v(n);
    std::iota(v.begin(), v.end(), static_cast<std::int64_t>(offset));
    return v;
}

}  // namespace

template <typename T>
Tensor<T> temperature(const Tensor<T>& log_temperature) {
    return clamp(exp(log_temperature), T(kMinTemperature), T(kMaxTemperature));
}

template <typename T>
SimilarityMatrix<T> similarity(const Tensor<T>& image, const Tensor<T>& text) {
    auto i2t = matmul(image, transpose(text));
    return {i2t, transpose(i2t)};
}

template <typename T>
Tensor<T> itc_loss(const Tensor<T>& image, const Tensor<T>& text, const Tensor<T>& sigma) {
    if (image.rank() != 2 || image.shape() != text.shape()) {
        throw DimensionError("itc_loss: embeddings " + shape_str(image.shape()) + " and " + shape_str(text.shape()));
    }
    const std::size_t n = image.rows();
    if (n < 2) throw ContractError("itc_loss: need at least two pairs for in-batch negatives");
    const auto s = similarity(image, text);
    const auto targets = arange(n);
    return scale(add(cross_entropy(div_scalar(s.i2t, sigma), std::span<const std::int64_t>(targets)),
                     cross_entropy(div_scalar(s.t2i, sigma), std::span<const std::int64_t>(targets))),
                 T(0.5));
}

template <typename T>
CandidatePool<T> gather_candidates(const Tensor<T>& embeddings, std::span<const std::size_t> worker,
                                   std::size_t num_workers, std::size_t local_worker) {
    if (worker.size() != embeddings.rows()) {
        throw DimensionError("gather_candidates: " + std::to_string(worker.size()) + " worker ids for " +
                             std::to_string(embeddings.rows()) + " rows");
    }
    if (local_worker >= num_workers) throw ContractError("gather_candidates: local worker out of range");
    const auto members = partition(worker, num_workers);
    CandidatePool<T> pool;
    std::vector<Tensor<T>> parts;
    for (std::size_t w = 0; w < num_workers; ++w) {
        if (members[w].empty()) continue;
        auto part = gather_rows(embeddings, std::span<const std::size_t>(members[w]));
        parts.push_back(w == local_worker ? part : part.detach());
        for (auto r : members[w]) {
            pool.source_row.push_back(r);
            pool.worker.push_back(w);
        }
    }
    pool.embeddings = concat_rows(parts);
    return pool;
}

template <typename T>
Tensor<T> itc_loss_gathered(const Tensor<T>& image, const Tensor<T>& text, const Tensor<T>& sigma,
                            std::span<const std::size_t> worker, std::size_t num_workers) {
    if (image.rank() != 2 || image.shape() != text.shape()) {
        throw DimensionError("itc_loss: embeddings " + shape_str(image.shape()) + " and " + shape_str(text.shape()));
    }
    if (image.rows() < 2) throw ContractError("itc_loss: need at least two pairs for in-batch negatives");
    if (num_workers == 1) return itc_loss(image, text, sigma);
    const auto members = partition(worker, num_workers);
    std::vector<Tensor<T>> per_worker;
    for (std::size_t w = 0; w < num_workers; ++w) {
        if (members[w].empty()) continue;
        auto texts = gather_candidates(text, worker, num_workers, w);
        auto images = gather_candidates(image, worker, num_workers, w);
        std::vector<std::int64_t> targets;
        for (auto r : members[w]) {
            const auto at = std::find(texts.source_row.begin(), texts.source_row.end(), r) - texts.source_row.begin();
            targets.push_back(at);
        }
        const std::span<const std::size_t> rows(members[w]);
        auto i2t = div_scalar(matmul(gather_rows(image, rows), transpose(texts.embeddings)), sigma);
        auto t2i = div_scalar(matmul(gather_rows(text, rows), transpose(images.embeddings)), sigma);
        const std::span<const std::int64_t> tgt(targets);
        per_worker.push_back(scale(add(cross_entropy(i2t, tgt), cross_entropy(t2i, tgt)), T(0.5)));
    }
    return scale(sum_losses(per_worker), T(1) / T(per_worker.size()));
}

HardNegativeAssignment sample_hard_negatives(std::span<const double> s_i2t, std::size_t n, double sigma,
                                             std::span<const std::size_t> worker, MiningMode mode, bool hardest,
                                             std::mt19937_64& rng) {
    if (s_i2t.size() != n * n) throw DimensionError("sample_hard_negatives: similarity matrix is not N x N");
    if (worker.size() != n) throw DimensionError("sample_hard_negatives: worker ids do not cover the batch");
    if (!(sigma > 0)) throw ContractError("sample_hard_negatives: temperature must be positive");
    HardNegativeAssignment out;
    out.mode = mode;
    out.negative_text.resize(n);
    out.negative_image.resize(n);
    std::vector<double> weight(n);
    // score(i, j) gives the similarity of anchor i to candidate j.
    auto draw = [&](std::size_t anchor, auto score) {
        double peak = -std::numeric_limits<double>::infinity();
        std::size_t best = n;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == anchor || (mode == MiningMode::local && worker[j] != worker[anchor])) continue;
            const double s = score(anchor, j);
            if (s > peak) peak = s, best = j;
        }
        if (best == n) {
            throw ContractError("sample_hard_negatives: candidate pool of anchor " + std::to_string(anchor) +
                                " holds only its positive");
        }
        if (hardest) return best;
        double total = 0;
        for (std::size_t j = 0; j < n; ++j) {
            weight[j] = 0;
            if (j == anchor || (mode == MiningMode::local && worker[j] != worker[anchor])) continue;
            weight[j] = std::exp((score(anchor, j) - peak) / sigma);
            total += weight[j];
        }
        const double u = uniform01(rng) * total;
        double acc = 0;
        std::size_t last = best;
        for (std::size_t j = 0; j < n; ++j) {
            if (weight[j] == 0) continue;
            acc += weight[j];
            last = j;
            if (u < acc) return j;
        }
        return last;
    };
    for (std::size_t i = 0; i < n; ++i) {
        out.negative_text[i] = draw(i, [&](std::size_t a, std::size_t j) { return s_i2t[a * n + j]; });
        out.negative_image[i] = draw(i, [&](std::size_t a, std::size_t j) { return s_i2t[j * n + a]; });
    }
    return out;
}

double mean_negative_similarity(std::span<const double> s_i2t, std::size_t n, const HardNegativeAssignment& a) {
    if (n == 0) return 0;
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        total += s_i2t[i * n + a.negative_text[i]];
        total += s_i2t[a.negative_image[i] * n + i];
    }
    return total / double(2 * n);
}

ItmBatch build_itm_batch(const data::MultimodalBatch& batch, const HardNegativeAssignment& negatives) {
    const std::size_t n = batch.size(), per = batch.num_patches * batch.patch_dim;
    if (negatives.negative_text.size() != n || negatives.negative_image.size() != n) {
        throw DimensionError("build_itm_batch: negative assignment does not cover the batch");
    }
    ItmBatch out;
    out.patches.reserve(3 * n * per);
    auto push = [&](std::size_t image, std::size_t text, std::int64_t label) {
        const auto* src = batch.patches.data() + image * per;
        out.patches.insert(out.patches.end(), src, src + per);
        out.texts.push_back(batch.tokens[text]);
        out.labels.push_back(label);
    };
    for (std::size_t i = 0; i < n; ++i) push(i, i, 1);
    for (std::size_t i = 0; i < n; ++i) push(i, negatives.negative_text[i], 0);
    for (std::size_t i = 0; i < n; ++i) push(negatives.negative_image[i], i, 0);
    return out;
}

template <typename T>
Tensor<T> itm_logits(const model::Model<T>& m, const model::Encoded<T>& pair) {
    auto cls = model::cls_rows(pair, model::Segment::text);
    auto h = layer_norm(cls, m.param("head.itm.ln.gamma"), m.param("head.itm.ln.beta"), T(m.config().ln_eps));
    return linear(h, m.param("head.itm.weight"), m.param("head.itm.bias"));
}

template <typename T>
Tensor<T> itm_loss(const model::Model<T>& m, const ItmBatch& itm) {
    auto enc = m.encode_pair({itm.patches, itm.size(), {}}, itm.texts);
    return cross_entropy(itm_logits(m, enc), std::span<const std::int64_t>(itm.labels));
}

template <typename T>
Tensor<T> mlm_head(const model::Model<T>& m, const Tensor<T>& rows) {
    auto h = layer_norm(rows, m.param("head.mlm.ln.gamma"), m.param("head.mlm.ln.beta"), T(m.config().ln_eps));
    return linear(h, m.param("head.mlm.weight"), m.param("head.mlm.bias"));
}

template <typename T>
MlmResult<T> mlm_loss(const model::Model<T>& m, const model::Encoded<T>& pair,
                      std::span<const data::MaskedTokens> masked) {
    const auto& layout = pair.layout;
    if (layout.mode == model::Modality::image) throw ContractError("mlm_loss: expects a text or pair encoding");
    if (masked.size() != layout.batch) {
        throw DimensionError("mlm_loss: " + std::to_string(masked.size()) + " label rows for a batch of " +
                             std::to_string(layout.batch));
    }
    std::vector<std::size_t> rows;
    std::vector<std::int64_t> labels;
    for (std::size_t b = 0; b < masked.size(); ++b) {
        const auto& l = masked[b].labels;
        if (l.size() > layout.text_length) throw DimensionError("mlm_loss: labels longer than the text block");
        for (std::size_t t = 0; t < l.size(); ++t) {
            if (l[t] == kIgnoreIndex) continue;
            rows.push_back(b * layout.seq + t);
            labels.push_back(l[t]);
        }
    }
    if (rows.empty()) return {Tensor<T>::scalar(T(0)), true};
    auto logits = mlm_head(m, gather_rows(pair.hidden, std::span<const std::size_t>(rows)));
    return {cross_entropy(logits, std::span<const std::int64_t>(labels)), false};
}

template <typename T>
Tensor<T> sum_losses(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) return Tensor<T>::scalar(T(0));
    Tensor<T> total = parts.front();
    for (std::size_t i = 1; i < parts.size(); ++i) total = add(total, parts[i]);
    return total;
}

template <typename T>
PretrainLoss<T> combined_pretrain_loss(const model::Model<T>& m, const data::MultimodalBatch& batch,
                                       const PretrainOptions& options, std::mt19937_64& rng,
                                       const HardNegativeAssignment* fixed_negatives) {
    const std::size_t n = batch.size();
    const model::ImageBatch images{batch.patches, n, {}};
    PretrainLoss<T> out;
    auto sigma = temperature(m.param("itc.log_temperature"));
    out.sigma = double(sigma.item());
    std::vector<Tensor<T>> parts;

    if (options.use_itc || options.use_itm) {
        auto img = m.image_embedding(m.encode_image(images));
        auto txt = m.text_embedding(m.encode_text(batch.tokens));
        if (options.use_itc) {
            parts.push_back(itc_loss_gathered(img, txt, sigma, batch.worker, batch.num_workers));
            out.itc = double(parts.back().item());
        }
        if (options.use_itm) {
            // Mining reads similarity values only; it is not differentiated.
            const auto s = matmul(img.detach(), transpose(txt.detach()));
            std::vector<double> sim(s.data().begin(), s.data().end());
            out.negatives = fixed_negatives ? *fixed_negatives
                                            : sample_hard_negatives(sim, n, out.sigma, batch.worker, options.mining,
                                                                    options.hardest_negatives, rng);
            out.hard_negative_similarity = mean_negative_similarity(sim, n, out.negatives);
            parts.push_back(itm_loss(m, build_itm_batch(batch, out.negatives)));
            out.itm = double(parts.back().item());
        }
    }
    if (options.use_mlm) {
        if (batch.masked.size() != n) throw ContractError("combined_pretrain_loss: batch has no MLM masks");
        std::vector<data::TokenSequence> corrupted;
        corrupted.reserve(n);
        for (const auto& mt : batch.masked) corrupted.push_back(mt.tokens);
        auto enc = m.encode_pair(images, corrupted);
        auto mlm = mlm_loss(m, enc, std::span<const data::MaskedTokens>(batch.masked));
        out.mlm_skipped = mlm.skipped;
        out.mlm = double(mlm.loss.item());
        if (!mlm.skipped) parts.push_back(mlm.loss);
    }
    out.total = sum_losses(parts);
    return out;
}

#define VLMO_OBJECTIVES(T)                                                                                          \
    template Tensor<T> temperature(const Tensor<T>&);                                                               \
    template SimilarityMatrix<T> similarity(const Tensor<T>&, const Tensor<T>&);                                    \
    template Tensor<T> itc_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                              \
    template CandidatePool<T> gather_candidates(const Tensor<T>&, std::span<const std::size_t>, std::size_t,        \
                                                std::size_t);                                                       \
    template Tensor<T> itc_loss_gathered(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                      \
                                         std::span<const std::size_t>, std::size_t);                                \
    template Tensor<T> itm_logits(const model::Model<T>&, const model::Encoded<T>&);                                \
    template Tensor<T> itm_loss(const model::Model<T>&, const ItmBatch&);                                           \
    template Tensor<T> mlm_head(const model::Model<T>&, const Tensor<T>&);                                          \
    template MlmResult<T> mlm_loss(const model::Model<T>&, const model::Encoded<T>&,                                \
                                   std::span<const data::MaskedTokens>);                                            \
    template Tensor<T> sum_losses(const std::vector<Tensor<T>>&);                                                   \
    template PretrainLoss<T> combined_pretrain_loss(const model::Model<T>&, const data::MultimodalBatch&,           \
                                                    const PretrainOptions&, std::mt19937_64&,                       \
                                                    const HardNegativeAssignment*);

VLMO_OBJECTIVES(float)
VLMO_OBJECTIVES(double)

}  // namespace vlmo::objectives
