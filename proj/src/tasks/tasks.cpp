#include "vlmo/tasks/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "vlmo/errors.hpp"
#include "vlmo/numerics/ops.hpp"
#include "vlmo/objectives/objectives.hpp"
#include "vlmo/training/training.hpp"
#include "vlmo/util/files.hpp"

namespace vlmo::tasks {

namespace {

std::vector<float> stack_patches(std::span<const data::Example> pool, std::size_t begin, std::size_t end) {
    std::vector<float> out;
    for (std::size_t i = begin; i < end; ++i) {
        out.insert(out.end(), pool[i].patches.patches.begin(), pool[i].patches.patches.end());
    }
    return out;
}

std::vector<float> stack_grids(std::span<const data::PatchGrid* const> grids) {
    std::vector<float> out;
    for (const auto* g : grids) out.insert(out.end(), g->patches.begin(), g->patches.end());
    return out;
}

void require_pretrained(const cli::Checkpoint& ckpt) {
    if (ckpt.stage == "init") throw UsageError("fine-tuning needs a pretrained checkpoint, got a fresh one");
}

cli::Checkpoint snapshot(const model::Model<float>& m, const cli::Checkpoint& from, const std::string& stage,
                         std::size_t steps, std::uint64_t seed) {
    cli::Checkpoint out;
    out.config = m.config();
    out.stage = stage;
    out.step = steps;
    out.seed = seed;
    out.extra = from.extra;
    out.params = m.params().cast<float>();
    return out;
}

training::StagePlan finetune_plan(std::size_t steps, std::size_t batch, double lr) {
    training::StagePlan plan;
    plan.stage = training::Stage::vision_language;
    plan.steps = steps;
    plan.batch_size = batch;
    plan.peak_lr = lr;
    plan.warmup_steps = steps / 10;
    return plan;
}

float match_probability(std::span<const float> logits_row) {
    return float(1.0 / (1.0 + std::exp(double(logits_row[0]) - double(logits_row[1]))));
}

// Shared fine-tuning loop for the classification tasks. `make` fills the
// logits for a list of example indices and returns the labels.
template <typename Build>
ClassifierResult finetune_classifier(const cli::Checkpoint& ckpt, std::size_t pool_size, std::size_t in_dim,
                                     std::size_t classes, const std::string& name, std::uint64_t seed,
                                     const ClassifierOptions& options, Build build) {
    require_pretrained(ckpt);
    if (pool_size < options.batch_size) {
        throw DataError("classification data holds " + std::to_string(pool_size) + " examples, batch needs " +
                        std::to_string(options.batch_size));
    }
    auto params = ckpt.params.cast<float>();
    const std::string wname = "task." + name + ".weight", bname = "task." + name + ".bias";
    ClassifierHead head;
    if (params.contains(wname)) {
        head = {params.get(wname), params.get(bname)};
    } else {
        auto fresh = ClassifierHead::init(in_dim, classes, util::mix_seed(seed, 77));
        head = {params.add(wname, fresh.weight), params.add(bname, fresh.bias)};
    }
    if (head.in_dim() != in_dim || head.classes() != classes) {
        throw ConfigError("task head '" + name + "' is " + std::to_string(head.in_dim()) + "x" +
                          std::to_string(head.classes()) + ", task needs " + std::to_string(in_dim) + "x" +
                          std::to_string(classes));
    }
    model::Model<float> m(ckpt.config, std::move(params));
    head = {m.params().get(wname), m.params().get(bname)};
    training::Optimizer optimizer(m.params(), {}, {});
    training::EpochSampler sampler(pool_size, util::mix_seed(seed, 78));
    const auto plan = finetune_plan(options.steps, options.batch_size, options.peak_lr);
    for (std::size_t step = 0; step < options.steps; ++step) {
        const auto picks = sampler.next(options.batch_size);
        std::vector<std::int64_t> labels;
        auto logits = build(m, head, picks, labels);
        auto loss = cross_entropy(logits, std::span<const std::int64_t>(labels));
        const double lr = training::lr_schedule(step + 1, plan);
        m.params().zero_grad();
        loss.backward();
        optimizer.step(lr);
        if (options.on_step) options.on_step(step, double(loss.item()), lr);
    }
    m.params().zero_grad();
    return {snapshot(m, ckpt, "finetune-" + name, options.steps, seed), head};
}

std::size_t argmax_row(std::span<const float> row) {
    return std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
}

std::string_view color_or_shape_word(bool color, std::size_t id) {
    return color ? data::color_word(id) : data::shape_word(id);
}

}  // namespace

RetrievalIndex build_index(const model::Model<float>& m, std::span<const data::Example> images,
                           std::span<const data::Example> texts, std::size_t chunk) {
    if (chunk == 0) throw ContractError("build_index: chunk must be positive");
    RetrievalIndex index;
    std::vector<Tensor<float>> parts;
    for (std::size_t b = 0; b < images.size(); b += chunk) {
        const std::size_t e = std::min(images.size(), b + chunk);
        const auto patches = stack_patches(images, b, e);
        parts.push_back(m.image_embedding(m.encode_image({patches, e - b, {}})).detach());
        for (std::size_t i = b; i < e; ++i) index.image_ids.push_back(images[i].index);
    }
    index.images = parts.empty() ? Tensor<float>::zeros({0, m.config().itc_dim}) : concat_rows(parts).detach();
    parts.clear();
    for (std::size_t b = 0; b < texts.size(); b += chunk) {
        const std::size_t e = std::min(texts.size(), b + chunk);
        std::vector<data::TokenSequence> seqs;
        for (std::size_t i = b; i < e; ++i) {
            seqs.push_back(texts[i].tokens);
            index.text_ids.push_back(texts[i].index);
        }
        parts.push_back(m.text_embedding(m.encode_text(seqs)).detach());
    }
    index.texts = parts.empty() ? Tensor<float>::zeros({0, m.config().itc_dim}) : concat_rows(parts).detach();
    return index;
}

float pair_score(const RetrievalIndex& index, std::size_t image, std::size_t text) {
    const std::size_t d = index.images.cols();
    const auto a = index.images.data().subspan(image * d, d);
    const auto b = index.texts.data().subspan(text * d, d);
    float s = 0.0f;
    for (std::size_t k = 0; k < d; ++k) s += a[k] * b[k];
    return s;
}

Rankings rank_scores(std::vector<float> scores, std::size_t images, std::size_t texts) {
    if (scores.size() != images * texts) throw DimensionError("rank_scores: score matrix size mismatch");
    Rankings r;
    r.images = images;
    r.texts = texts;
    r.scores = std::move(scores);
    const auto& s = r.scores;
    r.i2t.resize(images);
    for (std::size_t i = 0; i < images; ++i) {
        auto& order = r.i2t[i];
        order.resize(texts);
        std::iota(order.begin(), order.end(), std::size_t(0));
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return s[i * texts + a] > s[i * texts + b]; });
    }
    r.t2i.resize(texts);
    for (std::size_t j = 0; j < texts; ++j) {
        auto& order = r.t2i[j];
        order.resize(images);
        std::iota(order.begin(), order.end(), std::size_t(0));
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return s[a * texts + j] > s[b * texts + j]; });
    }
    return r;
}

Rankings score_and_rank(const RetrievalIndex& index) {
    const std::size_t n = index.images.rows(), m = index.texts.rows();
    if (n > 0 && m > 0 && index.images.cols() != index.texts.cols()) {
        throw DimensionError("score_and_rank: image and text embeddings differ in width");
    }
    std::vector<float> s(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) s[i * m + j] = pair_score(index, i, j);
    return rank_scores(std::move(s), n, m);
}

double recall_at_k(const std::vector<std::vector<std::size_t>>& rankings, std::span<const std::size_t> truth,
                   std::size_t k) {
    if (k == 0) throw ContractError("recall_at_k: k must be at least 1");
    if (truth.size() != rankings.size()) throw DimensionError("recall_at_k: one ground-truth id per query needed");
    if (rankings.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t q = 0; q < rankings.size(); ++q) {
        const auto& order = rankings[q];
        if (k > order.size()) {
            throw ContractError("recall_at_k: k=" + std::to_string(k) + " exceeds " + std::to_string(order.size()) +
                                " candidates");
        }
        hits += std::find(order.begin(), order.begin() + std::ptrdiff_t(k), truth[q]) != order.begin() + std::ptrdiff_t(k);
    }
    return double(hits) / double(rankings.size());
}

RecallReport diagonal_recall(const Rankings& r) {
    RecallReport out;
    std::vector<std::size_t> truth_i(r.images), truth_t(r.texts);
    std::iota(truth_i.begin(), truth_i.end(), std::size_t(0));
    std::iota(truth_t.begin(), truth_t.end(), std::size_t(0));
    const std::size_t ks[3] = {1, 5, 10};
    for (int k = 0; k < 3; ++k) {
        out.i2t[k] = recall_at_k(r.i2t, truth_i, std::min(ks[k], r.texts));
        out.t2i[k] = recall_at_k(r.t2i, truth_t, std::min(ks[k], r.images));
    }
    return out;
}

std::vector<float> fusion_scores(const model::Model<float>& m, std::span<const data::Example> images,
                                 std::span<const data::Example> texts, std::size_t chunk) {
    if (chunk == 0) throw ContractError("fusion_scores: chunk must be positive");
    std::vector<float> scores(images.size() * texts.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto& grid = images[i].patches.patches;
        for (std::size_t b = 0; b < texts.size(); b += chunk) {
            const std::size_t e = std::min(texts.size(), b + chunk);
            std::vector<float> patches;
            std::vector<data::TokenSequence> seqs;
            for (std::size_t j = b; j < e; ++j) {
                patches.insert(patches.end(), grid.begin(), grid.end());
                seqs.push_back(texts[j].tokens);
            }
            auto logits = objectives::itm_logits(m, m.encode_pair({patches, e - b, {}}, seqs));
            for (std::size_t j = b; j < e; ++j) {
                scores[i * texts.size() + j] = match_probability(logits.data().subspan((j - b) * 2, 2));
            }
        }
    }
    return scores;
}

cli::Checkpoint finetune_retrieval(const cli::Checkpoint& ckpt, std::span<const data::Example> pool,
                                   std::uint64_t seed, const RetrievalOptions& options) {
    require_pretrained(ckpt);
    if (pool.size() < options.batch_size) {
        throw DataError("retrieval data holds " + std::to_string(pool.size()) + " examples, batch needs " +
                        std::to_string(options.batch_size));
    }
    model::Model<float> m(ckpt.config, ckpt.params.cast<float>());
    training::Optimizer optimizer(m.params(), {}, {});
    training::EpochSampler sampler(pool.size(), util::mix_seed(seed, 91));
    const auto plan = finetune_plan(options.steps, options.batch_size, options.peak_lr);
    for (std::size_t step = 0; step < options.steps; ++step) {
        const auto picks = sampler.next(options.batch_size);
        const auto batch = data::make_batch(pool, picks, options.workers);
        const std::size_t n = batch.size();
        auto sigma = objectives::temperature(m.param("itc.log_temperature"));
        auto img = m.image_embedding(m.encode_image({batch.patches, n, {}}));
        auto txt = m.text_embedding(m.encode_text(batch.tokens));
        auto loss = objectives::itc_loss_gathered(img, txt, sigma, batch.worker, batch.num_workers);
        const double lr = training::lr_schedule(step + 1, plan);
        m.params().zero_grad();
        loss.backward();
        optimizer.step(lr);
        if (options.on_step) options.on_step(step, double(loss.item()), lr);
    }
    m.params().zero_grad();
    return snapshot(m, ckpt, "retrieval", options.steps, seed);
}

ClassifierHead ClassifierHead::init(std::size_t in_dim, std::size_t classes, std::uint64_t seed) {
    if (in_dim == 0 || classes == 0) throw ContractError("ClassifierHead: empty head");
    return {model::truncated_normal<float>({in_dim, classes}, 0.02, seed),
            Tensor<float>::zeros({classes}, true)};
}

Tensor<float> classify_pair(const model::Model<float>& m, std::span<const float> patches,
                            std::span<const data::TokenSequence> texts, const ClassifierHead& head) {
    const std::size_t d = m.config().hidden;
    if (head.in_dim() != d) {
        throw DimensionError("classify_pair: head takes " + std::to_string(head.in_dim()) + " inputs, T_CLS has " +
                             std::to_string(d));
    }
    auto enc = m.encode_pair({patches, texts.size(), {}}, texts);
    return linear(model::cls_rows(enc, model::Segment::text), head.weight, head.bias);
}

Tensor<float> classify_two_images(const model::Model<float>& m, std::span<const float> patches_a,
                                  std::span<const float> patches_b, std::span<const data::TokenSequence> texts,
                                  const ClassifierHead& head) {
    const std::size_t d = m.config().hidden;
    if (head.in_dim() != 2 * d) {
        throw DimensionError("classify_two_images: head takes " + std::to_string(head.in_dim()) +
                             " inputs, two T_CLS vectors have " + std::to_string(2 * d));
    }
    auto a = model::cls_rows(m.encode_pair({patches_a, texts.size(), {}}, texts), model::Segment::text);
    auto b = model::cls_rows(m.encode_pair({patches_b, texts.size(), {}}, texts), model::Segment::text);
    return linear(concat_cols<float>({a, b}), head.weight, head.bias);
}

namespace {

QaExample qa_example(const data::LatentScene& latent, const data::Image& image, std::size_t kind, std::size_t patch,
                     std::size_t max_text_length) {
    std::string question;
    std::int64_t label = 0;
    switch (kind) {
        case 0:
            question = "what color is the object";
            label = latent.color;
            break;
        case 1:
            question = "what shape is it";
            label = std::int64_t(data::kNumColors + latent.shape);
            break;
        case 2:
            question = "what size is the object";
            label = std::int64_t(data::kNumColors + data::kNumShapes + latent.size);
            break;
        default:
            question = "where is the object";
            label = std::int64_t(data::kNumColors + data::kNumShapes + data::kNumSizes + latent.position);
            break;
    }
    return {data::patchify(image, patch), data::tokenize(question, max_text_length), label};
}

// Draws images of a requested color and shape. A false statement is broken
// by swapping one of the two attributes in image a, image b or both.
template <typename Draw>
std::vector<TwoImageExample> two_image_examples(std::size_t n, std::mt19937_64& rng, std::size_t max_text_length,
                                                Draw draw) {
    auto broken = [&](std::size_t color, std::size_t shape) {
        if (rng() % 2 == 0) return draw((color + 1 + rng() % (data::kNumColors - 1)) % data::kNumColors, shape);
        return draw(color, (shape + 1 + rng() % (data::kNumShapes - 1)) % data::kNumShapes);
    };
    std::vector<TwoImageExample> out;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t color = rng() % data::kNumColors, shape = rng() % data::kNumShapes;
        const bool truth = i % 2 == 0;
        TwoImageExample ex;
        if (truth) {
            ex.a = draw(color, shape);
            ex.b = draw(color, shape);
        } else {
            const auto mode = rng() % 3;
            ex.a = mode == 1 ? draw(color, shape) : broken(color, shape);
            ex.b = mode == 0 ? draw(color, shape) : broken(color, shape);
        }
        std::string statement = "both images show a ";
        statement += color_or_shape_word(true, color);
        statement += ' ';
        statement += color_or_shape_word(false, shape);
        ex.statement = data::tokenize(statement, max_text_length);
        ex.label = truth ? 1 : 0;
        out.push_back(std::move(ex));
    }
    std::shuffle(out.begin(), out.end(), rng);
    return out;
}

}  // namespace

std::vector<QaExample> make_qa_task(std::size_t n, std::uint64_t seed, std::size_t patch, std::size_t max_text_length) {
    std::vector<QaExample> out;
    std::mt19937_64 rng(util::mix_seed(seed, 31));
    for (std::size_t i = 0; i < n; ++i) {
        const auto latent =
            data::LatentScene::from_combo(rng() % data::kNumLatentCombos, util::mix_seed(seed, 3000 + i));
        const auto kind = rng() % 4;
        out.push_back(qa_example(latent, data::render_image(latent), kind, patch, max_text_length));
    }
    return out;
}

std::vector<QaExample> qa_from_corpus(const data::Corpus& corpus, std::uint64_t seed, std::size_t patch,
                                      std::size_t max_text_length) {
    std::vector<QaExample> out;
    std::mt19937_64 rng(util::mix_seed(seed, 32));
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        out.push_back(qa_example(corpus.latents[i], corpus.images[i], rng() % 4, patch, max_text_length));
    }
    return out;
}

std::vector<TwoImageExample> make_two_image_task(std::size_t n, std::uint64_t seed, std::size_t patch,
                                                 std::size_t max_text_length) {
    std::mt19937_64 rng(util::mix_seed(seed, 41));
    std::uint64_t stream = 5000;
    return two_image_examples(n, rng, max_text_length, [&](std::size_t color, std::size_t shape) {
        data::LatentScene l;
        l.color = std::uint8_t(color);
        l.shape = std::uint8_t(shape);
        l.position = std::uint8_t(rng() % data::kNumPositions);
        l.size = std::uint8_t(rng() % data::kNumSizes);
        l.seed = util::mix_seed(seed, stream++);
        return data::patchify(data::render_image(l), patch);
    });
}

std::vector<TwoImageExample> two_image_from_corpus(const data::Corpus& corpus, std::size_t n, std::uint64_t seed,
                                                   std::size_t patch, std::size_t max_text_length) {
    std::vector<std::vector<std::size_t>> groups(data::kNumColors * data::kNumShapes);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        groups[corpus.latents[i].color * data::kNumShapes + corpus.latents[i].shape].push_back(i);
    }
    std::vector<data::PatchGrid> grids;
    for (const auto& img : corpus.images) grids.push_back(data::patchify(img, patch));
    std::mt19937_64 rng(util::mix_seed(seed, 42));
    return two_image_examples(n, rng, max_text_length, [&](std::size_t color, std::size_t shape) {
        const auto& g = groups[color * data::kNumShapes + shape];
        if (g.empty()) {
            throw DataError("corpus has no " + std::string(data::color_word(color)) + " " +
                            std::string(data::shape_word(shape)) + " image for the two-image task");
        }
        return grids[g[rng() % g.size()]];
    });
}

ClassifierResult finetune_qa(const cli::Checkpoint& ckpt, std::span<const QaExample> train, std::uint64_t seed,
                             const ClassifierOptions& options) {
    return finetune_classifier(
        ckpt, train.size(), ckpt.config.hidden, kQaClasses, "classify", seed, options,
        [&](const model::Model<float>& m, const ClassifierHead& head, const std::vector<std::size_t>& picks,
            std::vector<std::int64_t>& labels) {
            std::vector<const data::PatchGrid*> grids;
            std::vector<data::TokenSequence> texts;
            for (auto p : picks) {
                grids.push_back(&train[p].patches);
                texts.push_back(train[p].question);
                labels.push_back(train[p].label);
            }
            return classify_pair(m, stack_grids(grids), texts, head);
        });
}

ClassifierResult finetune_two_image(const cli::Checkpoint& ckpt, std::span<const TwoImageExample> train,
                                    std::uint64_t seed, const ClassifierOptions& options) {
    return finetune_classifier(
        ckpt, train.size(), 2 * ckpt.config.hidden, 2, "nlvr2", seed, options,
        [&](const model::Model<float>& m, const ClassifierHead& head, const std::vector<std::size_t>& picks,
            std::vector<std::int64_t>& labels) {
            std::vector<const data::PatchGrid*> ga, gb;
            std::vector<data::TokenSequence> texts;
            for (auto p : picks) {
                ga.push_back(&train[p].a);
                gb.push_back(&train[p].b);
                texts.push_back(train[p].statement);
                labels.push_back(train[p].label);
            }
            return classify_two_images(m, stack_grids(ga), stack_grids(gb), texts, head);
        });
}

double qa_accuracy(const model::Model<float>& m, const ClassifierHead& head, std::span<const QaExample> data) {
    if (data.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < data.size(); b += 64) {
        const std::size_t e = std::min(data.size(), b + 64);
        std::vector<const data::PatchGrid*> grids;
        std::vector<data::TokenSequence> texts;
        for (std::size_t i = b; i < e; ++i) {
            grids.push_back(&data[i].patches);
            texts.push_back(data[i].question);
        }
        auto logits = classify_pair(m, stack_grids(grids), texts, head);
        const std::size_t k = head.classes();
        for (std::size_t i = b; i < e; ++i) {
            correct += std::int64_t(argmax_row(logits.data().subspan((i - b) * k, k))) == data[i].label;
        }
    }
    return double(correct) / double(data.size());
}

double two_image_accuracy(const model::Model<float>& m, const ClassifierHead& head,
                          std::span<const TwoImageExample> data) {
    if (data.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < data.size(); b += 64) {
        const std::size_t e = std::min(data.size(), b + 64);
        std::vector<const data::PatchGrid*> ga, gb;
        std::vector<data::TokenSequence> texts;
        for (std::size_t i = b; i < e; ++i) {
            ga.push_back(&data[i].a);
            gb.push_back(&data[i].b);
            texts.push_back(data[i].statement);
        }
        auto logits = classify_two_images(m, stack_grids(ga), stack_grids(gb), texts, head);
        for (std::size_t i = b; i < e; ++i) {
            correct += std::int64_t(argmax_row(logits.data().subspan((i - b) * 2, 2))) == data[i].label;
        }
    }
    return double(correct) / double(data.size());
}

ClassifierHead head_from(const cli::Checkpoint& ckpt, const std::string& name) {
    const std::string w = "task." + name + ".weight", b = "task." + name + ".bias";
    if (!ckpt.params.contains(w) || !ckpt.params.contains(b)) {
        throw ConfigError("checkpoint has no '" + name + "' task head");
    }
    return {ckpt.params.get(w), ckpt.params.get(b)};
}

ItmReport itm_accuracy(const model::Model<float>& m, std::span<const data::Example> heldout, std::size_t chunk) {
    const std::size_t n = heldout.size();
    if (n < 2) throw ContractError("itm_accuracy: needs at least two held-out pairs");
    const auto ranks = score_and_rank(build_index(m, heldout, heldout, chunk));
    // Pairs to score: (i, i), (i, hardest text), (hardest image, i).
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i < n; ++i) pairs.emplace_back(i, i);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& order = ranks.i2t[i];
        pairs.emplace_back(i, order[0] != i ? order[0] : order[1]);
    }
    for (std::size_t j = 0; j < n; ++j) {
        const auto& order = ranks.t2i[j];
        pairs.emplace_back(order[0] != j ? order[0] : order[1], j);
    }
    std::size_t pos_correct = 0, neg_correct = 0;
    for (std::size_t b = 0; b < pairs.size(); b += chunk) {
        const std::size_t e = std::min(pairs.size(), b + chunk);
        std::vector<float> patches;
        std::vector<data::TokenSequence> texts;
        for (std::size_t p = b; p < e; ++p) {
            const auto& grid = heldout[pairs[p].first].patches.patches;
            patches.insert(patches.end(), grid.begin(), grid.end());
            texts.push_back(heldout[pairs[p].second].tokens);
        }
        auto logits = objectives::itm_logits(m, m.encode_pair({patches, e - b, {}}, texts));
        for (std::size_t p = b; p < e; ++p) {
            const bool says_match = logits.at((p - b) * 2 + 1) > logits.at((p - b) * 2);
            if (p < n) {
                pos_correct += says_match;
            } else {
                neg_correct += !says_match;
            }
        }
    }
    ItmReport r;
    r.positive_accuracy = double(pos_correct) / double(n);
    r.negative_accuracy = double(neg_correct) / double(2 * n);
    r.accuracy = 0.5 * (r.positive_accuracy + r.negative_accuracy);
    return r;
}

}  // namespace vlmo::tasks
