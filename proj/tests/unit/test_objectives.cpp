#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "vlmo/numerics/ops.hpp"
#include "vlmo/objectives/objectives.hpp"

using namespace vlmo;
using namespace vlmo::objectives;
using Td = Tensor<double>;

namespace {

Td unit_rows(std::size_t n, std::size_t d, std::mt19937& rng) {
    return l2_normalize(fd::random_tensor({n, d}, rng, 1.0, false)).detach();
}

std::vector<std::size_t> round_robin(std::size_t n, std::size_t k) {
    std::vector<std::size_t> w(n);
    for (std::size_t i = 0; i < n; ++i) w[i] = i % k;
    return w;
}

model::ModelConfig small_config() {
    model::ModelConfig c;
    c.layers = 2;
    c.hidden = 16;
    c.heads = 2;
    c.ffn = 32;
    c.itc_dim = 8;
    return c;
}

data::MultimodalBatch toy_batch(std::size_t n, std::size_t workers, std::uint64_t seed, double mask_prob) {
    auto corpus = data::generate_corpus(n, seed);
    auto examples = data::make_examples(corpus, 4, 24);
    std::vector<std::size_t> picks(n);
    std::iota(picks.begin(), picks.end(), 0);
    auto batch = data::make_batch(examples, picks, workers);
    std::mt19937_64 rng(seed);
    data::apply_mlm_masks(batch, {mask_prob, false}, rng);
    return batch;
}

}  // namespace

TEST_CASE("itc_loss closed forms") {
    auto one = Td::scalar(1.0);
    auto same = Td::from({2, 2}, {1, 0, 1, 0});
    CHECK(itc_loss(same, same, one).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    auto ortho = Td::from({2, 2}, {1, 0, 0, 1});
    const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    CHECK(itc_loss(ortho, ortho, one).item() == doctest::Approx(expected).epsilon(1e-12));
    CHECK(expected == doctest::Approx(0.31326).epsilon(1e-5));

    double previous = 1e9;
    for (double s : {1.0, 0.3, 0.1, 0.03, 0.01, 0.001}) {
        const double v = itc_loss(ortho, ortho, Td::scalar(s)).item();
        CHECK(v <= previous);
        previous = v;
    }
    CHECK(previous < 1e-100);

    CHECK_THROWS_AS(itc_loss(Td::from({1, 2}, {1, 0}), Td::from({1, 2}, {1, 0}), one), ContractError);
}

TEST_CASE("temperature is clamped and differentiable") {
    auto logt = Td::from({1}, {std::log(0.07)}, true);
    auto s = temperature(logt);
    CHECK(s.item() == doctest::Approx(0.07));
    s.backward();
    CHECK(logt.grad()[0] == doctest::Approx(0.07));
    CHECK(temperature(Td::scalar(-20.0)).item() == doctest::Approx(kMinTemperature));
    CHECK(temperature(Td::scalar(20.0)).item() == doctest::Approx(kMaxTemperature));
}

TEST_CASE("itc_loss properties") {
    std::mt19937 rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 2 + rng() % 7;
        auto img = unit_rows(n, 6, rng), txt = unit_rows(n, 6, rng);
        auto sim = similarity(img, txt);
        const auto& s = sim.i2t;
        const auto& t = sim.t2i;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                CHECK(t.at(i * n + j) == s.at(j * n + i));
                CHECK(std::abs(s.at(i * n + j)) <= 1.0 + 1e-12);
            }

        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        auto sigma = Td::scalar(0.2);
        const double base = itc_loss(img, txt, sigma).item();
        const double permuted =
            itc_loss(gather_rows(img, std::span<const std::size_t>(perm)), gather_rows(txt, std::span<const std::size_t>(perm)), sigma)
                .item();
        CHECK(permuted == doctest::Approx(base).epsilon(1e-12));

        auto logt = Td::from({1}, {std::log(0.2)}, true);
        itc_loss(img, txt, temperature(logt)).backward();
        CHECK(std::abs(logt.grad()[0]) > 1e-8);
    }

    SUBCASE("gradients match finite differences") {
        auto a = fd::random_tensor({5, 4}, rng), b = fd::random_tensor({5, 4}, rng);
        auto logt = Td::from({1}, {std::log(0.3)}, true);
        std::vector<Td> inputs{a, b, logt};
        auto worst = fd::worst_mismatch(inputs, [&] {
            return itc_loss(l2_normalize(inputs[0]), l2_normalize(inputs[1]), temperature(inputs[2]));
        });
        CHECK(worst.rel < 1e-6);
        auto worst_gathered = fd::worst_mismatch(inputs, [&] {
            auto w = round_robin(5, 2);
            return itc_loss_gathered(l2_normalize(inputs[0]), l2_normalize(inputs[1]), temperature(inputs[2]),
                                     std::span<const std::size_t>(w), 2);
        });
        CHECK(worst_gathered.rel > 1e-3);  // detached rows make the pooled loss differ from its full derivative
    }
}

TEST_CASE("gather_candidates") {
    std::mt19937 rng(2);
    auto emb = fd::random_tensor({32, 4}, rng);
    auto w = round_robin(32, 4);
    auto pool = gather_candidates(emb, std::span<const std::size_t>(w), 4, 1);
    CHECK(pool.embeddings.rows() == 32);
    for (std::size_t i = 0; i < 8; ++i) {
        CHECK(pool.worker[i] == 0);
        CHECK(pool.source_row[i] == i * 4);
    }
    sum(pool.embeddings).backward();
    for (std::size_t r = 0; r < 32; ++r) {
        const bool local = w[r] == 1;
        CHECK((emb.grad()[r * 4] != 0.0) == local);
    }

    auto one = std::vector<std::size_t>(32, 0);
    auto single = gather_candidates(emb, std::span<const std::size_t>(one), 1, 0);
    for (std::size_t i = 0; i < 32 * 4; ++i) CHECK(single.embeddings.at(i) == emb.at(i));

    auto big = fd::random_tensor({1024, 2}, rng, 1.0, false);
    auto w32 = round_robin(1024, 32);
    CHECK(gather_candidates(big, std::span<const std::size_t>(w32), 32, 0).embeddings.rows() == 1024);

    SUBCASE("one worker reduces to the plain loss") {
        auto img = unit_rows(6, 5, rng), txt = unit_rows(6, 5, rng);
        auto zeros = std::vector<std::size_t>(6, 0);
        auto sigma = Td::scalar(0.1);
        CHECK(itc_loss_gathered(img, txt, sigma, std::span<const std::size_t>(zeros), 1).item() ==
              itc_loss(img, txt, sigma).item());
    }
}

TEST_CASE("sample_hard_negatives") {
    const std::size_t n = 8;
    std::vector<std::size_t> w(n, 0);
    std::vector<double> s(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) s[i * n + i] = 1.0;
    s[0 * n + 5] = 1000.0;  // image 0 vs text 5
    s[3 * n + 2] = 1000.0;  // image 3 vs text 2: negative image for text 2
    std::mt19937_64 rng(1);
    std::size_t hits = 0, hits_image = 0;
    for (int k = 0; k < 10000; ++k) {
        auto a = sample_hard_negatives(s, n, 1.0, w, MiningMode::global, false, rng);
        hits += a.negative_text[0] == 5;
        hits_image += a.negative_image[2] == 3;
        for (std::size_t i = 0; i < n; ++i) {
            REQUIRE(a.negative_text[i] != i);
            REQUIRE(a.negative_image[i] != i);
        }
    }
    CHECK(double(hits) / 10000 > 0.999);
    CHECK(double(hits_image) / 10000 > 0.999);

    SUBCASE("local mode stays on the anchor's worker") {
        std::mt19937 r(8);
        auto img = unit_rows(32, 6, r), txt = unit_rows(32, 6, r);
        auto sim = matmul(img, transpose(txt));
        std::vector<double> sv(sim.data().begin(), sim.data().end());
        auto workers = round_robin(32, 4);
        for (int k = 0; k < 200; ++k) {
            auto a = sample_hard_negatives(sv, 32, 0.1, workers, MiningMode::local, false, rng);
            for (std::size_t i = 0; i < 32; ++i) {
                REQUIRE(workers[a.negative_text[i]] == workers[i]);
                REQUIRE(workers[a.negative_image[i]] == workers[i]);
                REQUIRE(a.negative_text[i] != i);
            }
        }
        auto hard = sample_hard_negatives(sv, 32, 0.1, workers, MiningMode::global, true, rng);
        for (std::size_t i = 0; i < 32; ++i) {
            double best = -2;
            for (std::size_t j = 0; j < 32; ++j)
                if (j != i) best = std::max(best, sv[i * 32 + j]);
            CHECK(sv[i * 32 + hard.negative_text[i]] == best);
        }
    }
    SUBCASE("a pool holding only the positive is rejected") {
        std::vector<double> one{1.0};
        std::vector<std::size_t> w1{0};
        CHECK_THROWS_AS(sample_hard_negatives(one, 1, 1.0, w1, MiningMode::global, false, rng), ContractError);
        std::vector<double> four(16, 0.0);
        std::vector<std::size_t> w4{0, 1, 2, 3};
        CHECK_THROWS_AS(sample_hard_negatives(four, 4, 1.0, w4, MiningMode::local, false, rng), ContractError);
    }
}

TEST_CASE("global mining finds harder negatives than local mining") {
    // Clustered embeddings: 8 clusters spread over 4 workers x 8 examples.
    std::size_t global_wins = 0;
    double mean_gap = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        std::mt19937 r(static_cast<unsigned>(seed));
        std::normal_distribution<double> n01;
        std::vector<double> centers(8 * 6);
        for (auto& c : centers) c = n01(r);
        std::vector<double> img(32 * 6), txt(32 * 6);
        for (std::size_t i = 0; i < 32; ++i) {
            const std::size_t cluster = r() % 8;
            for (std::size_t k = 0; k < 6; ++k) {
                img[i * 6 + k] = centers[cluster * 6 + k] + 0.3 * n01(r);
                txt[i * 6 + k] = centers[cluster * 6 + k] + 0.3 * n01(r);
            }
        }
        auto sim = matmul(l2_normalize(Td::from({32, 6}, img)), transpose(l2_normalize(Td::from({32, 6}, txt))));
        std::vector<double> sv(sim.data().begin(), sim.data().end());
        auto workers = round_robin(32, 4);
        std::mt19937_64 rng(seed);
        auto g = sample_hard_negatives(sv, 32, 0.07, workers, MiningMode::global, false, rng);
        auto l = sample_hard_negatives(sv, 32, 0.07, workers, MiningMode::local, false, rng);
        const double gap = mean_negative_similarity(sv, 32, g) - mean_negative_similarity(sv, 32, l);
        global_wins += gap > 0;
        mean_gap += gap / 100;
    }
    CHECK(mean_gap > 0);
    CHECK(global_wins >= 90);
}

TEST_CASE("mlm_loss") {
    auto c = small_config();
    model::Model<double> m(c, 3);
    auto batch = toy_batch(3, 1, 5, 0.5);
    std::vector<data::TokenSequence> corrupted;
    for (const auto& mt : batch.masked) corrupted.push_back(mt.tokens);
    auto enc = m.encode_pair({batch.patches, 3, {}}, corrupted);

    auto none = batch.masked;
    for (auto& mt : none) std::fill(mt.labels.begin(), mt.labels.end(), kIgnoreIndex);
    auto skipped = mlm_loss(m, enc, std::span<const data::MaskedTokens>(none));
    CHECK(skipped.skipped);
    CHECK(skipped.loss.item() == 0.0);

    model::Model<double> flat(c, 3);
    for (auto name : {"head.mlm.weight", "head.mlm.bias"}) {
        auto& t = flat.params().get(name);
        std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
    }
    auto uniform = mlm_loss(flat, flat.encode_pair({batch.patches, 3, {}}, corrupted),
                            std::span<const data::MaskedTokens>(batch.masked));
    REQUIRE_FALSE(uniform.skipped);
    CHECK(uniform.loss.item() == doctest::Approx(std::log(64.0)).epsilon(1e-12));

    std::vector<double> onehot(2 * 64, 0.0);
    onehot[7] = 200;
    onehot[64 + 9] = 200;
    std::vector<std::int64_t> truth{7, 9};
    CHECK(cross_entropy(Td::from({2, 64}, onehot), std::span<const std::int64_t>(truth)).item() < 1e-12);

    SUBCASE("rows at unmasked positions do not matter") {
        auto base = mlm_loss(m, enc, std::span<const data::MaskedTokens>(batch.masked)).loss.item();
        auto noisy = enc;
        std::vector<double> h(enc.hidden.data().begin(), enc.hidden.data().end());
        std::mt19937 r(1);
        for (std::size_t b = 0; b < 3; ++b)
            for (std::size_t t = 0; t < enc.layout.seq; ++t) {
                const bool masked = t < batch.masked[b].labels.size() && batch.masked[b].labels[t] != kIgnoreIndex;
                if (masked) continue;
                for (std::size_t j = 0; j < 16; ++j) h[(b * enc.layout.seq + t) * 16 + j] = double(r() % 100);
            }
        noisy.hidden = Td::from(enc.hidden.shape(), h);
        CHECK(mlm_loss(m, noisy, std::span<const data::MaskedTokens>(batch.masked)).loss.item() == base);
    }
}

TEST_CASE("itm") {
    auto c = small_config();
    model::Model<double> m(c, 4);
    auto batch = toy_batch(4, 1, 6, 0.15);
    HardNegativeAssignment a{{1, 2, 3, 0}, {3, 0, 1, 2}, MiningMode::global};
    auto itm = build_itm_batch(batch, a);
    REQUIRE(itm.size() == 12);
    for (std::size_t i = 0; i < 12; ++i) CHECK(itm.labels[i] == (i < 4 ? 1 : 0));
    CHECK(itm.texts[4].ids == batch.tokens[1].ids);
    CHECK(std::equal(itm.patches.begin() + 8 * 768, itm.patches.begin() + 9 * 768, batch.patches.begin() + 3 * 768));

    for (auto name : {"head.itm.weight", "head.itm.bias"}) {
        auto& t = m.params().get(name);
        std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
    }
    CHECK(itm_loss(m, itm).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    std::vector<double> truth;
    for (auto l : itm.labels) {
        truth.push_back(l == 0 ? 100.0 : 0.0);
        truth.push_back(l == 1 ? 100.0 : 0.0);
    }
    CHECK(cross_entropy(Td::from({12, 2}, truth), std::span<const std::int64_t>(itm.labels)).item() < 1e-12);
}

TEST_CASE("combined_pretrain_loss") {
    CHECK(sum_losses<double>({}).item() == 0.0);
    CHECK(sum_losses<double>({Td::scalar(0.3), Td::scalar(0.7), Td::scalar(4.0)}).item() == doctest::Approx(5.0));

    auto c = small_config();
    model::Model<double> m(c, 7);
    auto batch = toy_batch(4, 2, 8, 0.3);
    std::mt19937_64 rng(3);
    PretrainOptions options;
    auto full = combined_pretrain_loss(m, batch, options, rng);
    CHECK(full.total.item() == doctest::Approx(full.itc + full.itm + full.mlm).epsilon(1e-12));
    CHECK(full.sigma == doctest::Approx(0.07));
    CHECK(std::isfinite(full.hard_negative_similarity));

    auto negatives = full.negatives;
    auto component = [&](bool itc, bool itm, bool mlm) {
        PretrainOptions o;
        o.use_itc = itc;
        o.use_itm = itm;
        o.use_mlm = mlm;
        std::mt19937_64 r(3);
        return combined_pretrain_loss(m, batch, o, r, &negatives);
    };
    auto only_itc = component(true, false, false);
    auto only_itm = component(false, true, false);
    auto only_mlm = component(false, false, true);
    CHECK(only_itc.total.item() == doctest::Approx(full.itc).epsilon(1e-12));
    CHECK(only_itm.total.item() == doctest::Approx(full.itm).epsilon(1e-12));
    CHECK(only_mlm.total.item() == doctest::Approx(full.mlm).epsilon(1e-12));

    SUBCASE("gradient of the sum equals the summed component gradients") {
        std::vector<std::vector<double>> grads;
        for (auto flags : {std::array<bool, 3>{true, true, true}, {true, false, false}, {false, true, false},
                           {false, false, true}}) {
            m.params().zero_grad();
            component(flags[0], flags[1], flags[2]).total.backward();
            std::vector<double> g;
            for (auto& [name, t] : m.params().entries()) {
                if (t.has_grad()) g.insert(g.end(), t.grad().begin(), t.grad().end());
                else g.insert(g.end(), t.numel(), 0.0);
            }
            grads.push_back(std::move(g));
        }
        for (std::size_t i = 0; i < grads[0].size(); ++i) {
            REQUIRE(grads[0][i] == doctest::Approx(grads[1][i] + grads[2][i] + grads[3][i]).epsilon(1e-9));
        }
        m.params().zero_grad();
    }
    SUBCASE("combined loss gradient matches finite differences") {
        // One worker: with several, detached gathered rows make the analytic
        // gradient differ from the derivative on purpose.
        batch = toy_batch(4, 1, 8, 0.3);
        std::vector<Td> inputs;
        std::vector<std::string> names;
        for (auto& [name, t] : m.params().entries()) {
            if (name == "image.mask" || name.rfind("head.mim", 0) == 0) continue;
            inputs.push_back(t);
            names.push_back(name);
        }
        auto worst = fd::worst_mismatch(inputs, [&] { return component(true, true, true).total; }, 1e-5, 4);
        CHECK_MESSAGE(worst.rel < 1e-4, names[worst.input], " ", worst.analytic, " vs ", worst.numeric);
    }
}
