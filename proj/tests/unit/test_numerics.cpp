#include <cmath>
#include <random>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "vlmo/numerics/adamw.hpp"
#include "vlmo/numerics/ops.hpp"

using namespace vlmo;
using Td = Tensor<double>;
using Tf = Tensor<float>;

namespace {

void check_close(const Td& t, std::vector<double> expected, double tol) {
    REQUIRE(t.numel() == expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) CHECK(std::abs(t.at(i) - expected[i]) <= tol);
}

}  // namespace

TEST_CASE("matmul") {
    auto identity = Td::from({2, 2}, {1, 0, 0, 1});
    auto b = Td::from({2, 2}, {1, 2, 3, 4});
    check_close(matmul(identity, b), {1, 2, 3, 4}, 0);

    auto a = Td::from({2, 2}, {1, 2, 3, 4});
    auto c = Td::from({2, 2}, {5, 6, 7, 8});
    check_close(matmul(a, c), {19, 22, 43, 50}, 0);

    auto x = Td::zeros({2, 3});
    auto y = Td::zeros({2, 3});
    try {
        matmul(x, y);
        FAIL("expected a dimension error");
    } catch (const DimensionError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
    }
}

TEST_CASE("softmax") {
    check_close(softmax(Td::from({2}, {0, 0}), 0), {0.5, 0.5}, 1e-12);
    check_close(softmax(Td::from({3}, {1, 2, 3}), 0), {0.09003, 0.24473, 0.66524}, 1e-5);
    auto big = softmax(Td::from({2}, {1000, 0}), 0);
    check_close(big, {1, 0}, 1e-12);
    CHECK(big.all_finite());
    CHECK_THROWS_AS(softmax(Td::from({2}, {NAN, 0}), 0), NumericError);

    SUBCASE("rows sum to one along either axis") {
        std::mt19937 rng(11);
        for (int trial = 0; trial < 20; ++trial) {
            auto x = fd::random_tensor({4, 7}, rng, 5.0, false);
            for (std::size_t axis : {0u, 1u}) {
                auto y = softmax(x, axis);
                const std::size_t r = 4, c = 7;
                const std::size_t outer = axis == 0 ? c : r, extent = axis == 0 ? r : c;
                for (std::size_t o = 0; o < outer; ++o) {
                    double total = 0;
                    for (std::size_t j = 0; j < extent; ++j) {
                        double v = axis == 0 ? y.at(j * c + o) : y.at(o * c + j);
                        CHECK(v >= 0.0);
                        CHECK(v <= 1.0);
                        total += v;
                    }
                    CHECK(std::abs(total - 1.0) < 1e-6);
                }
            }
        }
    }
}

TEST_CASE("layer_norm") {
    auto ones = Td::full({2}, 1.0);
    auto zeros = Td::zeros({2});
    check_close(layer_norm(Td::from({1, 2}, {5, 5}), ones, zeros, 1e-5), {0, 0}, 1e-12);
    check_close(layer_norm(Td::from({1, 2}, {1, 3}), ones, zeros, 1e-12), {-1, 1}, 1e-9);
    auto beta = Td::from({2}, {0.25, -3});
    check_close(layer_norm(Td::from({1, 2}, {7, -2}), zeros, beta, 1e-5), {0.25, -3}, 0);
    CHECK_THROWS_AS(layer_norm(Td::from({1, 2}, {1, 3}), ones, zeros, 0.0), ContractError);
}

TEST_CASE("gelu") {
    check_close(gelu(Td::from({3}, {0, 1, 10})), {0, 0.84134, 10}, 1e-4);
}

TEST_CASE("cross_entropy") {
    std::vector<std::int64_t> target0{0};
    CHECK(cross_entropy(Td::zeros({1, 4}), target0).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    CHECK(cross_entropy(Td::from({1, 4}, {1000, 0, 0, 0}), target0).item() < 1e-12);
    CHECK(cross_entropy(Td::from({1, 2}, {1, 0}), target0).item() == doctest::Approx(0.31326).epsilon(1e-5));
    std::vector<std::int64_t> bad{4};
    CHECK_THROWS_AS(cross_entropy(Td::zeros({1, 4}), bad), IndexError);

    SUBCASE("ignored rows do not count") {
        std::vector<std::int64_t> targets{0, kIgnoreIndex};
        auto logits = Td::from({2, 2}, {1, 0, 50, -50}, true);
        auto loss = cross_entropy(logits, targets);
        CHECK(loss.item() == doctest::Approx(0.31326).epsilon(1e-5));
        loss.backward();
        CHECK(logits.grad()[2] == 0.0);
        CHECK(logits.grad()[3] == 0.0);
    }
    SUBCASE("all ignored is zero") {
        std::vector<std::int64_t> targets{kIgnoreIndex, kIgnoreIndex};
        CHECK(cross_entropy(Td::zeros({2, 3}), targets).item() == 0.0);
    }
}

TEST_CASE("l2_normalize") {
    check_close(l2_normalize(Td::from({1, 2}, {3, 4})), {0.6, 0.8}, 1e-12);
    check_close(l2_normalize(Td::from({1, 3}, {0, 1, 0})), {0, 1, 0}, 0);
    check_close(l2_normalize(Td::from({1, 2}, {0, 0})), {0, 0}, 0);

    std::mt19937 rng(3);
    auto x = fd::random_tensor({16, 9}, rng, 3.0, false);
    auto y = l2_normalize(x);
    for (std::size_t i = 0; i < 16; ++i) {
        double sq = 0;
        for (std::size_t j = 0; j < 9; ++j) sq += y.at(i * 9 + j) * y.at(i * 9 + j);
        CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-6);
    }
}

TEST_CASE("backward basics") {
    auto x = Td::from({3}, {1, -2, 0.5}, true);
    sum(mul(x, x)).backward();
    check_close(Td::from({3}, std::vector<double>(x.grad().begin(), x.grad().end())), {2, -4, 1}, 1e-12);

    SUBCASE("repeated backward accumulates into leaves") {
        auto w = Td::from({2}, {1, 2}, true);
        auto loss = sum(mul(w, w));
        loss.backward();
        loss.backward();
        CHECK(w.grad()[0] == doctest::Approx(4.0));
        CHECK(w.grad()[1] == doctest::Approx(8.0));
    }
    SUBCASE("detached tensors receive no gradient") {
        auto w = Td::from({2}, {1, 2}, true);
        auto frozen = w.detach();
        sum(mul(frozen, w)).backward();
        CHECK_FALSE(frozen.has_grad());
        CHECK(w.has_grad());
    }
    SUBCASE("non-scalar loss is rejected") {
        auto w = Td::from({2}, {1, 2}, true);
        CHECK_THROWS_AS(mul(w, w).backward(), ContractError);
    }
    SUBCASE("matmul chain against finite differences") {
        std::mt19937 rng(5);
        std::vector<Td> in{fd::random_tensor({3, 4}, rng), fd::random_tensor({4, 5}, rng),
                           fd::random_tensor({5, 2}, rng)};
        auto worst = fd::worst_mismatch(in, [&] { return sum(mul(matmul(matmul(in[0], in[1]), in[2]),
                                                                 matmul(matmul(in[0], in[1]), in[2]))); });
        CHECK(worst.rel < 1e-3);
    }
}

TEST_CASE("every op matches finite differences in double precision") {
    std::mt19937 rng(17);
    auto check = [](std::vector<Td> in, const std::function<Td(std::vector<Td>&)>& f) {
        auto worst = fd::worst_mismatch(in, [&] { return f(in); });
        INFO("input " << worst.input << " element " << worst.element << " analytic " << worst.analytic
                      << " numeric " << worst.numeric);
        CHECK(worst.rel < 1e-3);
    };
    // A fixed random projection turns any tensor into a generic scalar.
    auto project = [](const Td& y) {
        std::vector<double> w(y.numel());
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(0.7 * double(i) + 0.3);
        return sum(mul(y, Td::from(y.shape(), w)));
    };

    check({fd::random_tensor({3, 4}, rng), fd::random_tensor({4, 2}, rng)},
          [&](auto& v) { return project(matmul(v[0], v[1])); });
    check({fd::random_tensor({5, 4}, rng), fd::random_tensor({4, 3}, rng), fd::random_tensor({3}, rng)},
          [&](auto& v) { return project(linear(v[0], v[1], v[2])); });
    check({fd::random_tensor({3, 4}, rng), fd::random_tensor({3, 4}, rng)},
          [&](auto& v) { return project(add(v[0], v[1])); });
    check({fd::random_tensor({3, 4}, rng), fd::random_tensor({3, 4}, rng)},
          [&](auto& v) { return project(sub(v[0], v[1])); });
    check({fd::random_tensor({3, 4}, rng), fd::random_tensor({3, 4}, rng)},
          [&](auto& v) { return project(mul(v[0], v[1])); });
    check({fd::random_tensor({3, 4}, rng)}, [&](auto& v) { return project(scale(v[0], -1.7)); });
    check({fd::random_tensor({6, 4}, rng), fd::random_tensor({3, 4}, rng)},
          [&](auto& v) { return project(add_rows(v[0], v[1])); });
    check({fd::random_tensor({3, 5}, rng)}, [&](auto& v) { return project(transpose(v[0])); });
    check({fd::random_tensor({3, 5}, rng)}, [&](auto& v) { return project(softmax(v[0], 1)); });
    check({fd::random_tensor({3, 5}, rng)}, [&](auto& v) { return project(softmax(v[0], 0)); });
    check({fd::random_tensor({4, 6}, rng, 2.0), fd::random_tensor({6}, rng), fd::random_tensor({6}, rng)},
          [&](auto& v) { return project(layer_norm(v[0], v[1], v[2], 1e-5)); });
    check({fd::random_tensor({4, 6}, rng, 2.0)}, [&](auto& v) { return project(gelu(v[0])); });
    check({fd::random_tensor({4, 5}, rng, 2.0)}, [&](auto& v) {
        std::vector<std::int64_t> t{1, kIgnoreIndex, 4, 0};
        return cross_entropy(v[0], t);
    });
    check({fd::random_tensor({4, 5}, rng, 2.0)}, [&](auto& v) { return project(l2_normalize(v[0])); });
    check({fd::random_tensor({2 * 5, 3 * 8}, rng)}, [&](auto& v) {
        std::vector<std::uint8_t> valid{1, 1, 1, 0, 0, 1, 1, 1, 1, 1};
        return project(attention(v[0], 2, 5, 2, valid));
    });
    check({fd::random_tensor({4, 3}, rng)}, [&](auto& v) {
        std::vector<std::size_t> idx{3, 0, 3, 1};
        return project(gather_rows(v[0], idx));
    });
    check({fd::random_tensor({2, 3}, rng), fd::random_tensor({4, 3}, rng)},
          [&](auto& v) { return project(concat_rows<double>({v[0], v[1]})); });
    check({fd::random_tensor({2, 3}, rng), fd::random_tensor({2, 1}, rng)},
          [&](auto& v) { return project(concat_cols<double>({v[0], v[1]})); });
    check({fd::random_tensor({2, 3}, rng)}, [&](auto& v) { return mean(mul(v[0], v[0])); });
    check({fd::random_tensor({2, 3}, rng)}, [&](auto& v) { return project(exp(v[0])); });
    check({fd::random_tensor({2, 3}, rng)}, [&](auto& v) { return project(clamp(v[0], -5.0, 5.0)); });
    check({fd::random_tensor({2, 3}, rng), Td::from({1}, {0.8}, true)},
          [&](auto& v) { return project(div_scalar(v[0], v[1])); });
    check({fd::random_tensor({2, 3}, rng), fd::random_tensor({2, 3}, rng)},
          [&](auto& v) { return mse_loss(v[0], v[1]); });
}

TEST_CASE("attention masks padded keys") {
    // Values at masked key positions must not influence any output.
    std::mt19937 rng(2);
    auto qkv = fd::random_tensor({4, 6}, rng, 1.0, false);
    std::vector<std::uint8_t> valid{1, 1, 1, 0};
    auto base = attention(qkv, 1, 4, 1, valid);
    auto changed = qkv.detach();
    changed.mutable_data()[3 * 6 + 4] += 100;  // v of the padded row
    changed.mutable_data()[3 * 6 + 2] += 100;  // k of the padded row
    auto after = attention(changed, 1, 4, 1, valid);
    for (std::size_t i = 0; i < 3 * 2; ++i) CHECK(after.at(i) == base.at(i));
}

TEST_CASE("adamw") {
    AdamWOptions opt;
    opt.lr = 0.1;

    SUBCASE("zero gradient and zero decay leave params unchanged") {
        opt.weight_decay = 0;
        std::vector<float> p{1.f, -2.f}, g{0.f, 0.f};
        auto state = AdamWState<float>::for_size(2);
        adamw_step<float>(p, g, state, opt);
        CHECK(p[0] == 1.f);
        CHECK(p[1] == -2.f);
        CHECK(state.step == 1);
    }
    SUBCASE("first step moves by lr times the gradient sign") {
        opt.weight_decay = 0;
        std::vector<double> p{1.0, 1.0}, g{0.3, -5.0};
        auto state = AdamWState<double>::for_size(2);
        adamw_step<double>(p, g, state, opt);
        CHECK(p[0] == doctest::Approx(1.0 - 0.1).epsilon(1e-6));
        CHECK(p[1] == doctest::Approx(1.0 + 0.1).epsilon(1e-6));
    }
    SUBCASE("decay only shrinks by lr * wd * param") {
        opt.weight_decay = 0.01;
        std::vector<double> p{2.0, -4.0}, g{0.0, 0.0};
        auto state = AdamWState<double>::for_size(2);
        adamw_step<double>(p, g, state, opt);
        CHECK(p[0] == doctest::Approx(2.0 - 0.1 * 0.01 * 2.0).epsilon(1e-12));
        CHECK(p[1] == doctest::Approx(-4.0 + 0.1 * 0.01 * 4.0).epsilon(1e-12));
    }
    SUBCASE("shape mismatch") {
        std::vector<double> p{2.0, -4.0}, g{0.0};
        auto state = AdamWState<double>::for_size(2);
        CHECK_THROWS_AS(adamw_step<double>(p, g, state, opt), DimensionError);
    }
}

TEST_CASE("touch scope records consumed tensors") {
    auto a = Tf::full({2, 2}, 1.f);
    auto b = Tf::full({2, 2}, 2.f);
    auto c = Tf::full({2, 2}, 3.f);
    TouchScope scope;
    auto y = add(a, b);
    CHECK(scope.touched(a.id()));
    CHECK(scope.touched(b.id()));
    CHECK_FALSE(scope.touched(c.id()));
}

TEST_CASE("determinism") {
    auto run = [] {
        std::mt19937 rng(99);
        auto x = fd::random_tensor({8, 12}, rng);
        auto w = fd::random_tensor({12, 4}, rng);
        auto loss = sum(gelu(layer_norm(linear(x, w, Td()), Td::full({4}, 1.0), Td::zeros({4}), 1e-5)));
        loss.backward();
        return std::vector<double>(w.grad().begin(), w.grad().end());
    };
    CHECK(run() == run());
}
