#include "vlmo/cli/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <unordered_set>

#include "vlmo/backbone/model.hpp"
#include "vlmo/data/corpus.hpp"
#include "vlmo/numerics/ops.hpp"
#include "vlmo/objectives/objectives.hpp"
#include "vlmo/training/training.hpp"
#include "vlmo/util/files.hpp"

namespace vlmo::cli {
namespace {

using Td = Tensor<double>;

struct Case {
    std::string name;
    // Fills the inputs to probe and returns the scalar builder over them.
    std::function<std::function<Td()>(std::vector<Td>&, std::mt19937_64&)> setup;
};

Td random(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = dist(rng);
    return Td::from(std::move(shape), std::move(v), true);
}

// Contracts an arbitrary output with fixed random weights so every output
// element carries a distinct upstream gradient.
std::function<Td(const Td&)> probe(std::mt19937_64& rng) {
    auto seed = rng();
    return [seed](const Td& out) {
        std::mt19937_64 r(seed);
        std::normal_distribution<double> dist(0.0, 1.0);
        std::vector<double> w(out.numel());
        for (auto& x : w) x = dist(r);
        return sum(mul(out, Td::from(out.shape(), std::move(w))));
    };
}

template <typename F>
Case unary(std::string name, Shape shape, F f, double scale = 1.0) {
    return {name, [shape, f, scale](std::vector<Td>& in, std::mt19937_64& rng) {
                in = {random(shape, rng, scale)};
                auto p = probe(rng);
                return std::function<Td()>([&in, f, p] { return p(f(in[0])); });
            }};
}

template <typename F>
Case binary(std::string name, Shape a, Shape b, F f) {
    return {name, [a, b, f](std::vector<Td>& in, std::mt19937_64& rng) {
                in = {random(a, rng), random(b, rng)};
                auto p = probe(rng);
                return std::function<Td()>([&in, f, p] { return p(f(in[0], in[1])); });
            }};
}

std::vector<Case> op_cases() {
    std::vector<Case> cases;
    cases.push_back(binary("matmul", {3, 4}, {4, 5}, [](const Td& a, const Td& b) { return matmul(a, b); }));
    cases.push_back({"linear", [](std::vector<Td>& in, std::mt19937_64& rng) {
                         in = {random({5, 4}, rng), random({4, 3}, rng), random({3}, rng)};
                         auto p = probe(rng);
                         return std::function<Td()>([&in, p] { return p(linear(in[0], in[1], in[2])); });
                     }});
    cases.push_back(binary("add", {3, 4}, {3, 4}, [](const Td& a, const Td& b) { return add(a, b); }));
    cases.push_back(binary("sub", {3, 4}, {3, 4}, [](const Td& a, const Td& b) { return sub(a, b); }));
    cases.push_back(binary("mul", {3, 4}, {3, 4}, [](const Td& a, const Td& b) { return mul(a, b); }));
    cases.push_back(unary("scale", {3, 4}, [](const Td& x) { return scale(x, -1.7); }));
    cases.push_back(binary("add_rows", {6, 4}, {2, 4}, [](const Td& a, const Td& b) { return add_rows(a, b); }));
    cases.push_back(unary("transpose", {3, 5}, [](const Td& x) { return transpose(x); }));
    cases.push_back(unary("softmax_rows", {4, 5}, [](const Td& x) { return softmax(x, 1); }, 2.0));
    cases.push_back(unary("softmax_cols", {4, 5}, [](const Td& x) { return softmax(x, 0); }, 2.0));
    cases.push_back({"layer_norm", [](std::vector<Td>& in, std::mt19937_64& rng) {
                         in = {random({4, 6}, rng, 2.0), random({6}, rng), random({6}, rng)};
                         auto p = probe(rng);
                         return std::function<Td()>([&in, p] { return p(layer_norm(in[0], in[1], in[2], 1e-5)); });
                     }});
    cases.push_back(unary("gelu", {4, 6}, [](const Td& x) { return gelu(x); }, 2.0));
    cases.push_back({"cross_entropy", [](std::vector<Td>& in, std::mt19937_64& rng) {
                         in = {random({5, 4}, rng, 2.0)};
                         return std::function<Td()>([&in] {
                             const std::vector<std::int64_t> t{2, kIgnoreIndex, 0, 3, 1};
                             return cross_entropy(in[0], std::span<const std::int64_t>(t));
                         });
                     }});
    cases.push_back(unary("l2_normalize", {4, 5}, [](const Td& x) { return l2_normalize(x); }));
    cases.push_back({"attention", [](std::vector<Td>& in, std::mt19937_64& rng) {
                         // Two sequences of 4, 2 heads of width 3; the last key of
                         // the second sequence is padding.
                         in = {random({8, 18}, rng)};
                         auto p = probe(rng);
                         return std::function<Td()>([&in, p] {
                             static const std::vector<std::uint8_t> valid{1, 1, 1, 1, 1, 1, 1, 0};
                             return p(attention(in[0], 2, 4, 2, std::span<const std::uint8_t>(valid)));
                         });
                     }});
    cases.push_back(unary("gather_rows", {4, 3}, [](const Td& x) {
        static const std::vector<std::size_t> idx{3, 0, 3, 1};
        return gather_rows(x, std::span<const std::size_t>(idx));
    }));
    cases.push_back(binary("concat_rows", {2, 3}, {3, 3}, [](const Td& a, const Td& b) {
        return concat_rows<double>({a, b});
    }));
    cases.push_back(binary("concat_cols", {3, 2}, {3, 4}, [](const Td& a, const Td& b) {
        return concat_cols<double>({a, b});
    }));
    cases.push_back(unary("sum", {3, 4}, [](const Td& x) { return scale(sum(x), 0.7); }));
    cases.push_back(unary("mean", {3, 4}, [](const Td& x) { return scale(mean(x), 0.7); }));
    cases.push_back(unary("exp", {3, 4}, [](const Td& x) { return exp(x); }));
    // Inputs kept away from the kinks, where the derivative is undefined.
    cases.push_back({"clamp", [](std::vector<Td>& in, std::mt19937_64& rng) {
                         std::vector<double> v{-2.0, -0.6, -0.2, 0.1, 0.35, 0.8, 1.6, -1.3};
                         std::uniform_real_distribution<double> jitter(-0.05, 0.05);
                         for (auto& x : v) x += jitter(rng);
                         in = {Td::from({2, 4}, v, true)};
                         auto p = probe(rng);
                         return std::function<Td()>([&in, p] { return p(clamp(in[0], -1.0, 1.0)); });
                     }});
    cases.push_back({"div_scalar", [](std::vector<Td>& in, std::mt19937_64& rng) {
                         in = {random({3, 4}, rng), Td::scalar(1.3, true)};
                         auto p = probe(rng);
                         return std::function<Td()>([&in, p] { return p(div_scalar(in[0], in[1])); });
                     }});
    cases.push_back(binary("mse_loss", {4, 3}, {4, 3}, [](const Td& a, const Td& b) { return mse_loss(a, b); }));
    return cases;
}

void collect_ops(const Td& root, std::set<std::string>& out) {
    std::unordered_set<const Node<double>*> seen;
    std::vector<const Node<double>*> stack{root.node()};
    while (!stack.empty()) {
        auto* n = stack.back();
        stack.pop_back();
        if (!n || !seen.insert(n).second) continue;
        if (std::string(n->op) != "leaf") out.insert(n->op);
        for (const auto& p : n->parents) stack.push_back(p.get());
    }
}

double relative_error(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

GradcheckResult check(const std::string& name, std::vector<Td>& inputs, std::vector<std::string> labels,
                      const std::function<Td()>& build, std::size_t per_tensor, const GradcheckOptions& options,
                      std::uint64_t seed) {
    GradcheckResult r;
    r.name = name;
    for (auto& t : inputs) t.zero_grad();
    auto loss = build();
    collect_ops(loss, r.ops);
    loss.backward();
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto& t = inputs[i];
        std::vector<double> analytic(t.numel(), 0.0);
        if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
        std::vector<std::size_t> picks(t.numel());
        std::iota(picks.begin(), picks.end(), 0);
        if (picks.size() > per_tensor) {
            std::shuffle(picks.begin(), picks.end(), rng);
            picks.resize(per_tensor);
            std::sort(picks.begin(), picks.end());
        }
        auto values = t.mutable_data();
        for (auto e : picks) {
            const double saved = values[e];
            values[e] = saved + options.step;
            const double up = build().item();
            values[e] = saved - options.step;
            const double down = build().item();
            values[e] = saved;
            const double numeric = (up - down) / (2 * options.step);
            const double rel = relative_error(analytic[e], numeric);
            ++r.checked;
            if (rel >= r.worst_rel) {
                r.worst_rel = rel;
                r.worst_at = labels[i] + "[" + std::to_string(e) + "]";
            }
        }
    }
    for (auto& t : inputs) t.zero_grad();
    r.passed = r.checked > 0 && r.worst_rel < options.tolerance;
    return r;
}

data::MultimodalBatch tiny_batch(const model::ModelConfig& config, std::uint64_t seed) {
    auto corpus = data::generate_corpus(4, util::mix_seed(seed, 91));
    auto examples = data::make_examples(corpus, config.patch, config.max_text_length);
    std::vector<std::size_t> picks{0, 1, 2, 3};
    auto batch = data::make_batch(examples, picks, 1);
    std::mt19937_64 rng(util::mix_seed(seed, 92));
    data::apply_mlm_masks(batch, {0.3, false}, rng);
    return batch;
}

}  // namespace

std::vector<std::string> registered_op_cases() {
    std::vector<std::string> names;
    for (const auto& c : op_cases()) names.push_back(c.name);
    return names;
}

std::vector<GradcheckResult> gradcheck_ops(const GradcheckOptions& options) {
    std::vector<GradcheckResult> out;
    std::uint64_t k = 0;
    for (const auto& c : op_cases()) {
        std::mt19937_64 rng(util::mix_seed(options.seed, 1000 + k++));
        std::vector<Td> inputs;
        auto build = c.setup(inputs, rng);
        std::vector<std::string> labels;
        for (std::size_t i = 0; i < inputs.size(); ++i) labels.push_back("input" + std::to_string(i));
        out.push_back(check(c.name, inputs, labels, build, options.max_per_tensor, options, rng()));
    }
    return out;
}

std::vector<GradcheckResult> gradcheck_model(const model::ModelConfig& config, const GradcheckOptions& options) {
    model::Model<double> m(config, util::mix_seed(options.seed, 90));
    std::vector<Td> params;
    std::vector<std::string> names;
    for (auto& [name, t] : m.params().entries()) {
        params.push_back(t);
        names.push_back(name);
    }
    std::vector<GradcheckResult> out;

    // Negatives are sampled once and then held fixed: resampling inside a
    // finite difference would make the loss discontinuous.
    auto batch = tiny_batch(config, options.seed);
    objectives::PretrainOptions po;
    std::mt19937_64 rng(util::mix_seed(options.seed, 93));
    const auto negatives = combined_pretrain_loss(m, batch, po, rng).negatives;
    auto combined = [&] {
        std::mt19937_64 r(0);
        return combined_pretrain_loss(m, batch, po, r, &negatives).total;
    };
    out.push_back(check("combined_pretrain_loss", params, names, combined, options.model_per_tensor, options,
                        util::mix_seed(options.seed, 94)));

    std::vector<std::uint8_t> masked;
    std::mt19937_64 mrng(util::mix_seed(options.seed, 95));
    for (std::size_t b = 0; b < batch.size(); ++b) {
        auto one = training::block_mask(config.image_height / config.patch, config.image_width / config.patch, 0.4, mrng);
        masked.insert(masked.end(), one.begin(), one.end());
    }
    auto mim = [&] { return training::mim_loss(m, batch.patches, batch.size(), masked); };
    out.push_back(check("masked_patch_loss", params, names, mim, options.model_per_tensor, options,
                        util::mix_seed(options.seed, 96)));
    return out;
}

std::vector<std::string> uncovered_ops(const std::vector<GradcheckResult>& op_results,
                                       const std::vector<GradcheckResult>& model_results) {
    std::set<std::string> covered, used;
    for (const auto& r : op_results) covered.insert(r.ops.begin(), r.ops.end());
    for (const auto& r : model_results) used.insert(r.ops.begin(), r.ops.end());
    std::vector<std::string> missing;
    std::set_difference(used.begin(), used.end(), covered.begin(), covered.end(), std::back_inserter(missing));
    return missing;
}

}  // namespace vlmo::cli
