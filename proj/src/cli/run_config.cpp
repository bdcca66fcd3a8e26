#include "vlmo/cli/run_config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>

#include "vlmo/errors.hpp"
#include "vlmo/util/files.hpp"

namespace vlmo::cli {
namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

std::size_t to_size(std::string_view v) {
    std::size_t out = 0;
    auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || end != v.data() + v.size()) {
        throw ConfigError("expected a non-negative integer, got '" + std::string(v) + "'");
    }
    return out;
}

double to_double(std::string_view v) {
    double out = 0;
    auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || end != v.data() + v.size() || !std::isfinite(out)) {
        throw ConfigError("expected a number, got '" + std::string(v) + "'");
    }
    return out;
}

bool to_bool(std::string_view v) {
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw ConfigError("expected true or false, got '" + std::string(v) + "'");
}

std::string show(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string show(bool v) { return v ? "true" : "false"; }

struct Key {
    std::string name;
    std::function<void(RunConfig&, std::string_view)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <typename F>
Key size_key(std::string name, F field) {
    return {name, [field](RunConfig& c, std::string_view v) { field(c) = to_size(v); },
            [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); }};
}

template <typename F>
Key double_key(std::string name, F field) {
    return {name, [field](RunConfig& c, std::string_view v) { field(c) = to_double(v); },
            [field](const RunConfig& c) { return show(double(field(const_cast<RunConfig&>(c)))); }};
}

template <typename F>
Key bool_key(std::string name, F field) {
    return {name, [field](RunConfig& c, std::string_view v) { field(c) = to_bool(v); },
            [field](const RunConfig& c) { return show(bool(field(const_cast<RunConfig&>(c)))); }};
}

const std::vector<Key>& keys() {
    static const std::vector<Key> table = [] {
        std::vector<Key> k;
        k.push_back(size_key("model.layers", [](RunConfig& c) -> auto& { return c.model.layers; }));
        k.push_back(size_key("model.hidden", [](RunConfig& c) -> auto& { return c.model.hidden; }));
        k.push_back(size_key("model.heads", [](RunConfig& c) -> auto& { return c.model.heads; }));
        k.push_back(size_key("model.ffn", [](RunConfig& c) -> auto& { return c.model.ffn; }));
        k.push_back(size_key("model.vl_layers", [](RunConfig& c) -> auto& { return c.model.vl_layers; }));
        k.push_back(size_key("model.patch", [](RunConfig& c) -> auto& { return c.model.patch; }));
        k.push_back(size_key("model.max_text_length", [](RunConfig& c) -> auto& { return c.model.max_text_length; }));
        k.push_back(size_key("model.itc_dim", [](RunConfig& c) -> auto& { return c.model.itc_dim; }));
        k.push_back(double_key("model.ln_eps", [](RunConfig& c) -> auto& { return c.model.ln_eps; }));
        k.push_back({"model.attention",
                     [](RunConfig& c, std::string_view v) { c.model.attention = model::parse_attention_mode(v); },
                     [](const RunConfig& c) { return std::string(model::to_string(c.model.attention)); }});
        k.push_back({"model.experts",
                     [](RunConfig& c, std::string_view v) { c.model.experts = model::parse_expert_mode(v); },
                     [](const RunConfig& c) { return std::string(model::to_string(c.model.experts)); }});
        k.push_back({"seed", [](RunConfig& c, std::string_view v) { c.seed = to_size(v); },
                     [](const RunConfig& c) { return std::to_string(c.seed); }});
        k.push_back({"data", [](RunConfig& c, std::string_view v) { c.data = std::string(v); },
                     [](const RunConfig& c) { return c.data; }});
        k.push_back(size_key("pretrain.batch_size", [](RunConfig& c) -> auto& { return c.batch_size; }));
        k.push_back(double_key("pretrain.lr", [](RunConfig& c) -> auto& { return c.lr; }));
        k.push_back(size_key("pretrain.vision_steps", [](RunConfig& c) -> auto& { return c.vision_steps; }));
        k.push_back(size_key("pretrain.text_steps", [](RunConfig& c) -> auto& { return c.text_steps; }));
        k.push_back(size_key("pretrain.vl_steps", [](RunConfig& c) -> auto& { return c.vl_steps; }));
        k.push_back(size_key("pretrain.checkpoint_every", [](RunConfig& c) -> auto& { return c.checkpoint_every; }));
        k.push_back(size_key("pretrain.workers", [](RunConfig& c) -> auto& { return c.workers; }));
        k.push_back({"pretrain.hardneg",
                     [](RunConfig& c, std::string_view v) {
                         if (v == "local") c.objectives.mining = objectives::MiningMode::local;
                         else if (v == "global") c.objectives.mining = objectives::MiningMode::global;
                         else throw ConfigError("expected local or global, got '" + std::string(v) + "'");
                     },
                     [](const RunConfig& c) {
                         return std::string(c.objectives.mining == objectives::MiningMode::local ? "local" : "global");
                     }});
        k.push_back(bool_key("pretrain.hardest_negatives",
                             [](RunConfig& c) -> auto& { return c.objectives.hardest_negatives; }));
        k.push_back(double_key("pretrain.mlm_probability", [](RunConfig& c) -> auto& { return c.mlm_probability; }));
        k.push_back(bool_key("pretrain.bert_corruption", [](RunConfig& c) -> auto& { return c.bert_corruption; }));
        k.push_back(double_key("pretrain.mim_ratio", [](RunConfig& c) -> auto& { return c.mim_ratio; }));
        k.push_back(bool_key("loss.itc", [](RunConfig& c) -> auto& { return c.objectives.use_itc; }));
        k.push_back(bool_key("loss.itm", [](RunConfig& c) -> auto& { return c.objectives.use_itm; }));
        k.push_back(bool_key("loss.mlm", [](RunConfig& c) -> auto& { return c.objectives.use_mlm; }));
        k.push_back(size_key("finetune.steps", [](RunConfig& c) -> auto& { return c.finetune_steps; }));
        k.push_back(size_key("finetune.batch_size", [](RunConfig& c) -> auto& { return c.finetune_batch_size; }));
        k.push_back(double_key("finetune.lr", [](RunConfig& c) -> auto& { return c.finetune_lr; }));
        k.push_back(size_key("task.examples", [](RunConfig& c) -> auto& { return c.task_examples; }));
        k.push_back(size_key("task.head_in_dim", [](RunConfig& c) -> auto& { return c.head_in_dim; }));
        k.push_back(size_key("task.head_classes", [](RunConfig& c) -> auto& { return c.head_classes; }));
        return k;
    }();
    return table;
}

const Key& find_key(std::string_view name) {
    for (const auto& k : keys()) {
        if (k.name == name) return k;
    }
    throw ConfigError("unknown config key '" + std::string(name) + "'");
}

void validate(const RunConfig& c) {
    c.model.validate();
    if (c.batch_size == 0 || c.finetune_batch_size == 0) throw ConfigError("batch sizes must be positive");
    if (c.workers == 0 || c.batch_size % c.workers != 0) {
        throw ConfigError("pretrain.workers (" + std::to_string(c.workers) + ") must divide pretrain.batch_size (" +
                          std::to_string(c.batch_size) + ")");
    }
    if (!(c.lr > 0) || !(c.finetune_lr > 0)) throw ConfigError("learning rates must be positive");
    if (!(c.mlm_probability > 0 && c.mlm_probability < 1)) throw ConfigError("pretrain.mlm_probability must be in (0, 1)");
    if (!(c.mim_ratio > 0 && c.mim_ratio < 1)) throw ConfigError("pretrain.mim_ratio must be in (0, 1)");
    if (!c.objectives.use_itc && !c.objectives.use_itm && !c.objectives.use_mlm) {
        throw ConfigError("at least one of loss.itc, loss.itm, loss.mlm must be enabled");
    }
}

}  // namespace

void apply_setting(RunConfig& config, std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos) throw ConfigError("expected key=value, got '" + std::string(assignment) + "'");
    const auto key = trim(assignment.substr(0, eq));
    const auto value = trim(assignment.substr(eq + 1));
    try {
        find_key(key).set(config, value);
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        if (msg.rfind("unknown config key", 0) == 0) throw;
        throw ConfigError(std::string(key) + ": " + msg);
    }
}

RunConfig parse_run_config(std::string_view text) {
    RunConfig config;
    std::set<std::string, std::less<>> seen;
    std::size_t line_no = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        auto line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        try {
            const auto eq = line.find('=');
            const auto key = std::string(trim(line.substr(0, eq == std::string_view::npos ? line.size() : eq)));
            if (eq != std::string_view::npos && !seen.insert(key).second) {
                throw ConfigError("key '" + key + "' set twice");
            }
            apply_setting(config, line);
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    validate(config);
    return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = util::read_file(path);
    } catch (const std::exception& e) {
        throw ConfigError("cannot read config " + path.string() + ": " + e.what());
    }
    try {
        return parse_run_config(text);
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

std::string resolved_text(const RunConfig& config) {
    validate(config);
    std::string out;
    for (const auto& k : keys()) out += k.name + "=" + k.get(config) + "\n";
    return out;
}

std::uint64_t config_hash(const RunConfig& config) { return util::fnv1a(resolved_text(config)); }

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& k : keys()) out.push_back(k.name);
    return out;
}

}  // namespace vlmo::cli
