// vlmo: data generation, stagewise pretraining, fine-tuning, evaluation and
// gradient checks from the command line.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vlmo/cli/checkpoint.hpp"
#include "vlmo/cli/gradcheck.hpp"
#include "vlmo/cli/run_config.hpp"
#include "vlmo/data/corpus.hpp"
#include "vlmo/errors.hpp"
#include "vlmo/tasks/tasks.hpp"
#include "vlmo/training/training.hpp"
#include "vlmo/util/alloc.hpp"
#include "vlmo/util/files.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace vlmo;

namespace {

using clk = std::chrono::steady_clock;

double seconds_since(clk::time_point t0) { return std::chrono::duration<double>(clk::now() - t0).count(); }

// Flag wins over VLMO_SEED, which wins over the config file.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t fallback) {
    if (flag) return *flag;
    if (const char* env = std::getenv("VLMO_SEED"); env && *env) {
        char* end = nullptr;
        const auto v = std::strtoull(env, &end, 10);
        if (*end != '\0' || env[0] == '-') throw UsageError("VLMO_SEED must be a non-negative integer");
        return v;
    }
    return fallback;
}

// Append-only JSON lines; every record carries cmd and event.
class Metrics {
  public:
    Metrics(const std::string& path, std::string cmd, std::uint64_t config_hash)
        : cmd_(std::move(cmd)), hash_(util::hex64(config_hash)) {
        if (path.empty()) return;
        out_.open(path, std::ios::app);
        if (!out_) throw DataError("cannot open metrics file " + path);
    }
    void write(const std::string& event, json fields) {
        if (!out_.is_open()) return;
        json rec{{"cmd", cmd_}, {"event", event}, {"config_hash", hash_}};
        for (auto& [k, v] : fields.items()) rec[k] = v;
        out_ << rec.dump() << '\n';
        out_.flush();
    }

  private:
    std::ofstream out_;
    std::string cmd_;
    std::string hash_;
};

struct Common {
    std::string config_path;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::string metrics;
};

cli::RunConfig build_config(const Common& c) {
    cli::RunConfig rc = c.config_path.empty() ? cli::RunConfig{} : cli::load_run_config(c.config_path);
    for (const auto& s : c.sets) cli::apply_setting(rc, s);
    rc.seed = resolve_seed(c.seed, rc.seed);
    cli::resolved_text(rc);  // validates
    return rc;
}

void require_same_model(const model::ModelConfig& config, const model::ModelConfig& ckpt, const std::string& what) {
    if (cli::config_to_json(config) != cli::config_to_json(ckpt)) {
        throw ConfigError("model section of the config differs from " + what + ": config " +
                          cli::config_to_json(config).dump() + " vs checkpoint " + cli::config_to_json(ckpt).dump());
    }
}

data::Corpus load_corpus(const std::string& dir) {
    if (dir.empty()) throw UsageError("no corpus given: pass --data or set data= in the config");
    return data::read_corpus(dir);
}

// gen-data ---------------------------------------------------------------

struct GenData {
    std::string out;
    long long pairs = 512;
    std::optional<std::uint64_t> seed;
};

int run_gen_data(const GenData& o) {
    if (o.pairs < 0) throw UsageError("--pairs must be non-negative, got " + std::to_string(o.pairs));
    const auto seed = resolve_seed(o.seed, 0);
    data::write_corpus(data::generate_corpus(std::size_t(o.pairs), seed), o.out);
    std::cout << json{{"cmd", "gen-data"}, {"out", o.out}, {"pairs", o.pairs}, {"seed", seed}}.dump() << '\n';
    return 0;
}

// pretrain ---------------------------------------------------------------

struct Pretrain {
    Common common;
    std::string stage, data, out, init, hardneg;
    std::optional<std::size_t> workers, steps;
};

int run_pretrain(const Pretrain& o) {
    const auto stage = [&] {
        try {
            return training::parse_stage(o.stage);
        } catch (const ConfigError& e) {
            throw UsageError(e.what());
        }
    }();
    auto rc = build_config(o.common);
    if (!o.hardneg.empty()) cli::apply_setting(rc, "pretrain.hardneg=" + o.hardneg);
    if (o.workers) cli::apply_setting(rc, "pretrain.workers=" + std::to_string(*o.workers));
    cli::resolved_text(rc);
    const auto hash = cli::config_hash(rc);

    cli::Checkpoint init;
    if (o.init.empty()) {
        if (stage == training::Stage::text) {
            throw UsageError("text pretraining needs --init with a vision-stage checkpoint");
        }
        init = training::fresh_checkpoint(rc.model, rc.seed);
    } else {
        init = cli::load_checkpoint(o.init);
        require_same_model(rc.model, init.config, o.init);
    }
    const std::string warning = training::check_stage_order(init.stage, stage);

    const auto corpus = load_corpus(o.data.empty() ? rc.data : o.data);
    const auto examples = data::make_examples(corpus, rc.model.patch, rc.model.max_text_length);

    std::size_t steps = stage == training::Stage::vision ? rc.vision_steps
                        : stage == training::Stage::text ? rc.text_steps
                                                         : rc.vl_steps;
    if (o.steps) steps = *o.steps;
    if (steps == 0 && !o.steps) steps = training::default_steps(stage);
    auto plan = training::make_plan(stage, rc.model, steps, rc.batch_size, rc.lr);

    Metrics metrics(o.common.metrics.empty() ? o.out + ".metrics.jsonl" : o.common.metrics, "pretrain", hash);
    metrics.write("start", {{"stage", training::to_string(stage)},
                            {"steps", plan.steps},
                            {"seed", rc.seed},
                            {"init", o.init.empty() ? "fresh" : o.init},
                            {"config", cli::resolved_text(rc)}});
    std::cerr << "config hash " << util::hex64(hash) << "\n";

    training::TrainOptions to;
    to.objectives = rc.objectives;
    to.masking = {rc.mlm_probability, rc.bert_corruption};
    to.workers = rc.workers;
    to.mim_ratio = rc.mim_ratio;
    to.checkpoint_every = rc.checkpoint_every;
    to.on_warning = [&](const std::string& w) {
        std::cerr << "warning: " << w << "\n";
        metrics.write("warning", {{"message", w}});
    };
    if (!warning.empty()) to.on_warning(warning);
    const auto t0 = clk::now();
    to.on_step = [&](const training::StepRecord& r) {
        metrics.write("step", {{"stage", training::to_string(r.stage)},
                               {"step", r.step + 1},
                               {"lr", r.lr},
                               {"loss", r.loss},
                               {"mim", r.mim},
                               {"mlm", r.mlm},
                               {"itc", r.itc},
                               {"itm", r.itm},
                               {"sigma", r.sigma},
                               {"hard_negative_similarity", r.hard_negative_similarity},
                               {"mlm_skipped", r.mlm_skipped},
                               {"elapsed_s", seconds_since(t0)}});
    };
    to.on_checkpoint = [&](const cli::Checkpoint& ck) {
        const std::string path = o.out + ".step" + std::to_string(ck.step);
        auto copy = cli::clone(ck);
        copy.extra["config_hash"] = util::hex64(hash);
        cli::save_checkpoint(copy, path);
        metrics.write("checkpoint", {{"path", path}, {"step", ck.step}});
    };

    auto result = training::train_stage(plan, examples, init, rc.seed, to);
    result.extra["config_hash"] = util::hex64(hash);
    cli::save_checkpoint(result, o.out);
    metrics.write("end", {{"out", o.out}, {"steps", plan.steps}, {"elapsed_s", seconds_since(t0)}});
    std::cout << json{{"cmd", "pretrain"}, {"stage", training::to_string(stage)}, {"out", o.out},
                      {"steps", plan.steps}, {"config_hash", util::hex64(hash)}}
                     .dump()
              << '\n';
    return 0;
}

// finetune ---------------------------------------------------------------

struct Finetune {
    Common common;
    std::string task, ckpt, data, out;
};

void check_head(const cli::RunConfig& rc, std::size_t in_dim, std::size_t classes, const std::string& task) {
    if ((rc.head_in_dim != 0 && rc.head_in_dim != in_dim) || (rc.head_classes != 0 && rc.head_classes != classes)) {
        throw ConfigError(task + " needs a " + std::to_string(in_dim) + "x" + std::to_string(classes) +
                          " head, config asks for " + std::to_string(rc.head_in_dim) + "x" +
                          std::to_string(rc.head_classes));
    }
}

int run_finetune(const Finetune& o) {
    auto ckpt = cli::load_checkpoint(o.ckpt);
    Common common = o.common;
    auto rc = build_config(common);
    if (common.config_path.empty()) {
        rc.model = ckpt.config;
    } else {
        require_same_model(rc.model, ckpt.config, o.ckpt);
    }
    const auto hash = cli::config_hash(rc);
    const auto corpus = load_corpus(o.data.empty() ? rc.data : o.data);
    const auto d = ckpt.config.hidden;

    Metrics metrics(o.common.metrics.empty() ? o.out + ".metrics.jsonl" : o.common.metrics, "finetune", hash);
    const auto t0 = clk::now();
    auto on_step = [&](std::size_t step, double loss, double lr) {
        metrics.write("step", {{"task", o.task}, {"step", step + 1}, {"lr", lr}, {"loss", loss},
                               {"elapsed_s", seconds_since(t0)}});
    };

    cli::Checkpoint result;
    if (o.task == "retrieval") {
        const auto examples = data::make_examples(corpus, ckpt.config.patch, ckpt.config.max_text_length);
        tasks::RetrievalOptions ro;
        if (rc.finetune_steps) ro.steps = rc.finetune_steps;
        ro.batch_size = rc.finetune_batch_size;
        ro.peak_lr = rc.finetune_lr;
        ro.workers = rc.workers;
        ro.on_step = on_step;
        metrics.write("start", {{"task", o.task}, {"steps", ro.steps}, {"seed", rc.seed}, {"ckpt", o.ckpt}});
        result = tasks::finetune_retrieval(ckpt, examples, rc.seed, ro);
    } else if (o.task == "classify" || o.task == "nlvr2") {
        tasks::ClassifierOptions co;
        if (rc.finetune_steps) co.steps = rc.finetune_steps;
        co.batch_size = rc.finetune_batch_size;
        co.peak_lr = rc.finetune_lr;
        co.on_step = on_step;
        metrics.write("start", {{"task", o.task}, {"steps", co.steps}, {"seed", rc.seed}, {"ckpt", o.ckpt}});
        if (o.task == "classify") {
            check_head(rc, d, tasks::kQaClasses, o.task);
            const auto train = tasks::qa_from_corpus(corpus, rc.seed, ckpt.config.patch, ckpt.config.max_text_length);
            result = tasks::finetune_qa(ckpt, train, rc.seed, co).checkpoint;
        } else {
            check_head(rc, 2 * d, 2, o.task);
            const auto train = tasks::two_image_from_corpus(corpus, rc.task_examples, rc.seed, ckpt.config.patch,
                                                            ckpt.config.max_text_length);
            result = tasks::finetune_two_image(ckpt, train, rc.seed, co).checkpoint;
        }
    } else {
        throw UsageError("unknown task '" + o.task + "' (retrieval, classify, nlvr2)");
    }
    result.extra["config_hash"] = util::hex64(hash);
    cli::save_checkpoint(result, o.out);
    metrics.write("end", {{"task", o.task}, {"out", o.out}, {"elapsed_s", seconds_since(t0)}});
    std::cout << json{{"cmd", "finetune"}, {"task", o.task}, {"out", o.out}, {"config_hash", util::hex64(hash)}}.dump()
              << '\n';
    return 0;
}

// eval -------------------------------------------------------------------

struct Eval {
    std::string task = "retrieval", ckpt, data, mode = "dual", metrics;
    std::optional<std::uint64_t> seed;
    std::size_t examples = 1024;
};

json recall_json(const tasks::RecallReport& r) {
    return {{"i2t_r1", r.i2t[0]}, {"i2t_r5", r.i2t[1]}, {"i2t_r10", r.i2t[2]},
            {"t2i_r1", r.t2i[0]}, {"t2i_r5", r.t2i[1]}, {"t2i_r10", r.t2i[2]}};
}

int run_eval(const Eval& o) {
    const auto ckpt = cli::load_checkpoint(o.ckpt);
    const auto seed = resolve_seed(o.seed, ckpt.seed);
    const auto corpus = load_corpus(o.data);
    model::Model<float> m(ckpt.config, ckpt.params.cast<float>());
    json report{{"cmd", "eval"}, {"task", o.task}, {"ckpt", o.ckpt}, {"stage", ckpt.stage}, {"pairs", corpus.size()}};

    if (o.task == "retrieval" || o.task == "itm") {
        const auto examples = data::make_examples(corpus, ckpt.config.patch, ckpt.config.max_text_length);
        if (o.task == "itm") {
            const auto r = tasks::itm_accuracy(m, examples);
            report["accuracy"] = r.accuracy;
            report["positive_accuracy"] = r.positive_accuracy;
            report["negative_accuracy"] = r.negative_accuracy;
        } else {
            m.reset_forward_count();
            const auto t0 = clk::now();
            tasks::Rankings rankings;
            if (o.mode == "dual") {
                rankings = tasks::score_and_rank(tasks::build_index(m, examples, examples));
            } else if (o.mode == "fusion-demo") {
                rankings = tasks::rank_scores(tasks::fusion_scores(m, examples, examples), examples.size(),
                                              examples.size());
            } else {
                throw UsageError("unknown eval mode '" + o.mode + "' (dual, fusion-demo)");
            }
            const double wall = seconds_since(t0);
            report["mode"] = o.mode;
            report["score"] = o.mode == "dual" ? "itc_dot" : "itm_match_probability";
            report["forwards"] = m.forward_count();
            report["wall_s"] = wall;
            report["recall"] = recall_json(tasks::diagonal_recall(rankings));
        }
    } else if (o.task == "classify") {
        const auto test = tasks::qa_from_corpus(corpus, seed, ckpt.config.patch, ckpt.config.max_text_length);
        report["accuracy"] = tasks::qa_accuracy(m, tasks::head_from(ckpt, "classify"), test);
    } else if (o.task == "nlvr2") {
        const auto test =
            tasks::two_image_from_corpus(corpus, o.examples, seed, ckpt.config.patch, ckpt.config.max_text_length);
        report["accuracy"] = tasks::two_image_accuracy(m, tasks::head_from(ckpt, "nlvr2"), test);
    } else {
        throw UsageError("unknown task '" + o.task + "' (retrieval, itm, classify, nlvr2)");
    }
    if (!o.metrics.empty()) {
        Metrics metrics(o.metrics, "eval", 0);
        metrics.write("report", report);
    }
    std::cout << report.dump() << '\n';
    return 0;
}

// gradcheck --------------------------------------------------------------

struct Gradcheck {
    std::string scope = "op", config, corrupt;
    std::optional<std::uint64_t> seed;
};

void print_result(const cli::GradcheckResult& r, double tol) {
    std::string ops;
    for (const auto& op : r.ops) ops += (ops.empty() ? "" : ",") + op;
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " worst_rel=" << r.worst_rel << " at " << r.worst_at
              << " checked=" << r.checked << " tol=" << tol << " ops=" << ops << '\n';
}

int run_gradcheck(const Gradcheck& o) {
    cli::GradcheckOptions go;
    go.seed = resolve_seed(o.seed, 0);
    model::ModelConfig mc;  // tiny default: L=4, D=64
    if (!o.config.empty()) mc = cli::load_run_config(o.config).model;

    if (!o.corrupt.empty()) {
        std::set<std::string> known;
        for (const auto& r : cli::gradcheck_ops(go)) known.insert(r.ops.begin(), r.ops.end());
        if (!known.count(o.corrupt)) throw UsageError("--corrupt names no differentiable op: '" + o.corrupt + "'");
        testing::set_backward_corruption(o.corrupt);
        std::cout << "corrupting backward of " << o.corrupt << '\n';
    }
    bool ok = true;
    const auto t0 = clk::now();
    const auto ops = cli::gradcheck_ops(go);
    if (o.scope == "op") {
        for (const auto& r : ops) {
            print_result(r, go.tolerance);
            ok = ok && r.passed;
        }
        std::cout << "registered ops: " << ops.size() << " cases\n";
    } else if (o.scope == "model") {
        const auto model = cli::gradcheck_model(mc, go);
        for (const auto& r : model) {
            print_result(r, go.tolerance);
            ok = ok && r.passed;
        }
        const auto missing = cli::uncovered_ops(ops, model);
        for (const auto& op : missing) std::cout << "FAIL op " << op << " used by the model has no op case\n";
        ok = ok && missing.empty();
    } else {
        throw UsageError("unknown scope '" + o.scope + "' (op, model)");
    }
    testing::set_backward_corruption("");
    std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << " in " << seconds_since(t0) << " s\n";
    if (!ok) throw CheckFailure("gradient check failed");
    return 0;
}

std::string one_line(std::string s) {
    for (auto& c : s) {
        if (c == '\n' || c == '\r') c = ' ';
    }
    return s;
}

int fail(int code, const char* kind, const std::string& message) {
    std::cerr << "error[" << kind << "] exit=" << code << " " << one_line(message) << '\n';
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    util::tune_allocator();
    CLI::App app{"Mixture-of-modality-experts vision-language toy trainer"};
    app.require_subcommand(1);

    auto add_common = [](CLI::App* sub, Common& c) {
        sub->add_option("--config", c.config_path, "Run config (key = value lines)");
        sub->add_option("--set", c.sets, "Override one config key: key=value")->take_all();
        sub->add_option("--seed", c.seed, "Seed (overrides VLMO_SEED and the config)");
        sub->add_option("--metrics", c.metrics, "Metrics JSON-lines file (default: OUT.metrics.jsonl)");
    };

    GenData gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic image-caption corpus");
    gen_cmd->add_option("--out", gen.out, "Output directory")->required();
    gen_cmd->add_option("--pairs", gen.pairs, "Number of image-caption pairs");
    gen_cmd->add_option("--seed", gen.seed, "Seed (overrides VLMO_SEED)");

    Pretrain pre;
    auto* pre_cmd = app.add_subcommand("pretrain", "Run one pretraining stage");
    pre_cmd->add_option("--stage", pre.stage, "vision | text | vl")->required();
    pre_cmd->add_option("--data", pre.data, "Corpus directory");
    pre_cmd->add_option("--out", pre.out, "Output checkpoint")->required();
    pre_cmd->add_option("--init", pre.init, "Checkpoint of the previous stage");
    pre_cmd->add_option("--hardneg", pre.hardneg, "local | global")->check(CLI::IsMember({"local", "global"}));
    pre_cmd->add_option("--workers", pre.workers, "Simulated workers");
    pre_cmd->add_option("--steps", pre.steps, "Override the stage's step count");
    add_common(pre_cmd, pre.common);

    Finetune ft;
    auto* ft_cmd = app.add_subcommand("finetune", "Fine-tune a pretrained checkpoint");
    ft_cmd->add_option("--task", ft.task, "retrieval | classify | nlvr2")->required();
    ft_cmd->add_option("--ckpt", ft.ckpt, "Pretrained checkpoint")->required();
    ft_cmd->add_option("--data", ft.data, "Corpus directory");
    ft_cmd->add_option("--out", ft.out, "Output checkpoint")->required();
    add_common(ft_cmd, ft.common);

    Eval ev;
    auto* ev_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus");
    ev_cmd->add_option("--task", ev.task, "retrieval | itm | classify | nlvr2");
    ev_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
    ev_cmd->add_option("--data", ev.data, "Corpus directory")->required();
    ev_cmd->add_option("--mode", ev.mode, "dual | fusion-demo (retrieval only)");
    ev_cmd->add_option("--examples", ev.examples, "Two-image examples drawn for nlvr2");
    ev_cmd->add_option("--seed", ev.seed, "Seed for task construction");
    ev_cmd->add_option("--metrics", ev.metrics, "Append the report to this JSON-lines file");

    Gradcheck gc;
    auto* gc_cmd = app.add_subcommand("gradcheck", "64-bit finite-difference gradient checks");
    gc_cmd->add_option("--scope", gc.scope, "op | model");
    gc_cmd->add_option("--seed", gc.seed, "Seed");
    gc_cmd->add_option("--config", gc.config, "Run config whose model section is checked (model scope)");
    gc_cmd->add_option("--corrupt", gc.corrupt, "Test hook: scale the backward of this op");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail(2, "usage", e.what());
    }

    try {
        if (*gen_cmd) return run_gen_data(gen);
        if (*pre_cmd) return run_pretrain(pre);
        if (*ft_cmd) return run_finetune(ft);
        if (*ev_cmd) return run_eval(ev);
        if (*gc_cmd) return run_gradcheck(gc);
    } catch (const UsageError& e) {
        return fail(2, "usage", e.what());
    } catch (const ConfigError& e) {
        return fail(3, "config", e.what());
    } catch (const DataError& e) {
        return fail(4, "data", e.what());
    } catch (const fs::filesystem_error& e) {
        return fail(4, "data", e.what());
    } catch (const CheckFailure& e) {
        return fail(5, "check", e.what());
    } catch (const NumericError& e) {
        return fail(5, "check", e.what());
    } catch (const ContractError& e) {
        return fail(2, "usage", e.what());
    } catch (const DimensionError& e) {
        return fail(3, "config", e.what());
    } catch (const std::exception& e) {
        return fail(1, "internal", e.what());
    }
    return 2;
}
