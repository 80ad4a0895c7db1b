#include "rebalance/cli.hpp"

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>
#include <utility>

#include "CLI11.hpp"
#include "bytes.hpp"
#include "json.hpp"
#include "rebalance/dataset.hpp"
#include "rebalance/errors.hpp"
#include "rebalance/evalreport.hpp"
#include "rebalance/mathcore.hpp"
#include "rebalance/samplers.hpp"
#include "rebalance/selfselect.hpp"
#include "rebalance/synthlab.hpp"
#include "rebalance/trainer.hpp"

namespace rebalance::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using Echo = std::vector<std::pair<std::string, std::string>>;

// ---------------------------------------------------------------- helpers

std::vector<double> parse_double_list(const std::string& flag, const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t pos = 0;
            const double v = std::stod(item, &pos);
            if (pos != item.size()) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw CLI::ValidationError(flag, "'" + item + "' is not a number");
        }
    }
    if (out.empty()) throw CLI::ValidationError(flag, "list is empty");
    return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& flag, const std::string& text) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t pos = 0;
            const std::uint64_t v = std::stoull(item, &pos);
            if (pos != item.size()) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw CLI::ValidationError(flag, "'" + item + "' is not a seed");
        }
    }
    if (out.empty()) throw CLI::ValidationError(flag, "list is empty");
    return out;
}

std::string join_seeds(const std::vector<std::uint64_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i > 0) out += ',';
        out += std::to_string(v[i]);
    }
    return out;
}

std::string join6(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i > 0) out += ',';
        out += format6(v[i]);
    }
    return out;
}

void add_kv(Echo& echo, const std::string& k, const std::string& v) { echo.emplace_back(k, v); }
void add_kv(Echo& echo, const std::string& k, double v) { echo.emplace_back(k, format6(v)); }
void add_kv(Echo& echo, const std::string& k, std::size_t v) {
    echo.emplace_back(k, std::to_string(v));
}

fs::path prepare_out(const std::string& out) {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create output directory " + out);
    return fs::path(out);
}

void note_written(const fs::path& p) { std::cout << "wrote: " << p.string() << "\n"; }

void write_manifest(const fs::path& dir, Echo echo) {
    std::sort(echo.begin(), echo.end());
    std::string body;
    for (const auto& [k, v] : echo) {
        body += k;
        body += '=';
        body += v;
        body += '\n';
    }
    bytes::write_file((dir / "manifest.txt").string(), body);
    note_written(dir / "manifest.txt");
}

std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

std::string seed_suffix(const std::vector<std::uint64_t>& seeds, std::uint64_t s) {
    return seeds.size() > 1 ? "_" + std::to_string(s) : "";
}

// Runs body once per seed (parallel when jobs > 1), results in seed order.
std::vector<GroupMetrics> run_over_seeds(const std::vector<std::uint64_t>& seeds,
                                         std::size_t jobs,
                                         const std::function<GroupMetrics(std::size_t,
                                                                          std::uint64_t)>& body) {
    std::vector<GroupMetrics> results(seeds.size());
    const std::size_t workers = std::min(std::max<std::size_t>(jobs, 1), seeds.size());
    if (workers <= 1) {
        for (std::size_t i = 0; i < seeds.size(); ++i) results[i] = body(i, seeds[i]);
        return results;
    }
    std::vector<std::exception_ptr> errors(seeds.size());
    std::atomic<std::size_t> cursor{0};
    auto work = [&] {
        while (true) {
            const std::size_t i = cursor.fetch_add(1);
            if (i >= seeds.size()) return;
            try {
                results[i] = body(i, seeds[i]);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(work);
    for (auto& t : threads) t.join();
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return results;
}

void emit_experiment(ExperimentReport& report, const std::optional<fs::path>& dir,
                     const std::string& basename) {
    std::sort(report.config.begin(), report.config.end());
    finalize_report(report);
    if (dir) {
        const fs::path jpath = *dir / (basename + ".json");
        const fs::path cpath = *dir / (basename + ".csv");
        emit_report(report, jpath.string(), ReportFormat::Json);
        emit_report(report, cpath.string(), ReportFormat::Csv);
        note_written(jpath);
        note_written(cpath);
    } else {
        std::cout << render_report(report, ReportFormat::Json);
    }
}

bool mode_reads_groups(BalanceMode mode) {
    return mode == BalanceMode::GroupSampling || mode == BalanceMode::SpuriousSampling ||
           mode == BalanceMode::GroupSubset;
}

// Range validators beyond the stock ones; they run on the raw flag text.
CLI::Validator open_unit_validator() {
    return CLI::Validator(
        [](std::string& s) -> std::string {
            try {
                std::size_t pos = 0;
                const double v = std::stod(s, &pos);
                if (pos != s.size() || !(v > 0.0 && v < 1.0)) return "must be in (0, 1)";
            } catch (const std::exception&) {
                return "must be a number in (0, 1)";
            }
            return {};
        },
        "FLOAT in (0,1)");
}

CLI::Validator minority_rate_validator() {
    return CLI::Validator(
        [](std::string& s) -> std::string {
            try {
                std::size_t pos = 0;
                const double v = std::stod(s, &pos);
                if (pos != s.size() || !(v > 0.0 && v <= 0.5)) return "must be in (0, 0.5]";
            } catch (const std::exception&) {
                return "must be a number in (0, 0.5]";
            }
            return {};
        },
        "FLOAT in (0,0.5]");
}

std::string trim_ws(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

// CLI11 only processes config files attached to the root command, so each
// subcommand reads its own flat key=value file. Values fill options absent
// from the command line; unknown keys and bad values are usage errors.
struct ConfigOpts {
    std::string path;
    CLI::App* sub = nullptr;

    void attach(CLI::App* s) {
        sub = s;
        s->add_option("--config", path, "flat key=value config file; flags take precedence");
    }

    void apply() const {
        if (path.empty()) return;
        std::ifstream in(path);
        if (!in) throw CLI::FileError::Missing(path);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string text = trim_ws(line);
            if (text.empty() || text[0] == '#') continue;
            const auto eq = text.find('=');
            if (eq == std::string::npos) {
                throw CLI::ValidationError(
                    "--config", "line " + std::to_string(lineno) + " is not key=value");
            }
            const std::string key = trim_ws(text.substr(0, eq));
            const std::string value = trim_ws(text.substr(eq + 1));
            CLI::Option* opt =
                key.empty() || key == "config" ? nullptr : sub->get_option_no_throw("--" + key);
            if (opt == nullptr) {
                throw CLI::ValidationError("--config", "unknown key '" + key + "'");
            }
            if (opt->count() > 0) continue;  // flags (and env values) win
            bool overridden = false;
            for (const CLI::Option* other : opt->get_excludes()) {
                if (other->count() > 0) overridden = true;
            }
            if (overridden) continue;
            opt->add_result(value);
            opt->run_callback();
        }
    }
};

// Shared optimizer flags.
struct OptimOpts {
    double lr = 1e-3;
    std::size_t steps = 250;
    std::size_t epochs = 0;
    std::size_t batch_size = 32;
    double weight_decay = 1e-4;
    std::string optimizer = "sgd";
    std::string schedule = "constant";
    CLI::Option* epochs_opt = nullptr;

    void attach(CLI::App* sub) {
        sub->add_option("--lr", lr, "learning rate")
            ->check(CLI::PositiveNumber)
            ->capture_default_str();
        auto* steps_opt = sub->add_option("--steps", steps, "optimizer steps")
                              ->check(CLI::NonNegativeNumber)
                              ->capture_default_str();
        epochs_opt =
            sub->add_option("--epochs", epochs, "epochs; converted to ceil(n/batch)*epochs steps")
                ->check(CLI::PositiveNumber);
        epochs_opt->excludes(steps_opt);
        sub->add_option("--batch-size", batch_size, "minibatch size")
            ->check(CLI::PositiveNumber)
            ->capture_default_str();
        sub->add_option("--weight-decay", weight_decay, "L2 strength (decoupled for adaptive)")
            ->check(CLI::NonNegativeNumber)
            ->capture_default_str();
        sub->add_option("--optimizer", optimizer, "optimizer")
            ->check(CLI::IsMember({"sgd", "adaptive-decoupled"}))
            ->capture_default_str();
        sub->add_option("--schedule", schedule, "learning-rate schedule")
            ->check(CLI::IsMember({"constant", "cosine", "linear"}))
            ->capture_default_str();
    }

    OptimConfig config(std::size_t n) const {
        OptimConfig cfg;
        cfg.lr0 = lr;
        cfg.optimizer = optimizer_from_string(optimizer);
        cfg.schedule = schedule_from_string(schedule);
        cfg.weight_decay = weight_decay;
        cfg.batch_size = batch_size;
        cfg.total_steps =
            (epochs_opt != nullptr && epochs_opt->count() > 0) ? epochs_to_steps(epochs, n, batch_size)
                                                               : steps;
        return cfg;
    }

    void echo(Echo& e, const OptimConfig& resolved) const {
        add_kv(e, "lr", resolved.lr0);
        add_kv(e, "steps", resolved.total_steps);
        add_kv(e, "batch_size", resolved.batch_size);
        add_kv(e, "weight_decay", resolved.weight_decay);
        add_kv(e, "optimizer", std::string(to_string(resolved.optimizer)));
        add_kv(e, "schedule", std::string(to_string(resolved.schedule)));
    }
};

// --seed plus optional --seeds/--jobs fan-out.
struct SeedOpts {
    std::uint64_t seed = 0;
    std::string seeds_csv;
    std::size_t jobs = 1;
    CLI::Option* seeds_opt = nullptr;

    void attach(CLI::App* sub, bool with_fanout) {
        sub->add_option("--seed", seed, "rng seed")
            ->envname("REBALANCE_SEED")
            ->capture_default_str();
        if (with_fanout) {
            seeds_opt = sub->add_option("--seeds", seeds_csv,
                                        "comma-separated seeds; one run per seed, merged report");
            sub->add_option("--jobs", jobs, "parallel workers for --seeds")
                ->check(CLI::PositiveNumber)
                ->capture_default_str();
        }
    }

    std::vector<std::uint64_t> list() const {
        if (seeds_opt != nullptr && seeds_opt->count() > 0) {
            return parse_seed_list("--seeds", seeds_csv);
        }
        return {seed};
    }
};

EmbeddingDataset load_eval_or(const std::string& eval_path, const EmbeddingDataset& fallback) {
    if (eval_path.empty()) return fallback;
    return load_embeddings(eval_path);
}

// ---------------------------------------------------------------- commands

struct SynthCmd {
    SyntheticSpec spec;
    std::string out;
    SeedOpts seeds;
    ConfigOpts config;

    void attach(CLI::App& app) {
        auto* sub = app.add_subcommand("synth", "generate a synthetic benchmark dataset (GEMB)");
        config.attach(sub);
        sub->add_option("--n", spec.n, "rows")->check(CLI::PositiveNumber)->capture_default_str();
        sub->add_option("--d", spec.d, "feature dimension (core + spurious + junk)")
            ->check(CLI::Range(std::size_t{3}, std::size_t{1} << 20))
            ->capture_default_str();
        sub->add_option("--minority-rate", spec.minority_rate,
                        "probability a row opposes its spurious feature")
            ->check(minority_rate_validator())
            ->capture_default_str();
        sub->add_option("--core-magnitude", spec.core_magnitude, "core feature magnitude")
            ->check(CLI::PositiveNumber)
            ->capture_default_str();
        sub->add_option("--core-noise", spec.core_noise, "noise scale for core and spurious")
            ->check(CLI::NonNegativeNumber)
            ->capture_default_str();
        sub->add_option("--spurious-magnitude", spec.spurious_magnitude,
                        "spurious feature magnitude")
            ->check(CLI::PositiveNumber)
            ->capture_default_str();
        sub->add_option("--junk-scale", spec.junk_scale, "junk coordinate standard deviation")
            ->check(CLI::NonNegativeNumber)
            ->capture_default_str();
        sub->add_option("--positive-rate", spec.positive_rate, "probability of the positive class")
            ->check(open_unit_validator())
            ->capture_default_str();
        sub->add_option("--out", out, "output directory")->required();
        seeds.attach(sub, false);
        sub->callback([this] { run(); });
    }

    void run() {
        config.apply();
        spec.seed = seeds.seed;
        const fs::path dir = prepare_out(out);
        const EmbeddingDataset ds = generate_synthetic(spec);
        save_embeddings(ds, (dir / "data.gemb").string());
        note_written(dir / "data.gemb");

        Echo echo;
        add_kv(echo, "command", std::string("synth"));
        add_kv(echo, "n", spec.n);
        add_kv(echo, "d", spec.d);
        add_kv(echo, "minority_rate", spec.minority_rate);
        add_kv(echo, "core_magnitude", spec.core_magnitude);
        add_kv(echo, "core_noise", spec.core_noise);
        add_kv(echo, "spurious_magnitude", spec.spurious_magnitude);
        add_kv(echo, "junk_scale", spec.junk_scale);
        add_kv(echo, "positive_rate", spec.positive_rate);
        add_kv(echo, "seed", std::to_string(seeds.seed));
        add_kv(echo, "out", out);
        write_manifest(dir, std::move(echo));
    }
};

struct TrainCmd {
    std::string data, eval_data, out;
    std::string balance = "unbalanced";
    std::string checkpoints_csv;
    OptimOpts optim;
    SeedOpts seeds;
    ConfigOpts config;
    CLI::Option* ckpt_opt = nullptr;

    void attach(CLI::App& app) {
        auto* sub = app.add_subcommand("train", "train a linear head on embeddings");
        config.attach(sub);
        sub->add_option("--data", data, "training dataset (GEMB or CSV)")->required();
        sub->add_option("--eval-data", eval_data, "evaluation dataset (default: --data)");
        sub->add_option("--balance", balance, "batch balancing mode")
            ->check(CLI::IsMember({"unbalanced", "class-sampling", "group-sampling",
                                   "spurious-sampling", "class-subset", "group-subset"}))
            ->capture_default_str();
        ckpt_opt = sub->add_option("--checkpoints", checkpoints_csv,
                                   "comma-separated checkpoint fractions in (0,1]");
        sub->add_option("--out", out, "output directory (reports + GHED heads)");
        optim.attach(sub);
        seeds.attach(sub, true);
        sub->callback([this] { run(); });
    }

    void run() {
        config.apply();
        std::vector<double> fractions;
        if (ckpt_opt->count() > 0) {
            fractions = parse_double_list("--checkpoints", checkpoints_csv);
            for (double f : fractions) {
                if (!(f > 0.0 && f <= 1.0)) {
                    throw CLI::ValidationError("--checkpoints", "fractions must be in (0, 1]");
                }
            }
        }
        const EmbeddingDataset ds = load_embeddings(data);
        const EmbeddingDataset eval_ds = load_eval_or(eval_data, ds);
        const BalanceMode mode = balance_mode_from_string(balance);
        const OptimConfig cfg0 = optim.config(ds.size());
        const auto seed_list = seeds.list();
        const std::optional<fs::path> dir =
            out.empty() ? std::nullopt : std::optional<fs::path>(prepare_out(out));

        auto metrics = run_over_seeds(seed_list, seeds.jobs, [&](std::size_t, std::uint64_t s) {
            OptimConfig cfg = cfg0;
            cfg.seed = s;
            const TrainReport rep = train_head(ds, mode, cfg, nullptr, fractions);
            if (dir) {
                const std::string sfx = seed_suffix(seed_list, s);
                save_head(rep.final_head, (*dir / ("head" + sfx + ".ghed")).string());
                for (const auto& [f, h] : rep.checkpoints.by_fraction) {
                    if (f != 1.0) {
                        save_head(h, (*dir / ("ckpt_" + format6(f) + sfx + ".ghed")).string());
                    }
                }
            }
            return evaluate(rep.final_head, eval_ds);
        });
        if (dir) {
            for (std::uint64_t s : seed_list) {
                note_written(*dir / ("head" + seed_suffix(seed_list, s) + ".ghed"));
            }
        }

        ExperimentReport report;
        report.method = "train";
        report.seeds = seed_list;
        report.per_seed = std::move(metrics);
        add_kv(report.config, "command", std::string("train"));
        add_kv(report.config, "data", data);
        add_kv(report.config, "eval_data", eval_data.empty() ? data : eval_data);
        add_kv(report.config, "balance", balance);
        if (!fractions.empty()) add_kv(report.config, "checkpoints", join6(fractions));
        optim.echo(report.config, cfg0);
        add_kv(report.config, "seeds", join_seeds(seed_list));
        add_kv(report.config, "jobs", seeds.jobs);
        emit_experiment(report, dir, "report");
        if (dir) write_manifest(*dir, report.config);
    }
};

struct RetrainCmd {
    std::string data, eval_data, out;
    std::string balance = "class-sampling";
    OptimOpts optim;
    SeedOpts seeds;
    ConfigOpts config;

    void attach(CLI::App& app) {
        auto* sub = app.add_subcommand(
            "retrain", "retrain a fresh head on a heldout set with a balancing mode");
        config.attach(sub);
        sub->add_option("--data", data, "heldout dataset (GEMB or CSV)")->required();
        sub->add_option("--eval-data", eval_data, "evaluation dataset (default: --data)");
        sub->add_option("--balance", balance, "batch balancing mode")
            ->check(CLI::IsMember({"unbalanced", "class-sampling", "group-sampling",
                                   "spurious-sampling", "class-subset", "group-subset"}))
            ->capture_default_str();
        sub->add_option("--out", out, "output directory");
        optim.attach(sub);
        seeds.attach(sub, true);
        sub->callback([this] { run(); });
    }

    void run() {
        config.apply();
        const EmbeddingDataset ds = load_embeddings(data);
        const EmbeddingDataset eval_ds = load_eval_or(eval_data, ds);
        const BalanceMode mode = balance_mode_from_string(balance);
        const OptimConfig cfg0 = optim.config(ds.size());
        const auto seed_list = seeds.list();
        const std::optional<fs::path> dir =
            out.empty() ? std::nullopt : std::optional<fs::path>(prepare_out(out));

        auto metrics = run_over_seeds(seed_list, seeds.jobs, [&](std::size_t, std::uint64_t s) {
            OptimConfig cfg = cfg0;
            cfg.seed = s;
            const LinearHead head = train_head(ds, mode, cfg).final_head;
            if (dir) {
                save_head(head, (*dir / ("head" + seed_suffix(seed_list, s) + ".ghed")).string());
            }
            return evaluate(head, eval_ds);
        });
        if (dir) {
            for (std::uint64_t s : seed_list) {
                note_written(*dir / ("head" + seed_suffix(seed_list, s) + ".ghed"));
            }
        }

        ExperimentReport report;
        report.method = "retrain";
        report.seeds = seed_list;
        report.per_seed = std::move(metrics);
        report.class_annotations = ds.size();  // retraining reads every heldout class label
        report.group_annotations = mode_reads_groups(mode) ? ds.size() : 0;
        add_kv(report.config, "command", std::string("retrain"));
        add_kv(report.config, "data", data);
        add_kv(report.config, "eval_data", eval_data.empty() ? data : eval_data);
        add_kv(report.config, "balance", balance);
        optim.echo(report.config, cfg0);
        add_kv(report.config, "seeds", join_seeds(seed_list));
        add_kv(report.config, "jobs", seeds.jobs);
        emit_experiment(report, dir, "report");
        if (dir) write_manifest(*dir, report.config);
    }
};

struct DfrCmd {
    std::string data, eval_data, out;
    OptimOpts optim;
    SeedOpts seeds;
    ConfigOpts config;

    void attach(CLI::App& app) {
        auto* sub = app.add_subcommand(
            "dfr", "group-balanced last-layer retraining on a group-annotated heldout set");
        config.attach(sub);
        sub->add_option("--data", data, "heldout dataset with group labels")->required();
        sub->add_option("--eval-data", eval_data, "evaluation dataset (default: --data)");
        sub->add_option("--out", out, "output directory");
        optim.attach(sub);
        seeds.attach(sub, true);
        sub->callback([this] { run(); });
    }

    void run() {
        config.apply();
        const EmbeddingDataset ds = load_embeddings(data);
        const EmbeddingDataset eval_ds = load_eval_or(eval_data, ds);
        const OptimConfig cfg0 = optim.config(ds.size());
        const auto seed_list = seeds.list();
        const std::optional<fs::path> dir =
            out.empty() ? std::nullopt : std::optional<fs::path>(prepare_out(out));

        std::vector<std::size_t> class_counts(seed_list.size(), 0);
        std::vector<std::size_t> group_counts_used(seed_list.size(), 0);
        auto metrics = run_over_seeds(seed_list, seeds.jobs, [&](std::size_t i, std::uint64_t s) {
            OptimConfig cfg = cfg0;
            cfg.seed = s;
            AnnotationLedger ledger(ds.size());
            const LinearHead head = dfr(ds, cfg, &ledger);
            class_counts[i] = ledger.class_labels_revealed();
            group_counts_used[i] = ledger.group_labels_revealed();
            if (dir) {
                save_head(head, (*dir / ("head" + seed_suffix(seed_list, s) + ".ghed")).string());
            }
            return evaluate(head, eval_ds);
        });
        if (dir) {
            for (std::uint64_t s : seed_list) {
                note_written(*dir / ("head" + seed_suffix(seed_list, s) + ".ghed"));
            }
        }

        ExperimentReport report;
        report.method = "dfr";
        report.seeds = seed_list;
        report.per_seed = std::move(metrics);
        report.class_annotations = *std::max_element(class_counts.begin(), class_counts.end());
        report.group_annotations =
            *std::max_element(group_counts_used.begin(), group_counts_used.end());
        add_kv(report.config, "command", std::string("dfr"));
        add_kv(report.config, "data", data);
        add_kv(report.config, "eval_data", eval_data.empty() ? data : eval_data);
        optim.echo(report.config, cfg0);
        add_kv(report.config, "seeds", join_seeds(seed_list));
        add_kv(report.config, "jobs", seeds.jobs);
        emit_experiment(report, dir, "report");
        if (dir) write_manifest(*dir, report.config);
    }
};

struct SelfCmd {
    std::string data, eval_data, erm_head_path, es_head_path, out;
    std::string variant = "es-disagreement";
    std::size_t n = 20;
    double es_fraction = 0.5;
    double dropout_p = 0.9;
    std::size_t dropout_passes = 1;
    std::string divergence = "kl";
    OptimOpts optim;
    SeedOpts seeds;
    ConfigOpts config;

    void attach(CLI::App& app) {
        auto* sub = app.add_subcommand(
            "self", "select reweighting points by cost and finetune the last layer on them");
        config.attach(sub);
        sub->add_option("--data", data, "heldout dataset to select from")->required();
        sub->add_option("--eval-data", eval_data, "evaluation dataset (default: --data)");
        sub->add_option("--erm-head", erm_head_path, "trained head (GHED)")->required();
        sub->add_option("--es-head", es_head_path, "early-stopped head (GHED), for es variants");
        sub->add_option("--variant", variant, "selection variant")
            ->check(CLI::IsMember({"random", "misclassification", "es-misclassification",
                                   "dropout-disagreement", "es-disagreement"}))
            ->capture_default_str();
        sub->add_option("--n", n, "reweighting set size")
            ->check(CLI::PositiveNumber)
            ->capture_default_str();
        sub->add_option("--es-fraction", es_fraction, "training fraction of the es checkpoint")
            ->check(open_unit_validator())
            ->capture_default_str();
        sub->add_option("--dropout-p", dropout_p, "dropout probability")
            ->check(open_unit_validator())
            ->capture_default_str();
        sub->add_option("--dropout-passes", dropout_passes, "averaged dropout passes")
            ->check(CLI::PositiveNumber)
            ->capture_default_str();
        sub->add_option("--divergence", divergence, "disagreement divergence")
            ->check(CLI::IsMember({"kl", "tvd"}))
            ->capture_default_str();
        sub->add_option("--out", out, "output directory");
        optim.attach(sub);
        seeds.attach(sub, true);
        sub->callback([this] { run(); });
    }

    void run() {
        config.apply();
        const EmbeddingDataset ds = load_embeddings(data);
        const EmbeddingDataset eval_ds = load_eval_or(eval_data, ds);

        SelfVariant v;
        v.kind = self_variant_from_string(variant);
        v.n = n;
        v.dropout_passes = dropout_passes;
        v.divergence = divergence_from_string(divergence);

        TrainReport base;
        base.final_head = load_head(erm_head_path);
        base.checkpoints.by_fraction[1.0] = base.final_head;
        const bool es_variant = v.kind == SelfVariantKind::EsMisclassification ||
                                v.kind == SelfVariantKind::EsDisagreement;
        if (es_variant) {
            if (es_head_path.empty()) {
                throw InvalidInput(variant + " needs --es-head");
            }
            v.es_fraction = es_fraction;
            base.checkpoints.by_fraction[es_fraction] = load_head(es_head_path);
        }
        if (v.kind == SelfVariantKind::DropoutDisagreement) v.dropout_p = dropout_p;

        const OptimConfig cfg0 = optim.config(n);
        const auto seed_list = seeds.list();
        const std::optional<fs::path> dir =
            out.empty() ? std::nullopt : std::optional<fs::path>(prepare_out(out));

        std::vector<std::size_t> class_counts(seed_list.size(), 0);
        std::vector<std::optional<double>> wgf(seed_list.size());
        auto metrics = run_over_seeds(seed_list, seeds.jobs, [&](std::size_t i, std::uint64_t s) {
            OptimConfig cfg = cfg0;
            cfg.seed = s;
            AnnotationLedger ledger(ds.size());
            const SelfResult r = run_self(base, ds, v, cfg, &ledger);
            class_counts[i] = ledger.class_labels_revealed();
            wgf[i] = r.selection.worst_group_fraction;
            if (dir) {
                const std::string sfx = seed_suffix(seed_list, s);
                save_head(r.head, (*dir / ("head" + sfx + ".ghed")).string());
                dump_selection(r.selection, ds, (*dir / ("selection" + sfx + ".csv")).string());
            }
            return evaluate(r.head, eval_ds);
        });
        for (std::size_t i = 0; i < seed_list.size(); ++i) {
            if (dir) {
                const std::string sfx = seed_suffix(seed_list, seed_list[i]);
                note_written(*dir / ("head" + sfx + ".ghed"));
                note_written(*dir / ("selection" + sfx + ".csv"));
            }
            if (wgf[i].has_value()) {
                std::cout << "seed " << seed_list[i] << " worst_group_fraction "
                          << format6(*wgf[i]) << "\n";
            }
        }

        ExperimentReport report;
        report.method = "self";
        report.seeds = seed_list;
        report.per_seed = std::move(metrics);
        report.class_annotations = *std::max_element(class_counts.begin(), class_counts.end());
        report.group_annotations = 0;
        add_kv(report.config, "command", std::string("self"));
        add_kv(report.config, "data", data);
        add_kv(report.config, "eval_data", eval_data.empty() ? data : eval_data);
        add_kv(report.config, "erm_head", erm_head_path);
        if (!es_head_path.empty()) add_kv(report.config, "es_head", es_head_path);
        add_kv(report.config, "variant", variant);
        add_kv(report.config, "n", n);
        if (es_variant) add_kv(report.config, "es_fraction", es_fraction);
        if (v.kind == SelfVariantKind::DropoutDisagreement) {
            add_kv(report.config, "dropout_p", dropout_p);
            add_kv(report.config, "dropout_passes", dropout_passes);
        }
        add_kv(report.config, "divergence", divergence);
        optim.echo(report.config, cfg0);
        add_kv(report.config, "seeds", join_seeds(seed_list));
        add_kv(report.config, "jobs", seeds.jobs);
        emit_experiment(report, dir, "report");
        if (dir) write_manifest(*dir, report.config);
    }
};

struct FreeLunchCmd {
    std::string data, eval_data, out;
    double holdout_fraction = 0.05;
    OptimOpts optim;
    SeedOpts seeds;
    ConfigOpts config;

    void attach(CLI::App& app) {
        auto* sub = app.add_subcommand(
            "free-lunch", "split off a holdout, train on the rest, retrain fresh on the holdout");
        config.attach(sub);
        sub->add_option("--data", data, "training dataset")->required();
        sub->add_option("--eval-data", eval_data, "evaluation dataset (default: --data)");
        sub->add_option("--holdout-fraction", holdout_fraction, "fraction held out for retraining")
            ->check(open_unit_validator())
            ->capture_default_str();
        sub->add_option("--out", out, "output directory");
        optim.attach(sub);
        seeds.attach(sub, true);
        sub->callback([this] { run(); });
    }

    void run() {
        config.apply();
        const EmbeddingDataset ds = load_embeddings(data);
        const EmbeddingDataset eval_ds = load_eval_or(eval_data, ds);
        const OptimConfig cfg0 = optim.config(ds.size());
        const auto seed_list = seeds.list();
        const std::optional<fs::path> dir =
            out.empty() ? std::nullopt : std::optional<fs::path>(prepare_out(out));

        std::vector<GroupMetrics> erm_metrics(seed_list.size());
        auto metrics = run_over_seeds(seed_list, seeds.jobs, [&](std::size_t i, std::uint64_t s) {
            OptimConfig cfg = cfg0;
            cfg.seed = s;
            const FreeLunchResult r = free_lunch(ds, cfg, cfg, holdout_fraction);
            if (dir) {
                const std::string sfx = seed_suffix(seed_list, s);
                save_head(r.erm_head, (*dir / ("erm_head" + sfx + ".ghed")).string());
                save_head(r.retrained_head,
                          (*dir / ("retrained_head" + sfx + ".ghed")).string());
            }
            erm_metrics[i] = evaluate(r.erm_head, eval_ds);
            return evaluate(r.retrained_head, eval_ds);
        });
        if (dir) {
            for (std::uint64_t s : seed_list) {
                const std::string sfx = seed_suffix(seed_list, s);
                note_written(*dir / ("erm_head" + sfx + ".ghed"));
                note_written(*dir / ("retrained_head" + sfx + ".ghed"));
            }
        }

        Echo shared;
        add_kv(shared, "command", std::string("free-lunch"));
        add_kv(shared, "data", data);
        add_kv(shared, "eval_data", eval_data.empty() ? data : eval_data);
        add_kv(shared, "holdout_fraction", holdout_fraction);
        optim.echo(shared, cfg0);
        add_kv(shared, "seeds", join_seeds(seed_list));
        add_kv(shared, "jobs", seeds.jobs);

        ExperimentReport retrained;
        retrained.method = "free-lunch-retrained";
        retrained.seeds = seed_list;
        retrained.per_seed = std::move(metrics);
        retrained.config = shared;
        emit_experiment(retrained, dir, "report");

        ExperimentReport erm;
        erm.method = "free-lunch-erm";
        erm.seeds = seed_list;
        erm.per_seed = std::move(erm_metrics);
        erm.config = shared;
        emit_experiment(erm, dir, "report_erm");

        if (dir) write_manifest(*dir, shared);
    }
};

struct AblateCmd {
    std::string data, eval_data, erm_head_path, out;
    std::string fractions_csv = "0.025,0.05,0.125,0.25,0.375,0.5,0.625,0.75,0.875,1.0";
    OptimOpts optim;
    SeedOpts seeds;
    ConfigOpts config;

    void attach(CLI::App& app) {
        auto* sub = app.add_subcommand(
            "ablate", "sweep the worst-group share of a balanced reweighting set");
        config.attach(sub);
        sub->add_option("--data", data, "group-annotated heldout dataset")->required();
        sub->add_option("--eval-data", eval_data, "evaluation dataset (default: --data)");
        sub->add_option("--erm-head", erm_head_path, "head whose per-group accuracy picks the worst groups")
            ->required();
        sub->add_option("--fractions", fractions_csv, "comma-separated worst-group fractions in [0,1]")
            ->capture_default_str();
        sub->add_option("--out", out, "output directory");
        optim.attach(sub);
        seeds.attach(sub, false);
        sub->callback([this] { run(); });
    }

    void run() {
        config.apply();
        const auto fractions = parse_double_list("--fractions", fractions_csv);
        for (double f : fractions) {
            if (!(f >= 0.0 && f <= 1.0)) {
                throw CLI::ValidationError("--fractions", "fractions must be in [0, 1]");
            }
        }
        const EmbeddingDataset ds = load_embeddings(data);
        const EmbeddingDataset eval_ds = load_eval_or(eval_data, ds);
        TrainReport erm;
        erm.final_head = load_head(erm_head_path);
        erm.checkpoints.by_fraction[1.0] = erm.final_head;
        OptimConfig cfg = optim.config(ds.size());
        cfg.seed = seeds.seed;

        const auto rows = run_wg_ablation(erm, ds, eval_ds, fractions, cfg);
        std::string csv = "fraction,wga,error\n";
        for (const auto& row : rows) {
            csv += format6(row.fraction);
            csv += ',';
            if (row.wga.has_value()) csv += format6(*row.wga);
            csv += ',';
            csv += csv_quote(row.error);
            csv += '\n';
        }

        Echo echo;
        add_kv(echo, "command", std::string("ablate"));
        add_kv(echo, "data", data);
        add_kv(echo, "eval_data", eval_data.empty() ? data : eval_data);
        add_kv(echo, "erm_head", erm_head_path);
        add_kv(echo, "fractions", join6(fractions));
        optim.echo(echo, cfg);
        add_kv(echo, "seed", std::to_string(seeds.seed));

        if (out.empty()) {
            std::cout << csv;
        } else {
            const fs::path dir = prepare_out(out);
            bytes::write_file((dir / "ablation.csv").string(), csv);
            note_written(dir / "ablation.csv");
            write_manifest(dir, std::move(echo));
        }
    }
};

struct EvalCmd {
    std::string data, head_path, out;
    ConfigOpts config;

    void attach(CLI::App& app) {
        auto* sub = app.add_subcommand("eval", "per-group accuracy of a saved head");
        config.attach(sub);
        sub->add_option("--data", data, "evaluation dataset")->required();
        sub->add_option("--head", head_path, "head to evaluate (GHED)")->required();
        sub->add_option("--out", out, "output directory");
        sub->callback([this] { run(); });
    }

    void run() {
        config.apply();
        const EmbeddingDataset ds = load_embeddings(data);
        const LinearHead head = load_head(head_path);

        ExperimentReport report;
        report.method = "eval";
        report.seeds = {0};
        report.per_seed = {evaluate(head, ds)};
        add_kv(report.config, "command", std::string("eval"));
        add_kv(report.config, "data", data);
        add_kv(report.config, "head", head_path);
        const std::optional<fs::path> dir =
            out.empty() ? std::nullopt : std::optional<fs::path>(prepare_out(out));
        emit_experiment(report, dir, "report");
        if (dir) write_manifest(*dir, report.config);
    }
};

struct VerifyTheoremCmd {
    std::size_t trials = 1000;
    std::string out;
    SeedOpts seeds;
    ConfigOpts config;

    void attach(CLI::App& app) {
        auto* sub = app.add_subcommand(
            "verify-theorem", "check the disagreement-gap identity on random valid instances");
        config.attach(sub);
        sub->add_option("--trials", trials, "number of sampled instances")
            ->check(CLI::PositiveNumber)
            ->capture_default_str();
        sub->add_option("--out", out, "output directory");
        seeds.attach(sub, false);
        sub->callback([this] { run(); });
    }

    void emit(const ordered_json& j) const {
        const std::string body = j.dump(2) + "\n";
        if (out.empty()) {
            std::cout << body;
        } else {
            const fs::path dir = prepare_out(out);
            bytes::write_file((dir / "theorem.json").string(), body);
            note_written(dir / "theorem.json");
            Echo echo;
            add_kv(echo, "command", std::string("verify-theorem"));
            add_kv(echo, "trials", trials);
            add_kv(echo, "seed", std::to_string(seeds.seed));
            write_manifest(dir, std::move(echo));
        }
    }

    void run() {
        config.apply();
        ordered_json j;
        j["trials"] = trials;
        try {
            const TheoremCheck check = verify_theorem(trials, seeds.seed);
            j["max_abs_deviation"] = check.max_abs_deviation;
            j["min_gap"] = round6(check.min_gap);
            emit(j);
        } catch (const TheoremViolation& v) {
            const TheoremInstance& inst = v.instance;
            j["error"] = v.what();
            j["counterexample"] = ordered_json{{"alpha_erm", inst.alpha_erm},
                                               {"beta_erm", inst.beta_erm},
                                               {"alpha_reg", inst.alpha_reg},
                                               {"beta_reg", inst.beta_reg},
                                               {"b", inst.b},
                                               {"core_mag", inst.core_mag},
                                               {"spurious_mag", inst.spurious_mag},
                                               {"junk_sum", inst.junk_sum}};
            emit(j);
            throw;
        }
    }
};

}  // namespace

int run(std::vector<std::string> args) {
    CLI::App app{"group-robust last-layer retraining toolkit", "rebalance"};
    app.require_subcommand(1);

    SynthCmd synth;
    TrainCmd train;
    RetrainCmd retrain;
    DfrCmd dfr_cmd;
    SelfCmd self_cmd;
    FreeLunchCmd free_lunch_cmd;
    AblateCmd ablate;
    EvalCmd eval_cmd;
    VerifyTheoremCmd verify;
    synth.attach(app);
    train.attach(app);
    retrain.attach(app);
    dfr_cmd.attach(app);
    self_cmd.attach(app);
    free_lunch_cmd.attach(app);
    ablate.attach(app);
    eval_cmd.attach(app);
    verify.attach(app);

    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace rebalance::cli
