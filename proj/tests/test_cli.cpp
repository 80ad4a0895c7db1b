#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rebalance/cli.hpp"
#include "rebalance/dataset.hpp"
#include "rebalance/synthlab.hpp"
#include "rebalance/trainer.hpp"
#include "helpers.hpp"

using namespace rebalance;
using namespace testutil;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code = -1;
    std::string out;
    std::string err;
};

CliResult run_cli(std::vector<std::string> args) {
    CliResult r;
    CaptureStream out(std::cout);
    CaptureStream err(std::cerr);
    r.code = cli::run(std::move(args));
    r.out = out.text();
    r.err = err.text();
    return r;
}

// tmpdir() is one shared directory per test process; out-dirs need isolation.
std::string fresh_dir() {
    static int counter = 0;
    const fs::path p = tmpdir() / ("cli_" + std::to_string(counter++));
    fs::create_directories(p);
    return p.string();
}

// Small group-annotated dataset on disk for the data-driven subcommands.
std::string synth_file(std::uint64_t seed = 3, std::size_t n = 240) {
    SyntheticSpec spec;
    spec.n = n;
    spec.d = 4;
    spec.seed = seed;
    const std::string path = tmpfile("data.gemb");
    save_embeddings(generate_synthetic(spec), path);
    return path;
}

std::string no_group_file() {
    EmbeddingDataset ds;
    ds.num_classes = 2;
    ds.features = Matrix(8, 2);
    for (std::size_t i = 0; i < 8; ++i) {
        ds.features.at(i, 0) = i % 2 == 0 ? 1.0 : -1.0;
        ds.features.at(i, 1) = static_cast<double>(i);
        ds.class_labels.push_back(static_cast<std::uint32_t>(i % 2));
    }
    ds.validate();
    const std::string path = tmpfile("plain.gemb");
    save_embeddings(ds, path);
    return path;
}

std::size_t count_lines(const std::string& text) {
    std::size_t n = 0;
    for (char c : text) {
        if (c == '\n') ++n;
    }
    return n;
}

struct EnvGuard {
    explicit EnvGuard(const char* name, const char* value) : name_(name) {
        ::setenv(name, value, 1);
    }
    ~EnvGuard() { ::unsetenv(name_); }
    const char* name_;
};

}  // namespace

TEST_CASE("usage errors exit with code 2") {
    CHECK(run_cli({}).code == 2);  // a subcommand is required
    CHECK(run_cli({"frobnicate"}).code == 2);
    CHECK(run_cli({"train"}).code == 2);  // --data is required

    const CliResult bad_lr = run_cli({"train", "--data", "x.gemb", "--lr", "-1"});
    CHECK(bad_lr.code == 2);
    CHECK_FALSE(bad_lr.err.empty());

    CHECK(run_cli({"synth", "--out", fresh_dir(), "--minority-rate", "0.6"}).code == 2);
    CHECK(run_cli({"train", "--data", "x.gemb", "--steps", "10", "--epochs", "2"}).code == 2);
    CHECK(run_cli({"verify-theorem", "--trials", "0"}).code == 2);
}

TEST_CASE("--help lists every subcommand and exits 0") {
    const CliResult r = run_cli({"--help"});
    CHECK(r.code == 0);
    for (const char* name : {"synth", "train", "retrain", "dfr", "self", "free-lunch",
                             "ablate", "eval", "verify-theorem"}) {
        CHECK(r.out.find(name) != std::string::npos);
    }
    CHECK(r.out.find("rebalance") != std::string::npos);
}

TEST_CASE("pipeline failures exit 1 and explain themselves on stderr") {
    const CliResult missing =
        run_cli({"eval", "--data", tmpfile("absent.gemb"), "--head", "h.ghed"});
    CHECK(missing.code == 1);
    CHECK(missing.err.rfind("error: ", 0) == 0);

    // dfr needs group labels
    const CliResult plain = run_cli({"dfr", "--data", no_group_file(), "--steps", "10"});
    CHECK(plain.code == 1);
    CHECK(plain.err.find("spurious") != std::string::npos);
}

TEST_CASE("synth writes a loadable dataset and a sorted manifest") {
    const std::string dir = fresh_dir();
    const CliResult r = run_cli(
        {"synth", "--n", "300", "--d", "5", "--seed", "9", "--out", dir});
    CHECK(r.code == 0);
    CHECK(r.out.find("wrote: ") != std::string::npos);
    CHECK(r.out.find("data.gemb") != std::string::npos);
    CHECK(r.out.find("manifest.txt") != std::string::npos);

    const EmbeddingDataset ds = load_embeddings(dir + "/data.gemb");
    CHECK(ds.size() == 300);
    CHECK(ds.dim() == 5);
    CHECK(ds.num_classes == 2);
    CHECK(ds.has_spurious());

    const std::string manifest = read_bytes(dir + "/manifest.txt");
    CHECK(manifest.find("command=synth\n") != std::string::npos);
    CHECK(manifest.find("n=300\n") != std::string::npos);
    CHECK(manifest.find("seed=9\n") != std::string::npos);

    // same flags, fresh directory: identical bytes
    const std::string dir2 = fresh_dir();
    CHECK(run_cli({"synth", "--n", "300", "--d", "5", "--seed", "9", "--out", dir2}).code == 0);
    CHECK(read_bytes(dir2 + "/data.gemb") == read_bytes(dir + "/data.gemb"));
}

TEST_CASE("train writes heads and reports, byte-identical across reruns") {
    const std::string data = synth_file();
    const std::string dir1 = fresh_dir();
    const std::string dir2 = fresh_dir();
    const std::vector<std::string> base = {"train", "--data", data, "--steps", "60",
                                           "--seed", "11"};

    std::vector<std::string> first = base;
    first.insert(first.end(), {"--out", dir1});
    std::vector<std::string> second = base;
    second.insert(second.end(), {"--out", dir2});
    CHECK(run_cli(first).code == 0);
    CHECK(run_cli(second).code == 0);

    for (const char* name : {"head.ghed", "report.json", "report.csv", "manifest.txt"}) {
        const std::string a = read_bytes(dir1 + "/" + name);
        CHECK(a == read_bytes(dir2 + "/" + name));
        CHECK_FALSE(a.empty());
    }

    const auto j = nlohmann::json::parse(read_bytes(dir1 + "/report.json"));
    CHECK(j["method"] == "train");
    CHECK(j["runs"].size() == 1);
    CHECK(j["runs"][0]["seed"] == 11);
    CHECK(j["config"]["data"] == data);
    CHECK(j["config"]["steps"] == "60");
    CHECK(j["config"]["balance"] == "unbalanced");

    const LinearHead head = load_head(dir1 + "/head.ghed");
    CHECK(head.bias.size() == 2);
    CHECK(head.weights.cols == 4);
}

TEST_CASE("train without --out streams the report") {
    const CliResult r = run_cli({"train", "--data", synth_file(), "--steps", "30"});
    CHECK(r.code == 0);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j["method"] == "train");
    CHECK(j["wga_mean"].is_number());
}

TEST_CASE("checkpoint fractions write early heads and are validated") {
    const std::string data = synth_file();
    const std::string dir = fresh_dir();
    CHECK(run_cli({"train", "--data", data, "--steps", "40", "--checkpoints", "0.5",
                   "--out", dir})
              .code == 0);
    CHECK(fs::exists(dir + "/ckpt_0.5.ghed"));
    CHECK(fs::exists(dir + "/head.ghed"));
    const LinearHead early = load_head(dir + "/ckpt_0.5.ghed");
    CHECK(early.weights.cols == 4);

    CHECK(run_cli({"train", "--data", data, "--checkpoints", "1.5"}).code == 2);
    CHECK(run_cli({"train", "--data", data, "--checkpoints", "abc"}).code == 2);
}

TEST_CASE("seed fan-out writes suffixed artifacts and a merged report") {
    const std::string data = synth_file();
    const std::string dir = fresh_dir();
    CHECK(run_cli({"train", "--data", data, "--steps", "40", "--seeds", "1,2",
                   "--out", dir})
              .code == 0);
    CHECK(fs::exists(dir + "/head_1.ghed"));
    CHECK(fs::exists(dir + "/head_2.ghed"));
    CHECK_FALSE(fs::exists(dir + "/head.ghed"));

    const auto j = nlohmann::json::parse(read_bytes(dir + "/report.json"));
    CHECK(j["seeds"] == nlohmann::json::array({1, 2}));
    REQUIRE(j["runs"].size() == 2);
    CHECK(j["runs"][0]["seed"] == 1);
    CHECK(j["runs"][1]["seed"] == 2);
    CHECK(j["config"]["seeds"] == "1,2");

    // parallel fan-out keeps seed order and per-seed results
    const std::string dir2 = fresh_dir();
    CHECK(run_cli({"train", "--data", data, "--steps", "40", "--seeds", "1,2",
                   "--jobs", "2", "--out", dir2})
              .code == 0);
    const auto j2 = nlohmann::json::parse(read_bytes(dir2 + "/report.json"));
    CHECK(j2["runs"] == j["runs"]);
    CHECK(read_bytes(dir2 + "/head_1.ghed") == read_bytes(dir + "/head_1.ghed"));
    CHECK(read_bytes(dir2 + "/head_2.ghed") == read_bytes(dir + "/head_2.ghed"));

    CHECK(run_cli({"train", "--data", data, "--seeds", "1,x"}).code == 2);
}

TEST_CASE("REBALANCE_SEED feeds --seed, and the flag still wins") {
    const std::string dir_env = fresh_dir();
    {
        EnvGuard guard("REBALANCE_SEED", "21");
        CHECK(run_cli({"synth", "--n", "64", "--out", dir_env}).code == 0);
        CHECK(read_bytes(dir_env + "/manifest.txt").find("seed=21\n") != std::string::npos);

        const std::string dir_flag = fresh_dir();
        CHECK(run_cli({"synth", "--n", "64", "--seed", "5", "--out", dir_flag}).code == 0);
        CHECK(read_bytes(dir_flag + "/manifest.txt").find("seed=5\n") != std::string::npos);
    }
    const std::string dir_plain = fresh_dir();
    CHECK(run_cli({"synth", "--n", "64", "--seed", "21", "--out", dir_plain}).code == 0);
    CHECK(read_bytes(dir_plain + "/data.gemb") == read_bytes(dir_env + "/data.gemb"));
}

TEST_CASE("a config file fills in flags, and explicit flags beat it") {
    const std::string data = synth_file();
    const std::string cfg = tmpfile("train.cfg");
    write_bytes(cfg, "steps=25\nseed=4\n");

    const std::string dir = fresh_dir();
    CHECK(run_cli({"train", "--data", data, "--config", cfg, "--out", dir}).code == 0);
    auto j = nlohmann::json::parse(read_bytes(dir + "/report.json"));
    CHECK(j["config"]["steps"] == "25");
    CHECK(j["config"]["seeds"] == "4");

    const std::string dir2 = fresh_dir();
    CHECK(run_cli({"train", "--data", data, "--config", cfg, "--steps", "30", "--out", dir2})
              .code == 0);
    j = nlohmann::json::parse(read_bytes(dir2 + "/report.json"));
    CHECK(j["config"]["steps"] == "30");

    const std::string bad = tmpfile("bad.cfg");
    write_bytes(bad, "stepz=25\n");
    CHECK(run_cli({"train", "--data", data, "--config", bad}).code == 2);

    const std::string bad_value = tmpfile("bad_value.cfg");
    write_bytes(bad_value, "lr=-1\n");
    CHECK(run_cli({"train", "--data", data, "--config", bad_value}).code == 2);

    CHECK(run_cli({"train", "--data", data, "--config", tmpfile("absent.cfg")}).code == 2);
}

TEST_CASE("eval reports a saved head's accuracy") {
    const std::string data = synth_file();
    const std::string head_path = tmpfile("zero.ghed");
    save_head(LinearHead::zeros(2, 4), head_path);

    const CliResult r = run_cli({"eval", "--data", data, "--head", head_path});
    CHECK(r.code == 0);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j["method"] == "eval");
    CHECK(j["runs"][0]["worst_group_accuracy"].is_number());
    CHECK(j["runs"][0]["group_counts"].size() == 4);

    // groupless data still evaluates, with a null worst-group accuracy
    const std::string plain_head = tmpfile("plain.ghed");
    save_head(LinearHead::zeros(2, 2), plain_head);
    const CliResult p = run_cli({"eval", "--data", no_group_file(), "--head", plain_head});
    CHECK(p.code == 0);
    CHECK(nlohmann::json::parse(p.out)["runs"][0]["worst_group_accuracy"].is_null());
}

TEST_CASE("retrain and dfr account for the annotations they consume") {
    const std::string data = synth_file();
    const std::string dir = fresh_dir();
    CHECK(run_cli({"retrain", "--data", data, "--steps", "40", "--out", dir}).code == 0);
    auto j = nlohmann::json::parse(read_bytes(dir + "/report.json"));
    CHECK(j["method"] == "retrain");
    CHECK(j["config"]["balance"] == "class-sampling");
    CHECK(j["annotations"]["class"] == 240);
    CHECK(j["annotations"]["group"] == 0);

    const std::string dir_g = fresh_dir();
    CHECK(run_cli({"retrain", "--data", data, "--steps", "40", "--balance",
                   "group-sampling", "--out", dir_g})
              .code == 0);
    j = nlohmann::json::parse(read_bytes(dir_g + "/report.json"));
    CHECK(j["annotations"]["group"] == 240);

    const std::string dir_d = fresh_dir();
    CHECK(run_cli({"dfr", "--data", data, "--steps", "40", "--out", dir_d}).code == 0);
    j = nlohmann::json::parse(read_bytes(dir_d + "/report.json"));
    CHECK(j["method"] == "dfr");
    CHECK(j["annotations"]["class"] == 240);
    CHECK(j["annotations"]["group"] == 240);
    CHECK(fs::exists(dir_d + "/head.ghed"));
}

TEST_CASE("self selects from saved heads and dumps the selection") {
    const std::string data = synth_file();
    const std::string dir_t = fresh_dir();
    REQUIRE(run_cli({"train", "--data", data, "--steps", "60", "--checkpoints", "0.5",
                     "--out", dir_t})
                .code == 0);
    const std::string erm = dir_t + "/head.ghed";
    const std::string es = dir_t + "/ckpt_0.5.ghed";

    const std::string dir = fresh_dir();
    const CliResult r = run_cli({"self", "--data", data, "--erm-head", erm, "--es-head", es,
                                 "--variant", "es-disagreement", "--n", "24", "--steps", "40",
                                 "--out", dir});
    CHECK(r.code == 0);
    CHECK(r.out.find("worst_group_fraction") != std::string::npos);

    const std::string selection = read_bytes(dir + "/selection.csv");
    CHECK(selection.rfind("index,cost,class,group\n", 0) == 0);
    CHECK(count_lines(selection) == 25);  // header + one row per selected point

    const auto j = nlohmann::json::parse(read_bytes(dir + "/report.json"));
    CHECK(j["method"] == "self");
    CHECK(j["annotations"]["class"] == 24);  // only the selected rows' labels
    CHECK(j["annotations"]["group"] == 0);
    CHECK(j["config"]["variant"] == "es-disagreement");
    CHECK(j["config"]["es_fraction"] == "0.5");

    // misclassification scores need every heldout label
    const std::string dir_m = fresh_dir();
    CHECK(run_cli({"self", "--data", data, "--erm-head", erm, "--variant",
                   "misclassification", "--n", "24", "--steps", "40", "--out", dir_m})
              .code == 0);
    const auto jm = nlohmann::json::parse(read_bytes(dir_m + "/report.json"));
    CHECK(jm["annotations"]["class"] == 240);

    const CliResult no_es = run_cli({"self", "--data", data, "--erm-head", erm,
                                     "--variant", "es-disagreement", "--n", "24"});
    CHECK(no_es.code == 1);
    CHECK(no_es.err.find("needs --es-head") != std::string::npos);
}

TEST_CASE("free-lunch writes both heads and both reports") {
    const std::string data = synth_file();
    const std::string dir = fresh_dir();
    CHECK(run_cli({"free-lunch", "--data", data, "--steps", "40", "--out", dir}).code == 0);
    for (const char* name : {"erm_head.ghed", "retrained_head.ghed", "report.json",
                             "report.csv", "report_erm.json", "report_erm.csv",
                             "manifest.txt"}) {
        CHECK(fs::exists(dir + "/" + std::string(name)));
    }
    const auto retrained = nlohmann::json::parse(read_bytes(dir + "/report.json"));
    const auto erm = nlohmann::json::parse(read_bytes(dir + "/report_erm.json"));
    CHECK(retrained["method"] == "free-lunch-retrained");
    CHECK(erm["method"] == "free-lunch-erm");
    CHECK(retrained["config"] == erm["config"]);
    CHECK(erm["config"]["holdout_fraction"] == "0.05");
}

TEST_CASE("ablate sweeps fractions into a csv") {
    const std::string data = synth_file();
    const std::string head_path = tmpfile("erm.ghed");
    {
        OptimConfig cfg;
        cfg.total_steps = 80;
        cfg.seed = 1;
        save_head(train_head(load_embeddings(data), BalanceMode::Unbalanced, cfg).final_head,
                  head_path);
    }

    const CliResult streamed = run_cli({"ablate", "--data", data, "--erm-head", head_path,
                                        "--fractions", "0.5,1.0", "--steps", "30"});
    CHECK(streamed.code == 0);
    CHECK(streamed.out.rfind("fraction,wga,error\n", 0) == 0);
    CHECK(count_lines(streamed.out) == 3);
    CHECK(streamed.out.find("\n0.5,") != std::string::npos);
    CHECK(streamed.out.find("\n1,") != std::string::npos);

    const std::string dir = fresh_dir();
    const std::string dir2 = fresh_dir();
    CHECK(run_cli({"ablate", "--data", data, "--erm-head", head_path, "--fractions",
                   "0.5,1.0", "--steps", "30", "--out", dir})
              .code == 0);
    CHECK(run_cli({"ablate", "--data", data, "--erm-head", head_path, "--fractions",
                   "0.5,1.0", "--steps", "30", "--out", dir2})
              .code == 0);
    const std::string csv = read_bytes(dir + "/ablation.csv");
    CHECK(csv == read_bytes(dir2 + "/ablation.csv"));
    CHECK(csv == streamed.out);

    CHECK(run_cli({"ablate", "--data", data, "--erm-head", head_path, "--fractions", "2.0"})
              .code == 2);
}

TEST_CASE("verify-theorem reports the check outcome as json") {
    const CliResult r = run_cli({"verify-theorem", "--trials", "50"});
    CHECK(r.code == 0);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j["trials"] == 50);
    CHECK(j["max_abs_deviation"].get<double>() < 1e-10);
    CHECK(j["min_gap"].get<double>() > 0.0);

    const std::string dir = fresh_dir();
    const std::string dir2 = fresh_dir();
    CHECK(run_cli({"verify-theorem", "--trials", "50", "--out", dir}).code == 0);
    CHECK(run_cli({"verify-theorem", "--trials", "50", "--out", dir2}).code == 0);
    CHECK(read_bytes(dir + "/theorem.json") == read_bytes(dir2 + "/theorem.json"));
    CHECK(read_bytes(dir + "/theorem.json") == r.out);
}
