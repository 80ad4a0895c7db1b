#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "rebalance/evalreport.hpp"
#include "rebalance/rng.hpp"
#include "rebalance/trainer.hpp"
#include "helpers.hpp"

using namespace rebalance;
using namespace testutil;

namespace {

struct RowSpec {
    std::uint32_t cls;
    std::uint32_t spurious;
    bool correct;  // under sign_head(), below
};

// d=1 dataset where sign_head() gets exactly the rows marked correct.
EmbeddingDataset rows_of(const std::vector<RowSpec>& rows, std::uint32_t num_classes,
                         std::uint32_t num_spurious) {
    EmbeddingDataset ds;
    ds.num_classes = num_classes;
    ds.num_spurious = num_spurious;
    ds.features = Matrix(rows.size(), 1);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        // sign_head predicts class 0 at x=+1 and class 1 at x=-1.
        ds.features.at(i, 0) = (rows[i].cls == 0) == rows[i].correct ? 1.0 : -1.0;
        ds.class_labels.push_back(rows[i].cls);
        if (num_spurious > 0) ds.spurious_labels.push_back(rows[i].spurious);
    }
    ds.validate();
    return ds;
}

LinearHead sign_head() {
    LinearHead head = LinearHead::zeros(2, 1);
    head.weights.at(0, 0) = 1.0;
    head.weights.at(1, 0) = -1.0;
    return head;
}

// n copies of (cls, spurious, correct).
void add_rows(std::vector<RowSpec>& out, std::size_t n, std::uint32_t cls,
              std::uint32_t spurious, bool correct) {
    for (std::size_t i = 0; i < n; ++i) out.push_back({cls, spurious, correct});
}

GroupMetrics metrics_with(std::optional<double> worst, double average) {
    GroupMetrics m;
    m.worst_group_accuracy = worst;
    m.average_accuracy = average;
    return m;
}

}  // namespace

TEST_CASE("evaluate matches hand-tallied group accuracies") {
    // groups (class*2+spurious): g0 9/10, g1 3/5, g2 3/4, g3 empty
    std::vector<RowSpec> rows;
    add_rows(rows, 9, 0, 0, true);
    add_rows(rows, 1, 0, 0, false);
    add_rows(rows, 3, 0, 1, true);
    add_rows(rows, 2, 0, 1, false);
    add_rows(rows, 3, 1, 0, true);
    add_rows(rows, 1, 1, 0, false);
    const EmbeddingDataset ds = rows_of(rows, 2, 2);

    const GroupMetrics m = evaluate(sign_head(), ds);
    REQUIRE(m.per_group_accuracy.size() == 3);
    CHECK(m.per_group_accuracy.at(0) == 0.9);
    CHECK(m.per_group_accuracy.at(1) == 0.6);
    CHECK(m.per_group_accuracy.at(2) == 0.75);
    CHECK(m.counts.at(0) == 10);
    CHECK(m.counts.at(1) == 5);
    CHECK(m.counts.at(2) == 4);
    REQUIRE(m.worst_group_accuracy.has_value());
    CHECK(*m.worst_group_accuracy == 0.6);
    CHECK(m.average_accuracy == 15.0 / 19.0);
    CHECK(m.empty_groups == std::vector<std::uint32_t>{3});
}

TEST_CASE("evaluate breaks logit ties toward the lowest class") {
    EmbeddingDataset ds;
    ds.num_classes = 3;
    ds.features = Matrix(2, 1);
    ds.features.at(0, 0) = 5.0;
    ds.features.at(1, 0) = -5.0;
    ds.class_labels = {0, 2};
    ds.validate();

    // Zero head scores every class equally, so both rows predict class 0.
    const GroupMetrics m = evaluate(LinearHead::zeros(3, 1), ds);
    CHECK(m.average_accuracy == 0.5);
    CHECK_FALSE(m.worst_group_accuracy.has_value());
}

TEST_CASE("evaluate weights the average by rows, not by groups") {
    // 3 class-0 rows (all right under a zero head) vs 1 class-1 row (wrong).
    const EmbeddingDataset ds = grouped_dataset({{3}, {1}}, 1);
    const GroupMetrics m = evaluate(LinearHead::zeros(2, 2), ds);
    CHECK(m.per_group_accuracy.at(0) == 1.0);
    CHECK(m.per_group_accuracy.at(1) == 0.0);
    CHECK(m.average_accuracy == 0.75);  // not the group mean 0.5
    CHECK(*m.worst_group_accuracy == 0.0);
    CHECK(m.empty_groups.empty());
}

TEST_CASE("evaluate without spurious labels reports only the average") {
    std::vector<RowSpec> rows;
    add_rows(rows, 3, 0, 0, true);
    add_rows(rows, 1, 1, 0, false);
    const EmbeddingDataset ds = rows_of(rows, 2, 0);

    const GroupMetrics m = evaluate(sign_head(), ds);
    CHECK_FALSE(m.worst_group_accuracy.has_value());
    CHECK(m.per_group_accuracy.empty());
    CHECK(m.counts.empty());
    CHECK(m.empty_groups.empty());
    CHECK(m.average_accuracy == 0.75);
}

TEST_CASE("evaluate input validation") {
    EmbeddingDataset empty;
    CHECK_THROWS_AS(evaluate(LinearHead::zeros(2, 1), empty), InvalidInput);

    std::vector<RowSpec> rows;
    add_rows(rows, 2, 0, 0, true);
    const EmbeddingDataset ds = rows_of(rows, 2, 1);
    CHECK_THROWS_AS(evaluate(LinearHead::zeros(2, 3), ds), InvalidInput);
}

TEST_CASE("evaluate invariants on random heads and datasets") {
    Rng rng(99);
    EmbeddingDataset ds;
    ds.num_classes = 3;
    ds.num_spurious = 2;
    const std::size_t n = 200;
    ds.features = Matrix(n, 4);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < 4; ++j) ds.features.at(i, j) = rng.next_gaussian();
        ds.class_labels.push_back(static_cast<std::uint32_t>(rng.next_below(3)));
        ds.spurious_labels.push_back(static_cast<std::uint32_t>(rng.next_below(2)));
    }
    ds.validate();

    LinearHead head = LinearHead::zeros(3, 4);
    for (double& w : head.weights.data) w = rng.next_gaussian();
    for (double& b : head.bias) b = rng.next_gaussian();

    const GroupMetrics m = evaluate(head, ds);
    REQUIRE(m.worst_group_accuracy.has_value());
    double weighted = 0.0;
    std::size_t total = 0;
    double max_acc = 0.0;
    for (const auto& [g, acc] : m.per_group_accuracy) {
        CHECK(acc >= *m.worst_group_accuracy);
        CHECK(acc >= 0.0);
        CHECK(acc <= 1.0);
        weighted += acc * static_cast<double>(m.counts.at(g));
        total += m.counts.at(g);
        max_acc = std::max(max_acc, acc);
    }
    CHECK(total == n);
    CHECK(m.average_accuracy ==
          doctest::Approx(weighted / static_cast<double>(n)).epsilon(1e-12));
    CHECK(m.average_accuracy >= *m.worst_group_accuracy);
    CHECK(m.average_accuracy <= max_acc);

    // Row order cannot matter: metrics are pure tallies.
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    rng.shuffle(perm);
    const GroupMetrics p = evaluate(head, ds.subset(perm));
    CHECK(p.average_accuracy == m.average_accuracy);
    CHECK(p.per_group_accuracy == m.per_group_accuracy);
    CHECK(p.counts == m.counts);
    CHECK(*p.worst_group_accuracy == *m.worst_group_accuracy);
}

TEST_CASE("model_select picks the best worst-group head, earliest on ties") {
    std::vector<RowSpec> rows;
    add_rows(rows, 4, 0, 0, true);
    add_rows(rows, 4, 0, 1, true);
    add_rows(rows, 4, 1, 0, true);
    add_rows(rows, 4, 1, 1, true);
    const EmbeddingDataset val = rows_of(rows, 2, 2);

    // Zero head leaves class-1 groups at 0; sign head is perfect.
    const std::vector<LinearHead> up{LinearHead::zeros(2, 1), sign_head()};
    CHECK(model_select(up, val) == 1);
    const std::vector<LinearHead> down{sign_head(), LinearHead::zeros(2, 1)};
    CHECK(model_select(down, val) == 0);
    const std::vector<LinearHead> tied{LinearHead::zeros(2, 1), sign_head(), sign_head()};
    CHECK(model_select(tied, val) == 1);
    const std::vector<LinearHead> single{LinearHead::zeros(2, 1)};
    CHECK(model_select(single, val) == 0);
}

TEST_CASE("model_select consumes every annotation once") {
    std::vector<RowSpec> rows;
    add_rows(rows, 3, 0, 0, true);
    add_rows(rows, 3, 1, 1, true);
    const EmbeddingDataset val = rows_of(rows, 2, 2);

    AnnotationLedger ledger(val.size());
    const std::vector<LinearHead> heads{sign_head(), LinearHead::zeros(2, 1)};
    model_select(heads, val, &ledger);
    CHECK(ledger.class_labels_revealed() == 6);
    CHECK(ledger.group_labels_revealed() == 6);
    model_select(heads, val, &ledger);  // already revealed; counts stay put
    CHECK(ledger.class_labels_revealed() == 6);
    CHECK(ledger.group_labels_revealed() == 6);
}

TEST_CASE("model_select input validation") {
    std::vector<RowSpec> rows;
    add_rows(rows, 2, 0, 0, true);
    add_rows(rows, 2, 1, 0, true);
    CHECK_THROWS_AS(model_select({}, rows_of(rows, 2, 1)), InvalidInput);
    CHECK_THROWS_AS(model_select({sign_head()}, rows_of(rows, 2, 0)), MissingAnnotation);
}

TEST_CASE("finalize_report computes the sample spread of worst-group accuracy") {
    ExperimentReport two;
    two.per_seed = {metrics_with(0.5, 0.9), metrics_with(0.7, 0.8)};
    finalize_report(two);
    CHECK(two.wga_mean == 0.6);
    CHECK(two.wga_std == doctest::Approx(std::sqrt(0.02)).epsilon(1e-12));

    ExperimentReport three;
    three.per_seed = {metrics_with(0.2, 0.0), metrics_with(0.5, 0.0), metrics_with(0.8, 0.0)};
    finalize_report(three);
    CHECK(three.wga_mean == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(three.wga_std == doctest::Approx(0.3).epsilon(1e-12));

    ExperimentReport one;
    one.per_seed = {metrics_with(0.37, 0.9)};
    finalize_report(one);
    CHECK(one.wga_mean == 0.37);
    CHECK(one.wga_std == 0.0);
}

TEST_CASE("finalize_report falls back to average accuracy without groups") {
    ExperimentReport report;
    report.per_seed = {metrics_with(std::nullopt, 0.42), metrics_with(0.3, 0.9)};
    finalize_report(report);
    CHECK(report.wga_mean == doctest::Approx(0.36).epsilon(1e-12));
}

TEST_CASE("finalize_report zeroes an empty report") {
    ExperimentReport report;
    report.wga_mean = 99.0;
    report.wga_std = 99.0;
    finalize_report(report);
    CHECK(report.wga_mean == 0.0);
    CHECK(report.wga_std == 0.0);
}

TEST_CASE("serialized floats carry six significant digits") {
    CHECK(format6(0.5) == "0.5");
    CHECK(format6(1.0) == "1");
    CHECK(format6(0.0) == "0");
    CHECK(format6(0.123456789) == "0.123457");
    CHECK(format6(1234567.0) == "1.23457e+06");
    CHECK(format6(-0.000123456789) == "-0.000123457");
    CHECK(format6(1e-7) == "1e-07");

    CHECK(round6(1.0 / 3.0) == 0.333333);
    CHECK(round6(0.123456789) == 0.123457);
    CHECK(round6(0.5) == 0.5);

    Rng rng(7);
    for (int i = 0; i < 100; ++i) {
        const double v = rng.next_gaussian() * 1e3;
        CHECK(round6(round6(v)) == round6(v));
    }
}

TEST_CASE("json report layout") {
    ExperimentReport report;
    report.method = "dfr";
    report.seeds = {3, 4};
    GroupMetrics m0;
    m0.per_group_accuracy = {{0, 1.0}, {1, 0.5}};
    m0.counts = {{0, 2}, {1, 2}};
    m0.worst_group_accuracy = 0.5;
    m0.average_accuracy = 0.75;
    GroupMetrics m1;
    m1.per_group_accuracy = {{0, 0.25}, {1, 1.0}};
    m1.counts = {{0, 4}, {1, 1}};
    m1.worst_group_accuracy = 0.25;
    m1.average_accuracy = 0.4;
    m1.empty_groups = {2};
    report.per_seed = {m0, m1};
    finalize_report(report);
    report.class_annotations = 7;
    report.group_annotations = 5;
    report.config = {{"lr", "0.001"}, {"steps", "250"}};

    const std::string body = render_report(report, ReportFormat::Json);
    CHECK(body == render_report(report, ReportFormat::Json));
    CHECK(body.rfind("{\n  \"method\"", 0) == 0);
    CHECK(body.back() == '\n');

    const auto j = nlohmann::json::parse(body);
    CHECK(j["method"] == "dfr");
    CHECK(j["seeds"] == nlohmann::json::array({3, 4}));
    REQUIRE(j["runs"].size() == 2);
    CHECK(j["runs"][0]["seed"] == 3);
    CHECK(j["runs"][1]["seed"] == 4);
    CHECK(j["runs"][0]["average_accuracy"] == 0.75);
    CHECK(j["runs"][0]["worst_group_accuracy"] == 0.5);
    CHECK(j["runs"][0]["per_group_accuracy"]["1"] == 0.5);
    CHECK(j["runs"][0]["group_counts"]["0"] == 2);
    CHECK(j["runs"][0]["empty_groups"].empty());
    CHECK(j["runs"][1]["empty_groups"] == nlohmann::json::array({2}));
    CHECK(j["wga_mean"] == 0.375);
    CHECK(j["annotations"]["class"] == 7);
    CHECK(j["annotations"]["group"] == 5);
    CHECK(j["config"]["lr"] == "0.001");
    CHECK(j["config"]["steps"] == "250");
}

TEST_CASE("json report marks a groupless run with a null wga") {
    ExperimentReport report;
    report.method = "erm";
    report.seeds = {1};
    report.per_seed = {metrics_with(std::nullopt, 0.8)};
    finalize_report(report);

    const auto j = nlohmann::json::parse(render_report(report, ReportFormat::Json));
    CHECK(j["runs"][0]["worst_group_accuracy"].is_null());
    CHECK(j["wga_mean"] == 0.8);
}

TEST_CASE("csv report is one row per group") {
    ExperimentReport report;
    report.method = "erm";
    report.seeds = {7};
    GroupMetrics m;
    m.per_group_accuracy = {{0, 1.0}, {1, 0.5}};
    m.counts = {{0, 4}, {1, 2}};
    m.worst_group_accuracy = 0.5;
    m.average_accuracy = 0.75;
    report.per_seed = {m};
    finalize_report(report);

    CHECK(render_report(report, ReportFormat::Csv) ==
          "method,seed,group,accuracy,wga,avg\n"
          "erm,7,0,1,0.5,0.75\n"
          "erm,7,1,0.5,0.5,0.75\n");
}

TEST_CASE("csv report collapses a groupless run to one row") {
    ExperimentReport report;
    report.method = "erm";
    report.seeds = {7};
    report.per_seed = {metrics_with(std::nullopt, 0.8)};
    finalize_report(report);
    CHECK(render_report(report, ReportFormat::Csv) ==
          "method,seed,group,accuracy,wga,avg\n"
          "erm,7,all,0.8,0.8,0.8\n");

    report.seeds.clear();  // missing seed entries print as 0
    CHECK(render_report(report, ReportFormat::Csv) ==
          "method,seed,group,accuracy,wga,avg\n"
          "erm,0,all,0.8,0.8,0.8\n");
}

TEST_CASE("emit_report writes the rendered bytes") {
    ExperimentReport report;
    report.method = "cb";
    report.seeds = {11};
    report.per_seed = {metrics_with(0.25, 0.5)};
    finalize_report(report);

    const std::string dir = tmpdir();
    const std::string path = dir + "/report.json";
    emit_report(report, path, ReportFormat::Json);
    const std::string first = read_bytes(path);
    CHECK(first == render_report(report, ReportFormat::Json));

    emit_report(report, path, ReportFormat::Json);
    CHECK(read_bytes(path) == first);

    emit_report(report, dir + "/report.csv", ReportFormat::Csv);
    CHECK(read_bytes(dir + "/report.csv") == render_report(report, ReportFormat::Csv));

    CHECK_THROWS_AS(emit_report(report, dir + "/missing_sub/report.json", ReportFormat::Json),
                    IoError);
}

TEST_CASE("worst_groups_of lists every group tied at the minimum") {
    std::vector<RowSpec> rows;
    add_rows(rows, 9, 0, 0, true);
    add_rows(rows, 1, 0, 0, false);
    add_rows(rows, 3, 0, 1, true);
    add_rows(rows, 2, 0, 1, false);
    add_rows(rows, 3, 1, 0, true);
    add_rows(rows, 1, 1, 0, false);
    add_rows(rows, 1, 1, 1, true);
    CHECK(worst_groups_of(sign_head(), rows_of(rows, 2, 2)) ==
          std::vector<std::uint32_t>{1});

    // 1/2 and 2/4 tie exactly at 0.5.
    std::vector<RowSpec> tied;
    add_rows(tied, 1, 0, 0, true);
    add_rows(tied, 1, 0, 0, false);
    add_rows(tied, 2, 0, 1, true);
    add_rows(tied, 2, 0, 1, false);
    add_rows(tied, 3, 1, 0, true);
    CHECK(worst_groups_of(sign_head(), rows_of(tied, 2, 2)) ==
          std::vector<std::uint32_t>({0, 1}));

    const EmbeddingDataset grouped = grouped_dataset({{3, 3}, {2, 2}}, 2);
    CHECK(worst_groups_of(LinearHead::zeros(2, 2), grouped) ==
          std::vector<std::uint32_t>({2, 3}));

    std::vector<RowSpec> plain;
    add_rows(plain, 4, 0, 0, true);
    CHECK_THROWS_AS(worst_groups_of(sign_head(), rows_of(plain, 2, 0)), MissingAnnotation);
}

TEST_CASE("worst-group ablation sweeps on, recording failures per fraction") {
    // One spurious value per class: removed worst-group rows have no
    // replacement pool, so fraction 0 must fail while fraction 1 runs.
    const EmbeddingDataset heldout = grouped_dataset({{8}, {8}}, 1);
    TrainReport erm;
    erm.final_head = LinearHead::zeros(2, 2);  // class-1 group scores 0 -> worst {1}

    OptimConfig cfg;
    cfg.lr0 = 1e-3;
    cfg.total_steps = 40;
    cfg.batch_size = 8;
    cfg.seed = 5;

    const auto rows = run_wg_ablation(erm, heldout, heldout, {0.0, 1.0}, cfg);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].fraction == 0.0);
    CHECK_FALSE(rows[0].wga.has_value());
    CHECK(rows[0].error.find("class 1") != std::string::npos);
    CHECK(rows[1].fraction == 1.0);
    REQUIRE(rows[1].wga.has_value());
    CHECK(*rows[1].wga >= 0.0);
    CHECK(*rows[1].wga <= 1.0);
    CHECK(rows[1].error.empty());

    const auto again = run_wg_ablation(erm, heldout, heldout, {0.0, 1.0}, cfg);
    CHECK(*again[1].wga == *rows[1].wga);

    std::vector<RowSpec> plain;
    add_rows(plain, 4, 0, 0, true);
    add_rows(plain, 4, 1, 0, true);
    const EmbeddingDataset no_groups = rows_of(plain, 2, 0);
    CHECK_THROWS_AS(run_wg_ablation(erm, no_groups, heldout, {0.5}, cfg), MissingAnnotation);
    CHECK_THROWS_AS(run_wg_ablation(erm, heldout, no_groups, {0.5}, cfg), MissingAnnotation);
}
