#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rebalance/dataset.hpp"
#include "rebalance/mathcore.hpp"

namespace rebalance {

// Accuracy breakdown for one head on one dataset. Accuracies are exact
// count ratios; rounding happens only at serialization.
struct GroupMetrics {
    std::map<std::uint32_t, double> per_group_accuracy;  // non-empty groups only
    std::map<std::uint32_t, std::size_t> counts;
    std::optional<double> worst_group_accuracy;  // absent without spurious labels
    double average_accuracy = 0.0;
    std::vector<std::uint32_t> empty_groups;  // group ids with no rows here
};

// Argmax predictions (ties to the lowest class id), accuracy per group.
GroupMetrics evaluate(const LinearHead& head, const EmbeddingDataset& ds);

// Index of the candidate with the best worst-group accuracy on val; ties
// go to the earliest candidate. Consumes group annotations for all val rows.
std::size_t model_select(const std::vector<LinearHead>& candidates, const EmbeddingDataset& val,
                         AnnotationLedger* ledger = nullptr);

// One experiment's results across seeds, plus annotation accounting and the
// resolved configuration, ready for serialization.
struct ExperimentReport {
    std::string method;
    std::vector<std::uint64_t> seeds;
    std::vector<GroupMetrics> per_seed;
    double wga_mean = 0.0;
    double wga_std = 0.0;
    std::size_t class_annotations = 0;
    std::size_t group_annotations = 0;
    std::vector<std::pair<std::string, std::string>> config;  // sorted key/value echo
};

enum class ReportFormat { Json, Csv };

// Fills wga_mean / wga_std from per_seed entries (sample std, 0 for one
// seed). Datasets without group labels fall back to average accuracy.
void finalize_report(ExperimentReport& report);

// Rounds to 6 significant digits; all serialized floats go through this.
double round6(double v);
std::string format6(double v);

std::string render_report(const ExperimentReport& report, ReportFormat format);
void emit_report(const ExperimentReport& report, const std::string& path, ReportFormat format);

struct TrainReport;

struct AblationRow {
    double fraction = 0.0;
    std::optional<double> wga;  // absent when this fraction failed
    std::string error;          // the failure, when wga is absent
};

// For each fraction: build the worst-group ablation subset of heldout,
// retrain a class-sampled head on it, evaluate on eval_ds. Worst groups are
// the ones where erm's final head scores lowest on heldout. Pool exhaustion
// becomes an error row; the sweep continues.
std::vector<AblationRow> run_wg_ablation(const TrainReport& erm, const EmbeddingDataset& heldout,
                                         const EmbeddingDataset& eval_ds,
                                         const std::vector<double>& fractions,
                                         const OptimConfig& config);

// The worst groups an ablation run varies: every group whose accuracy under
// `head` ties the minimum on ds.
std::vector<std::uint32_t> worst_groups_of(const LinearHead& head, const EmbeddingDataset& ds);

}  // namespace rebalance
