#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rebalance/dataset.hpp"
#include "rebalance/mathcore.hpp"
#include "rebalance/trainer.hpp"

namespace rebalance {

enum class SelfVariantKind {
    Random,
    Misclassification,
    EsMisclassification,
    DropoutDisagreement,
    EsDisagreement,
};

enum class Divergence { Kl, Tvd };

const char* to_string(SelfVariantKind k);
const char* to_string(Divergence d);
SelfVariantKind self_variant_from_string(const std::string& s);
Divergence divergence_from_string(const std::string& s);

// Which points to reweight on and how to score them. The es variants need
// es_fraction (a stored checkpoint); the dropout variant needs dropout_p.
struct SelfVariant {
    SelfVariantKind kind = SelfVariantKind::EsDisagreement;
    std::size_t n = 20;
    std::optional<double> es_fraction;  // in (0,1)
    std::optional<double> dropout_p;    // in (0,1)
    std::size_t dropout_passes = 1;
    Divergence divergence = Divergence::Kl;

    void validate() const;  // throws InvalidInput on bad or missing fields
};

struct SelectionResult {
    std::vector<std::size_t> indices;  // distinct, cost-descending (ties: lower index)
    std::vector<double> costs;         // aligned with indices, non-increasing
    std::optional<double> worst_group_fraction;  // share of selected rows in the worst groups
    std::size_t annotations_requested = 0;       // class labels revealed by this run
};

struct SelfResult {
    LinearHead head;
    SelectionResult selection;
};

// cost_i = cross_entropy(head(x_i), y_i). Reads every class label.
std::vector<double> misclassification_cost(const LinearHead& head, const EmbeddingDataset& ds);

// cost_i = divergence(softmax(f(x_i)), softmax(g(x_i))). Label-free.
std::vector<double> disagreement_cost(const LinearHead& f, const LinearHead& g,
                                      const EmbeddingDataset& ds, Divergence divergence);

// Inverted dropout on the embedding: each coordinate dropped independently
// with probability p, survivors scaled by 1/(1-p); logits averaged over
// passes. p = 0 reproduces linear_forward bit for bit.
Logits dropout_forward(const LinearHead& head, const double* x, std::size_t dim, double p,
                       std::size_t passes, std::uint64_t seed);
Logits dropout_forward(const LinearHead& head, const Vec& x, double p, std::size_t passes,
                       std::uint64_t seed);

// Indices of the n largest costs, ties to the lower index. Because the
// selection objective is additive, this is the exact argmax over subsets.
SelectionResult select_top_n(const std::vector<double>& costs, std::size_t n);

// The full pipeline: score heldout per the variant, pick the top n, reveal
// the class labels the variant actually needs (selected rows only for
// random/disagreement, every scored row for misclassification), then
// finetune the ERM head on the selection with class-sampling balance.
// worst_group_fraction is filled when heldout carries group labels; those
// labels are never consumed. A selection missing a class is an error.
SelfResult run_self(const TrainReport& erm_report, const EmbeddingDataset& heldout,
                    const SelfVariant& variant, const OptimConfig& finetune_config,
                    AnnotationLedger* ledger = nullptr);

// Audit dump: CSV `index,cost,class[,group]` over the selected rows.
void dump_selection(const SelectionResult& selection, const EmbeddingDataset& ds,
                    const std::string& path);

}  // namespace rebalance
