#include "rebalance/selfselect.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bytes.hpp"
#include "rebalance/evalreport.hpp"
#include "rebalance/rng.hpp"

namespace rebalance {

namespace {

constexpr std::uint64_t kRandomPickTag = 0x5e1f;

void check_scoring_shapes(const LinearHead& head, const EmbeddingDataset& ds) {
    if (head.dim() != ds.dim()) throw InvalidInput("head dimension does not match dataset");
    if (head.num_classes() != ds.num_classes) {
        throw InvalidInput("head class count does not match dataset");
    }
}

double divergence_of(const ProbDist& p, const ProbDist& q, Divergence divergence) {
    return divergence == Divergence::Kl ? kl_divergence(p, q) : total_variation(p, q);
}

}  // namespace

const char* to_string(SelfVariantKind k) {
    switch (k) {
        case SelfVariantKind::Random: return "random";
        case SelfVariantKind::Misclassification: return "misclassification";
        case SelfVariantKind::EsMisclassification: return "es-misclassification";
        case SelfVariantKind::DropoutDisagreement: return "dropout-disagreement";
        case SelfVariantKind::EsDisagreement: return "es-disagreement";
    }
    throw InvalidInput("unknown variant");
}

const char* to_string(Divergence d) {
    switch (d) {
        case Divergence::Kl: return "kl";
        case Divergence::Tvd: return "tvd";
    }
    throw InvalidInput("unknown divergence");
}

SelfVariantKind self_variant_from_string(const std::string& s) {
    if (s == "random") return SelfVariantKind::Random;
    if (s == "misclassification") return SelfVariantKind::Misclassification;
    if (s == "es-misclassification") return SelfVariantKind::EsMisclassification;
    if (s == "dropout-disagreement") return SelfVariantKind::DropoutDisagreement;
    if (s == "es-disagreement") return SelfVariantKind::EsDisagreement;
    throw InvalidInput("unknown variant '" + s + "'");
}

Divergence divergence_from_string(const std::string& s) {
    if (s == "kl") return Divergence::Kl;
    if (s == "tvd") return Divergence::Tvd;
    throw InvalidInput("unknown divergence '" + s + "'");
}

void SelfVariant::validate() const {
    if (n == 0) throw InvalidInput("variant n must be >= 1");
    if (dropout_passes == 0) throw InvalidInput("dropout_passes must be >= 1");
    const bool es =
        kind == SelfVariantKind::EsMisclassification || kind == SelfVariantKind::EsDisagreement;
    if (es) {
        if (!es_fraction.has_value()) {
            throw InvalidInput(std::string(to_string(kind)) + " requires es_fraction");
        }
        if (!(*es_fraction > 0.0 && *es_fraction < 1.0)) {
            throw InvalidInput("es_fraction must be in (0, 1)");
        }
    }
    if (kind == SelfVariantKind::DropoutDisagreement) {
        if (!dropout_p.has_value()) {
            throw InvalidInput("dropout-disagreement requires dropout_p");
        }
        if (!(*dropout_p > 0.0 && *dropout_p < 1.0)) {
            throw InvalidInput("dropout_p must be in (0, 1)");
        }
    }
}

std::vector<double> misclassification_cost(const LinearHead& head, const EmbeddingDataset& ds) {
    check_scoring_shapes(head, ds);
    if (ds.class_labels.size() != ds.size()) {
        throw MissingAnnotation("misclassification cost needs a class label per row");
    }
    std::vector<double> costs(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const Logits z = linear_forward(head, ds.features.row(i), ds.dim());
        costs[i] = cross_entropy(z, ds.class_labels[i]);
    }
    return costs;
}

std::vector<double> disagreement_cost(const LinearHead& f, const LinearHead& g,
                                      const EmbeddingDataset& ds, Divergence divergence) {
    check_scoring_shapes(f, ds);
    check_scoring_shapes(g, ds);
    std::vector<double> costs(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const double* x = ds.features.row(i);
        const ProbDist pf = softmax(linear_forward(f, x, ds.dim()));
        const ProbDist pg = softmax(linear_forward(g, x, ds.dim()));
        costs[i] = divergence_of(pf, pg, divergence);
    }
    return costs;
}

Logits dropout_forward(const LinearHead& head, const double* x, std::size_t dim, double p,
                       std::size_t passes, std::uint64_t seed) {
    if (!(p >= 0.0 && p < 1.0)) throw InvalidInput("dropout p must be in [0, 1)");
    if (passes == 0) throw InvalidInput("dropout passes must be >= 1");
    if (dim != head.dim()) throw InvalidInput("embedding dimension does not match head");

    Rng rng(seed);
    const double inv = 1.0 / (1.0 - p);
    Vec masked(dim);
    Logits avg;
    avg.values.assign(head.num_classes(), 0.0);
    for (std::size_t pass = 0; pass < passes; ++pass) {
        for (std::size_t j = 0; j < dim; ++j) {
            masked[j] = rng.next_unit() < p ? 0.0 : x[j] * inv;
        }
        const Logits z = linear_forward(head, masked.data(), dim);
        for (std::size_t c = 0; c < avg.values.size(); ++c) avg.values[c] += z.values[c];
    }
    for (double& v : avg.values) v /= static_cast<double>(passes);
    return avg;
}

Logits dropout_forward(const LinearHead& head, const Vec& x, double p, std::size_t passes,
                       std::uint64_t seed) {
    return dropout_forward(head, x.data(), x.size(), p, passes, seed);
}

SelectionResult select_top_n(const std::vector<double>& costs, std::size_t n) {
    if (n > costs.size()) {
        throw InvalidInput("cannot select " + std::to_string(n) + " of " +
                           std::to_string(costs.size()) + " scored rows");
    }
    for (double c : costs) {
        if (!std::isfinite(c)) throw InvalidInput("non-finite selection cost");
    }
    std::vector<std::size_t> order(costs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (costs[a] != costs[b]) return costs[a] > costs[b];
        return a < b;
    });
    SelectionResult out;
    out.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
    out.costs.reserve(n);
    for (std::size_t i : out.indices) out.costs.push_back(costs[i]);
    return out;
}

SelfResult run_self(const TrainReport& erm_report, const EmbeddingDataset& heldout,
                    const SelfVariant& variant, const OptimConfig& finetune_config,
                    AnnotationLedger* ledger) {
    variant.validate();
    heldout.validate();
    if (ledger != nullptr && ledger->capacity() != heldout.size()) {
        throw InvalidInput("ledger capacity does not match heldout size");
    }
    if (variant.n > heldout.size()) {
        throw InvalidInput("variant n exceeds heldout size");
    }

    const LinearHead& final_head = erm_report.final_head;
    SelectionResult selection;
    switch (variant.kind) {
        case SelfVariantKind::Random: {
            Rng rng = Rng::fork(finetune_config.seed, kRandomPickTag);
            selection.indices = rng.sample_without_replacement(heldout.size(), variant.n);
            selection.costs.assign(variant.n, 0.0);
            break;
        }
        case SelfVariantKind::Misclassification:
            selection = select_top_n(misclassification_cost(final_head, heldout), variant.n);
            break;
        case SelfVariantKind::EsMisclassification: {
            const LinearHead& es = erm_report.checkpoints.at(*variant.es_fraction);
            selection = select_top_n(misclassification_cost(es, heldout), variant.n);
            break;
        }
        case SelfVariantKind::DropoutDisagreement: {
            std::vector<double> costs(heldout.size());
            for (std::size_t i = 0; i < heldout.size(); ++i) {
                const double* x = heldout.features.row(i);
                const ProbDist pf = softmax(linear_forward(final_head, x, heldout.dim()));
                const Logits zg =
                    dropout_forward(final_head, x, heldout.dim(), *variant.dropout_p,
                                    variant.dropout_passes,
                                    fork_seed(finetune_config.seed, static_cast<std::uint64_t>(i)));
                costs[i] = divergence_of(pf, softmax(zg), variant.divergence);
            }
            selection = select_top_n(costs, variant.n);
            break;
        }
        case SelfVariantKind::EsDisagreement: {
            const LinearHead& es = erm_report.checkpoints.at(*variant.es_fraction);
            selection = select_top_n(
                disagreement_cost(final_head, es, heldout, variant.divergence), variant.n);
            break;
        }
    }

    const bool scores_labels = variant.kind == SelfVariantKind::Misclassification ||
                               variant.kind == SelfVariantKind::EsMisclassification;
    selection.annotations_requested = scores_labels ? heldout.size() : variant.n;
    if (ledger != nullptr) {
        if (scores_labels) {
            ledger->reveal_all(LabelKind::Class);
        } else {
            ledger->reveal(selection.indices, LabelKind::Class);
        }
    }

    if (heldout.has_spurious()) {
        // Diagnostic only: group labels are read for reporting, never trained on.
        const auto worst = worst_groups_of(final_head, heldout);
        std::size_t hits = 0;
        for (std::size_t i : selection.indices) {
            const std::uint32_t g = heldout.group_of(i);
            if (std::find(worst.begin(), worst.end(), g) != worst.end()) ++hits;
        }
        selection.worst_group_fraction =
            static_cast<double>(hits) / static_cast<double>(selection.indices.size());
    }

    SelfResult out;
    out.head = finetune_head(final_head, heldout.subset(selection.indices), finetune_config);
    out.selection = std::move(selection);
    return out;
}

void dump_selection(const SelectionResult& selection, const EmbeddingDataset& ds,
                    const std::string& path) {
    std::string out = ds.has_spurious() ? "index,cost,class,group\n" : "index,cost,class\n";
    for (std::size_t k = 0; k < selection.indices.size(); ++k) {
        const std::size_t i = selection.indices[k];
        if (i >= ds.size()) throw InvalidInput("selection index out of range");
        out += std::to_string(i);
        out += ',';
        out += format6(selection.costs[k]);
        out += ',';
        out += std::to_string(ds.class_labels[i]);
        if (ds.has_spurious()) {
            out += ',';
            out += std::to_string(ds.group_of(i));
        }
        out += '\n';
    }
    bytes::write_file(path, out);
}

}  // namespace rebalance
