#include "rebalance/evalreport.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "rebalance/trainer.hpp"

namespace rebalance {

namespace {

std::size_t predict(const LinearHead& head, const EmbeddingDataset& ds, std::size_t row) {
    const Logits z = linear_forward(head, ds.features.row(row), ds.dim());
    std::size_t best = 0;
    for (std::size_t c = 1; c < z.values.size(); ++c) {
        if (z.values[c] > z.values[best]) best = c;  // ties keep the lowest class
    }
    return best;
}

}  // namespace

GroupMetrics evaluate(const LinearHead& head, const EmbeddingDataset& ds) {
    if (ds.size() == 0) throw InvalidInput("evaluate: empty dataset");
    GroupMetrics out;
    std::size_t correct_total = 0;
    std::map<std::uint32_t, std::size_t> correct;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const bool hit = predict(head, ds, i) == ds.class_labels[i];
        correct_total += hit ? 1 : 0;
        if (ds.has_spurious()) {
            const std::uint32_t g = ds.group_of(i);
            out.counts[g] += 1;
            correct[g] += hit ? 1 : 0;
        }
    }
    out.average_accuracy =
        static_cast<double>(correct_total) / static_cast<double>(ds.size());
    if (ds.has_spurious()) {
        double worst = 2.0;
        for (const auto& [g, n] : out.counts) {
            const double acc = static_cast<double>(correct[g]) / static_cast<double>(n);
            out.per_group_accuracy[g] = acc;
            worst = std::min(worst, acc);
        }
        out.worst_group_accuracy = worst;
        for (std::uint32_t g = 0; g < ds.num_groups(); ++g) {
            if (out.counts.count(g) == 0) out.empty_groups.push_back(g);
        }
    }
    return out;
}

std::size_t model_select(const std::vector<LinearHead>& candidates, const EmbeddingDataset& val,
                         AnnotationLedger* ledger) {
    if (candidates.empty()) throw InvalidInput("model_select: no candidates");
    if (!val.has_spurious()) throw MissingAnnotation("model_select: val has no spurious labels");
    std::size_t best = 0;
    double best_wga = -1.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const double wga = evaluate(candidates[i], val).worst_group_accuracy.value();
        if (wga > best_wga) {  // ties keep the earliest candidate
            best_wga = wga;
            best = i;
        }
    }
    if (ledger != nullptr) {
        // Selecting on worst-group accuracy reads every row's label and group.
        ledger->reveal_all(LabelKind::Class);
        ledger->reveal_all(LabelKind::Group);
    }
    return best;
}

void finalize_report(ExperimentReport& report) {
    const std::size_t n = report.per_seed.size();
    if (n == 0) {
        report.wga_mean = 0.0;
        report.wga_std = 0.0;
        return;
    }
    std::vector<double> wgas;
    wgas.reserve(n);
    for (const auto& m : report.per_seed) {
        wgas.push_back(m.worst_group_accuracy.value_or(m.average_accuracy));
    }
    double mean = 0.0;
    for (double w : wgas) mean += w;
    mean /= static_cast<double>(n);
    double var = 0.0;
    if (n > 1) {
        for (double w : wgas) var += (w - mean) * (w - mean);
        var /= static_cast<double>(n - 1);
    }
    report.wga_mean = mean;
    report.wga_std = std::sqrt(var);
}

std::string format6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

double round6(double v) {
    return std::strtod(format6(v).c_str(), nullptr);
}

namespace {

nlohmann::ordered_json metrics_json(const GroupMetrics& m) {
    nlohmann::ordered_json j;
    j["average_accuracy"] = round6(m.average_accuracy);
    if (m.worst_group_accuracy.has_value()) {
        j["worst_group_accuracy"] = round6(*m.worst_group_accuracy);
    } else {
        j["worst_group_accuracy"] = nullptr;
    }
    nlohmann::ordered_json acc = nlohmann::ordered_json::object();
    nlohmann::ordered_json cnt = nlohmann::ordered_json::object();
    for (const auto& [g, a] : m.per_group_accuracy) acc[std::to_string(g)] = round6(a);
    for (const auto& [g, n] : m.counts) cnt[std::to_string(g)] = n;
    j["per_group_accuracy"] = std::move(acc);
    j["group_counts"] = std::move(cnt);
    j["empty_groups"] = m.empty_groups;
    return j;
}

}  // namespace

std::string render_report(const ExperimentReport& report, ReportFormat format) {
    if (format == ReportFormat::Json) {
        nlohmann::ordered_json j;
        j["method"] = report.method;
        j["seeds"] = report.seeds;
        nlohmann::ordered_json runs = nlohmann::ordered_json::array();
        for (std::size_t i = 0; i < report.per_seed.size(); ++i) {
            nlohmann::ordered_json r = metrics_json(report.per_seed[i]);
            r["seed"] = i < report.seeds.size() ? report.seeds[i] : 0;
            runs.push_back(std::move(r));
        }
        j["runs"] = std::move(runs);
        j["wga_mean"] = round6(report.wga_mean);
        j["wga_std"] = round6(report.wga_std);
        j["annotations"] = {{"class", report.class_annotations},
                            {"group", report.group_annotations}};
        nlohmann::ordered_json cfg = nlohmann::ordered_json::object();
        for (const auto& [k, v] : report.config) cfg[k] = v;
        j["config"] = std::move(cfg);
        return j.dump(2) + "\n";
    }

    std::ostringstream out;
    out << "method,seed,group,accuracy,wga,avg\n";
    for (std::size_t i = 0; i < report.per_seed.size(); ++i) {
        const auto& m = report.per_seed[i];
        const std::uint64_t seed = i < report.seeds.size() ? report.seeds[i] : 0;
        const std::string wga =
            format6(m.worst_group_accuracy.value_or(m.average_accuracy));
        const std::string avg = format6(m.average_accuracy);
        if (m.per_group_accuracy.empty()) {
            out << report.method << ',' << seed << ",all," << avg << ',' << wga << ',' << avg
                << '\n';
        } else {
            for (const auto& [g, a] : m.per_group_accuracy) {
                out << report.method << ',' << seed << ',' << g << ',' << format6(a) << ','
                    << wga << ',' << avg << '\n';
            }
        }
    }
    return out.str();
}

void emit_report(const ExperimentReport& report, const std::string& path, ReportFormat format) {
    const std::string body = render_report(report, format);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!f) throw IoError("write failed on " + path);
}

std::vector<std::uint32_t> worst_groups_of(const LinearHead& head, const EmbeddingDataset& ds) {
    const GroupMetrics m = evaluate(head, ds);
    if (!m.worst_group_accuracy.has_value()) {
        throw MissingAnnotation("worst_groups_of: dataset has no spurious labels");
    }
    std::vector<std::uint32_t> out;
    for (const auto& [g, a] : m.per_group_accuracy) {
        if (a <= *m.worst_group_accuracy + 1e-12) out.push_back(g);
    }
    return out;
}

std::vector<AblationRow> run_wg_ablation(const TrainReport& erm, const EmbeddingDataset& heldout,
                                         const EmbeddingDataset& eval_ds,
                                         const std::vector<double>& fractions,
                                         const OptimConfig& config) {
    if (!heldout.has_spurious()) {
        throw MissingAnnotation("run_wg_ablation: heldout has no spurious labels");
    }
    if (!eval_ds.has_spurious()) {
        throw MissingAnnotation("run_wg_ablation: eval set has no spurious labels");
    }
    const auto worst = worst_groups_of(erm.final_head, heldout);
    std::vector<AblationRow> rows;
    rows.reserve(fractions.size());
    for (double f : fractions) {
        AblationRow row;
        row.fraction = f;
        try {
            AblationSpec spec;
            spec.worst_groups = worst;
            spec.fraction = f;
            spec.seed = config.seed;
            const auto subset_rows = ablation_subset(heldout, spec);
            const EmbeddingDataset sub = heldout.subset(subset_rows);
            const TrainReport run = train_head(sub, BalanceMode::ClassSampling, config);
            row.wga = evaluate(run.final_head, eval_ds).worst_group_accuracy.value();
        } catch (const Error& e) {
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace rebalance
