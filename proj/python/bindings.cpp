#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rebalance/dataset.hpp"
#include "rebalance/evalreport.hpp"
#include "rebalance/mathcore.hpp"
#include "rebalance/samplers.hpp"
#include "rebalance/selfselect.hpp"
#include "rebalance/synthlab.hpp"
#include "rebalance/trainer.hpp"

namespace py = pybind11;
using namespace rebalance;

namespace {

LabelKind label_kind_from_string(const std::string& s) {
    if (s == "class") return LabelKind::Class;
    if (s == "group") return LabelKind::Group;
    throw InvalidInput("unknown label kind: " + s);
}

Matrix matrix_from_rows(const std::vector<std::vector<double>>& rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows[0].size();
    Matrix m(r, c);
    for (std::size_t i = 0; i < r; ++i) {
        if (rows[i].size() != c) throw InvalidInput("ragged feature rows");
        for (std::size_t j = 0; j < c; ++j) m.at(i, j) = rows[i][j];
    }
    return m;
}

std::vector<std::vector<double>> matrix_rows(const Matrix& m) {
    std::vector<std::vector<double>> rows(m.rows);
    for (std::size_t i = 0; i < m.rows; ++i) {
        rows[i].assign(m.row(i), m.row(i) + m.cols);
    }
    return rows;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "group-robust last-layer retraining core";

    py::register_exception<Error>(m, "Error");

    py::class_<OptimConfig>(m, "OptimConfig")
        .def(py::init<>())
        .def_property(
            "optimizer",
            [](const OptimConfig& c) { return std::string(to_string(c.optimizer)); },
            [](OptimConfig& c, const std::string& s) { c.optimizer = optimizer_from_string(s); })
        .def_readwrite("lr0", &OptimConfig::lr0)
        .def_property(
            "schedule",
            [](const OptimConfig& c) { return std::string(to_string(c.schedule)); },
            [](OptimConfig& c, const std::string& s) { c.schedule = schedule_from_string(s); })
        .def_readwrite("weight_decay", &OptimConfig::weight_decay)
        .def_readwrite("total_steps", &OptimConfig::total_steps)
        .def_readwrite("batch_size", &OptimConfig::batch_size)
        .def_readwrite("seed", &OptimConfig::seed)
        .def("validate", &OptimConfig::validate);

    py::class_<LinearHead>(m, "LinearHead")
        .def(py::init([](const std::vector<std::vector<double>>& weights, Vec bias) {
                 LinearHead h;
                 h.weights = matrix_from_rows(weights);
                 h.bias = std::move(bias);
                 if (h.bias.size() != h.weights.rows) throw InvalidInput("bias/weights mismatch");
                 return h;
             }),
             py::arg("weights"), py::arg("bias"))
        .def_static("zeros", &LinearHead::zeros, py::arg("num_classes"), py::arg("dim"))
        .def_property_readonly("num_classes", &LinearHead::num_classes)
        .def_property_readonly("dim", &LinearHead::dim)
        .def_property_readonly("weights",
                               [](const LinearHead& h) { return matrix_rows(h.weights); })
        .def_property_readonly("bias", [](const LinearHead& h) { return h.bias; })
        .def("__eq__", [](const LinearHead& a, const LinearHead& b) { return a == b; },
             py::is_operator());

    py::class_<EmbeddingDataset>(m, "EmbeddingDataset")
        .def(py::init([](const std::vector<std::vector<double>>& features,
                         std::vector<std::uint32_t> class_labels, std::uint32_t num_classes,
                         std::vector<std::uint32_t> spurious_labels, std::uint32_t num_spurious) {
                 EmbeddingDataset ds;
                 ds.features = matrix_from_rows(features);
                 ds.class_labels = std::move(class_labels);
                 ds.spurious_labels = std::move(spurious_labels);
                 ds.num_classes = num_classes;
                 ds.num_spurious = num_spurious;
                 ds.validate();
                 return ds;
             }),
             py::arg("features"), py::arg("class_labels"), py::arg("num_classes"),
             py::arg("spurious_labels") = std::vector<std::uint32_t>{},
             py::arg("num_spurious") = 0)
        .def_property_readonly("size", &EmbeddingDataset::size)
        .def_property_readonly("dim", &EmbeddingDataset::dim)
        .def_readonly("num_classes", &EmbeddingDataset::num_classes)
        .def_readonly("num_spurious", &EmbeddingDataset::num_spurious)
        .def_property_readonly("has_spurious", &EmbeddingDataset::has_spurious)
        .def_property_readonly("num_groups", &EmbeddingDataset::num_groups)
        .def_readonly("class_labels", &EmbeddingDataset::class_labels)
        .def_readonly("spurious_labels", &EmbeddingDataset::spurious_labels)
        .def_property_readonly("features",
                               [](const EmbeddingDataset& ds) { return matrix_rows(ds.features); })
        .def("group_of", &EmbeddingDataset::group_of, py::arg("row"))
        .def("subset", &EmbeddingDataset::subset, py::arg("rows"))
        .def("validate", &EmbeddingDataset::validate);

    py::class_<AnnotationLedger>(m, "AnnotationLedger")
        .def(py::init<std::size_t>(), py::arg("dataset_size"))
        .def("reveal",
             [](AnnotationLedger& l, const std::vector<std::size_t>& rows, const std::string& k) {
                 l.reveal(rows, label_kind_from_string(k));
             },
             py::arg("rows"), py::arg("kind"))
        .def("reveal_all",
             [](AnnotationLedger& l, const std::string& k) {
                 l.reveal_all(label_kind_from_string(k));
             },
             py::arg("kind"))
        .def_property_readonly("class_labels_revealed", &AnnotationLedger::class_labels_revealed)
        .def_property_readonly("group_labels_revealed", &AnnotationLedger::group_labels_revealed)
        .def_property_readonly("capacity", &AnnotationLedger::capacity);

    py::class_<GroupAccuracyPoint>(m, "GroupAccuracyPoint")
        .def_readonly("fraction", &GroupAccuracyPoint::fraction)
        .def_readonly("accuracy", &GroupAccuracyPoint::accuracy);

    py::class_<TrainReport>(m, "TrainReport")
        .def_readonly("final_head", &TrainReport::final_head)
        .def_readonly("loss_trace", &TrainReport::loss_trace)
        .def_readonly("val_accuracy_trace", &TrainReport::val_accuracy_trace)
        .def_property_readonly("checkpoint_fractions",
                               [](const TrainReport& r) {
                                   std::vector<double> out;
                                   for (const auto& [f, _] : r.checkpoints.by_fraction) {
                                       out.push_back(f);
                                   }
                                   return out;
                               })
        .def("checkpoint",
             [](const TrainReport& r, double fraction) { return r.checkpoints.at(fraction); },
             py::arg("fraction"));

    py::class_<FreeLunchResult>(m, "FreeLunchResult")
        .def_readonly("erm_head", &FreeLunchResult::erm_head)
        .def_readonly("retrained_head", &FreeLunchResult::retrained_head)
        .def_readonly("erm_split", &FreeLunchResult::erm_split)
        .def_readonly("retrain_split", &FreeLunchResult::retrain_split);

    py::class_<GroupMetrics>(m, "GroupMetrics")
        .def_readonly("per_group_accuracy", &GroupMetrics::per_group_accuracy)
        .def_readonly("counts", &GroupMetrics::counts)
        .def_readonly("worst_group_accuracy", &GroupMetrics::worst_group_accuracy)
        .def_readonly("average_accuracy", &GroupMetrics::average_accuracy)
        .def_readonly("empty_groups", &GroupMetrics::empty_groups);

    py::class_<SelfVariant>(m, "SelfVariant")
        .def(py::init<>())
        .def_property(
            "kind", [](const SelfVariant& v) { return std::string(to_string(v.kind)); },
            [](SelfVariant& v, const std::string& s) { v.kind = self_variant_from_string(s); })
        .def_readwrite("n", &SelfVariant::n)
        .def_readwrite("es_fraction", &SelfVariant::es_fraction)
        .def_readwrite("dropout_p", &SelfVariant::dropout_p)
        .def_readwrite("dropout_passes", &SelfVariant::dropout_passes)
        .def_property(
            "divergence",
            [](const SelfVariant& v) { return std::string(to_string(v.divergence)); },
            [](SelfVariant& v, const std::string& s) { v.divergence = divergence_from_string(s); })
        .def("validate", &SelfVariant::validate);

    py::class_<SelectionResult>(m, "SelectionResult")
        .def_readonly("indices", &SelectionResult::indices)
        .def_readonly("costs", &SelectionResult::costs)
        .def_readonly("worst_group_fraction", &SelectionResult::worst_group_fraction)
        .def_readonly("annotations_requested", &SelectionResult::annotations_requested);

    py::class_<SelfResult>(m, "SelfResult")
        .def_readonly("head", &SelfResult::head)
        .def_readonly("selection", &SelfResult::selection);

    py::class_<SyntheticSpec>(m, "SyntheticSpec")
        .def(py::init<>())
        .def_readwrite("n", &SyntheticSpec::n)
        .def_readwrite("d", &SyntheticSpec::d)
        .def_readwrite("minority_rate", &SyntheticSpec::minority_rate)
        .def_readwrite("core_magnitude", &SyntheticSpec::core_magnitude)
        .def_readwrite("core_noise", &SyntheticSpec::core_noise)
        .def_readwrite("spurious_magnitude", &SyntheticSpec::spurious_magnitude)
        .def_readwrite("junk_scale", &SyntheticSpec::junk_scale)
        .def_readwrite("positive_rate", &SyntheticSpec::positive_rate)
        .def_readwrite("seed", &SyntheticSpec::seed)
        .def("validate", &SyntheticSpec::validate);

    py::class_<TheoremInstance>(m, "TheoremInstance")
        .def(py::init<>())
        .def_readwrite("alpha_erm", &TheoremInstance::alpha_erm)
        .def_readwrite("beta_erm", &TheoremInstance::beta_erm)
        .def_readwrite("alpha_reg", &TheoremInstance::alpha_reg)
        .def_readwrite("beta_reg", &TheoremInstance::beta_reg)
        .def_readwrite("b", &TheoremInstance::b)
        .def_readwrite("core_mag", &TheoremInstance::core_mag)
        .def_readwrite("spurious_mag", &TheoremInstance::spurious_mag)
        .def_readwrite("junk_sum", &TheoremInstance::junk_sum)
        .def("validate", &TheoremInstance::validate);

    py::class_<TheoremLogits>(m, "TheoremLogits")
        .def_readonly("erm_minority", &TheoremLogits::erm_minority)
        .def_readonly("reg_minority", &TheoremLogits::reg_minority)
        .def_readonly("erm_majority", &TheoremLogits::erm_majority)
        .def_readonly("reg_majority", &TheoremLogits::reg_majority);

    py::class_<TheoremCheck>(m, "TheoremCheck")
        .def_readonly("trials", &TheoremCheck::trials)
        .def_readonly("max_abs_deviation", &TheoremCheck::max_abs_deviation)
        .def_readonly("min_gap", &TheoremCheck::min_gap);

    py::class_<AblationRow>(m, "AblationRow")
        .def_readonly("fraction", &AblationRow::fraction)
        .def_readonly("wga", &AblationRow::wga)
        .def_readonly("error", &AblationRow::error);

    m.def("softmax", [](Vec z) { return softmax(Logits{std::move(z)}).probs; }, py::arg("logits"));
    m.def("cross_entropy",
          [](Vec z, std::size_t label) { return cross_entropy(Logits{std::move(z)}, label); },
          py::arg("logits"), py::arg("label"));
    m.def("kl_divergence",
          [](Vec p, Vec q) { return kl_divergence(ProbDist{std::move(p)}, ProbDist{std::move(q)}); },
          py::arg("p"), py::arg("q"));
    m.def("total_variation",
          [](Vec p, Vec q) {
              return total_variation(ProbDist{std::move(p)}, ProbDist{std::move(q)});
          },
          py::arg("p"), py::arg("q"));
    m.def("linear_forward",
          [](const LinearHead& head, const Vec& x) { return linear_forward(head, x).values; },
          py::arg("head"), py::arg("x"));

    m.def("load_embeddings", &load_embeddings, py::arg("path"));
    m.def("save_embeddings", &save_embeddings, py::arg("dataset"), py::arg("path"));
    m.def("split",
          [](const EmbeddingDataset& ds, std::vector<double> fractions, std::uint64_t seed) {
              SplitSpec spec;
              spec.fractions = std::move(fractions);
              spec.seed = seed;
              return split(ds, spec);
          },
          py::arg("dataset"), py::arg("fractions"), py::arg("seed") = 0);
    m.def("group_counts", &group_counts, py::arg("dataset"));
    m.def("balanced_subset",
          [](const EmbeddingDataset& ds, const std::string& by, std::uint64_t seed) {
              return balanced_subset(ds, label_kind_from_string(by), seed);
          },
          py::arg("dataset"), py::arg("by"), py::arg("seed") = 0);
    m.def("ablation_subset",
          [](const EmbeddingDataset& ds, std::vector<std::uint32_t> worst_groups, double fraction,
             std::uint64_t seed) {
              AblationSpec spec;
              spec.worst_groups = std::move(worst_groups);
              spec.fraction = fraction;
              spec.seed = seed;
              return ablation_subset(ds, spec);
          },
          py::arg("dataset"), py::arg("worst_groups"), py::arg("fraction"), py::arg("seed") = 0);

    m.def("train_head",
          [](const EmbeddingDataset& ds, const std::string& balance, const OptimConfig& config,
             const LinearHead* init, const std::vector<double>& checkpoints,
             const EmbeddingDataset* val) {
              return train_head(ds, balance_mode_from_string(balance), config, init, checkpoints,
                                val);
          },
          py::arg("dataset"), py::arg("balance"), py::arg("config"),
          py::arg("init") = nullptr, py::arg("checkpoints") = std::vector<double>{},
          py::arg("val") = nullptr);
    m.def("dfr", &dfr, py::arg("heldout"), py::arg("config"), py::arg("ledger") = nullptr);
    m.def("cb_last_layer_retrain", &cb_last_layer_retrain, py::arg("heldout"), py::arg("config"),
          py::arg("ledger") = nullptr);
    m.def("finetune_head", &finetune_head, py::arg("init"), py::arg("reweight"),
          py::arg("config"));
    m.def("free_lunch", &free_lunch, py::arg("dataset"), py::arg("erm_config"),
          py::arg("retrain_config"), py::arg("holdout_fraction") = 0.05);
    m.def("epochs_to_steps", &epochs_to_steps, py::arg("epochs"), py::arg("n"),
          py::arg("batch_size"));
    m.def("save_head", &save_head, py::arg("head"), py::arg("path"));
    m.def("load_head", &load_head, py::arg("path"));

    m.def("evaluate", &evaluate, py::arg("head"), py::arg("dataset"));
    m.def("model_select", &model_select, py::arg("candidates"), py::arg("val"),
          py::arg("ledger") = nullptr);
    m.def("worst_groups_of", &worst_groups_of, py::arg("head"), py::arg("dataset"));
    m.def("run_wg_ablation", &run_wg_ablation, py::arg("erm_report"), py::arg("heldout"),
          py::arg("eval_dataset"), py::arg("fractions"), py::arg("config"));

    m.def("misclassification_cost", &misclassification_cost, py::arg("head"), py::arg("dataset"));
    m.def("disagreement_cost",
          [](const LinearHead& f, const LinearHead& g, const EmbeddingDataset& ds,
             const std::string& divergence) {
              return disagreement_cost(f, g, ds, divergence_from_string(divergence));
          },
          py::arg("f"), py::arg("g"), py::arg("dataset"), py::arg("divergence") = "kl");
    m.def("dropout_forward",
          [](const LinearHead& head, const Vec& x, double p, std::size_t passes,
             std::uint64_t seed) { return dropout_forward(head, x, p, passes, seed).values; },
          py::arg("head"), py::arg("x"), py::arg("p"), py::arg("passes") = 1,
          py::arg("seed") = 0);
    m.def("select_top_n", &select_top_n, py::arg("costs"), py::arg("n"));
    m.def("run_self", &run_self, py::arg("erm_report"), py::arg("heldout"), py::arg("variant"),
          py::arg("finetune_config"), py::arg("ledger") = nullptr);
    m.def("dump_selection", &dump_selection, py::arg("selection"), py::arg("dataset"),
          py::arg("path"));

    m.def("generate_synthetic", &generate_synthetic, py::arg("spec"));
    m.def("theorem_logits", &theorem_logits, py::arg("instance"));
    m.def("tvd_gap_formula", &tvd_gap_formula, py::arg("instance"));
    m.def("tvd_gap_direct", &tvd_gap_direct, py::arg("instance"));
    m.def("verify_theorem", &verify_theorem, py::arg("trials") = 1000, py::arg("seed") = 0);
}
