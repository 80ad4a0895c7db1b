#include "rebalance/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "bytes.hpp"
#include "rebalance/evalreport.hpp"

namespace rebalance {

namespace {

using namespace rebalance::bytes;

constexpr std::size_t kGhedHeaderSize = 20;  // magic + version + classes + d

// Map requested snapshot fractions onto step indices ("after k steps").
std::map<std::size_t, std::vector<double>> snapshot_steps(const std::vector<double>& fractions,
                                                          std::size_t total_steps) {
    std::map<std::size_t, std::vector<double>> at;
    for (double f : fractions) {
        if (!(f > 0.0 && f <= 1.0)) {
            throw InvalidInput("checkpoint fraction must be in (0, 1], got " + std::to_string(f));
        }
        const auto step = static_cast<std::size_t>(
            std::llround(f * static_cast<double>(total_steps)));
        at[step].push_back(f);
    }
    at[total_steps].push_back(1.0);
    return at;
}

}  // namespace

const LinearHead& CheckpointSet::at(double fraction) const {
    const auto it = by_fraction.find(fraction);
    if (it == by_fraction.end()) {
        throw InvalidInput("no checkpoint at fraction " + std::to_string(fraction));
    }
    return it->second;
}

TrainReport train_head(const EmbeddingDataset& ds, BalanceMode mode, const OptimConfig& config,
                       const LinearHead* init, const std::vector<double>& checkpoint_fractions,
                       const EmbeddingDataset* val) {
    config.validate();
    ds.validate();
    if (init != nullptr &&
        (init->num_classes() != ds.num_classes || init->dim() != ds.dim())) {
        throw InvalidInput("init head shape does not match dataset");
    }

    TrainReport report;
    LinearHead head = init != nullptr ? *init : LinearHead::zeros(ds.num_classes, ds.dim());
    const auto snapshots = snapshot_steps(checkpoint_fractions, config.total_steps);

    auto take_snapshot = [&](const std::vector<double>& fractions) {
        for (double f : fractions) {
            report.checkpoints.by_fraction[f] = head;
            if (val != nullptr) {
                GroupAccuracyPoint point;
                point.fraction = f;
                point.accuracy = evaluate(head, *val).per_group_accuracy;
                report.val_accuracy_trace.push_back(std::move(point));
            }
        }
    };

    if (config.total_steps == 0) {
        // No optimization requested: every snapshot is the starting head.
        for (const auto& [step, fractions] : snapshots) take_snapshot(fractions);
        report.final_head = std::move(head);
        return report;
    }

    BatchStream stream = balanced_batch_stream(ds, mode, config.batch_size, config.seed);
    MomentState weight_state, bias_state;
    const std::size_t d = ds.dim();
    const std::size_t k = ds.num_classes;
    Matrix d_weights(k, d);
    Vec d_bias(k, 0.0);

    if (const auto it = snapshots.find(0); it != snapshots.end()) take_snapshot(it->second);

    report.loss_trace.reserve(config.total_steps);
    for (std::size_t step = 0; step < config.total_steps; ++step) {
        const auto batch = stream.next();
        std::fill(d_weights.data.begin(), d_weights.data.end(), 0.0);
        std::fill(d_bias.begin(), d_bias.end(), 0.0);
        double loss = 0.0;
        for (std::size_t row : batch) {
            const double* x = ds.features.row(row);
            const Logits z = linear_forward(head, x, d);
            for (double v : z.values) {
                if (!std::isfinite(v)) {
                    throw DivergenceError("non-finite training loss", step);
                }
            }
            loss += cross_entropy(z, ds.class_labels[row]);
            const ProbDist p = softmax(z);
            for (std::size_t c = 0; c < k; ++c) {
                const double g = p.probs[c] - (c == ds.class_labels[row] ? 1.0 : 0.0);
                d_bias[c] += g;
                double* wrow = d_weights.row(c);
                for (std::size_t j = 0; j < d; ++j) wrow[j] += g * x[j];
            }
        }
        const double scale = 1.0 / static_cast<double>(batch.size());
        loss *= scale;
        for (double& g : d_weights.data) g *= scale;
        for (double& g : d_bias) g *= scale;
        if (!std::isfinite(loss)) {
            throw DivergenceError("non-finite training loss", step);
        }

        const double lr = lr_at(config, step);
        if (config.optimizer == OptimizerKind::Sgd) {
            head.weights.data =
                sgd_step(head.weights.data, d_weights.data, lr, config.weight_decay);
            head.bias = sgd_step(head.bias, d_bias, lr, config.weight_decay);
        } else {
            auto w = adaptive_step(weight_state, head.weights.data, d_weights.data, lr,
                                   config.weight_decay);
            head.weights.data = std::move(w.param);
            weight_state = std::move(w.state);
            auto b = adaptive_step(bias_state, head.bias, d_bias, lr, config.weight_decay);
            head.bias = std::move(b.param);
            bias_state = std::move(b.state);
        }
        for (double v : head.weights.data) {
            if (!std::isfinite(v)) throw DivergenceError("non-finite weights", step);
        }
        for (double v : head.bias) {
            if (!std::isfinite(v)) throw DivergenceError("non-finite weights", step);
        }
        report.loss_trace.push_back(loss);

        if (const auto it = snapshots.find(step + 1); it != snapshots.end()) {
            take_snapshot(it->second);
        }
    }

    report.final_head = report.checkpoints.at(1.0);
    return report;
}

LinearHead dfr(const EmbeddingDataset& heldout, const OptimConfig& config,
               AnnotationLedger* ledger) {
    if (!heldout.has_spurious()) {
        throw MissingAnnotation("group-balanced retraining needs spurious labels");
    }
    if (ledger != nullptr) {
        if (ledger->capacity() != heldout.size()) {
            throw InvalidInput("ledger capacity does not match heldout size");
        }
        ledger->reveal_all(LabelKind::Class);
        ledger->reveal_all(LabelKind::Group);
    }
    return train_head(heldout, BalanceMode::GroupSampling, config).final_head;
}

LinearHead cb_last_layer_retrain(const EmbeddingDataset& heldout, const OptimConfig& config,
                                 AnnotationLedger* ledger) {
    if (ledger != nullptr) {
        if (ledger->capacity() != heldout.size()) {
            throw InvalidInput("ledger capacity does not match heldout size");
        }
        ledger->reveal_all(LabelKind::Class);
    }
    return train_head(heldout, BalanceMode::ClassSampling, config).final_head;
}

LinearHead finetune_head(const LinearHead& init, const EmbeddingDataset& reweight,
                         const OptimConfig& config) {
    return train_head(reweight, BalanceMode::ClassSampling, config, &init).final_head;
}

FreeLunchResult free_lunch(const EmbeddingDataset& ds, const OptimConfig& erm_config,
                           const OptimConfig& retrain_config, double holdout_fraction) {
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
        throw InvalidInput("holdout fraction must be in (0, 1)");
    }
    SplitSpec spec;
    spec.fractions = {1.0 - holdout_fraction, holdout_fraction};
    spec.seed = erm_config.seed;
    auto parts = split(ds, spec);

    FreeLunchResult out;
    out.erm_head = train_head(parts[0], BalanceMode::ClassSampling, erm_config).final_head;
    out.retrained_head =
        train_head(parts[1], BalanceMode::ClassSampling, retrain_config).final_head;
    out.erm_split = std::move(parts[0]);
    out.retrain_split = std::move(parts[1]);
    return out;
}

std::size_t epochs_to_steps(std::size_t epochs, std::size_t n, std::size_t batch_size) {
    if (n == 0) throw InvalidInput("epochs_to_steps: n must be >= 1");
    if (batch_size == 0) throw InvalidInput("epochs_to_steps: batch_size must be >= 1");
    return (n + batch_size - 1) / batch_size * epochs;
}

void save_head(const LinearHead& head, const std::string& path) {
    if (head.num_classes() == 0 || head.dim() == 0) {
        throw InvalidInput("save_head: head must have at least one class and one dimension");
    }
    if (head.bias.size() != head.num_classes()) {
        throw InvalidInput("save_head: bias size mismatch");
    }
    std::string out;
    out.reserve(kGhedHeaderSize + 8 * (head.weights.data.size() + head.bias.size()));
    out.append("GHED");
    put_u32(out, 1);
    put_u32(out, static_cast<std::uint32_t>(head.num_classes()));
    put_u64(out, head.dim());
    for (double v : head.weights.data) put_f64(out, v);
    for (double v : head.bias) put_f64(out, v);
    write_file(path, out);
}

LinearHead load_head(const std::string& path) {
    const auto data = read_file(path);
    if (data.size() < kGhedHeaderSize) {
        throw ParseError("truncated header: need " + std::to_string(kGhedHeaderSize) +
                             " bytes, have " + std::to_string(data.size()),
                         data.size());
    }
    if (std::memcmp(data.data(), "GHED", 4) != 0) {
        throw ParseError("magic mismatch: expected GHED", 0);
    }
    const std::uint32_t version = get_u32(data.data() + 4);
    if (version != 1) throw ParseError("unsupported version " + std::to_string(version), 4);
    const std::uint32_t classes = get_u32(data.data() + 8);
    const std::uint64_t d = get_u64(data.data() + 12);
    if (classes == 0) throw ParseError("num_classes must be >= 1", 8);
    if (d == 0) throw ParseError("d must be >= 1", 12);
    const unsigned __int128 cells = static_cast<unsigned __int128>(classes) * d;
    if (cells > (static_cast<unsigned __int128>(1) << 55)) {
        throw ParseError("classes*d overflows addressable storage", 12);
    }
    const std::size_t expected =
        kGhedHeaderSize + 8 * static_cast<std::size_t>(cells) + 8 * classes;
    if (data.size() < expected) {
        throw ParseError("truncated payload: expected " + std::to_string(expected) +
                             " bytes, have " + std::to_string(data.size()),
                         data.size());
    }
    if (data.size() > expected) {
        throw ParseError("trailing bytes after declared payload", expected);
    }

    LinearHead head;
    head.weights = Matrix(classes, static_cast<std::size_t>(d));
    head.bias.assign(classes, 0.0);
    std::size_t off = kGhedHeaderSize;
    for (std::size_t i = 0; i < head.weights.data.size(); ++i, off += 8) {
        head.weights.data[i] = get_f64(data.data() + off);
        if (!std::isfinite(head.weights.data[i])) {
            throw ParseError("non-finite weight", off);
        }
    }
    for (std::size_t i = 0; i < classes; ++i, off += 8) {
        head.bias[i] = get_f64(data.data() + off);
        if (!std::isfinite(head.bias[i])) throw ParseError("non-finite bias", off);
    }
    return head;
}

}  // namespace rebalance
