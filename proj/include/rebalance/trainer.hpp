#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rebalance/dataset.hpp"
#include "rebalance/mathcore.hpp"
#include "rebalance/samplers.hpp"

namespace rebalance {

// Heads captured at fixed fractions of a training run. After training,
// fraction 1.0 always holds the final head.
struct CheckpointSet {
    std::map<double, LinearHead> by_fraction;

    bool has(double fraction) const { return by_fraction.count(fraction) > 0; }
    const LinearHead& at(double fraction) const;  // throws InvalidInput when absent
};

struct GroupAccuracyPoint {
    double fraction = 0.0;
    std::map<std::uint32_t, double> accuracy;
};

struct TrainReport {
    LinearHead final_head;
    CheckpointSet checkpoints;
    std::vector<double> loss_trace;  // batch-mean cross entropy, one entry per step
    std::vector<GroupAccuracyPoint> val_accuracy_trace;  // at snapshots, when val given
};

// Minibatch training of a linear head over a balanced batch stream.
// A null init means a zero head. Snapshots are stored at the requested
// fractions of total_steps (rounded to the nearest step); each snapshot
// also records per-group accuracy on `val` when one is given.
TrainReport train_head(const EmbeddingDataset& ds, BalanceMode mode, const OptimConfig& config,
                       const LinearHead* init = nullptr,
                       const std::vector<double>& checkpoint_fractions = {},
                       const EmbeddingDataset* val = nullptr);

// Fresh head trained with group-sampling balance on the heldout set.
// Reveals class and group labels for every heldout row in the ledger.
LinearHead dfr(const EmbeddingDataset& heldout, const OptimConfig& config,
               AnnotationLedger* ledger = nullptr);

// Fresh head trained with class-sampling balance. Reveals class labels
// only; group annotations are never touched.
LinearHead cb_last_layer_retrain(const EmbeddingDataset& heldout, const OptimConfig& config,
                                 AnnotationLedger* ledger = nullptr);

// Continues optimization from an existing head with class-sampling balance.
LinearHead finetune_head(const LinearHead& init, const EmbeddingDataset& reweight,
                         const OptimConfig& config);

struct FreeLunchResult {
    LinearHead erm_head;
    LinearHead retrained_head;
    EmbeddingDataset erm_split;
    EmbeddingDataset retrain_split;
};

// Split ds into (1 - holdout_fraction, holdout_fraction) with erm_config's
// seed, train a class-sampled head on the first part and retrain a fresh
// class-sampled head on the second. No model selection anywhere.
FreeLunchResult free_lunch(const EmbeddingDataset& ds, const OptimConfig& erm_config,
                           const OptimConfig& retrain_config, double holdout_fraction);

// ceil(n / batch_size) * epochs.
std::size_t epochs_to_steps(std::size_t epochs, std::size_t n, std::size_t batch_size);

// GHED head checkpoint file I/O.
void save_head(const LinearHead& head, const std::string& path);
LinearHead load_head(const std::string& path);

}  // namespace rebalance
