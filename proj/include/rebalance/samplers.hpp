#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rebalance/dataset.hpp"
#include "rebalance/rng.hpp"

namespace rebalance {

// How training batches are drawn.
//   Unbalanced:       seeded shuffle-and-chunk over all rows, reshuffled each epoch.
//   ClassSampling:    each batch slot samples a class uniformly, then a row in it.
//   GroupSampling:    same, with (class, spurious) groups as the strata.
//   SpuriousSampling: same, with spurious values as the strata.
//   ClassSubset:      one class-balanced subset drawn up front, then unbalanced.
//   GroupSubset:      same, with a group-balanced subset.
enum class BalanceMode {
    Unbalanced,
    ClassSampling,
    GroupSampling,
    SpuriousSampling,
    ClassSubset,
    GroupSubset,
};

const char* to_string(BalanceMode m);
BalanceMode balance_mode_from_string(const std::string& s);

// Worst-group downsampling: keep round(fraction * base) rows of each worst
// group and backfill from the same class with a different spurious value,
// starting from a group-balanced base subset.
struct AblationSpec {
    std::vector<std::uint32_t> worst_groups;
    double fraction = 1.0;
    std::uint64_t seed = 0;

    void validate() const;
};

// Single-consumer batch iterator. Sampling modes draw with replacement;
// subset/unbalanced modes walk seeded epoch permutations.
class BatchStream {
public:
    BatchStream(const EmbeddingDataset& ds, BalanceMode mode, std::size_t batch_size,
                std::uint64_t seed);

    // Next batch of row indices. Sampling modes always return batch_size
    // rows; epoch modes return the epoch tail when it is shorter.
    std::vector<std::size_t> next();

    BalanceMode mode() const { return mode_; }

private:
    std::size_t batch_size_;
    BalanceMode mode_;
    Rng rng_;
    std::vector<std::vector<std::size_t>> strata_;  // sampling modes
    std::vector<std::size_t> pool_;                 // epoch modes
    std::size_t cursor_ = 0;
};

BatchStream balanced_batch_stream(const EmbeddingDataset& ds, BalanceMode mode,
                                  std::size_t batch_size, std::uint64_t seed);

// Every stratum downsampled uniformly at random to the smallest stratum's
// size (the smallest stratum is kept whole). Returns sorted row indices.
std::vector<std::size_t> balanced_subset(const EmbeddingDataset& ds, LabelKind by,
                                         std::uint64_t seed);

// The worst-group ablation subset; see AblationSpec. Returns sorted indices.
std::vector<std::size_t> ablation_subset(const EmbeddingDataset& ds, const AblationSpec& spec);

}  // namespace rebalance
