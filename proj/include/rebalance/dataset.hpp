#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rebalance/mathcore.hpp"

namespace rebalance {

// Fixed feature vectors with class labels and optional spurious labels.
// Group ids are derived as class * num_spurious + spurious, never stored.
// Features live as float32 on disk and are promoted to double at load.
struct EmbeddingDataset {
    Matrix features;                             // n x d
    std::vector<std::uint32_t> class_labels;     // length n, entries < num_classes
    std::vector<std::uint32_t> spurious_labels;  // length n when present, else empty
    std::uint32_t num_classes = 0;
    std::uint32_t num_spurious = 0;              // 0 = no spurious labels

    std::size_t size() const { return features.rows; }
    std::size_t dim() const { return features.cols; }
    bool has_spurious() const { return num_spurious > 0; }
    std::size_t num_groups() const {
        return static_cast<std::size_t>(num_classes) * num_spurious;
    }
    std::uint32_t group_of(std::size_t row) const;

    void validate() const;  // throws InvalidInput when invariants fail

    // New dataset holding the given rows, in the given order.
    EmbeddingDataset subset(const std::vector<std::size_t>& rows) const;
};

// Fractions for a seeded shuffle + contiguous cut; must sum to 1.
struct SplitSpec {
    std::vector<double> fractions;
    std::uint64_t seed = 0;

    void validate() const;
};

enum class LabelKind { Class, Group };

// Tracks which rows of one dataset have had labels revealed, so annotation
// cost can be reported honestly. Revealing the same row twice counts once.
class AnnotationLedger {
public:
    AnnotationLedger() = default;
    explicit AnnotationLedger(std::size_t dataset_size);

    void reveal(const std::vector<std::size_t>& rows, LabelKind kind);
    void reveal_all(LabelKind kind);

    std::size_t class_labels_revealed() const { return class_count_; }
    std::size_t group_labels_revealed() const { return group_count_; }
    std::size_t capacity() const { return class_seen_.size(); }

private:
    std::vector<bool> class_seen_;
    std::vector<bool> group_seen_;
    std::size_t class_count_ = 0;
    std::size_t group_count_ = 0;
};

// Reads a GEMB file, or a CSV file when the path ends in ".csv"
// (header f0,...,f{d-1},class[,spurious]).
EmbeddingDataset load_embeddings(const std::string& path);

// GEMB writer; features are truncated to float32.
void save_embeddings(const EmbeddingDataset& ds, const std::string& path);

// Seeded uniform shuffle, then contiguous cut. Part i gets floor(f_i * n)
// rows; the remainder goes to the first part.
std::vector<EmbeddingDataset> split(const EmbeddingDataset& ds, const SplitSpec& spec);

// Row counts per group id; only non-empty groups appear.
std::map<std::uint32_t, std::size_t> group_counts(const EmbeddingDataset& ds);

}  // namespace rebalance
