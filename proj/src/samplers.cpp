#include "rebalance/samplers.hpp"

#include <algorithm>
#include <cmath>

namespace rebalance {

namespace {

enum class StratumKind { Class, Group, Spurious };

// Rows per stratum over the full stratum universe (so a missing class or
// group is detected rather than silently skipped).
std::vector<std::vector<std::size_t>> stratify(const EmbeddingDataset& ds, StratumKind kind) {
    std::size_t k = 0;
    switch (kind) {
        case StratumKind::Class: k = ds.num_classes; break;
        case StratumKind::Group: k = ds.num_groups(); break;
        case StratumKind::Spurious: k = ds.num_spurious; break;
    }
    if (kind != StratumKind::Class && !ds.has_spurious()) {
        throw MissingAnnotation("stratify: dataset has no spurious labels");
    }
    std::vector<std::vector<std::size_t>> strata(k);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        std::size_t s = 0;
        switch (kind) {
            case StratumKind::Class: s = ds.class_labels[i]; break;
            case StratumKind::Group: s = ds.group_of(i); break;
            case StratumKind::Spurious: s = ds.spurious_labels[i]; break;
        }
        strata[s].push_back(i);
    }
    const char* name = kind == StratumKind::Class   ? "class"
                       : kind == StratumKind::Group ? "group"
                                                    : "spurious";
    for (std::size_t s = 0; s < strata.size(); ++s) {
        if (strata[s].empty()) {
            throw DegenerateStratum(std::string(name) + " " + std::to_string(s) + " is empty");
        }
    }
    return strata;
}

std::size_t round_half_away(double x) {
    return static_cast<std::size_t>(std::llround(x));
}

}  // namespace

const char* to_string(BalanceMode m) {
    switch (m) {
        case BalanceMode::Unbalanced: return "unbalanced";
        case BalanceMode::ClassSampling: return "class-sampling";
        case BalanceMode::GroupSampling: return "group-sampling";
        case BalanceMode::SpuriousSampling: return "spurious-sampling";
        case BalanceMode::ClassSubset: return "class-subset";
        default: return "group-subset";
    }
}

BalanceMode balance_mode_from_string(const std::string& s) {
    if (s == "unbalanced") return BalanceMode::Unbalanced;
    if (s == "class-sampling") return BalanceMode::ClassSampling;
    if (s == "group-sampling") return BalanceMode::GroupSampling;
    if (s == "spurious-sampling") return BalanceMode::SpuriousSampling;
    if (s == "class-subset") return BalanceMode::ClassSubset;
    if (s == "group-subset") return BalanceMode::GroupSubset;
    throw InvalidInput("unknown balance mode: " + s);
}

void AblationSpec::validate() const {
    if (worst_groups.empty()) throw InvalidInput("AblationSpec: worst_groups is empty");
    if (!(fraction >= 0.0 && fraction <= 1.0)) {
        throw InvalidInput("AblationSpec: fraction must be in [0,1]");
    }
}

BatchStream::BatchStream(const EmbeddingDataset& ds, BalanceMode mode, std::size_t batch_size,
                         std::uint64_t seed)
    : batch_size_(batch_size), mode_(mode), rng_(seed) {
    if (batch_size == 0) throw InvalidInput("BatchStream: batch_size must be >= 1");
    if (ds.size() == 0) throw InvalidInput("BatchStream: empty dataset");
    switch (mode) {
        case BalanceMode::ClassSampling:
            strata_ = stratify(ds, StratumKind::Class);
            break;
        case BalanceMode::GroupSampling:
            strata_ = stratify(ds, StratumKind::Group);
            break;
        case BalanceMode::SpuriousSampling:
            strata_ = stratify(ds, StratumKind::Spurious);
            break;
        case BalanceMode::Unbalanced:
            pool_.resize(ds.size());
            for (std::size_t i = 0; i < ds.size(); ++i) pool_[i] = i;
            break;
        case BalanceMode::ClassSubset:
            pool_ = balanced_subset(ds, LabelKind::Class, seed);
            break;
        case BalanceMode::GroupSubset:
            pool_ = balanced_subset(ds, LabelKind::Group, seed);
            break;
    }
}

std::vector<std::size_t> BatchStream::next() {
    std::vector<std::size_t> batch;
    if (!strata_.empty()) {
        batch.reserve(batch_size_);
        for (std::size_t i = 0; i < batch_size_; ++i) {
            const auto& stratum = strata_[rng_.next_below(strata_.size())];
            batch.push_back(stratum[rng_.next_below(stratum.size())]);
        }
        return batch;
    }
    if (cursor_ == 0) rng_.shuffle(pool_);
    const std::size_t take = std::min(batch_size_, pool_.size() - cursor_);
    batch.assign(pool_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                 pool_.begin() + static_cast<std::ptrdiff_t>(cursor_ + take));
    cursor_ += take;
    if (cursor_ == pool_.size()) cursor_ = 0;
    return batch;
}

BatchStream balanced_batch_stream(const EmbeddingDataset& ds, BalanceMode mode,
                                  std::size_t batch_size, std::uint64_t seed) {
    return BatchStream(ds, mode, batch_size, seed);
}

std::vector<std::size_t> balanced_subset(const EmbeddingDataset& ds, LabelKind by,
                                         std::uint64_t seed) {
    const auto strata =
        stratify(ds, by == LabelKind::Class ? StratumKind::Class : StratumKind::Group);
    std::size_t m = SIZE_MAX;
    for (const auto& s : strata) m = std::min(m, s.size());
    Rng rng = Rng::fork(seed, 0x5b5e7);
    std::vector<std::size_t> out;
    out.reserve(m * strata.size());
    for (const auto& s : strata) {
        if (s.size() == m) {
            out.insert(out.end(), s.begin(), s.end());
        } else {
            for (std::size_t pos : rng.sample_without_replacement(s.size(), m)) {
                out.push_back(s[pos]);
            }
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<std::size_t> ablation_subset(const EmbeddingDataset& ds, const AblationSpec& spec) {
    spec.validate();
    if (!ds.has_spurious()) throw MissingAnnotation("ablation_subset: no spurious labels");
    const auto strata = stratify(ds, StratumKind::Group);

    std::vector<bool> is_worst(strata.size(), false);
    for (std::uint32_t g : spec.worst_groups) {
        if (g >= strata.size()) throw InvalidInput("ablation_subset: worst group id out of range");
        is_worst[g] = true;
    }

    // Base allotment per group: the worst-group size, capped by half of
    // every other group so the backfill below can always double a group.
    std::size_t base = SIZE_MAX;
    for (std::size_t g = 0; g < strata.size(); ++g) {
        base = std::min(base, is_worst[g] ? strata[g].size() : strata[g].size() / 2);
    }
    if (base == 0) {
        throw DegenerateStratum("ablation_subset: base allotment is zero (a group is too small)");
    }

    Rng rng = Rng::fork(spec.seed, 0xab1a7e);
    std::vector<bool> selected(ds.size(), false);
    std::vector<std::size_t> deficit(strata.size(), 0);
    for (std::size_t g = 0; g < strata.size(); ++g) {
        const auto drawn = rng.sample_without_replacement(strata[g].size(), base);
        std::size_t take = base;
        if (is_worst[g]) {
            take = round_half_away(spec.fraction * static_cast<double>(base));
            deficit[g] = base - take;
        }
        for (std::size_t i = 0; i < take; ++i) selected[strata[g][drawn[i]]] = true;
    }

    // Backfill each worst group's deficit from the same class with any
    // other spurious value, never reusing a selected row.
    for (std::size_t g = 0; g < strata.size(); ++g) {
        if (deficit[g] == 0) continue;
        const auto cls = static_cast<std::uint32_t>(g / ds.num_spurious);
        const auto spur = static_cast<std::uint32_t>(g % ds.num_spurious);
        std::vector<std::size_t> pool;
        for (std::size_t i = 0; i < ds.size(); ++i) {
            if (!selected[i] && ds.class_labels[i] == cls && ds.spurious_labels[i] != spur) {
                pool.push_back(i);
            }
        }
        if (pool.size() < deficit[g]) {
            throw PoolExhausted("ablation_subset: class " + std::to_string(cls) +
                                " replacement pool has " + std::to_string(pool.size()) +
                                " rows, need " + std::to_string(deficit[g]));
        }
        for (std::size_t pos : rng.sample_without_replacement(pool.size(), deficit[g])) {
            selected[pool[pos]] = true;
        }
    }

    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (selected[i]) out.push_back(i);
    }
    return out;
}

}  // namespace rebalance
