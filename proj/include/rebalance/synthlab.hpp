#pragma once

#include <cstdint>
#include <string>

#include "rebalance/dataset.hpp"
#include "rebalance/errors.hpp"

namespace rebalance {

// Two-class dataset with one core coordinate (column 0, decides the label),
// one spurious coordinate (column 1, agrees with the label except on the
// minority), and d-2 junk coordinates. The spurious magnitude exceeds the
// core magnitude by default so an underfit head prefers it.
struct SyntheticSpec {
    std::size_t n = 10000;
    std::size_t d = 12;
    double minority_rate = 0.05;  // in (0, 0.5]
    double core_magnitude = 0.3;
    double core_noise = 0.3;  // also the spurious coordinate's noise scale
    double spurious_magnitude = 1.0;
    double junk_scale = 1.0;
    double positive_rate = 0.5;  // P(y = +1); 0.5 keeps the classes balanced
    std::uint64_t seed = 0;

    void validate() const;
};

// class = (y+1)/2, spurious label = 1 on minority rows. Features are
// quantized to float32 so in-memory datasets match a GEMB round-trip.
EmbeddingDataset generate_synthetic(const SyntheticSpec& spec);

// One comparison between an underfit ("erm") and a regularized model on the
// linear feature model: logits alpha*core + beta*spurious + junk_sum, with
// P(output = 1) = (b*logit + 1)/2.
struct TheoremInstance {
    double alpha_erm = 0.0;
    double beta_erm = 0.0;
    double alpha_reg = 0.0;
    double beta_reg = 0.0;
    double b = 0.0;  // linear link slope, >= 0
    double core_mag = 0.0;
    double spurious_mag = 0.0;
    double junk_sum = 0.0;

    // Positivity and weight normalization (invalid-input error), then link
    // validity |b * logit| <= 1 on all four evaluated logits (link error).
    void validate() const;
};

struct TheoremLogits {
    double erm_minority = 0.0;
    double reg_minority = 0.0;
    double erm_majority = 0.0;
    double reg_majority = 0.0;
};

// The four logits the instance evaluates (y = +1, spurious sign flipped on
// the minority point, junk_sum shared).
TheoremLogits theorem_logits(const TheoremInstance& inst);

// b * min(core_mag, spurious_mag) * |beta_erm - beta_reg| (closed form).
double tvd_gap_formula(const TheoremInstance& inst);

// The same gap measured directly: TVD between the two-point output
// distributions at the minority point minus the TVD at the majority point.
double tvd_gap_direct(const TheoremInstance& inst);

struct TheoremCheck {
    std::size_t trials = 0;
    double max_abs_deviation = 0.0;
    double min_gap = 0.0;
};

// A sampled instance where formula and direct measurement disagree (or the
// gap fails to be positive). Carries the counterexample.
struct TheoremViolation : Error {
    TheoremInstance instance;
    TheoremViolation(const std::string& what, const TheoremInstance& inst)
        : Error(what), instance(inst) {}
};

// Rejection-samples `trials` valid instances and checks the identity
// |tvd_gap_formula - tvd_gap_direct| < 1e-10 and gap > 0 on each.
TheoremCheck verify_theorem(std::size_t trials, std::uint64_t seed);

}  // namespace rebalance
