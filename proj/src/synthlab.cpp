#include "rebalance/synthlab.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "rebalance/mathcore.hpp"
#include "rebalance/rng.hpp"

namespace rebalance {

namespace {

// Rounds through float32. The volatile keeps the round-trip opaque: g++ -O3
// is seen to elide a plain double->float->double cast chain in this loop.
double quantize_f32(double v) {
    volatile float f = static_cast<float>(v);
    return static_cast<double>(f);
}

}  // namespace

void SyntheticSpec::validate() const {
    if (n == 0) throw InvalidInput("synthetic n must be >= 1");
    if (d < 3) throw InvalidInput("synthetic d must be >= 3 (core + spurious + junk)");
    if (!(minority_rate > 0.0 && minority_rate <= 0.5)) {
        throw InvalidInput("minority_rate must be in (0, 0.5]");
    }
    if (!(core_magnitude > 0.0)) throw InvalidInput("core_magnitude must be positive");
    if (!(spurious_magnitude > 0.0)) throw InvalidInput("spurious_magnitude must be positive");
    if (!(core_noise >= 0.0)) throw InvalidInput("core_noise must be non-negative");
    if (!(junk_scale >= 0.0)) throw InvalidInput("junk_scale must be non-negative");
    if (!(positive_rate > 0.0 && positive_rate < 1.0)) {
        throw InvalidInput("positive_rate must be in (0, 1)");
    }
}

EmbeddingDataset generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    EmbeddingDataset ds;
    ds.num_classes = 2;
    ds.num_spurious = 2;
    ds.features = Matrix(spec.n, spec.d);
    ds.class_labels.resize(spec.n);
    ds.spurious_labels.resize(spec.n);

    Rng rng(spec.seed);
    for (std::size_t i = 0; i < spec.n; ++i) {
        const double y = rng.next_unit() < spec.positive_rate ? 1.0 : -1.0;
        const bool minority = rng.next_unit() < spec.minority_rate;
        const double core = y * (spec.core_magnitude + std::abs(spec.core_noise * rng.next_gaussian()));
        const double sp_sign = minority ? -y : y;
        const double sp =
            sp_sign * (spec.spurious_magnitude + std::abs(spec.core_noise * rng.next_gaussian()));
        ds.features.at(i, 0) = quantize_f32(core);
        ds.features.at(i, 1) = quantize_f32(sp);
        for (std::size_t j = 2; j < spec.d; ++j) {
            ds.features.at(i, j) = quantize_f32(spec.junk_scale * rng.next_gaussian());
        }
        ds.class_labels[i] = y > 0.0 ? 1u : 0u;
        ds.spurious_labels[i] = minority ? 1u : 0u;
    }
    return ds;
}

void TheoremInstance::validate() const {
    if (!(alpha_erm > 0.0 && beta_erm > 0.0 && alpha_reg > 0.0 && beta_reg > 0.0)) {
        throw InvalidInput("model weights must be positive");
    }
    if (!(b >= 0.0)) throw InvalidInput("link slope b must be non-negative");
    if (!(core_mag > 0.0)) throw InvalidInput("core_mag must be positive");
    if (!(spurious_mag > 0.0)) throw InvalidInput("spurious_mag must be positive");
    if (!std::isfinite(junk_sum)) throw InvalidInput("junk_sum must be finite");
    if (std::abs((alpha_erm + beta_erm) - (alpha_reg + beta_reg)) > 1e-12) {
        throw InvalidInput("weights must satisfy alpha_erm + beta_erm = alpha_reg + beta_reg");
    }
    const TheoremLogits f = theorem_logits(*this);
    for (double logit : {f.erm_minority, f.reg_minority, f.erm_majority, f.reg_majority}) {
        if (std::abs(b * logit) > 1.0) {
            std::ostringstream msg;
            msg << "|b * logit| = " << std::abs(b * logit) << " exceeds 1";
            throw LinkViolation(msg.str());
        }
    }
}

TheoremLogits theorem_logits(const TheoremInstance& inst) {
    TheoremLogits f;
    f.erm_minority = inst.alpha_erm * inst.core_mag - inst.beta_erm * inst.spurious_mag +
                     inst.junk_sum;
    f.reg_minority = inst.alpha_reg * inst.core_mag - inst.beta_reg * inst.spurious_mag +
                     inst.junk_sum;
    f.erm_majority = inst.alpha_erm * inst.core_mag + inst.beta_erm * inst.spurious_mag +
                     inst.junk_sum;
    f.reg_majority = inst.alpha_reg * inst.core_mag + inst.beta_reg * inst.spurious_mag +
                     inst.junk_sum;
    return f;
}

double tvd_gap_formula(const TheoremInstance& inst) {
    inst.validate();
    return inst.b * std::min(inst.core_mag, inst.spurious_mag) *
           std::abs(inst.beta_erm - inst.beta_reg);
}

namespace {

ProbDist link_dist(double b, double logit) {
    const double p = (b * logit + 1.0) / 2.0;
    if (!(p >= 0.0 && p <= 1.0)) throw LinkViolation("output probability outside [0, 1]");
    ProbDist dist;
    dist.probs = {p, 1.0 - p};
    return dist;
}

}  // namespace

double tvd_gap_direct(const TheoremInstance& inst) {
    inst.validate();
    const TheoremLogits f = theorem_logits(inst);
    const double tvd_minority =
        total_variation(link_dist(inst.b, f.erm_minority), link_dist(inst.b, f.reg_minority));
    const double tvd_majority =
        total_variation(link_dist(inst.b, f.erm_majority), link_dist(inst.b, f.reg_majority));
    return tvd_minority - tvd_majority;
}

TheoremCheck verify_theorem(std::size_t trials, std::uint64_t seed) {
    if (trials == 0) throw InvalidInput("verify_theorem needs at least one trial");

    TheoremCheck check;
    check.trials = trials;
    check.min_gap = std::numeric_limits<double>::infinity();
    for (std::size_t trial = 0; trial < trials; ++trial) {
        Rng rng = Rng::fork(seed, trial);
        TheoremInstance inst;
        while (true) {
            const auto uniform = [&](double lo, double hi) {
                return lo + (hi - lo) * rng.next_unit();
            };
            inst.alpha_erm = uniform(0.1, 1.0);
            inst.beta_erm = uniform(0.1, 1.0);
            const double total = inst.alpha_erm + inst.beta_erm;
            inst.beta_reg = uniform(0.05, total - 0.05);
            inst.alpha_reg = total - inst.beta_reg;
            inst.b = uniform(0.05, 0.3);
            inst.core_mag = uniform(0.1, 1.5);
            inst.spurious_mag = uniform(0.1, 1.5);
            inst.junk_sum = uniform(-0.3, 0.3);
            if (std::abs(inst.beta_erm - inst.beta_reg) < 1e-3) continue;  // degenerate gap
            try {
                inst.validate();
            } catch (const LinkViolation&) {
                continue;  // invalid link: resample, never score
            }
            break;
        }

        const double formula = tvd_gap_formula(inst);
        const double direct = tvd_gap_direct(inst);
        const double deviation = std::abs(formula - direct);
        check.max_abs_deviation = std::max(check.max_abs_deviation, deviation);
        check.min_gap = std::min(check.min_gap, direct);
        if (deviation >= 1e-10) {
            std::ostringstream msg;
            msg << "formula and direct gap disagree by " << deviation << " on trial " << trial;
            throw TheoremViolation(msg.str(), inst);
        }
        if (!(direct > 0.0)) {
            std::ostringstream msg;
            msg << "gap " << direct << " is not positive on trial " << trial;
            throw TheoremViolation(msg.str(), inst);
        }
    }
    return check;
}

}  // namespace rebalance
