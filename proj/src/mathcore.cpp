#include "rebalance/mathcore.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace rebalance {

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kEps = 1e-8;

void check_finite(const Vec& v, const char* who) {
    for (double x : v) {
        if (!std::isfinite(x)) throw InvalidInput(std::string(who) + ": non-finite entry");
    }
}

void check_dist(const ProbDist& p, const char* who) {
    if (p.probs.empty()) throw InvalidInput(std::string(who) + ": empty distribution");
    double sum = 0.0;
    for (double x : p.probs) {
        if (!(x >= 0.0) || !std::isfinite(x)) {
            throw InvalidInput(std::string(who) + ": entries must be finite and >= 0");
        }
        sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        throw InvalidInput(std::string(who) + ": entries must sum to 1");
    }
}

}  // namespace

LinearHead LinearHead::zeros(std::size_t num_classes, std::size_t dim) {
    LinearHead h;
    h.weights = Matrix(num_classes, dim);
    h.bias.assign(num_classes, 0.0);
    return h;
}

const char* to_string(OptimizerKind k) {
    return k == OptimizerKind::Sgd ? "sgd" : "adaptive-decoupled";
}

const char* to_string(LrSchedule s) {
    switch (s) {
        case LrSchedule::Constant: return "constant";
        case LrSchedule::Cosine: return "cosine";
        default: return "linear";
    }
}

OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "sgd") return OptimizerKind::Sgd;
    if (s == "adaptive-decoupled") return OptimizerKind::AdaptiveDecoupled;
    throw InvalidInput("unknown optimizer: " + s);
}

LrSchedule schedule_from_string(const std::string& s) {
    if (s == "constant") return LrSchedule::Constant;
    if (s == "cosine") return LrSchedule::Cosine;
    if (s == "linear") return LrSchedule::Linear;
    throw InvalidInput("unknown lr schedule: " + s);
}

void OptimConfig::validate() const {
    if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw InvalidInput("OptimConfig: lr0 must be > 0");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
        throw InvalidInput("OptimConfig: weight_decay must be >= 0");
    }
    if (batch_size == 0) throw InvalidInput("OptimConfig: batch_size must be >= 1");
}

ProbDist softmax(const Logits& z) {
    if (z.values.empty()) throw InvalidInput("softmax: empty logits");
    check_finite(z.values, "softmax");
    const double m = *std::max_element(z.values.begin(), z.values.end());
    ProbDist out;
    out.probs.resize(z.values.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < z.values.size(); ++i) {
        out.probs[i] = std::exp(z.values[i] - m);
        sum += out.probs[i];
    }
    for (double& p : out.probs) p /= sum;
    return out;
}

double cross_entropy(const Logits& z, std::size_t label) {
    if (z.values.empty()) throw InvalidInput("cross_entropy: empty logits");
    if (label >= z.values.size()) throw InvalidInput("cross_entropy: label out of range");
    check_finite(z.values, "cross_entropy");
    const double m = *std::max_element(z.values.begin(), z.values.end());
    double sum = 0.0;
    for (double v : z.values) sum += std::exp(v - m);
    // Both terms are >= 0: m >= z[label], and sum includes exp(0) for the max.
    return (m - z.values[label]) + std::log(sum);
}

double kl_divergence(const ProbDist& p, const ProbDist& q) {
    if (p.probs.size() != q.probs.size()) throw InvalidInput("kl_divergence: length mismatch");
    check_dist(p, "kl_divergence");
    check_dist(q, "kl_divergence");
    double sum = 0.0;
    for (std::size_t i = 0; i < p.probs.size(); ++i) {
        if (p.probs[i] == 0.0) continue;  // 0 ln 0 = 0
        if (q.probs[i] == 0.0) {
            throw InvalidInput("kl_divergence: q has zero mass where p is positive");
        }
        sum += p.probs[i] * std::log(p.probs[i] / q.probs[i]);
    }
    return sum;
}

double total_variation(const ProbDist& p, const ProbDist& q) {
    if (p.probs.size() != q.probs.size()) throw InvalidInput("total_variation: length mismatch");
    check_dist(p, "total_variation");
    check_dist(q, "total_variation");
    double sum = 0.0;
    for (std::size_t i = 0; i < p.probs.size(); ++i) {
        sum += std::abs(p.probs[i] - q.probs[i]);
    }
    return 0.5 * sum;
}

Logits linear_forward(const LinearHead& head, const double* x, std::size_t dim) {
    if (dim != head.dim()) throw InvalidInput("linear_forward: dimension mismatch");
    Logits out;
    out.values.resize(head.num_classes());
    for (std::size_t c = 0; c < head.num_classes(); ++c) {
        const double* w = head.weights.row(c);
        double acc = head.bias[c];
        for (std::size_t j = 0; j < dim; ++j) acc += w[j] * x[j];
        out.values[c] = acc;
    }
    return out;
}

Logits linear_forward(const LinearHead& head, const Vec& x) {
    return linear_forward(head, x.data(), x.size());
}

CeGradient ce_gradient(const LinearHead& head, const double* x, std::size_t dim,
                       std::size_t label) {
    if (dim != head.dim()) throw InvalidInput("ce_gradient: dimension mismatch");
    if (label >= head.num_classes()) throw InvalidInput("ce_gradient: label out of range");
    const ProbDist p = softmax(linear_forward(head, x, dim));
    CeGradient g;
    g.d_weights = Matrix(head.num_classes(), dim);
    g.d_bias.resize(head.num_classes());
    for (std::size_t c = 0; c < head.num_classes(); ++c) {
        const double delta = p.probs[c] - (c == label ? 1.0 : 0.0);
        g.d_bias[c] = delta;
        double* row = g.d_weights.row(c);
        for (std::size_t j = 0; j < dim; ++j) row[j] = delta * x[j];
    }
    return g;
}

CeGradient ce_gradient(const LinearHead& head, const Vec& x, std::size_t label) {
    return ce_gradient(head, x.data(), x.size(), label);
}

Vec sgd_step(const Vec& param, const Vec& grad, double lr, double weight_decay) {
    if (param.size() != grad.size()) throw InvalidInput("sgd_step: shape mismatch");
    Vec out(param.size());
    for (std::size_t i = 0; i < param.size(); ++i) {
        out[i] = param[i] - lr * (grad[i] + weight_decay * param[i]);
    }
    return out;
}

AdaptiveResult adaptive_step(const MomentState& state, const Vec& param,
                             const Vec& grad, double lr, double weight_decay) {
    if (param.size() != grad.size()) throw InvalidInput("adaptive_step: shape mismatch");
    MomentState st = state;
    if (st.m.empty() && st.v.empty() && st.t == 0) {
        st.m.assign(param.size(), 0.0);
        st.v.assign(param.size(), 0.0);
    }
    if (st.m.size() != param.size() || st.v.size() != param.size()) {
        throw InvalidInput("adaptive_step: state shape mismatch");
    }
    st.t += 1;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(st.t));
    Vec out(param.size());
    for (std::size_t i = 0; i < param.size(); ++i) {
        st.m[i] = kBeta1 * st.m[i] + (1.0 - kBeta1) * grad[i];
        st.v[i] = kBeta2 * st.v[i] + (1.0 - kBeta2) * grad[i] * grad[i];
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        // Decay is decoupled: it never enters the moment accumulators.
        out[i] = param[i] - lr * weight_decay * param[i] - lr * mhat / (std::sqrt(vhat) + kEps);
    }
    return {std::move(out), std::move(st)};
}

double lr_at(const OptimConfig& config, std::size_t step) {
    config.validate();
    if (config.total_steps == 0) throw InvalidInput("lr_at: total_steps must be >= 1");
    if (step > config.total_steps) throw InvalidInput("lr_at: step out of range");
    const double t = static_cast<double>(step) / static_cast<double>(config.total_steps);
    switch (config.schedule) {
        case LrSchedule::Constant: return config.lr0;
        case LrSchedule::Cosine: return config.lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
        default: return config.lr0 * (1.0 - t);
    }
}

}  // namespace rebalance
