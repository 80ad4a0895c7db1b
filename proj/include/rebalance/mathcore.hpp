#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "rebalance/errors.hpp"

namespace rebalance {

using Vec = std::vector<double>;

// Dense row-major matrix. All in-memory arithmetic is 64-bit.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    Vec data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    double* row(std::size_t r) { return data.data() + r * cols; }
    const double* row(std::size_t r) const { return data.data() + r * cols; }

    bool operator==(const Matrix&) const = default;
};

// Raw classifier outputs, one entry per class.
struct Logits {
    Vec values;
};

// A normalized probability vector.
struct ProbDist {
    Vec probs;
};

// Affine classification head: logits = weights * x + bias.
struct LinearHead {
    Matrix weights;  // num_classes x dim
    Vec bias;        // num_classes

    std::size_t num_classes() const { return weights.rows; }
    std::size_t dim() const { return weights.cols; }

    static LinearHead zeros(std::size_t num_classes, std::size_t dim);

    bool operator==(const LinearHead&) const = default;
};

enum class OptimizerKind { Sgd, AdaptiveDecoupled };
enum class LrSchedule { Constant, Cosine, Linear };

const char* to_string(OptimizerKind k);
const char* to_string(LrSchedule s);
OptimizerKind optimizer_from_string(const std::string& s);
LrSchedule schedule_from_string(const std::string& s);

// Optimization settings shared by every training entry point.
struct OptimConfig {
    OptimizerKind optimizer = OptimizerKind::Sgd;
    double lr0 = 1e-3;
    LrSchedule schedule = LrSchedule::Constant;
    double weight_decay = 1e-4;
    std::size_t total_steps = 250;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;

    void validate() const;  // throws InvalidInput on bad fields
};

// First/second moment accumulators for adaptive_step. Empty vectors mean a
// fresh state; they are sized on first use.
struct MomentState {
    Vec m;
    Vec v;
    std::uint64_t t = 0;  // completed steps
};

struct AdaptiveResult {
    Vec param;
    MomentState state;
};

struct CeGradient {
    Matrix d_weights;
    Vec d_bias;
};

// Numerically stable softmax (max-subtraction).
ProbDist softmax(const Logits& z);

// -log softmax(z)[label], computed via log-sum-exp; never negative.
double cross_entropy(const Logits& z, std::size_t label);

// Sum p_i ln(p_i/q_i), with 0 ln 0 = 0. Errors when q vanishes under p.
double kl_divergence(const ProbDist& p, const ProbDist& q);

// Half L1 distance.
double total_variation(const ProbDist& p, const ProbDist& q);

Logits linear_forward(const LinearHead& head, const double* x, std::size_t dim);
Logits linear_forward(const LinearHead& head, const Vec& x);

// Exact gradient of cross_entropy(linear_forward(head, x), label) in head.
CeGradient ce_gradient(const LinearHead& head, const double* x, std::size_t dim,
                       std::size_t label);
CeGradient ce_gradient(const LinearHead& head, const Vec& x, std::size_t label);

// param - lr * (grad + weight_decay * param). Coupled L2.
Vec sgd_step(const Vec& param, const Vec& grad, double lr, double weight_decay);

// AdamW-style step: decoupled decay, then bias-corrected moment update
// (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
AdaptiveResult adaptive_step(const MomentState& state, const Vec& param,
                             const Vec& grad, double lr, double weight_decay);

// Learning rate at `step` of `config.total_steps` under config.schedule.
double lr_at(const OptimConfig& config, std::size_t step);

}  // namespace rebalance
