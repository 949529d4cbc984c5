#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "equidiag/errors.hpp"
#include "equidiag/group.hpp"
#include "equidiag/losses.hpp"
#include "equidiag/metrics.hpp"
#include "equidiag/models.hpp"
#include "equidiag/rng.hpp"
#include "equidiag/stats.hpp"

namespace equidiag {

// ---------------------------------------------------------------------------
// Synthetic equivariant tasks
// ---------------------------------------------------------------------------

enum class TaskKind { SpringForces, NoisyAutoencode };

inline std::string to_string(TaskKind k) {
    return k == TaskKind::SpringForces ? "spring-forces" : "noisy-autoencode";
}

inline TaskKind task_kind_from_string(const std::string& s) {
    if (s == "spring-forces") return TaskKind::SpringForces;
    if (s == "noisy-autoencode") return TaskKind::NoisyAutoencode;
    throw config_error("unknown task kind: " + s);
}

struct SyntheticTask {
    TaskKind kind = TaskKind::SpringForces;
    int atom_count = 8;
    int sample_count = 2048;   // training split
    int heldout_count = 256;
    double noise_scale = 0.1;  // noisy-autoencode only
    std::uint64_t seed = 1;
};

struct TaskData {
    Dataset train;
    Dataset heldout;
};

/// y_i = sum_{j != i} exp(-r_ij^2) (x_j - x_i); pairwise antisymmetric so the
/// global force sum is exactly zero, and equivariant by construction.
inline VecX spring_force_targets(std::span<const double> x, int atom_count) {
    VecX y(x.size(), 0.0);
    for (int i = 0; i < atom_count; ++i) {
        for (int j = 0; j < atom_count; ++j) {
            if (j == i) continue;
            const double ex = x[static_cast<std::size_t>(3 * j)] - x[static_cast<std::size_t>(3 * i)];
            const double ey = x[static_cast<std::size_t>(3 * j + 1)] - x[static_cast<std::size_t>(3 * i + 1)];
            const double ez = x[static_cast<std::size_t>(3 * j + 2)] - x[static_cast<std::size_t>(3 * i + 2)];
            const double k = std::exp(-(ex * ex + ey * ey + ez * ez));
            y[static_cast<std::size_t>(3 * i)] += k * ex;
            y[static_cast<std::size_t>(3 * i + 1)] += k * ey;
            y[static_cast<std::size_t>(3 * i + 2)] += k * ez;
        }
    }
    return y;
}

/// Deterministic dataset with disjoint train and held-out splits. Coordinates
/// are isotropic Gaussian clouds, centered per sample, so the joint
/// distribution is invariant under rotations.
inline TaskData make_task(const SyntheticTask& spec) {
    if (spec.atom_count < 2) throw config_error("task needs at least 2 atoms");
    if (spec.sample_count < 1 || spec.heldout_count < 1)
        throw config_error("task needs positive sample counts");
    TaskData data;
    data.train.atom_count = spec.atom_count;
    data.heldout.atom_count = spec.atom_count;
    RngState root{spec.seed};
    const auto d = static_cast<std::size_t>(3 * spec.atom_count);
    const int total = spec.sample_count + spec.heldout_count;
    for (int s = 0; s < total; ++s) {
        RngState stream = fork(root, static_cast<std::uint64_t>(s));
        VecX x(d);
        for (double& v : x) v = next_gaussian(stream);
        // Center the cloud so targets live in the centered frame too.
        for (int axis = 0; axis < 3; ++axis) {
            double c = 0;
            for (int i = 0; i < spec.atom_count; ++i) c += x[static_cast<std::size_t>(3 * i + axis)];
            c /= spec.atom_count;
            for (int i = 0; i < spec.atom_count; ++i) x[static_cast<std::size_t>(3 * i + axis)] -= c;
        }
        VecX input, target;
        if (spec.kind == TaskKind::SpringForces) {
            input = x;
            target = spring_force_targets(x, spec.atom_count);
        } else {
            target = x;
            input = x;
            for (double& v : input) v += spec.noise_scale * next_gaussian(stream);
        }
        Dataset& split = s < spec.sample_count ? data.train : data.heldout;
        split.inputs.push_back(std::move(input));
        split.targets.push_back(std::move(target));
    }
    return data;
}

// ---------------------------------------------------------------------------
// Parameter gradients of the decomposed losses
// ---------------------------------------------------------------------------

enum class GradientTarget { Total, Mean, Equiv };

/// Reverse-mode gradient of the selected loss component over a batch, with
/// one shared rotation set. The three targets share the empirical identity
/// total = mean + equiv (mse), so their gradients add exactly.
///
/// Per sample x with rotations T_1..T_N and Z_i = T_i^{-1} f(T_i x):
///   total: (1/N) sum_i l(Z_i, y)
///   mean:  l(mu_hat, y),                mu_hat = (1/N) sum_i Z_i
///   equiv: total - mean  (for mse this is the divide-by-N variance)
inline VecX parameter_gradient(const Model& model, const LossModel& loss_model,
                               const BlockAction& action, const Dataset& batch,
                               const std::vector<GroupElement>& elements, GradientTarget target) {
    if (batch.size() == 0) throw argument_error("parameter_gradient: empty batch");
    if (elements.empty()) throw argument_error("parameter_gradient: empty element list");
    const auto n = elements.size();
    const double inv_count = 1.0 / static_cast<double>(batch.size());
    VecX grad(model.params().values.size(), 0.0);
    VecX rotated(static_cast<std::size_t>(action.dimension()));
    VecX cot(static_cast<std::size_t>(action.dimension()));

    for (std::size_t s = 0; s < batch.size(); ++s) {
        const VecX& x = batch.inputs[s];
        const VecX& y = batch.targets[s];
        const TwistedBatch tb = twist(model, action, x, elements);
        const VecX mu = twirl(tb);
        const VecX dmu = loss_gradient(loss_model, mu, y);
        for (std::size_t i = 0; i < n; ++i) {
            // dL/dZ_i for the selected target.
            VecX dz(x.size(), 0.0);
            if (target == GradientTarget::Total || target == GradientTarget::Equiv) {
                const VecX g = loss_gradient(loss_model, tb.predictions.row(i), y);
                axpy(1.0 / static_cast<double>(n), g, dz);
            }
            if (target == GradientTarget::Mean || target == GradientTarget::Equiv) {
                const double sign = target == GradientTarget::Mean ? 1.0 : -1.0;
                axpy(sign / static_cast<double>(n), dmu, dz);
            }
            scale(dz, inv_count);
            // Z_i = rho(T_i)^T f(rho(T_i) x), so d/d(f) = rho(T_i) dz.
            apply_blocks(elements[i].matrix, dz, cot);
            apply_blocks(elements[i].matrix, x, rotated);
            model.backward(rotated, cot, grad);
        }
    }
    return grad;
}

struct GradNormRatio {
    double ratio = 0;
    double norm_mean = 0;
    double norm_equiv = 0;
    bool defined = true;  // false when ||grad L_mean|| is below 1e-30
};

inline GradNormRatio gradient_norm_ratio(const Model& model, const LossModel& loss_model,
                                         const BlockAction& action, const Dataset& probe,
                                         const std::vector<GroupElement>& elements) {
    GradNormRatio out;
    const VecX g_mean = parameter_gradient(model, loss_model, action, probe, elements, GradientTarget::Mean);
    const VecX g_equiv = parameter_gradient(model, loss_model, action, probe, elements, GradientTarget::Equiv);
    out.norm_mean = norm2(g_mean);
    out.norm_equiv = norm2(g_equiv);
    if (out.norm_mean < 1e-30) {
        out.defined = false;
        out.ratio = std::numeric_limits<double>::quiet_NaN();
    } else {
        out.ratio = out.norm_equiv / out.norm_mean;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

enum class OptimizerKind { Sgd, Adam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

inline OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "sgd") return OptimizerKind::Sgd;
    if (s == "adam") return OptimizerKind::Adam;
    throw config_error("unknown optimizer: " + s);
}

struct SgdState {
    void update(VecX& params, const VecX& grad, double lr) const {
        for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
    }
};

/// Adam with the standard defaults and bias correction.
struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    VecX m, v;
    long step = 0;

    void update(VecX& params, const VecX& grad, double lr) {
        if (m.empty()) {
            m.assign(params.size(), 0.0);
            v.assign(params.size(), 0.0);
        }
        ++step;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i] = beta1 * m[i] + (1 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1 - beta2) * grad[i] * grad[i];
            params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
};

// ---------------------------------------------------------------------------
// Training loop with scheduled measurement
// ---------------------------------------------------------------------------

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::Adam;
    double learning_rate = 1e-3;
    int batch_size = 32;
    int steps = 5000;
    bool augmentation = true;
    int measure_every = 50;
    int eval_rotations = 10;
    std::uint64_t seed = 0;
};

struct MetricsRow {
    int step = 0;
    double loss_total = 0;
    double loss_mean = 0;        // bias-corrected estimate
    double loss_equiv = 0;       // Bessel-corrected estimate
    double percent = 0;          // bias-corrected ratio
    double grad_norm_total = 0;
    double grad_norm_mean = 0;
    double grad_norm_equiv = 0;
    double grad_norm_ratio = 0;
    double head_deviation_sq = 0;  // NaN for models without a linear force head
    double epsilon = 0;            // loss_equiv / loss_mean
};

using MetricsTimeSeries = std::vector<MetricsRow>;

struct TrainResult {
    Model model;
    MetricsTimeSeries series;
};

/// Squared Frobenius norm of the head deviation [d_x, d_y, d_z],
/// d_k = w_k - mean(w_x, w_y, w_z).
inline double head_deviation_norm_sq(const Model& model) {
    if (model.kind() != ModelKind::InvariantGraphHead)
        throw argument_error("head deviation is only defined for invariant-graph-head models");
    const auto head = model.params().span("head.w");
    const std::size_t h = head.size() / 3;
    double out = 0;
    for (std::size_t k = 0; k < h; ++k) {
        const double wx = head[k], wy = head[h + k], wz = head[2 * h + k];
        const double mean = (wx + wy + wz) / 3.0;
        out += (wx - mean) * (wx - mean) + (wy - mean) * (wy - mean) + (wz - mean) * (wz - mean);
    }
    return out;
}

/// Data-augmented training with measurement every `measure_every` steps
/// (plus one row at step 0 and one at the final step). Metric rows hold the
/// held-out sampled decomposition and gradient diagnostics on a probe batch
/// fixed at step 0 with rotations re-drawn per measurement.
///
/// Throws numeric_error when the batch loss exceeds 1e6 times its initial
/// value (divergence guard).
inline TrainResult train(Model model, const TaskData& task, const LossModel& loss_model,
                         const GroupSpec& group, const TrainConfig& config, RngState& rng,
                         int threads = 1) {
    if (config.steps < 1 || config.measure_every < 1 || config.batch_size < 1)
        throw config_error("train: steps, measure_every and batch_size must be >= 1");
    if (config.eval_rotations < 2) throw config_error("train: eval_rotations must be >= 2");
    if (task.train.size() == 0 || task.heldout.size() == 0)
        throw config_error("train: empty split");

    const BlockAction action{group, task.train.atom_count};
    const Dataset probe = task.heldout.slice(0, static_cast<std::size_t>(config.batch_size));

    RngState batch_rng = fork(rng, 0x62617463);
    RngState aug_rng = fork(rng, 0x61756721);
    RngState measure_rng = fork(rng, 0x6d656173);
    next_u64(rng);  // advance the caller's state

    TrainResult result{std::move(model), {}};

    auto measure = [&](int step) {
        MetricsRow row;
        row.step = step;
        SampledDecomposition d = decompose_sampled(result.model, loss_model, action, task.heldout,
                                                   group, config.eval_rotations, measure_rng, threads);
        row.loss_total = d.naive.total;
        row.loss_mean = d.report.mean_loss_unbiased;
        row.loss_equiv = d.report.equiv_loss_unbiased;
        row.percent = d.report.percent_bias_corrected;
        std::vector<GroupElement> probe_elements(static_cast<std::size_t>(config.eval_rotations));
        for (auto& e : probe_elements) e = sample_uniform(group, measure_rng);
        const VecX g_total = parameter_gradient(result.model, loss_model, action, probe,
                                                probe_elements, GradientTarget::Total);
        const GradNormRatio gr = gradient_norm_ratio(result.model, loss_model, action, probe, probe_elements);
        row.grad_norm_total = norm2(g_total);
        row.grad_norm_mean = gr.norm_mean;
        row.grad_norm_equiv = gr.norm_equiv;
        row.grad_norm_ratio = gr.ratio;
        row.head_deviation_sq = result.model.kind() == ModelKind::InvariantGraphHead
                                    ? head_deviation_norm_sq(result.model)
                                    : std::numeric_limits<double>::quiet_NaN();
        row.epsilon = row.loss_mean > 0 ? row.loss_equiv / row.loss_mean
                                        : std::numeric_limits<double>::quiet_NaN();
        result.series.push_back(row);
    };

    measure(0);

    AdamState adam;
    VecX grad(result.model.params().values.size());
    Dataset batch;
    batch.atom_count = task.train.atom_count;
    batch.inputs.resize(static_cast<std::size_t>(config.batch_size));
    batch.targets.resize(static_cast<std::size_t>(config.batch_size));
    const std::vector<GroupElement> identity_only = {GroupElement{}};
    double initial_batch_loss = -1;

    for (int step = 1; step <= config.steps; ++step) {
        for (int b = 0; b < config.batch_size; ++b) {
            const auto idx = static_cast<std::size_t>(next_u64(batch_rng) % task.train.size());
            if (config.augmentation) {
                const GroupElement t = sample_uniform(group, aug_rng);
                batch.inputs[static_cast<std::size_t>(b)] = apply(action, t, task.train.inputs[idx]);
                batch.targets[static_cast<std::size_t>(b)] = apply(action, t, task.train.targets[idx]);
            } else {
                batch.inputs[static_cast<std::size_t>(b)] = task.train.inputs[idx];
                batch.targets[static_cast<std::size_t>(b)] = task.train.targets[idx];
            }
        }

        // Batch loss and gradient of mean_b l(f(x_b), y_b).
        std::fill(grad.begin(), grad.end(), 0.0);
        double batch_loss = 0;
        const double inv_b = 1.0 / config.batch_size;
        for (int b = 0; b < config.batch_size; ++b) {
            const VecX& x = batch.inputs[static_cast<std::size_t>(b)];
            const VecX& y = batch.targets[static_cast<std::size_t>(b)];
            const VecX z = result.model.forward(x);
            batch_loss += loss(loss_model, z, y) * inv_b;
            VecX dz = loss_gradient(loss_model, z, y);
            scale(dz, inv_b);
            result.model.backward(x, dz, grad);
        }

        if (initial_batch_loss < 0) initial_batch_loss = std::max(batch_loss, 1e-30);
        if (!(batch_loss <= 1e6 * initial_batch_loss))
            throw numeric_error("training diverged at step " + std::to_string(step) + ": batch loss " +
                                std::to_string(batch_loss) + " vs initial " + std::to_string(initial_batch_loss));

        VecX& params = result.model.params().values;
        if (config.optimizer == OptimizerKind::Sgd) {
            SgdState{}.update(params, grad, config.learning_rate);
        } else {
            adam.update(params, grad, config.learning_rate);
        }

        if (step % config.measure_every == 0 || step == config.steps) measure(step);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Loss-ratio vs gradient-norm-ratio correlation
// ---------------------------------------------------------------------------

struct RatioCorrelation {
    double pearson_log_log = 0;
    double spearman_rank = 0;
    std::size_t used_rows = 0;
    std::size_t excluded_rows = 0;
};

/// Pearson on (log epsilon, log gradient-norm-ratio) and Spearman on the raw
/// values; rows with non-finite or non-positive entries are excluded.
inline RatioCorrelation correlate_loss_vs_grad_ratio(const MetricsTimeSeries& series) {
    VecX eps, ratio;
    std::size_t excluded = 0;
    for (const MetricsRow& row : series) {
        if (std::isfinite(row.epsilon) && row.epsilon > 0 && std::isfinite(row.grad_norm_ratio) &&
            row.grad_norm_ratio > 0) {
            eps.push_back(row.epsilon);
            ratio.push_back(row.grad_norm_ratio);
        } else {
            ++excluded;
        }
    }
    if (eps.size() < 10)
        throw insufficient_data_error("correlate_loss_vs_grad_ratio: fewer than 10 valid rows");
    VecX log_eps(eps.size()), log_ratio(eps.size());
    for (std::size_t i = 0; i < eps.size(); ++i) {
        log_eps[i] = std::log(eps[i]);
        log_ratio[i] = std::log(ratio[i]);
    }
    RatioCorrelation out;
    out.pearson_log_log = pearson(log_eps, log_ratio);
    out.spearman_rank = spearman(eps, ratio);
    out.used_rows = eps.size();
    out.excluded_rows = excluded;
    return out;
}

}  // namespace equidiag
