#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "equidiag/errors.hpp"
#include "equidiag/group.hpp"
#include "equidiag/linalg.hpp"
#include "equidiag/losses.hpp"
#include "equidiag/models.hpp"
#include "equidiag/rng.hpp"
#include "equidiag/threading.hpp"

namespace equidiag {

/// A labelled set of (input, target) pairs in R^D, D = 3 * atom_count.
struct Dataset {
    int atom_count = 0;
    std::vector<VecX> inputs;
    std::vector<VecX> targets;

    std::size_t size() const { return inputs.size(); }
    int dimension() const { return 3 * atom_count; }

    Dataset slice(std::size_t begin, std::size_t count) const {
        Dataset d;
        d.atom_count = atom_count;
        for (std::size_t i = begin; i < begin + count && i < inputs.size(); ++i) {
            d.inputs.push_back(inputs[i]);
            d.targets.push_back(targets[i]);
        }
        return d;
    }
};

// ---------------------------------------------------------------------------
// Twisting and twirling
// ---------------------------------------------------------------------------

/// Twisted predictions for one input: row i holds T_i^{-1} f(T_i x).
struct TwistedBatch {
    std::vector<GroupElement> elements;
    MatX predictions;  // N x D
};

/// Generic version over any callable R^D -> R^D.
template <typename Fn>
TwistedBatch twist_fn(Fn&& f, const BlockAction& action, std::span<const double> x,
                      const std::vector<GroupElement>& elements) {
    if (x.size() != static_cast<std::size_t>(action.dimension()))
        throw shape_error("twist: input dimension does not match action");
    TwistedBatch batch;
    batch.elements = elements;
    batch.predictions = MatX(elements.size(), x.size());
    VecX rotated(x.size());
    for (std::size_t i = 0; i < elements.size(); ++i) {
        apply_blocks(elements[i].matrix, x, rotated);
        VecX pred;
        try {
            pred = f(std::span<const double>(rotated));
        } catch (const std::exception& e) {
            throw numeric_error("model evaluation failed at sample rotation index " + std::to_string(i) + ": " + e.what());
        }
        if (pred.size() != x.size()) throw shape_error("twist: prediction dimension mismatch");
        apply_blocks(elements[i].matrix.transpose(), pred, batch.predictions.row(i));
    }
    return batch;
}

inline TwistedBatch twist(const Model& model, const BlockAction& action, std::span<const double> x,
                          const std::vector<GroupElement>& elements) {
    if (static_cast<std::size_t>(model.dimension()) != x.size())
        throw shape_error("twist: model dimension does not match input");
    return twist_fn([&](std::span<const double> v) { return model.forward(v); }, action, x, elements);
}

/// Row mean of the twisted predictions; the exact group average when the
/// elements enumerate a finite group.
inline VecX twirl(const TwistedBatch& batch) {
    if (batch.predictions.rows == 0) throw argument_error("twirl: empty batch");
    VecX mu(batch.predictions.cols, 0.0);
    for (std::size_t i = 0; i < batch.predictions.rows; ++i) axpy(1.0, batch.predictions.row(i), mu);
    scale(mu, 1.0 / static_cast<double>(batch.predictions.rows));
    return mu;
}

// ---------------------------------------------------------------------------
// Loss decomposition
// ---------------------------------------------------------------------------

struct LossDecomposition {
    double total = 0;   // L
    double mean = 0;    // L_mean, twirled prediction error
    double equiv = 0;   // L_equiv, equivariance error
    double percent = 0; // equiv / total; NaN when total < 1e-30
};

namespace detail {

inline double percent_of(double equiv, double total) {
    if (total < 1e-30) return std::numeric_limits<double>::quiet_NaN();
    return equiv / total;
}

struct SampleDecomp {
    double total = 0;       // (1/N) sum_i l(Z_i, y)
    double mean = 0;        // l(mu_hat, y)
    double diff = 0;        // total - mean, clamped at 0 inside -1e-12
    double variance = 0;    // (1/(N D)) sum_i ||Z_i - mu_hat||^2
    VecX mu_hat;
};

inline SampleDecomp decompose_sample(const Model& model, const LossModel& loss_model,
                                     const BlockAction& action, std::span<const double> x,
                                     std::span<const double> y,
                                     const std::vector<GroupElement>& elements) {
    const TwistedBatch batch = twist(model, action, x, elements);
    SampleDecomp r;
    r.mu_hat = twirl(batch);
    const std::size_t n = batch.predictions.rows;
    const double d = static_cast<double>(action.dimension());
    for (std::size_t i = 0; i < n; ++i) {
        r.total += loss(loss_model, batch.predictions.row(i), y);
        VecX dev = sub(batch.predictions.row(i), r.mu_hat);
        r.variance += norm_sq(dev);
    }
    r.total /= static_cast<double>(n);
    r.variance /= static_cast<double>(n) * d;
    r.mean = loss(loss_model, r.mu_hat, y);
    r.diff = r.total - r.mean;
    if (r.diff < 0) {
        if (r.diff < -1e-12)
            throw numeric_error("per-sample Jensen gap below -1e-12; decomposition is inconsistent");
        r.diff = 0.0;  // floating-point Jensen violation, population value is non-negative
    }
    return r;
}

}  // namespace detail

/// Decomposition with one shared element list for every sample. With a full
/// finite-group enumeration this is the exact decomposition; landscape and
/// Hessian probes reuse it with a fixed sampled rotation set.
inline LossDecomposition decompose_with_elements(const Model& model, const LossModel& loss_model,
                                                 const BlockAction& action, const Dataset& data,
                                                 const std::vector<GroupElement>& elements,
                                                 int threads = 1) {
    if (data.size() == 0) throw argument_error("decompose: empty dataset");
    if (elements.empty()) throw argument_error("decompose: empty element list");
    std::vector<detail::SampleDecomp> per(data.size());
    parallel_for(data.size(), threads, [&](std::size_t s) {
        per[s] = detail::decompose_sample(model, loss_model, action, data.inputs[s], data.targets[s], elements);
    });
    LossDecomposition out;
    double variance = 0;
    for (const auto& r : per) {
        out.total += r.total;
        out.mean += r.mean;
        out.equiv += r.diff;
        variance += r.variance;
    }
    const double ns = static_cast<double>(data.size());
    out.total /= ns;
    out.mean /= ns;
    out.equiv /= ns;
    variance /= ns;
    if (loss_model.kind == LossKind::Mse) {
        // Direct variance route; must reconcile with total - mean.
        const double resid = std::abs(out.total - (out.mean + variance));
        if (resid > 1e-10 * std::max(out.total, 1e-30))
            throw numeric_error("mse decomposition identity violated");
        out.equiv = variance;
    }
    out.percent = detail::percent_of(out.equiv, out.total);
    return out;
}

/// Exact decomposition by enumerating a finite group.
inline LossDecomposition decompose_exact(const Model& model, const LossModel& loss_model,
                                         const BlockAction& action, const Dataset& data,
                                         const GroupSpec& group, int threads = 1) {
    if (group.kind != GroupKind::FiniteSubgroup)
        throw unsupported_error("decompose_exact needs a finite group; use decompose_sampled for SO(3)");
    return decompose_with_elements(model, loss_model, action, data, enumerate(group), threads);
}

// ---------------------------------------------------------------------------
// Finite-sample estimators
// ---------------------------------------------------------------------------

/// Bias-corrected estimates, aggregated as dataset means.
///
/// Per sample with N rotations: sigma_hat^2 = (1/(N D)) sum ||Z_i - mu_hat||^2
/// (divide-by-N variance; equals the naive total-mean gap for mse), then
///   equiv (unbiased)  = N/(N-1) * sigma_hat^2
///   mean  (unbiased)  = l(mu_hat, y) - sigma_hat^2/(N-1)
///   percent           = aggregated equiv / aggregated naive total
/// For the convex loss kind the same corrections are applied to the Jensen
/// gap; they are second-order accurate there, not exact.
struct EstimatorReport {
    VecX mu_hat;                     // dataset mean of the per-sample twirled estimates
    double sigma_hat_sq = 0;         // dataset mean of the per-sample biased variances
    double mean_loss_unbiased = 0;
    double equiv_loss_unbiased = 0;
    double percent_bias_corrected = 0;
    int rotation_count = 0;
};

struct SampledDecomposition {
    LossDecomposition naive;
    EstimatorReport report;
};

/// Monte Carlo decomposition with N fresh rotations per sample. Advances the
/// caller's rng once; per-sample streams are forked from that draw so results
/// do not depend on the thread count.
inline SampledDecomposition decompose_sampled(const Model& model, const LossModel& loss_model,
                                              const BlockAction& action, const Dataset& data,
                                              const GroupSpec& group, int n_rotations, RngState& rng,
                                              int threads = 1) {
    if (n_rotations < 2) throw argument_error("decompose_sampled: need N >= 2 for the Bessel correction");
    if (data.size() == 0) throw argument_error("decompose_sampled: empty dataset");
    const RngState base{next_u64(rng)};
    std::vector<detail::SampleDecomp> per(data.size());
    parallel_for(data.size(), threads, [&](std::size_t s) {
        RngState stream = fork(base, s);
        std::vector<GroupElement> elements(static_cast<std::size_t>(n_rotations));
        for (auto& e : elements) e = sample_uniform(group, stream);
        per[s] = detail::decompose_sample(model, loss_model, action, data.inputs[s], data.targets[s], elements);
    });

    const double n = static_cast<double>(n_rotations);
    const double ns = static_cast<double>(data.size());
    SampledDecomposition out;
    out.report.rotation_count = n_rotations;
    out.report.mu_hat.assign(static_cast<std::size_t>(action.dimension()), 0.0);
    for (const auto& r : per) {
        out.naive.total += r.total;
        out.naive.mean += r.mean;
        out.naive.equiv += loss_model.kind == LossKind::Mse ? r.variance : r.diff;
        out.report.sigma_hat_sq += r.variance;
        out.report.equiv_loss_unbiased += n / (n - 1) * r.diff;
        out.report.mean_loss_unbiased += r.mean - r.diff / (n - 1);
        axpy(1.0 / ns, r.mu_hat, out.report.mu_hat);
    }
    out.naive.total /= ns;
    out.naive.mean /= ns;
    out.naive.equiv /= ns;
    out.naive.percent = detail::percent_of(out.naive.equiv, out.naive.total);
    out.report.sigma_hat_sq /= ns;
    out.report.equiv_loss_unbiased /= ns;
    out.report.mean_loss_unbiased /= ns;
    out.report.percent_bias_corrected = detail::percent_of(out.report.equiv_loss_unbiased, out.naive.total);
    return out;
}

// ---------------------------------------------------------------------------
// Second-order Taylor cross-check
// ---------------------------------------------------------------------------

/// (1/2) E_{x,y}[ tr(H_l(mu(x), y) Cov_T[Z_x(T)]) ] over an enumerated finite
/// group. Equals L_equiv exactly for mse; a second-order approximation for
/// the convex kind.
inline double second_order_equiv_error(const Model& model, const LossModel& loss_model,
                                       const BlockAction& action, const Dataset& data,
                                       const GroupSpec& group, int threads = 1) {
    const std::vector<GroupElement>& elements = enumerate(group);
    if (data.size() == 0) throw argument_error("second_order_equiv_error: empty dataset");
    const auto d = static_cast<std::size_t>(action.dimension());
    std::vector<double> per(data.size(), 0.0);
    parallel_for(data.size(), threads, [&](std::size_t s) {
        const TwistedBatch batch = twist(model, action, data.inputs[s], elements);
        const VecX mu = twirl(batch);
        MatX cov(d, d);
        for (std::size_t i = 0; i < batch.predictions.rows; ++i) {
            VecX dev = sub(batch.predictions.row(i), mu);
            for (std::size_t a = 0; a < d; ++a)
                for (std::size_t b = 0; b < d; ++b) cov(a, b) += dev[a] * dev[b];
        }
        scale(cov.a, 1.0 / static_cast<double>(batch.predictions.rows));
        const MatX hess = loss_hessian(loss_model, mu, data.targets[s]);
        double tr = 0;
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = 0; b < d; ++b) tr += hess(a, b) * cov(b, a);
        per[s] = 0.5 * tr;
    });
    return std::accumulate(per.begin(), per.end(), 0.0) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Rotation-count sensitivity bootstrap
// ---------------------------------------------------------------------------

struct SensitivityRow {
    int n = 0;
    double percent_mean = 0;
    double percent_stderr = 0;
};

struct SensitivityTable {
    std::vector<SensitivityRow> rows;
    bool low_repeats_warning = false;
};

/// Computes twisted predictions once over maxN rotations per sample, then
/// for each N in {2..maxN} resamples N rotation indices (with replacement,
/// shared across samples) `repeats` times and reports the spread of the
/// bias-corrected percent estimate.
inline SensitivityTable sensitivity_bootstrap(const Model& model, const LossModel& loss_model,
                                              const BlockAction& action, const Dataset& data,
                                              const GroupSpec& group, int max_n, int repeats,
                                              RngState& rng, int threads = 1) {
    if (max_n < 2) throw argument_error("sensitivity_bootstrap: need maxN >= 2");
    if (repeats < 1) throw argument_error("sensitivity_bootstrap: need repeats >= 1");
    if (data.size() == 0) throw argument_error("sensitivity_bootstrap: empty dataset");

    const auto d = static_cast<std::size_t>(action.dimension());
    const auto n_samples = data.size();
    const auto pool = static_cast<std::size_t>(max_n);

    // Cache predictions and per-rotation losses.
    std::vector<MatX> preds(n_samples);
    std::vector<VecX> losses(n_samples);
    const RngState base{next_u64(rng)};
    parallel_for(n_samples, threads, [&](std::size_t s) {
        RngState stream = fork(base, s);
        std::vector<GroupElement> elements(pool);
        for (auto& e : elements) e = sample_uniform(group, stream);
        const TwistedBatch batch = twist(model, action, data.inputs[s], elements);
        preds[s] = batch.predictions;
        losses[s].resize(pool);
        for (std::size_t i = 0; i < pool; ++i)
            losses[s][i] = loss(loss_model, batch.predictions.row(i), data.targets[s]);
    });

    auto percent_for_subset = [&](std::span<const std::size_t> idx) {
        const double n = static_cast<double>(idx.size());
        double total = 0, equiv_corr = 0;
        VecX mu(d);
        for (std::size_t s = 0; s < n_samples; ++s) {
            std::fill(mu.begin(), mu.end(), 0.0);
            double t = 0;
            for (const std::size_t i : idx) {
                axpy(1.0, preds[s].row(i), mu);
                t += losses[s][i];
            }
            scale(mu, 1.0 / n);
            t /= n;
            double diff = t - loss(loss_model, mu, data.targets[s]);
            if (diff < 0 && diff >= -1e-12) diff = 0;
            total += t;
            equiv_corr += n / (n - 1) * diff;
        }
        return detail::percent_of(equiv_corr / static_cast<double>(n_samples),
                                  total / static_cast<double>(n_samples));
    };

    SensitivityTable table;
    table.low_repeats_warning = repeats < 10;
    RngState boot = fork(base, 0x626f6f74);
    std::vector<std::size_t> idx;
    for (int n = 2; n <= max_n; ++n) {
        idx.resize(static_cast<std::size_t>(n));
        double sum = 0, sum_sq = 0;
        int valid = 0;
        for (int rep = 0; rep < repeats; ++rep) {
            for (auto& i : idx) i = static_cast<std::size_t>(next_u64(boot) % pool);
            const double p = percent_for_subset(idx);
            if (std::isnan(p)) continue;
            sum += p;
            sum_sq += p * p;
            ++valid;
        }
        SensitivityRow row;
        row.n = n;
        if (valid > 0) {
            row.percent_mean = sum / valid;
            const double var = std::max(0.0, sum_sq / valid - row.percent_mean * row.percent_mean);
            row.percent_stderr = std::sqrt(var);
        }
        table.rows.push_back(row);
    }
    return table;
}

}  // namespace equidiag
