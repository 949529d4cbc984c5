#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>

#include "equidiag/errors.hpp"
#include "equidiag/linalg.hpp"

namespace equidiag {

/// Invariant loss functions on prediction/target pairs in R^D.
///
/// Both kinds depend on z and y only through ||z - y||, which makes them
/// invariant under any orthogonal block action and convex in z:
///   mse:                        l(z, y) = ||z - y||^2 / D
///   convex-softplus-regression: l(z, y) = softplus(||z - y||^2 / D) - softplus(0)
enum class LossKind { Mse, ConvexSoftplus };

struct LossModel {
    LossKind kind = LossKind::Mse;
    int dimension = 3;
};

inline std::string to_string(LossKind k) {
    return k == LossKind::Mse ? "mse" : "convex-softplus-regression";
}

inline LossKind loss_kind_from_string(const std::string& s) {
    if (s == "mse") return LossKind::Mse;
    if (s == "convex-softplus-regression") return LossKind::ConvexSoftplus;
    throw config_error("unknown loss kind: " + s);
}

namespace detail {
// log(1 + e^t) for t >= 0 without overflow.
inline double softplus_nonneg(double t) { return t + std::log1p(std::exp(-t)); }

inline double sigmoid(double t) { return 1.0 / (1.0 + std::exp(-t)); }

inline void check_dims(const LossModel& model, std::span<const double> z, std::span<const double> y) {
    const auto d = static_cast<std::size_t>(model.dimension);
    if (z.size() != d || y.size() != d) throw shape_error("loss: dimension mismatch");
}
}  // namespace detail

inline double loss(const LossModel& model, std::span<const double> z, std::span<const double> y) {
    detail::check_dims(model, z, y);
    double ss = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double d = z[i] - y[i];
        ss += d * d;
    }
    const double u = ss / model.dimension;
    if (model.kind == LossKind::Mse) return u;
    return detail::softplus_nonneg(u) - std::numbers::ln2;
}

/// Gradient with respect to z.
inline VecX loss_gradient(const LossModel& model, std::span<const double> z, std::span<const double> y) {
    detail::check_dims(model, z, y);
    VecX g(z.size());
    const double two_over_d = 2.0 / model.dimension;
    if (model.kind == LossKind::Mse) {
        for (std::size_t i = 0; i < z.size(); ++i) g[i] = two_over_d * (z[i] - y[i]);
        return g;
    }
    double ss = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double d = z[i] - y[i];
        ss += d * d;
    }
    const double w = detail::sigmoid(ss / model.dimension) * two_over_d;
    for (std::size_t i = 0; i < z.size(); ++i) g[i] = w * (z[i] - y[i]);
    return g;
}

/// D x D Hessian with respect to z. Analytic (and constant) for mse; central
/// finite differences of the analytic gradient for the convex kind, step 1e-4,
/// symmetrized.
inline MatX loss_hessian(const LossModel& model, std::span<const double> z, std::span<const double> y) {
    detail::check_dims(model, z, y);
    const auto d = static_cast<std::size_t>(model.dimension);
    MatX h(d, d);
    if (model.kind == LossKind::Mse) {
        for (std::size_t i = 0; i < d; ++i) h(i, i) = 2.0 / model.dimension;
        return h;
    }
    const double step = 1e-4;
    VecX zp(z.begin(), z.end());
    for (std::size_t j = 0; j < d; ++j) {
        const double saved = zp[j];
        zp[j] = saved + step;
        VecX gp = loss_gradient(model, zp, y);
        zp[j] = saved - step;
        VecX gm = loss_gradient(model, zp, y);
        zp[j] = saved;
        for (std::size_t i = 0; i < d; ++i) h(i, j) = (gp[i] - gm[i]) / (2 * step);
    }
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i + 1; j < d; ++j) {
            const double s = 0.5 * (h(i, j) + h(j, i));
            h(i, j) = s;
            h(j, i) = s;
        }
    return h;
}

}  // namespace equidiag
