#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "equidiag/errors.hpp"
#include "equidiag/linalg.hpp"
#include "equidiag/rng.hpp"

namespace equidiag {

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

struct Segment {
    std::string name;
    std::size_t offset = 0;
    std::size_t length = 0;
};

/// Flat parameter vector with named, disjoint segments covering it.
struct ParameterVector {
    VecX values;
    std::vector<Segment> layout;

    const Segment& segment(std::string_view name) const {
        for (const Segment& s : layout)
            if (s.name == name) return s;
        throw argument_error("unknown parameter segment: " + std::string(name));
    }

    std::span<double> span(std::string_view name) {
        const Segment& s = segment(name);
        return {values.data() + s.offset, s.length};
    }
    std::span<const double> span(std::string_view name) const {
        const Segment& s = segment(name);
        return {values.data() + s.offset, s.length};
    }
};

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------

enum class ModelKind { CoordMlp, InvariantGraphHead, EquivariantBaseline };

inline std::string to_string(ModelKind k) {
    switch (k) {
        case ModelKind::CoordMlp: return "coord-mlp";
        case ModelKind::InvariantGraphHead: return "invariant-graph-head";
        case ModelKind::EquivariantBaseline: return "equivariant-baseline";
    }
    throw argument_error("bad model kind");
}

inline ModelKind model_kind_from_string(const std::string& s) {
    if (s == "coord-mlp") return ModelKind::CoordMlp;
    if (s == "invariant-graph-head") return ModelKind::InvariantGraphHead;
    if (s == "equivariant-baseline") return ModelKind::EquivariantBaseline;
    throw config_error("unknown model kind: " + s);
}

/// Gaussian radial basis shared by the graph models: 8 centers evenly spaced
/// on [0, 4], width 0.5.
inline constexpr int kRadialBasisCount = 8;
inline constexpr double kRadialBasisMax = 4.0;
inline constexpr double kRadialBasisWidth = 0.5;

struct ModelConfig {
    ModelKind kind = ModelKind::CoordMlp;
    int atom_count = 8;  // D = 3 * atom_count
    // Meaning per kind:
    //   coord-mlp:            hidden layer widths (tanh), at least one
    //   invariant-graph-head: {feature-net hidden width, feature dimension h}
    //   equivariant-baseline: {radial-net hidden width}
    std::vector<int> hidden = {32, 32};

    int dimension() const { return 3 * atom_count; }
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

namespace detail {

inline void radial_basis(double r, double* phi) {
    const double spacing = kRadialBasisMax / (kRadialBasisCount - 1);
    for (int m = 0; m < kRadialBasisCount; ++m) {
        const double t = (r - m * spacing) / kRadialBasisWidth;
        phi[m] = std::exp(-0.5 * t * t);
    }
}

/// y = W x + b with W stored row-major (rows x cols).
inline void affine(std::span<const double> w, std::span<const double> b, std::span<const double> x,
                   std::span<double> y) {
    const std::size_t rows = b.size(), cols = x.size();
    for (std::size_t i = 0; i < rows; ++i) {
        const double* wr = w.data() + i * cols;
        double s = b[i];
        for (std::size_t j = 0; j < cols; ++j) s += wr[j] * x[j];
        y[i] = s;
    }
}

/// Accumulate gradients of an affine layer. dy is the cotangent of the
/// output; dx (optional) receives W^T dy.
inline void affine_backward(std::span<const double> w, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dw, std::span<double> db,
                            std::span<double> dx) {
    const std::size_t rows = dy.size(), cols = x.size();
    for (std::size_t i = 0; i < rows; ++i) {
        const double g = dy[i];
        db[i] += g;
        double* dwr = dw.data() + i * cols;
        const double* wr = w.data() + i * cols;
        for (std::size_t j = 0; j < cols; ++j) {
            dwr[j] += g * x[j];
            if (!dx.empty()) dx[j] += wr[j] * g;
        }
    }
}

inline void tanh_inplace(std::span<double> v) {
    for (double& x : v) x = std::tanh(x);
}

}  // namespace detail

/// One of three built-in differentiable models mapping R^D -> R^D.
/// All kinds mean-center the input coordinates per sample before use, so the
/// function is translation-invariant by construction.
///
/// forward() and backward() are pure in (params, input) with fixed summation
/// order; concurrent calls on a shared Model are safe.
class Model {
public:
    Model(ModelConfig config, ParameterVector params)
        : config_(config), params_(std::move(params)) {
        if (params_.values.size() != expected_size(config_))
            throw shape_error("parameter vector size does not match model config");
    }

    /// Deterministic initialization: per-layer uniform(-a, a) with
    /// a = 1/sqrt(fan_in); head rows drawn independently so the initial
    /// deviation from equivariance is generic.
    static Model init(const ModelConfig& config, std::uint64_t seed) {
        ParameterVector p;
        p.layout = layout_for(config);
        p.values.assign(expected_size(config), 0.0);
        RngState root{seed};
        for (std::size_t li = 0; li < p.layout.size(); ++li) {
            const Segment& s = p.layout[li];
            if (s.name.ends_with(".b")) continue;  // biases start at zero
            const std::size_t fan_in = fan_in_for(config, s.name);
            const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
            RngState stream = fork(root, li);
            for (std::size_t i = 0; i < s.length; ++i)
                p.values[s.offset + i] = next_uniform(stream, -a, a);
        }
        return Model(config, std::move(p));
    }

    const ModelConfig& config() const { return config_; }
    ModelKind kind() const { return config_.kind; }
    int dimension() const { return config_.dimension(); }
    const ParameterVector& params() const { return params_; }
    ParameterVector& params() { return params_; }

    VecX forward(std::span<const double> x) const {
        check_input(x);
        switch (config_.kind) {
            case ModelKind::CoordMlp: return forward_mlp(x, nullptr);
            case ModelKind::InvariantGraphHead: return forward_graph_head(x, nullptr);
            case ModelKind::EquivariantBaseline: return forward_baseline(x, nullptr);
        }
        throw argument_error("bad model kind");
    }

    /// Reverse-mode parameter gradient: accumulates d(dot(dout, f(x)))/dtheta
    /// into grad (which must have params size). Recomputes the forward pass
    /// internally.
    void backward(std::span<const double> x, std::span<const double> dout,
                  std::span<double> grad) const {
        check_input(x);
        if (dout.size() != x.size()) throw shape_error("backward: cotangent dimension mismatch");
        if (grad.size() != params_.values.size()) throw shape_error("backward: gradient buffer size mismatch");
        switch (config_.kind) {
            case ModelKind::CoordMlp: backward_mlp(x, dout, grad); return;
            case ModelKind::InvariantGraphHead: backward_graph_head(x, dout, grad); return;
            case ModelKind::EquivariantBaseline: backward_baseline(x, dout, grad); return;
        }
        throw argument_error("bad model kind");
    }

    static std::vector<Segment> layout_for(const ModelConfig& c) {
        std::vector<Segment> segs;
        std::size_t off = 0;
        auto add = [&](const std::string& name, std::size_t len) {
            segs.push_back({name, off, len});
            off += len;
        };
        const std::size_t d = static_cast<std::size_t>(c.dimension());
        switch (c.kind) {
            case ModelKind::CoordMlp: {
                if (c.hidden.empty()) throw config_error("coord-mlp needs at least one hidden layer");
                std::size_t in = d;
                for (std::size_t i = 0; i < c.hidden.size(); ++i) {
                    const auto h = static_cast<std::size_t>(c.hidden[i]);
                    add("dense" + std::to_string(i) + ".w", h * in);
                    add("dense" + std::to_string(i) + ".b", h);
                    in = h;
                }
                add("out.w", d * in);
                add("out.b", d);
                break;
            }
            case ModelKind::InvariantGraphHead: {
                if (c.hidden.size() != 2) throw config_error("invariant-graph-head hidden must be {feature_hidden, feature_dim}");
                const auto f1 = static_cast<std::size_t>(c.hidden[0]);
                const auto h = static_cast<std::size_t>(c.hidden[1]);
                add("feat0.w", f1 * kRadialBasisCount);
                add("feat0.b", f1);
                add("feat1.w", h * f1);
                add("feat1.b", h);
                add("head.w", 3 * h);  // rows w_x, w_y, w_z
                break;
            }
            case ModelKind::EquivariantBaseline: {
                if (c.hidden.size() != 1) throw config_error("equivariant-baseline hidden must be {radial_hidden}");
                const auto r = static_cast<std::size_t>(c.hidden[0]);
                add("radial0.w", r * kRadialBasisCount);
                add("radial0.b", r);
                add("radial1.w", r);
                add("radial1.b", 1);
                break;
            }
        }
        return segs;
    }

    static std::size_t expected_size(const ModelConfig& c) {
        std::size_t n = 0;
        for (const Segment& s : layout_for(c)) n += s.length;
        return n;
    }

private:
    ModelConfig config_;
    ParameterVector params_;

    void check_input(std::span<const double> x) const {
        if (x.size() != static_cast<std::size_t>(config_.dimension()))
            throw shape_error("model input dimension mismatch");
    }

    static std::size_t fan_in_for(const ModelConfig& c, const std::string& seg) {
        if (seg == "feat0.w" || seg == "radial0.w") return kRadialBasisCount;
        if (seg == "feat1.w") return static_cast<std::size_t>(c.hidden[0]);
        if (seg == "head.w") return static_cast<std::size_t>(c.hidden[1]);
        if (seg == "radial1.w") return static_cast<std::size_t>(c.hidden[0]);
        if (seg == "out.w") return static_cast<std::size_t>(c.hidden.back());
        if (seg.starts_with("dense")) {
            const int i = std::stoi(seg.substr(5));
            return i == 0 ? static_cast<std::size_t>(c.dimension()) : static_cast<std::size_t>(c.hidden[static_cast<std::size_t>(i - 1)]);
        }
        throw argument_error("fan_in_for: unknown segment " + seg);
    }

    VecX centered(std::span<const double> x) const {
        const int n = config_.atom_count;
        double cx = 0, cy = 0, cz = 0;
        for (int i = 0; i < n; ++i) {
            cx += x[static_cast<std::size_t>(3 * i)];
            cy += x[static_cast<std::size_t>(3 * i + 1)];
            cz += x[static_cast<std::size_t>(3 * i + 2)];
        }
        cx /= n;
        cy /= n;
        cz /= n;
        VecX out(x.size());
        for (int i = 0; i < n; ++i) {
            out[static_cast<std::size_t>(3 * i)] = x[static_cast<std::size_t>(3 * i)] - cx;
            out[static_cast<std::size_t>(3 * i + 1)] = x[static_cast<std::size_t>(3 * i + 1)] - cy;
            out[static_cast<std::size_t>(3 * i + 2)] = x[static_cast<std::size_t>(3 * i + 2)] - cz;
        }
        return out;
    }

    // ---- coord-mlp ---------------------------------------------------------

    VecX forward_mlp(std::span<const double> x, std::vector<VecX>* acts) const {
        VecX z = centered(x);
        if (acts) acts->push_back(z);
        for (std::size_t i = 0; i < config_.hidden.size(); ++i) {
            const std::string tag = "dense" + std::to_string(i);
            VecX a(static_cast<std::size_t>(config_.hidden[i]));
            detail::affine(params_.span(tag + ".w"), params_.span(tag + ".b"), z, a);
            detail::tanh_inplace(a);
            z = std::move(a);
            if (acts) acts->push_back(z);
        }
        VecX out(static_cast<std::size_t>(config_.dimension()));
        detail::affine(params_.span("out.w"), params_.span("out.b"), z, out);
        return out;
    }

    void backward_mlp(std::span<const double> x, std::span<const double> dout,
                      std::span<double> grad) const {
        std::vector<VecX> acts;  // acts[0] = centered input, acts[i+1] = tanh output of layer i
        forward_mlp(x, &acts);
        const std::size_t layers = config_.hidden.size();

        VecX dz(acts[layers].size(), 0.0);
        {
            const Segment& sw = params_.segment("out.w");
            const Segment& sb = params_.segment("out.b");
            detail::affine_backward(params_.span("out.w"), acts[layers], dout,
                                    grad.subspan(sw.offset, sw.length), grad.subspan(sb.offset, sb.length), dz);
        }
        for (std::size_t i = layers; i-- > 0;) {
            // through tanh: da = dz * (1 - z^2)
            VecX da(dz.size());
            for (std::size_t k = 0; k < dz.size(); ++k) da[k] = dz[k] * (1.0 - acts[i + 1][k] * acts[i + 1][k]);
            const std::string tag = "dense" + std::to_string(i);
            const Segment& sw = params_.segment(tag + ".w");
            const Segment& sb = params_.segment(tag + ".b");
            VecX dprev(acts[i].size(), 0.0);
            detail::affine_backward(params_.span(tag + ".w"), acts[i], da,
                                    grad.subspan(sw.offset, sw.length), grad.subspan(sb.offset, sb.length),
                                    i == 0 ? std::span<double>{} : std::span<double>(dprev));
            dz = std::move(dprev);
        }
    }

    // ---- invariant-graph-head ----------------------------------------------

    /// Per atom i: o_i = sum_{j != i} (e_x w_x^T h, e_y w_y^T h, e_z w_z^T h)
    /// with e = x_j - x_i and h a tanh MLP of the radial basis of |e|.
    VecX forward_graph_head(std::span<const double> x, std::vector<VecX>*) const {
        const int n = config_.atom_count;
        const auto f1 = static_cast<std::size_t>(config_.hidden[0]);
        const auto hdim = static_cast<std::size_t>(config_.hidden[1]);
        const auto w0 = params_.span("feat0.w");
        const auto b0 = params_.span("feat0.b");
        const auto w1 = params_.span("feat1.w");
        const auto b1 = params_.span("feat1.b");
        const auto head = params_.span("head.w");

        VecX xc = centered(x);
        VecX out(x.size(), 0.0);
        VecX phi(kRadialBasisCount), u(f1), h(hdim);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                if (j == i) continue;
                const double ex = xc[static_cast<std::size_t>(3 * j)] - xc[static_cast<std::size_t>(3 * i)];
                const double ey = xc[static_cast<std::size_t>(3 * j + 1)] - xc[static_cast<std::size_t>(3 * i + 1)];
                const double ez = xc[static_cast<std::size_t>(3 * j + 2)] - xc[static_cast<std::size_t>(3 * i + 2)];
                const double r = std::sqrt(ex * ex + ey * ey + ez * ez);
                detail::radial_basis(r, phi.data());
                detail::affine(w0, b0, phi, u);
                detail::tanh_inplace(u);
                detail::affine(w1, b1, u, h);
                detail::tanh_inplace(h);
                const double px = dot({head.data(), hdim}, h);
                const double py = dot({head.data() + hdim, hdim}, h);
                const double pz = dot({head.data() + 2 * hdim, hdim}, h);
                out[static_cast<std::size_t>(3 * i)] += ex * px;
                out[static_cast<std::size_t>(3 * i + 1)] += ey * py;
                out[static_cast<std::size_t>(3 * i + 2)] += ez * pz;
            }
        }
        return out;
    }

    void backward_graph_head(std::span<const double> x, std::span<const double> dout,
                             std::span<double> grad) const {
        const int n = config_.atom_count;
        const auto f1 = static_cast<std::size_t>(config_.hidden[0]);
        const auto hdim = static_cast<std::size_t>(config_.hidden[1]);
        const auto w0 = params_.span("feat0.w");
        const auto b0 = params_.span("feat0.b");
        const auto w1 = params_.span("feat1.w");
        const auto b1 = params_.span("feat1.b");
        const auto head = params_.span("head.w");
        const Segment& s_w0 = params_.segment("feat0.w");
        const Segment& s_b0 = params_.segment("feat0.b");
        const Segment& s_w1 = params_.segment("feat1.w");
        const Segment& s_b1 = params_.segment("feat1.b");
        const Segment& s_head = params_.segment("head.w");
        auto g_w0 = grad.subspan(s_w0.offset, s_w0.length);
        auto g_b0 = grad.subspan(s_b0.offset, s_b0.length);
        auto g_w1 = grad.subspan(s_w1.offset, s_w1.length);
        auto g_b1 = grad.subspan(s_b1.offset, s_b1.length);
        auto g_head = grad.subspan(s_head.offset, s_head.length);

        VecX xc = centered(x);
        VecX phi(kRadialBasisCount), u(f1), h(hdim), dh(hdim), du(f1), da1(hdim), da0(f1);
        for (int i = 0; i < n; ++i) {
            const double gx = dout[static_cast<std::size_t>(3 * i)];
            const double gy = dout[static_cast<std::size_t>(3 * i + 1)];
            const double gz = dout[static_cast<std::size_t>(3 * i + 2)];
            for (int j = 0; j < n; ++j) {
                if (j == i) continue;
                const double ex = xc[static_cast<std::size_t>(3 * j)] - xc[static_cast<std::size_t>(3 * i)];
                const double ey = xc[static_cast<std::size_t>(3 * j + 1)] - xc[static_cast<std::size_t>(3 * i + 1)];
                const double ez = xc[static_cast<std::size_t>(3 * j + 2)] - xc[static_cast<std::size_t>(3 * i + 2)];
                const double r = std::sqrt(ex * ex + ey * ey + ez * ez);
                detail::radial_basis(r, phi.data());
                detail::affine(w0, b0, phi, u);
                detail::tanh_inplace(u);
                detail::affine(w1, b1, u, h);
                detail::tanh_inplace(h);

                // head.w rows and the feature cotangent
                const double cx = gx * ex, cy = gy * ey, cz = gz * ez;
                for (std::size_t k = 0; k < hdim; ++k) {
                    g_head[k] += cx * h[k];
                    g_head[hdim + k] += cy * h[k];
                    g_head[2 * hdim + k] += cz * h[k];
                    dh[k] = cx * head[k] + cy * head[hdim + k] + cz * head[2 * hdim + k];
                }
                for (std::size_t k = 0; k < hdim; ++k) da1[k] = dh[k] * (1.0 - h[k] * h[k]);
                std::fill(du.begin(), du.end(), 0.0);
                detail::affine_backward(w1, u, da1, g_w1, g_b1, du);
                for (std::size_t k = 0; k < f1; ++k) da0[k] = du[k] * (1.0 - u[k] * u[k]);
                detail::affine_backward(w0, phi, da0, g_w0, g_b0, {});
            }
        }
    }

    // ---- equivariant-baseline ----------------------------------------------

    /// o_i = sum_{j != i} s(r_ij) (x_j - x_i) with s a learnable scalar radial
    /// function; exactly equivariant for every parameter value.
    VecX forward_baseline(std::span<const double> x, std::vector<VecX>*) const {
        const int n = config_.atom_count;
        const auto rdim = static_cast<std::size_t>(config_.hidden[0]);
        const auto w0 = params_.span("radial0.w");
        const auto b0 = params_.span("radial0.b");
        const auto w1 = params_.span("radial1.w");
        const double c = params_.span("radial1.b")[0];

        VecX xc = centered(x);
        VecX out(x.size(), 0.0);
        VecX phi(kRadialBasisCount), u(rdim);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                if (j == i) continue;
                const double ex = xc[static_cast<std::size_t>(3 * j)] - xc[static_cast<std::size_t>(3 * i)];
                const double ey = xc[static_cast<std::size_t>(3 * j + 1)] - xc[static_cast<std::size_t>(3 * i + 1)];
                const double ez = xc[static_cast<std::size_t>(3 * j + 2)] - xc[static_cast<std::size_t>(3 * i + 2)];
                const double r = std::sqrt(ex * ex + ey * ey + ez * ez);
                detail::radial_basis(r, phi.data());
                detail::affine(w0, b0, phi, u);
                detail::tanh_inplace(u);
                const double s = dot(w1, u) + c;
                out[static_cast<std::size_t>(3 * i)] += s * ex;
                out[static_cast<std::size_t>(3 * i + 1)] += s * ey;
                out[static_cast<std::size_t>(3 * i + 2)] += s * ez;
            }
        }
        return out;
    }

    void backward_baseline(std::span<const double> x, std::span<const double> dout,
                           std::span<double> grad) const {
        const int n = config_.atom_count;
        const auto rdim = static_cast<std::size_t>(config_.hidden[0]);
        const auto w0 = params_.span("radial0.w");
        const auto b0 = params_.span("radial0.b");
        const auto w1 = params_.span("radial1.w");
        const Segment& s_w0 = params_.segment("radial0.w");
        const Segment& s_b0 = params_.segment("radial0.b");
        const Segment& s_w1 = params_.segment("radial1.w");
        const Segment& s_b1 = params_.segment("radial1.b");
        auto g_w0 = grad.subspan(s_w0.offset, s_w0.length);
        auto g_b0 = grad.subspan(s_b0.offset, s_b0.length);
        auto g_w1 = grad.subspan(s_w1.offset, s_w1.length);
        auto g_b1 = grad.subspan(s_b1.offset, s_b1.length);

        VecX xc = centered(x);
        VecX phi(kRadialBasisCount), u(rdim), da0(rdim);
        for (int i = 0; i < n; ++i) {
            const double gx = dout[static_cast<std::size_t>(3 * i)];
            const double gy = dout[static_cast<std::size_t>(3 * i + 1)];
            const double gz = dout[static_cast<std::size_t>(3 * i + 2)];
            for (int j = 0; j < n; ++j) {
                if (j == i) continue;
                const double ex = xc[static_cast<std::size_t>(3 * j)] - xc[static_cast<std::size_t>(3 * i)];
                const double ey = xc[static_cast<std::size_t>(3 * j + 1)] - xc[static_cast<std::size_t>(3 * i + 1)];
                const double ez = xc[static_cast<std::size_t>(3 * j + 2)] - xc[static_cast<std::size_t>(3 * i + 2)];
                const double r = std::sqrt(ex * ex + ey * ey + ez * ez);
                detail::radial_basis(r, phi.data());
                detail::affine(w0, b0, phi, u);
                detail::tanh_inplace(u);
                const double ds = gx * ex + gy * ey + gz * ez;  // d(loss)/d(s)
                g_b1[0] += ds;
                for (std::size_t k = 0; k < rdim; ++k) {
                    g_w1[k] += ds * u[k];
                    da0[k] = ds * w1[k] * (1.0 - u[k] * u[k]);
                }
                detail::affine_backward(w0, phi, da0, g_w0, g_b0, {});
            }
        }
    }
};

}  // namespace equidiag
