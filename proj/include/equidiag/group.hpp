#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "equidiag/errors.hpp"
#include "equidiag/linalg.hpp"
#include "equidiag/rng.hpp"

namespace equidiag {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// A proper rotation: orthogonal 3x3 matrix with determinant +1.
struct GroupElement {
    Mat3 matrix = Mat3::identity();
    std::string label;  // optional, filled by the finite-group builders
};

enum class GroupKind { ContinuousSO3, FiniteSubgroup };

struct GroupSpec {
    GroupKind kind = GroupKind::ContinuousSO3;
    std::vector<GroupElement> elements;  // finite case only
    std::uint64_t seed = 0;
};

/// Block-diagonal action of a rotation on R^{3N}: each consecutive 3-vector
/// of a flattened coordinate list is rotated by the same matrix.
struct BlockAction {
    GroupSpec group;
    int block_count = 1;

    int dimension() const { return 3 * block_count; }
};

// ---------------------------------------------------------------------------
// Element-level checks
// ---------------------------------------------------------------------------

inline double orthogonality_defect(const Mat3& m) {
    Mat3 mtm = m.transpose() * m;
    return max_abs_diff(mtm, Mat3::identity());
}

inline bool is_rotation(const Mat3& m, double tol = 1e-12) {
    return orthogonality_defect(m) <= tol && std::abs(m.det() - 1.0) <= tol;
}

inline GroupElement inverse(const GroupElement& g) {
    GroupElement inv;
    inv.matrix = g.matrix.transpose();
    if (!g.label.empty()) inv.label = g.label + "^-1";
    return inv;
}

// ---------------------------------------------------------------------------
// Spec validation
// ---------------------------------------------------------------------------

/// Finite-subgroup invariants: every element a rotation, identity present,
/// closed under composition and inverse (tolerance 1e-10 by enumeration).
inline void validate(const GroupSpec& spec) {
    if (spec.kind == GroupKind::ContinuousSO3) return;
    if (spec.elements.empty()) throw config_error("finite group spec has no elements");

    for (const GroupElement& g : spec.elements) {
        if (orthogonality_defect(g.matrix) > 1e-12)
            throw config_error("group element is not orthogonal");
        if (std::abs(g.matrix.det() - 1.0) > 1e-12)
            throw config_error("group element is not a proper rotation (det != +1)");
    }

    const double tol = 1e-10;
    auto find = [&](const Mat3& m) -> bool {
        for (const GroupElement& g : spec.elements)
            if (max_abs_diff(g.matrix, m) <= tol) return true;
        return false;
    };

    if (!find(Mat3::identity())) throw config_error("finite group does not contain the identity");
    for (const GroupElement& g : spec.elements) {
        if (!find(g.matrix.transpose())) throw config_error("finite group is not closed under inverse");
        for (const GroupElement& h : spec.elements)
            if (!find(g.matrix * h.matrix)) throw config_error("finite group is not closed under composition");
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

namespace detail {
inline Mat3 quaternion_to_matrix(double w, double x, double y, double z) {
    Mat3 m;
    m(0, 0) = 1 - 2 * (y * y + z * z);
    m(0, 1) = 2 * (x * y - w * z);
    m(0, 2) = 2 * (x * z + w * y);
    m(1, 0) = 2 * (x * y + w * z);
    m(1, 1) = 1 - 2 * (x * x + z * z);
    m(1, 2) = 2 * (y * z - w * x);
    m(2, 0) = 2 * (x * z - w * y);
    m(2, 1) = 2 * (y * z + w * x);
    m(2, 2) = 1 - 2 * (x * x + y * y);
    return m;
}
}  // namespace detail

/// Haar-uniform rotation: normalize a 4-vector of independent standard
/// Gaussians to a unit quaternion and convert. Finite case: uniform index.
inline GroupElement sample_uniform(const GroupSpec& spec, RngState& rng) {
    if (spec.kind == GroupKind::FiniteSubgroup) {
        if (spec.elements.empty()) throw config_error("cannot sample from an empty finite group");
        const std::size_t idx = static_cast<std::size_t>(next_u64(rng) % spec.elements.size());
        return spec.elements[idx];
    }
    double q[4];
    double n2 = 0;
    do {
        n2 = 0;
        for (double& c : q) {
            c = next_gaussian(rng);
            n2 += c * c;
        }
    } while (n2 < 1e-300);
    const double inv = 1.0 / std::sqrt(n2);
    GroupElement g;
    g.matrix = detail::quaternion_to_matrix(q[0] * inv, q[1] * inv, q[2] * inv, q[3] * inv);
    return g;
}

inline const std::vector<GroupElement>& enumerate(const GroupSpec& spec) {
    if (spec.kind != GroupKind::FiniteSubgroup)
        throw unsupported_error("enumerate: continuous groups cannot be enumerated");
    return spec.elements;
}

/// Rotate each consecutive 3-block of `in` by `m`, writing into `out`.
inline void apply_blocks(const Mat3& m, std::span<const double> in, std::span<double> out) {
    const std::size_t n = in.size() / 3;
    for (std::size_t b = 0; b < n; ++b) {
        const double x = in[3 * b], y = in[3 * b + 1], z = in[3 * b + 2];
        out[3 * b] = m(0, 0) * x + m(0, 1) * y + m(0, 2) * z;
        out[3 * b + 1] = m(1, 0) * x + m(1, 1) * y + m(1, 2) * z;
        out[3 * b + 2] = m(2, 0) * x + m(2, 1) * y + m(2, 2) * z;
    }
}

inline VecX apply(const BlockAction& action, const GroupElement& g, std::span<const double> v) {
    if (v.size() != static_cast<std::size_t>(action.dimension()))
        throw shape_error("apply: vector length does not match action dimension");
    VecX out(v.size());
    apply_blocks(g.matrix, v, out);
    return out;
}

// ---------------------------------------------------------------------------
// Builders (exact integer entries, so projector averages are exact)
// ---------------------------------------------------------------------------

inline GroupSpec identity_group() {
    GroupSpec spec;
    spec.kind = GroupKind::FiniteSubgroup;
    spec.elements.push_back({Mat3::identity(), "e"});
    return spec;
}

namespace detail {
inline Mat3 axis_rotation_90(int axis) {
    // Exact 90-degree rotation about the given axis (0=x, 1=y, 2=z).
    Mat3 m{};
    const int u = (axis + 1) % 3, v = (axis + 2) % 3;
    m(axis, axis) = 1;
    m(u, v) = -1;
    m(v, u) = 1;
    return m;
}
}  // namespace detail

/// Cyclic group of rotations about one axis; order must be 1, 2 or 4
/// (these have exact double-precision matrices).
inline GroupSpec cyclic_about_axis(int axis, int order) {
    if (axis < 0 || axis > 2) throw argument_error("cyclic_about_axis: axis must be 0, 1 or 2");
    if (order != 1 && order != 2 && order != 4)
        throw argument_error("cyclic_about_axis: order must be 1, 2 or 4");
    const char axis_name[3] = {'x', 'y', 'z'};
    const Mat3 quarter = detail::axis_rotation_90(axis);
    GroupSpec spec;
    spec.kind = GroupKind::FiniteSubgroup;
    Mat3 cur = Mat3::identity();
    const int step = 4 / order;
    for (int k = 0; k < order; ++k) {
        spec.elements.push_back({cur, std::string(1, axis_name[axis]) + std::to_string(90 * step * k)});
        for (int s = 0; s < step; ++s) cur = quarter * cur;
    }
    return spec;
}

/// The 24 rotations of the cube: signed permutation matrices with det +1.
inline GroupSpec octahedral_rotations() {
    GroupSpec spec;
    spec.kind = GroupKind::FiniteSubgroup;
    const int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
    for (const auto& p : perms) {
        for (int signs = 0; signs < 8; ++signs) {
            Mat3 m{};
            for (int col = 0; col < 3; ++col)
                m(p[col], col) = (signs >> col) & 1 ? -1.0 : 1.0;
            if (std::abs(m.det() - 1.0) < 0.5)
                spec.elements.push_back({m, "o" + std::to_string(spec.elements.size())});
        }
    }
    return spec;
}

/// Arbitrary user-listed subgroup; validated on construction.
inline GroupSpec from_matrices(const std::vector<Mat3>& mats) {
    GroupSpec spec;
    spec.kind = GroupKind::FiniteSubgroup;
    for (std::size_t i = 0; i < mats.size(); ++i)
        spec.elements.push_back({mats[i], "g" + std::to_string(i)});
    validate(spec);
    return spec;
}

/// Load a finite group from JSON: an array of 3x3 row-major matrices, each
/// either a flat array of 9 numbers or three rows of three.
inline GroupSpec load_group_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open group file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw config_error("invalid JSON in group file " + path + ": " + e.what());
    }
    if (!j.is_array()) throw config_error("group file must hold an array of matrices");
    std::vector<Mat3> mats;
    for (const auto& entry : j) {
        Mat3 m;
        if (entry.is_array() && entry.size() == 9) {
            for (int i = 0; i < 9; ++i) m.a[static_cast<std::size_t>(i)] = entry[static_cast<std::size_t>(i)].get<double>();
        } else if (entry.is_array() && entry.size() == 3) {
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) m(r, c) = entry[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
        } else {
            throw config_error("each group matrix must be 9 numbers or 3 rows of 3");
        }
        mats.push_back(m);
    }
    return from_matrices(mats);
}

inline GroupSpec so3(std::uint64_t seed = 0) {
    GroupSpec spec;
    spec.kind = GroupKind::ContinuousSO3;
    spec.seed = seed;
    return spec;
}

}  // namespace equidiag
