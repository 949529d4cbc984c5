#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "equidiag/group.hpp"
#include "equidiag/stats.hpp"

using namespace equidiag;

namespace {
Mat3 rot_z(double deg) {
    const double a = deg * std::numbers::pi / 180.0;
    Mat3 m = Mat3::identity();
    m(0, 0) = std::cos(a);
    m(0, 1) = -std::sin(a);
    m(1, 0) = std::sin(a);
    m(1, 1) = std::cos(a);
    return m;
}
}  // namespace

TEST_CASE("haar samples are proper rotations") {
    GroupSpec spec = so3();
    RngState rng{7};
    for (int i = 0; i < 200; ++i) {
        const GroupElement g = sample_uniform(spec, rng);
        REQUIRE(orthogonality_defect(g.matrix) <= 1e-12);
        REQUIRE(std::abs(g.matrix.det() - 1.0) <= 1e-12);
    }
}

TEST_CASE("single-element group always samples the identity") {
    GroupSpec spec = identity_group();
    RngState rng{3};
    for (int i = 0; i < 50; ++i) {
        const GroupElement g = sample_uniform(spec, rng);
        REQUIRE(max_abs_diff(g.matrix, Mat3::identity()) == 0.0);
    }
}

TEST_CASE("haar mean of a rotated unit vector vanishes") {
    GroupSpec spec = so3();
    RngState rng{2024};
    const int n = 100000;
    double mx = 0, my = 0, mz = 0;
    for (int i = 0; i < n; ++i) {
        const Mat3 r = sample_uniform(spec, rng).matrix;
        mx += r(0, 0);
        my += r(1, 0);
        mz += r(2, 0);
    }
    // Each component of R e_x has variance 1/3, so se = 1/sqrt(3n).
    const double bound = 3.0 / std::sqrt(3.0 * n);
    REQUIRE(std::abs(mx / n) < bound);
    REQUIRE(std::abs(my / n) < bound);
    REQUIRE(std::abs(mz / n) < bound);
}

TEST_CASE("finite sampling is uniform over the elements") {
    GroupSpec spec = cyclic_about_axis(2, 4);
    RngState rng{11};
    std::array<std::size_t, 4> counts{};
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const GroupElement g = sample_uniform(spec, rng);
        for (std::size_t k = 0; k < 4; ++k)
            if (max_abs_diff(g.matrix, spec.elements[k].matrix) < 1e-12) ++counts[k];
    }
    for (const std::size_t c : counts)
        REQUIRE(std::abs(static_cast<double>(c) / n - 0.25) < 0.01);
    // chi-square below the 1% critical value for 3 degrees of freedom
    REQUIRE(chi_square_uniform(counts) < 11.345);
}

TEST_CASE("haar distribution is left-invariant (trace statistic)") {
    GroupSpec spec = so3();
    RngState rng{99};
    const Mat3 h = sample_uniform(spec, rng).matrix;
    const int n = 100000;
    VecX plain(n), shifted(n);
    for (int i = 0; i < n; ++i) {
        const Mat3 t = sample_uniform(spec, rng).matrix;
        plain[static_cast<std::size_t>(i)] = t(0, 0) + t(1, 1) + t(2, 2);
        const Mat3 ht = h * sample_uniform(spec, rng).matrix;
        shifted[static_cast<std::size_t>(i)] = ht(0, 0) + ht(1, 1) + ht(2, 2);
    }
    const double d = ks_two_sample(plain, shifted);
    const double critical = 1.628 * std::sqrt(2.0 / n);  // two-sample, alpha = 0.01
    REQUIRE(d < critical);
}

TEST_CASE("cyclic group enumeration") {
    GroupSpec c4 = cyclic_about_axis(2, 4);
    const auto& elements = enumerate(c4);
    REQUIRE(elements.size() == 4);
    for (int k = 0; k < 4; ++k)
        REQUIRE(max_abs_diff(elements[static_cast<std::size_t>(k)].matrix, rot_z(90.0 * k)) < 1e-15);
    REQUIRE(enumerate(identity_group()).size() == 1);
    REQUIRE(max_abs_diff(enumerate(identity_group())[0].matrix, Mat3::identity()) == 0.0);
}

TEST_CASE("enumerating a continuous group is unsupported") {
    GroupSpec spec = so3();
    REQUIRE_THROWS_AS(enumerate(spec), unsupported_error);
}

TEST_CASE("octahedral rotation group closure by brute force") {
    GroupSpec octa = octahedral_rotations();
    REQUIRE(octa.elements.size() == 24);
    for (const GroupElement& g : octa.elements)
        REQUIRE(is_rotation(g.matrix, 1e-15));
    for (const GroupElement& g : octa.elements) {
        for (const GroupElement& h : octa.elements) {
            const Mat3 prod = g.matrix * h.matrix;
            bool found = false;
            for (const GroupElement& k : octa.elements)
                if (max_abs_diff(prod, k.matrix) < 1e-10) found = true;
            REQUIRE(found);
        }
    }
    REQUIRE_NOTHROW(validate(octa));
}

TEST_CASE("block application rotates each 3-vector") {
    BlockAction one{cyclic_about_axis(2, 4), 1};
    const GroupElement quarter = enumerate(one.group)[1];  // 90 degrees about z
    const VecX v = {1, 0, 0};
    const VecX rotated = apply(one, quarter, v);
    REQUIRE(rotated[0] == Catch::Approx(0).margin(1e-15));
    REQUIRE(rotated[1] == Catch::Approx(1).margin(1e-15));
    REQUIRE(rotated[2] == Catch::Approx(0).margin(1e-15));

    BlockAction two{cyclic_about_axis(2, 2), 2};
    const GroupElement half = enumerate(two.group)[1];  // 180 degrees about z
    const VecX w = {1, 0, 0, 0, 2, 0};
    const VecX rw = apply(two, half, w);
    const VecX expected = {-1, 0, 0, 0, -2, 0};
    for (std::size_t i = 0; i < 6; ++i) REQUIRE(rw[i] == Catch::Approx(expected[i]).margin(1e-15));

    const GroupElement id{};
    const VecX same = apply(two, id, w);
    REQUIRE(same == w);

    REQUIRE_THROWS_AS(apply(two, half, VecX{1, 2, 3}), shape_error);
}

TEST_CASE("block application preserves norms, inner products and inverts") {
    GroupSpec spec = so3();
    RngState rng{5};
    BlockAction action{spec, 5};
    for (int trial = 0; trial < 100; ++trial) {
        VecX a(15), b(15);
        for (auto& v : a) v = next_gaussian(rng);
        for (auto& v : b) v = next_gaussian(rng);
        const GroupElement g = sample_uniform(spec, rng);
        const VecX ga = apply(action, g, a);
        const VecX gb = apply(action, g, b);
        REQUIRE(std::abs(dot(ga, gb) - dot(a, b)) < 1e-10);
        REQUIRE(std::abs(norm2(ga) - norm2(a)) < 1e-10);
        const VecX back = apply(action, inverse(g), ga);
        for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(std::abs(back[i] - a[i]) < 1e-10);
    }
}

TEST_CASE("inverse is the transpose") {
    REQUIRE(max_abs_diff(inverse(GroupElement{}).matrix, Mat3::identity()) == 0.0);
    GroupSpec c4 = cyclic_about_axis(2, 4);
    REQUIRE(max_abs_diff(inverse(enumerate(c4)[1]).matrix, enumerate(c4)[3].matrix) < 1e-15);
    RngState rng{13};
    for (int i = 0; i < 20; ++i) {
        const GroupElement g = sample_uniform(so3(), rng);
        const Mat3 prod = inverse(g).matrix * g.matrix;
        REQUIRE(max_abs_diff(prod, Mat3::identity()) < 1e-12);
    }
}

TEST_CASE("validation rejects broken finite groups") {
    GroupSpec no_identity;
    no_identity.kind = GroupKind::FiniteSubgroup;
    no_identity.elements.push_back({rot_z(90), "z90"});
    REQUIRE_THROWS_AS(validate(no_identity), config_error);

    GroupSpec not_closed;
    not_closed.kind = GroupKind::FiniteSubgroup;
    not_closed.elements.push_back({Mat3::identity(), "e"});
    not_closed.elements.push_back({rot_z(90), "z90"});
    not_closed.elements.push_back({rot_z(270), "z270"});
    REQUIRE_THROWS_AS(validate(not_closed), config_error);

    GroupSpec empty;
    empty.kind = GroupKind::FiniteSubgroup;
    RngState rng{1};
    REQUIRE_THROWS_AS(sample_uniform(empty, rng), config_error);
}

TEST_CASE("finite groups load from a JSON matrix list") {
    const std::string path = "group_c2z.json";
    {
        std::ofstream out(path);
        out << "[[1,0,0,0,1,0,0,0,1],[-1,0,0,0,-1,0,0,0,1]]\n";
    }
    const GroupSpec spec = load_group_json(path);
    REQUIRE(spec.elements.size() == 2);
    REQUIRE_NOTHROW(validate(spec));
    std::remove(path.c_str());

    const std::string bad = "group_bad.json";
    {
        std::ofstream out(bad);
        out << "[[2,0,0,0,1,0,0,0,1]]\n";  // not orthogonal
    }
    REQUIRE_THROWS_AS(load_group_json(bad), config_error);
    std::remove(bad.c_str());
}

TEST_CASE("axis-permuting rotations form a subgroup") {
    // The three rotation matrices that permute the coordinate axes without
    // signs: identity and the two 120-degree turns about (1,1,1).
    Mat3 cycle{};
    cycle(1, 0) = 1;
    cycle(2, 1) = 1;
    cycle(0, 2) = 1;
    const GroupSpec c3 = from_matrices({Mat3::identity(), cycle, cycle * cycle});
    REQUIRE(c3.elements.size() == 3);
    REQUIRE_NOTHROW(validate(c3));
}
