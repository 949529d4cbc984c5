#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "equidiag/io.hpp"
#include "equidiag/metrics.hpp"
#include "equidiag/models.hpp"
#include "equidiag/training.hpp"

using namespace equidiag;

namespace {

Dataset random_dataset(RngState& rng, int atoms, std::size_t samples, double scale = 1.0) {
    Dataset d;
    d.atom_count = atoms;
    for (std::size_t s = 0; s < samples; ++s) {
        VecX x(static_cast<std::size_t>(3 * atoms)), y(x.size());
        for (double& v : x) v = scale * next_gaussian(rng);
        for (double& v : y) v = scale * next_gaussian(rng);
        d.inputs.push_back(x);
        d.targets.push_back(y);
    }
    return d;
}

void make_head_equivariant(Model& model) {
    auto head = model.params().span("head.w");
    const std::size_t h = head.size() / 3;
    for (std::size_t k = 0; k < h; ++k) head[h + k] = head[2 * h + k] = head[k];
}

// Loss component value used as the finite-difference oracle for
// parameter_gradient: evaluated through twist/twirl only.
double target_value(const Model& model, const LossModel& lm, const BlockAction& action,
                    const Dataset& batch, const std::vector<GroupElement>& elements,
                    GradientTarget target) {
    double acc = 0;
    for (std::size_t s = 0; s < batch.size(); ++s) {
        const TwistedBatch tb = twist(model, action, batch.inputs[s], elements);
        const VecX mu = twirl(tb);
        double total = 0;
        for (std::size_t i = 0; i < tb.predictions.rows; ++i)
            total += loss(lm, tb.predictions.row(i), batch.targets[s]);
        total /= static_cast<double>(tb.predictions.rows);
        const double mean = loss(lm, mu, batch.targets[s]);
        switch (target) {
            case GradientTarget::Total: acc += total; break;
            case GradientTarget::Mean: acc += mean; break;
            case GradientTarget::Equiv: acc += total - mean; break;
        }
    }
    return acc / static_cast<double>(batch.size());
}

}  // namespace

TEST_CASE("coord-mlp with zero output layer returns zero") {
    ModelConfig cfg{ModelKind::CoordMlp, 3, {8, 8}};
    Model model = Model::init(cfg, 5);
    for (double& v : model.params().span("out.w")) v = 0;
    for (double& v : model.params().span("out.b")) v = 0;
    RngState rng{1};
    VecX x(9);
    for (double& v : x) v = next_gaussian(rng);
    for (const double o : model.forward(x)) REQUIRE(o == 0.0);
}

TEST_CASE("equivariant baseline reproduces the pair-sum formula") {
    ModelConfig cfg{ModelKind::EquivariantBaseline, 2, {4}};
    Model model = Model::init(cfg, 9);
    // s(r) == 1: zero the radial net output weights, set the constant to 1.
    for (double& v : model.params().span("radial1.w")) v = 0;
    model.params().span("radial1.b")[0] = 1.0;
    const VecX x = {1, 0, 0, -1, 0, 0};
    const VecX o = model.forward(x);
    REQUIRE(o[0] == Catch::Approx(-2.0).epsilon(1e-15));
    REQUIRE(o[3] == Catch::Approx(2.0).epsilon(1e-15));
    REQUIRE(o[1] == 0.0);
    REQUIRE(o[4] == 0.0);
}

TEST_CASE("graph head with equal projections is exactly equivariant") {
    ModelConfig cfg{ModelKind::InvariantGraphHead, 5, {8, 8}};
    Model model = Model::init(cfg, 12);
    make_head_equivariant(model);
    GroupSpec cont = so3();
    BlockAction action{cont, 5};
    RngState rng{77};
    for (int trial = 0; trial < 100; ++trial) {
        VecX x(15);
        for (double& v : x) v = next_gaussian(rng);
        const VecX base = model.forward(x);
        const GroupElement g = sample_uniform(cont, rng);
        const VecX twisted = apply(action, inverse(g), model.forward(apply(action, g, x)));
        for (std::size_t i = 0; i < x.size(); ++i) REQUIRE(std::abs(twisted[i] - base[i]) <= 1e-10);
    }
}

TEST_CASE("graph head with independent projections is not equivariant") {
    ModelConfig cfg{ModelKind::InvariantGraphHead, 5, {8, 8}};
    Model model = Model::init(cfg, 12);
    GroupSpec cont = so3();
    BlockAction action{cont, 5};
    RngState rng{78};
    VecX x(15);
    for (double& v : x) v = next_gaussian(rng);
    const GroupElement g = sample_uniform(cont, rng);
    const VecX base = model.forward(x);
    const VecX twisted = apply(action, inverse(g), model.forward(apply(action, g, x)));
    double diff = 0;
    for (std::size_t i = 0; i < x.size(); ++i) diff += std::abs(twisted[i] - base[i]);
    REQUIRE(diff > 1e-6);
}

TEST_CASE("equivariant baseline has zero equivariance error for any parameters") {
    RngState rng{301};
    for (int trial = 0; trial < 10; ++trial) {
        ModelConfig cfg{ModelKind::EquivariantBaseline, 4, {6}};
        Model model = Model::init(cfg, 1000 + static_cast<std::uint64_t>(trial));
        const Dataset data = random_dataset(rng, 4, 4);
        GroupSpec group = octahedral_rotations();
        BlockAction action{group, 4};
        const LossModel mse{LossKind::Mse, 12};
        const LossDecomposition d = decompose_exact(model, mse, action, data, group);
        REQUIRE(d.equiv <= 1e-12);
    }
}

TEST_CASE("forward is bitwise reproducible") {
    ModelConfig cfg{ModelKind::CoordMlp, 4, {16, 16}};
    Model model = Model::init(cfg, 21);
    RngState rng{55};
    VecX x(12);
    for (double& v : x) v = next_gaussian(rng);
    const VecX a = model.forward(x);
    const VecX b = model.forward(x);
    REQUIRE(a == b);
}

TEST_CASE("initialization is deterministic in the seed") {
    ModelConfig cfg{ModelKind::CoordMlp, 4, {8, 8}};
    const Model a = Model::init(cfg, 42);
    const Model b = Model::init(cfg, 42);
    const Model c = Model::init(cfg, 43);
    REQUIRE(a.params().values == b.params().values);
    REQUIRE(a.params().values != c.params().values);
}

TEST_CASE("graph-head initialization has nonzero head deviation") {
    ModelConfig cfg{ModelKind::InvariantGraphHead, 4, {8, 8}};
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const Model model = Model::init(cfg, seed);
        REQUIRE(head_deviation_norm_sq(model) > 0.0);
    }
}

TEST_CASE("segment layout is disjoint and covers the vector") {
    for (const ModelConfig cfg : {ModelConfig{ModelKind::CoordMlp, 3, {8, 4}},
                                  ModelConfig{ModelKind::InvariantGraphHead, 3, {8, 8}},
                                  ModelConfig{ModelKind::EquivariantBaseline, 3, {8}}}) {
        const Model model = Model::init(cfg, 7);
        std::size_t expected_offset = 0;
        for (const Segment& s : model.params().layout) {
            REQUIRE(s.offset == expected_offset);
            expected_offset += s.length;
        }
        REQUIRE(expected_offset == model.params().values.size());
        REQUIRE_THROWS_AS(model.params().segment("nope"), argument_error);
    }
}

TEST_CASE("parameter gradient vanishes at an exact minimum") {
    ModelConfig cfg{ModelKind::EquivariantBaseline, 3, {4}};
    Model model = Model::init(cfg, 3);
    RngState rng{91};
    Dataset batch = random_dataset(rng, 3, 3);
    for (std::size_t s = 0; s < batch.size(); ++s) batch.targets[s] = model.forward(batch.inputs[s]);
    GroupSpec group = octahedral_rotations();
    BlockAction action{group, 3};
    const LossModel mse{LossKind::Mse, 9};
    const VecX g = parameter_gradient(model, mse, action, batch, enumerate(group), GradientTarget::Total);
    REQUIRE(norm2(g) <= 1e-10);
}

TEST_CASE("equivariance-error gradient vanishes identically for the baseline") {
    ModelConfig cfg{ModelKind::EquivariantBaseline, 3, {4}};
    Model model = Model::init(cfg, 19);
    RngState rng{92};
    const Dataset batch = random_dataset(rng, 3, 3);
    GroupSpec group = octahedral_rotations();
    BlockAction action{group, 3};
    const LossModel mse{LossKind::Mse, 9};
    const VecX g = parameter_gradient(model, mse, action, batch, enumerate(group), GradientTarget::Equiv);
    REQUIRE(norm2(g) <= 1e-8);
}

TEST_CASE("parameter gradients match finite differences") {
    RngState rng{404};
    GroupSpec group = cyclic_about_axis(2, 4);
    for (const ModelConfig cfg : {ModelConfig{ModelKind::CoordMlp, 2, {4, 4}},
                                  ModelConfig{ModelKind::InvariantGraphHead, 3, {4, 4}},
                                  ModelConfig{ModelKind::EquivariantBaseline, 3, {4}}}) {
        Model model = Model::init(cfg, 77);
        const Dataset batch = random_dataset(rng, cfg.atom_count, 2);
        BlockAction action{group, cfg.atom_count};
        for (const LossKind lk : {LossKind::Mse, LossKind::ConvexSoftplus}) {
            const LossModel lm{lk, 3 * cfg.atom_count};
            for (const GradientTarget target :
                 {GradientTarget::Total, GradientTarget::Mean, GradientTarget::Equiv}) {
                if (cfg.kind == ModelKind::EquivariantBaseline && target == GradientTarget::Equiv)
                    continue;  // identically zero, checked elsewhere
                const VecX analytic =
                    parameter_gradient(model, lm, action, batch, enumerate(group), target);
                const double h = 1e-5;
                for (std::size_t i = 0; i < analytic.size(); i += 3) {  // probe a third of them
                    Model probe = model;
                    const double saved = probe.params().values[i];
                    probe.params().values[i] = saved + h;
                    const double lp = target_value(probe, lm, action, batch, enumerate(group), target);
                    probe.params().values[i] = saved - h;
                    const double lmn = target_value(probe, lm, action, batch, enumerate(group), target);
                    const double fd = (lp - lmn) / (2 * h);
                    if (std::abs(analytic[i]) > 1e-8)
                        REQUIRE(std::abs(analytic[i] - fd) / std::abs(analytic[i]) < 1e-4);
                    else
                        REQUIRE(std::abs(fd) < 1e-6);
                }
            }
        }
    }
}

TEST_CASE("checkpoints round-trip bitwise") {
    ModelConfig cfg{ModelKind::InvariantGraphHead, 4, {8, 8}};
    const Model model = Model::init(cfg, 99);
    const std::string path = "roundtrip_checkpoint.bin";
    save_checkpoint(path, model, 99);
    const Model loaded = load_checkpoint(path);
    REQUIRE(loaded.kind() == model.kind());
    REQUIRE(loaded.params().values == model.params().values);
    REQUIRE(loaded.params().layout.size() == model.params().layout.size());
    std::remove(path.c_str());
    std::remove(sidecar_path(path).c_str());
}

TEST_CASE("dimension mismatches are rejected") {
    ModelConfig cfg{ModelKind::CoordMlp, 3, {4}};
    Model model = Model::init(cfg, 1);
    REQUIRE_THROWS_AS(model.forward(VecX{1, 2, 3}), shape_error);
    VecX grad(model.params().values.size());
    REQUIRE_THROWS_AS(model.backward(VecX{1, 2, 3}, VecX{1, 2, 3}, grad), shape_error);
}
