#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "equidiag/metrics.hpp"
#include "equidiag/models.hpp"
#include "equidiag/training.hpp"

using namespace equidiag;

namespace {

SyntheticTask small_task(TaskKind kind = TaskKind::SpringForces) {
    SyntheticTask t;
    t.kind = kind;
    t.atom_count = 4;
    t.sample_count = 128;
    t.heldout_count = 32;
    t.noise_scale = 0.1;
    t.seed = 7;
    return t;
}

TrainConfig quick_config(int steps, OptimizerKind opt = OptimizerKind::Adam) {
    TrainConfig c;
    c.optimizer = opt;
    c.learning_rate = 1e-3;
    c.batch_size = 16;
    c.steps = steps;
    c.augmentation = true;
    c.measure_every = 50;
    c.eval_rotations = 10;
    c.seed = 11;
    return c;
}

bool rows_equal(const MetricsRow& a, const MetricsRow& b) {
    auto eq = [](double x, double y) {
        return (std::isnan(x) && std::isnan(y)) || x == y;
    };
    return a.step == b.step && eq(a.loss_total, b.loss_total) && eq(a.loss_mean, b.loss_mean) &&
           eq(a.loss_equiv, b.loss_equiv) && eq(a.percent, b.percent) &&
           eq(a.grad_norm_total, b.grad_norm_total) && eq(a.grad_norm_mean, b.grad_norm_mean) &&
           eq(a.grad_norm_equiv, b.grad_norm_equiv) && eq(a.grad_norm_ratio, b.grad_norm_ratio) &&
           eq(a.head_deviation_sq, b.head_deviation_sq) && eq(a.epsilon, b.epsilon);
}

}  // namespace

TEST_CASE("spring targets: pair force magnitude and direction") {
    // Two atoms on the x axis at distance d: force on each is d exp(-d^2)
    // pointing at the other atom.
    const double d = 1.7;
    const VecX x = {-d / 2, 0, 0, d / 2, 0, 0};
    const VecX y = spring_force_targets(x, 2);
    REQUIRE(y[0] == Catch::Approx(d * std::exp(-d * d)).epsilon(1e-12));
    REQUIRE(y[3] == Catch::Approx(-d * std::exp(-d * d)).epsilon(1e-12));
    REQUIRE(y[1] == 0.0);
    REQUIRE(y[2] == 0.0);
}

TEST_CASE("spring targets are equivariant and sum to zero") {
    RngState rng{3};
    GroupSpec group = so3();
    BlockAction action{group, 5};
    for (int trial = 0; trial < 100; ++trial) {
        VecX x(15);
        for (double& v : x) v = next_gaussian(rng);
        const VecX y = spring_force_targets(x, 5);
        double sx = 0, sy = 0, sz = 0;
        for (int i = 0; i < 5; ++i) {
            sx += y[static_cast<std::size_t>(3 * i)];
            sy += y[static_cast<std::size_t>(3 * i + 1)];
            sz += y[static_cast<std::size_t>(3 * i + 2)];
        }
        REQUIRE(std::abs(sx) < 1e-12);
        REQUIRE(std::abs(sy) < 1e-12);
        REQUIRE(std::abs(sz) < 1e-12);

        const GroupElement g = sample_uniform(group, rng);
        const VecX yr = spring_force_targets(apply(action, g, x), 5);
        const VecX ry = apply(action, g, y);
        for (std::size_t i = 0; i < 15; ++i) REQUIRE(std::abs(yr[i] - ry[i]) <= 1e-10);
    }
}

TEST_CASE("task generation is deterministic with disjoint splits") {
    const SyntheticTask spec = small_task();
    const TaskData a = make_task(spec);
    const TaskData b = make_task(spec);
    REQUIRE(a.train.inputs == b.train.inputs);
    REQUIRE(a.heldout.targets == b.heldout.targets);
    REQUIRE(a.train.size() == 128);
    REQUIRE(a.heldout.size() == 32);
    for (const VecX& h : a.heldout.inputs)
        for (const VecX& t : a.train.inputs) REQUIRE(h != t);
}

TEST_CASE("noisy autoencode pairs rotate together and carry the configured noise") {
    SyntheticTask spec = small_task(TaskKind::NoisyAutoencode);
    spec.noise_scale = 0.25;
    const TaskData data = make_task(spec);
    double mean_noise_sq = 0;
    for (std::size_t s = 0; s < data.train.size(); ++s) {
        const VecX diff = sub(data.train.inputs[s], data.train.targets[s]);
        mean_noise_sq += norm_sq(diff) / static_cast<double>(diff.size());
    }
    mean_noise_sq /= static_cast<double>(data.train.size());
    REQUIRE(mean_noise_sq == Catch::Approx(0.25 * 0.25).epsilon(0.15));
    // Targets are centered clouds.
    for (std::size_t s = 0; s < 5; ++s) {
        double cx = 0;
        for (int i = 0; i < spec.atom_count; ++i) cx += data.train.targets[s][static_cast<std::size_t>(3 * i)];
        REQUIRE(std::abs(cx) < 1e-12);
    }
}

TEST_CASE("sgd walks a quadratic bowl to its minimum") {
    // f(p) = 0.5 (p0^2 + 3 p1^2), gradient (p0, 3 p1)
    VecX p = {1.5, -2.0};
    SgdState sgd;
    for (int step = 0; step < 10000; ++step) {
        const VecX g = {p[0], 3 * p[1]};
        sgd.update(p, g, 0.01);
    }
    REQUIRE(std::abs(p[0]) < 1e-6);
    REQUIRE(std::abs(p[1]) < 1e-6);
}

TEST_CASE("adam matches its reference formula over a three-step trace") {
    // Reference trace computed independently with scalar arithmetic.
    const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const VecX grads[3] = {{1.0, -2.0}, {-0.5, 1.0}, {2.0, 0.3}};
    VecX expect = {0.2, 0.4};
    double m[2] = {0, 0}, v[2] = {0, 0};
    VecX p = {0.2, 0.4};
    AdamState adam;
    for (int t = 1; t <= 3; ++t) {
        for (int i = 0; i < 2; ++i) {
            const double g = grads[t - 1][static_cast<std::size_t>(i)];
            m[i] = b1 * m[i] + (1 - b1) * g;
            v[i] = b2 * v[i] + (1 - b2) * g * g;
            const double mhat = m[i] / (1 - std::pow(b1, t));
            const double vhat = v[i] / (1 - std::pow(b2, t));
            expect[static_cast<std::size_t>(i)] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
        adam.update(p, grads[t - 1], lr);
        REQUIRE(p[0] == Catch::Approx(expect[0]).epsilon(1e-14));
        REQUIRE(p[1] == Catch::Approx(expect[1]).epsilon(1e-14));
    }
}

TEST_CASE("training an equivariant baseline keeps percent at zero") {
    const TaskData task = make_task(small_task());
    Model model = Model::init(ModelConfig{ModelKind::EquivariantBaseline, 4, {8}}, 2);
    const LossModel mse{LossKind::Mse, 12};
    TrainConfig cfg = quick_config(100);
    RngState rng{cfg.seed};
    const TrainResult result = train(std::move(model), task, mse, so3(), cfg, rng);
    REQUIRE(result.series.size() >= 3);
    for (const MetricsRow& row : result.series) {
        REQUIRE(row.percent <= 1e-12);
        REQUIRE(row.grad_norm_equiv <= 1e-8);
    }
}

TEST_CASE("zero learning rate leaves parameters untouched") {
    const TaskData task = make_task(small_task());
    Model model = Model::init(ModelConfig{ModelKind::CoordMlp, 4, {8, 8}}, 5);
    const VecX initial = model.params().values;
    const LossModel mse{LossKind::Mse, 12};
    TrainConfig cfg = quick_config(120, OptimizerKind::Sgd);
    cfg.learning_rate = 0.0;
    RngState rng{cfg.seed};
    const TrainResult result = train(std::move(model), task, mse, so3(), cfg, rng);
    REQUIRE(result.model.params().values == initial);
    // Rows fluctuate only through rotation sampling: the percent stays in a
    // narrow band around its initial value.
    VecX percents;
    for (const MetricsRow& row : result.series) percents.push_back(row.percent);
    const auto [lo, hi] = std::minmax_element(percents.begin(), percents.end());
    REQUIRE(*hi - *lo < 0.5 * (*hi + *lo));
}

TEST_CASE("training runs are bitwise deterministic in the seed") {
    const TaskData task = make_task(small_task());
    const LossModel mse{LossKind::Mse, 12};
    const TrainConfig cfg = quick_config(60);
    RngState rng_a{cfg.seed}, rng_b{cfg.seed};
    const TrainResult a =
        train(Model::init(ModelConfig{ModelKind::InvariantGraphHead, 4, {8, 8}}, 3), task, mse, so3(), cfg, rng_a);
    const TrainResult b =
        train(Model::init(ModelConfig{ModelKind::InvariantGraphHead, 4, {8, 8}}, 3), task, mse, so3(), cfg, rng_b);
    REQUIRE(a.model.params().values == b.model.params().values);
    REQUIRE(a.series.size() == b.series.size());
    for (std::size_t i = 0; i < a.series.size(); ++i) REQUIRE(rows_equal(a.series[i], b.series[i]));
}

TEST_CASE("training reduces the equivariance share on the spring task") {
    const TaskData task = make_task(small_task());
    Model model = Model::init(ModelConfig{ModelKind::CoordMlp, 4, {16, 16}}, 1);
    const LossModel mse{LossKind::Mse, 12};
    const TrainConfig cfg = quick_config(400);
    RngState rng{cfg.seed};
    const TrainResult result = train(std::move(model), task, mse, so3(), cfg, rng);
    REQUIRE(result.series.front().percent > result.series.back().percent);
}

TEST_CASE("divergent training aborts with a diagnostic") {
    const TaskData task = make_task(small_task());
    Model model = Model::init(ModelConfig{ModelKind::CoordMlp, 4, {8, 8}}, 4);
    const LossModel mse{LossKind::Mse, 12};
    TrainConfig cfg = quick_config(4000, OptimizerKind::Sgd);
    cfg.learning_rate = 50.0;
    cfg.measure_every = 100000;
    RngState rng{cfg.seed};
    REQUIRE_THROWS_AS(train(std::move(model), task, mse, so3(), cfg, rng), numeric_error);
}

TEST_CASE("augmentation wins on the symmetrized held-out objective") {
    // Sign test over 5 seeds: the augmented model's rotation-averaged
    // held-out loss must not beat the unaugmented one less often than it
    // loses.
    int wins = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        SyntheticTask spec = small_task();
        spec.seed = 100 + seed;
        const TaskData task = make_task(spec);
        const LossModel mse{LossKind::Mse, 12};
        TrainConfig cfg = quick_config(400);
        cfg.seed = 500 + seed;
        cfg.measure_every = 400;

        TrainConfig cfg_off = cfg;
        cfg_off.augmentation = false;
        RngState rng_on{cfg.seed}, rng_off{cfg.seed};
        const TrainResult on = train(Model::init(ModelConfig{ModelKind::CoordMlp, 4, {16, 16}}, seed),
                                     task, mse, so3(), cfg, rng_on);
        const TrainResult off = train(Model::init(ModelConfig{ModelKind::CoordMlp, 4, {16, 16}}, seed),
                                      task, mse, so3(), cfg_off, rng_off);
        RngState eval_rng{9000 + seed};
        BlockAction action{so3(), 4};
        const auto eval = [&](const Model& m) {
            RngState r = eval_rng;  // same rotations for both models
            return decompose_sampled(m, mse, action, task.heldout, so3(), 10, r).naive.total;
        };
        if (eval(on.model) <= eval(off.model)) ++wins;
    }
    REQUIRE(wins >= 4);
}

TEST_CASE("gradient decomposition adds up with shared rotations") {
    RngState rng{8};
    Dataset batch;
    batch.atom_count = 3;
    for (int s = 0; s < 3; ++s) {
        VecX x(9), y(9);
        for (double& v : x) v = next_gaussian(rng);
        for (double& v : y) v = next_gaussian(rng);
        batch.inputs.push_back(x);
        batch.targets.push_back(y);
    }
    Model model = Model::init(ModelConfig{ModelKind::CoordMlp, 3, {8, 8}}, 6);
    GroupSpec group = so3();
    BlockAction action{group, 3};
    const LossModel mse{LossKind::Mse, 9};
    std::vector<GroupElement> elements(6);
    for (auto& e : elements) e = sample_uniform(group, rng);

    const VecX g_total = parameter_gradient(model, mse, action, batch, elements, GradientTarget::Total);
    const VecX g_mean = parameter_gradient(model, mse, action, batch, elements, GradientTarget::Mean);
    const VecX g_equiv = parameter_gradient(model, mse, action, batch, elements, GradientTarget::Equiv);
    double resid = 0;
    for (std::size_t i = 0; i < g_total.size(); ++i) {
        const double d = g_total[i] - g_mean[i] - g_equiv[i];
        resid += d * d;
    }
    REQUIRE(std::sqrt(resid) <= 1e-8);

    const GradNormRatio ratio = gradient_norm_ratio(model, mse, action, batch, elements);
    REQUIRE(ratio.defined);
    REQUIRE(ratio.ratio == Catch::Approx(norm2(g_equiv) / norm2(g_mean)).epsilon(1e-12));
}

TEST_CASE("gradient-norm ratio matches a finite-difference recomputation") {
    RngState rng{9};
    Dataset batch;
    batch.atom_count = 2;
    for (int s = 0; s < 2; ++s) {
        VecX x(6), y(6);
        for (double& v : x) v = next_gaussian(rng);
        for (double& v : y) v = next_gaussian(rng);
        batch.inputs.push_back(x);
        batch.targets.push_back(y);
    }
    Model model = Model::init(ModelConfig{ModelKind::CoordMlp, 2, {4}}, 2);
    GroupSpec group = cyclic_about_axis(2, 4);
    BlockAction action{group, 2};
    const LossModel mse{LossKind::Mse, 6};
    const auto& elements = enumerate(group);

    auto value_of = [&](const Model& m, GradientTarget target) {
        double acc = 0;
        for (std::size_t s = 0; s < batch.size(); ++s) {
            const TwistedBatch tb = twist(m, action, batch.inputs[s], elements);
            const VecX mu = twirl(tb);
            double total = 0;
            for (std::size_t i = 0; i < tb.predictions.rows; ++i)
                total += loss(mse, tb.predictions.row(i), batch.targets[s]);
            total /= static_cast<double>(tb.predictions.rows);
            const double mean = loss(mse, mu, batch.targets[s]);
            acc += target == GradientTarget::Mean ? mean : total - mean;
        }
        return acc / static_cast<double>(batch.size());
    };
    auto fd_norm = [&](GradientTarget target) {
        double nsq = 0;
        const double h = 1e-6;
        for (std::size_t i = 0; i < model.params().values.size(); ++i) {
            Model probe = model;
            probe.params().values[i] += h;
            const double fp = value_of(probe, target);
            probe.params().values[i] -= 2 * h;
            const double fm = value_of(probe, target);
            const double g = (fp - fm) / (2 * h);
            nsq += g * g;
        }
        return std::sqrt(nsq);
    };

    const GradNormRatio ratio = gradient_norm_ratio(model, mse, action, batch, elements);
    const double fd_ratio = fd_norm(GradientTarget::Equiv) / fd_norm(GradientTarget::Mean);
    REQUIRE(ratio.ratio == Catch::Approx(fd_ratio).epsilon(1e-3));
}

TEST_CASE("ratio correlation on synthetic series") {
    MetricsTimeSeries series;
    for (int i = 1; i <= 40; ++i) {
        MetricsRow row;
        row.step = i;
        row.epsilon = 0.5 * std::exp(-0.1 * i) + 1e-4;
        row.grad_norm_ratio = row.epsilon;  // identical: perfect correlation
        series.push_back(row);
    }
    RatioCorrelation c = correlate_loss_vs_grad_ratio(series);
    REQUIRE(c.pearson_log_log == Catch::Approx(1.0).epsilon(1e-12));
    REQUIRE(c.spearman_rank == Catch::Approx(1.0).epsilon(1e-12));

    for (MetricsRow& row : series) row.grad_norm_ratio = 3.7 * std::sqrt(row.epsilon);
    c = correlate_loss_vs_grad_ratio(series);
    REQUIRE(c.pearson_log_log == Catch::Approx(1.0).epsilon(1e-12));

    // Permutation null: shuffling destroys the correlation with high
    // probability.
    RngState rng{123};
    int below = 0;
    const int shuffles = 100;
    for (int trial = 0; trial < shuffles; ++trial) {
        MetricsTimeSeries shuffled = series;
        for (std::size_t i = shuffled.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(next_u64(rng) % i);
            std::swap(shuffled[i - 1].grad_norm_ratio, shuffled[j].grad_norm_ratio);
        }
        if (std::abs(correlate_loss_vs_grad_ratio(shuffled).pearson_log_log) < 0.3) ++below;
    }
    REQUIRE(below >= 85);

    MetricsTimeSeries tiny(series.begin(), series.begin() + 5);
    REQUIRE_THROWS_AS(correlate_loss_vs_grad_ratio(tiny), insufficient_data_error);
}

TEST_CASE("undefined ratios are excluded and counted") {
    MetricsTimeSeries series;
    for (int i = 0; i < 15; ++i) {
        MetricsRow row;
        row.step = i;
        row.epsilon = 0.1 * (i + 1);
        row.grad_norm_ratio = 0.2 * (i + 1);
        series.push_back(row);
    }
    series[3].epsilon = std::numeric_limits<double>::quiet_NaN();
    series[7].grad_norm_ratio = 0.0;
    const RatioCorrelation c = correlate_loss_vs_grad_ratio(series);
    REQUIRE(c.used_rows == 13);
    REQUIRE(c.excluded_rows == 2);
}
