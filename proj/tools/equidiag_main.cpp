// equidiag — equivariance diagnostics for data-augmented training.
//
// Subcommands: train, measure, landscape, hessian, sensitivity, theorems,
// project-head. Exit codes: 0 success, 2 usage/config error, 3 numerical
// failure. All outputs are deterministic given (config, seed); the
// EQUIDIAG_OUT environment variable overrides the output directory.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "equidiag/analysis.hpp"
#include "equidiag/io.hpp"
#include "equidiag/metrics.hpp"
#include "equidiag/models.hpp"
#include "equidiag/training.hpp"

namespace {

using namespace equidiag;

struct CommonArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    int threads = hardware_threads();
    int rotations = 0;  // 0 = use config default
};

struct Context {
    ExperimentConfig config;
    std::string out_dir;
    int threads = 1;
};

Context make_context(const CommonArgs& args) {
    Context ctx;
    ctx.config = load_config(args.config_path);
    if (args.seed) {
        // Master-seed override re-derives the unset sub-seeds.
        ctx.config.seed = *args.seed;
        ctx.config.task.seed = detail::mix64(ctx.config.seed ^ 0x7461736bull);
        ctx.config.train.seed = detail::mix64(ctx.config.seed ^ 0x747261696eull);
    }
    ctx.out_dir = ctx.config.out_dir;
    if (!args.out_dir.empty()) ctx.out_dir = args.out_dir;
    if (const char* env = std::getenv("EQUIDIAG_OUT"); env && *env) ctx.out_dir = env;
    ctx.threads = args.threads < 1 ? 1 : args.threads;
    if (args.rotations != 0) ctx.config.train.eval_rotations = args.rotations;
    return ctx;
}

std::vector<std::string> designated_subset(ModelKind kind) {
    switch (kind) {
        case ModelKind::CoordMlp: return {"out.w", "out.b"};
        case ModelKind::InvariantGraphHead: return {"head.w"};
        case ModelKind::EquivariantBaseline: return {"radial1.w", "radial1.b"};
    }
    throw argument_error("bad model kind");
}

Model load_checkpoint_checked(const std::string& path, const ExperimentConfig& config) {
    Model model = load_checkpoint(path);
    if (model.kind() != config.model.kind)
        throw config_error("checkpoint model kind '" + to_string(model.kind()) +
                           "' does not match config '" + to_string(config.model.kind) + "'");
    if (model.config().atom_count != config.task.atom_count)
        throw config_error("checkpoint atom count does not match the configured task");
    return model;
}

std::vector<GroupElement> measurement_elements(const GroupSpec& group, int n, RngState& rng) {
    if (group.kind == GroupKind::FiniteSubgroup) return enumerate(group);
    std::vector<GroupElement> elements(static_cast<std::size_t>(n));
    for (auto& e : elements) e = sample_uniform(group, rng);
    return elements;
}

json decomposition_json(const LossDecomposition& d) {
    return {{"total", d.total}, {"mean", d.mean}, {"equiv", d.equiv}, {"percent", d.percent}};
}

json report_json(const EstimatorReport& r) {
    return {{"mu_hat", r.mu_hat},
            {"sigma_hat_sq", r.sigma_hat_sq},
            {"mean_loss_unbiased", r.mean_loss_unbiased},
            {"equiv_loss_unbiased", r.equiv_loss_unbiased},
            {"percent_bias_corrected", r.percent_bias_corrected},
            {"rotation_count", r.rotation_count}};
}

// ---------------------------------------------------------------------------

int cmd_train(const CommonArgs& args) {
    const Context ctx = make_context(args);
    const ExperimentConfig& cfg = ctx.config;
    std::filesystem::create_directories(ctx.out_dir);

    const TaskData task = make_task(cfg.task);
    const GroupSpec group = group_from_config(cfg.group, cfg.seed);
    const LossModel loss_model{loss_kind_from_string(cfg.loss_kind), 3 * cfg.task.atom_count};
    Model model = Model::init(cfg.model, detail::mix64(cfg.seed ^ 0x6d6f64656cull));

    RngState rng{cfg.train.seed};
    TrainResult result = train(std::move(model), task, loss_model, group, cfg.train, rng, ctx.threads);

    const std::string metrics_path = ctx.out_dir + "/metrics.csv";
    write_metrics_csv(metrics_path, result.series);
    save_checkpoint(ctx.out_dir + "/checkpoint.bin", result.model, cfg.seed);
    write_manifest(ctx.out_dir + "/manifest.json", cfg, dataset_hash(task),
                   {{"command", "train"}, {"steps_run", cfg.train.steps}});

    VecX steps, percent, total, mean, equiv;
    for (const MetricsRow& r : result.series) {
        steps.push_back(static_cast<double>(r.step));
        percent.push_back(r.percent);
        total.push_back(r.loss_total);
        mean.push_back(r.loss_mean);
        equiv.push_back(r.loss_equiv);
    }
    write_line_chart_svg(ctx.out_dir + "/percent_vs_step.svg", "percent loss from equivariance error",
                         "step", "percent", {{"percent", steps, percent}}, false, false);
    write_line_chart_svg(ctx.out_dir + "/percent_vs_step_loglog.svg",
                         "percent loss from equivariance error", "step", "percent",
                         {{"percent", steps, percent}}, true, true);
    write_line_chart_svg(ctx.out_dir + "/losses_vs_step.svg", "held-out loss decomposition", "step",
                         "loss", {{"total", steps, total}, {"mean", steps, mean}, {"equiv", steps, equiv}},
                         true, true);
    std::cout << "wrote " << metrics_path << "\n";
    return 0;
}

int cmd_measure(const CommonArgs& args, const std::string& checkpoint, bool exact_group) {
    const Context ctx = make_context(args);
    const ExperimentConfig& cfg = ctx.config;
    const Model model = load_checkpoint_checked(checkpoint, cfg);
    const TaskData task = make_task(cfg.task);
    const GroupSpec group = group_from_config(cfg.group, cfg.seed);
    const LossModel loss_model{loss_kind_from_string(cfg.loss_kind), model.dimension()};
    const BlockAction action{group, cfg.task.atom_count};

    json out;
    out["n_rotations"] = cfg.train.eval_rotations;
    if (exact_group) {
        if (group.kind != GroupKind::FiniteSubgroup)
            throw config_error("--exact-group requires a finite-subgroup group config");
        const LossDecomposition d =
            decompose_exact(model, loss_model, action, task.heldout, group, ctx.threads);
        out["mode"] = "exact";
        out["decomposition"] = decomposition_json(d);
        if (!args.out_dir.empty() || std::getenv("EQUIDIAG_OUT"))
            append_evaluation_csv(ctx.out_dir + "/evaluations.csv", 0, d.total, d.mean, d.equiv,
                                  d.percent, static_cast<int>(enumerate(group).size()), cfg.seed);
    } else {
        if (cfg.train.eval_rotations < 2)
            throw argument_error("bias-corrected measurement needs at least 2 rotations");
        RngState rng{detail::mix64(cfg.seed ^ 0x6d656173ull)};
        const SampledDecomposition d = decompose_sampled(model, loss_model, action, task.heldout, group,
                                                         cfg.train.eval_rotations, rng, ctx.threads);
        out["mode"] = "sampled";
        out["decomposition"] = decomposition_json(d.naive);
        out["estimator_report"] = report_json(d.report);
        if (!args.out_dir.empty() || std::getenv("EQUIDIAG_OUT"))
            append_evaluation_csv(ctx.out_dir + "/evaluations.csv", 0, d.naive.total,
                                  d.report.mean_loss_unbiased, d.report.equiv_loss_unbiased,
                                  d.report.percent_bias_corrected, d.report.rotation_count, cfg.seed);
    }
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_landscape(const CommonArgs& args, const std::string& checkpoint, int grid_radius,
                  double step_scale, const std::string& subset_csv) {
    const Context ctx = make_context(args);
    const ExperimentConfig& cfg = ctx.config;
    const Model model = load_checkpoint_checked(checkpoint, cfg);
    const TaskData task = make_task(cfg.task);
    const GroupSpec group = group_from_config(cfg.group, cfg.seed);
    const LossModel loss_model{loss_kind_from_string(cfg.loss_kind), model.dimension()};
    const BlockAction action{group, cfg.task.atom_count};
    std::filesystem::create_directories(ctx.out_dir);

    const Dataset batch = task.train.slice(0, static_cast<std::size_t>(cfg.train.batch_size));
    RngState rng{detail::mix64(cfg.seed ^ 0x6c616e64ull)};
    const std::vector<GroupElement> elements = measurement_elements(group, cfg.train.eval_rotations, rng);
    std::vector<std::string> subset = designated_subset(model.kind());
    if (!subset_csv.empty()) {
        subset.clear();
        std::istringstream ss(subset_csv);
        std::string tok;
        while (std::getline(ss, tok, ',')) subset.push_back(tok);
    }

    const LandscapeGrid grid = landscape_grid(model, loss_model, action, batch, elements, subset,
                                              grid_radius, step_scale, cfg.train.learning_rate, ctx.threads);
    write_matrix_csv(ctx.out_dir + "/landscape_mean.csv", grid.mean_values);
    write_matrix_csv(ctx.out_dir + "/landscape_equiv.csv", grid.equiv_values);
    write_heatmap_pair_svg(ctx.out_dir + "/landscape.svg", grid.mean_values, grid.equiv_values,
                           "loss landscape");
    json meta;
    meta["axis1"] = grid.axis1;
    meta["axis2"] = grid.axis2;
    meta["step_size"] = grid.step_size;
    meta["grid_radius"] = grid.grid_radius;
    meta["subset"] = subset;
    std::ofstream(ctx.out_dir + "/landscape.json") << meta.dump(2) << "\n";
    std::cout << "wrote " << ctx.out_dir << "/landscape_{mean,equiv}.csv\n";
    return 0;
}

int cmd_hessian(const CommonArgs& args, const std::string& checkpoint, int batches,
                const std::string& subset_csv) {
    const Context ctx = make_context(args);
    const ExperimentConfig& cfg = ctx.config;
    const Model model = load_checkpoint_checked(checkpoint, cfg);
    const TaskData task = make_task(cfg.task);
    const GroupSpec group = group_from_config(cfg.group, cfg.seed);
    const LossModel loss_model{loss_kind_from_string(cfg.loss_kind), model.dimension()};
    const BlockAction action{group, cfg.task.atom_count};
    std::filesystem::create_directories(ctx.out_dir);

    if (batches < 1) throw argument_error("--batches must be >= 1");
    const auto per = static_cast<std::size_t>(cfg.train.batch_size);
    if (per * static_cast<std::size_t>(batches) > task.train.size())
        throw config_error("not enough training samples for the requested batches");

    std::vector<std::string> subset = designated_subset(model.kind());
    if (!subset_csv.empty()) {
        subset.clear();
        std::istringstream ss(subset_csv);
        std::string tok;
        while (std::getline(ss, tok, ',')) subset.push_back(tok);
    }

    RngState rng{detail::mix64(cfg.seed ^ 0x68657373ull)};
    json records = json::array();
    for (int b = 0; b < batches; ++b) {
        const Dataset batch = task.train.slice(static_cast<std::size_t>(b) * per, per);
        const std::vector<GroupElement> elements = measurement_elements(group, cfg.train.eval_rotations, rng);
        const auto [mean_summary, equiv_summary] =
            condition_numbers(model, loss_model, action, batch, elements, subset, ctx.threads);
        for (const HessianSummary* s : {&mean_summary, &equiv_summary}) {
            records.push_back({{"subset", s->subset},
                               {"lambda_max_pos", s->max_pos_eig},
                               {"lambda_min_pos", s->min_pos_eig},
                               {"cond", s->condition_number},
                               {"loss_kind", s->loss_kind},
                               {"batch_index", b},
                               {"degenerate", s->degenerate}});
        }
    }
    std::ofstream(ctx.out_dir + "/hessian.json") << records.dump(2) << "\n";
    std::cout << records.dump(2) << "\n";
    return 0;
}

int cmd_sensitivity(const CommonArgs& args, const std::string& checkpoint, int max_rotations,
                    int repeats) {
    const Context ctx = make_context(args);
    const ExperimentConfig& cfg = ctx.config;
    const Model model = load_checkpoint_checked(checkpoint, cfg);
    const TaskData task = make_task(cfg.task);
    const GroupSpec group = group_from_config(cfg.group, cfg.seed);
    const LossModel loss_model{loss_kind_from_string(cfg.loss_kind), model.dimension()};
    const BlockAction action{group, cfg.task.atom_count};
    std::filesystem::create_directories(ctx.out_dir);

    RngState rng{detail::mix64(cfg.seed ^ 0x73656e73ull)};
    const SensitivityTable table = sensitivity_bootstrap(model, loss_model, action, task.heldout, group,
                                                         max_rotations, repeats, rng, ctx.threads);
    write_sensitivity_csv(ctx.out_dir + "/sensitivity.csv", table);
    json out;
    out["rows"] = json::array();
    for (const SensitivityRow& r : table.rows)
        out["rows"].push_back({{"n", r.n}, {"percent_mean", r.percent_mean}, {"percent_stderr", r.percent_stderr}});
    out["low_repeats_warning"] = table.low_repeats_warning;
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_theorems(const CommonArgs& args, const std::string& checkpoint) {
    const Context ctx = make_context(args);
    const ExperimentConfig& cfg = ctx.config;
    const Model model = load_checkpoint_checked(checkpoint, cfg);
    const TaskData task = make_task(cfg.task);
    GroupSpec group = group_from_config(cfg.group, cfg.seed);
    std::string group_note = "config";
    if (group.kind != GroupKind::FiniteSubgroup) {
        group = octahedral_rotations();  // finite surrogate for exact expectations
        group_note = "octahedral surrogate for SO(3)";
    }
    const BlockAction action{group, cfg.task.atom_count};
    const Dataset data = task.heldout.slice(0, 16);
    std::filesystem::create_directories(ctx.out_dir);

    json out;
    out["group"] = group_note;
    if (model.kind() == ModelKind::InvariantGraphHead) {
        RngState rng{detail::mix64(cfg.seed ^ 0x7468310aull)};
        const HeadQuadraticReport t1 = verify_head_quadratic_form(model, action, data, group, rng);
        json scaling = json::array();
        for (const auto& [s, ratio] : t1.scaling) scaling.push_back({{"s", s}, {"ratio", ratio}});
        out["head_quadratic_form"] = {{"lambda_min", t1.q.lambda_min},
                           {"lambda_max", t1.q.lambda_max},
                           {"degenerate", t1.q.degenerate},
                           {"l_equiv", t1.l_equiv_actual},
                           {"quadratic_form", t1.quadratic_form_value},
                           {"identity_rel_error", t1.identity_rel_error},
                           {"scaling", scaling},
                           {"max_scaling_rel_error", t1.max_scaling_rel_error},
                           {"bound_checks", t1.bound_checks},
                           {"bound_violations", t1.bound_violations}};
    }
    json rays = json::array();
    std::vector<std::string> layers;
    if (model.kind() == ModelKind::InvariantGraphHead) layers = {"head"};
    if (model.kind() == ModelKind::CoordMlp) layers = {"out", "dense0"};
    if (model.kind() == ModelKind::EquivariantBaseline)
        throw numeric_error("equivariant-baseline has zero deviation; scaling rays are degenerate");
    for (const std::string& layer : layers) {
        const DeviationScalingReport t = verify_deviation_scaling(model, action, data, group, layer);
        json points = json::array();
        for (const RayPoint& p : t.points)
            points.push_back({{"s", p.s}, {"l_equiv", p.l_equiv}, {"grad_norm_perp", p.grad_norm_perp}});
        rays.push_back({{"layer", t.layer},
                        {"quadratic_slope", t.loss_slope_small_s},
                        {"gradient_slope", t.grad_slope_small_s},
                        {"quadratic_slope_fit", t.loss_slope_fit},
                        {"gradient_slope_fit", t.grad_slope_fit},
                        {"points", points}});
    }
    out["deviation_scaling"] = rays;
    std::ofstream(ctx.out_dir + "/theorems.json") << out.dump(2) << "\n";
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_project_head(const CommonArgs& args, const std::string& checkpoint) {
    const Context ctx = make_context(args);
    const Model model = load_checkpoint_checked(checkpoint, ctx.config);
    const HeadSplit split = split_head(model);
    json out;
    out["w_bar"] = split.w_bar;
    out["d_x"] = VecX(split.deviation.row(0).begin(), split.deviation.row(0).end());
    out["d_y"] = VecX(split.deviation.row(1).begin(), split.deviation.row(1).end());
    out["d_z"] = VecX(split.deviation.row(2).begin(), split.deviation.row(2).end());
    out["deviation_norm_sq"] = split.deviation_norm_sq;
    std::cout << out.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"equivariance diagnostics toolkit"};
    app.require_subcommand(1);

    CommonArgs common;
    std::string checkpoint;
    bool exact_group = false;
    int grid_radius = 10;
    double step_scale = 2.5;
    std::string subset_csv;
    int batches = 1;
    int max_rotations = 40;
    int repeats = 200;

    auto add_common = [&](CLI::App* cmd, bool needs_checkpoint) {
        cmd->add_option("--config", common.config_path, "experiment config (.toml or .json)")->required();
        cmd->add_option("--seed", common.seed, "master seed override");
        cmd->add_option("--out", common.out_dir, "output directory (EQUIDIAG_OUT overrides)");
        cmd->add_option("--threads", common.threads, "worker thread cap");
        cmd->add_option("--rotations", common.rotations, "rotations per measurement");
        if (needs_checkpoint)
            cmd->add_option("--checkpoint", checkpoint, "checkpoint .bin path")->required();
    };

    CLI::App* c_train = app.add_subcommand("train", "run a training experiment");
    add_common(c_train, false);
    CLI::App* c_measure = app.add_subcommand("measure", "decompose a checkpoint's held-out loss");
    add_common(c_measure, true);
    c_measure->add_flag("--exact-group", exact_group, "enumerate the finite group instead of sampling");
    CLI::App* c_landscape = app.add_subcommand("landscape", "2D loss-landscape grids");
    add_common(c_landscape, true);
    c_landscape->add_option("--grid-radius", grid_radius, "cells per side = 2r+1");
    c_landscape->add_option("--step-scale", step_scale, "multiple of the training step size");
    c_landscape->add_option("--subset", subset_csv, "comma-separated parameter segments");
    CLI::App* c_hessian = app.add_subcommand("hessian", "condition numbers of L_mean and L_equiv");
    add_common(c_hessian, true);
    c_hessian->add_option("--batches", batches, "number of minibatches");
    c_hessian->add_option("--subset", subset_csv, "comma-separated parameter segments");
    CLI::App* c_sens = app.add_subcommand("sensitivity", "rotation-count bootstrap of percent");
    add_common(c_sens, true);
    c_sens->add_option("--max-rotations", max_rotations, "largest N");
    c_sens->add_option("--repeats", repeats, "bootstrap repeats per N");
    CLI::App* c_theorems = app.add_subcommand("theorems", "quadratic/linear scaling checks");
    add_common(c_theorems, true);
    CLI::App* c_project = app.add_subcommand("project-head", "force-head equivariant split");
    add_common(c_project, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (c_train->parsed()) return cmd_train(common);
        if (c_measure->parsed()) return cmd_measure(common, checkpoint, exact_group);
        if (c_landscape->parsed()) return cmd_landscape(common, checkpoint, grid_radius, step_scale, subset_csv);
        if (c_hessian->parsed()) return cmd_hessian(common, checkpoint, batches, subset_csv);
        if (c_sens->parsed()) return cmd_sensitivity(common, checkpoint, max_rotations, repeats);
        if (c_theorems->parsed()) return cmd_theorems(common, checkpoint);
        if (c_project->parsed()) return cmd_project_head(common, checkpoint);
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const argument_error& e) {
        std::cerr << "argument error: " << e.what() << "\n";
        return 2;
    } catch (const shape_error& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return 2;
    } catch (const unsupported_error& e) {
        std::cerr << "unsupported: " << e.what() << "\n";
        return 2;
    } catch (const budget_error& e) {
        std::cerr << "budget error: " << e.what() << "\n";
        return 3;
    } catch (const numeric_error& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const insufficient_data_error& e) {
        std::cerr << "insufficient data: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
