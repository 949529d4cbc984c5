#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "equidiag/errors.hpp"
#include "equidiag/group.hpp"
#include "equidiag/losses.hpp"
#include "equidiag/metrics.hpp"
#include "equidiag/models.hpp"
#include "equidiag/training.hpp"

namespace equidiag {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Formatting
// ---------------------------------------------------------------------------

/// Shortest decimal form that round-trips; "nan"/"inf" spelled out. Keeps CSV
/// output bitwise reproducible.
inline std::string fmt_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    std::array<char, 32> buf{};
    const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

inline std::uint64_t fnv1a64(const void* data, std::size_t bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t dataset_hash(const TaskData& data) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const Dataset* split : {&data.train, &data.heldout}) {
        for (const VecX& v : split->inputs) h = fnv1a64(v.data(), v.size() * sizeof(double), h);
        for (const VecX& v : split->targets) h = fnv1a64(v.data(), v.size() * sizeof(double), h);
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << v;
    return os.str();
}

// ---------------------------------------------------------------------------
// CSV surfaces (headers are part of the public contract)
// ---------------------------------------------------------------------------

inline constexpr const char* kMetricsCsvHeader =
    "step,loss_total,loss_mean,loss_equiv,percent,grad_norm_total,grad_norm_mean,grad_norm_equiv,"
    "grad_norm_ratio,head_deviation_sq,epsilon";

inline constexpr const char* kEvaluationCsvHeader =
    "step,loss_total,loss_mean,loss_equiv,percent_equiv,n_rotations,seed";

inline constexpr const char* kSensitivityCsvHeader = "n,percent_mean,percent_stderr";

inline void write_metrics_csv(const std::string& path, const MetricsTimeSeries& series) {
    std::ofstream out(path);
    if (!out) throw config_error("cannot write " + path);
    out << kMetricsCsvHeader << "\n";
    for (const MetricsRow& r : series) {
        out << r.step << ',' << fmt_double(r.loss_total) << ',' << fmt_double(r.loss_mean) << ','
            << fmt_double(r.loss_equiv) << ',' << fmt_double(r.percent) << ','
            << fmt_double(r.grad_norm_total) << ',' << fmt_double(r.grad_norm_mean) << ','
            << fmt_double(r.grad_norm_equiv) << ',' << fmt_double(r.grad_norm_ratio) << ','
            << fmt_double(r.head_deviation_sq) << ',' << fmt_double(r.epsilon) << "\n";
    }
}

inline void append_evaluation_csv(const std::string& path, int step, double total, double mean,
                                  double equiv, double percent, int n_rotations, std::uint64_t seed) {
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    std::ofstream out(path, std::ios::app);
    if (!out) throw config_error("cannot write " + path);
    if (fresh) out << kEvaluationCsvHeader << "\n";
    out << step << ',' << fmt_double(total) << ',' << fmt_double(mean) << ',' << fmt_double(equiv)
        << ',' << fmt_double(percent) << ',' << n_rotations << ',' << seed << "\n";
}

inline void write_sensitivity_csv(const std::string& path, const SensitivityTable& table) {
    std::ofstream out(path);
    if (!out) throw config_error("cannot write " + path);
    out << kSensitivityCsvHeader << "\n";
    for (const SensitivityRow& r : table.rows)
        out << r.n << ',' << fmt_double(r.percent_mean) << ',' << fmt_double(r.percent_stderr) << "\n";
}

inline void write_matrix_csv(const std::string& path, const MatX& m) {
    std::ofstream out(path);
    if (!out) throw config_error("cannot write " + path);
    for (std::size_t i = 0; i < m.rows; ++i) {
        for (std::size_t j = 0; j < m.cols; ++j) {
            if (j) out << ',';
            out << fmt_double(m(i, j));
        }
        out << "\n";
    }
}

// ---------------------------------------------------------------------------
// SVG plots (polyline charts, fixed viewBox, no external dependencies and no
// timestamps so outputs are reproducible)
// ---------------------------------------------------------------------------

struct SvgSeries {
    std::string name;
    VecX x, y;
};

namespace detail {
inline std::string svg_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

inline std::string axis_label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

inline constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
}  // namespace detail

inline void write_line_chart_svg(const std::string& path, const std::string& title,
                                 const std::string& x_label, const std::string& y_label,
                                 const std::vector<SvgSeries>& series, bool log_x, bool log_y) {
    const double width = 820, height = 520;
    const double ml = 70, mr = 20, mt = 40, mb = 50;
    auto tx = [&](double v) { return log_x ? std::log10(v) : v; };
    auto ty = [&](double v) { return log_y ? std::log10(v) : v; };
    auto usable = [&](double x, double y) {
        return std::isfinite(x) && std::isfinite(y) && (!log_x || x > 0) && (!log_y || y > 0);
    };

    double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
    bool any = false;
    for (const SvgSeries& s : series) {
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!usable(s.x[i], s.y[i])) continue;
            const double px = tx(s.x[i]), py = ty(s.y[i]);
            if (!any) {
                x_min = x_max = px;
                y_min = y_max = py;
                any = true;
            } else {
                x_min = std::min(x_min, px);
                x_max = std::max(x_max, px);
                y_min = std::min(y_min, py);
                y_max = std::max(y_max, py);
            }
        }
    }
    if (x_max - x_min < 1e-12) x_max = x_min + 1;
    if (y_max - y_min < 1e-12) y_max = y_min + 1;

    auto px_of = [&](double v) { return ml + (tx(v) - x_min) / (x_max - x_min) * (width - ml - mr); };
    auto py_of = [&](double v) { return height - mb - (ty(v) - y_min) / (y_max - y_min) * (height - mt - mb); };

    std::ofstream out(path);
    if (!out) throw config_error("cannot write " + path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << width << " " << height
        << "\" font-family=\"sans-serif\" font-size=\"13\">\n";
    out << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
    out << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"16\">" << title
        << "</text>\n";
    out << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << width - ml - mr << "\" height=\""
        << height - mt - mb << "\" fill=\"none\" stroke=\"#444\"/>\n";
    const double x_lo = log_x ? std::pow(10, x_min) : x_min;
    const double x_hi = log_x ? std::pow(10, x_max) : x_max;
    const double y_lo = log_y ? std::pow(10, y_min) : y_min;
    const double y_hi = log_y ? std::pow(10, y_max) : y_max;
    out << "<text x=\"" << ml << "\" y=\"" << height - mb + 18 << "\">" << detail::axis_label(x_lo) << "</text>\n";
    out << "<text x=\"" << width - mr << "\" y=\"" << height - mb + 18 << "\" text-anchor=\"end\">"
        << detail::axis_label(x_hi) << "</text>\n";
    out << "<text x=\"" << ml - 6 << "\" y=\"" << height - mb << "\" text-anchor=\"end\">"
        << detail::axis_label(y_lo) << "</text>\n";
    out << "<text x=\"" << ml - 6 << "\" y=\"" << mt + 12 << "\" text-anchor=\"end\">"
        << detail::axis_label(y_hi) << "</text>\n";
    out << "<text x=\"" << width / 2 << "\" y=\"" << height - 8 << "\" text-anchor=\"middle\">" << x_label
        << (log_x ? " (log)" : "") << "</text>\n";
    out << "<text x=\"16\" y=\"" << height / 2 << "\" transform=\"rotate(-90 16 " << height / 2 << ")\""
        << " text-anchor=\"middle\">" << y_label << (log_y ? " (log)" : "") << "</text>\n";

    for (std::size_t si = 0; si < series.size(); ++si) {
        const SvgSeries& s = series[si];
        const char* color = detail::kPalette[si % 6];
        out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!usable(s.x[i], s.y[i])) continue;
            out << detail::svg_num(px_of(s.x[i])) << ',' << detail::svg_num(py_of(s.y[i])) << ' ';
        }
        out << "\"/>\n";
        out << "<text x=\"" << width - mr - 8 << "\" y=\"" << mt + 16 + 16 * static_cast<double>(si)
            << "\" text-anchor=\"end\" fill=\"" << color << "\">" << s.name << "</text>\n";
    }
    out << "</svg>\n";
}

/// Two heat-map panels (mean | equiv) with one shared color scale.
inline void write_heatmap_pair_svg(const std::string& path, const MatX& mean_values,
                                   const MatX& equiv_values, const std::string& title) {
    const std::size_t n = mean_values.rows;
    const double cell = 360.0 / static_cast<double>(n);
    const double width = 2 * 380 + 80, height = 360 + 90;
    double lo = mean_values.a[0], hi = mean_values.a[0];
    for (const MatX* m : {&mean_values, &equiv_values})
        for (const double v : m->a) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    if (hi - lo < 1e-300) hi = lo + 1;
    auto color = [&](double v) {
        const double t = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
        // dark blue -> teal -> yellow
        const int r = static_cast<int>(255 * std::clamp(2 * t - 0.84, 0.0, 1.0));
        const int g = static_cast<int>(255 * std::clamp(1.6 * t, 0.0, 0.95));
        const int b = static_cast<int>(255 * std::clamp(1.0 - 1.2 * t, 0.1, 1.0));
        char buf[16];
        std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
        return std::string(buf);
    };

    std::ofstream out(path);
    if (!out) throw config_error("cannot write " + path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << width << " " << height
        << "\" font-family=\"sans-serif\" font-size=\"13\">\n";
    out << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
    out << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"16\">" << title
        << " (shared scale " << detail::axis_label(lo) << " .. " << detail::axis_label(hi) << ")</text>\n";
    const char* names[2] = {"L_mean", "L_equiv"};
    const MatX* grids[2] = {&mean_values, &equiv_values};
    for (int panel = 0; panel < 2; ++panel) {
        const double ox = 30 + panel * 400;
        out << "<text x=\"" << ox + 180 << "\" y=\"" << 50 << "\" text-anchor=\"middle\">" << names[panel]
            << "</text>\n";
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                out << "<rect x=\"" << detail::svg_num(ox + static_cast<double>(j) * cell) << "\" y=\""
                    << detail::svg_num(60 + static_cast<double>(i) * cell) << "\" width=\""
                    << detail::svg_num(cell + 0.5) << "\" height=\"" << detail::svg_num(cell + 0.5)
                    << "\" fill=\"" << color((*grids[panel])(i, j)) << "\"/>\n";
    }
    out << "</svg>\n";
}

// ---------------------------------------------------------------------------
// Experiment configuration (TOML subset or JSON)
// ---------------------------------------------------------------------------

struct GroupConfig {
    std::string kind = "continuous-SO3";  // or "finite-subgroup"
    std::string builder = "octahedral";   // finite case: identity|c2x..c2z|c4x..c4z|octahedral
    std::string matrix_file;              // finite case alternative: JSON matrix list
};

struct ExperimentConfig {
    std::uint64_t seed = 42;
    std::string out_dir = "out";
    std::string loss_kind = "mse";
    SyntheticTask task;
    ModelConfig model;
    TrainConfig train;
    GroupConfig group;
};

namespace detail {

// Minimal TOML reader covering the experiment-config subset: [section] headers
// (dotted keys allowed), key = value with strings, integers, floats, booleans
// and flat arrays, and # comments.
inline json parse_toml_subset(std::istream& in, const std::string& origin) {
    json root = json::object();
    json* section = &root;
    std::string line;
    int line_no = 0;
    auto fail = [&](const std::string& msg) {
        throw config_error(origin + ":" + std::to_string(line_no) + ": " + msg);
    };
    auto strip = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    };
    auto parse_scalar = [&](std::string tok) -> json {
        tok = strip(tok);
        if (tok.empty()) fail("empty value");
        if (tok.front() == '"') {
            if (tok.size() < 2 || tok.back() != '"') fail("unterminated string");
            std::string out;
            for (std::size_t i = 1; i + 1 < tok.size(); ++i) {
                if (tok[i] == '\\' && i + 2 < tok.size()) {
                    ++i;
                    out += tok[i] == 'n' ? '\n' : tok[i];
                } else {
                    out += tok[i];
                }
            }
            return out;
        }
        if (tok == "true") return true;
        if (tok == "false") return false;
        if (tok.find_first_of(".eE") == std::string::npos || (tok.size() > 1 && tok[0] == '0' && tok[1] == 'x')) {
            try {
                if (tok[0] == '-') return std::stoll(tok);
                return static_cast<std::uint64_t>(std::stoull(tok, nullptr, 0));
            } catch (...) {
                fail("bad integer: " + tok);
            }
        }
        try {
            return std::stod(tok);
        } catch (...) {
            fail("bad number: " + tok);
        }
        return nullptr;
    };

    while (std::getline(in, line)) {
        ++line_no;
        // strip comments outside of strings
        bool in_str = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_str = !in_str;
            if (line[i] == '#' && !in_str) {
                line = line.substr(0, i);
                break;
            }
        }
        line = strip(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') fail("bad section header");
            std::string name = strip(line.substr(1, line.size() - 2));
            if (name.empty()) fail("empty section name");
            section = &root;
            std::size_t pos = 0;
            while (pos != std::string::npos) {
                const auto dot = name.find('.', pos);
                const std::string part = name.substr(pos, dot == std::string::npos ? dot : dot - pos);
                section = &(*section)[part];
                if (!section->is_object()) *section = json::object();
                pos = dot == std::string::npos ? dot : dot + 1;
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) fail("expected key = value");
        const std::string key = strip(line.substr(0, eq));
        std::string value = strip(line.substr(eq + 1));
        if (key.empty()) fail("empty key");
        if (!value.empty() && value.front() == '[') {
            if (value.back() != ']') fail("unterminated array");
            json arr = json::array();
            std::string body = value.substr(1, value.size() - 2);
            std::string tok;
            bool str = false;
            for (const char c : body) {
                if (c == '"') str = !str;
                if (c == ',' && !str) {
                    if (!strip(tok).empty()) arr.push_back(parse_scalar(tok));
                    tok.clear();
                } else {
                    tok += c;
                }
            }
            if (!strip(tok).empty()) arr.push_back(parse_scalar(tok));
            (*section)[key] = arr;
        } else {
            (*section)[key] = parse_scalar(value);
        }
    }
    return root;
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.is_object() || !j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw config_error(std::string("bad value for '") + key + "': " + e.what());
    }
}

}  // namespace detail

inline json config_to_json(const ExperimentConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    j["loss"] = {{"kind", c.loss_kind}};
    j["task"] = {{"kind", to_string(c.task.kind)},
                 {"atom_count", c.task.atom_count},
                 {"sample_count", c.task.sample_count},
                 {"heldout_count", c.task.heldout_count},
                 {"noise_scale", c.task.noise_scale},
                 {"seed", c.task.seed}};
    j["model"] = {{"kind", to_string(c.model.kind)}, {"hidden", c.model.hidden}};
    j["train"] = {{"optimizer", to_string(c.train.optimizer)},
                  {"learning_rate", c.train.learning_rate},
                  {"batch_size", c.train.batch_size},
                  {"steps", c.train.steps},
                  {"augmentation", c.train.augmentation},
                  {"measure_every", c.train.measure_every},
                  {"eval_rotations", c.train.eval_rotations},
                  {"seed", c.train.seed}};
    j["group"] = {{"kind", c.group.kind}, {"builder", c.group.builder}, {"matrix_file", c.group.matrix_file}};
    return j;
}

inline std::vector<int> default_hidden(ModelKind kind) {
    switch (kind) {
        case ModelKind::CoordMlp: return {32, 32};
        // Scalar head feature: the radial profile is shared across axes, so
        // the only route to equivariance is shrinking the head deviation.
        case ModelKind::InvariantGraphHead: return {16, 1};
        case ModelKind::EquivariantBaseline: return {16};
    }
    throw argument_error("bad model kind");
}

/// Build a config from parsed JSON, filling every default so the result is
/// fully self-describing. Unset sub-seeds are derived from the master seed.
inline ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    c.seed = detail::get_or<std::uint64_t>(j, "seed", 42);
    c.out_dir = detail::get_or<std::string>(j, "out_dir", "out");
    if (j.contains("loss")) c.loss_kind = detail::get_or<std::string>(j.at("loss"), "kind", "mse");
    loss_kind_from_string(c.loss_kind);  // validate

    const json task = j.contains("task") ? j.at("task") : json::object();
    c.task.kind = task_kind_from_string(detail::get_or<std::string>(task, "kind", "spring-forces"));
    c.task.atom_count = detail::get_or<int>(task, "atom_count", 8);
    c.task.sample_count = detail::get_or<int>(task, "sample_count", 2048);
    c.task.heldout_count = detail::get_or<int>(task, "heldout_count", 256);
    c.task.noise_scale = detail::get_or<double>(task, "noise_scale", 0.1);
    c.task.seed = detail::get_or<std::uint64_t>(task, "seed", detail::mix64(c.seed ^ 0x7461736bull));

    const json model = j.contains("model") ? j.at("model") : json::object();
    c.model.kind = model_kind_from_string(detail::get_or<std::string>(model, "kind", "coord-mlp"));
    c.model.atom_count = c.task.atom_count;
    c.model.hidden = detail::get_or<std::vector<int>>(model, "hidden", default_hidden(c.model.kind));

    const json train = j.contains("train") ? j.at("train") : json::object();
    c.train.optimizer = optimizer_from_string(detail::get_or<std::string>(train, "optimizer", "adam"));
    c.train.learning_rate = detail::get_or<double>(train, "learning_rate", 1e-3);
    c.train.batch_size = detail::get_or<int>(train, "batch_size", 32);
    c.train.steps = detail::get_or<int>(train, "steps", 5000);
    c.train.augmentation = detail::get_or<bool>(train, "augmentation", true);
    c.train.measure_every = detail::get_or<int>(train, "measure_every", 50);
    c.train.eval_rotations = detail::get_or<int>(train, "eval_rotations", 10);
    c.train.seed = detail::get_or<std::uint64_t>(train, "seed", detail::mix64(c.seed ^ 0x747261696eull));

    const json group = j.contains("group") ? j.at("group") : json::object();
    c.group.kind = detail::get_or<std::string>(group, "kind", "continuous-SO3");
    c.group.builder = detail::get_or<std::string>(group, "builder", "octahedral");
    c.group.matrix_file = detail::get_or<std::string>(group, "matrix_file", "");
    if (c.group.kind != "continuous-SO3" && c.group.kind != "finite-subgroup")
        throw config_error("group.kind must be continuous-SO3 or finite-subgroup");
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open config file: " + path);
    json j;
    if (path.ends_with(".json")) {
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw config_error("invalid JSON config " + path + ": " + e.what());
        }
    } else {
        j = detail::parse_toml_subset(in, path);
    }
    return config_from_json(j);
}

inline GroupSpec group_from_config(const GroupConfig& g, std::uint64_t seed) {
    if (g.kind == "continuous-SO3") return so3(seed);
    if (!g.matrix_file.empty()) return load_group_json(g.matrix_file);
    if (g.builder == "identity") return identity_group();
    if (g.builder == "octahedral") return octahedral_rotations();
    if (g.builder.size() == 3 && (g.builder[0] == 'c') && (g.builder[1] == '2' || g.builder[1] == '4')) {
        const int order = g.builder[1] - '0';
        const int axis = g.builder[2] - 'x';
        if (axis >= 0 && axis <= 2) return cyclic_about_axis(axis, order);
    }
    throw config_error("unknown finite-group builder: " + g.builder);
}

// ---------------------------------------------------------------------------
// Checkpoints: flat binary parameters + JSON sidecar
// ---------------------------------------------------------------------------

inline std::string sidecar_path(const std::string& bin_path) {
    const auto dot = bin_path.rfind('.');
    return (dot == std::string::npos ? bin_path : bin_path.substr(0, dot)) + ".json";
}

inline void save_checkpoint(const std::string& bin_path, const Model& model, std::uint64_t seed) {
    std::ofstream bin(bin_path, std::ios::binary);
    if (!bin) throw config_error("cannot write " + bin_path);
    const VecX& values = model.params().values;
    bin.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(double)));

    json side;
    side["kind"] = to_string(model.kind());
    side["atom_count"] = model.config().atom_count;
    side["dimension"] = model.dimension();
    side["hidden"] = model.config().hidden;
    side["seed"] = seed;
    side["format"] = "float64";
    side["segments"] = json::array();
    for (const Segment& s : model.params().layout)
        side["segments"].push_back({{"name", s.name}, {"offset", s.offset}, {"length", s.length}});
    std::ofstream meta(sidecar_path(bin_path));
    if (!meta) throw config_error("cannot write " + sidecar_path(bin_path));
    meta << side.dump(2) << "\n";
}

inline Model load_checkpoint(const std::string& bin_path) {
    std::ifstream meta(sidecar_path(bin_path));
    if (!meta) throw config_error("cannot open checkpoint sidecar: " + sidecar_path(bin_path));
    json side;
    try {
        meta >> side;
    } catch (const json::exception& e) {
        throw config_error("invalid checkpoint sidecar: " + std::string(e.what()));
    }
    ModelConfig config;
    config.kind = model_kind_from_string(side.at("kind").get<std::string>());
    config.atom_count = side.at("atom_count").get<int>();
    config.hidden = side.at("hidden").get<std::vector<int>>();

    ParameterVector params;
    params.layout = Model::layout_for(config);
    params.values.assign(Model::expected_size(config), 0.0);
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw config_error("cannot open checkpoint: " + bin_path);
    bin.read(reinterpret_cast<char*>(params.values.data()),
             static_cast<std::streamsize>(params.values.size() * sizeof(double)));
    if (static_cast<std::size_t>(bin.gcount()) != params.values.size() * sizeof(double))
        throw config_error("checkpoint size does not match the declared layout");
    return Model(config, std::move(params));
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

inline void write_manifest(const std::string& path, const ExperimentConfig& config,
                           std::uint64_t data_hash, const json& extra = json::object()) {
    json j;
    j["tool"] = "equidiag";
    j["version"] = "0.1.0";
#ifdef EQUIDIAG_SOURCE_HASH
    j["source_hash"] = EQUIDIAG_SOURCE_HASH;
#else
    j["source_hash"] = "unknown";
#endif
    j["config"] = config_to_json(config);
    j["dataset_hash"] = hex64(data_hash);
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    std::ofstream out(path);
    if (!out) throw config_error("cannot write " + path);
    out << j.dump(2) << "\n";
}

}  // namespace equidiag
