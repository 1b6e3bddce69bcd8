#include "dgc/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "dgc/io.hpp"
#include "dgc/rng.hpp"

namespace dgc {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void config_fail(int line, const std::string& msg) {
    fail(ErrorKind::Config, line > 0 ? "line " + std::to_string(line) + ": " + msg : "--set: " + msg);
}

double parse_double(const std::string& v) {
    double x = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(x)) throw std::invalid_argument("number");
    return x;
}

long long parse_int(const std::string& v) {
    long long x = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument("integer");
    return x;
}

bool parse_bool(const std::string& v) {
    if (v == "true" || v == "yes" || v == "1") return true;
    if (v == "false" || v == "no" || v == "0") return false;
    throw std::invalid_argument("boolean");
}

std::vector<double> parse_list(const std::string& v) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_double(trim(item)));
    if (out.empty()) throw std::invalid_argument("list");
    return out;
}

Interval parse_interval(const std::string& v) {
    auto l = parse_list(v);
    if (l.size() != 2) throw std::invalid_argument("interval lo, hi");
    return {l[0], l[1]};
}

int positive_int(const std::string& v) {
    long long x = parse_int(v);
    if (x <= 0 || x > std::numeric_limits<int>::max()) throw std::invalid_argument("positive integer");
    return static_cast<int>(x);
}

struct KeyDef {
    const char* name;  // "section.key"
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

std::string fmt_list(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + format_double(v[i]);
    return out;
}

std::string fmt_interval(const Interval& iv) { return format_double(iv.lo) + ", " + format_double(iv.hi); }

const std::vector<KeyDef>& key_table() {
    using C = ExperimentConfig;
    using S = const std::string&;
    auto d = [](double C::*m) -> KeyDef {
        return {nullptr, [m](C& c, S v) { c.*m = parse_double(v); }, [m](const C& c) { return format_double(c.*m); }};
    };
    auto cd = [](double CoefficientSpec::*m) -> KeyDef {
        return {nullptr, [m](C& c, S v) { c.coeffs.*m = parse_double(v); },
                [m](const C& c) { return format_double(c.coeffs.*m); }};
    };
    auto pi = [](int C::*m) -> KeyDef {
        return {nullptr, [m](C& c, S v) { c.*m = positive_int(v); }, [m](const C& c) { return std::to_string(c.*m); }};
    };
    auto iv = [](Interval C::*m) -> KeyDef {
        return {nullptr, [m](C& c, S v) { c.*m = parse_interval(v); }, [m](const C& c) { return fmt_interval(c.*m); }};
    };
    auto named = [](const char* n, KeyDef k) {
        k.name = n;
        return k;
    };
    static const std::vector<KeyDef> table = {
        {"seed",
         [](C& c, S v) {
             if (v.empty() || v[0] == '-') throw std::invalid_argument("unsigned integer");
             std::uint64_t x = 0;
             auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
             if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument("unsigned integer");
             c.seed = x;
         },
         [](const C& c) { return std::to_string(c.seed); }},
        named("domain.T", d(&C::T)),
        named("domain.alpha", d(&C::alpha)),
        named("domain.N", pi(&C::N)),
        named("domain.M", pi(&C::M)),
        named("domain.omega", iv(&C::omega)),
        named("domain.omega_prime", iv(&C::omegaPrime)),
        named("domain.omega1", iv(&C::omega1)),
        named("coefficients.b_mean", cd(&CoefficientSpec::bMean)),
        named("coefficients.b_amp", cd(&CoefficientSpec::bAmp)),
        named("coefficients.d1", cd(&CoefficientSpec::d1)),
        named("coefficients.d2", cd(&CoefficientSpec::d2)),
        named("coefficients.b11", cd(&CoefficientSpec::b11)),
        named("coefficients.b12", cd(&CoefficientSpec::b12)),
        named("coefficients.b21", cd(&CoefficientSpec::b21)),
        // b21 is constant, so its infimum over omega1 is the value itself.
        {"coefficients.b21_min", [](C& c, S v) { c.coeffs.b21 = parse_double(v); }, nullptr},
        named("coefficients.b22", cd(&CoefficientSpec::b22)),
        {"weights.lambda",
         [](C& c, S v) {
             if (v == "auto") {
                 c.lambdaAuto = true;
             } else {
                 c.lambdaAuto = false;
                 c.lambda = parse_double(v);
             }
         },
         [](const C& c) { return c.lambdaAuto ? std::string("auto") : format_double(c.lambda); }},
        named("weights.lambda_shift", d(&C::lambdaShift)),
        named("weights.s", d(&C::s)),
        named("weights.weight_log_floor", d(&C::weightLogFloor)),
        named("weights.quad_refine", pi(&C::quadRefine)),
        named("weights.quad_cutoff", d(&C::quadCutoff)),
        {"solver.theta", [](C& c, S v) { c.solver.theta = parse_double(v); },
         [](const C& c) { return format_double(c.solver.theta); }},
        {"solver.upwind", [](C& c, S v) { c.solver.upwind = parse_bool(v); },
         [](const C& c) { return std::string(c.solver.upwind ? "true" : "false"); }},
        {"solver.picard_sweeps", [](C& c, S v) { c.solver.picardSweeps = positive_int(v); },
         [](const C& c) { return std::to_string(c.solver.picardSweeps); }},
        {"control.u0_mode", [](C& c, S v) { c.u0Mode = static_cast<int>(parse_int(v)); },
         [](const C& c) { return std::to_string(c.u0Mode); }},
        {"control.v0_mode", [](C& c, S v) { c.v0Mode = static_cast<int>(parse_int(v)); },
         [](const C& c) { return std::to_string(c.v0Mode); }},
        named("control.cg_tol", d(&C::cgTol)),
        named("control.cg_max_iter", pi(&C::cgMaxIter)),
        named("control.stagnation_window", pi(&C::stagnationWindow)),
        {"control.preconditioner",
         [](C& c, S v) {
             if (v == "block-cholesky") c.precond = Preconditioner::BlockCholesky;
             else if (v == "jacobi") c.precond = Preconditioner::Jacobi;
             else throw std::invalid_argument("block-cholesky or jacobi");
         },
         [](const C& c) {
             return std::string(c.precond == Preconditioner::Jacobi ? "jacobi" : "block-cholesky");
         }},
        {"control.constrain_psi0", [](C& c, S v) { c.constrainPsi0 = parse_bool(v); },
         [](const C& c) { return std::string(c.constrainPsi0 ? "true" : "false"); }},
        named("control.hum_epsilon", d(&C::humEpsilon)),
        named("control.transposition_samples", pi(&C::transpositionSamples)),
        named("experiment.samples", pi(&C::samples)),
        {"experiment.sweep_s", [](C& c, S v) { c.sweepS = parse_list(v); },
         [](const C& c) { return fmt_list(c.sweepS); }},
        {"experiment.sweep_lambda_shift", [](C& c, S v) { c.sweepLambdaShift = parse_list(v); },
         [](const C& c) { return fmt_list(c.sweepLambdaShift); }},
        {"experiment.sweep_operation", [](C& c, S v) { c.sweepOperation = v; },
         [](const C& c) { return c.sweepOperation; }},
        named("experiment.jobs", pi(&C::jobs)),
    };
    return table;
}

void assign(ExperimentConfig& cfg, const std::string& key, const std::string& value, int line) {
    const auto& table = key_table();
    auto it = std::find_if(table.begin(), table.end(), [&](const KeyDef& k) { return key == k.name; });
    if (it == table.end()) config_fail(line, "unknown key '" + key + "'");
    try {
        it->set(cfg, value);
    } catch (const std::invalid_argument& e) {
        config_fail(line, "bad value '" + value + "' for " + key + " (expected " + e.what() + ")");
    }
    cfg.lines[key] = line;
}

int line_of(const ExperimentConfig& cfg, std::initializer_list<const char*> keys) {
    for (const char* k : keys) {
        auto it = cfg.lines.find(k);
        if (it != cfg.lines.end()) return it->second;
    }
    return -1;
}

// Prefixes a hypothesis failure with the line of the key that caused it.
template <class F>
void gate(const ExperimentConfig& cfg, std::initializer_list<const char*> keys, F&& f) {
    try {
        f();
    } catch (const Error& e) {
        int line = line_of(cfg, keys);
        std::string where = line > 0 ? "line " + std::to_string(line) + ": " : (line == 0 ? "--set: " : "");
        fail(ErrorKind::Config, where + e.what());
    }
}

std::string utc_stamp() {
    std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
    return buf;
}

std::string iso_now() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[40];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

nlohmann::json num(double v) {
    if (std::isfinite(v)) return v;
    if (std::isnan(v)) return "nan";
    return v > 0 ? "inf" : "-inf";
}

}  // namespace

// ---------------------------------------------------------------------------

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::stringstream in(text);
    std::string raw, section;
    static const std::vector<std::string> sections = {"domain", "coefficients", "weights", "solver", "control",
                                                      "experiment"};
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        std::string s = raw;
        auto c = s.find_first_of("#;");
        if (c != std::string::npos) s = s.substr(0, c);
        s = trim(s);
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']') config_fail(line, "malformed section header '" + s + "'");
            section = trim(s.substr(1, s.size() - 2));
            if (std::find(sections.begin(), sections.end(), section) == sections.end())
                config_fail(line, "unknown section [" + section + "]");
            continue;
        }
        auto eq = s.find('=');
        if (eq == std::string::npos) config_fail(line, "expected 'key = value', got '" + s + "'");
        std::string key = trim(s.substr(0, eq)), value = trim(s.substr(eq + 1));
        if (key.empty() || value.empty()) config_fail(line, "expected 'key = value', got '" + s + "'");
        std::string full = section.empty() ? key : section + "." + key;
        if (cfg.lines.count(full)) config_fail(line, "duplicate key '" + full + "'");
        assign(cfg, full, value, line);
    }
    validate_config(cfg);
    return cfg;
}

ExperimentConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::Config, "cannot read config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos) config_fail(0, "expected key=value, got '" + assignment + "'");
    assign(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)), 0);
}

void validate_config(const ExperimentConfig& cfg) {
    gate(cfg, {"domain.alpha"}, [&] { make_power_spec(cfg.alpha); });
    gate(cfg, {"domain.T"}, [&] { require(cfg.T > 0.0, ErrorKind::Config, "T must be positive"); });
    gate(cfg, {"domain.N"}, [&] { make_space_grid(cfg.N); });
    gate(cfg, {"domain.M"}, [&] { require(cfg.M >= 2, ErrorKind::Config, "M must be at least 2"); });
    gate(cfg, {"domain.omega", "domain.omega_prime", "domain.omega1"}, [&] {
        snap_subdomains(SubdomainSpec{cfg.omega, cfg.omegaPrime, cfg.omega1}, make_space_grid(cfg.N));
    });
    gate(cfg, {"coefficients.b_mean", "coefficients.b_amp"}, [&] {
        require(cfg.coeffs.bMean - std::abs(cfg.coeffs.bAmp) > 0.0, ErrorKind::Config,
                "b(t) must be bounded below by b0 > 0");
    });
    gate(cfg, {"coefficients.b21_min", "coefficients.b21"}, [&] {
        require(cfg.coeffs.b21 > 0.0, ErrorKind::Config, "b21 must satisfy inf over omega1 x (0,T) > 0");
    });
    gate(cfg, {"solver.theta"}, [&] {
        require(cfg.solver.theta >= 0.5 && cfg.solver.theta <= 1.0, ErrorKind::Config, "theta must lie in [0.5, 1]");
    });
    gate(cfg, {"control.constrain_psi0", "solver.theta"}, [&] {
        require(!cfg.constrainPsi0 || cfg.solver.theta == 1.0, ErrorKind::Config,
                "the psi(0) = 0 constraint is implemented for theta = 1 only");
    });
    gate(cfg, {"weights.s"}, [&] { require(cfg.s > 0.0, ErrorKind::Config, "s must be positive"); });
    gate(cfg, {"weights.weight_log_floor"},
         [&] { require(cfg.weightLogFloor > 0.0, ErrorKind::Config, "weight log floor must be positive"); });
    gate(cfg, {"control.cg_tol"}, [&] { require(cfg.cgTol > 0.0, ErrorKind::Config, "cg_tol must be positive"); });
    gate(cfg, {"control.hum_epsilon"},
         [&] { require(cfg.humEpsilon > 0.0, ErrorKind::Config, "HUM penalization epsilon must be positive"); });
    gate(cfg, {"control.u0_mode", "control.v0_mode"}, [&] {
        require(cfg.u0Mode >= 0 && cfg.v0Mode >= 0, ErrorKind::Config, "sine modes must be nonnegative");
    });
    gate(cfg, {"experiment.sweep_operation"}, [&] {
        const auto& cmds = subcommands();
        require(cfg.sweepOperation != "sweep" &&
                    std::find(cmds.begin(), cmds.end(), cfg.sweepOperation) != cmds.end(),
                ErrorKind::Config, "unknown sweep operation '" + cfg.sweepOperation + "'");
    });
    // Everything above passed, so the full problem can be assembled; its own checks run here.
    gate(cfg, {"coefficients.b_mean", "coefficients.b_amp", "coefficients.b21_min", "coefficients.b21"},
         [&] { build_problem(cfg); });
    if (!cfg.lambdaAuto) {
        gate(cfg, {"weights.lambda"}, [&] {
            Problem p = build_problem(cfg);
            double ls = min_lambda_for_ordering(build_psi(p.deg, p.sub, p.space));
            require(cfg.lambda >= ls, ErrorKind::Config,
                    "lambda must be at least lambda* = " + format_double(ls) + " for 3A* < 2Ahat");
        });
    }
}

std::string canonical_config(const ExperimentConfig& cfg) {
    std::string out;
    for (const auto& k : key_table())
        if (k.get) out += std::string(k.name) + " = " + k.get(cfg) + "\n";
    return out;
}

std::string config_hash(const ExperimentConfig& cfg) { return hex64(fnv1a(canonical_config(cfg))); }

Problem build_problem(const ExperimentConfig& cfg) {
    auto space = make_space_grid(cfg.N);
    auto time = make_time_grid(cfg.T, cfg.M);
    auto sub = snap_subdomains(SubdomainSpec{cfg.omega, cfg.omegaPrime, cfg.omega1}, space);
    auto deg = make_power_spec(cfg.alpha);
    return make_problem(deg, space, time, sub, make_coefficients(cfg.coeffs, space, time, sub), cfg.solver);
}

double resolve_lambda(const ExperimentConfig& cfg, const Problem& p) {
    if (!cfg.lambdaAuto) return cfg.lambda;
    return min_lambda_for_ordering(build_psi(p.deg, p.sub, p.space)) + cfg.lambdaShift;
}

WeightFields build_fields(const ExperimentConfig& cfg, const Problem& p) {
    auto psi = build_psi(p.deg, p.sub, p.space);
    return assemble_fields(psi, {resolve_lambda(cfg, p), cfg.s}, p.space, p.time);
}

ControlData build_control_data(const ExperimentConfig& cfg) {
    ControlData d;
    auto mode = [&](int k) {
        std::vector<double> u(cfg.N + 1, 0.0);
        if (k > 0)
            for (int j = 1; j < cfg.N; ++j) u[j] = std::sin(k * std::numbers::pi * j / cfg.N);
        return u;
    };
    d.u0 = mode(cfg.u0Mode);
    d.v0 = mode(cfg.v0Mode);
    return d;
}

Field random_source(const Problem& p, std::uint64_t seed, std::uint64_t streamId) {
    SplitMix64 rng(seed, streamId);
    Field f(p.time.levels(), p.space.nodes());
    for (int k = 1; k <= p.time.M; ++k)
        for (int j = 1; j < p.space.N; ++j) f(k, j) = rng.uniform(-1.0, 1.0);
    return f;
}

// ---------------------------------------------------------------------------

nlohmann::json to_json(const RunRecord& r) {
    nlohmann::json j;
    j["metadata"] = {{"startedAt", r.startedAt}, {"finishedAt", r.finishedAt}};
    j["record"] = {{"command", r.command},   {"configHash", r.configHash}, {"buildId", r.buildId},
                   {"config", r.config},     {"outputs", r.outputs},       {"artifacts", r.artifacts}};
    return j;
}

RunRecord record_from_json(const nlohmann::json& j) {
    RunRecord r;
    try {
        const auto& rec = j.at("record");
        r.command = rec.at("command").get<std::string>();
        r.configHash = rec.at("configHash").get<std::string>();
        r.buildId = rec.at("buildId").get<std::string>();
        r.config = rec.at("config").get<std::string>();
        r.outputs = rec.at("outputs");
        r.artifacts = rec.at("artifacts").get<std::vector<std::string>>();
        r.startedAt = j.at("metadata").at("startedAt").get<std::string>();
        r.finishedAt = j.at("metadata").at("finishedAt").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Io, std::string("malformed run record: ") + e.what());
    }
    return r;
}

std::string build_id() {
    static const std::string id = "dgc-1.0.0-" + hex64(fnv1a(std::string(__VERSION__) + "|" + __DATE__)).substr(0, 8);
    return id;
}

// ---------------------------------------------------------------------------

namespace {

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string f2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string tick(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

}  // namespace

std::string svg_plot(const std::vector<Series>& series, const PlotSpec& spec) {
    const double W = 640, H = 400, L = 70, R = 20, Tm = 40, B = 50;
    auto ty = [&](double y) { return spec.logY ? (y > 0.0 ? std::log10(y) : std::nan("")) : y; };
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series)
        for (auto [x, y] : s.points) {
            double yy = ty(y);
            if (!std::isfinite(x) || !std::isfinite(yy)) continue;
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, yy);
            ymax = std::max(ymax, yy);
        }
    if (xmin > xmax) xmin = 0.0, xmax = 1.0;
    if (ymin > ymax) ymin = 0.0, ymax = 1.0;
    if (xmax == xmin) xmin -= 0.5, xmax += 0.5;
    if (ymax == ymin) ymin -= 0.5, ymax += 0.5;
    auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
    auto py = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - Tm - B); };

    std::string o = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" viewBox=\"0 0 640 400\">\n";
    o += "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
    o += "<text x=\"320\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" +
         xml_escape(spec.title) + "</text>\n";
    o += "<line x1=\"" + f2(L) + "\" y1=\"" + f2(H - B) + "\" x2=\"" + f2(W - R) + "\" y2=\"" + f2(H - B) +
         "\" stroke=\"black\"/>\n";
    o += "<line x1=\"" + f2(L) + "\" y1=\"" + f2(Tm) + "\" x2=\"" + f2(L) + "\" y2=\"" + f2(H - B) +
         "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        double xv = xmin + (xmax - xmin) * i / 4.0, yv = ymin + (ymax - ymin) * i / 4.0;
        o += "<text x=\"" + f2(px(xv)) + "\" y=\"" + f2(H - B + 16) +
             "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" + tick(xv) + "</text>\n";
        std::string lab = spec.logY ? "1e" + tick(yv) : tick(yv);
        o += "<text x=\"" + f2(L - 6) + "\" y=\"" + f2(py(yv) + 3) +
             "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" + lab + "</text>\n";
    }
    o += "<text x=\"" + f2((L + W - R) / 2) + "\" y=\"" + f2(H - 12) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" + xml_escape(spec.xLabel) +
         "</text>\n";
    o += "<text x=\"16\" y=\"" + f2((Tm + H - B) / 2) + "\" transform=\"rotate(-90 16 " + f2((Tm + H - B) / 2) +
         ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" + xml_escape(spec.yLabel) +
         "</text>\n";
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
    for (std::size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const char* col = colors[si % 6];
        std::vector<std::pair<double, double>> pts;
        for (auto [x, y] : s.points) {
            double yy = ty(y);
            if (std::isfinite(x) && std::isfinite(yy)) pts.emplace_back(px(x), py(yy));
        }
        if (pts.size() == 1) {
            o += "<circle cx=\"" + f2(pts[0].first) + "\" cy=\"" + f2(pts[0].second) + "\" r=\"3\" fill=\"" + col +
                 "\"/>\n";
        } else if (pts.size() > 1) {
            o += "<polyline fill=\"none\" stroke=\"" + std::string(col) + "\" stroke-width=\"1.5\" points=\"";
            for (std::size_t i = 0; i < pts.size(); ++i)
                o += (i ? " " : "") + f2(pts[i].first) + "," + f2(pts[i].second);
            o += "\"/>\n";
        }
        o += "<text x=\"" + f2(W - R - 4) + "\" y=\"" + f2(Tm + 14 * (si + 1)) + "\" text-anchor=\"end\" fill=\"" +
             col + "\" font-family=\"sans-serif\" font-size=\"11\">" + xml_escape(s.name) + "</text>\n";
    }
    o += "</svg>\n";
    return o;
}

void emit_svg_plot(const std::vector<Series>& series, const PlotSpec& spec, const std::string& path) {
    write_text_file(path, svg_plot(series, spec));
}

// ---------------------------------------------------------------------------

const std::vector<std::string>& subcommands() {
    static const std::vector<std::string> cmds = {"solve-forward", "solve-adjoint", "weights",       "carleman-single",
                                                  "carleman-system", "gamma0",      "lemma-audit",   "observability",
                                                  "control-lm",    "control-hum",   "sweep"};
    return cmds;
}

namespace {

struct RunContext {
    const ExperimentConfig& cfg;
    fs::path dir;
    RunRecord& rec;
    std::vector<std::string> violations;

    std::string path(const std::string& name) {
        rec.artifacts.push_back(name);
        return (dir / name).string();
    }
};

std::vector<std::pair<double, double>> norm_series(const Problem& p, const Field& f) {
    std::vector<std::pair<double, double>> out;
    for (int k = 0; k <= p.time.M; ++k) out.emplace_back(p.time.t(k), std::sqrt(l2_norm_sq(f.row(k), p.space)));
    return out;
}

void write_norms(RunContext& c, const Problem& p, const Field& a, const Field& b, const std::string& na,
                 const std::string& nb, const std::string& title) {
    auto sa = norm_series(p, a), sb = norm_series(p, b);
    std::string csv = "t,norm_" + na + ",norm_" + nb + "\n";
    for (std::size_t k = 0; k < sa.size(); ++k)
        csv += join_csv({format_double(sa[k].first), format_double(sa[k].second), format_double(sb[k].second)});
    write_text_file(c.path("norms.csv"), csv);
    emit_svg_plot({{"||" + na + "||", sa}, {"||" + nb + "||", sb}}, {title, "t", "L2 norm", true}, c.path("norms.svg"));
}

void run_forward(RunContext& c) {
    Problem p = build_problem(c.cfg);
    ControlData cd = build_control_data(c.cfg);
    ForwardData fd;
    fd.u0 = cd.u0;
    fd.v0 = cd.v0;
    StatePair y = solve_forward(p, fd);
    EnergyReport e = check_energy_estimates(p, y, fd);
    write_trajectory_binary(y.u, y.v, c.path("trajectory.bin"));
    write_norms(c, p, y.u, y.v, "u", "v", "uncontrolled state norms");
    auto& o = c.rec.outputs;
    o["finalNormU"] = num(std::sqrt(l2_norm_sq(y.u.row(p.time.M), p.space)));
    o["finalNormV"] = num(std::sqrt(l2_norm_sq(y.v.row(p.time.M), p.space)));
    o["energyEstimates"] = {{"pass", e.pass()}, {"fittedConstant", num(e.fittedConstant)},
                            {"aprioriRate", num(e.aprioriRate)}};
    if (!e.pass()) c.violations.push_back("energy estimate exceeded");
}

void run_adjoint(RunContext& c) {
    Problem p = build_problem(c.cfg);
    const int N = p.space.N;
    std::vector<double> phiT = terminal_sample(c.cfg.seed, 0, N), psiT(N + 1, 0.0);
    AdjointPair z = solve_adjoint(p, phiT, psiT, Field(), Field());
    write_trajectory_binary(z.phi, z.psi, c.path("adjoint.bin"));
    write_norms(c, p, z.phi, z.psi, "phi", "psi", "adjoint norms");
    // Duality on one random instance.
    ControlData cd = build_control_data(c.cfg);
    ForwardData fd;
    fd.u0 = cd.u0;
    fd.v0 = cd.v0;
    fd.h = random_source(p, c.cfg.seed, 1);
    for (int k = 0; k <= p.time.M; ++k)
        for (int j = 0; j <= N; ++j)
            if (p.chi[j] == 0.0) fd.h(k, j) = 0.0;
    fd.H1 = random_source(p, c.cfg.seed, 2);
    fd.H2 = random_source(p, c.cfg.seed, 3);
    Field F1 = random_source(p, c.cfg.seed, 4), F2 = random_source(p, c.cfg.seed, 5);
    StatePair y = solve_forward(p, fd);
    AdjointPair zz = solve_adjoint(p, phiT, psiT, F1, F2);
    DualityTerms dt = duality_terms(p, fd, y, zz, phiT, psiT, F1, F2);
    auto& o = c.rec.outputs;
    o["initNormPhi"] = num(std::sqrt(l2_norm_sq(z.phi.row(0), p.space)));
    o["initNormPsi"] = num(std::sqrt(l2_norm_sq(z.psi.row(0), p.space)));
    o["dualityRelative"] = num(dt.relative());
    if (!(dt.relative() <= 1e-10)) c.violations.push_back("duality identity above 1e-10");
}

void run_weights(RunContext& c) {
    Problem p = build_problem(c.cfg);
    WeightFields f = build_fields(c.cfg, p);
    dump_weights(f, c.path("weights.csv"));
    WeightInvariantReport r = check_weight_invariants(f);
    std::vector<std::pair<double, double>> r0, r1, r2;
    for (std::size_t i = 0; i < f.t.size(); ++i) {
        r0.emplace_back(f.t[i], f.logRho0[i]);
        r1.emplace_back(f.t[i], f.logRho1[i]);
        r2.emplace_back(f.t[i], f.logRho2[i]);
    }
    emit_svg_plot({{"log rho0", r0}, {"log rho1", r1}, {"log rho2", r2}}, {"weight exponents", "t", "log rho", false},
                  c.path("weights.svg"));
    auto& o = c.rec.outputs;
    o["lambda"] = num(f.model.lambda());
    o["s"] = num(f.model.s());
    o["invariants"] = {{"ok", r.ok()},
                       {"maxRhoHatErr", num(r.maxRhoHatErr)},
                       {"maxZeta0Spread", num(r.maxZeta0Spread)},
                       {"orderingHolds", r.orderingHolds},
                       {"phiNegative", r.phiNegative},
                       {"etaAtLeastOne", r.etaAtLeastOne},
                       {"sigmaLowerBound", r.sigmaLowerBound}};
    if (!r.ok()) c.violations.push_back("weight invariants");
}

void run_carleman(RunContext& c, const std::string& kind) {
    Problem p = build_problem(c.cfg);
    WeightFields f = build_fields(c.cfg, p);
    Quadrature q(f, p, {c.cfg.quadRefine, c.cfg.quadCutoff});
    std::vector<CarlemanReport> reps;
    for (int id = 0; id < c.cfg.samples; ++id) {
        auto wT = terminal_sample(c.cfg.seed, id, p.space.N);
        Field h = random_source(p, c.cfg.seed, 100 + id), F2 = random_source(p, c.cfg.seed, 200 + id);
        if (kind == "carleman-single") reps.push_back(carleman_ratio_single(p, q, wT, h, id));
        else if (kind == "carleman-system") reps.push_back(carleman_ratio_system(p, q, wT, h, F2, id));
        else reps.push_back(gamma0_ratio(p, q, wT, h, F2, id));
    }
    write_carleman_csv(reps, c.path("carleman.csv"));
    Series s{"ratio", {}};
    double mx = 0.0;
    int viol = 0;
    for (const auto& r : reps) {
        s.points.emplace_back(r.sampleId, r.ratio);
        mx = std::max(mx, r.ratio);
        viol += r.violation;
    }
    emit_svg_plot({s}, {kind + " ratio per sample", "sample", "lhs / rhs", true}, c.path("ratios.svg"));
    auto& o = c.rec.outputs;
    o["lambda"] = num(q.lambda());
    o["s"] = num(q.s());
    o["samples"] = c.cfg.samples;
    o["maxRatio"] = num(mx);
    o["violations"] = viol;
    if (viol) c.violations.push_back(std::to_string(viol) + " samples with zero right-hand side");
}

void run_lemma_audit(RunContext& c) {
    Problem p = build_problem(c.cfg);
    WeightFields f = build_fields(c.cfg, p);
    Quadrature q(f, p, {c.cfg.quadRefine, c.cfg.quadCutoff});
    std::string csv = "sample,lemma,fitted,signHolds\n";
    nlohmann::json residuals = nlohmann::json::array();
    std::map<std::string, double> maxFit;
    bool signs = true;
    for (int id = 0; id < c.cfg.samples; ++id) {
        SmoothSample v = id == 0 ? product_sine_sample(p.time.T) : random_smooth_sample(c.cfg.seed, id, p.time.T);
        double res = lemma_a1_residual(v, q);
        residuals.push_back(num(res));
        csv += join_csv({std::to_string(id), "A1", format_double(res), "1"});
        for (int L = 0; L <= static_cast<int>(LemmaId::A10); ++L) {
            TermCheck t = term_inequality_check(static_cast<LemmaId>(L), v, q);
            std::string name = lemma_name(t.id);
            csv += join_csv({std::to_string(id), name, format_double(t.fitted), t.signHolds ? "1" : "0"});
            maxFit[name] = std::max(maxFit[name], t.fitted);
            signs = signs && t.signHolds;
        }
    }
    write_text_file(c.path("lemma_audit.csv"), csv);
    auto& o = c.rec.outputs;
    o["a1Residuals"] = residuals;
    nlohmann::json fits;
    for (const auto& [k, v] : maxFit) fits[k] = num(v);
    o["maxFittedConstants"] = fits;
    o["signsHold"] = signs;
    if (!signs) c.violations.push_back("sign-definite lemma term changed sign");
}

void run_observability(RunContext& c) {
    Problem p = build_problem(c.cfg);
    WeightFields f = build_fields(c.cfg, p);
    Quadrature q(f, p, {c.cfg.quadRefine, c.cfg.quadCutoff});
    std::string csv = "sampleId,logInitial,logObservation,logRatio,logSimpleRatio\n";
    double mx = -std::numeric_limits<double>::infinity(), mxs = mx;
    int viol = 0;
    Series s{"log ratio", {}};
    for (int id = 0; id < c.cfg.samples; ++id) {
        auto r = observability_ratio(p, q, terminal_sample(c.cfg.seed, id, p.space.N), id);
        csv += join_csv({std::to_string(id), format_double(r.logInitial), format_double(r.logObservation),
                         format_double(r.logRatio), format_double(r.logSimpleRatio)});
        mx = std::max(mx, r.logRatio);
        mxs = std::max(mxs, r.logSimpleRatio);
        viol += r.violation;
        s.points.emplace_back(id, r.logRatio);
    }
    write_text_file(c.path("observability.csv"), csv);
    emit_svg_plot({s}, {"observability quotient", "sample", "log ratio", false}, c.path("observability.svg"));
    auto& o = c.rec.outputs;
    o["maxLogRatio"] = num(mx);
    o["maxLogSimpleRatio"] = num(mxs);
    o["violations"] = viol;
    if (viol) c.violations.push_back(std::to_string(viol) + " samples with zero observation");
}

void control_outputs(RunContext& c, const Problem& p, const ControlData& d, const ControlResult& r) {
    write_control_csv(p, r, c.path("control.csv"));
    write_trajectory_binary(r.u, r.v, c.path("trajectory.bin"));
    write_norms(c, p, r.u, r.v, "u", "v", r.method + " controlled norms");
    auto& o = c.rec.outputs;
    o["result"] = nlohmann::json::parse(control_summary_json(r));
    o["transpositionResidual"] = num(verify_transposition(p, r, d, c.cfg.transpositionSamples, c.cfg.seed));
    if (r.estimateViolation) c.violations.push_back("weighted estimate: kappa0 = 0 with nonzero norms");
}

void run_control(RunContext& c, bool hum) {
    Problem p = build_problem(c.cfg);
    WeightFields f = build_fields(c.cfg, p);
    ControlData d = build_control_data(c.cfg);
    if (hum) {
        HUMConfig h;
        h.epsilon = c.cfg.humEpsilon;
        h.cgTol = c.cfg.cgTol;
        h.cgMaxIter = c.cfg.cgMaxIter;
        control_outputs(c, p, d, solve_control_hum_penalized(p, f, d, h, c.cfg.weightLogFloor));
    } else {
        ControlParams cp;
        cp.cgTol = c.cfg.cgTol;
        cp.cgMaxIter = c.cfg.cgMaxIter;
        cp.stagnationWindow = c.cfg.stagnationWindow;
        cp.precond = c.cfg.precond;
        cp.weightLogFloor = c.cfg.weightLogFloor;
        cp.constrainPsi0 = c.cfg.constrainPsi0;
        LaxMilgramSystem sys(p, f, d, cp);
        c.rec.outputs["weightLogNorm"] = num(sys.weights().logNorm);
        c.rec.outputs["flooredLevels"] = sys.weights().flooredLevels;
        control_outputs(c, p, d, solve_control_lax_milgram(sys));
    }
}

void write_summary(const fs::path& dir, const RunRecord& rec) {
    write_text_file((dir / "summary.json").string(), to_json(rec).dump(2) + "\n");
}

void run_sweep(RunContext& c) {
    struct Member {
        ExperimentConfig cfg;
        std::string dir;
        RunRecord rec;
        std::string error;
        ErrorKind kind = ErrorKind::Numerical;
        bool failed = false;
    };
    std::vector<Member> members;
    for (double s : c.cfg.sweepS)
        for (double shift : c.cfg.sweepLambdaShift) {
            Member m{c.cfg, {}, {}, {}, ErrorKind::Numerical, false};
            m.cfg.s = s;
            m.cfg.lambdaAuto = true;
            m.cfg.lambdaShift = shift;
            m.cfg.jobs = 1;
            m.dir = "member_" + std::to_string(members.size());
            members.push_back(std::move(m));
        }
    // Members run concurrently into their own directories; the index below is merged in member order.
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < members.size(); i = next++) {
            Member& m = members[i];
            try {
                m.rec = run_in_dir(c.cfg.sweepOperation, m.cfg, (c.dir / m.dir).string());
            } catch (const Error& e) {
                m.failed = true;
                m.kind = e.kind();
                m.error = e.what();
            } catch (const std::exception& e) {
                m.failed = true;
                m.error = e.what();
            }
        }
    };
    int jobs = std::max(1, std::min<int>(c.cfg.jobs, static_cast<int>(members.size())));
    std::vector<std::thread> pool;
    for (int t = 1; t < jobs; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    nlohmann::json list = nlohmann::json::array();
    for (const auto& m : members) {
        nlohmann::json e = {{"s", num(m.cfg.s)},
                            {"lambdaShift", num(m.cfg.lambdaShift)},
                            {"configHash", config_hash(m.cfg)},
                            {"dir", m.dir}};
        if (m.failed) {
            e["error"] = m.error;
        } else {
            e["outputs"] = m.rec.outputs;
        }
        list.push_back(e);
        c.rec.artifacts.push_back(m.dir + "/summary.json");
    }
    c.rec.outputs["operation"] = c.cfg.sweepOperation;
    c.rec.outputs["members"] = list;
    for (const auto& m : members)
        if (m.failed) {
            c.rec.finishedAt = iso_now();
            write_summary(c.dir, c.rec);
            fail(m.kind, m.dir + ": " + m.error);
        }
}

}  // namespace

RunRecord run_in_dir(const std::string& command, const ExperimentConfig& cfg, const std::string& dir) {
    const auto& cmds = subcommands();
    require(std::find(cmds.begin(), cmds.end(), command) != cmds.end(), ErrorKind::Config,
            "unknown subcommand '" + command + "'");
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec, ErrorKind::Io, "cannot create " + dir + ": " + ec.message());
    RunRecord rec;
    rec.command = command;
    rec.configHash = config_hash(cfg);
    rec.buildId = build_id();
    rec.config = canonical_config(cfg);
    rec.outputs = nlohmann::json::object();
    rec.startedAt = iso_now();
    RunContext c{cfg, fs::path(dir), rec, {}};
    if (command == "solve-forward") run_forward(c);
    else if (command == "solve-adjoint") run_adjoint(c);
    else if (command == "weights") run_weights(c);
    else if (command == "lemma-audit") run_lemma_audit(c);
    else if (command == "observability") run_observability(c);
    else if (command == "control-lm") run_control(c, false);
    else if (command == "control-hum") run_control(c, true);
    else if (command == "sweep") run_sweep(c);
    else run_carleman(c, command);
    rec.outputs["violations"] = c.violations;
    rec.finishedAt = iso_now();
    write_summary(c.dir, rec);
    if (!c.violations.empty()) fail(ErrorKind::Invariant, command + ": " + c.violations.front());
    return rec;
}

std::string run(const std::string& command, const ExperimentConfig& cfg, const std::string& outRoot,
                RunRecord* record) {
    std::error_code ec;
    fs::create_directories(outRoot, ec);
    require(!ec, ErrorKind::Io, "cannot create " + outRoot + ": " + ec.message());
    std::string stamp = utc_stamp();
    fs::path dir = fs::path(outRoot) / stamp;
    for (int n = 1; !fs::create_directory(dir, ec); ++n) {
        require(!ec, ErrorKind::Io, "cannot create run directory under " + outRoot + ": " + ec.message());
        dir = fs::path(outRoot) / (stamp + "-" + std::to_string(n));
    }
    RunRecord rec = run_in_dir(command, cfg, dir.string());
    if (record) *record = rec;
    return dir.string();
}

}  // namespace dgc
