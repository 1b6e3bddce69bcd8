#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dgc/carleman.hpp"
#include "dgc/control.hpp"

namespace dgc {

struct ExperimentConfig {
    std::uint64_t seed = 1;

    // [domain]
    double T = 1.0;
    double alpha = 0.5;
    int N = 100, M = 200;
    Interval omega{0.6, 0.9}, omegaPrime{0.65, 0.85}, omega1{0.7, 0.8};

    // [coefficients]
    CoefficientSpec coeffs;

    // [weights]
    bool lambdaAuto = true;
    double lambda = 0.0;       // used when lambdaAuto is false
    double lambdaShift = 1.0;  // lambda = lambda* + shift when lambdaAuto
    double s = 1.0;
    double weightLogFloor = 40.0;
    int quadRefine = 8;
    double quadCutoff = 200.0;

    // [solver]
    SolverParams solver;

    // [control]
    int u0Mode = 1, v0Mode = 1;  // sin(k pi x); 0 means zero data
    double cgTol = 1e-10;
    int cgMaxIter = 2000;
    int stagnationWindow = 200;
    Preconditioner precond = Preconditioner::BlockCholesky;
    bool constrainPsi0 = true;
    double humEpsilon = 1e-8;
    int transpositionSamples = 10;

    // [experiment]
    int samples = 20;
    std::vector<double> sweepS{1.0, 2.0};
    std::vector<double> sweepLambdaShift{0.0, 1.0};
    std::string sweepOperation = "carleman-single";
    int jobs = 2;

    std::map<std::string, int> lines;  // "section.key" -> source line (0 for --set)
};

// Parse errors carry "line L: ..." in the message and ErrorKind::Config.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config(const std::string& path);
// "section.key=value" (or "seed=value"), applied after the file.
void apply_override(ExperimentConfig& cfg, const std::string& assignment);
// Hypothesis gates: alpha in [0,1), b0 > 0, b21min > 0, subdomain nesting, lambda >= lambda*.
void validate_config(const ExperimentConfig& cfg);

// All keys in a fixed order; identical configs give identical text.
std::string canonical_config(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);  // FNV-1a 64, hex

Problem build_problem(const ExperimentConfig& cfg);
double resolve_lambda(const ExperimentConfig& cfg, const Problem& p);
WeightFields build_fields(const ExperimentConfig& cfg, const Problem& p);
ControlData build_control_data(const ExperimentConfig& cfg);
// Uniform(-1,1) on interior nodes of levels 1..M from stream (seed, streamId).
Field random_source(const Problem& p, std::uint64_t seed, std::uint64_t streamId);

struct RunRecord {
    std::string command;
    std::string configHash;
    std::string buildId;
    std::string config;       // canonical text
    nlohmann::json outputs;   // numbers only; no clocks or absolute paths
    std::vector<std::string> artifacts;  // relative to the run directory
    // metadata block
    std::string startedAt, finishedAt;
};

nlohmann::json to_json(const RunRecord& r);
RunRecord record_from_json(const nlohmann::json& j);
std::string build_id();

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;
};

struct PlotSpec {
    std::string title, xLabel, yLabel;
    bool logY = false;
};

std::string svg_plot(const std::vector<Series>& series, const PlotSpec& spec);
void emit_svg_plot(const std::vector<Series>& series, const PlotSpec& spec, const std::string& path);

const std::vector<std::string>& subcommands();

// Runs one subcommand into dir (created if missing) and writes dir/summary.json.
// Throws Invariant after writing outputs when a checked property fails.
RunRecord run_in_dir(const std::string& command, const ExperimentConfig& cfg, const std::string& dir);
// Creates <outRoot>/<UTC timestamp>[-n] and runs there; returns the directory.
std::string run(const std::string& command, const ExperimentConfig& cfg, const std::string& outRoot,
                RunRecord* record = nullptr);

}  // namespace dgc
