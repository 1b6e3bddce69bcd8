#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "dgc/experiment.hpp"

using namespace dgc;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    fs::path d = fs::temp_directory_path() / ("dgc_test_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string config_error(const std::string& text) {
    try {
        parse_config_text(text);
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Config);
        return e.what();
    }
    ADD_FAILURE() << "accepted: " << text;
    return "";
}

ExperimentConfig small_config() {
    ExperimentConfig c = parse_config_text("[domain]\nN = 40\nM = 80\n[experiment]\nsamples = 3\n");
    return c;
}

// Every regular file under dir, keyed by relative path; summary.json reduced to its record block.
std::map<std::string, std::string> tree(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        std::string rel = fs::relative(e.path(), dir).string();
        std::string body = slurp(e.path());
        if (e.path().filename() == "summary.json") body = nlohmann::json::parse(body).at("record").dump();
        out[rel] = body;
    }
    return out;
}

}  // namespace

TEST(Config, EmptyTextGivesDefaults) {
    ExperimentConfig c = parse_config_text("# nothing here\n\n");
    EXPECT_EQ(canonical_config(c), canonical_config(ExperimentConfig{}));
    EXPECT_EQ(c.N, 100);
    EXPECT_EQ(c.M, 200);
    EXPECT_TRUE(c.lambdaAuto);
}

TEST(Config, ParsesSectionsListsAndEnums) {
    ExperimentConfig c = parse_config_text(
        "seed = 9\n[domain]\nalpha = 0.3 # inline\nomega = 0.5, 0.95\n[weights]\nlambda = 7.5\n"
        "[control]\npreconditioner = jacobi\n[experiment]\nsweep_s = 1, 2, 4\n");
    EXPECT_EQ(c.seed, 9u);
    EXPECT_DOUBLE_EQ(c.alpha, 0.3);
    EXPECT_DOUBLE_EQ(c.omega.lo, 0.5);
    EXPECT_FALSE(c.lambdaAuto);
    EXPECT_DOUBLE_EQ(c.lambda, 7.5);
    EXPECT_EQ(c.precond, Preconditioner::Jacobi);
    EXPECT_EQ(c.sweepS, (std::vector<double>{1, 2, 4}));
    EXPECT_EQ(c.lines.at("domain.alpha"), 3);
}

TEST(Config, RejectsStronglyDegenerateAlphaWithLine) {
    std::string m = config_error("[domain]\nT = 1\nalpha = 1.2\n");
    EXPECT_NE(m.find("line 3"), std::string::npos) << m;
}

TEST(Config, RejectsZeroCouplingInfimumWithLine) {
    std::string m = config_error("[coefficients]\n\nb21_min = 0\n");
    EXPECT_NE(m.find("line 3"), std::string::npos) << m;
    EXPECT_NE(m.find("b21"), std::string::npos) << m;
}

TEST(Config, RejectsNonPositiveB0WithLine) {
    std::string m = config_error("[coefficients]\nb_mean = 0.5\nb_amp = 0.5\n");
    EXPECT_NE(m.find("line 2"), std::string::npos) << m;
}

TEST(Config, RejectsLambdaBelowOrderingThreshold) {
    std::string m = config_error("[weights]\nlambda = 0.1\n");
    EXPECT_NE(m.find("line 2"), std::string::npos) << m;
}

TEST(Config, RejectsBrokenNesting) {
    std::string m = config_error("[domain]\nomega1 = 0.1, 0.2\n");
    EXPECT_NE(m.find("line 2"), std::string::npos) << m;
}

TEST(Config, RejectsMalformedInput) {
    EXPECT_NE(config_error("[domain]\nfoo = 1\n").find("line 2: unknown key"), std::string::npos);
    EXPECT_NE(config_error("[domain]\nN 40\n").find("line 2"), std::string::npos);
    EXPECT_NE(config_error("[nowhere]\n").find("line 1"), std::string::npos);
    EXPECT_NE(config_error("[domain]\nN = 4x\n").find("line 2"), std::string::npos);
    EXPECT_NE(config_error("[domain]\nN = 40\nN = 50\n").find("line 3: duplicate"), std::string::npos);
    EXPECT_NE(config_error("[control]\npreconditioner = ilu\n").find("line 2"), std::string::npos);
}

TEST(Config, OverrideAppliesAndIsValidated) {
    ExperimentConfig c = parse_config_text("");
    apply_override(c, "domain.N=64");
    apply_override(c, "seed = 5");
    EXPECT_EQ(c.N, 64);
    EXPECT_EQ(c.seed, 5u);
    EXPECT_NO_THROW(validate_config(c));
    EXPECT_THROW(apply_override(c, "domain.nope=1"), Error);
    apply_override(c, "domain.alpha=1.5");
    try {
        validate_config(c);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("--set"), std::string::npos) << e.what();
    }
}

TEST(Config, HashIsStableAndSensitive) {
    ExperimentConfig a = parse_config_text("[domain]\nN = 40\n");
    ExperimentConfig b = parse_config_text("# comment\n[domain]\n  N   =   40  \n");
    EXPECT_EQ(config_hash(a), config_hash(b));
    EXPECT_EQ(config_hash(a).size(), 16u);
    b.seed = 2;
    EXPECT_NE(config_hash(a), config_hash(b));
    EXPECT_EQ(parse_config_text(canonical_config(a)).N, 40);
    EXPECT_EQ(config_hash(parse_config_text(canonical_config(a))), config_hash(a));
}

TEST(RunRecordJson, RoundTrip) {
    RunRecord r;
    r.command = "weights";
    r.configHash = "0123456789abcdef";
    r.buildId = build_id();
    r.config = "seed = 1\n";
    r.outputs = {{"x", 1.5}, {"list", {1, 2}}};
    r.artifacts = {"a.csv", "b.svg"};
    r.startedAt = "2020-01-01T00:00:00Z";
    r.finishedAt = "2020-01-01T00:00:01Z";
    RunRecord q = record_from_json(nlohmann::json::parse(to_json(r).dump()));
    EXPECT_EQ(to_json(q), to_json(r));
    EXPECT_THROW(record_from_json(nlohmann::json{{"record", 1}}), Error);
}

TEST(Svg, EmptyPlotHasAxesOnly) {
    std::string s = svg_plot({}, {"empty", "x", "y", false});
    EXPECT_NE(s.find("<svg"), std::string::npos);
    EXPECT_NE(s.find("<line"), std::string::npos);
    EXPECT_EQ(s.find("<polyline"), std::string::npos);
}

TEST(Svg, TwoPointSeriesIsAPolylineAndDeterministic) {
    std::vector<Series> s = {{"a<b", {{0.0, 1.0}, {1.0, 1e-3}}}, {"dot", {{0.5, 0.1}}}};
    PlotSpec spec{"t", "x", "y", true};
    std::string a = svg_plot(s, spec), b = svg_plot(s, spec);
    EXPECT_EQ(a, b);
    EXPECT_NE(a.find("<polyline"), std::string::npos);
    EXPECT_NE(a.find("<circle"), std::string::npos);
    EXPECT_NE(a.find("a&lt;b"), std::string::npos);
    // Non-positive values are dropped on a log axis instead of producing nan coordinates.
    std::string c = svg_plot({{"z", {{0.0, 0.0}, {1.0, -1.0}}}}, spec);
    EXPECT_EQ(c.find("nan"), std::string::npos);
}

TEST(Runs, WeightsWritesCsvSvgAndSummary) {
    fs::path d = scratch("weights");
    RunRecord r = run_in_dir("weights", small_config(), d.string());
    EXPECT_TRUE(fs::exists(d / "weights.csv"));
    EXPECT_TRUE(fs::exists(d / "weights.svg"));
    auto j = nlohmann::json::parse(slurp(d / "summary.json"));
    EXPECT_TRUE(j["record"]["outputs"]["invariants"]["ok"].get<bool>());
    EXPECT_EQ(j["record"]["configHash"], config_hash(small_config()));
    EXPECT_EQ(r.artifacts, (std::vector<std::string>{"weights.csv", "weights.svg"}));
}

TEST(Runs, ControlSummaryCarriesFinalNorms) {
    fs::path d = scratch("control");
    ExperimentConfig c = small_config();
    c.transpositionSamples = 2;
    RunRecord r = run_in_dir("control-lm", c, d.string());
    const auto& res = r.outputs.at("result");
    EXPECT_LT(res.at("finalNormU").get<double>(), 1e-2 * res.at("initNormU").get<double>());
    EXPECT_LE(r.outputs.at("transpositionResidual").get<double>(), 1e-8);
    EXPECT_TRUE(fs::exists(d / "control.csv"));
}

TEST(Runs, JacobiStagnationIsNumerical) {
    fs::path d = scratch("jacobi");
    ExperimentConfig c = small_config();
    c.precond = Preconditioner::Jacobi;
    c.stagnationWindow = 20;
    try {
        run_in_dir("control-lm", c, d.string());
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Numerical);
        return;
    }
    SUCCEED() << "Jacobi converged on this mesh";
}

TEST(Runs, RunCreatesDistinctTimestampDirectories) {
    fs::path d = scratch("stamps");
    std::string a = run("weights", small_config(), d.string());
    std::string b = run("weights", small_config(), d.string());
    EXPECT_NE(a, b);
    EXPECT_TRUE(fs::exists(fs::path(b) / "summary.json"));
}

TEST(Runs, SweepMergesMembersInOrder) {
    fs::path d = scratch("sweep");
    ExperimentConfig c = small_config();
    RunRecord r = run_in_dir("sweep", c, d.string());
    const auto& m = r.outputs.at("members");
    ASSERT_EQ(m.size(), 4u);
    EXPECT_EQ(m[0].at("s").get<double>(), 1.0);
    EXPECT_EQ(m[1].at("lambdaShift").get<double>(), 1.0);
    EXPECT_EQ(m[3].at("s").get<double>(), 2.0);
    for (int i = 0; i < 4; ++i) EXPECT_TRUE(fs::exists(d / ("member_" + std::to_string(i)) / "carleman.csv"));
}

TEST(Runs, SweepRejectsNestedSweep) {
    EXPECT_THROW(parse_config_text("[experiment]\nsweep_operation = sweep\n"), Error);
}

TEST(Determinism, IdenticalConfigGivesIdenticalOutputs) {
    ExperimentConfig c = small_config();
    c.transpositionSamples = 2;
    for (const std::string cmd : {"solve-adjoint", "control-lm", "observability"}) {
        fs::path a = scratch("det_a"), b = scratch("det_b");
        run_in_dir(cmd, c, a.string());
        run_in_dir(cmd, c, b.string());
        EXPECT_EQ(tree(a), tree(b)) << cmd;
    }
}

TEST(Determinism, ConcurrentSweepMatchesSerialSweep) {
    ExperimentConfig c = small_config();
    c.jobs = 4;
    fs::path a = scratch("sweep_a"), b = scratch("sweep_b");
    run_in_dir("sweep", c, a.string());
    run_in_dir("sweep", c, b.string());
    c.jobs = 1;
    fs::path s = scratch("sweep_serial");
    run_in_dir("sweep", c, s.string());
    auto ta = tree(a);
    EXPECT_EQ(ta, tree(b));
    // jobs is part of the parent config hash, so only member trees are compared with the serial run.
    auto ts = tree(s);
    for (const auto& [k, v] : ta)
        if (k.rfind("member_", 0) == 0) EXPECT_EQ(v, ts.at(k)) << k;
}
