#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "lpa/accounting.hpp"
#include "lpa/config.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace lpa;

namespace {

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

RunResult run(const std::string& args) {
    static int counter = 0;
    const fs::path err_path =
        fs::temp_directory_path() / ("lpa_cli_stderr_" + std::to_string(::getpid()) + "_" +
                                     std::to_string(counter++));
    const std::string cmd =
        std::string("\"") + LPA_CLI_PATH + "\" " + args + " 2>\"" + err_path.string() + "\"";
    RunResult r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (pipe == nullptr) {
        return r;
    }
    std::array<char, 4096> buf{};
    std::size_t n = 0;
    while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) {
        r.out.append(buf.data(), n);
    }
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = read_file(err_path);
    fs::remove(err_path);
    return r;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

std::uint64_t table_value(const std::string& out, const std::string& key) {
    std::istringstream in(out);
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind(key + " ", 0) == 0) {
            std::string digits;
            std::size_t i = key.size();
            while (i < line.size() && line[i] == ' ') {
                ++i;
            }
            for (; i < line.size() && (std::isdigit(static_cast<unsigned char>(line[i])) ||
                                       line[i] == ',');
                 ++i) {
                if (line[i] != ',') {
                    digits += line[i];
                }
            }
            return std::stoull(digits);
        }
    }
    ADD_FAILURE() << "no row '" << key << "' in:\n" << out;
    return 0;
}

std::string small_experiment(const fs::path& dir, const fs::path& corpus, int steps,
                             const std::string& extra_train = "") {
    const fs::path cfg = dir / "small.cfg";
    std::ofstream(cfg) << "[model]\npreset = desk\nlayer_count = 1\n"
                       << "[train]\nbatch_size = 4\nseq_len = 32\ntotal_steps = " << steps
                       << "\n"
                       << extra_train << "[data]\ncorpus = " << corpus.string() << "\n";
    return cfg.string();
}

std::vector<nlohmann::json> json_lines(const std::string& text) {
    std::vector<nlohmann::json> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.front() == '{') {
            out.push_back(nlohmann::json::parse(line));
        }
    }
    return out;
}

}  // namespace

TEST(CliCount, LpaPresetTotalAndDelta) {
    const RunResult r = run("count --preset setting1-lpa-319m-r256");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NEAR(static_cast<double>(table_value(r.out, "total")), 319e6, 1e6);
    EXPECT_NEAR(static_cast<double>(table_value(r.out, "savings_vs_dense")), 50.3e6, 0.1e6);
}

TEST(CliCount, DeskIsExactAndStable) {
    const RunResult a = run("count --preset desk --format records");
    const RunResult b = run("count --preset desk --format records");
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_EQ(a.out, b.out);
    const auto rows = json_lines(a.out);
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0]["total"].get<std::uint64_t>(), count_params(preset("desk")).total);
}

TEST(CliCount, ZeroWidthConfigExitsTwoNamingTheInvariant) {
    const fs::path dir = testkit::fresh_temp_dir("cli_bad");
    std::ofstream(dir / "bad.cfg") << "[model]\nd_model = 0\n";
    const RunResult r = run("count --config " + q(dir / "bad.cfg"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("d_model"), std::string::npos) << r.err;
}

TEST(CliCount, UnknownKeyExitsTwo) {
    const fs::path dir = testkit::fresh_temp_dir("cli_unknown");
    std::ofstream(dir / "bad.cfg") << "[model]\nwidth = 3\n";
    EXPECT_EQ(run("count --config " + q(dir / "bad.cfg")).code, 2);
}

TEST(CliFlops, SingleLayerMatchesClosedForm) {
    const RunResult r = run("flops --seq-len 8 --d-in 32 --d-out 32");
    ASSERT_EQ(r.code, 0) << r.err;
    const std::uint64_t expected = 8 * 8 * 32 * 32 + 2 * 8 * 8 * 32;
    std::string plain = r.out;
    std::erase(plain, ',');
    EXPECT_NE(plain.find(std::to_string(expected)), std::string::npos) << r.out;
}

TEST(CliFlops, ZeroSequenceLengthIsUsageError) {
    EXPECT_EQ(run("flops --preset desk --seq-len 0").code, 2);
}

TEST(CliTrain, MissingCorpusExitsTwo) {
    const fs::path dir = testkit::fresh_temp_dir("cli_missing");
    const RunResult r = run("train --preset desk --corpus " + q(dir / "absent.txt") + " --out " +
                            q(dir / "out"));
    EXPECT_EQ(r.code, 2);
}

TEST(CliTrain, NonFiniteLossExitsThreeWithStep) {
    const fs::path dir = testkit::fresh_temp_dir("cli_nan");
    const fs::path corpus = testkit::write_synthetic_corpus(dir, 20000);
    const std::string cfg = small_experiment(dir, corpus, 5, "learning_rate = 1e30\n");
    const RunResult r = run("train --config " + q(cfg) + " --out " + q(dir / "out"));
    EXPECT_EQ(r.code, 3);
    EXPECT_TRUE(std::regex_search(r.err, std::regex("step [0-9]+"))) << r.err;
}

TEST(CliTrain, TrainThenEvalBeatsUniform) {
    const fs::path dir = testkit::fresh_temp_dir("cli_train");
    const fs::path corpus = testkit::write_synthetic_corpus(dir, 40000);
    const std::string cfg = small_experiment(dir, corpus, 30);
    const RunResult t = run("train --config " + q(cfg) + " --out " + q(dir / "out"));
    ASSERT_EQ(t.code, 0) << t.err;
    ASSERT_TRUE(fs::exists(dir / "out" / "checkpoint_final.lpa"));
    ASSERT_TRUE(fs::exists(dir / "out" / "train.metrics.jsonl"));
    const RunResult e = run("eval --checkpoint " + q(dir / "out" / "checkpoint_final.lpa") +
                            " --data " + q(corpus) + " --max-windows 8");
    ASSERT_EQ(e.code, 0) << e.err;
    const auto rows = json_lines(e.out);
    ASSERT_EQ(rows.size(), 1u) << e.out;
    const double ppl = rows[0]["ppl"].get<double>();
    EXPECT_TRUE(std::isfinite(ppl));
    EXPECT_LT(ppl, 257.0);
    EXPECT_NEAR(std::log(ppl), rows[0]["nll"].get<double>(), 1e-9);
}

TEST(CliTrain, SameSeedGivesIdenticalMetricsApartFromWallTime) {
    const fs::path dir = testkit::fresh_temp_dir("cli_det");
    const fs::path corpus = testkit::write_synthetic_corpus(dir, 30000);
    const std::string cfg = small_experiment(dir, corpus, 10);
    ASSERT_EQ(run("train --config " + q(cfg) + " --seed 4 --out " + q(dir / "a")).code, 0);
    ASSERT_EQ(run("train --config " + q(cfg) + " --seed 4 --out " + q(dir / "b")).code, 0);
    auto strip_time = [](std::vector<nlohmann::json> rows) {
        for (auto& row : rows) {
            row.erase("wall_ms_per_step");
        }
        return rows;
    };
    const auto a = strip_time(json_lines(read_file(dir / "a" / "train.metrics.jsonl")));
    const auto b = strip_time(json_lines(read_file(dir / "b" / "train.metrics.jsonl")));
    ASSERT_EQ(a.size(), 10u);
    EXPECT_EQ(a, b);
    EXPECT_EQ(read_file(dir / "a" / "checkpoint_final.lpa"),
              read_file(dir / "b" / "checkpoint_final.lpa"));
}

TEST(CliTrain, GenerateContinuesPrompt) {
    const fs::path dir = testkit::fresh_temp_dir("cli_gen");
    const fs::path corpus = testkit::write_synthetic_corpus(dir, 20000);
    ASSERT_EQ(run("train --config " + q(small_experiment(dir, corpus, 2)) + " --out " +
                  q(dir / "out"))
                  .code,
              0);
    const RunResult g = run("generate --checkpoint " + q(dir / "out" / "checkpoint_final.lpa") +
                            " --prompt hello --tokens 5");
    ASSERT_EQ(g.code, 0) << g.err;
    EXPECT_EQ(g.out.rfind("hello", 0), 0u);
}

TEST(CliSeeds, ThreeRunsAndMeanStdLine) {
    const fs::path dir = testkit::fresh_temp_dir("cli_seeds");
    const fs::path corpus = testkit::write_synthetic_corpus(dir, 30000);
    const std::string cfg = small_experiment(dir, corpus, 8);
    const RunResult r =
        run("seeds --config " + q(cfg) + " --seeds 1,2,3 --out " + q(dir / "runs"));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto rows = json_lines(r.out);
    ASSERT_EQ(rows.size(), 3u);
    double mean = 0.0;
    for (const auto& row : rows) {
        mean += row["test_ppl"].get<double>() / 3.0;
    }
    double var = 0.0;
    for (const auto& row : rows) {
        const double d = row["test_ppl"].get<double>() - mean;
        var += d * d / 2.0;
    }
    std::smatch m;
    ASSERT_TRUE(std::regex_search(r.out, m,
                                  std::regex(R"(test_ppl ([0-9.]+)±([0-9.]+) \(n=3\))")))
        << r.out;
    EXPECT_NEAR(std::stod(m[1]), mean, 0.006);
    EXPECT_NEAR(std::stod(m[2]), std::sqrt(var), 0.006);
}

TEST(CliVerify, JacobianAndAccountingSuitesPass) {
    for (const char* suite : {"jacobian", "accounting"}) {
        const RunResult r = run(std::string("verify --suite ") + suite);
        EXPECT_EQ(r.code, 0) << suite << "\n" << r.out << r.err;
        for (const auto& row : json_lines(r.out)) {
            EXPECT_EQ(row["status"], "pass") << row.dump();
        }
    }
}

TEST(CliVerify, InducedFailureExitsNonzeroNamingTheCheck) {
    const RunResult r = run("verify --suite equivalence --equivalence-tol 0");
    EXPECT_NE(r.code, 0);
    EXPECT_NE(r.err.find("FAILED equivalence/"), std::string::npos) << r.err;
}

TEST(CliAllocate, LayerNumAddsOneLayer) {
    ModelConfig grown = preset("desk");
    grown.layer_count += 1;
    const std::uint64_t target = count_params(grown).total;
    const RunResult r =
        run("allocate --preset desk --target-params " + std::to_string(target) +
            " --strategy layer_num");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("layer_count = " + std::to_string(grown.layer_count)),
              std::string::npos)
        << r.out;
}

TEST(CliAllocate, AttnDimReachesDenseTotal) {
    const fs::path dir = testkit::fresh_temp_dir("cli_alloc");
    const RunResult r = run("allocate --preset setting1-lpa-319m-r256 --target-preset "
                            "setting1-369m --strategy attn_dim --out " +
                            q(dir / "wide.cfg"));
    ASSERT_EQ(r.code, 0) << r.err;
    const std::string text = read_file(dir / "wide.cfg");
    std::smatch m;
    ASSERT_TRUE(std::regex_search(text, m, std::regex(R"(attn_inner_dim = ([0-9]+))")));
    EXPECT_NEAR(std::stod(m[1]), 3072.0, 16.0);
    const RunResult c = run("count --config " + q(dir / "wide.cfg"));
    ASSERT_EQ(c.code, 0) << c.err;
    EXPECT_EQ(table_value(c.out, "total"), count_params(preset("setting1-369m")).total);
}

TEST(CliAllocate, TargetBelowCurrentIsInfeasible) {
    EXPECT_EQ(run("allocate --preset desk --target-params 1000 --strategy layer_num").code, 2);
}

TEST(CliBench, RowsCarryFormulaFlopsAndRepeats) {
    const RunResult r = run("bench --preset desk-lpa-r16 --seq-len 16 --repeats 20");
    ASSERT_EQ(r.code, 0) << r.err;
    std::istringstream in(r.out);
    std::string line;
    std::getline(in, line);
    int rows = 0;
    while (std::getline(in, line)) {
        std::istringstream cols(line);
        std::string name, len, repeats, median, counted, formula;
        cols >> name >> len >> repeats >> median >> counted >> formula;
        EXPECT_EQ(repeats, "20") << line;
        EXPECT_EQ(counted, formula) << line;
        ++rows;
    }
    EXPECT_EQ(rows, 2);
}

TEST(CliBench, MissingPresetExitsTwo) { EXPECT_EQ(run("bench --preset nope").code, 2); }
