#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

// End-to-end checks of the command-line front end: subcommands, config
// documents, and the documented exit codes (0 ok, 2 config, 3 i/o).

namespace {

namespace fs = std::filesystem;

std::string temp_path(const std::string& name) {
  return std::string(::testing::TempDir()) + name;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct CliResult {
  int exit_code = -1;
  std::string output;
};

CliResult run_cli(const std::string& args) {
  std::string log = temp_path("cli-log.txt");
  std::string cmd = std::string(TAL_BIN) + " " + args + " > " + log + " 2>&1";
  int status = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = slurp(log);
  return r;
}

constexpr const char* kTrainData = "synth:seed=5,classes=4,per=20,c=3,hw=16,split=train";
constexpr const char* kEvalData = "synth:seed=5,classes=4,per=5,c=3,hw=16,split=test";

// one tiny model shared by the attack-side tests, trained on first use
const std::string& cli_model() {
  static std::string path = [] {
    std::string p = temp_path("cli.model");
    CliResult r = run_cli("train --arch rs-small --data " + std::string(kTrainData) +
                          " --epochs 1 --seed 3 --out " + p);
    EXPECT_EQ(r.exit_code, 0) << r.output;
    EXPECT_TRUE(fs::exists(p)) << r.output;
    return p;
  }();
  return path;
}

std::string eval_args(const std::string& out_dir) {
  return "--surrogate " + cli_model() + " --victims " + cli_model() + " --images 8 --seeds 0 --data " +
         std::string(kEvalData) + " --out " + out_dir;
}

int count_lines(const std::string& text) {
  int n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

}  // namespace

TEST(Cli, TrainWritesModel) {
  EXPECT_TRUE(fs::exists(cli_model()));
}

TEST(Cli, AttackWritesReports) {
  std::string dir = temp_path("cli-attack");
  CliResult r = run_cli("attack --method fgsm,ifgsm " + eval_args(dir));
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_TRUE(fs::exists(dir + "/report.csv"));
  EXPECT_TRUE(fs::exists(dir + "/summary.md"));
  EXPECT_TRUE(fs::exists(dir + "/config.txt"));
  // header + 2 attacks x 1 seed x 1 victim
  EXPECT_EQ(count_lines(slurp(dir + "/report.csv")), 3);
  EXPECT_NE(r.output.find("transfer success"), std::string::npos);
}

TEST(Cli, ReportRegeneratesIdenticalSummary) {
  std::string dir = temp_path("cli-report-src");
  ASSERT_EQ(run_cli("attack --method fgsm " + eval_args(dir)).exit_code, 0);
  std::string out = temp_path("cli-report-dst");
  CliResult r = run_cli("report --csv " + dir + "/report.csv --out " + out);
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_EQ(slurp(out + "/summary.md"), slurp(dir + "/summary.md"));
  EXPECT_EQ(slurp(out + "/report.csv"), slurp(dir + "/report.csv"));
}

TEST(Cli, SweepWritesPerEpsilonDirectories) {
  std::string dir = temp_path("cli-sweep");
  CliResult r = run_cli("sweep --method fgsm --eps-list 4,8 " + eval_args(dir));
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_TRUE(fs::exists(dir + "/eps_4/report.csv"));
  EXPECT_TRUE(fs::exists(dir + "/eps_8/report.csv"));
}

TEST(Cli, AblateWritesSixVariantRows) {
  std::string dir = temp_path("cli-ablate");
  CliResult r = run_cli(
      "ablate --images 2 --steps 2 --meta-iters 1 --support 2 --query 1 "
      "--mgs-iters 1 --mgs-dirs 1 " +
      eval_args(dir));
  ASSERT_EQ(r.exit_code, 0) << r.output;
  EXPECT_EQ(count_lines(slurp(dir + "/report.csv")), 1 + 6);
  EXPECT_NE(slurp(dir + "/summary.md").find("llta-no-model-aug"), std::string::npos);
}

TEST(Cli, ConfigDocumentFillsOptionsAndFlagsWin) {
  std::string cfg = temp_path("cli-cfg.json");
  std::string dir = temp_path("cli-cfg-out");
  {
    std::ofstream out(cfg);
    out << "{\"attack\": {\"method\": \"fgsm\", \"images\": 8, \"seeds\": [0], "
        << "\"surrogate\": \"" << cli_model() << "\", \"victims\": \"" << cli_model()
        << "\", \"data\": \"" << kEvalData << "\", \"out\": \"" << dir << "\"}}";
  }
  CliResult r = run_cli("attack --config " + cfg + " --images 4");
  ASSERT_EQ(r.exit_code, 0) << r.output;
  std::string csv = slurp(dir + "/report.csv");
  EXPECT_NE(csv.find(",4,"), std::string::npos) << "flag --images 4 must override config's 8";

  std::string bad = temp_path("cli-cfg-bad.json");
  {
    std::ofstream out(bad);
    out << "{\"attack\": {\"banana\": 1}}";
  }
  EXPECT_EQ(run_cli("attack --config " + bad).exit_code, 2);
  EXPECT_EQ(run_cli("attack --config " + temp_path("absent.json")).exit_code, 3);
}

TEST(Cli, HelpAndUsage) {
  EXPECT_EQ(run_cli("help").exit_code, 0);
  EXPECT_EQ(run_cli("--help").exit_code, 0);
  CliResult r = run_cli("train --help");
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_NE(r.output.find("subcommands"), std::string::npos);
}

TEST(Cli, ConfigErrorsExitTwo) {
  EXPECT_EQ(run_cli("").exit_code, 2);
  EXPECT_EQ(run_cli("frobnicate").exit_code, 2);
  EXPECT_EQ(run_cli("train --bogus 1").exit_code, 2);
  EXPECT_EQ(run_cli("train --arch rs-small").exit_code, 2);  // --out missing
  EXPECT_EQ(run_cli("attack --method fgsm --eps 0 " + eval_args(temp_path("x1"))).exit_code, 2);
  EXPECT_EQ(run_cli("attack --method fgsm --eps 300 " + eval_args(temp_path("x2"))).exit_code, 2);
  EXPECT_EQ(run_cli("attack --method warp " + eval_args(temp_path("x3"))).exit_code, 2);
  EXPECT_EQ(run_cli("attack --method fgsm --metric f1 " + eval_args(temp_path("x4"))).exit_code, 2);
  EXPECT_EQ(run_cli("train --arch rs-tiny --out " + temp_path("x5.model")).exit_code, 2);
}

TEST(Cli, IoAndFormatErrorsExitThree) {
  std::string absent = temp_path("absent.model");
  EXPECT_EQ(run_cli("attack --method fgsm --surrogate " + absent + " --victims " + absent +
                    " --data " + std::string(kEvalData) + " --images 2 --seeds 0 --out " +
                    temp_path("y1"))
                .exit_code,
            3);
  EXPECT_EQ(run_cli("report --csv " + temp_path("absent.csv")).exit_code, 3);

  std::string mangled = temp_path("mangled.csv");
  {
    std::ofstream out(mangled);
    out << "not,the,expected,header\n1,2,3,4\n";
  }
  EXPECT_EQ(run_cli("report --csv " + mangled + " --out " + temp_path("y2")).exit_code, 3);
}
