#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "pqe/run_config.hpp"
#include "test_util.hpp"

#ifndef PQE_CLI_PATH
#error "PQE_CLI_PATH must name the pqe binary"
#endif

namespace pqe {
namespace {

struct Run {
  int code;
  std::string out;
};

Run pqe_cli(const std::string& args, const testing::TempDir& dir) {
  const std::string log = dir.file("stdout.txt");
  const std::string cmd = std::string(PQE_CLI_PATH) + " " + args + " > " + log + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  const auto bytes = testing::read_bytes(log);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, std::string(bytes.begin(), bytes.end())};
}

const std::string kSmallModel = " --head_size 8 --num_blocks 1 --mlp_units 16 --batch_size 16";

TEST(Cli, UsageErrorsExitOne) {
  testing::TempDir dir{"cli"};
  EXPECT_EQ(pqe_cli("", dir).code, 1);
  EXPECT_EQ(pqe_cli("frobnicate", dir).code, 1);
  EXPECT_EQ(pqe_cli("generate", dir).code, 1);  // --out missing
  EXPECT_EQ(pqe_cli("generate --out x --no-such-flag 3", dir).code, 1);
  EXPECT_EQ(pqe_cli("generate --out x --config " + dir.file("absent.cfg"), dir).code, 1);
}

TEST(Cli, HelpListsEveryKeyWithDefault) {
  testing::TempDir dir{"cli"};
  for (const std::string sub : {"generate", "train", "eval", "sweep", "gradcheck"}) {
    const auto r = pqe_cli(sub + " --help", dir);
    EXPECT_EQ(r.code, 0) << sub;
    for (const auto& k : config_keys()) EXPECT_NE(r.out.find("--" + k.name), std::string::npos) << sub << ' ' << k.name;
  }
  EXPECT_NE(pqe_cli("train --help", dir).out.find("--learning_rate VALUE"), std::string::npos);
  EXPECT_NE(pqe_cli("sweep --help", dir).out.find("[default: B]"), std::string::npos);
}

TEST(Cli, GenerateIsByteReproducible) {
  testing::TempDir dir{"cli"};
  const std::string args = " --count 100 --sample_rate 1000 --seed 9";
  const auto r = pqe_cli("generate --out " + dir.file("a.bin") + args, dir);
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("C10 10"), std::string::npos);
  ASSERT_EQ(pqe_cli("generate --out " + dir.file("b.bin") + args, dir).code, 0);
  EXPECT_EQ(testing::read_bytes(dir.file("a.bin")), testing::read_bytes(dir.file("b.bin")));
  EXPECT_EQ(testing::read_bytes(dir.file("a.bin.manifest")), testing::read_bytes(dir.file("b.bin.manifest")));
  ASSERT_EQ(pqe_cli("generate --out " + dir.file("c.bin") + " --count 100 --sample_rate 1000 --seed 10", dir).code, 0);
  EXPECT_NE(testing::read_bytes(dir.file("a.bin")), testing::read_bytes(dir.file("c.bin")));
}

TEST(Cli, ValidationAndIoFamilies) {
  testing::TempDir dir{"cli"};
  EXPECT_EQ(pqe_cli("generate --out " + dir.file("x.bin") + " --count 1001", dir).code, 3);
  EXPECT_EQ(pqe_cli("generate --out " + dir.file("x.bin") + " --mode C", dir).code, 3);
  EXPECT_EQ(pqe_cli("generate --out " + dir.file("x.bin") + " --epochs ten", dir).code, 3);
  EXPECT_EQ(pqe_cli("eval --model " + dir.file("none.bin") + " --data " + dir.file("none.bin") + " --out-dir " +
                        dir.file("ev"),
                    dir)
                .code,
            2);
  EXPECT_EQ(pqe_cli("generate --out " + dir.file("no/such/dir/x.bin") + " --count 10 --sample_rate 1000", dir).code,
            2);
  EXPECT_EQ(pqe_cli("sweep --scenarios S9 --out-dir " + dir.file("sw"), dir).code, 3);
}

TEST(Cli, ConfigFileThenFlags) {
  testing::TempDir dir{"cli"};
  std::ofstream(dir.file("run.cfg")) << "count = 20\nsample_rate = 1000\ndata_seed = 4\n";
  const auto r = pqe_cli("generate --config " + dir.file("run.cfg") + " --count 30 --out " + dir.file("d.bin"), dir);
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("30 records of 200 samples"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("seed 4"), std::string::npos) << r.out;
}

TEST(Cli, GradcheckPasses) {
  testing::TempDir dir{"cli"};
  const auto r = pqe_cli("gradcheck", dir);
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("block0.attn"), std::string::npos);
  EXPECT_NE(r.out.find("(ok)"), std::string::npos);
  EXPECT_EQ(pqe_cli("gradcheck --tolerance 0", dir).code, 4);
}

TEST(Cli, TrainEvalPlotRoundTrip) {
  testing::TempDir dir{"cli"};
  ASSERT_EQ(pqe_cli("generate --out " + dir.file("d.bin") + " --count 100 --sample_rate 1000", dir).code, 0);
  const auto t = pqe_cli("train --data " + dir.file("d.bin") + " --out " + dir.file("m.bin") + " --epochs 2" +
                             kSmallModel,
                         dir);
  ASSERT_EQ(t.code, 0);
  EXPECT_NE(t.out.find("learning_rate = "), std::string::npos);  // config echo
  EXPECT_NE(t.out.find("diag_overall"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir.file("m.bin.report.txt")));

  const auto e = pqe_cli("eval --model " + dir.file("m.bin") + " --data " + dir.file("d.bin") + " --out-dir " +
                             dir.file("ev"),
                         dir);
  ASSERT_EQ(e.code, 0);
  for (const char* f : {"metrics.txt", "metrics.csv", "confusion_percent.csv", "confusion_counts.csv"}) {
    EXPECT_TRUE(std::filesystem::exists(dir.file(std::string("ev/") + f))) << f;
  }
  // eval on the test split reproduces the figure printed by train
  const auto line = [](const std::string& s) { return s.substr(s.find("diag_overall")); };
  EXPECT_EQ(line(e.out), line(t.out));
  EXPECT_EQ(pqe_cli("eval --model " + dir.file("m.bin") + " --data " + dir.file("d.bin") + " --split dev --out-dir " +
                        dir.file("ev"),
                    dir)
                .code,
            3);

  ASSERT_EQ(pqe_cli("plot --data " + dir.file("d.bin") + " --indices 0,99 --out-dir " + dir.file("pl"), dir).code, 0);
  EXPECT_TRUE(std::filesystem::exists(dir.file("pl/signal_99.svg")));
  EXPECT_TRUE(std::filesystem::exists(dir.file("pl/signal_0.csv")));
  EXPECT_EQ(pqe_cli("plot --data " + dir.file("d.bin") + " --indices 100 --out-dir " + dir.file("pl"), dir).code, 3);
}

TEST(Cli, SweepWithoutPresetsRunsBaseOnly) {
  testing::TempDir dir{"cli"};
  const auto r = pqe_cli("sweep --scenarios \"\" --count 100 --epochs 1 --out-dir " + dir.file("sw") + kSmallModel,
                         dir);
  ASSERT_EQ(r.code, 0);
  const auto csv = testing::read_bytes(dir.file("sw/sweep.csv"));
  std::istringstream in(std::string(csv.begin(), csv.end()));
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 2);
  EXPECT_TRUE(std::filesystem::exists(dir.file("sw/base/confusion_percent.csv")));
}

}  // namespace
}  // namespace pqe
