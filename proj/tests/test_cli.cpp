#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>

#include "pic/io_util.hpp"
#include "pic/taskgen.hpp"
#include "pic/train.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kTiny = " --dim 16 --heads 2 --depth 2 --merge-block 1 --decoder-depth 1 --n-c 8 --m 8 --batch 2";

int run_in(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && '" PIC_CLI "' " + args + " > out.txt 2> err.txt";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = testutil::temp_dir(std::string("cli_") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
  }
  int run(const std::string& args) { return run_in(dir_, args); }
  fs::path dir_;
};

}  // namespace

TEST_F(Cli, UsageErrorsExitWithTwo) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("gen-data"), 2);
  EXPECT_EQ(run("gen-data --out d.pic --bogus 1"), 2);
  EXPECT_EQ(run("gen-data --out d.pic --icl --static-labels"), 2);
  EXPECT_EQ(run("gen-data --out d.pic --ice-mix 2"), 2);
  pic::write_text_file(dir_ / "bad.cfg", "no_such_key = 1\n");
  EXPECT_EQ(run("gen-data --config bad.cfg --out d.pic"), 2);
  EXPECT_EQ(run("train --data missing.pic --out c.pick"), 2);
}

TEST_F(Cli, GenDataDeterministicAndCounts) {
  ASSERT_EQ(run("gen-data --out a.pic --count 20 --n-points 128 --seed 4"), 0);
  ASSERT_EQ(run("gen-data --out b.pic --count 20 --n-points 128 --seed 4"), 0);
  EXPECT_EQ(pic::read_file(dir_ / "a.pic"), pic::read_file(dir_ / "b.pic"));
  const auto m = pic::read_manifest(dir_ / "a.pic");
  EXPECT_EQ(m.total, 20u);
  std::size_t sum = 0;
  for (const auto& [k, v] : m.counts) {
    if (k.rfind("task.", 0) == 0 && std::count(k.begin(), k.end(), '.') == 1) sum += v;
  }
  EXPECT_EQ(sum, 20u);
  EXPECT_NE(slurp(dir_ / "out.txt").find("reconstruction"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir_ / "a.pic.run"));

  ASSERT_EQ(run("gen-data --out e.pic --count 0"), 0);
  EXPECT_TRUE(pic::read_dataset(dir_ / "e.pic").empty());
}

TEST_F(Cli, ConfigFileAppliesAndFlagsWin) {
  pic::write_text_file(dir_ / "g.cfg", "count = 5\nn-points = 128\nseed = 9\n");
  ASSERT_EQ(run("gen-data --config g.cfg --out a.pic"), 0);
  EXPECT_EQ(pic::read_dataset(dir_ / "a.pic").size(), 5u);
  ASSERT_EQ(run("gen-data --config g.cfg --out b.pic --count 3"), 0);
  EXPECT_EQ(pic::read_dataset(dir_ / "b.pic").size(), 3u);
}

TEST_F(Cli, TrainEvalInferPipeline) {
  ASSERT_EQ(run("gen-data --out d.pic --count 6 --n-points 128 --seed 1"), 0);
  ASSERT_EQ(run("train --data d.pic --out c.pick --epochs 1 --seed 2" + kTiny), 0);
  const auto state = pic::load_checkpoint(dir_ / "c.pick");
  EXPECT_EQ(state.optimizer.step, 3);
  EXPECT_EQ(state.model.config.mask_ratio, 0.7);
  const std::string log = slurp(dir_ / "c.pick.loss.tsv");
  EXPECT_EQ(log.rfind("step\tloss\tlr\n", 0), 0u);
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 4);
  EXPECT_NE(slurp(dir_ / "c.pick.run").find("config.model.mask_ratio="), std::string::npos);

  ASSERT_EQ(run("eval --ckpt c.pick --data d.pic --out m.tsv --seed 3"), 0);
  const std::string tsv = slurp(dir_ / "m.tsv");
  EXPECT_EQ(tsv.rfind("task\tlevel\tmetric\tvalue\tn_samples\tseed\n", 0), 0u);
  EXPECT_GT(std::count(tsv.begin(), tsv.end(), '\n'), 1);
  for (const char* s : {"class", "cd", "fea"}) {
    EXPECT_EQ(run(std::string("eval --ckpt c.pick --data d.pic --strategy ") + s), 0) << s;
  }
  EXPECT_EQ(run("eval --ckpt c.pick --data d.pic --ideal-prompt --copy"), 0);

  ASSERT_EQ(run("gen-data --out empty.pic --count 0"), 0);
  EXPECT_EQ(run("eval --ckpt c.pick --data d.pic --pool empty.pic"), 1);
  EXPECT_NE(slurp(dir_ / "err.txt").find("empty"), std::string::npos);

  ASSERT_EQ(run("infer --ckpt c.pick --prompt d.pic --query d.pic --query-index 1 --prompt-index 1 --out p.pic"), 0);
  const auto pred = pic::read_dataset(dir_ / "p.pic");
  ASSERT_EQ(pred.size(), 1u);
  EXPECT_EQ(pred[0].query_target.size(), 128u);
  for (const auto& p : pred[0].query_target.points) EXPECT_LE(p.cwiseAbs().maxCoeff(), 1.0f);
  const auto first = pic::read_file(dir_ / "p.pic");
  ASSERT_EQ(run("infer --ckpt c.pick --prompt d.pic --query d.pic --query-index 1 --prompt-index 1 --out p.pic"), 0);
  EXPECT_EQ(pic::read_file(dir_ / "p.pic"), first);

  EXPECT_EQ(run("inspect --ckpt c.pick"), 0);
  EXPECT_EQ(run("inspect --data d.pic"), 0);
  EXPECT_EQ(run("inspect"), 2);
}

TEST_F(Cli, ResumeMatchesUninterruptedLog) {
  ASSERT_EQ(run("gen-data --out d.pic --count 8 --n-points 128 --seed 1"), 0);
  ASSERT_EQ(run("train --data d.pic --out full.pick --max-steps 6 --seed 2" + kTiny), 0);
  ASSERT_EQ(run("train --data d.pic --out half.pick --max-steps 6 --stop-after 3 --seed 2" + kTiny), 0);
  ASSERT_EQ(run("train --data d.pic --resume half.pick --out half.pick --log half.pick.loss.tsv"), 0);
  EXPECT_EQ(slurp(dir_ / "half.pick.loss.tsv"), slurp(dir_ / "full.pick.loss.tsv"));
  EXPECT_EQ(pic::read_file(dir_ / "half.pick"), pic::read_file(dir_ / "full.pick"));
}

TEST_F(Cli, SegmentationLabelsAndPreflight) {
  ASSERT_EQ(run("gen-data --out s.pic --count 8 --n-points 128 --tasks segmentation --shapes lamp,chair --icl --seed 5"), 0);
  EXPECT_EQ(run("train --data s.pic --out c.pick --max-steps 2 --nb 2" + kTiny), 1);
  EXPECT_NE(slurp(dir_ / "err.txt").find("label bank holds 2"), std::string::npos);
  ASSERT_EQ(run("train --data s.pic --out c.pick --max-steps 2" + kTiny), 0);
  EXPECT_TRUE(pic::load_checkpoint(dir_ / "c.pick").bank.has_value());
  ASSERT_EQ(run("infer --ckpt c.pick --prompt s.pic --query s.pic --out p.pic"), 0);
  EXPECT_TRUE(fs::exists(dir_ / "p.pic.labels.txt"));
  ASSERT_EQ(run("eval --ckpt c.pick --data s.pic --generalization --seed 1"), 0);
  EXPECT_NE(slurp(dir_ / "out.txt").find("generalization\t-\tmiou"), std::string::npos);
}

TEST_F(Cli, AblateEmitsWellFormedTsv) {
  ASSERT_EQ(run("gen-data --out d.pic --count 6 --n-points 128 --seed 1"), 0);
  ASSERT_EQ(run("ablate --data d.pic --eval d.pic --axis mask-ratio --values 0.2,0.7 --max-steps 2 --out a.tsv" +
                kTiny),
            0);
  std::istringstream in(slurp(dir_ / "a.tsv"));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "axis\tsetting\ttask\tlevel\tmetric\tvalue\tn_samples\tseed");
  const std::regex row(R"(mask-ratio\t0\.[27]\t[a-z_]+\t(L[1-5]|avg|-)\t[a-z_0-9]+\t-?[0-9]+\.[0-9]{6}\t[0-9]+\t[0-9]+)");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    EXPECT_TRUE(std::regex_match(line, row)) << line;
    ++rows;
  }
  EXPECT_GT(rows, 2u);
  EXPECT_EQ(run("ablate --data d.pic --eval d.pic --axis depth --max-steps 2"), 2);
}
