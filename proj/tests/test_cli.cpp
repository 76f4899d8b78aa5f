#include <gtest/gtest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "modellab/checkpoint.hpp"
#include "modellab/file_io.hpp"

namespace fs = std::filesystem;
using namespace mlab;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("modellab_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  Result run(const std::string& args) const {
    const std::string err_file = path("stderr.txt");
    const std::string cmd = std::string(MODELLAB_CLI) + " " + args + " 2>" + err_file;
    Result r;
    FILE* p = ::popen(cmd.c_str(), "r");
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof(buf), p)) > 0) r.out.append(buf, n);
    const int status = ::pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = read_file(err_file);
    return r;
  }

  std::string tiny() const { return std::string("--config ") + MODELLAB_TEST_DATA + "/tiny.ini"; }

  std::string trained_checkpoint() {
    const auto r = run("train " + tiny() + " --out " + path("m.ckpt"));
    EXPECT_EQ(r.code, 0) << r.err;
    return path("m.ckpt");
  }

  fs::path dir_;
};

std::vector<nlohmann::json> jsonl(const std::string& text) {
  std::vector<nlohmann::json> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

}  // namespace

TEST_F(Cli, MaskPrintsHybridPattern) {
  const auto r = run("mask --layout 1,2,1 --policy bidir --format ascii");
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "#...\n###.\n###.\n####\n");
  const auto pgm = run("mask --layout 0,0,3 --format pgm --out " + path("m.pgm"));
  EXPECT_EQ(pgm.code, 0);
  EXPECT_EQ(read_file(path("m.pgm")).substr(0, 11), "P5\n3 3\n255\n");
}

TEST_F(Cli, CostReportsQwen3bAttentionFigure) {
  const auto r = run("cost --dims qwen2.5-3b --seq 1024 --visual 576 --policy causal --out " + path("c.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_NEAR(j["attention_per_layer_gflops"].get<double>(), 38.7, 38.7 * 0.05);
  EXPECT_EQ(j["allowed_entries"], 524800);
  EXPECT_EQ(nlohmann::json::parse(read_file(path("c.json"))), j);
  EXPECT_TRUE(j.contains("provenance"));
  EXPECT_EQ(run("cost --dims nonexistent --seq 8").code, 1);
}

TEST_F(Cli, UsageErrorsExitOneAndWriteNothing) {
  const auto r = run("gen-data --out " + path("d.jsonl") + " --bogus");
  EXPECT_EQ(r.code, 1);
  EXPECT_FALSE(r.err.empty());
  EXPECT_FALSE(fs::exists(path("d.jsonl")));
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("mask --layout 1,2").code, 1);
  EXPECT_EQ(run("eval --checkpoint " + path("missing.ckpt")).code, 1);
  EXPECT_EQ(run("train " + tiny() + " --variant nope --out " + path("x.ckpt")).code, 1);
  EXPECT_FALSE(fs::exists(path("x.ckpt")));
}

TEST_F(Cli, GenDataIsReproducibleAndLoadable) {
  ASSERT_EQ(run("gen-data " + tiny() + " --out " + path("a.jsonl")).code, 0);
  ASSERT_EQ(run("gen-data " + tiny() + " --out " + path("b.jsonl")).code, 0);
  ASSERT_EQ(run("gen-data " + tiny() + " --seed 6 --out " + path("c.jsonl")).code, 0);
  const auto a = jsonl(read_file(path("a.jsonl")));
  const auto b = jsonl(read_file(path("b.jsonl")));
  ASSERT_EQ(a.size(), 1u + 32u + 8u);
  EXPECT_EQ(a[0]["provenance"]["seed"], 5);
  EXPECT_EQ(std::vector(a.begin() + 1, a.end()), std::vector(b.begin() + 1, b.end()));
  EXPECT_NE(read_file(path("a.jsonl")).substr(200), read_file(path("c.jsonl")).substr(200));
}

TEST_F(Cli, TrainEvalRoundTrip) {
  ASSERT_EQ(run("gen-data " + tiny() + " --out " + path("d.jsonl")).code, 0);
  const auto t = run("train " + tiny() + " --data " + path("d.jsonl") + " --out " + path("m.ckpt") + " --report " +
                     path("r.json") + " --metrics " + path("steps.jsonl"));
  ASSERT_EQ(t.code, 0) << t.err;
  const auto report = nlohmann::json::parse(read_file(path("r.json")));
  const double trained = report["evals"][0]["accuracy"];
  const auto steps = jsonl(read_file(path("steps.jsonl")));
  EXPECT_EQ(steps.size(), 1u + report["steps"].size() + 1u);
  EXPECT_FALSE(fs::exists(path("steps.jsonl.partial")));

  const auto e1 = run("eval " + tiny() + " --checkpoint " + path("m.ckpt") + " --records " + path("rec.jsonl"));
  const auto e2 = run("eval " + tiny() + " --checkpoint " + path("m.ckpt") + " --data " + path("d.jsonl"));
  ASSERT_EQ(e1.code, 0) << e1.err;
  EXPECT_EQ(e1.out, e2.out);
  double acc = -1;
  ASSERT_EQ(std::sscanf(e1.out.c_str(), "accuracy %lf", &acc), 1);
  EXPECT_DOUBLE_EQ(acc, trained);

  const auto recs = jsonl(read_file(path("rec.jsonl")));
  ASSERT_EQ(recs.size(), 9u);
  int correct = 0;
  for (std::size_t i = 1; i < recs.size(); ++i) correct += recs[i]["expected"] == recs[i]["generated"];
  EXPECT_NEAR(acc, correct / 8.0, 1e-4);
}

TEST_F(Cli, ConstantOutputCheckpointScoresZero) {
  const auto ckpt = trained_checkpoint();
  const auto before = run("eval " + tiny() + " --checkpoint " + ckpt);
  ASSERT_NE(before.out.rfind("accuracy 0.0000", 0), 0u) << before.out;
  auto model = load_checkpoint(ckpt);
  for (auto& p : model.parameters())
    if (p.group == ParamGroup::LmHead && p.tensor.rank() == 2)
      for (auto& v : p.tensor.mutable_values()) v = 0.0f;
  save_checkpoint(model, path("zero.ckpt"));
  const auto r = run("eval " + tiny() + " --checkpoint " + path("zero.ckpt"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("accuracy 0.0000 (0/8)", 0), 0u) << r.out;
}

TEST_F(Cli, UnsupportedCheckpointVersionExitsTwo) {
  auto bytes = read_file(trained_checkpoint());
  const std::uint32_t v = 9;
  std::memcpy(bytes.data() + 4, &v, 4);
  write_file_atomic(path("v9.ckpt"), bytes);
  const auto r = run("eval " + tiny() + " --checkpoint " + path("v9.ckpt"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("expected 1, found 9"), std::string::npos) << r.err;
}

TEST_F(Cli, ProbeEmitsOneEntryPerVisualToken) {
  const auto ckpt = trained_checkpoint();
  for (const char* lens : {"input", "output"}) {
    const auto r = run("probe " + tiny() + " --checkpoint " + ckpt + " --lens " + lens + " --k 3 --index 2 --ppm " +
                       path("p.ppm"));
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = nlohmann::json::parse(r.out);
    EXPECT_EQ(j["kind"], lens);
    EXPECT_EQ(j["tokens"].size(), 4u);
    EXPECT_EQ(j["tokens"][3]["top"].size(), 3u);
    EXPECT_EQ(read_file(path("p.ppm")).substr(0, 3), "P6\n");
  }
  EXPECT_EQ(run("probe " + tiny() + " --checkpoint " + ckpt + " --index 99").code, 1);
}

TEST_F(Cli, AblateEmitsAllRows) {
  const auto r = run("ablate " + tiny() + " --out " + path("t.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(read_file(path("t.json")));
  std::vector<std::string> labels;
  for (const auto& row : j["rows"]) labels.push_back(row["variant"]);
  EXPECT_EQ(labels, (std::vector<std::string>{"baseline", "+sep_qkv", "+sep_qkv+bidir", "+sep_qkv+local_global",
                                              "llavit", "no_visual_attention"}));
  EXPECT_NE(r.out.find("llavit"), std::string::npos);
}
