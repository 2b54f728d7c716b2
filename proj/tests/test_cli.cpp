// Copyright 2026 The rebasin Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "test_util.hpp"

namespace rebasin {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "rebasin");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("rebasin_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::create_directories(dir_);
    write("small.json", nlohmann::json(testing::small_config()).dump());
    CalibrationSpec c;
    c.clip_len = 400;
    c.batch_size = 8;
    c.seed = 5;
    c.sources = {{SourceKind::BandNoise, 8, {{"min_hz", 200.0}, {"max_hz", 6000.0}}},
                 {SourceKind::Chirp, 8, {}},
                 {SourceKind::SineMix, 8, {}}};
    write("calib.json", nlohmann::json(c).dump());
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string p(const std::string& name) const { return (dir_ / name).string(); }
  void write(const std::string& name, const std::string& text) {
    std::ofstream(dir_ / name) << text;
  }
  std::string read(const std::string& name) {
    std::ifstream f(dir_ / name);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  }

  fs::path dir_;
};

TEST_F(CliTest, ScorePrintsThousandForBestProfile) {
  write("best.json", R"([{"task":"ASR","u":7.84,"fbank":23.18,"best":7.84},
                         {"task":"GTZAN","u":0.8,"fbank":0.5,"best":0.8}])");
  const auto r = run({"--format", "text", "score", "--input", p("best.json")});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "1000.00\n");
  const auto j = run({"score", "--input", p("best.json")});
  EXPECT_EQ(nlohmann::json::parse(j.out)["score"], 1000.0);
}

TEST_F(CliTest, ErrorsCarryCategoryAndExitCode) {
  auto r = run({"score"});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("error[usage]:", 0), 0u);
  r = run({"frobnicate"});
  EXPECT_EQ(r.code, 2);
  r = run({"score", "--input", p("missing.json")});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error[io]:", 0), 0u);
  write("junk.mrg", "not an archive");
  r = run({"inspect", "--archive", p("junk.mrg")});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error[format]:", 0), 0u);
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
  r = run({"plan", "--model-a", "a", "--model-b", "b", "--kind", "all", "--out", "x"});
  EXPECT_EQ(r.code, 2);
  write("flat.json", R"([{"task":"ASR","u":1,"fbank":2,"best":2}])");
  r = run({"score", "--input", p("flat.json")});
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error[validation]:", 0), 0u);
}

TEST_F(CliTest, GenToyIsDeterministicAndInspectRoundTrips) {
  ASSERT_EQ(run({"gen-toy", "--seed", "3", "--out", p("a.mrg")}).code, 0);
  ASSERT_EQ(run({"gen-toy", "--seed", "3", "--out", p("b.mrg")}).code, 0);
  EXPECT_EQ(read("a.mrg"), read("b.mrg"));
  const auto r = run({"inspect", "--archive", p("a.mrg")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  const auto arc = read_archive(fs::path(p("a.mrg")));
  EXPECT_EQ(j["digest"], archive_digest(arc));
  EXPECT_EQ(j["tensors"].size(), arc.entries.size());
  for (const auto& [name, t] : arc.entries) {
    EXPECT_EQ(j["tensors"][name]["shape"].get<std::vector<std::size_t>>(), t.shape);
  }
  EXPECT_EQ(EncoderWeights::from_archive(arc).config, EncoderConfig::toy());
}

TEST_F(CliTest, SelfPlanReportsNothingPermuted) {
  ASSERT_EQ(run({"gen-toy", "--config", p("small.json"), "--seed", "1", "--out", p("a.mrg")}).code, 0);
  const auto r = run({"plan", "--model-a", p("a.mrg"), "--model-b", p("a.mrg"), "--kind",
                      "cnn_all", "--calib", p("calib.json"), "--out", p("plan.mrg"), "--report",
                      p("report.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = nlohmann::json::parse(read("report.json"));
  for (const char* key : {"cnn_layer0", "cnn_rest", "attention", "head_order", "ffn", "qkv"}) {
    EXPECT_EQ(report[key], 0.0) << key;
  }
  const auto text = run({"--format", "text", "plan", "--model-a", p("a.mrg"), "--model-b",
                         p("a.mrg"), "--kind", "cnn", "--calib", p("calib.json"), "--out",
                         p("plan2.mrg")});
  EXPECT_NE(text.out.find("0.00 %"), std::string::npos);
}

TEST_F(CliTest, PlantedPipelineReachesA) {
  ASSERT_EQ(run({"gen-toy", "--config", p("small.json"), "--seed", "2", "--out", p("a.mrg")}).code, 0);
  auto r = run({"permute-random", "--model", p("a.mrg"), "--seed", "9", "--out", p("b.mrg"),
                "--plan-out", p("planted.mrg")});
  ASSERT_EQ(r.code, 0) << r.err;
  r = run({"plan", "--model-a", p("a.mrg"), "--model-b", p("b.mrg"), "--kind", "cnn_ffn_attn",
           "--calib", p("calib.json"), "--out", p("plan.mrg")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto planted = plan_from_archive(read_archive(fs::path(p("planted.mrg"))));
  const auto found = plan_from_archive(read_archive(fs::path(p("plan.mrg"))));
  EXPECT_TRUE(found.same_permutations(planted));
  r = run({"merge", "--model-a", p("a.mrg"), "--model-b", p("b.mrg"), "--plan", p("plan.mrg"),
           "--out", p("m.mrg")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto m = read_archive(fs::path(p("m.mrg")));
  EXPECT_EQ(m.meta("lambda"), "0.90000000000000002");
  EXPECT_EQ(m.meta("plan_digest"), plan_digest(found));
  r = run({"barrier", "--model-a", p("a.mrg"), "--model-b", p("b.mrg"), "--plan", p("plan.mrg"),
           "--battery", p("calib.json"), "--out", p("curve.json"), "--csv", p("curve.csv")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto curve = nlohmann::json::parse(read("curve.json"));
  ASSERT_EQ(curve["dist_to_a"].size(), 11u);
  for (double d : curve["dist_to_a"]) EXPECT_LE(d, 1e-8);
  EXPECT_FALSE(read("curve.csv").empty());
  r = run({"barrier", "--model-a", p("a.mrg"), "--model-b", p("b.mrg"), "--battery",
           p("calib.json"), "--lambdas", "0.5", "--out", p("naive.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_GT(nlohmann::json::parse(read("naive.json"))["dist_to_a"][0].get<double>(), 1e-6);
}

}  // namespace
}  // namespace rebasin
