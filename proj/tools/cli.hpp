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

// Command-line front end. Kept in a header so tests can drive `run`
// in-process.

#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rebasin/rebasin.hpp"

namespace rebasin::cli {

inline std::string read_text(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw IoError("failed to write '" + path + "'");
}

inline EncoderWeights load_model(const std::string& path) {
  return EncoderWeights::from_archive(read_archive(std::filesystem::path(path)));
}

// "default" selects the built-in desk-scale calibration; anything else is a
// path to a CalibrationSpec JSON file.
inline CalibrationSpec load_calibration(const std::string& arg) {
  if (arg == "default") return CalibrationSpec::desk_default();
  return parse_calibration_spec(read_text(arg));
}

inline EncoderConfig load_config(const std::string& arg) {
  if (arg == "toy" || arg == "default") return EncoderConfig::toy();
  return parse_encoder_config(read_text(arg));
}

inline std::string fixed2(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Permutation alignment and merging of audio encoders", "rebasin"};
  app.require_subcommand(1);
  std::string format = "json";
  std::size_t threads = 0;
  app.add_option("--format", format, "Output format")
      ->check(CLI::IsMember({"json", "text"}));
  app.add_option("--threads", threads,
                 "Worker threads (default: REBASIN_THREADS or all cores)");

  // gen-toy
  std::string config_arg = "toy", out_path;
  std::uint64_t seed = 0;
  auto* gen = app.add_subcommand("gen-toy", "Write a seeded toy encoder");
  gen->add_option("--config", config_arg, "Encoder config JSON, or 'toy'");
  gen->add_option("--seed", seed, "Initialization seed")->required();
  gen->add_option("--out", out_path, "Output archive")->required();

  // permute-random
  std::string model_path, plan_out;
  auto* perm = app.add_subcommand("permute-random",
                                  "Apply a random symmetry; write the model and the plan that undoes it");
  perm->add_option("--model", model_path)->required();
  perm->add_option("--seed", seed)->required();
  perm->add_option("--out", out_path)->required();
  perm->add_option("--plan-out", plan_out)->required();

  // plan
  std::string model_a, model_b, kind_arg, calib_arg = "default", report_path;
  auto* plan_cmd = app.add_subcommand("plan", "Compute a permutation plan aligning B to A");
  plan_cmd->add_option("--model-a", model_a)->required();
  plan_cmd->add_option("--model-b", model_b)->required();
  plan_cmd->add_option("--kind", kind_arg)
      ->required()
      ->check(CLI::IsMember({"cnn", "cnn_ff_only", "cnn_ffn_attn", "cnn_all", "ffn_attn"}));
  plan_cmd->add_option("--calib", calib_arg, "Calibration spec JSON, or 'default'");
  plan_cmd->add_option("--out", out_path)->required();
  plan_cmd->add_option("--report", report_path, "Write the permuted-channel report JSON here");

  // merge
  std::string plan_path;
  double lambda = 0.9;
  auto* merge_cmd = app.add_subcommand("merge", "Permute B by a plan and interpolate with A");
  merge_cmd->add_option("--model-a", model_a)->required();
  merge_cmd->add_option("--model-b", model_b)->required();
  merge_cmd->add_option("--plan", plan_path)->required();
  merge_cmd->add_option("--lambda", lambda, "Weight of model A (default 0.9)");
  merge_cmd->add_option("--out", out_path)->required();

  // barrier
  std::string battery_arg = "default", csv_path;
  std::vector<double> lambdas;
  auto* barrier = app.add_subcommand("barrier", "Functional distance along the merge path");
  barrier->add_option("--model-a", model_a)->required();
  barrier->add_option("--model-b", model_b)->required();
  barrier->add_option("--plan", plan_path);
  barrier->add_option("--battery", battery_arg, "Battery spec JSON, or 'default'");
  barrier->add_option("--lambdas", lambdas, "Lambda grid (default 0.0..1.0 step 0.1)");
  barrier->add_option("--out", out_path)->required();
  barrier->add_option("--csv", csv_path, "Also write the curve as CSV");

  // score
  std::string input_path;
  auto* score = app.add_subcommand("score", "Normalized benchmark score");
  score->add_option("--input", input_path)->required();

  // inspect
  std::string archive_path;
  auto* inspect = app.add_subcommand("inspect", "List an archive's tensors and metadata");
  inspect->add_option("--archive", archive_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error[usage]: " << e.what() << "\n";
    return 2;
  }
  if (threads > 0) set_threads(threads);
  const bool text = format == "text";

  try {
    if (*gen) {
      const EncoderWeights w = init_toy(load_config(config_arg), seed);
      const auto bytes = write_archive(w.to_archive(), std::filesystem::path(out_path));
      nlohmann::json j{{"out", out_path}, {"bytes", bytes}, {"digest", weights_digest(w)}};
      out << (text ? "wrote " + out_path + " (" + std::to_string(bytes) + " bytes)" : j.dump())
          << "\n";
    } else if (*perm) {
      const EncoderWeights a = load_model(model_path);
      const SymmetryPermutation s = random_symmetry(a.config, seed);
      const EncoderWeights b = apply_plan(a, s);
      TensorArchive ba = b.to_archive();
      ba.metadata["derived_from"] = weights_digest(a);
      write_archive(ba, std::filesystem::path(out_path));
      PermutationPlan undo = s.inverse();
      undo.calibration_digest = "planted:" + std::to_string(seed);
      write_archive(plan_to_archive(undo), std::filesystem::path(plan_out));
      nlohmann::json j{{"out", out_path}, {"plan_out", plan_out}, {"seed", seed}};
      out << (text ? "wrote " + out_path + " and " + plan_out : j.dump()) << "\n";
    } else if (*plan_cmd) {
      const EncoderWeights a = load_model(model_a);
      const EncoderWeights b = load_model(model_b);
      const CalibrationSpec calib = load_calibration(calib_arg);
      const PermutationPlan plan = build_plan(a, b, parse_merge_kind(kind_arg), calib);
      write_archive(plan_to_archive(plan), std::filesystem::path(out_path));
      const PlanReport report = plan_report(plan);
      if (!report_path.empty()) write_text(report_path, report.to_json().dump(2) + "\n");
      if (text) {
        out << report.to_text();
      } else {
        nlohmann::json j{{"out", out_path}, {"report", report.to_json()},
                         {"plan_digest", plan_digest(plan)}};
        out << j.dump() << "\n";
      }
    } else if (*merge_cmd) {
      const EncoderWeights a = load_model(model_a);
      const EncoderWeights b = load_model(model_b);
      const PermutationPlan plan = plan_from_archive(read_archive(std::filesystem::path(plan_path)));
      const EncoderWeights m = merge(a, b, plan, lambda);
      write_archive(m.to_archive(), std::filesystem::path(out_path));
      nlohmann::json j{{"out", out_path}, {"lambda", lambda}, {"digest", weights_digest(m)}};
      out << (text ? "wrote " + out_path : j.dump()) << "\n";
    } else if (*barrier) {
      const EncoderWeights a = load_model(model_a);
      const EncoderWeights b = load_model(model_b);
      std::optional<PermutationPlan> plan;
      if (!plan_path.empty()) {
        plan = plan_from_archive(read_archive(std::filesystem::path(plan_path)));
      }
      const auto battery = batches(load_calibration(battery_arg), a.config.receptive_field());
      if (lambdas.empty()) lambdas = default_lambda_grid();
      const BarrierCurve curve = barrier_curve(a, b, plan, lambdas, battery);
      write_text(out_path, curve.to_json().dump(2) + "\n");
      if (!csv_path.empty()) write_text(csv_path, curve.to_csv());
      out << (text ? curve.to_csv() : curve.to_json().dump() + "\n");
    } else if (*score) {
      const auto tasks = parse_score_inputs(read_text(input_path));
      const double s = superb_score(tasks);
      if (text) {
        out << fixed2(s) << "\n";
      } else {
        out << nlohmann::json{{"score", s}, {"tasks", tasks.size()}}.dump() << "\n";
      }
    } else if (*inspect) {
      const TensorArchive a = read_archive(std::filesystem::path(archive_path));
      nlohmann::json tensors = nlohmann::json::object();
      for (const auto& [name, t] : a.entries) {
        tensors[name] = {{"shape", t.shape},
                         {"digest", digest_bytes(std::string_view(
                                        reinterpret_cast<const char*>(t.data.data()),
                                        t.data.size() * sizeof(float)))}};
      }
      nlohmann::json j{{"digest", archive_digest(a)},
                       {"tensors", tensors},
                       {"metadata", a.metadata}};
      if (text) {
        for (const auto& [name, t] : a.entries) {
          out << std::left << std::setw(32) << name << " " << shape_string(t.shape) << "\n";
        }
        out << "digest " << archive_digest(a) << "\n";
      } else {
        out << j.dump() << "\n";
      }
    }
  } catch (const Error& e) {
    err << "error[" << e.category() << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error[internal]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace rebasin::cli
