/*
 * Copyright 2026 The corefine Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "corefine/data.hpp"
#include "corefine/gradcheck.hpp"
#include "corefine/run.hpp"

namespace {

using namespace corefine;
namespace fs = std::filesystem;

int cmd_synth(const fs::path& out, const SynthConfig& cfg) {
  const auto samples = synth_generate(cfg);
  save_dataset(samples, out);
  const auto freq = pixel_frequencies(samples, cfg.categories);
  std::printf("wrote %zu samples to %s; pixel frequency per category:", samples.size(), out.string().c_str());
  for (std::size_t n = 0; n < freq.size(); ++n) std::printf(" %zu=%.4f", n, freq[n]);
  std::printf("\n");
  return 0;
}

int cmd_train(const fs::path& config_path, const fs::path& out, const std::optional<fs::path>& resume,
              const std::optional<std::size_t>& stop_after, bool verbose) {
  const auto config = load_run_config(config_path);
  TrainOptions options;
  options.checkpoint = out;
  options.resume = resume;
  options.stop_after = stop_after;
  options.quiet = !verbose;
  const auto summary = train(config, options);
  std::cerr << "trained to step " << summary.completed << "; log at " << summary.log_path.string() << '\n';
  return 0;
}

int cmd_gradcheck(const GradcheckOptions& options) {
  const auto report = run_gradcheck(options);
  std::cout << report.to_text();
  return report.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"corefine: class-embedding segmentation decoder with heatmap-driven refinement"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "Generate a synthetic segmentation dataset");
  fs::path synth_out;
  SynthConfig synth_cfg;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--num", synth_cfg.count, "Number of samples")->capture_default_str();
  synth->add_option("--size", synth_cfg.size, "Image side length, a multiple of 4")->capture_default_str();
  synth->add_option("--classes", synth_cfg.categories, "Number of categories, background included")
      ->capture_default_str();
  synth->add_option("--seed", synth_cfg.seed, "Generator seed")->capture_default_str();

  auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON config");
  fs::path config_path, train_out;
  std::optional<fs::path> resume;
  std::optional<std::size_t> stop_after;
  bool verbose = false;
  train_cmd->add_option("--config", config_path, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_out, "Checkpoint to write")->required();
  train_cmd->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  train_cmd->add_option("--stop-after", stop_after, "Stop once this many steps are done in total");
  train_cmd->add_flag("--verbose", verbose, "Echo the per-step log to stderr");

  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a dataset; metrics JSON on stdout");
  fs::path eval_ckpt, eval_data;
  std::optional<int> ignore_index;
  eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", eval_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--ignore-index", ignore_index, "Label value excluded from scoring");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Compare adjoints with central finite differences");
  GradcheckOptions grad;
  std::string fault;
  grad_cmd->add_option("--seed", grad.seed, "Seed for the random instances")->capture_default_str();
  grad_cmd->add_option("--eps", grad.eps, "Finite-difference step")->capture_default_str();
  grad_cmd->add_option("--tolerance", grad.tolerance, "Maximum relative error")->capture_default_str();
  grad_cmd->add_option("--inject-fault", fault, "Scale the adjoint of this op by 1.01 (negative control)");

  auto* export_cmd = app.add_subcommand("export-heatmaps", "Write per-layer class heatmaps and the prediction");
  fs::path export_ckpt, export_image, export_out;
  export_cmd->add_option("--ckpt", export_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  export_cmd->add_option("--image", export_image, "Input PPM")->required()->check(CLI::ExistingFile);
  export_cmd->add_option("--out", export_out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(synth_out, synth_cfg);
    if (*train_cmd) return cmd_train(config_path, train_out, resume, stop_after, verbose);
    if (*eval_cmd) {
      std::cout << evaluate(eval_ckpt, eval_data, ignore_index).to_json() << '\n';
      return 0;
    }
    if (*grad_cmd) {
      if (!fault.empty()) grad.fault_op = fault;
      return cmd_gradcheck(grad);
    }
    if (*export_cmd) {
      const auto files = export_heatmaps(export_ckpt, export_image, export_out);
      std::cerr << "wrote " << files.size() << " files to " << export_out.string() << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
