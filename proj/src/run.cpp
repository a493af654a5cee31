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

#include "corefine/run.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>

#include "corefine/data.hpp"
#include "corefine/optim.hpp"

namespace corefine {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string join_errors(const std::vector<std::string>& errors) {
  std::string out = "invalid config:";
  for (const auto& e : errors) out += "\n  " + e;
  return out;
}

// Pulls typed fields out of a flat document, remembering every failure.
class FieldReader {
 public:
  explicit FieldReader(const json& doc) : doc_(doc) {}

  // Parsed text yields unsigned numbers, documents built in code signed ones.
  static bool non_negative(const json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  }

  std::vector<std::string> errors;

  void size(const char* key, std::size_t& out, std::size_t min = 0) {
    const auto* v = find(key);
    if (!v) return;
    if (!non_negative(*v)) return fail(key, "expected a non-negative integer");
    const auto x = v->get<std::uint64_t>();
    if (x < min) return fail(key, "must be at least " + std::to_string(min));
    out = static_cast<std::size_t>(x);
  }

  void u64(const char* key, std::uint64_t& out) {
    const auto* v = find(key);
    if (!v) return;
    if (!non_negative(*v)) return fail(key, "expected a non-negative integer");
    out = v->get<std::uint64_t>();
  }

  void number(const char* key, double& out) {
    const auto* v = find(key);
    if (!v) return;
    if (!v->is_number()) return fail(key, "expected a number");
    out = v->get<double>();
    if (!std::isfinite(out)) fail(key, "must be finite");
  }

  void boolean(const char* key, bool& out) {
    const auto* v = find(key);
    if (!v) return;
    if (!v->is_boolean()) return fail(key, "expected true or false");
    out = v->get<bool>();
  }

  void sizes(const char* key, std::vector<std::size_t>& out) {
    const auto* v = find(key);
    if (!v) return;
    if (!v->is_array()) return fail(key, "expected an array of positive integers");
    std::vector<std::size_t> parsed;
    for (const auto& e : *v) {
      if (!non_negative(e) || e.get<std::uint64_t>() == 0) {
        return fail(key, "expected an array of positive integers");
      }
      parsed.push_back(e.get<std::size_t>());
    }
    out = std::move(parsed);
  }

  void optional_int(const char* key, std::optional<int>& out) {
    const auto* v = find(key);
    if (!v) return;
    if (v->is_null()) {
      out.reset();
      return;
    }
    if (!v->is_number_integer()) return fail(key, "expected an integer or null");
    out = v->get<int>();
  }

  void path(const char* key, fs::path& out, const fs::path& base) {
    const auto* v = find(key);
    if (!v) return;
    if (!v->is_string() || v->get<std::string>().empty()) return fail(key, "expected a non-empty path string");
    out = resolve(v->get<std::string>(), base);
  }

  void optional_path(const char* key, std::optional<fs::path>& out, const fs::path& base) {
    const auto* v = find(key);
    if (!v) return;
    if (v->is_null()) {
      out.reset();
      return;
    }
    fs::path p;
    path(key, p, base);
    if (!p.empty()) out = p;
  }

  void text(const char* key, std::string& out) {
    const auto* v = find(key);
    if (!v) return;
    if (!v->is_string()) return fail(key, "expected a string");
    out = v->get<std::string>();
  }

  void fail(const std::string& key, const std::string& msg) { errors.push_back(key + ": " + msg); }

 private:
  const json* find(const char* key) {
    auto it = doc_.find(key);
    return it == doc_.end() ? nullptr : &*it;
  }

  static fs::path resolve(const std::string& p, const fs::path& base) {
    fs::path out(p);
    if (out.is_relative() && !base.empty()) out = base / out;
    return out.lexically_normal();
  }

  const json& doc_;
};

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "num_categories", "c_feat",       "c_class",     "hbis_layers", "encoder_widths", "encoder_strides",
      "downsample",     "topk_ratio",   "topk_eps",    "image_height", "image_width",   "lambda_hm",
      "lambda_fd",      "fisher_eps",   "ignore_index", "lr",          "total_steps",   "batch_size",
      "precision",      "seed",         "shuffle",     "train_data",  "eval_data"};
  return keys;
}

// Runs a validate() method and files its message under `key`.
template <typename F>
void check(FieldReader& r, const std::string& key, F&& validate) {
  try {
    validate();
  } catch (const std::exception& e) {
    r.fail(key, e.what());
  }
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> errors)
    : std::runtime_error(join_errors(errors)), errors_(std::move(errors)) {}

json RunConfig::to_json() const {
  json j;
  j["num_categories"] = model.num_categories;
  j["c_feat"] = model.c_feat;
  j["c_class"] = model.c_class;
  j["hbis_layers"] = model.hbis_layers;
  j["encoder_widths"] = model.encoder_widths;
  j["encoder_strides"] = model.encoder_strides;
  j["downsample"] = model.downsample;
  j["topk_ratio"] = model.topk.ratio;
  j["topk_eps"] = model.topk.eps;
  j["image_height"] = model.image_height;
  j["image_width"] = model.image_width;
  j["lambda_hm"] = loss.lambda_hm;
  j["lambda_fd"] = loss.lambda_fd;
  j["fisher_eps"] = loss.fisher_eps;
  j["ignore_index"] = loss.ignore_index ? json(*loss.ignore_index) : json(nullptr);
  j["lr"] = lr;
  j["total_steps"] = total_steps;
  j["batch_size"] = batch_size;
  j["precision"] = precision == Precision::kSingle ? "single" : "double";
  j["seed"] = seed;
  j["shuffle"] = shuffle;
  j["train_data"] = train_data.string();
  j["eval_data"] = eval_data ? json(eval_data->string()) : json(nullptr);
  return j;
}

RunConfig parse_run_config(const json& doc, const fs::path& base_dir) {
  if (!doc.is_object()) throw ConfigError({"<root>: expected a JSON object"});
  RunConfig c;
  FieldReader r(doc);
  for (const auto& [key, value] : doc.items()) {
    if (!known_keys().contains(key)) r.fail(key, "unknown key");
  }

  r.size("num_categories", c.model.num_categories);
  r.size("c_feat", c.model.c_feat);
  r.size("c_class", c.model.c_class);
  r.size("hbis_layers", c.model.hbis_layers);
  r.sizes("encoder_widths", c.model.encoder_widths);
  r.sizes("encoder_strides", c.model.encoder_strides);
  r.size("downsample", c.model.downsample);
  r.number("topk_ratio", c.model.topk.ratio);
  r.number("topk_eps", c.model.topk.eps);
  r.size("image_height", c.model.image_height);
  r.size("image_width", c.model.image_width);
  r.number("lambda_hm", c.loss.lambda_hm);
  r.number("lambda_fd", c.loss.lambda_fd);
  r.number("fisher_eps", c.loss.fisher_eps);
  r.optional_int("ignore_index", c.loss.ignore_index);
  r.number("lr", c.lr);
  r.size("total_steps", c.total_steps, 1);
  r.size("batch_size", c.batch_size, 1);
  std::string precision = "single";
  r.text("precision", precision);
  if (precision == "single") {
    c.precision = Precision::kSingle;
  } else if (precision == "double") {
    c.precision = Precision::kDouble;
  } else {
    r.fail("precision", "expected \"single\" or \"double\"");
  }
  r.u64("seed", c.seed);
  r.boolean("shuffle", c.shuffle);
  r.path("train_data", c.train_data, base_dir);
  r.optional_path("eval_data", c.eval_data, base_dir);

  if (!doc.contains("train_data")) r.fail("train_data", "required");
  if (!(c.lr > 0.0)) r.fail("lr", "must be positive");
  if (r.errors.empty()) {
    check(r, "model", [&] { c.model.validate(); });
    check(r, "loss", [&] { c.loss.validate(); });
  }
  if (!r.errors.empty()) throw ConfigError(std::move(r.errors));
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({path.string() + ": cannot open"});
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError({path.string() + ": " + e.what()});
  }
  return parse_run_config(doc, path.parent_path());
}

fs::path log_path_for(const fs::path& checkpoint) {
  auto p = checkpoint;
  p += ".log.jsonl";
  return p;
}

template <typename T>
void store_params(Checkpoint& ckpt, const ModelParams<T>& params) {
  for (const auto& [name, t] : params.named()) ckpt.put(name, t);
}

template <typename T>
ModelParams<T> restore_params(const Checkpoint& ckpt, const ModelConfig& config) {
  auto params = ModelParams<T>::init(config, 0);
  for (auto& [name, t] : params.named()) {
    const auto values = ckpt.get<T>(name, t.shape());
    std::copy(values.begin(), values.end(), t.mutable_values().begin());
  }
  return params;
}

namespace {

template <typename T>
void store_optimizer(Checkpoint& ckpt, const ModelParams<T>& params, const AdamState<T>& state) {
  const auto named = params.named();
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& [name, t] = named[i];
    ckpt.put<T>("adam.m/" + name, t.shape(), state.m[i]);
    ckpt.put<T>("adam.v/" + name, t.shape(), state.v[i]);
  }
}

template <typename T>
AdamState<T> restore_optimizer(const Checkpoint& ckpt, const ModelParams<T>& params, std::uint64_t step) {
  AdamState<T> state;
  state.step = step;
  for (const auto& [name, t] : params.named()) {
    state.m.push_back(ckpt.get<T>("adam.m/" + name, t.shape()));
    state.v.push_back(ckpt.get<T>("adam.v/" + name, t.shape()));
  }
  return state;
}

void require_paths(const RunConfig& config) {
  std::vector<std::string> errors;
  if (!fs::is_directory(config.train_data)) errors.push_back("train_data: no such directory " + config.train_data.string());
  if (config.eval_data && !fs::is_directory(*config.eval_data)) {
    errors.push_back("eval_data: no such directory " + config.eval_data->string());
  }
  if (!errors.empty()) throw ConfigError(std::move(errors));
}

void check_extents(std::span<const SegSample> samples, const ModelConfig& config, const fs::path& dir) {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].height != config.image_height || samples[i].width != config.image_width) {
      throw std::runtime_error(dir.string() + ": sample " + std::to_string(i) + " is " +
                               std::to_string(samples[i].width) + "x" + std::to_string(samples[i].height) +
                               ", config expects " + std::to_string(config.image_width) + "x" +
                               std::to_string(config.image_height));
    }
  }
}

template <typename T>
TrainSummary train_impl(const RunConfig& config, const TrainOptions& options) {
  require_paths(config);
  const auto samples = load_dataset(config.train_data);
  if (samples.empty()) throw std::runtime_error(config.train_data.string() + ": dataset is empty");
  check_extents(samples, config.model, config.train_data);

  auto params = ModelParams<T>::init(config.model, config.seed);
  auto tensors = params.tensors();
  auto state = AdamState<T>::for_params(tensors);
  std::size_t start = 0;

  if (options.resume) {
    const auto ckpt = load_checkpoint(*options.resume);
    if (!ckpt.meta.contains("config") || !ckpt.meta.contains("step")) {
      throw CheckpointError(options.resume->string() + ": not a training checkpoint");
    }
    const auto saved = parse_run_config(ckpt.meta.at("config"));
    if (saved.precision != config.precision) throw CheckpointError("checkpoint precision differs from config");
    params = restore_params<T>(ckpt, config.model);
    tensors = params.tensors();
    start = ckpt.meta.at("step").get<std::size_t>();
    state = restore_optimizer<T>(ckpt, params, start);
    if (start > config.total_steps) throw CheckpointError("checkpoint is past total_steps");
  }

  const std::size_t stop = std::min(config.total_steps, options.stop_after.value_or(config.total_steps));
  const std::size_t per_epoch = (samples.size() + config.batch_size - 1) / config.batch_size;

  TrainSummary summary;
  summary.log_path = log_path_for(options.checkpoint);
  std::ofstream log(summary.log_path, std::ios::trunc);
  if (!log) throw std::runtime_error("cannot open " + summary.log_path.string() + " for writing");

  std::vector<std::vector<std::size_t>> batches;
  std::size_t batches_epoch = static_cast<std::size_t>(-1);
  for (std::size_t step = start; step < stop; ++step) {
    const std::size_t epoch = step / per_epoch;
    if (epoch != batches_epoch) {
      batches = make_batches(samples.size(), config.batch_size, config.seed, config.shuffle, epoch);
      batches_epoch = epoch;
    }
    const auto& idx = batches[step % per_epoch];
    const auto image = image_batch<T>(samples, idx);
    const auto labels = label_batch(samples, idx);
    const double lr = cosine_lr(step, config.total_steps, config.lr);

    StepLog entry;
    {
      Graph<T> graph;
      const auto fwd = model_forward(image, params, config.model);
      std::vector<Tensor<T>> scores, embeddings;
      for (const auto& layer : fwd.decoded.layers) {
        scores.push_back(layer.heatmap.scores);
        embeddings.push_back(layer.embeddings);
      }
      const auto loss =
          total_loss(fwd.head.upsampled_logits, fwd.head.probs, labels, scores, embeddings, config.loss);
      entry = {step + 1, lr, static_cast<double>(loss.total.item()), static_cast<double>(loss.main.item()),
               static_cast<double>(loss.heatmap.item()), static_cast<double>(loss.fisher.item())};
      if (!std::isfinite(entry.total)) {
        throw std::runtime_error("non-finite loss at step " + std::to_string(step + 1));
      }
      graph.backward(loss.total);
    }
    adam_step(tensors, state, lr);
    for (auto& t : tensors) t.zero_grad();

    nlohmann::ordered_json line;
    line["step"] = entry.step;
    line["lr"] = entry.lr;
    line["l_total"] = entry.total;
    line["l_main"] = entry.main;
    line["l_hm"] = entry.heatmap;
    line["l_fd"] = entry.fisher;
    log << line.dump() << '\n';
    if (!options.quiet) std::cerr << line.dump() << '\n';
    summary.steps.push_back(entry);
  }
  log.flush();
  if (!log) throw std::runtime_error("failed writing " + summary.log_path.string());

  summary.completed = std::max(start, stop);
  Checkpoint ckpt;
  ckpt.meta["config"] = config.to_json();
  ckpt.meta["step"] = summary.completed;
  store_params(ckpt, params);
  store_optimizer(ckpt, params, state);
  save_checkpoint(ckpt, options.checkpoint);
  return summary;
}

RunConfig config_of(const Checkpoint& ckpt, const fs::path& path) {
  if (!ckpt.meta.contains("config")) throw CheckpointError(path.string() + ": checkpoint carries no config");
  return parse_run_config(ckpt.meta.at("config"));
}

template <typename T>
MetricSummary evaluate_impl(const Checkpoint& ckpt, const RunConfig& config, const fs::path& data_dir,
                            std::optional<int> ignore_index) {
  const auto params = restore_params<T>(ckpt, config.model);
  const auto samples = load_dataset(data_dir);
  if (samples.empty()) throw std::runtime_error(data_dir.string() + ": dataset is empty");
  check_extents(samples, config.model, data_dir);

  ConfusionMatrix cm(config.model.num_categories);
  for (const auto& idx : make_batches(samples.size(), config.batch_size, 0, false)) {
    const auto image = image_batch<T>(samples, idx);
    const auto labels = label_batch(samples, idx);
    const auto fwd = model_forward(image, params, config.model);
    cm.accumulate(predict(fwd.head.probs), labels.values, ignore_index);
  }
  return summarize(cm);
}

template <typename T>
std::vector<fs::path> export_impl(const Checkpoint& ckpt, const RunConfig& config, const SegSample& sample,
                                  const fs::path& out_dir) {
  auto model = config.model;
  model.image_height = sample.height;
  model.image_width = sample.width;
  model.validate();
  const auto params = restore_params<T>(ckpt, model);
  const std::vector<SegSample> one{sample};
  const std::vector<std::size_t> idx{0};
  const auto fwd = model_forward(image_batch<T>(one, idx), params, model);

  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  const std::size_t h = model.feature_height(), w = model.feature_width(), plane = h * w;
  for (std::size_t l = 0; l < fwd.decoded.layers.size(); ++l) {
    const auto probs = fwd.decoded.layers[l].heatmap.probs.values();
    for (std::size_t n = 0; n < model.num_categories; ++n) {
      const auto gray = minmax_to_gray<T>(probs.subspan(n * plane, plane));
      auto path = out_dir / ("layer" + std::to_string(l + 1) + "_class" + std::to_string(n) + ".pgm");
      write_pgm(path, w, h, gray);
      written.push_back(std::move(path));
    }
  }
  const auto pred = predict(fwd.head.probs);
  auto path = out_dir / "pred.pgm";
  write_pgm(path, sample.width, sample.height, pred);
  written.push_back(std::move(path));
  return written;
}

}  // namespace

TrainSummary train(const RunConfig& config, const TrainOptions& options) {
  if (config.precision == Precision::kDouble) return train_impl<double>(config, options);
  return train_impl<float>(config, options);
}

MetricSummary evaluate(const fs::path& checkpoint, const fs::path& data_dir, std::optional<int> ignore_index) {
  const auto ckpt = load_checkpoint(checkpoint);
  const auto config = config_of(ckpt, checkpoint);
  if (config.precision == Precision::kDouble) return evaluate_impl<double>(ckpt, config, data_dir, ignore_index);
  return evaluate_impl<float>(ckpt, config, data_dir, ignore_index);
}

std::vector<fs::path> export_heatmaps(const fs::path& checkpoint, const fs::path& image, const fs::path& out_dir) {
  const auto ckpt = load_checkpoint(checkpoint);
  const auto config = config_of(ckpt, checkpoint);
  const auto sample = load_image(image);
  if (config.precision == Precision::kDouble) return export_impl<double>(ckpt, config, sample, out_dir);
  return export_impl<float>(ckpt, config, sample, out_dir);
}

template <typename T>
std::vector<std::uint8_t> minmax_to_gray(std::span<const T> plane) {
  std::vector<std::uint8_t> out(plane.size(), 0);
  if (plane.empty()) return out;
  const auto [lo, hi] = std::minmax_element(plane.begin(), plane.end());
  const double min = *lo, range = static_cast<double>(*hi) - min;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < plane.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (static_cast<double>(plane[i]) - min) / range));
  }
  return out;
}

#define COREFINE_INSTANTIATE(T)                                                           \
  template void store_params<T>(Checkpoint&, const ModelParams<T>&);                     \
  template ModelParams<T> restore_params<T>(const Checkpoint&, const ModelConfig&);      \
  template std::vector<std::uint8_t> minmax_to_gray<T>(std::span<const T>);

COREFINE_INSTANTIATE(float)
COREFINE_INSTANTIATE(double)

#undef COREFINE_INSTANTIATE

}  // namespace corefine
