// Copyright 2026 The CAST Authors. All rights reserved.
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

#include "cast/train.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>

namespace cast {
namespace {

constexpr std::uint64_t kBatchStream = std::uint64_t{1} << 62;
constexpr std::uint64_t kAugmentStream = std::uint64_t{1} << 61;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError(key + ": cannot parse '" + value + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true") return true;
  if (value == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + value + "'");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

template <typename T>
Setter number(T RunConfig::*field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) { c.*field = parse_number<T>(k, v); };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"seed", number(&RunConfig::seed)},
      {"phi", number(&RunConfig::phi)},
      {"lambda", number(&RunConfig::lambda)},
      {"tau", number(&RunConfig::tau)},
      {"momentum", number(&RunConfig::momentum)},
      {"queue_size", number(&RunConfig::queue_size)},
      {"lr", number(&RunConfig::lr)},
      {"sgd_momentum", number(&RunConfig::sgd_momentum)},
      {"weight_decay", number(&RunConfig::weight_decay)},
      {"batch", number(&RunConfig::batch)},
      {"epochs", number(&RunConfig::epochs)},
      {"steps", number(&RunConfig::steps)},
      {"supervision_mode",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         try {
           c.supervision_mode = parse_supervision_mode(v);
         } catch (const std::invalid_argument& e) {
           throw ConfigError(k + ": " + e.what());
         }
       }},
      {"second_order",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.second_order = parse_bool(k, v); }},
      {"scale_min", number(&RunConfig::scale_min)},
      {"scale_max", number(&RunConfig::scale_max)},
      {"max_attempts", number(&RunConfig::max_attempts)},
      {"brightness", number(&RunConfig::brightness)},
      {"contrast", number(&RunConfig::contrast)},
      {"checkpoint_every", number(&RunConfig::checkpoint_every)},
      {"train_data", [](RunConfig& c, const std::string&, const std::string& v) { c.train_data = v; }},
      {"output_dir", [](RunConfig& c, const std::string&, const std::string& v) { c.output_dir = v; }},
  };
  return table;
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace

void RunConfig::validate() const {
  require(phi >= 0.0f && phi <= 1.0f, "phi: must lie in [0, 1]");
  require(lambda >= 0.0f && std::isfinite(lambda), "lambda: must be non-negative");
  require(tau > 0.0f && std::isfinite(tau), "tau: must be positive");
  require(momentum >= 0.0f && momentum <= 1.0f, "momentum: must lie in [0, 1]");
  require(queue_size >= 1, "queue_size: must be at least 1");
  require(lr > 0.0 && std::isfinite(lr), "lr: must be positive");
  require(sgd_momentum >= 0.0 && sgd_momentum < 1.0, "sgd_momentum: must lie in [0, 1)");
  require(weight_decay >= 0.0 && std::isfinite(weight_decay), "weight_decay: must be non-negative");
  require(batch >= 1, "batch: must be at least 1");
  require(epochs >= 0 && steps >= 0, "epochs/steps: must be non-negative");
  require(epochs > 0 || steps > 0, "epochs/steps: one of them must be positive");
  require(scale_min > 0.0f && scale_min <= scale_max && scale_max <= 1.0f,
          "scale_min/scale_max: need 0 < scale_min <= scale_max <= 1");
  require(max_attempts >= 1, "max_attempts: must be at least 1");
  require(brightness >= 0.0f && brightness < 1.0f, "brightness: must lie in [0, 1)");
  require(contrast >= 0.0f && contrast < 1.0f, "contrast: must lie in [0, 1)");
  require(checkpoint_every >= 0, "checkpoint_every: must be non-negative");
  require(!train_data.empty(), "train_data: must not be empty");
  require(!output_dir.empty(), "output_dir: must not be empty");
  try {
    step_config().validate(EncoderConfig{});
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

StepConfig RunConfig::step_config() const {
  StepConfig s;
  s.augment.constraint.phi = phi;
  s.augment.constraint.scale_lo = scale_min;
  s.augment.constraint.scale_hi = scale_max;
  s.augment.max_attempts = max_attempts;
  s.augment.brightness = brightness;
  s.augment.contrast = contrast;
  s.augment.out_size = EncoderConfig{}.input_size;
  s.loss.lambda = lambda;
  s.loss.tau = tau;
  s.loss.mode = supervision_mode;
  s.loss.second_order = second_order;
  s.sgd.lr = lr;
  s.sgd.momentum = sgd_momentum;
  s.sgd.weight_decay = weight_decay;
  return s;
}

int RunConfig::total_steps(std::size_t dataset_size) const {
  if (steps > 0) return steps;
  const auto per_epoch = static_cast<int>((dataset_size + static_cast<std::size_t>(batch) - 1) / batch);
  return epochs * per_epoch;
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig config;
  std::map<std::string, int> seen;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(std::string_view(raw).substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError(key + ": unknown key (line " + std::to_string(line_no) + ")");
    if (seen.count(key)) throw ConfigError(key + ": repeated (lines " + std::to_string(seen[key]) + " and " +
                                           std::to_string(line_no) + ")");
    if (value.empty()) throw ConfigError(key + ": missing value");
    seen[key] = line_no;
    it->second(config, key, value);
  }
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string format_run_config(const RunConfig& c) {
  std::string s;
  auto line = [&s](std::string_view key, const auto& value) { s += fmt::format("{} = {}\n", key, value); };
  line("seed", c.seed);
  line("phi", c.phi);
  line("lambda", c.lambda);
  line("tau", c.tau);
  line("momentum", c.momentum);
  line("queue_size", c.queue_size);
  line("lr", c.lr);
  line("sgd_momentum", c.sgd_momentum);
  line("weight_decay", c.weight_decay);
  line("batch", c.batch);
  line("epochs", c.epochs);
  line("steps", c.steps);
  line("supervision_mode", to_string(c.supervision_mode));
  line("second_order", c.second_order ? "true" : "false");
  line("scale_min", c.scale_min);
  line("scale_max", c.scale_max);
  line("max_attempts", c.max_attempts);
  line("brightness", c.brightness);
  line("contrast", c.contrast);
  line("checkpoint_every", c.checkpoint_every);
  line("train_data", c.train_data);
  line("output_dir", c.output_dir);
  return s;
}

std::string format_log_row(const LogRow& r) {
  return fmt::format("{},{:.6f},{:.6f},{:.6f},{},{:.1f}", r.step, r.contrastive, r.attention, r.total, r.queue_fill,
                     r.wall_ms);
}

std::vector<std::size_t> batch_indices(const RunConfig& config, std::size_t dataset_size, std::int64_t step) {
  if (dataset_size == 0) throw std::invalid_argument("batch_indices: empty dataset");
  const auto batch = static_cast<std::size_t>(config.batch);
  const std::size_t per_epoch = (dataset_size + batch - 1) / batch;
  const auto epoch = static_cast<std::uint64_t>(step) / per_epoch;
  const std::size_t slot = static_cast<std::size_t>(step) % per_epoch;
  std::vector<std::size_t> order(dataset_size);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = derive_rng(config.seed, kBatchStream + epoch);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t begin = slot * batch, end = std::min(dataset_size, begin + batch);
  return {order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end)};
}

TrainState initial_state(const RunConfig& config) {
  return TrainState::init(EncoderConfig{}, config.queue_size, config.momentum, config.seed);
}

std::filesystem::path checkpoint_path(const RunConfig& config, std::int64_t step) {
  return std::filesystem::path(config.output_dir) / fmt::format("step_{:06d}.ckpt", step);
}

std::filesystem::path final_checkpoint_path(const RunConfig& config) {
  return std::filesystem::path(config.output_dir) / "final.ckpt";
}

TrainResult train(const RunConfig& config, const std::vector<LabeledScene>& data, const TrainOptions& options) {
  config.validate();
  if (data.empty()) throw ConfigError("train_data: dataset is empty");
  const StepConfig step_config = config.step_config();
  TrainState state = options.resume ? load_checkpoint(*options.resume, EncoderConfig{}, config.momentum)
                                    : initial_state(config);
  if (state.queue.capacity() != config.queue_size) {
    throw ConfigError(fmt::format("queue_size: checkpoint has {} slots, config asks for {}", state.queue.capacity(),
                                  config.queue_size));
  }
  const std::int64_t total = config.total_steps(data.size());
  const std::int64_t end = options.stop_after > 0 ? std::min<std::int64_t>(options.stop_after, total) : total;

  const std::filesystem::path out_dir(config.output_dir);
  const auto log_path = out_dir / "train_log.csv";
  std::ofstream log_file;
  if (options.write_files) {
    std::filesystem::create_directories(out_dir);
    std::ofstream(out_dir / "config.txt", std::ios::trunc) << format_run_config(config);
    // Keep only rows up to the resumed step, so a killed run leaves no duplicates.
    std::vector<std::string> kept;
    if (options.resume && std::filesystem::exists(log_path)) {
      std::ifstream old(log_path);
      std::string row;
      std::getline(old, row);
      while (std::getline(old, row)) {
        if (!row.empty() && std::stoll(row.substr(0, row.find(','))) <= state.step) kept.push_back(row);
      }
    }
    log_file.open(log_path, std::ios::trunc);
    if (!log_file) throw std::runtime_error("cannot write " + log_path.string());
    log_file << kLogHeader << '\n';
    for (const auto& row : kept) log_file << row << '\n';
    log_file.flush();
  }

  spdlog::info("training from step {} to {} on {} scenes (lambda={}, phi={}, seed={})", state.step, end,
               data.size(), config.lambda, config.phi, config.seed);
  TrainResult result{std::move(state), {}};
  TrainState& s = result.state;
  std::vector<TrainingExample> batch;
  while (s.step < end) {
    const auto t0 = std::chrono::steady_clock::now();
    batch.clear();
    for (std::size_t i : batch_indices(config, data.size(), s.step)) batch.push_back({data[i].image, data[i].mask});
    Rng rng = derive_rng(config.seed, kAugmentStream + static_cast<std::uint64_t>(s.step));
    const StepResult r = cast_step(s, batch, step_config, rng);
    if (!std::isfinite(r.total)) throw std::runtime_error(fmt::format("non-finite loss at step {}", s.step));
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    const LogRow row{s.step, r.contrastive, r.attention, r.total, s.queue.fill(), ms};
    result.log.push_back(row);
    spdlog::debug("step {} L_cont={:.4f} L_att={:.4f} total={:.4f}", s.step, r.contrastive, r.attention, r.total);
    if (s.step % 100 == 0) spdlog::info("step {}/{} total={:.4f}", s.step, total, r.total);
    if (options.write_files) {
      log_file << format_log_row(row) << '\n';
      log_file.flush();
      if (config.checkpoint_every > 0 && s.step % config.checkpoint_every == 0) {
        save_checkpoint(checkpoint_path(config, s.step), s);
      }
    }
  }
  if (options.write_files) {
    if (s.step >= total) {
      save_checkpoint(final_checkpoint_path(config), s);
    } else {
      save_checkpoint(checkpoint_path(config, s.step), s);
    }
  }
  if (s.skipped > 0) spdlog::warn("{} samples skipped for empty saliency masks", s.skipped);
  return result;
}

}  // namespace cast
