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

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "support/files.hpp"

namespace cast {
namespace {

using testing::ScratchDir;
using testing::read_bytes;

std::string error_of(const std::string& text) {
  try {
    parse_run_config(text).validate();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

TEST(RunConfig, DefaultsMatchChosenCells) {
  const RunConfig c;
  EXPECT_EQ(c.phi, 0.2f);
  EXPECT_EQ(c.lambda, 3.0f);
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfig, FormatParseRoundTrip) {
  RunConfig c;
  c.seed = 18446744073709551615ull;
  c.phi = 0.35f;
  c.lambda = 0.1f;
  c.tau = 0.07f;
  c.momentum = 0.999f;
  c.lr = 0.0123456789;
  c.weight_decay = 3e-5;
  c.steps = 77;
  c.supervision_mode = SupervisionMode::kIntersection;
  c.second_order = false;
  c.train_data = "some/dir";
  c.output_dir = "out dir";
  EXPECT_EQ(parse_run_config(format_run_config(c)), c);
  EXPECT_EQ(parse_run_config(format_run_config(RunConfig{})), RunConfig{});
}

TEST(RunConfig, CommentsAndWhitespace) {
  const auto c = parse_run_config("# header\n\n  phi=0.5   # inline\n\tlambda =  1\r\n");
  EXPECT_EQ(c.phi, 0.5f);
  EXPECT_EQ(c.lambda, 1.0f);
  EXPECT_EQ(c.tau, RunConfig{}.tau);
}

TEST(RunConfig, StrictParsing) {
  EXPECT_TRUE(starts_with(error_of("phii = 0.2"), "phii: unknown key"));
  EXPECT_TRUE(starts_with(error_of("phi = 0.2\nphi = 0.3"), "phi: repeated"));
  EXPECT_TRUE(starts_with(error_of("phi = 0.2x"), "phi: cannot parse"));
  EXPECT_TRUE(starts_with(error_of("batch = 3.5"), "batch: cannot parse"));
  EXPECT_TRUE(starts_with(error_of("second_order = yes"), "second_order: expected true or false"));
  EXPECT_TRUE(starts_with(error_of("supervision_mode = query"), "supervision_mode:"));
  EXPECT_TRUE(starts_with(error_of("lambda ="), "lambda: missing value"));
  EXPECT_TRUE(starts_with(error_of("just text"), "line 1:"));
}

TEST(RunConfig, ValidationNamesTheField) {
  EXPECT_TRUE(starts_with(error_of("phi = 1.5"), "phi:"));
  EXPECT_TRUE(starts_with(error_of("lambda = -1"), "lambda:"));
  EXPECT_TRUE(starts_with(error_of("tau = 0"), "tau:"));
  EXPECT_TRUE(starts_with(error_of("momentum = 1.1"), "momentum:"));
  EXPECT_TRUE(starts_with(error_of("queue_size = 0"), "queue_size:"));
  EXPECT_TRUE(starts_with(error_of("lr = 0"), "lr:"));
  EXPECT_TRUE(starts_with(error_of("batch = 0"), "batch:"));
  EXPECT_TRUE(starts_with(error_of("epochs = 0\nsteps = 0"), "epochs/steps:"));
  EXPECT_TRUE(starts_with(error_of("scale_min = 0.9\nscale_max = 0.5"), "scale_min/scale_max:"));
  EXPECT_TRUE(starts_with(error_of("max_attempts = 0"), "max_attempts:"));
  EXPECT_EQ(error_of("phi = 0\nlambda = 0"), "");
}

TEST(RunConfig, TotalSteps) {
  RunConfig c;
  c.batch = 32;
  c.epochs = 3;
  EXPECT_EQ(c.total_steps(100), 3 * 4);
  c.steps = 7;
  EXPECT_EQ(c.total_steps(100), 7);
}

TEST(BatchIndices, EachEpochIsAPermutation) {
  RunConfig c;
  c.batch = 7;
  const std::size_t n = 30;  // 5 batches per epoch, the last one short
  std::vector<std::size_t> epoch0, epoch1;
  for (int step = 0; step < 5; ++step) {
    const auto b = batch_indices(c, n, step);
    EXPECT_EQ(b.size(), step < 4 ? 7u : 2u);
    epoch0.insert(epoch0.end(), b.begin(), b.end());
    const auto b1 = batch_indices(c, n, step + 5);
    epoch1.insert(epoch1.end(), b1.begin(), b1.end());
  }
  EXPECT_EQ(std::set<std::size_t>(epoch0.begin(), epoch0.end()).size(), n);
  EXPECT_EQ(std::set<std::size_t>(epoch1.begin(), epoch1.end()).size(), n);
  EXPECT_NE(epoch0, epoch1);
  EXPECT_EQ(batch_indices(c, n, 3), batch_indices(c, n, 3));
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, TensorFileLayout) {
  ScratchDir dir("ckpt_layout");
  Eigen::VectorXf v(2);
  v << 1.5f, -2.0f;
  save_tensors(dir.path() / "t.ckpt", {{"ab", ad::TensorF({1, 2}, v)}});
  std::string expected("CASTCKPT", 8);
  auto u32 = [&](std::uint32_t x) { expected.append(reinterpret_cast<const char*>(&x), 4); };
  u32(1);  // version
  u32(1);  // tensor count
  const std::uint16_t len = 2;
  expected.append(reinterpret_cast<const char*>(&len), 2);
  expected += "ab";
  expected.push_back(2);  // rank
  u32(1);
  u32(2);
  expected.append(reinterpret_cast<const char*>(v.data()), 8);
  EXPECT_EQ(read_bytes(dir.path() / "t.ckpt"), expected);
  const auto back = load_tensors(dir.path() / "t.ckpt");
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].name, "ab");
  EXPECT_EQ(back[0].value.shape(), (ad::Shape{1, 2}));
  EXPECT_EQ(back[0].value.values(), v);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  ScratchDir dir("ckpt_corrupt");
  save_tensors(dir.path() / "t.ckpt", {{"x", ad::TensorF({3}, Eigen::VectorXf::Ones(3))}});
  const std::string good = read_bytes(dir.path() / "t.ckpt");
  auto write = [&](const std::string& bytes) {
    std::ofstream(dir.path() / "bad.ckpt", std::ios::binary | std::ios::trunc) << bytes;
    return dir.path() / "bad.ckpt";
  };
  EXPECT_THROW(load_tensors(write(good.substr(0, good.size() - 1))), CheckpointError);
  EXPECT_THROW(load_tensors(write(good + "x")), CheckpointError);
  EXPECT_THROW(load_tensors(write("NOTCKPT!" + good.substr(8))), CheckpointError);
  std::string wrong_version = good;
  wrong_version[8] = 9;
  EXPECT_THROW(load_tensors(write(wrong_version)), CheckpointError);
  EXPECT_THROW(load_tensors(dir.path() / "missing.ckpt"), CheckpointError);
}

std::vector<LabeledScene> small_dataset(int n = 32) { return generate_dataset(n, 5, {}); }

RunConfig small_config(const std::filesystem::path& out) {
  RunConfig c;
  c.steps = 12;
  c.batch = 8;
  c.queue_size = 40;
  c.checkpoint_every = 0;
  c.output_dir = out.string();
  return c;
}

TEST(Checkpoint, TrainStateRoundTripIsBitExact) {
  ScratchDir dir("ckpt_state");
  RunConfig c = small_config(dir.path());
  c.steps = 7;  // queue wraps: 56 keys into 40 slots
  TrainOptions opts;
  opts.write_files = false;
  const auto result = train(c, small_dataset(), opts);
  save_checkpoint(dir.path() / "s.ckpt", result.state);
  const TrainState back = load_checkpoint(dir.path() / "s.ckpt", EncoderConfig{}, c.momentum);
  EXPECT_TRUE(back.encoders.query.bit_equal(result.state.encoders.query));
  EXPECT_TRUE(back.encoders.key.bit_equal(result.state.encoders.key));
  EXPECT_TRUE(back.encoders.query[0].requires_grad());
  EXPECT_FALSE(back.encoders.key[0].requires_grad());
  ASSERT_EQ(back.optimizer.velocity.size(), result.state.optimizer.velocity.size());
  for (std::size_t i = 0; i < back.optimizer.velocity.size(); ++i) {
    EXPECT_EQ(back.optimizer.velocity[i], result.state.optimizer.velocity[i]);
  }
  EXPECT_EQ(back.queue.storage(), result.state.queue.storage());
  EXPECT_EQ(back.queue.cursor(), result.state.queue.cursor());
  EXPECT_EQ(back.queue.fill(), 40);
  EXPECT_EQ(back.step, 7);
  save_checkpoint(dir.path() / "again.ckpt", back);
  EXPECT_EQ(read_bytes(dir.path() / "again.ckpt"), read_bytes(dir.path() / "s.ckpt"));
}

TEST(Checkpoint, LayoutMismatchRejected) {
  ScratchDir dir("ckpt_mismatch");
  auto tensors = pack_train_state(initial_state(RunConfig{}));
  tensors.pop_back();
  EXPECT_THROW(unpack_train_state(tensors, EncoderConfig{}, 0.99f), CheckpointError);
  tensors = pack_train_state(initial_state(RunConfig{}));
  tensors[0].value = ad::TensorF::zeros({2, 2});
  EXPECT_THROW(unpack_train_state(tensors, EncoderConfig{}, 0.99f), CheckpointError);
  tensors = pack_train_state(initial_state(RunConfig{}));
  tensors.push_back({"extra", ad::TensorF::zeros({1})});
  EXPECT_THROW(unpack_train_state(tensors, EncoderConfig{}, 0.99f), CheckpointError);
}

// ---------------------------------------------------------------------------
// Training loop

TEST(Train, SmokeRunStaysFinite) {
  ScratchDir dir("smoke");
  RunConfig c = small_config(dir.path());
  c.steps = 50;
  TrainOptions opts;
  opts.write_files = false;
  const auto result = train(c, generate_dataset(64, 6, {}), opts);
  ASSERT_EQ(result.log.size(), 50u);
  for (const auto& row : result.log) {
    ASSERT_TRUE(std::isfinite(row.contrastive) && std::isfinite(row.attention) && std::isfinite(row.total));
  }
  EXPECT_EQ(result.log.front().contrastive, 0.0f);  // empty queue on the first step
  EXPECT_GT(result.log.back().contrastive, 0.0f);
  EXPECT_EQ(result.state.step, 50);
}

TEST(Train, BaselineLogHasZeroAttention) {
  ScratchDir dir("baseline");
  RunConfig c = small_config(dir.path());
  c.lambda = 0.0f;
  c.phi = 0.0f;
  const auto result = train(c, small_dataset());
  for (const auto& row : result.log) {
    EXPECT_EQ(row.attention, 0.0f);
    EXPECT_EQ(row.total, row.contrastive);
  }
  std::istringstream log(read_bytes(dir.path() / "train_log.csv"));
  std::string line;
  std::getline(log, line);
  EXPECT_EQ(line, kLogHeader);
  int rows = 0;
  while (std::getline(log, line)) {
    ++rows;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    ASSERT_EQ(f.size(), 6u);
    EXPECT_EQ(f[2], "0.000000");
  }
  EXPECT_EQ(rows, 12);
}

TEST(Train, ConfigEchoReloadsToSameRun) {
  ScratchDir dir("echo");
  RunConfig c = small_config(dir.path());
  c.steps = 4;
  train(c, small_dataset());
  const RunConfig echoed = load_run_config(dir.path() / "config.txt");
  EXPECT_EQ(echoed, c);
  const std::string first = read_bytes(final_checkpoint_path(c));
  train(echoed, small_dataset());
  EXPECT_EQ(read_bytes(final_checkpoint_path(c)), first);
}

TEST(Train, KillAndResumeMatchesUninterruptedRun) {
  ScratchDir a("uninterrupted"), b("resumed");
  const auto data = small_dataset();
  RunConfig ca = small_config(a.path());
  ca.checkpoint_every = 3;
  train(ca, data);

  RunConfig cb = ca;
  cb.output_dir = b.path().string();
  TrainOptions first;
  first.stop_after = 7;  // dies after step 7; the last periodic checkpoint is step 6
  train(cb, data, first);
  ASSERT_TRUE(std::filesystem::exists(checkpoint_path(cb, 6)));
  TrainOptions second;
  second.resume = checkpoint_path(cb, 6);
  const auto resumed = train(cb, data, second);
  EXPECT_EQ(resumed.log.front().step, 7);
  EXPECT_EQ(read_bytes(final_checkpoint_path(cb)), read_bytes(final_checkpoint_path(ca)));
  EXPECT_EQ(read_bytes(checkpoint_path(cb, 9)), read_bytes(checkpoint_path(ca, 9)));

  // Log rows 1..12 appear once each.
  std::istringstream log(read_bytes(b.path() / "train_log.csv"));
  std::string line;
  std::getline(log, line);
  std::vector<int> steps;
  while (std::getline(log, line)) steps.push_back(std::stoi(line.substr(0, line.find(','))));
  std::vector<int> expected(12);
  std::iota(expected.begin(), expected.end(), 1);
  EXPECT_EQ(steps, expected);
}

TEST(Train, ResumeWithDifferentQueueSizeRejected) {
  ScratchDir dir("queue_mismatch");
  RunConfig c = small_config(dir.path());
  c.steps = 2;
  train(c, small_dataset());
  c.queue_size = 41;
  TrainOptions opts;
  opts.resume = final_checkpoint_path(c);
  EXPECT_THROW(train(c, small_dataset(), opts), ConfigError);
}

TEST(Train, EmptyDatasetRejected) {
  ScratchDir dir("empty_train");
  EXPECT_THROW(train(small_config(dir.path()), {}), ConfigError);
}

}  // namespace
}  // namespace cast
