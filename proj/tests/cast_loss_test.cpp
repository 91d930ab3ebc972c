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

#include "cast/cast_loss.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support/gradcheck.hpp"
#include "support/masks.hpp"

namespace cast {
namespace {

using testing::gradient_check;
using testing::random_blob_mask;
using testing::random_image;
using testing::random_tensor;
using testing::relative_error;

EncoderConfig toy_encoder() {
  EncoderConfig cfg;
  cfg.input_size = 16;
  cfg.widths = {4, 6};
  cfg.grid_size = 4;
  cfg.embedding_dim = 5;
  return cfg;
}

template <typename S>
ParameterSet<S> with_values(const ParameterSet<S>& layout, const std::vector<ad::Tensor<S>>& values) {
  ParameterSet<S> out;
  for (std::size_t i = 0; i < layout.size(); ++i) out.add(layout.names()[i], values[i]);
  return out;
}

Eigen::VectorXf random_unit(Eigen::Index dim, std::mt19937_64& rng) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  Eigen::VectorXf v(dim);
  for (auto& x : v) x = n(rng);
  return v / v.norm();
}

template <typename S>
ad::Tensor<S> unit_tensor(Eigen::Index dim, std::mt19937_64& rng) {
  return ad::Tensor<S>({dim}, random_unit(dim, rng).cast<S>());
}

// ---------------------------------------------------------------------------
// mask_key

TEST(MaskKey, OnesKeepZerosClear) {
  std::mt19937_64 rng(1);
  const auto x = random_tensor<float>({3, 6, 5}, rng);
  EXPECT_EQ(mask_key(x, SaliencyMask::ones(6, 5)).values(), x.values());
  EXPECT_TRUE(mask_key(x, SaliencyMask::zeros(6, 5)).values().isZero(0.0f));
}

TEST(MaskKey, CheckerboardZeroesExactlyTheMaskedHalf) {
  std::mt19937_64 rng(2);
  const auto x = testing::random_away_from_zero<float>({3, 8, 8}, rng);
  SaliencyMask m = SaliencyMask::zeros(8, 8);
  for (int i = 0; i < 8; ++i) {
    for (int j = 0; j < 8; ++j) m.bits(i, j) = (i + j) % 2;
  }
  const auto y = mask_key(x, m);
  int zeros = 0;
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < 8; ++i) {
      for (int j = 0; j < 8; ++j) {
        const float v = y[(c * 8 + i) * 8 + j];
        if (v == 0.0f) ++zeros;
        EXPECT_EQ(v, m.bits(i, j) ? x[(c * 8 + i) * 8 + j] : 0.0f);
      }
    }
  }
  EXPECT_EQ(zeros, 3 * 32);
}

TEST(MaskKey, ShapeMismatchRejected) {
  EXPECT_THROW(mask_key(ad::TensorF::zeros({3, 4, 4}), SaliencyMask::ones(4, 5)), ad::ShapeError);
}

// ---------------------------------------------------------------------------
// attention_target

TEST(AttentionTarget, BlockFractions) {
  SaliencyMask m = SaliencyMask::zeros(8, 8);
  m.bits.block(0, 0, 4, 4).setConstant(1);  // whole top-left cell
  m.bits(4, 4) = 1;                         // one pixel of the bottom-right cell
  const auto t = attention_target<double>(m, 2);
  EXPECT_EQ(t.shape(), (ad::Shape{2, 2}));
  EXPECT_DOUBLE_EQ(t[0], 1.0);
  EXPECT_DOUBLE_EQ(t[1], 0.0);
  EXPECT_DOUBLE_EQ(t[2], 0.0);
  EXPECT_DOUBLE_EQ(t[3], 1.0 / 16.0);
}

TEST(AttentionTarget, PreservesMassAndRange) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const SaliencyMask m = random_blob_mask(64, 64, rng);
    const auto t = attention_target<double>(m, 8);
    EXPECT_NEAR(t.values().sum() * 64.0, static_cast<double>(m.area()), 1e-9);
    EXPECT_GE(t.values().minCoeff(), 0.0);
    EXPECT_LE(t.values().maxCoeff(), 1.0);
  }
}

TEST(AttentionTarget, NonTilingGridRejected) {
  EXPECT_THROW(attention_target<float>(SaliencyMask::ones(10, 10), 4), ad::ShapeError);
}

// ---------------------------------------------------------------------------
// grad_cam

TEST(GradCam, MeanPooledSingleChannelClosedForm) {
  // q = [mean(relu(x))], so d(q.k)/dA = k / HW everywhere: alpha = k and
  // G = relu(k * A) = k * A.
  std::mt19937_64 rng(4);
  const auto x = random_tensor<double>({1, 5, 5}, rng);
  const auto leaf = ad::TensorD(x.shape(), x.values(), true);
  const auto acts = ad::relu(leaf);
  const auto q = ad::reshape(ad::global_avg_pool(ad::reshape(acts, {1, 1, 5, 5})), {1});
  const double k = 0.7;
  const auto cam = grad_cam(q, ad::TensorD::vector({k}), acts);
  ASSERT_EQ(cam.alpha.numel(), 1);
  EXPECT_NEAR(cam.alpha[0], k, 1e-12);
  for (int i = 0; i < 25; ++i) EXPECT_NEAR(cam.map[i], k * std::max(0.0, x[i]), 1e-12);
}

/// q = l2_normalize(W mean(A) + b) built directly from a free activation map.
template <typename S>
ad::Tensor<S> head_from_acts(const ad::Tensor<S>& acts, const ad::Tensor<S>& w, const ad::Tensor<S>& b) {
  const ad::Index c = acts.dim(0), g = acts.dim(1);
  const auto pooled = ad::global_avg_pool(ad::reshape(acts, {1, c, g, g}));
  const auto z = ad::add(ad::reshape(ad::matmul(w, ad::reshape(pooled, {c, 1})), {w.dim(0)}), b);
  return ad::l2_normalize(z, S(1e-12));
}

TEST(GradCam, AlphaMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const auto acts0 = random_tensor<double>({6, 4, 4}, rng, 0.0, 1.0);
    const auto w = random_tensor<double>({5, 6}, rng);
    const auto b = random_tensor<double>({5}, rng);
    const auto k_m = unit_tensor<double>(5, rng);
    const auto acts = ad::TensorD(acts0.shape(), acts0.values(), true);
    const auto cam = grad_cam(head_from_acts(acts, w, b), k_m, acts);

    Eigen::VectorXd numeric = Eigen::VectorXd::Zero(6);
    const double h = 1e-4;
    for (ad::Index i = 0; i < acts0.numel(); ++i) {
      auto plus = acts0.values(), minus = acts0.values();
      plus(i) += h;
      minus(i) -= h;
      const double fp = ad::dot(head_from_acts(ad::TensorD(acts0.shape(), plus), w, b), k_m).item();
      const double fm = ad::dot(head_from_acts(ad::TensorD(acts0.shape(), minus), w, b), k_m).item();
      numeric(i / 16) += (fp - fm) / (2 * h);
    }
    EXPECT_LE(relative_error(cam.alpha.values(), numeric), 1e-2);
    for (int c = 0; c < 6; ++c) EXPECT_NEAR(cam.alpha[c], numeric(c), 1e-2 * std::max(1.0, std::abs(numeric(c))));
  }
}

TEST(GradCam, ScalingKeyScalesAlphaAndMapButNotArgmax) {
  std::mt19937_64 rng(6);
  const auto cfg = toy_encoder();
  const auto params = init_params<double>(cfg, 7);
  const auto image = random_tensor<double>({3, 16, 16}, rng);
  const auto k_m = unit_tensor<double>(5, rng);
  const auto out = forward(cfg, params, image);
  const auto base = grad_cam(out.embedding, k_m, out.conv5_acts);
  for (double c : {0.5, 2.0, 7.0}) {
    const auto scaled = grad_cam(out.embedding, ad::scale(k_m, c), out.conv5_acts);
    for (ad::Index i = 0; i < base.alpha.numel(); ++i) EXPECT_NEAR(scaled.alpha[i], c * base.alpha[i], 1e-12);
    for (ad::Index i = 0; i < base.map.numel(); ++i) EXPECT_NEAR(scaled.map[i], c * base.map[i], 1e-12);
    Eigen::Index a0 = 0, a1 = 0;
    base.map.values().maxCoeff(&a0);
    scaled.map.values().maxCoeff(&a1);
    EXPECT_EQ(a0, a1);
  }
}

TEST(GradCam, MapIsNonNegative) {
  std::mt19937_64 rng(8);
  const auto cfg = toy_encoder();
  for (int trial = 0; trial < 20; ++trial) {
    const auto params = init_params<float>(cfg, static_cast<std::uint64_t>(trial));
    const auto out = forward(cfg, params, random_tensor<float>({3, 16, 16}, rng));
    const auto cam = grad_cam(out.embedding, unit_tensor<float>(5, rng), out.conv5_acts);
    EXPECT_GE(cam.map.values().minCoeff(), 0.0f);
    EXPECT_TRUE(cam.map.requires_grad());
  }
}

TEST(GradCam, DisconnectedActivationsRejected) {
  std::mt19937_64 rng(9);
  const auto acts = ad::TensorF(ad::Shape{2, 3, 3}, random_tensor<float>({2, 3, 3}, rng).values(), true);
  const auto q = ad::TensorF(ad::Shape{4}, random_tensor<float>({4}, rng).values(), true);
  EXPECT_THROW(grad_cam(q, unit_tensor<float>(4, rng), acts), ad::GraphError);
}

// ---------------------------------------------------------------------------
// attention_loss

TEST(AttentionLoss, AlignedDisjointAndScaled) {
  const auto target = ad::TensorF::from({2, 2}, {1, 0.5f, 0, 0});
  EXPECT_NEAR(attention_loss(target, target, 1e-6f).item(), 0.0f, 1e-6);
  EXPECT_NEAR(attention_loss(ad::TensorF::from({2, 2}, {0, 0, 3, 1}), target, 1e-6f).item(), 1.0f, 1e-6);
  EXPECT_NEAR(attention_loss(ad::scale(target, 0.5f), target, 1e-6f).item(), 0.0f, 1e-6);
  EXPECT_NEAR(attention_loss(ad::TensorF::zeros({2, 2}), target, 1e-6f).item(), 1.0f, 1e-6);
}

TEST(AttentionLoss, StaysInUnitIntervalForNonNegativeInputs) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 1000; ++trial) {
    auto g = random_tensor<float>({8, 8}, rng, -1.0, 1.0);
    g = ad::relu(g);
    const auto t = random_tensor<float>({8, 8}, rng, 0.0, 1.0);
    const float l = attention_loss(g, t, 1e-6f).item();
    EXPECT_GE(l, -1e-6f);
    EXPECT_LE(l, 1.0f + 1e-6f);
  }
}

TEST(AttentionLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto t = random_tensor<double>({4, 4}, rng, 0.0, 1.0);
    const testing::ScalarFn<double> f = [&](const std::vector<ad::TensorD>& in) {
      return attention_loss(in[0], t, 1e-6);
    };
    EXPECT_LE(gradient_check(f, {random_tensor<double>({4, 4}, rng, 0.1, 1.0)}), 1e-3);
  }
}

TEST(AttentionLoss, ShapeMismatchRejected) {
  EXPECT_THROW(attention_loss(ad::TensorF::zeros({2, 2}), ad::TensorF::zeros({4}), 1e-6f), ad::ShapeError);
}

// ---------------------------------------------------------------------------
// Full loss gradients through alpha

struct ToyProblem {
  EncoderConfig cfg = toy_encoder();
  ParameterSet<double> params;
  ParameterSet<double> key_params;
  std::vector<PreparedSample<double>> samples;
  ad::TensorD negatives;
};

ToyProblem toy_problem(std::uint64_t seed, int batch) {
  std::mt19937_64 rng(seed);
  ToyProblem p;
  p.params = init_params<double>(p.cfg, seed, false);
  p.key_params = init_params<double>(p.cfg, seed + 1, false);
  for (int i = 0; i < batch; ++i) {
    SaliencyMask m = random_blob_mask(16, 16, rng);
    PreparedSample<double> s;
    s.query = random_tensor<double>({3, 16, 16}, rng);
    s.key = random_tensor<double>({3, 16, 16}, rng);
    s.masked_key = mask_key(s.key, m);
    s.target = attention_target<double>(m, 4);
    p.samples.push_back(s);
  }
  Eigen::VectorXd negs(6 * 5);
  for (int i = 0; i < 6; ++i) negs.segment(i * 5, 5) = random_unit(5, rng).cast<double>();
  p.negatives = ad::TensorD({6, 5}, negs);
  return p;
}

TEST(CastLossGradient, AttentionLossThroughAlphaMatchesFiniteDifferences) {
  int checked = 0;
  for (std::uint64_t seed = 1; seed <= 12 && checked < 5; ++seed) {
    const ToyProblem p = toy_problem(seed, 1);
    LossConfig loss;
    const testing::ScalarFn<double> f = [&](const std::vector<ad::TensorD>& in) {
      const auto params = with_values(p.params, in);
      const auto out = forward(p.cfg, params, p.samples[0].query);
      ad::TensorD k_m;
      {
        ad::NoGradGuard no_grad;
        k_m = forward(p.cfg, p.key_params, p.samples[0].masked_key).embedding;
      }
      const auto cam = grad_cam(out.embedding, k_m, out.conv5_acts, true);
      return attention_loss(cam.map, p.samples[0].target, static_cast<double>(loss.eps));
    };
    // A dead Grad-CAM map has zero gradient; such draws check nothing.
    if (f(p.params.tensors()).item() > 1.0 - 1e-9) continue;
    ++checked;
    EXPECT_LE(gradient_check(f, p.params.tensors(), 1e-5), 1e-2) << "seed " << seed;
  }
  EXPECT_GE(checked, 3);
}

TEST(CastLossGradient, TotalLossMatchesFiniteDifferences) {
  const ToyProblem p = toy_problem(4, 2);
  LossConfig loss;
  const testing::ScalarFn<double> f = [&](const std::vector<ad::TensorD>& in) {
    return batch_losses<double>(p.cfg, with_values(p.params, in), p.key_params, p.negatives, p.samples, loss).total;
  };
  EXPECT_LE(gradient_check(f, p.params.tensors(), 1e-5), 1e-2);
}

TEST(CastLossGradient, FirstOrderSwitchDropsTheAlphaPath) {
  const ToyProblem p = toy_problem(5, 1);
  LossConfig exact, approx;
  approx.second_order = false;
  const auto tracked = p.params.copy(true);
  const auto exact_loss = batch_losses<double>(p.cfg, tracked, p.key_params, p.negatives, p.samples, exact).attention;
  const auto approx_loss =
      batch_losses<double>(p.cfg, tracked, p.key_params, p.negatives, p.samples, approx).attention;
  EXPECT_DOUBLE_EQ(exact_loss.item(), approx_loss.item());
  // The head only influences the map through alpha.
  EXPECT_EQ(ad::grad(exact_loss, {tracked.at("head.weight")})[0].numel(), 30);
  EXPECT_THROW(ad::grad(approx_loss, {tracked.at("head.weight")}), ad::GraphError);
  const std::vector<ad::TensorD> convs(tracked.tensors().begin(), tracked.tensors().begin() + 4);
  const auto g_exact = ad::grad(exact_loss, convs);
  const auto g_approx = ad::grad(approx_loss, convs);
  double diff = 0;
  for (std::size_t i = 0; i < convs.size(); ++i) diff += (g_exact[i].values() - g_approx[i].values()).norm();
  EXPECT_GT(diff, 1e-6);
}

TEST(BatchLosses, TotalIsContrastivePlusLambdaTimesAttention) {
  std::mt19937_64 rng(12);
  const auto cfg = EncoderConfig{};
  const auto params = init_params<float>(cfg, 3);
  const auto key = init_params<float>(cfg, 4, false);
  AugmentConfig aug;
  std::vector<PreparedSample<float>> samples;
  for (int i = 0; i < 4; ++i) {
    const ViewPair v = make_view_pair(random_image(64, 64, rng), random_blob_mask(64, 64, rng), aug, rng);
    samples.push_back(prepare_sample<float>(v, cfg, SupervisionMode::kFullQuery));
  }
  NegativeQueue queue(16, cfg.embedding_dim);
  for (int i = 0; i < 16; ++i) queue.enqueue(random_unit(cfg.embedding_dim, rng));
  LossConfig loss;
  ASSERT_FLOAT_EQ(loss.lambda, 3.0f);
  const auto l = batch_losses<float>(cfg, params, key, queue.negatives(), samples, loss);
  EXPECT_NEAR(l.total.item(), l.contrastive.item() + 3.0f * l.attention.item(), 1e-6);
  EXPECT_GT(l.attention.item(), 0.0f);
  EXPECT_EQ(l.masked_keys.size(), 4u);
}

TEST(BatchLosses, ZeroLambdaSkipsAttentionBranch) {
  const ToyProblem p = toy_problem(6, 3);
  LossConfig loss;
  loss.lambda = 0.0f;
  const auto l = batch_losses<double>(p.cfg, p.params, p.key_params, p.negatives, p.samples, loss);
  EXPECT_TRUE(l.masked_keys.empty());
  EXPECT_EQ(l.attention.item(), 0.0);
  EXPECT_EQ(l.total.item(), l.contrastive.item());
}

TEST(PrepareSample, IntersectionModeUsesSharedMask) {
  std::mt19937_64 rng(13);
  const auto cfg = EncoderConfig{};
  const ViewPair v = make_view_pair(random_image(64, 64, rng), random_blob_mask(64, 64, rng), AugmentConfig{}, rng);
  const auto full = prepare_sample<float>(v, cfg, SupervisionMode::kFullQuery);
  const auto shared = prepare_sample<float>(v, cfg, SupervisionMode::kIntersection);
  EXPECT_EQ(full.target.values(), attention_target<float>(v.query_mask, 8).values());
  EXPECT_EQ(shared.target.values(), attention_target<float>(v.query_mask_shared, 8).values());
  EXPECT_EQ(full.masked_key.values(), mask_key(to_tensor<float>(v.key), v.key_mask).values());
}

TEST(SupervisionMode, ParseRoundTrip) {
  for (auto m : {SupervisionMode::kFullQuery, SupervisionMode::kIntersection}) {
    EXPECT_EQ(parse_supervision_mode(to_string(m)), m);
  }
  EXPECT_THROW(parse_supervision_mode("pixels"), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// cast_step

std::vector<TrainingExample> random_batch(int n, std::mt19937_64& rng) {
  std::vector<TrainingExample> batch;
  for (int i = 0; i < n; ++i) batch.push_back({random_image(64, 64, rng), random_blob_mask(64, 64, rng)});
  return batch;
}

TrainState warm_state(std::uint64_t seed) {
  TrainState state = TrainState::init(EncoderConfig{}, 32, 0.99f, seed);
  std::mt19937_64 rng(seed + 100);
  for (int i = 0; i < 20; ++i) state.queue.enqueue(random_unit(state.queue.dim(), rng));
  return state;
}

/// Plain momentum-contrast step written against the primitives, with no
/// attention machinery at all.
std::vector<ad::TensorF> reference_moco_step(TrainState& state, std::span<const TrainingExample> batch,
                                             const StepConfig& config, Rng& rng) {
  auto& query = state.encoders.query;
  const auto negatives = state.queue.negatives();
  std::vector<ad::TensorF> keys;
  ad::TensorF sum;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const ViewPair v = make_view_pair(batch[i].image, batch[i].mask, config.augment, rng);
    const auto q = forward(state.encoder, query, to_tensor<float>(v.query)).embedding;
    ad::TensorF k;
    {
      ad::NoGradGuard no_grad;
      k = forward(state.encoder, state.encoders.key, to_tensor<float>(v.key)).embedding;
    }
    keys.push_back(k);
    const auto l = info_nce(q, k, negatives, config.loss.tau);
    sum = i == 0 ? l : ad::add(sum, l);
  }
  const auto loss = ad::scale(sum, 1.0f / static_cast<float>(batch.size()));
  auto grads = ad::grad(loss, query.tensors());
  ad::sgd_step<float>(query.tensors(), grads, state.optimizer, config.sgd);
  momentum_update(state.encoders.key, query, state.encoders.momentum);
  for (const auto& k : keys) state.queue.enqueue(k.values());
  return grads;
}

TEST(CastStep, BaselineReducesToPlainMomentumContrast) {
  std::mt19937_64 data(14);
  StepConfig config;
  config.loss.lambda = 0.0f;
  config.augment.constraint.phi = 0.0;
  TrainState cast_state = warm_state(1), ref_state = warm_state(1);
  Rng cast_rng(55), ref_rng(55);
  for (int step = 0; step < 3; ++step) {
    const auto batch = random_batch(4, data);
    const StepResult r = cast_step(cast_state, batch, config, cast_rng);
    const auto ref_grads = reference_moco_step(ref_state, batch, config, ref_rng);
    ASSERT_EQ(r.grads.size(), ref_grads.size());
    for (std::size_t i = 0; i < ref_grads.size(); ++i) {
      EXPECT_TRUE(r.grads[i].values() == ref_grads[i].values()) << "step " << step << " param " << i;
    }
    EXPECT_TRUE(cast_state.encoders.query.bit_equal(ref_state.encoders.query));
    EXPECT_TRUE(cast_state.encoders.key.bit_equal(ref_state.encoders.key));
    EXPECT_EQ(cast_state.queue.contents(), ref_state.queue.contents());
    EXPECT_EQ(r.attention, 0.0f);
    EXPECT_EQ(r.masked_keys.rows(), 0);
  }
}

TEST(CastStep, KeyEncoderOnlyMovesByMomentum) {
  std::mt19937_64 data(15);
  TrainState state = warm_state(2);
  const auto key_before = state.encoders.key.copy(false);
  StepConfig config;
  Rng rng(3);
  cast_step(state, random_batch(3, data), config, rng);
  const float m = state.encoders.momentum;
  for (std::size_t i = 0; i < state.encoders.key.size(); ++i) {
    const auto& k = state.encoders.key[i];
    EXPECT_FALSE(k.requires_grad());
    const auto& kb = key_before[i].values();
    const auto& q = state.encoders.query[i].values();
    for (ad::Index j = 0; j < kb.size(); ++j) EXPECT_EQ(k[j], m * kb(j) + (1.0f - m) * q(j));
  }
  // No loss built from key parameters can reach them.
  const auto out = forward(state.encoder, state.encoders.query, ad::TensorF::zeros({3, 64, 64}));
  const auto loss = ad::sum(out.embedding);
  EXPECT_THROW(ad::grad(loss, {state.encoders.key[0]}), ad::GraphError);
}

TEST(CastStep, MaskedKeysNeverEnterTheQueue) {
  std::mt19937_64 data(16);
  TrainState state = warm_state(3);
  StepConfig config;
  Rng rng(4);
  for (int step = 0; step < 4; ++step) {
    const StepResult r = cast_step(state, random_batch(3, data), config, rng);
    ASSERT_EQ(r.masked_keys.rows(), 3);
    const RowMatrixF contents = state.queue.contents();
    EXPECT_EQ(contents.bottomRows(3), r.enqueued);
    for (Eigen::Index i = 0; i < contents.rows(); ++i) {
      for (Eigen::Index j = 0; j < r.masked_keys.rows(); ++j) {
        EXPECT_FALSE(contents.row(i) == r.masked_keys.row(j));
      }
    }
  }
}

TEST(CastStep, GradientsMatchFiniteDifferencesOnSampledWeights) {
  // The step's gradient is compared against the same loss rebuilt in double
  // for ten sampled weights.
  std::mt19937_64 data(17);
  TrainState state = warm_state(4);
  StepConfig config;
  const auto batch = random_batch(2, data);
  const auto query_before = state.encoders.query.copy(false);
  const auto key_before = state.encoders.key.copy(false);
  const auto negatives = state.queue.negatives();
  Rng rng(5), replay(5);
  const StepResult r = cast_step(state, batch, config, rng);

  std::vector<PreparedSample<double>> samples;
  for (const auto& ex : batch) {
    samples.push_back(prepare_sample<double>(make_view_pair(ex.image, ex.mask, config.augment, replay),
                                             state.encoder, config.loss.mode));
  }
  auto to_double = [](const ParameterSet<float>& p) {
    ParameterSet<double> out;
    for (std::size_t i = 0; i < p.size(); ++i) out.add(p.names()[i], ad::TensorD(p[i].shape(), p[i].values().cast<double>()));
    return out;
  };
  const auto qd = to_double(query_before), kd = to_double(key_before);
  const ad::TensorD negd(negatives.shape(), negatives.values().cast<double>());
  auto total = [&](const ParameterSet<double>& q) {
    return batch_losses<double>(state.encoder, q, kd, negd, samples, config.loss).total.item();
  };

  std::mt19937_64 pick(6);
  Eigen::VectorXd analytic(10), numeric(10);
  for (int s = 0; s < 10; ++s) {
    const auto t = std::uniform_int_distribution<std::size_t>(0, qd.size() - 1)(pick);
    const auto j = std::uniform_int_distribution<ad::Index>(0, qd[t].numel() - 1)(pick);
    const double h = 1e-4;
    auto plus = qd.copy(false), minus = qd.copy(false);
    plus[t].mutable_values()(j) += h;
    minus[t].mutable_values()(j) -= h;
    numeric(s) = (total(plus) - total(minus)) / (2 * h);
    analytic(s) = r.grads[t][j];
  }
  EXPECT_LE(relative_error(analytic, numeric), 1e-2) << "analytic " << analytic.transpose() << "\nnumeric "
                                                     << numeric.transpose();
}

TEST(CastStep, DegenerateMasksAreSkippedAndCounted) {
  std::mt19937_64 data(18);
  TrainState state = warm_state(5);
  auto batch = random_batch(3, data);
  batch[1].mask = SaliencyMask::zeros(64, 64);
  Rng rng(6);
  const StepResult r = cast_step(state, batch, StepConfig{}, rng);
  EXPECT_EQ(r.used, 2);
  EXPECT_EQ(r.skipped, 1);
  EXPECT_EQ(state.skipped, 1);
  EXPECT_EQ(r.enqueued.rows(), 2);
}

TEST(CastStep, EmptyQueueFirstStepHasNoContrastiveTerm) {
  std::mt19937_64 data(19);
  TrainState state = TrainState::init(EncoderConfig{}, 8, 0.99f, 6);
  Rng rng(7);
  const StepResult r = cast_step(state, random_batch(2, data), StepConfig{}, rng);
  EXPECT_EQ(r.contrastive, 0.0f);
  EXPECT_GT(r.attention, 0.0f);
  EXPECT_EQ(state.queue.fill(), 2);
  EXPECT_EQ(state.step, 1);
}

TEST(CastStep, RejectsMismatchedCropSize) {
  std::mt19937_64 data(20);
  TrainState state = warm_state(6);
  StepConfig config;
  config.augment.out_size = 32;
  Rng rng(1);
  EXPECT_THROW(cast_step(state, random_batch(1, data), config, rng), std::invalid_argument);
}

}  // namespace
}  // namespace cast
