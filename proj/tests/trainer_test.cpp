// Copyright 2026 The ddistill Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "ddistill/data.hpp"
#include "ddistill/trainer.hpp"
#include "test_support.hpp"

namespace ddistill {
namespace {

DenoiserConfig tiny(int classes = 4) {
  DenoiserConfig c;
  c.layers = 3, c.hidden = 8, c.mlp = 16, c.heads = 2, c.patch = 4;
  c.height = c.width = 8, c.channels = 3, c.num_classes = classes, c.max_steps = 50;
  return c;
}

LabeledImageBatch toy_data(std::size_t n = 16, std::uint64_t seed = 1) { return make_shapes_dataset(n, seed, 8); }

template <class T>
void perturb(ParamStore<T>& p, Rng& rng, double scale) {
  for (auto& e : p.entries())
    for (std::size_t i = 0; i < e.value.size(); ++i) e.value[i] += static_cast<T>(scale * rng.normal());
}

TEST(DiffusionLoss, MatchesIndependentReconstruction) {
  const auto sched = build_schedule(ScheduleKind::linear, 50, 1e-3, 0.2);
  Denoiser<double> m(tiny());
  Rng init(1);
  m.initialize(init);
  perturb(m.params(), init, 0.1);
  const auto data = toy_data(5);
  Rng rng(42), replay(42);
  const double loss = diffusion_loss(m, data, sched, rng, nullptr);
  // replay the draws: step, then the noise of the item
  const std::size_t numel = data.image_numel();
  std::vector<double> xt(5 * numel), eps(5 * numel), eps_hat(5 * numel), t(5);
  for (int i = 0; i < 5; ++i) {
    t[i] = 1 + static_cast<double>(replay.below(50));
    const double ab = sched.alpha_bar(static_cast<int>(t[i]));
    for (std::size_t j = 0; j < numel; ++j) {
      eps[i * numel + j] = replay.normal();
      xt[i * numel + j] = std::sqrt(ab) * data.image(i)[j] + std::sqrt(1 - ab) * eps[i * numel + j];
    }
  }
  m.predict(xt, t, data.labels, eps_hat);
  double expect = 0.0;
  for (std::size_t k = 0; k < eps.size(); ++k) expect += (eps_hat[k] - eps[k]) * (eps_hat[k] - eps[k]);
  EXPECT_NEAR(loss, expect / 5, 1e-9 * expect);
}

TEST(DiffusionLoss, ZeroHeadLossIsThePixelCount) {
  const auto sched = build_schedule(ScheduleKind::linear, 50, 1e-3, 0.2);
  Denoiser<float> m(tiny());
  Rng init(2);
  m.initialize(init);
  const auto data = toy_data(256);
  Rng rng(3);
  const double loss = diffusion_loss(m, data, sched, rng, nullptr);
  EXPECT_NEAR(loss, 192.0, 0.05 * 192.0);
}

TEST(DiffusionLoss, ExpectationIsSeedInvariant) {
  const auto sched = build_schedule(ScheduleKind::linear, 50, 1e-3, 0.2);
  Denoiser<float> m(tiny());
  Rng init(8);
  m.initialize(init);
  perturb(m.params(), init, 0.05);
  const auto data = toy_data(16);
  auto estimate = [&](std::uint64_t seed) {
    Rng rng(seed);
    const int n = 10000;
    double sum = 0, sq = 0;
    for (int i = 0; i < n; ++i) {
      const std::size_t idx[1] = {static_cast<std::size_t>(i % 16)};
      const double l = diffusion_loss(m, data.subset(idx), sched, rng, nullptr);
      sum += l, sq += l * l;
    }
    const double mean = sum / n;
    return std::pair{mean, std::sqrt((sq / n - mean * mean) / n)};
  };
  const auto [a, se_a] = estimate(100);
  const auto [b, se_b] = estimate(200);
  EXPECT_LT(std::abs(a - b), 3 * std::sqrt(se_a * se_a + se_b * se_b));
}

TEST(DiffusionLoss, GradientMatchesFiniteDifferences) {
  const auto sched = build_schedule(ScheduleKind::cosine, 50, 1e-4, 0.02);
  Denoiser<double> m(tiny());
  Rng init(4);
  m.initialize(init);
  perturb(m.params(), init, 0.2);
  const auto data = toy_data(3);
  auto grads = m.params().zeros_like();
  Rng r0(9);
  diffusion_loss(m, data, sched, r0, &grads, 0.5);
  auto loss = [&] {
    Rng r(9);
    return 0.5 * diffusion_loss(m, data, sched, r, nullptr);
  };
  for (const char* name : {"head.weight", "blocks.1.attn.qkv.weight", "patch_embed.weight", "time_embed.bias",
                           "final_norm.weight", "label_embed"}) {
    auto& t = m.params().get(name);
    std::vector<double> x(t.data(), t.data() + t.size());
    const std::vector<double> g(grads.get(name).data(), grads.get(name).data() + t.size());
    Rng probe(17);
    const double err = testing::max_directional_error(
        x, g,
        [&] {
          std::copy(x.begin(), x.end(), t.data());
          return loss();
        },
        probe, 4);
    std::copy(x.begin(), x.end(), t.data());
    EXPECT_LT(err, 1e-4) << name;
  }
}

TEST(DiffusionLoss, FullLabelDropoutTouchesOnlyTheNullSlot) {
  const auto sched = build_schedule(ScheduleKind::linear, 50, 1e-3, 0.2);
  Denoiser<double> m(tiny());
  Rng init(5);
  m.initialize(init);
  perturb(m.params(), init, 0.1);
  auto grads = m.params().zeros_like();
  Rng rng(6);
  diffusion_loss(m, toy_data(8), sched, rng, &grads, 1.0, 1.0);
  const auto& g = grads.get("label_embed");
  const int d = m.config().hidden, c = m.config().num_classes;
  double null_norm = 0.0;
  for (int k = 0; k <= c; ++k)
    for (int j = 0; j < d; ++j) {
      if (k < c) EXPECT_EQ(g[k * d + j], 0.0);
      else null_norm += std::abs(g[k * d + j]);
    }
  EXPECT_GT(null_norm, 0.0);
}

TEST(DiffusionLoss, RejectsEmptyAndMismatchedBatches) {
  const auto sched = build_schedule(ScheduleKind::linear, 50, 1e-3, 0.2);
  Denoiser<float> m(tiny());
  Rng rng(7);
  LabeledImageBatch empty = toy_data(1).empty_like();
  EXPECT_THROW(diffusion_loss(m, empty, sched, rng, nullptr), ConfigError);
  EXPECT_THROW(diffusion_loss(m, make_shapes_dataset(2, 1, 16), sched, rng, nullptr), ConfigError);
}

// ---- optimizer

ParamStore<double> single(double v) {
  ParamStore<double> p;
  p.add("w", {1}, v);
  return p;
}

TEST(AdamW, FirstStepMovesByTheLearningRate) {
  TrainConfig cfg;
  cfg.lr = 0.1, cfg.weight_decay = 0.0;
  auto p = single(1.0);
  auto g = single(0.5);
  auto st = OptimizerState<double>::like(p);
  adamw_step(st, p, g, cfg);
  EXPECT_NEAR(p.get("w")[0], 0.9, 1e-7);
  // second step, recomputed by hand
  g.get("w")[0] = -2.0;
  adamw_step(st, p, g, cfg);
  const double m = cfg.beta1 * (1 - cfg.beta1) * 0.5 + (1 - cfg.beta1) * -2.0;
  const double v = cfg.beta2 * (1 - cfg.beta2) * 0.25 + (1 - cfg.beta2) * 4.0;
  const double mh = m / (1 - cfg.beta1 * cfg.beta1), vh = v / (1 - cfg.beta2 * cfg.beta2);
  const double p1 = 1.0 - 0.1 * 0.5 / (0.5 + cfg.adam_eps);
  EXPECT_NEAR(p.get("w")[0], p1 - 0.1 * mh / (std::sqrt(vh) + cfg.adam_eps), 1e-12);
  EXPECT_EQ(st.step, 2u);
}

TEST(AdamW, ConvergesOnAQuadratic) {
  TrainConfig cfg;
  cfg.lr = 1e-2, cfg.weight_decay = 0.0, cfg.beta1 = 0.9;
  auto p = single(3.0);
  auto g = single(0.0);
  auto st = OptimizerState<double>::like(p);
  const double target = -1.25;
  for (int i = 0; i < 5000; ++i) {
    g.get("w")[0] = 2.0 * (p.get("w")[0] - target);
    adamw_step(st, p, g, cfg);
  }
  EXPECT_NEAR(p.get("w")[0], target, 1e-6);
}

TEST(AdamW, ZeroGradientIsAFixedPointWithoutDecay) {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  auto p = single(0.75);
  const auto g = single(0.0);
  auto st = OptimizerState<double>::like(p);
  for (int i = 0; i < 10; ++i) adamw_step(st, p, g, cfg);
  EXPECT_EQ(p.get("w")[0], 0.75);
}

TEST(AdamW, DecayShrinksMultiplicatively) {
  TrainConfig cfg;
  cfg.lr = 0.01, cfg.weight_decay = 0.5;
  auto p = single(2.0);
  const auto g = single(0.0);
  auto st = OptimizerState<double>::like(p);
  for (int i = 0; i < 3; ++i) adamw_step(st, p, g, cfg);
  EXPECT_NEAR(p.get("w")[0], 2.0 * std::pow(1 - 0.005, 3), 1e-14);
}

TEST(AdamW, NonFiniteGradientThrowsWithoutSideEffects) {
  TrainConfig cfg;
  auto p = single(1.0);
  auto g = single(std::nan(""));
  auto st = OptimizerState<double>::like(p);
  EXPECT_THROW(adamw_step(st, p, g, cfg), NumericError);
  g.get("w")[0] = INFINITY;
  EXPECT_THROW(adamw_step(st, p, g, cfg), NumericError);
  EXPECT_EQ(p.get("w")[0], 1.0);
  EXPECT_EQ(st.step, 0u);
  EXPECT_EQ(st.m.get("w")[0], 0.0);
  ParamStore<double> other;
  other.add("v", {1});
  EXPECT_THROW(adamw_step(st, p, other, cfg), ConfigError);
}

// ---- training loop

TrainConfig quick(long iterations, std::uint64_t seed = 11) {
  TrainConfig c;
  c.lr = 3e-3, c.batch_size = 4, c.iterations = iterations, c.log_every = 1, c.seed = seed;
  return c;
}

TEST(Train, ZeroIterationsIsANoOp) {
  const auto sched = build_schedule(ScheduleKind::linear, 50, 1e-3, 0.2);
  auto cfg = quick(0);
  auto st = TrainState<float>::fresh(tiny(), cfg);
  const auto before = st.model.params();
  const auto log = train(st, toy_data(), cfg, sched);
  EXPECT_TRUE(log.empty());
  EXPECT_EQ(st.iteration, 0);
  EXPECT_EQ(st.model.params().get("blocks.0.attn.qkv.weight").values(), before.get("blocks.0.attn.qkv.weight").values());
}

TEST(Train, RunsAreBitIdenticalAndSeedSensitive) {
  const auto sched = build_schedule(ScheduleKind::linear, 50, 1e-3, 0.2);
  const auto data = toy_data();
  auto run = [&](std::uint64_t seed) {
    auto cfg = quick(5, seed);
    auto st = TrainState<float>::fresh(tiny(), cfg);
    const auto log = train(st, data, cfg, sched);
    return std::pair{st.model.params().get("head.weight").values(), log.back().loss};
  };
  const auto a = run(1), b = run(1), c = run(2);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_NE(a.first, c.first);
}

TEST(Train, ResumedStateReproducesTheUninterruptedRun) {
  const auto sched = build_schedule(ScheduleKind::linear, 50, 1e-3, 0.2);
  const auto data = toy_data();
  auto cfg = quick(6);
  cfg.ema = true, cfg.ema_decay = 0.9;
  auto full = TrainState<float>::fresh(tiny(), cfg);
  train(full, data, cfg, sched);
  auto half_cfg = cfg;
  half_cfg.iterations = 3;
  auto part = TrainState<float>::fresh(tiny(), cfg);
  train(part, data, half_cfg, sched);
  auto resumed = part;  // snapshot, as a checkpoint would hold
  train(resumed, data, cfg, sched);
  EXPECT_EQ(resumed.iteration, 6);
  for (std::size_t k = 0; k < full.model.params().count(); ++k) {
    EXPECT_EQ(resumed.model.params().entries()[k].value.values(), full.model.params().entries()[k].value.values());
    EXPECT_EQ(resumed.ema->entries()[k].value.values(), full.ema->entries()[k].value.values());
  }
}

TEST(Train, EmaFollowsTheRecurrence) {
  const auto sched = build_schedule(ScheduleKind::linear, 50, 1e-3, 0.2);
  auto cfg = quick(1);
  cfg.ema = true, cfg.ema_decay = 0.75;
  auto st = TrainState<float>::fresh(tiny(), cfg);
  const auto p0 = st.model.params().get("patch_embed.weight").values();
  train(st, toy_data(), cfg, sched);
  const auto p1 = st.model.params().get("patch_embed.weight").values();
  const auto& e = st.ema->get("patch_embed.weight");
  for (std::size_t i = 0; i < p0.size(); ++i) EXPECT_NEAR(e[i], 0.75f * p0[i] + 0.25f * p1[i], 1e-7);
  EXPECT_EQ(st.sampling_model().params().get("patch_embed.weight").values(), e.values());
}

TEST(Train, LossDecreasesOnAFixedDataset) {
  const auto sched = build_schedule(ScheduleKind::linear, 50, 1e-3, 0.2);
  auto mc = tiny();
  mc.hidden = 32, mc.mlp = 64, mc.patch = 2;
  auto cfg = quick(200);
  cfg.batch_size = 16, cfg.log_every = 1000;
  auto st = TrainState<float>::fresh(mc, cfg);
  const auto data = toy_data(32);
  auto held_out = [&] {
    Rng r(77);
    return diffusion_loss(st.model, toy_data(256, 9), sched, r, nullptr);
  };
  const double before = held_out();
  train(st, data, cfg, sched);
  EXPECT_LT(held_out(), 0.7 * before);
}

TEST(Train, HooksFireOnSchedule) {
  const auto sched = build_schedule(ScheduleKind::linear, 50, 1e-3, 0.2);
  auto cfg = quick(7);
  cfg.fid_every = 3, cfg.checkpoint_every = 2, cfg.log_every = 100;
  auto st = TrainState<float>::fresh(tiny(), cfg);
  std::vector<long> fid_at, ckpt_at;
  TrainHooks<float> hooks;
  hooks.fid = [&](long it, const Denoiser<float>&) {
    fid_at.push_back(it);
    return static_cast<double>(it);
  };
  hooks.checkpoint = [&](const TrainState<float>& s) { ckpt_at.push_back(s.iteration); };
  const auto log = train(st, toy_data(), cfg, sched, hooks);
  EXPECT_EQ(fid_at, (std::vector<long>{0, 3, 6, 7}));
  EXPECT_EQ(ckpt_at, (std::vector<long>{2, 4, 6}));
  ASSERT_FALSE(log.empty());
  EXPECT_EQ(log.back().iteration, 7);
  EXPECT_EQ(log.back().fid, 7.0);
  EXPECT_FALSE(std::isnan(log.front().loss));
}

TEST(Train, RejectsBadInputs) {
  const auto sched = build_schedule(ScheduleKind::linear, 100, 1e-3, 0.2);
  auto cfg = quick(1);
  auto st = TrainState<float>::fresh(tiny(), cfg);
  EXPECT_THROW(train(st, toy_data(), cfg, sched), ConfigError);  // 100 steps > max_steps 50
  const auto ok = build_schedule(ScheduleKind::linear, 50, 1e-3, 0.2);
  EXPECT_THROW(train(st, toy_data().empty_like(), cfg, ok), DataError);
  auto bad = cfg;
  bad.lr = -1;
  EXPECT_THROW(train(st, toy_data(), bad, ok), ConfigError);
  auto labels = toy_data();
  labels.labels[0] = 9;
  EXPECT_THROW(train(st, labels, cfg, ok), DataError);
}

// ---- warm start

TEST(WarmStart, CopiesAllButSkippedTensors) {
  const auto a_cfg = tiny(4);
  auto b_cfg = tiny(10);
  Denoiser<float> src(a_cfg), dst(b_cfg);
  Rng r1(1), r2(2);
  src.initialize(r1);
  dst.initialize(r2);
  const auto keep = dst.params().get("label_embed").values();
  EXPECT_THROW(warm_start(dst.params(), src.params(), ""), DataError);
  warm_start(dst.params(), src.params(), "label_embed");
  EXPECT_EQ(dst.params().get("label_embed").values(), keep);
  EXPECT_EQ(dst.params().get("blocks.2.mlp.fc2.weight").values(), src.params().get("blocks.2.mlp.fc2.weight").values());
  ParamStore<double> partial;
  partial.add("head.weight", {1});
  EXPECT_THROW(warm_start(dst.params(), partial, "label_embed"), DataError);
}

TEST(WarmStart, ConvertsPrecision) {
  Denoiser<float> src(tiny());
  Rng r(3);
  src.initialize(r);
  Denoiser<double> dst(tiny());
  warm_start(dst.params(), src.params(), "");
  EXPECT_EQ(dst.params().get("pos_embed")[5], static_cast<double>(src.params().get("pos_embed")[5]));
}

}  // namespace
}  // namespace ddistill
