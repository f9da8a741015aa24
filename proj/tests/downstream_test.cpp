// Copyright 2026 The ddistill Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>
#include <vector>

#include "ddistill/convnet.hpp"
#include "ddistill/data.hpp"
#include "test_support.hpp"

namespace ddistill {
namespace {

ConvNetConfig small(int epochs = 0) {
  ConvNetConfig c;
  c.blocks = 2, c.width = 16, c.height = c.width_px = 16, c.num_classes = 4;
  c.epochs = epochs, c.batch_size = 8, c.lr = 0.01;
  return c;
}

/// Predicts from a fixed table indexed by a pixel value that encodes the row.
struct TableClassifier {
  std::vector<int> answers;
  std::size_t numel;
  std::vector<int> predict(std::span<const float> pixels, int batch) const {
    std::vector<int> out(batch);
    for (int b = 0; b < batch; ++b) out[b] = answers.at(static_cast<std::size_t>(pixels[b * numel]));
    return out;
  }
};

LabeledImageBatch indexed_set(const std::vector<int>& labels, int classes) {
  LabeledImageBatch d;
  d.channels = 1, d.height = d.width = 2, d.num_classes = classes;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::vector<float> img(4, static_cast<float>(i));
    d.push_back(img, labels[i]);
  }
  return d;
}

TEST(Evaluate, CountingOracles) {
  const std::vector<int> uniform{0, 1, 2, 3, 0, 1, 2, 3};
  const auto test = indexed_set(uniform, 4);
  EXPECT_EQ(evaluate(TableClassifier{std::vector<int>(8, 2), 4}, test), 0.25);
  EXPECT_EQ(evaluate(TableClassifier{uniform, 4}, test), 1.0);
  const std::vector<int> skewed{1, 1, 1, 0, 2, 1, 3, 1, 1, 0};
  EXPECT_DOUBLE_EQ(evaluate(TableClassifier{std::vector<int>(10, 1), 4}, indexed_set(skewed, 4)), 0.6);
  EXPECT_THROW(evaluate(TableClassifier{{}, 4}, test.empty_like()), DataError);
  EXPECT_THROW(evaluate(TableClassifier{uniform, 4}, test, 0), ConfigError);
}

TEST(Evaluate, InvariantToBatchPartitioning) {
  auto net = ConvNet<float>(small());
  Rng rng(1);
  net.initialize(rng);
  const auto test = make_shapes_dataset(37, 2, 16);
  const double ref = evaluate(net, test);
  for (std::size_t b : {1, 2, 5, 36, 37, 100}) EXPECT_EQ(evaluate(net, test, b), ref) << b;
}

TEST(TrainClassifier, ZeroEpochsReturnsTheSeededInitialization) {
  const auto data = make_shapes_dataset(4, 1, 16);
  const auto net = train_classifier(data, small(0), 5);
  ConvNet<float> ref(small(0));
  Rng init = seed_substream(5, "classifier.init", 0);
  ref.initialize(init);
  for (std::size_t k = 0; k < ref.params().count(); ++k)
    EXPECT_EQ(net.params().entries()[k].value.values(), ref.params().entries()[k].value.values());
}

TEST(TrainClassifier, MemorizesATinySeparableSet) {
  const auto data = make_shapes_dataset(16, 3, 16);
  auto cfg = small(60);
  const auto net = train_classifier(data, cfg, 1);
  EXPECT_GE(evaluate(net, data), 0.99);
}

TEST(TrainClassifier, DeterministicPerSeed) {
  const auto data = make_shapes_dataset(12, 4, 16);
  for (bool aug : {false, true}) {
    auto cfg = small(3);
    cfg.augment = aug;
    const auto a = train_classifier(data, cfg, 9), b = train_classifier(data, cfg, 9),
               c = train_classifier(data, cfg, 10);
    EXPECT_EQ(a.params().fingerprint(), b.params().fingerprint());
    EXPECT_NE(a.params().fingerprint(), c.params().fingerprint());
  }
}

TEST(TrainClassifier, RejectsBadData) {
  const auto data = make_shapes_dataset(4, 1, 16);
  EXPECT_THROW(train_classifier(data.empty_like(), small(1), 0), DataError);
  auto bad = data;
  bad.labels[2] = 4;
  EXPECT_THROW(train_classifier(bad, small(1), 0), DataError);
  EXPECT_THROW(train_classifier(make_shapes_dataset(4, 1, 8), small(1), 0), DataError);
  auto cfg = small(1);
  cfg.blocks = 5;  // 16 px cannot be pooled five times
  EXPECT_THROW(train_classifier(data, cfg, 0), ConfigError);
}

TEST(ConvNet, GradientsMatchFiniteDifferences) {
  ConvNetConfig cfg;
  cfg.blocks = 2, cfg.width = 4, cfg.groups = 2, cfg.height = cfg.width_px = 8, cfg.num_classes = 3;
  ConvNet<double> net(cfg);
  Rng rng(2);
  net.initialize(rng);
  const int batch = 2;
  const auto x = testing::random_vector(static_cast<std::size_t>(batch) * 3 * 64, rng);
  const int labels[2] = {0, 2};
  auto loss = [&] {
    const auto logits = net.forward(x, batch);
    std::vector<double> d(logits.size());
    return kernels::cross_entropy(batch, 3, logits.data(), labels, d.data());
  };
  typename ConvNet<double>::Cache cache;
  const auto logits = net.forward(x, batch, &cache);
  std::vector<double> d(logits.size());
  kernels::cross_entropy(batch, 3, logits.data(), labels, d.data());
  auto grads = net.params().zeros_like();
  net.backward(cache, d, grads);
  for (auto& e : net.params().entries()) {
    std::vector<double> view(e.value.data(), e.value.data() + e.value.size());
    const auto& g = grads.get(e.name);
    const std::vector<double> gv(g.data(), g.data() + g.size());
    const double err = testing::max_directional_error(
        view, gv,
        [&] {
          std::copy(view.begin(), view.end(), e.value.data());
          return loss();
        },
        rng, 4);
    std::copy(view.begin(), view.end(), e.value.data());
    EXPECT_LT(err, 1e-4) << e.name;
  }
}

TEST(ConvNet, FeatureAndOutputShapes) {
  auto cfg = small();
  ConvNet<float> net(cfg);
  Rng rng(3);
  net.initialize(rng);
  const auto data = make_shapes_dataset(3, 1, 16);
  EXPECT_EQ(net.features(data.pixels, 3).size(), 3u * cfg.feature_dim());
  EXPECT_EQ(cfg.feature_dim(), 16 * 4 * 4);
  EXPECT_EQ(net.forward(std::vector<float>(data.pixels), 3).size(), 3u * 4u);
}

TEST(Augment, KeepsPixelsFromTheSourceOrPadding) {
  Rng rng(4);
  std::vector<float> img(3 * 8 * 8);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i) / img.size();
  const std::set<float> allowed(img.begin(), img.end());
  for (int trial = 0; trial < 20; ++trial) {
    auto out = img;
    detail::augment_image(out, 3, 8, 8, rng);
    for (float v : out) EXPECT_TRUE(v == -1.0f || allowed.contains(v));
  }
}

TEST(Protocol, ReportStatistics) {
  EXPECT_EQ(EvalReport::std_of({0.7}), 0.0);
  EXPECT_EQ(EvalReport::std_of({0.5, 0.5, 0.5}), 0.0);
  EXPECT_EQ(EvalReport::mean_of({0.5, 0.5, 0.5}), 0.5);
  EXPECT_NEAR(EvalReport::std_of({0.0, 1.0}), 0.5, 1e-15);
  std::vector<double> acc{0.61, 0.72, 0.58};
  const double m = EvalReport::mean_of(acc);
  std::sort(acc.begin(), acc.end());
  do {
    EXPECT_NEAR(EvalReport::mean_of(acc), m, 1e-15);
  } while (std::next_permutation(acc.begin(), acc.end()));
}

TEST(Protocol, RunsEverySeedAndTheBaseline) {
  const auto real = make_shapes_dataset(200, 5, 16);
  const auto test = make_shapes_dataset(200, 6, 16);
  std::vector<std::size_t> few(8);
  std::iota(few.begin(), few.end(), 0);
  const auto subset = real.subset(few);
  auto cfg = small(15);
  const auto r = protocol(subset, test, cfg, 3, &real);
  ASSERT_EQ(r.accuracies.size(), 3u);
  ASSERT_EQ(r.baseline_accuracies.size(), 3u);
  EXPECT_EQ(r.seeds, (std::vector<std::uint64_t>{0, 1, 2}));
  EXPECT_EQ(r.train_fingerprint, subset.fingerprint());
  EXPECT_EQ(r.test_fingerprint, test.fingerprint());
  for (double a : r.accuracies) EXPECT_TRUE(a >= 0 && a <= 1);
  EXPECT_EQ(r.accuracies[1], evaluate(train_classifier(subset, cfg, 1), test));
  // the full real set should not be beaten by a small subset of it
  const double se = std::sqrt((r.stddev() * r.stddev() + r.baseline_stddev() * r.baseline_stddev()) / 3);
  EXPECT_GE(r.baseline_mean() + 2 * se, r.mean());
  const auto one = protocol(subset, test, small(0), 1);
  EXPECT_EQ(one.stddev(), 0.0);
  EXPECT_THROW(protocol(subset, test, cfg, 0), ConfigError);
}

}  // namespace
}  // namespace ddistill
