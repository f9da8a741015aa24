// Copyright 2026 The ddistill Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ddistill/cli.hpp"
#include "ddistill/convnet.hpp"
#include "ddistill/datastore.hpp"
#include "ddistill/denoiser.hpp"
#include "ddistill/distillery.hpp"
#include "ddistill/gemm.hpp"
#include "ddistill/kernels.hpp"
#include "ddistill/metrics.hpp"
#include "ddistill/sampler.hpp"
#include "ddistill/schedule.hpp"
#include "ddistill/trainer.hpp"
#include "test_support.hpp"

namespace ddistill {
namespace {

using testing::dot;
using testing::max_directional_error;
using testing::max_fd_error;
using testing::random_vector;

struct Outcome {
  bool pass = true;
  std::string detail;
};

/// Collects failed checks and a short summary for one criterion.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok) {
      pass_ = false;
      if (!failures_.empty()) failures_ += "; ";
      failures_ += what;
    }
  }
  void note(const std::string& s) {
    if (!notes_.empty()) notes_ += ", ";
    notes_ += s;
  }
  Outcome outcome() const {
    std::string d = notes_;
    if (!pass_) d += (d.empty() ? "" : "; ") + std::string("failed: ") + failures_;
    return {pass_, d};
  }

 private:
  bool pass_ = true;
  std::string notes_, failures_;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double now_seconds() { return steady_seconds(); }

// ---------------------------------------------------------------------------

Outcome forward_process() {
  Checks c;
  Rng pick(2026);
  // linear endpoints keep alpha_bar away from zero, so a relative mean bound
  // stays meaningful at every step
  const double b0 = 1e-3 + 0.05 * pick.uniform();
  const double b1 = b0 + 0.05 + 0.3 * pick.uniform();
  const auto s = build_schedule(ScheduleKind::linear, 10, b0, b1);
  c.note("linear beta " + fmt("%.4f", b0) + ".." + fmt("%.4f", b1));
  const int n = 100000;
  // a large signal keeps the Monte-Carlo error well below the relative bound
  const std::vector<double> x0{10.0};
  Rng rng(11);
  std::vector<double> sum(11, 0.0), sq(11, 0.0);
  for (int i = 0; i < n; ++i) {
    std::vector<double> x = x0;
    for (int t = 1; t <= 10; ++t) {
      const std::vector<double> z{rng.normal()};
      x = forward_step<double>(x, t, z, s);
      sum[t] += x[0];
      sq[t] += x[0] * x[0];
    }
  }
  double worst_mean = 0, worst_var = 0;
  for (int t = 1; t <= 10; ++t) {
    // closed-form marginal: mean from zero noise, scale from unit noise
    const double mean_cf = forward_marginal<double>(x0, t, std::vector<double>{0.0}, s)[0];
    const double sd_cf = forward_marginal<double>(x0, t, std::vector<double>{1.0}, s)[0] - mean_cf;
    const double mean = sum[t] / n, var = sq[t] / n - mean * mean;
    worst_mean = std::max(worst_mean, std::abs(mean - mean_cf) / std::abs(mean_cf));
    worst_var = std::max(worst_var, std::abs(var - sd_cf * sd_cf) / (sd_cf * sd_cf));
  }
  c.expect(worst_mean < 0.01, "mean rel error " + fmt("%.2e", worst_mean));
  c.expect(worst_var < 0.02, "variance rel error " + fmt("%.2e", worst_var));
  c.note("mean rel " + fmt("%.1e", worst_mean) + ", var rel " + fmt("%.1e", worst_var));
  return c.outcome();
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  namespace k = kernels;
  Checks c;
  Rng rng(3);
  std::map<std::string, double> errors;
  {
    const int rows = 4, in = 5, out = 3;
    auto x = random_vector(rows * in, rng), w = random_vector(in * out, rng), b = random_vector(out, rng);
    const auto r = random_vector(rows * out, rng);
    auto loss = [&] {
      std::vector<double> y(rows * out);
      k::linear_forward(rows, in, out, x.data(), w.data(), b.data(), y.data());
      return dot(y, r);
    };
    std::vector<double> dx(rows * in), dw(in * out, 0.0), db(out, 0.0);
    k::linear_backward(rows, in, out, x.data(), w.data(), r.data(), dx.data(), dw.data(), db.data());
    errors["linear"] = std::max({max_fd_error(x, dx, loss), max_fd_error(w, dw, loss), max_fd_error(b, db, loss)});
  }
  {
    const int rows = 3, dim = 7;
    auto x = random_vector(rows * dim, rng), g = random_vector(dim, rng), b = random_vector(dim, rng);
    const auto r = random_vector(rows * dim, rng);
    std::vector<double> mean(rows), rstd(rows);
    auto loss = [&] {
      std::vector<double> y(rows * dim);
      k::layer_norm_forward(rows, dim, x.data(), g.data(), b.data(), y.data(), mean.data(), rstd.data());
      return dot(y, r);
    };
    loss();
    std::vector<double> dx(rows * dim), dg(dim, 0.0), db(dim, 0.0);
    k::layer_norm_backward(rows, dim, x.data(), g.data(), mean.data(), rstd.data(), r.data(), dx.data(), dg.data(),
                           db.data());
    errors["layer_norm"] = std::max({max_fd_error(x, dx, loss), max_fd_error(g, dg, loss), max_fd_error(b, db, loss)});
  }
  {
    // elementwise, so each entry is differenced on its own output; a summed
    // loss would bury tail derivatives near 1e-8 under its own roundoff
    auto x = random_vector(20, rng, 2.0);
    const auto r = random_vector(20, rng);
    std::vector<double> dx(20);
    k::gelu_backward(20, x.data(), r.data(), dx.data());
    double worst = 0;
    for (int i = 0; i < 20; ++i) {
      std::vector<double> xi{x[i]}, gi{dx[i]};
      auto loss = [&] {
        double y;
        k::gelu_forward(1, xi.data(), &y);
        return y * r[i];
      };
      worst = std::max(worst, max_fd_error(xi, gi, loss));
    }
    errors["gelu"] = worst;
  }
  {
    const int rows = 3, cols = 6;
    auto x = random_vector(rows * cols, rng, 2.0);
    const auto r = random_vector(rows * cols, rng);
    auto loss = [&] {
      std::vector<double> y(rows * cols);
      k::softmax_rows(rows, cols, x.data(), y.data());
      return dot(y, r);
    };
    std::vector<double> p(rows * cols), dx(rows * cols);
    k::softmax_rows(rows, cols, x.data(), p.data());
    k::softmax_rows_backward(rows, cols, p.data(), r.data(), dx.data());
    errors["softmax"] = max_fd_error(x, dx, loss);
  }
  {
    const int n = 4, m = 5, d = 3, dv = 2;
    auto q = random_vector(n * d, rng), kk = random_vector(m * d, rng), v = random_vector(m * dv, rng);
    const auto r = random_vector(n * dv, rng);
    auto loss = [&] { return dot(k::attention(q, kk, v, n, m, d, dv), r); };
    std::vector<double> probs(n * m), out(n * dv), dq(n * d), dk(m * d), dvv(m * dv), scratch(n * m);
    k::attention_forward(n, m, d, dv, q.data(), d, kk.data(), d, v.data(), dv, probs.data(), out.data(), dv);
    k::attention_backward(n, m, d, dv, q.data(), d, kk.data(), d, v.data(), dv, probs.data(), r.data(), dv, dq.data(),
                          d, dk.data(), d, dvv.data(), dv, scratch.data());
    errors["attention"] =
        std::max({max_fd_error(q, dq, loss), max_fd_error(kk, dk, loss), max_fd_error(v, dvv, loss)});
  }
  {
    const int b = 2, cin = 2, cout = 3, h = 4, w = 4, ks = 3;
    auto x = random_vector(b * cin * h * w, rng), wt = random_vector(cout * cin * ks * ks, rng);
    auto bias = random_vector(cout, rng);
    const auto r = random_vector(b * cout * h * w, rng);
    std::vector<double> cols(b * cin * ks * ks * h * w);
    auto loss = [&] {
      std::vector<double> y(b * cout * h * w);
      k::conv2d_forward(b, cin, cout, h, w, ks, x.data(), wt.data(), bias.data(), y.data(), cols.data());
      return dot(y, r);
    };
    loss();
    std::vector<double> dx(x.size()), dw(wt.size(), 0.0), db(cout, 0.0);
    k::conv2d_backward(b, cin, cout, h, w, ks, cols.data(), wt.data(), r.data(), dx.data(), dw.data(), db.data());
    errors["conv2d"] =
        std::max({max_fd_error(x, dx, loss), max_fd_error(wt, dw, loss), max_fd_error(bias, db, loss)});
  }
  for (int groups : {1, 2, 4}) {
    const int b = 2, ch = 4, hw = 5;
    auto x = random_vector(b * ch * hw, rng), g = random_vector(ch, rng), beta = random_vector(ch, rng);
    const auto r = random_vector(b * ch * hw, rng);
    std::vector<double> mean(b * groups), rstd(b * groups);
    auto loss = [&] {
      std::vector<double> y(x.size());
      k::group_norm_forward(b, ch, hw, groups, x.data(), g.data(), beta.data(), y.data(), mean.data(), rstd.data());
      return dot(y, r);
    };
    loss();
    std::vector<double> dx(x.size()), dg(ch, 0.0), db(ch, 0.0);
    k::group_norm_backward(b, ch, hw, groups, x.data(), g.data(), mean.data(), rstd.data(), r.data(), dx.data(),
                           dg.data(), db.data());
    auto& e = errors["group_norm"];
    e = std::max({e, max_fd_error(x, dx, loss), max_fd_error(g, dg, loss), max_fd_error(beta, db, loss)});
  }
  {
    auto x = random_vector(2 * 4 * 6, rng);
    for (auto& v : x)
      if (std::abs(v) < 0.05) v += 0.2;  // keep away from the kink
    const auto r = random_vector(2 * 2 * 3, rng);
    auto loss = [&] {
      std::vector<double> a(x.size()), p(r.size());
      k::relu_forward(x.size(), x.data(), a.data());
      k::avg_pool2_forward(2, 4, 6, a.data(), p.data());
      return dot(p, r);
    };
    std::vector<double> dpool(x.size()), dx(x.size());
    k::avg_pool2_backward(2, 4, 6, r.data(), dpool.data());
    k::relu_backward(x.size(), x.data(), dpool.data(), dx.data());
    errors["relu+avg_pool"] = max_fd_error(x, dx, loss);
  }
  {
    auto logits = random_vector(3 * 5, rng);
    const std::vector<int> labels{0, 4, 2};
    auto loss = [&] { return k::cross_entropy(3, 5, logits.data(), labels.data(), static_cast<double*>(nullptr)); };
    std::vector<double> d(logits.size());
    k::cross_entropy(3, 5, logits.data(), labels.data(), d.data());
    errors["cross_entropy"] = max_fd_error(logits, d, loss);
  }
  for (auto skip : {SkipMode::add, SkipMode::concat}) {
    // full tiny preset on the acceptance image geometry
    auto cfg = DenoiserConfig::preset("tiny", 16, 3, 4);
    cfg.patch = 4;
    cfg.skip = skip;
    Denoiser<double> m(cfg);
    Rng init(7);
    m.initialize(init);
    // lift zero-initialized tensors so every parameter carries gradient
    for (auto& e : m.params().entries())
      for (std::size_t i = 0; i < e.value.size(); ++i) e.value[i] += 0.05 * init.normal();
    const int batch = 2;
    const auto x = random_vector(static_cast<std::size_t>(batch) * cfg.image_numel(), rng);
    const std::vector<double> t{7.0, 640.0};
    const std::vector<int> y{2, kUnconditional};
    const auto r = random_vector(x.size(), rng);
    auto loss = [&] {
      std::vector<double> eps(x.size());
      m.predict(x, t, y, eps);
      return dot(eps, r);
    };
    DenoiserCache<double> cache;
    std::vector<double> eps(x.size());
    m.predict(x, t, y, eps, &cache);
    auto grads = m.params().zeros_like();
    m.backward(cache, r, grads);
    double worst = 0.0;
    for (auto& e : m.params().entries()) {
      std::vector<double> view(e.value.data(), e.value.data() + e.value.size());
      const auto& g = grads.get(e.name);
      const std::vector<double> gv(g.data(), g.data() + g.size());
      auto live = [&] {
        std::copy(view.begin(), view.end(), e.value.data());
        return loss();
      };
      const double err = max_directional_error(view, gv, live, rng, 2);
      std::copy(view.begin(), view.end(), e.value.data());
      if (err >= 1e-4) c.expect(false, "denoiser tensor " + e.name + " " + fmt("%.2e", err));
      worst = std::max(worst, err);
    }
    errors[std::string("denoiser/") + to_string(skip)] = worst;
  }
  double worst = 0;
  for (const auto& [name, err] : errors) {
    c.expect(err < 1e-4, name + " " + fmt("%.2e", err));
    worst = std::max(worst, err);
  }
  c.note(std::to_string(errors.size()) + " groups, max rel error " + fmt("%.2e", worst));
  return c.outcome();
}

// ---------------------------------------------------------------------------

NoisePredictor<double> unit_gaussian_oracle(const NoiseSchedule& sched) {
  return [&sched](std::span<const double> x, std::span<const double> t, std::span<const int>, std::span<double> eps) {
    const std::size_t per = x.size() / t.size();
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double s = std::sqrt(-std::expm1(sched.log_alpha_bar_at(t[i])));
      for (std::size_t j = 0; j < per; ++j) eps[i * per + j] = s * x[i * per + j];
    }
  };
}

struct Moments2 {
  Eigen::Vector2d mean;
  Eigen::Matrix2d cov;
};

Moments2 moments2(const std::vector<double>& xs) {
  const std::size_t n = xs.size() / 2;
  Moments2 m;
  m.mean.setZero();
  m.cov.setZero();
  for (std::size_t i = 0; i < n; ++i) m.mean += Eigen::Vector2d(xs[2 * i], xs[2 * i + 1]) / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector2d d = Eigen::Vector2d(xs[2 * i], xs[2 * i + 1]) - m.mean;
    m.cov += d * d.transpose() / static_cast<double>(n - 1);
  }
  return m;
}

std::vector<double> run_sampler(const NoiseSchedule& sched, SampleMethod method, int steps, VarianceMode v, int order,
                                std::size_t n) {
  SamplerConfig cfg;
  cfg.method = method, cfg.steps = steps, cfg.variance = v, cfg.order = order, cfg.clip = false;
  std::vector<Rng> rngs;
  for (std::size_t i = 0; i < n; ++i) rngs.push_back(sample_stream(17, i));
  const std::vector<int> labels(n, 0);
  return sample_items<double>(unit_gaussian_oracle(sched), sched, labels, rngs, 2, cfg);
}

Outcome sampler_oracle() {
  Checks c;
  const auto sched = build_schedule(ScheduleKind::linear, 1000, 1e-4, 0.02);
  const std::size_t n = 10000;
  auto unit_check = [&](const std::string& name, const Moments2& m) {
    const double mean_err = m.mean.cwiseAbs().maxCoeff();
    const double cov_err = (m.cov - Eigen::Matrix2d::Identity()).cwiseAbs().maxCoeff();
    c.expect(mean_err <= 0.05, name + " mean " + fmt("%.3f", mean_err));
    c.expect(cov_err <= 0.05, name + " cov " + fmt("%.3f", cov_err));
    c.note(name + " |mean| " + fmt("%.3f", mean_err) + " |cov-I| " + fmt("%.3f", cov_err));
  };
  unit_check("ancestral",
             moments2(run_sampler(sched, SampleMethod::ancestral, 1000, VarianceMode::beta_tilde, 2, n)));
  unit_check("fast-ode/50", moments2(run_sampler(sched, SampleMethod::fast_ode, 50, VarianceMode::zero, 2, n)));
  const auto ode = moments2(run_sampler(sched, SampleMethod::fast_ode, 1000, VarianceMode::zero, 1, n));
  const auto det = moments2(run_sampler(sched, SampleMethod::ancestral, 1000, VarianceMode::zero, 2, n));
  // moments are O(1), so 2% is taken relative to max(1, |reference|)
  double worst = 0;
  for (int i = 0; i < 2; ++i) worst = std::max(worst, std::abs(ode.mean[i] - det.mean[i]) / std::max(1.0, std::abs(det.mean[i])));
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      worst = std::max(worst, std::abs(ode.cov(i, j) - det.cov(i, j)) / std::max(1.0, std::abs(det.cov(i, j))));
  c.expect(worst <= 0.02, "first-order vs zero-variance ancestral " + fmt("%.4f", worst));
  c.note("order-1 vs sigma=0 " + fmt("%.1e", worst));
  return c.outcome();
}

// ---------------------------------------------------------------------------

Outcome frechet_exactness() {
  using Eigen::MatrixXd;
  using Eigen::VectorXd;
  Checks c;
  Rng rng(41);
  {
    GaussianStats a(8);
    std::vector<double> f(8 * 50);
    for (auto& v : f) v = rng.normal();
    a.accumulate(std::span<const double>(f), 50);
    const double d = frechet_distance(a, a);
    c.expect(std::abs(d) <= 1e-9, "identical stats " + fmt("%.2e", d));
  }
  {
    const VectorXd z = VectorXd::Zero(2);
    const MatrixXd s1 = (VectorXd(2) << 1.0, 4.0).finished().asDiagonal();
    const double d = frechet_distance(z, s1, z, MatrixXd::Identity(2, 2));
    c.expect(std::abs(d - 1.0) <= 1e-9, "diag(1,4) vs I " + fmt("%.12f", d));
  }
  double worst_sym = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int d = 1 + static_cast<int>(rng.below(32));
    GaussianStats a(d), b(d);
    std::vector<double> fa(static_cast<std::size_t>(d) * 80), fb(fa.size());
    for (auto& v : fa) v = rng.normal();
    for (auto& v : fb) v = 0.3 + 1.5 * rng.normal();
    a.accumulate(std::span<const double>(fa), 80);
    b.accumulate(std::span<const double>(fb), 80);
    const double ab = frechet_distance(a, b), ba = frechet_distance(b, a);
    worst_sym = std::max(worst_sym, std::abs(ab - ba) / std::max(1.0, ab));
  }
  c.expect(worst_sym <= 1e-8, "symmetry " + fmt("%.2e", worst_sym));
  double worst_sqrt = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(64));
    const int rank = 1 + static_cast<int>(rng.below(n));
    MatrixXd a(n, rank);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < rank; ++j) a(i, j) = rng.normal();
    const MatrixXd s = a * a.transpose();
    const MatrixXd r = matrix_sqrt_psd(s);
    worst_sqrt = std::max(worst_sqrt, (r * r - s).norm() / s.norm());
  }
  c.expect(worst_sqrt <= 1e-6, "matrix sqrt " + fmt("%.2e", worst_sqrt));
  c.note("symmetry " + fmt("%.1e", worst_sym) + ", sqrt reconstruction " + fmt("%.1e", worst_sqrt));
  return c.outcome();
}

// ---------------------------------------------------------------------------

Outcome parameter_anchors() {
  Checks c;
  const auto small = DenoiserConfig::preset("small", 32, 3, 100);
  const auto mid = DenoiserConfig::preset("mid", 64, 3, 200);
  const double ns = static_cast<double>(count_params(small)), nm = static_cast<double>(count_params(mid));
  c.expect(small.layers == 13 && small.hidden == 512 && small.mlp == 2048 && small.heads == 8, "small shape");
  c.expect(mid.layers == 17 && mid.hidden == 768 && mid.mlp == 3072 && mid.heads == 12, "mid shape");
  c.expect(std::abs(ns - 44e6) <= 4.4e6, "small " + fmt("%.2fM", ns / 1e6));
  c.expect(std::abs(nm - 131e6) <= 13.1e6, "mid " + fmt("%.2fM", nm / 1e6));
  c.note("small " + fmt("%.2fM", ns / 1e6) + ", mid " + fmt("%.2fM", nm / 1e6));
  return c.outcome();
}

// ---------------------------------------------------------------------------

/// Desk-scale run settings shared by the distillation criteria.
struct DeskRun {
  long iterations = 18000;
  int batch_size = 32;
  double lr = 1e-3;
  double beta1 = 0.99;
  double label_dropout = 0.1;
  bool ema = true;
  double ema_decay = 0.999;
  long fid_every = 3000;
  std::size_t fid_samples = 200;
  int fid_steps = 25;
  double guidance = 6.0;
  int distill_steps = 50;
  ConvNetConfig classifier() const {
    ConvNetConfig cc;
    cc.width = 32, cc.channels = 3, cc.height = cc.width_px = 16, cc.num_classes = 4, cc.epochs = 20;
    return cc;
  }
  ConvNetConfig distilled_classifier() const {
    ConvNetConfig cc = classifier();
    cc.augment = true, cc.batch_size = 10, cc.epochs = 200;
    return cc;
  }
  DenoiserConfig model() const {
    auto cfg = DenoiserConfig::preset("tiny", 16, 3, 4);
    cfg.patch = 4;
    return cfg;
  }
  TrainConfig train() const {
    TrainConfig tc;
    tc.iterations = iterations, tc.batch_size = batch_size, tc.lr = lr, tc.beta1 = beta1;
    tc.label_dropout = label_dropout, tc.ema = ema, tc.ema_decay = ema_decay;
    tc.fid_every = fid_every, tc.log_every = 100, tc.seed = 0;
    return tc;
  }
  SamplerConfig sampler() const {
    SamplerConfig sc;
    sc.steps = distill_steps, sc.guidance = guidance;
    return sc;
  }
};

struct Shared {
  testing::TempDir dir{"acceptance"};
  std::optional<std::string> checkpoint;
};

Outcome desk_distillation(Shared& shared) {
  Checks c;
  const DeskRun run;
  const auto train_set = make_shapes_dataset(2000, 1), test_set = make_shapes_dataset(500, 2);
  const auto cc = run.classifier();

  // FID features come from a classifier trained on the real training split
  const FeatureExtractor fx(train_classifier(train_set, cc, 100));
  const auto reference = fx.stats(train_set);

  const ScheduleConfig sched_cfg;
  const auto sched = sched_cfg.build();
  const auto dcfg = run.model();
  const auto tc = run.train();
  c.note(fmt("%.2fM params", static_cast<double>(count_params(dcfg)) / 1e6));
  auto state = TrainState<float>::fresh(dcfg, tc);
  SamplerConfig fid_sampler;
  fid_sampler.steps = run.fid_steps;
  std::vector<double> fids;
  TrainHooks<float> hooks;
  hooks.fid = [&](long it, const Denoiser<float>& m) {
    const double f = fid_eval(m, sched, fx, reference, run.fid_samples, fid_sampler);
    std::printf("  desk run: iteration %ld fid %.3f\n", it, f);
    std::fflush(stdout);
    fids.push_back(f);
    return f;
  };
  const double t0 = now_seconds();
  const auto rows = train(state, train_set, tc, sched, hooks);
  const double train_seconds = now_seconds() - t0;
  double loss0 = NAN, loss_last = NAN;
  for (const auto& r : rows)
    if (!std::isnan(r.loss)) {
      if (std::isnan(loss0)) loss0 = r.loss;
      loss_last = r.loss;
    }
  c.expect(run.iterations <= 20000, "iteration cap");
  c.expect(fids.size() >= 2 && fids.back() <= 0.5 * fids.front(),
           "fid " + fmt("%.3f", fids.front()) + " -> " + fmt("%.3f", fids.back()));
  c.note("fid " + fmt("%.2f", fids.front()) + " -> " + fmt("%.2f", fids.back()));
  c.note("loss " + fmt("%.1f", loss0) + " -> " + fmt("%.1f", loss_last));
  c.note(std::to_string(run.iterations) + " iterations in " + fmt("%.0f s", train_seconds));

  const auto ckpt = make_checkpoint(state, sched_cfg);
  const std::string path = shared.dir.file("desk.ddck");
  write_checkpoint(ckpt, path);
  shared.checkpoint = path;

  const auto model = load_denoiser(ckpt);
  const auto distilled = distill(model, sched, run.sampler(), Budget::images_per_class(10), ckpt.fingerprint());
  c.expect(distilled.images.size() == 40, "distilled size");
  const auto dcc = run.distilled_classifier();
  const auto report = protocol(distilled.images, test_set, dcc, 3, &train_set, &cc);
  c.expect(report.mean() >= 0.80, "distilled accuracy " + fmt("%.3f", report.mean()) + " < 0.80");
  c.expect(report.baseline_mean() >= report.mean(), "baseline below distilled");
  c.note("distilled acc " + fmt("%.3f", report.mean()) + " +- " + fmt("%.3f", report.stddev()));
  c.note("real baseline " + fmt("%.3f", report.baseline_mean()));
  return c.outcome();
}

// ---------------------------------------------------------------------------

Outcome budgeted_generation(Shared& shared) {
  Checks c;
  if (!shared.checkpoint) {
    // the desk run failed before writing its checkpoint; train a short one
    const DeskRun run;
    auto tc = run.train();
    tc.iterations = 200;
    auto st = TrainState<float>::fresh(run.model(), tc);
    train(st, make_shapes_dataset(2000, 1), tc, ScheduleConfig{}.build());
    shared.checkpoint = shared.dir.file("short.ddck");
    write_checkpoint(make_checkpoint(st, ScheduleConfig{}), *shared.checkpoint);
    c.note("used a 200-iteration fallback checkpoint");
  }
  const DeskRun run;
  const auto ckpt = read_checkpoint(*shared.checkpoint);
  const auto model = load_denoiser(ckpt);
  const auto sched = checkpoint_schedule(ckpt).build();
  const auto sc = run.sampler();
  // latency of one batch at the default batch size, measured independently
  double batch_latency = 0;
  {
    std::vector<int> labels(static_cast<std::size_t>(sc.batch));
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 4);
    const double t = now_seconds();
    sample_class_batch(model, sched, std::span<const int>(labels), sc);
    batch_latency = now_seconds() - t;
  }
  const std::string out = shared.dir.file("budget.dds");
  std::ostringstream so, se;
  const double t0 = now_seconds();
  const int code = cli::run({"distill", "--checkpoint", *shared.checkpoint, "--budget-seconds", "60", "--steps",
                             std::to_string(sc.steps), "--out", out},
                            so, se);
  const double wall = now_seconds() - t0;
  c.expect(code == 0, "exit code " + std::to_string(code) + ": " + se.str());
  if (code != 0) return c.outcome();
  const auto images = read_dataset(out);
  const auto counts = images.class_counts();
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  c.expect(*hi - *lo <= 1, "class counts differ by " + std::to_string(*hi - *lo));
  c.expect(wall <= 60.0 + batch_latency, "wall " + fmt("%.2f s", wall) + " > 60 s + " + fmt("%.2f s", batch_latency));
  const auto manifest = cli::detail::read_manifest(cli::detail::manifest_path(out));
  const auto ips = manifest.find("images_per_second");
  c.expect(ips != manifest.end(), "manifest lacks images_per_second");
  c.note(std::to_string(images.size()) + " images in " + fmt("%.2f s", wall) + " (batch " + fmt("%.2f s", batch_latency) +
         ")");
  if (ips != manifest.end()) c.note(ips->second + " images/s");
  return c.outcome();
}

// ---------------------------------------------------------------------------

LabeledImageBatch grid_dataset(Rng& rng, std::size_t n, int ch, int h, int w, int classes) {
  LabeledImageBatch d;
  d.channels = ch, d.height = h, d.width = w, d.num_classes = classes;
  std::vector<float> img(static_cast<std::size_t>(ch) * h * w);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : img) v = io::dequantize(static_cast<std::uint8_t>(rng.below(256)));
    d.push_back(img, static_cast<int>(rng.below(classes)));
  }
  return d;
}

Outcome persistence(Shared& shared) {
  Checks c;
  Rng rng(8);
  // dataset round trips
  int dataset_mismatch = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto d = grid_dataset(rng, 1 + rng.below(20), 1 + static_cast<int>(rng.below(3)),
                                1 + static_cast<int>(rng.below(8)), 1 + static_cast<int>(rng.below(8)),
                                1 + static_cast<int>(rng.below(200)));
    const std::string path = shared.dir.file("rt.dds");
    write_dataset(d, path);
    const auto back = read_dataset(path);
    if (back.pixels != d.pixels || back.labels != d.labels || encode_dataset(back) != io::read_file(path))
      ++dataset_mismatch;
  }
  c.expect(dataset_mismatch == 0, std::to_string(dataset_mismatch) + " dataset round trips differ");

  // checkpoint round trip on the acceptance model
  const DeskRun run;
  const ScheduleConfig sc;
  const auto sched = sc.build();
  const auto data = make_shapes_dataset(64, 5);
  auto tc = run.train();
  tc.iterations = 4, tc.batch_size = 8, tc.checkpoint_every = 2, tc.log_every = 1;
  auto st = TrainState<float>::fresh(run.model(), tc);
  train(st, data, tc, sched);
  const auto ck = make_checkpoint(st, sc);
  const std::string cpath = shared.dir.file("rt.ddck");
  write_checkpoint(ck, cpath);
  const auto cbytes = io::read_file(cpath);
  const auto cback = read_checkpoint(cpath);
  c.expect(cback == ck && encode_checkpoint(cback) == cbytes, "checkpoint round trip");

  // corruption fuzz over both formats
  int accepted = 0;
  const auto dbytes = encode_dataset(grid_dataset(rng, 6, 3, 4, 4, 4));
  for (int trial = 0; trial < 1000; ++trial) {
    const bool dataset = trial % 2 == 0;
    auto bad = dataset ? dbytes : cbytes;
    switch (rng.below(3)) {
      case 0:  // magic
        bad[rng.below(4)] ^= static_cast<std::uint8_t>(1 + rng.below(255));
        break;
      case 1:  // truncation
        bad.resize(rng.below(bad.size()));
        break;
      default:  // trailing bytes
        for (std::uint64_t k = 0, n = 1 + rng.below(16); k < n; ++k) bad.push_back(static_cast<std::uint8_t>(rng.below(256)));
        break;
    }
    try {
      if (dataset) {
        decode_dataset(bad);
      } else {
        decode_checkpoint(bad);
      }
      ++accepted;
    } catch (const DataError&) {
    }
  }
  c.expect(accepted == 0, std::to_string(accepted) + " corruptions accepted");

  // resume from a mid-run checkpoint and compare every later checkpoint
  tc.iterations = 8;
  std::vector<std::vector<std::uint8_t>> full_ckpts, resumed_ckpts;
  TrainHooks<float> full_hooks, resumed_hooks;
  full_hooks.checkpoint = [&](const TrainState<float>& s) { full_ckpts.push_back(encode_checkpoint(make_checkpoint(s, sc))); };
  resumed_hooks.checkpoint = [&](const TrainState<float>& s) {
    resumed_ckpts.push_back(encode_checkpoint(make_checkpoint(s, sc)));
  };
  auto full = TrainState<float>::fresh(run.model(), tc);
  train(full, data, tc, sched, full_hooks);
  auto resumed = restore_train_state(read_checkpoint(cpath));
  train(resumed, data, tc, sched, resumed_hooks);
  c.expect(full_ckpts.size() == 4 && resumed_ckpts.size() == 2, "checkpoint counts");
  bool same = resumed_ckpts.size() == 2 && full_ckpts.size() == 4;
  for (std::size_t i = 0; same && i < 2; ++i) same = resumed_ckpts[i] == full_ckpts[i + 2];
  c.expect(same, "resumed checkpoints differ from the uninterrupted run");
  c.note("50 dataset and 1 checkpoint round trips, 1000 corruptions rejected, resume at 4 of 8 bit-exact");
  return c.outcome();
}

}  // namespace
}  // namespace ddistill

// Optional arguments select criterion ids; the default runs all of them.
int main(int argc, char** argv) {
  using namespace ddistill;
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  Shared shared;
  struct Criterion {
    int id;
    double budget_seconds;  // 0: not gated
    std::function<Outcome()> body;
  };
  const std::vector<Criterion> criteria = {
      {1, 10, forward_process},
      {2, 60, gradient_suite},
      {3, 120, sampler_oracle},
      {4, 60, frechet_exactness},
      {5, 1, parameter_anchors},
      {6, 3600, [&] { return desk_distillation(shared); }},
      {7, 0, [&] { return budgeted_generation(shared); }},
      {8, 300, [&] { return persistence(shared); }},
  };
  int failed = 0;
  for (const auto& cr : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), cr.id) == only.end()) continue;
    const double t0 = now_seconds();
    Outcome o;
    try {
      o = cr.body();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = now_seconds() - t0;
    if (cr.budget_seconds > 0 && secs >= cr.budget_seconds) {
      o.pass = false;
      o.detail += "; over runtime budget of " + fmt("%.0f s", cr.budget_seconds);
    }
    std::printf("criterion %d: %s (%s; %.1f s)\n", cr.id, o.pass ? "PASS" : "FAIL", o.detail.c_str(), secs);
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
