#include <cmath>

#include "ditlab/analytic_score.hpp"
#include "ditlab/diffusion_engine.hpp"
#include "ditlab/rng.hpp"
#include "doctest.h"

using namespace ditlab;

namespace {

const DiffusionSchedule kSched;

std::vector<DsmBatchItem> make_batch(const SubspaceSpec& spec,
                                     const LatentMixtureSpec& latent, std::size_t n,
                                     std::uint64_t seed) {
  CounterRng rng(seed);
  const auto xs = sample_dataset(spec, latent, n, seed);
  std::vector<DsmBatchItem> batch;
  for (const auto& x0 : xs) {
    DsmBatchItem item;
    item.x0 = x0;
    item.t = kSched.early_stop + rng.uniform() * (kSched.horizon - kSched.early_stop);
    item.x_t = perturb(x0, item.t, kSched, rng.next_u64());
    batch.push_back(std::move(item));
  }
  return batch;
}

ScoreNetwork flat_net(std::size_t ambient, std::size_t d0, std::uint64_t seed,
                      double init_scale = 0.05) {
  const SubspaceSpec enc = sample_basis(ambient, d0, seed);
  return ScoreNetwork::make(enc.basis, ReshapeSpec::flat(d0), 1, 1, 2, 4, init_scale,
                            seed + 1);
}

}  // namespace

TEST_CASE("dsm loss vanishes when the score equals the target") {
  const SubspaceSpec spec = sample_basis(6, 2, 1);
  const auto latent = LatentMixtureSpec::standard_gaussian(2);
  const auto batch = make_batch(spec, latent, 8, 2);
  const double loss = dsm_loss_with_score(
      [&](const std::vector<double>& x, double t) {
        // reproduce the transition-kernel target by recomputing it per item
        for (const auto& item : batch)
          if (item.x_t == x && item.t == t) {
            const double beta = DiffusionSchedule::beta(t);
            const double sigma = DiffusionSchedule::sigma(t);
            std::vector<double> tgt(x.size());
            for (std::size_t i = 0; i < x.size(); ++i)
              tgt[i] = (beta * item.x0[i] - x[i]) / sigma;
            return tgt;
          }
        return std::vector<double>(x.size(), 0.0);
      },
      batch, kSched);
  CHECK(loss <= 1e-24);
}

TEST_CASE("dsm loss is nonnegative") {
  const SubspaceSpec spec = sample_basis(6, 2, 3);
  const auto latent = LatentMixtureSpec::standard_gaussian(2);
  const auto batch = make_batch(spec, latent, 16, 4);
  ScoreNetwork net = flat_net(6, 2, 5);
  CHECK(dsm_loss(net, batch, kSched) >= 0.0);
}

TEST_CASE("dsm loss rejects out-of-window times") {
  const SubspaceSpec spec = sample_basis(4, 2, 6);
  const auto latent = LatentMixtureSpec::standard_gaussian(2);
  auto batch = make_batch(spec, latent, 2, 7);
  batch[0].t = kSched.early_stop / 2.0;
  ScoreNetwork net = flat_net(4, 2, 8);
  CHECK_THROWS_AS(dsm_loss(net, batch, kSched), std::out_of_range);
}

TEST_CASE("analytic-score dsm loss matches 1-D quadrature") {
  // D = 1, standard Gaussian data: p_t is N(0, 1), the analytic total score
  // is -x. Monte-Carlo loss over many draws must match nested trapezoid
  // quadrature of E || -x_t - (beta x0 - x_t)/sigma ||^2.
  const double t = 0.8;
  const double beta = DiffusionSchedule::beta(t);
  const double sigma = DiffusionSchedule::sigma(t);

  // Monte-Carlo side through dsm_loss_with_score.
  CounterRng rng(9);
  std::vector<DsmBatchItem> batch;
  const std::size_t n = 100000;
  batch.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    DsmBatchItem item;
    item.x0 = {rng.normal()};
    item.t = t;
    item.x_t = {beta * item.x0[0] + std::sqrt(sigma) * rng.normal()};
    batch.push_back(std::move(item));
  }
  const double mc = dsm_loss_with_score(
      [](const std::vector<double>& x, double) { return std::vector<double>{-x[0]}; },
      batch, kSched);

  // Quadrature side: integrate over x0 and x_t | x0.
  auto inner = [&](double x0) {
    const int m = 801;
    const double lo = beta * x0 - 8.0 * std::sqrt(sigma);
    const double hi = beta * x0 + 8.0 * std::sqrt(sigma);
    const double dx = (hi - lo) / (m - 1);
    double acc = 0.0;
    for (int i = 0; i < m; ++i) {
      const double xt = lo + i * dx;
      const double dens = std::exp(-0.5 * (xt - beta * x0) * (xt - beta * x0) / sigma) /
                          std::sqrt(2.0 * M_PI * sigma);
      const double resid = -xt - (beta * x0 - xt) / sigma;
      const double w = (i == 0 || i == m - 1) ? 0.5 : 1.0;
      acc += w * dens * resid * resid * dx;
    }
    return acc;
  };
  const int m0 = 801;
  double quad = 0.0;
  for (int i = 0; i < m0; ++i) {
    const double x0 = -8.0 + 16.0 * i / (m0 - 1);
    const double dens = std::exp(-0.5 * x0 * x0) / std::sqrt(2.0 * M_PI);
    const double w = (i == 0 || i == m0 - 1) ? 0.5 : 1.0;
    quad += w * dens * inner(x0) * (16.0 / (m0 - 1));
  }
  CHECK(mc == doctest::Approx(quad).epsilon(2e-2));
}

TEST_CASE("zero learning rate leaves parameters bitwise unchanged") {
  const SubspaceSpec spec = sample_basis(6, 2, 10);
  const auto latent = LatentMixtureSpec::standard_gaussian(2);
  const auto dataset = sample_dataset(spec, latent, 64, 11);
  ScoreNetwork net = flat_net(6, 2, 12);
  const ScoreNetwork before = net;
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.batch_size = 4;
  cfg.learning_rate = 0.0;
  cfg.seed = 13;
  train(cfg, dataset, net);
  CHECK(net.encoder.data() == before.encoder.data());
  CHECK(net.blocks[0].w_k[0].data() == before.blocks[0].w_k[0].data());
  CHECK(net.blocks[0].w1.data() == before.blocks[0].w1.data());
}

TEST_CASE("training is deterministic in the seed") {
  const SubspaceSpec spec = sample_basis(6, 2, 14);
  const auto latent = LatentMixtureSpec::standard_gaussian(2);
  const auto dataset = sample_dataset(spec, latent, 64, 15);
  TrainConfig cfg;
  cfg.steps = 10;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e-3;
  cfg.seed = 16;
  ScoreNetwork net1 = flat_net(6, 2, 17);
  ScoreNetwork net2 = flat_net(6, 2, 17);
  const TrainResult r1 = train(cfg, dataset, net1);
  const TrainResult r2 = train(cfg, dataset, net2);
  REQUIRE(r1.history.size() == r2.history.size());
  for (std::size_t i = 0; i < r1.history.size(); ++i)
    CHECK(r1.history[i].loss == r2.history[i].loss);
  CHECK(net1.encoder.data() == net2.encoder.data());
}

TEST_CASE("encoder stays orthonormal along training") {
  const SubspaceSpec spec = sample_basis(8, 2, 18);
  const auto latent = LatentMixtureSpec::standard_gaussian(2);
  const auto dataset = sample_dataset(spec, latent, 128, 19);
  ScoreNetwork net = flat_net(8, 2, 20);
  TrainConfig cfg;
  cfg.steps = 25;
  cfg.batch_size = 8;
  cfg.learning_rate = 1e-3;
  cfg.seed = 21;
  train(cfg, dataset, net);
  DenseMatrix gram = net.encoder.transposed() * net.encoder;
  gram -= DenseMatrix::identity(2);
  CHECK(norm(gram, MatrixNorm::max) <= 1e-8);
}

TEST_CASE("fixed-seed subspace recovery regression (D=8, d0=2)") {
  const std::size_t D = 8, d0 = 2;
  const SubspaceSpec spec = sample_basis(D, d0, 424242);
  const auto latent = LatentMixtureSpec::standard_gaussian(d0);
  const auto dataset = sample_dataset(spec, latent, 2048, 31337);
  ScoreNetwork net = flat_net(D, d0, 2718);
  TrainConfig cfg;
  cfg.n_samples = dataset.size();
  cfg.steps = 2000;
  cfg.batch_size = 16;
  cfg.learning_rate = 1e-4;
  cfg.seed = 615;
  const TrainResult result = train(cfg, dataset, net, &spec.basis);
  const double err = subspace_error(net.encoder, spec.basis);
  CHECK(err <= 0.1);
  CHECK(result.history.back().subspace_error == doctest::Approx(err));
}

TEST_CASE("one-step fast/exact training parity") {
  const std::size_t D = 20, d0 = 16;
  const SubspaceSpec spec = sample_basis(D, d0, 22);
  const auto latent = LatentMixtureSpec::standard_gaussian(d0);
  const auto dataset = sample_dataset(spec, latent, 32, 23);
  const SubspaceSpec enc = sample_basis(D, d0, 24);
  TrainConfig cfg;
  cfg.steps = 1;
  cfg.batch_size = 4;
  cfg.learning_rate = 1e-3;
  cfg.seed = 25;
  cfg.eps_target = 1e-8;

  ScoreNetwork net_exact = ScoreNetwork::make(enc.basis, ReshapeSpec::image(4, 2), 1, 1,
                                              2, 4, 0.1, 26);
  ScoreNetwork net_fast = net_exact;
  cfg.use_fast_grad = false;
  train(cfg, dataset, net_exact);
  cfg.use_fast_grad = true;
  train(cfg, dataset, net_fast);

  CHECK(norm(net_exact.encoder - net_fast.encoder, MatrixNorm::max) <= 1e-6);
  CHECK(norm(net_exact.blocks[0].w_k[0] - net_fast.blocks[0].w_k[0], MatrixNorm::max) <=
        1e-6);
  CHECK(norm(net_exact.blocks[0].w_q[0] - net_fast.blocks[0].w_q[0], MatrixNorm::max) <=
        1e-6);
  CHECK(norm(net_exact.blocks[0].w_v[0] - net_fast.blocks[0].w_v[0], MatrixNorm::max) <=
        1e-6);
}

TEST_CASE("sampler takes the right number of steps") {
  DiffusionSchedule sched;
  sched.horizon = 5.0;
  sched.early_stop = 0.01;
  sched.step = 0.01;
  const auto report = backward_sample(
      [](const std::vector<double>& y, double t) {
        const double sigma = DiffusionSchedule::sigma(t);
        return vec_scaled(y, -1.0 / sigma);
      },
      sched, 2, 0, nullptr, 0.0, 3);
  CHECK(report.steps_taken == 499);
}

TEST_CASE("sampler rejects a non-dividing step") {
  DiffusionSchedule sched;
  sched.horizon = 1.0;
  sched.early_stop = 0.013;
  sched.step = 0.01;
  CHECK_THROWS_AS(backward_sample(
                      [](const std::vector<double>& y, double) { return y; }, sched, 1,
                      0, nullptr, 0.0, 2),
                  std::invalid_argument);
}

TEST_CASE("analytic-score sampling recovers the on-support law") {
  const std::size_t D = 8, d0 = 2;
  const SubspaceSpec spec = sample_basis(D, d0, 27);
  const auto latent = LatentMixtureSpec::standard_gaussian(d0);
  DiffusionSchedule sched;
  sched.horizon = 5.0;
  sched.early_stop = 0.01;
  sched.step = 0.01;
  ScoreFn score = [&](const std::vector<double>& x, double t) {
    return decompose_score(spec, latent, x, t, sched).total;
  };
  const auto report = backward_sample(score, sched, 5000, 28, &spec.basis);
  CHECK(report.subspace_error <= 0.15);
  CHECK(report.orth_cov_spectral <= 1.5 * std::exp(1.0) * (sched.early_stop + sched.step));
}

TEST_CASE("halving the step size halves the discretization error") {
  const std::size_t D = 4, d0 = 2;
  const SubspaceSpec spec = sample_basis(D, d0, 29);
  const auto latent = LatentMixtureSpec::standard_gaussian(d0);
  auto run_with_mu = [&](double mu) {
    DiffusionSchedule sched;
    sched.horizon = 2.0;
    sched.early_stop = 0.04;
    sched.step = mu;
    ScoreFn score = [&](const std::vector<double>& x, double t) {
      return decompose_score(spec, latent, x, t, sched).total;
    };
    // shared Brownian path refined at the finest grid used in the sweep
    return backward_sample(score, sched, 50, 30, nullptr, 0.01, D).samples;
  };
  const auto y4 = run_with_mu(0.04);
  const auto y2 = run_with_mu(0.02);
  const auto y1 = run_with_mu(0.01);
  // pathwise mean change of the terminal samples is O(mu) on a shared path
  auto mean_change = [](const std::vector<std::vector<double>>& a,
                        const std::vector<std::vector<double>>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += norm2(vec_sub(a[i], b[i]));
    return acc / (double)a.size();
  };
  const double d42 = mean_change(y4, y2);
  const double d21 = mean_change(y2, y1);
  const double ratio = d42 / d21;
  CHECK(ratio >= 1.5);
  CHECK(ratio <= 2.5);
}

TEST_CASE("subspace error basics") {
  const SubspaceSpec spec = sample_basis(6, 2, 31);
  CHECK(subspace_error(spec.basis, spec.basis) == doctest::Approx(0.0).epsilon(1e-12));

  // rotated basis spans the same subspace
  const double c = std::cos(0.7), s = std::sin(0.7);
  DenseMatrix rot(2, 2);
  rot(0, 0) = c;
  rot(0, 1) = -s;
  rot(1, 0) = s;
  rot(1, 1) = c;
  const DenseMatrix rotated = spec.basis * rot;
  CHECK(subspace_error(rotated, spec.basis) == doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("orthogonal complement gives error 2 d0") {
  // D = 4, d0 = 2: split the identity into two complementary bases.
  DenseMatrix b1(4, 2), b2(4, 2);
  b1(0, 0) = 1.0;
  b1(1, 1) = 1.0;
  b2(2, 0) = 1.0;
  b2(3, 1) = 1.0;
  CHECK(subspace_error(b1, b2) == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("subspace error warns on non-orthonormal inputs") {
  const SubspaceSpec spec = sample_basis(5, 2, 32);
  DenseMatrix skew = spec.basis;
  skew(0, 0) += 0.3;
  bool warn = false;
  subspace_error(skew, spec.basis, &warn);
  CHECK(warn);
  warn = true;
  subspace_error(spec.basis, spec.basis, &warn);
  CHECK_FALSE(warn);
}

TEST_CASE("dist proxy is zero on identical samples") {
  const SubspaceSpec spec = sample_basis(4, 2, 33);
  const auto latent = LatentMixtureSpec::standard_gaussian(2);
  const auto xs = sample_dataset(spec, latent, 500, 34);
  CHECK(dist_proxy(xs, xs, 8, 35) == 0.0);
}

TEST_CASE("dist proxy is small across independent draws of one law") {
  const SubspaceSpec spec = sample_basis(4, 2, 36);
  const auto latent = LatentMixtureSpec::standard_gaussian(2);
  const auto a = sample_dataset(spec, latent, 10000, 37);
  const auto b = sample_dataset(spec, latent, 10000, 38);
  CHECK(dist_proxy(a, b, 16, 39) <= 0.05);
}

TEST_CASE("dist proxy separates shifted Gaussians") {
  CounterRng rng(40);
  std::vector<std::vector<double>> a, b;
  for (int i = 0; i < 4000; ++i) {
    a.push_back({rng.normal()});
    b.push_back({rng.normal() + 3.0});
  }
  CHECK(dist_proxy(a, b, 8, 41) >= 0.8);
}

TEST_CASE("dist proxy is symmetric") {
  CounterRng rng(42);
  std::vector<std::vector<double>> a, b;
  for (int i = 0; i < 500; ++i) {
    a.push_back({rng.normal(), rng.normal()});
    b.push_back({0.5 * rng.normal(), rng.normal() + 0.3});
  }
  CHECK(dist_proxy(a, b, 8, 43) == doctest::Approx(dist_proxy(b, a, 8, 43)).epsilon(1e-12));
}
