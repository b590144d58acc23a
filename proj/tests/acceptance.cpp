// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Tolerances and instance parameters are pinned in code.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>
#include <vector>

#include "ditlab/analytic_score.hpp"
#include "ditlab/cli_bench.hpp"
#include "ditlab/diffusion_engine.hpp"
#include "ditlab/fast_attention.hpp"
#include "ditlab/rng.hpp"
#include "ditlab/score_network.hpp"
#include "ditlab/subspace_data.hpp"
#include "ditlab/ua_constructor.hpp"

using namespace ditlab;

namespace {

int g_failures = 0;

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
        .count();
  }
};

void report(int criterion, bool ok, double seconds, double limit_seconds,
            const std::string& detail) {
  const bool in_time = seconds < limit_seconds;
  const bool pass = ok && in_time;
  if (!pass) ++g_failures;
  std::printf("[%s] criterion %d: %s (%.1f s, limit %.0f s)\n", pass ? "PASS" : "FAIL",
              criterion, detail.c_str(), seconds, limit_seconds);
  std::fflush(stdout);
}

AttentionInstance random_instance(std::size_t d, std::size_t L, std::uint64_t seed,
                                  double scale) {
  CounterRng rng(seed);
  auto fill = [&rng, scale](DenseMatrix& m) {
    for (double& v : m.data()) v = scale * rng.normal();
  };
  AttentionInstance inst;
  inst.a1 = DenseMatrix(d, L);
  inst.a2 = DenseMatrix(d, L);
  inst.a3 = DenseMatrix(d, L);
  inst.w = DenseMatrix(d, d);
  inst.w_ov = DenseMatrix(d, d);
  inst.y = DenseMatrix(d, L);
  fill(inst.a1);
  fill(inst.a2);
  fill(inst.a3);
  fill(inst.w);
  fill(inst.w_ov);
  fill(inst.y);
  return inst;
}

// 1. grad_exact vs central finite differences of L0.
void criterion_1() {
  Timer timer;
  double worst_rel = 0.0;
  CounterRng seeds(1001);
  int count = 0;
  for (std::size_t d = 3; d <= 6 && count < 20; ++d)
    for (std::size_t L : {8, 12, 16, 24, 32}) {
      if (count >= 20) break;
      ++count;
      AttentionInstance inst = random_instance(d, L, seeds.next_u64(), 0.3);
      const DenseMatrix g = grad_exact(inst);
      const double step = 1e-5;
      double max_abs = 0.0;
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b) {
          AttentionInstance ip = inst, im = inst;
          ip.w(a, b) += step;
          im.w(a, b) -= step;
          const double fd = (loss_value(ip) - loss_value(im)) / (2.0 * step);
          max_abs = std::max(max_abs, std::fabs(fd - g(a, b)));
        }
      worst_rel = std::max(worst_rel, max_abs / std::max(1e-12, norm(g, MatrixNorm::max)));
    }
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "grad_exact vs finite differences on %d instances, rel err %.2e <= 1e-5",
                count, worst_rel);
  report(1, worst_rel <= 1e-5, timer.seconds(), 30.0, buf);
}

// 2. chained low-rank gradient across the L sweep.
void criterion_2() {
  Timer timer;
  double worst = 0.0;
  bool ok = true;
  for (std::size_t L : {16, 32, 64, 128}) {
    const std::size_t d = (std::size_t)std::ceil(std::log2((double)L));
    const double gamma = 0.4 * std::sqrt(std::log((double)L));
    AttentionInstance inst = make_bounded_instance(d, L, gamma, 2000 + L);
    const DenseMatrix fast = grad_fast(inst, 1e-4);
    const DenseMatrix exact = grad_exact(inst);
    const double err = norm(fast - exact, MatrixNorm::max);
    worst = std::max(worst, err);
    ok = ok && err <= 1e-4;
  }
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "grad_fast vs grad_exact over L in {16..128}, max err %.2e <= 1e-4",
                worst);
  report(2, ok, timer.seconds(), 120.0, buf);
}

// 3. fast inference error and memory envelope at L = 256.
void criterion_3() {
  Timer timer;
  const std::size_t L = 256, d = 8;
  AttentionInstance inst = make_bounded_instance(d, L, 0.3, 3001);
  FastPathStats stats;
  const DenseMatrix fast = inference_fast(inst, 1e-6, &stats);
  const DenseMatrix exact = attention_exact(inst);
  const double err = norm(fast - exact, MatrixNorm::max);
  const double mem_budget = 8.0 * (double)L * (double)(stats.rank_k1 + d);
  const bool ok = err <= 1e-6 && (double)stats.peak_doubles <= mem_budget;
  char buf[200];
  std::snprintf(buf, sizeof buf,
                "inference_fast at L=256 d=8: err %.2e <= 1e-6, peak %.0f doubles <= "
                "8 L (k1+d) = %.0f (k1 = %zu)",
                err, (double)stats.peak_doubles, mem_budget, stats.rank_k1);
  report(3, ok, timer.seconds(), 30.0, buf);
}

// 4. measured quadratic vs almost-linear scaling.
void criterion_4() {
  Timer timer;
  const BenchResult r = bench_scaling({512, 1024, 2048, 4096, 8192}, 0.045, 5, 1e-3, 4001);
  bool err_ok = true;
  for (const auto& row : r.rows) err_ok = err_ok && row.max_err <= 1e-3;
  const bool ok = r.exact_slope >= 1.7 && r.fast_slope <= 1.35 && err_ok;
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "scaling slopes: exact %.2f >= 1.7, fast %.2f <= 1.35, row errors <= 1e-3",
                r.exact_slope, r.fast_slope);
  report(4, ok, timer.seconds(), 300.0, buf);
}

// 5. rank growth phase behavior at L = 4096, d = 12.
void criterion_5() {
  Timer timer;
  const std::vector<double> cs{0.0, 0.1, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0};
  const auto rows = phase_sweep(4096, 12, cs, 1e-4);
  bool monotone = true;
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].rank_k1 < rows[i - 1].rank_k1) monotone = false;
  bool boundary = true;
  for (const auto& row : rows) {
    if (row.c <= 0.5 && !row.feasible) boundary = false;
    if (row.c >= 2.0 && row.feasible) boundary = false;
  }
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "phase sweep at L=4096 d=12: rank monotone %s, feasible at c<=0.5 and "
                "infeasible at c>=2 %s",
                monotone ? "yes" : "no", boundary ? "yes" : "no");
  report(5, monotone && boundary, timer.seconds(), 10.0, buf);
}

// 6. the grid approximation pipeline on the d=1, L=2, delta=1/2 grid.
void criterion_6() {
  Timer timer;
  const UaVerifyReport rep = verify_grid(1, 2, 0.5, 60001);
  const bool formulas = rep.t_l == 128.0 && rep.t_r == 528.0;
  const bool props = rep.exhaustive && rep.prop_distinct_within &&
                     rep.prop_distinct_across && rep.prop_ongrid_in_range &&
                     rep.prop_offgrid_out_of_range;
  const bool soften_ok = rep.soften_decreasing && rep.soften_max_deviation <= rep.soften_bound;
  const bool ok = formulas && props && rep.quantizer_ok && rep.memorizer_ok && soften_ok;
  char buf[240];
  std::snprintf(buf, sizeof buf,
                "quantizer %s; t_l=%g t_r=%g from the cited formulas; contextual "
                "properties 1-4 %s (separating interval [%g, %g]); memorizer %s; "
                "softened dev %.1e <= bound %.1e",
                rep.quantizer_ok ? "exact" : "BROKEN", rep.t_l, rep.t_r,
                props ? "hold exhaustively" : "FAIL", rep.cert_lo, rep.cert_hi,
                rep.memorizer_ok ? "exact" : "BROKEN", rep.soften_max_deviation,
                rep.soften_bound);
  report(6, ok, timer.seconds(), 60.0, buf);
  if (!rep.formula_interval_ok)
    std::printf(
        "       note: the printed t_l is not a valid lower bound for the literal\n"
        "       selective-shift dynamics (on-grid ids start at %g < t_l = %g); the\n"
        "       separation gate is certified by enumeration instead. See\n"
        "       acceptance_c6_formula_interval for the strict check.\n",
        rep.cert_lo + 0.25, rep.t_l);
}

// 7. sampler fidelity with the analytic score.
void criterion_7() {
  Timer timer;
  const std::size_t D = 8, d0 = 2;
  const SubspaceSpec spec = sample_basis(D, d0, 70001);
  const auto latent = LatentMixtureSpec::standard_gaussian(d0);
  DiffusionSchedule sched;
  sched.horizon = 5.0;
  sched.early_stop = 0.01;
  sched.step = 0.01;
  ScoreFn score = [&](const std::vector<double>& x, double t) {
    return decompose_score(spec, latent, x, t, sched).total;
  };
  const SampleRunReport rep = backward_sample(score, sched, 5000, 70002, &spec.basis);
  const double orth_limit = 1.5 * std::exp(1.0) * (sched.early_stop + sched.step);
  const bool ok = rep.subspace_error <= 0.15 && rep.orth_cov_spectral <= orth_limit &&
                  rep.steps_taken == 499;
  char buf[200];
  std::snprintf(buf, sizeof buf,
                "sampler: on-support cov err %.3f <= 0.15, orth cov %.4f <= %.4f, "
                "steps %zu",
                rep.subspace_error, rep.orth_cov_spectral, orth_limit, rep.steps_taken);
  report(7, ok, timer.seconds(), 180.0, buf);
}

// 8. end-to-end training recovers the subspace; fast/exact parity.
void criterion_8() {
  Timer timer;
  const std::size_t D = 16, d0 = 4;
  const SubspaceSpec spec = sample_basis(D, d0, 80001);
  const auto latent = LatentMixtureSpec::standard_gaussian(d0);
  const auto dataset = sample_dataset(spec, latent, 4096, 80002);
  const SubspaceSpec enc = sample_basis(D, d0, 80003);
  ScoreNetwork net = ScoreNetwork::make(enc.basis, ReshapeSpec::image(2, 2), 1, 1, 2, 4,
                                        0.05, 80004);
  TrainConfig cfg;
  cfg.n_samples = dataset.size();
  cfg.steps = 3000;
  cfg.batch_size = 16;
  cfg.learning_rate = 1e-4;
  cfg.seed = 80005;
  train(cfg, dataset, net, &spec.basis);
  const double err = subspace_error(net.encoder, spec.basis);

  // parity invariant on a non-degenerate (L = 4) one-block net
  const SubspaceSpec spec2 = sample_basis(20, 16, 80006);
  const auto dataset2 =
      sample_dataset(spec2, LatentMixtureSpec::standard_gaussian(16), 32, 80007);
  const SubspaceSpec enc2 = sample_basis(20, 16, 80008);
  ScoreNetwork net_exact = ScoreNetwork::make(enc2.basis, ReshapeSpec::image(4, 2), 1, 1,
                                              2, 4, 0.1, 80009);
  ScoreNetwork net_fast = net_exact;
  TrainConfig pcfg;
  pcfg.steps = 1;
  pcfg.batch_size = 4;
  pcfg.learning_rate = 1e-3;
  pcfg.seed = 80010;
  pcfg.eps_target = 1e-8;
  pcfg.use_fast_grad = false;
  train(pcfg, dataset2, net_exact);
  pcfg.use_fast_grad = true;
  train(pcfg, dataset2, net_fast);
  double parity = norm(net_exact.encoder - net_fast.encoder, MatrixNorm::max);
  for (std::size_t h = 0; h < net_exact.blocks[0].heads; ++h) {
    parity = std::max(parity, norm(net_exact.blocks[0].w_k[h] - net_fast.blocks[0].w_k[h],
                                   MatrixNorm::max));
    parity = std::max(parity, norm(net_exact.blocks[0].w_q[h] - net_fast.blocks[0].w_q[h],
                                   MatrixNorm::max));
  }

  const bool ok = err <= 0.2 && parity <= 1e-6;
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "training: subspace error %.3f <= 0.2 after 3000 steps; fast/exact "
                "parity %.1e <= 1e-6",
                err, parity);
  report(8, ok, timer.seconds(), 600.0, buf);
}

// 9. schedule identity and the score-decomposition identity.
void criterion_9() {
  Timer timer;
  bool schedule_ok = true;
  for (int i = 0; i < 100; ++i) {
    const double t = 0.01 + 0.05 * i;
    const double b = DiffusionSchedule::beta(t);
    if (std::fabs(b * b + DiffusionSchedule::sigma(t) - 1.0) > 1e-15) schedule_ok = false;
  }

  // Score decomposition against dense quadrature + finite differences at D=3, d0=1.
  const SubspaceSpec spec = sample_basis(3, 1, 90001);
  LatentMixtureSpec latent;
  latent.components.push_back({0.6, {0.8}, 0.5});
  latent.components.push_back({0.4, {-1.1}, 0.9});
  const DiffusionSchedule sched;
  double worst = 0.0;
  CounterRng rng(90002);
  for (int trial = 0; trial < 4; ++trial) {
    const double t = 0.4 + 0.5 * trial;
    const double beta = DiffusionSchedule::beta(t);
    const double sigma = DiffusionSchedule::sigma(t);
    std::vector<double> x(3);
    for (auto& v : x) v = rng.normal();
    auto log_pt = [&](const std::vector<double>& xx) {
      const int n_grid = 4001;
      const double lo = -12.0, hi = 12.0;
      const double dh = (hi - lo) / (n_grid - 1);
      double max_log = -1e300;
      std::vector<double> logs(n_grid);
      for (int i = 0; i < n_grid; ++i) {
        const double h = lo + i * dh;
        double ph = 0.0;
        for (const auto& c : latent.components) {
          const double r = h - c.mean[0];
          ph += c.weight * std::exp(-0.5 * r * r / c.cov_scale) /
                std::sqrt(2.0 * M_PI * c.cov_scale);
        }
        double sq = 0.0;
        for (int a = 0; a < 3; ++a) {
          const double r = xx[a] - beta * spec.basis(a, 0) * h;
          sq += r * r;
        }
        logs[i] = -0.5 * sq / sigma + std::log(std::max(ph, 1e-300));
        max_log = std::max(max_log, logs[i]);
      }
      double acc = 0.0;
      for (int i = 0; i < n_grid; ++i)
        acc += ((i == 0 || i == n_grid - 1) ? 0.5 : 1.0) * std::exp(logs[i] - max_log);
      return max_log + std::log(acc * dh);
    };
    const auto dec = decompose_score(spec, latent, x, t, sched);
    const double step = 1e-4;
    for (int a = 0; a < 3; ++a) {
      std::vector<double> xp = x, xm = x;
      xp[a] += step;
      xm[a] -= step;
      const double fd = (log_pt(xp) - log_pt(xm)) / (2.0 * step);
      worst = std::max(worst, std::fabs(dec.total[a] - fd));
    }
  }
  const bool ok = schedule_ok && worst <= 1e-3;
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "beta^2 + sigma == 1 on 100 grid points %s; decomposition vs quadrature "
                "oracle, abs err %.2e <= 1e-3",
                schedule_ok ? "holds" : "FAILS", worst);
  report(9, ok, timer.seconds(), 60.0, buf);
}

}  // namespace

int main() {
  std::printf("ditlab acceptance suite\n");
  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  criterion_6();
  criterion_7();
  criterion_8();
  criterion_9();
  if (g_failures == 0)
    std::printf("all criteria passed\n");
  else
    std::printf("%d criterion(s) failed\n", g_failures);
  return g_failures == 0 ? 0 : 1;
}
