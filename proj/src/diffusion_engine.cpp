#include "ditlab/diffusion_engine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "ditlab/rng.hpp"

namespace ditlab {

namespace {

std::vector<double> dsm_target(const std::vector<double>& x0,
                               const std::vector<double>& x_t, double t) {
  const double beta = DiffusionSchedule::beta(t);
  const double sigma = DiffusionSchedule::sigma(t);
  std::vector<double> tgt(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) tgt[i] = (beta * x0[i] - x_t[i]) / sigma;
  return tgt;
}

void check_batch_time(double t, const DiffusionSchedule& schedule) {
  if (t < schedule.early_stop || t > schedule.horizon)
    throw std::out_of_range("dsm_loss: t outside [T0, T]");
}

}  // namespace

double dsm_loss(const ScoreNetwork& net, const std::vector<DsmBatchItem>& batch,
                const DiffusionSchedule& schedule) {
  return dsm_loss_with_score(
      [&net, &schedule](const std::vector<double>& x, double t) {
        return score_forward(net, x, t, schedule);
      },
      batch, schedule);
}

double dsm_loss_with_score(
    const std::function<std::vector<double>(const std::vector<double>&, double)>& score,
    const std::vector<DsmBatchItem>& batch, const DiffusionSchedule& schedule) {
  if (batch.empty()) throw std::invalid_argument("dsm_loss: empty batch");
  double total = 0.0;
  for (const auto& item : batch) {
    check_batch_time(item.t, schedule);
    const std::vector<double> s = score(item.x_t, item.t);
    const std::vector<double> tgt = dsm_target(item.x0, item.x_t, item.t);
    double sq = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double r = s[i] - tgt[i];
      sq += r * r;
    }
    total += sq;
  }
  return total / (double)batch.size();
}

TrainResult train(const TrainConfig& config,
                  const std::vector<std::vector<double>>& dataset, ScoreNetwork& net,
                  const DenseMatrix* reference_basis) {
  config.schedule.validate();
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  if (config.learning_rate < 0.0) throw std::invalid_argument("train: negative learning rate");
  net.validate();

  const std::size_t n = std::min(config.n_samples, dataset.size());
  CounterRng pick_rng(config.seed, /*stream=*/0x7121);
  CounterRng noise_rng(config.seed, /*stream=*/0x7122);

  TrainResult result;
  result.history.reserve(config.steps);
  for (std::size_t step = 0; step < config.steps; ++step) {
    NetworkGrads grads = NetworkGrads::zeros_like(net);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const std::size_t idx = (std::size_t)(pick_rng.uniform() * (double)n) % n;
      const double t = config.schedule.early_stop +
                       pick_rng.uniform() *
                           (config.schedule.horizon - config.schedule.early_stop);
      const std::vector<double>& x0 = dataset[idx];
      const double beta = DiffusionSchedule::beta(t);
      const double sqrt_sigma = std::sqrt(DiffusionSchedule::sigma(t));
      std::vector<double> x_t(x0.size()), target(x0.size());
      for (std::size_t i = 0; i < x0.size(); ++i) {
        const double z = noise_rng.normal();
        x_t[i] = beta * x0[i] + sqrt_sigma * z;
        target[i] = -z / sqrt_sigma;  // (beta x0 - x_t) / sigma
      }
      loss_sum += score_backward(net, x_t, t, config.schedule, target,
                                 config.use_fast_grad, config.eps_target, grads);
    }
    const double loss = loss_sum / (double)config.batch_size;
    if (!std::isfinite(loss))
      throw std::runtime_error("train: non-finite loss at step " + std::to_string(step));
    grads.scale(1.0 / (double)config.batch_size);
    apply_update(net, grads, config.learning_rate);

    TrainHistoryRow row;
    row.step = step;
    row.loss = loss;
    row.subspace_error = reference_basis
                             ? subspace_error(net.encoder, *reference_basis)
                             : std::numeric_limits<double>::quiet_NaN();
    result.history.push_back(row);
  }
  return result;
}

namespace {

// Spectral norm of a symmetric covariance given as sample rows via the Gram
// trick; cov = rows^T rows / n  (rows already centered or raw second moment).
double spectral_of_second_moment(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return 0.0;
  const std::size_t d = rows.front().size();
  DenseMatrix cov(d, d);
  for (const auto& r : rows)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) cov(i, j) += r[i] * r[j];
  cov = cov.scaled(1.0 / (double)rows.size());
  return norm(cov, MatrixNorm::op2);
}

}  // namespace

SampleRunReport backward_sample(const ScoreFn& score, const DiffusionSchedule& schedule,
                                std::size_t n, std::uint64_t seed,
                                const DenseMatrix* basis, double noise_grid,
                                std::size_t ambient_dim) {
  schedule.validate();
  const double span = schedule.horizon - schedule.early_stop;
  const double mu = schedule.step;
  const double steps_real = span / mu;
  const std::size_t steps = (std::size_t)std::llround(steps_real);
  if (std::fabs(steps_real - (double)steps) > 1e-9)
    throw std::invalid_argument("backward_sample: step does not divide T - T0");
  if (noise_grid <= 0.0) noise_grid = mu;
  const double cells_real = mu / noise_grid;
  const std::size_t cells_per_step = (std::size_t)std::llround(cells_real);
  if (cells_per_step == 0 || std::fabs(cells_real - (double)cells_per_step) > 1e-9)
    throw std::invalid_argument("backward_sample: noise_grid must divide the step");

  std::size_t dim = ambient_dim;
  if (dim == 0 && basis) dim = basis->rows();
  if (dim == 0) throw std::invalid_argument("backward_sample: ambient dimension unknown");

  CounterRng init_rng(seed, /*stream=*/0x5A17);
  const CounterRng path_rng(seed, /*stream=*/0x5A18);
  const std::size_t total_cells = steps * cells_per_step;

  SampleRunReport report;
  report.steps_taken = steps;
  report.samples.reserve(n);
  const double sqrt_grid = std::sqrt(noise_grid);

  for (std::size_t chain = 0; chain < n; ++chain) {
    std::vector<double> y(dim);
    for (auto& v : y) v = init_rng.normal();
    for (std::size_t k = 0; k < steps; ++k) {
      const double t_now = schedule.horizon - (double)k * mu;
      const std::vector<double> s = score(y, t_now);
      for (double v : s)
        if (!std::isfinite(v))
          throw std::runtime_error("backward_sample: score returned non-finite value");
      for (std::size_t i = 0; i < dim; ++i) {
        double dw = 0.0;
        for (std::size_t c = 0; c < cells_per_step; ++c) {
          const std::uint64_t cell = k * cells_per_step + c;
          const std::uint64_t index = (chain * total_cells + cell) * dim + i;
          dw += sqrt_grid * path_rng.normal_at(index);
        }
        y[i] += mu * (0.5 * y[i] + s[i]) + dw;
      }
    }
    report.samples.push_back(std::move(y));
  }

  if (basis) {
    const DenseMatrix& b = *basis;
    const std::size_t d0 = b.cols();
    std::vector<std::vector<double>> latent_rows, orth_rows;
    latent_rows.reserve(n);
    orth_rows.reserve(n);
    for (const auto& y : report.samples) {
      std::vector<double> h = b.mul_vec_transposed(y);
      std::vector<double> proj = b.mul_vec(h);
      std::vector<double> orth(y.size());
      for (std::size_t i = 0; i < y.size(); ++i) orth[i] = y[i] - proj[i];
      latent_rows.push_back(std::move(h));
      orth_rows.push_back(std::move(orth));
    }
    DenseMatrix cov_lat(d0, d0);
    for (const auto& h : latent_rows)
      for (std::size_t i = 0; i < d0; ++i)
        for (std::size_t j = 0; j < d0; ++j) cov_lat(i, j) += h[i] * h[j];
    cov_lat = cov_lat.scaled(1.0 / (double)n);
    cov_lat -= DenseMatrix::identity(d0);
    report.subspace_error = norm(cov_lat, MatrixNorm::op2);
    report.orth_cov_spectral = spectral_of_second_moment(orth_rows);
  }
  return report;
}

double subspace_error(const DenseMatrix& w_b, const DenseMatrix& b, bool* warning) {
  if (w_b.rows() != b.rows())
    throw std::invalid_argument("subspace_error: ambient dimensions differ");
  auto orthonormal = [](const DenseMatrix& m) {
    DenseMatrix g = m.transposed() * m;
    g -= DenseMatrix::identity(m.cols());
    return norm(g, MatrixNorm::max) <= 1e-8;
  };
  if (warning) *warning = !(orthonormal(w_b) && orthonormal(b));

  // Literal Frobenius difference of the two projectors; stays meaningful even
  // when an input fails the orthonormality check above.
  DenseMatrix diff = mul_abt(w_b, w_b);
  diff -= mul_abt(b, b);
  const double f = norm(diff, MatrixNorm::frobenius);
  return f * f;
}

double dist_proxy(const std::vector<std::vector<double>>& samples_a,
                  const std::vector<std::vector<double>>& samples_b,
                  std::size_t n_slices, std::uint64_t seed) {
  if (samples_a.empty() || samples_b.empty())
    throw std::invalid_argument("dist_proxy: empty sample set");
  const std::size_t d = samples_a.front().size();
  if (samples_b.front().size() != d)
    throw std::invalid_argument("dist_proxy: dimension mismatch");

  CounterRng rng(seed, /*stream=*/0x51CE);
  double total = 0.0;
  std::vector<double> pa(samples_a.size()), pb(samples_b.size());
  for (std::size_t s = 0; s < n_slices; ++s) {
    std::vector<double> dir(d);
    double nd = 0.0;
    do {
      for (auto& v : dir) v = rng.normal();
      nd = norm2(dir);
    } while (nd < 1e-12);
    for (auto& v : dir) v /= nd;

    for (std::size_t i = 0; i < samples_a.size(); ++i) pa[i] = dot(samples_a[i], dir);
    for (std::size_t i = 0; i < samples_b.size(); ++i) pb[i] = dot(samples_b[i], dir);
    std::sort(pa.begin(), pa.end());
    std::sort(pb.begin(), pb.end());

    // Two-sample KS statistic by merge scan; ties advance both sides.
    double ks = 0.0;
    std::size_t ia = 0, ib = 0;
    while (ia < pa.size() || ib < pb.size()) {
      double v;
      if (ia < pa.size() && ib < pb.size())
        v = std::min(pa[ia], pb[ib]);
      else
        v = ia < pa.size() ? pa[ia] : pb[ib];
      while (ia < pa.size() && pa[ia] == v) ++ia;
      while (ib < pb.size() && pb[ib] == v) ++ib;
      const double fa = (double)ia / (double)pa.size();
      const double fb = (double)ib / (double)pb.size();
      ks = std::max(ks, std::fabs(fa - fb));
    }
    total += ks;
  }
  return total / (double)n_slices;
}

void write_history_csv(const std::string& path, const std::vector<TrainHistoryRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_history_csv: cannot open " + path);
  out.precision(17);
  out << "step, loss, subspace_error\n";
  for (const auto& r : rows)
    out << r.step << ", " << r.loss << ", " << r.subspace_error << "\n";
}

}  // namespace ditlab
