#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ditlab/score_network.hpp"
#include "ditlab/subspace_data.hpp"

namespace ditlab {

struct TrainConfig {
  std::size_t n_samples = 1024;
  std::size_t batch_size = 32;
  std::size_t steps = 1000;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  DiffusionSchedule schedule;
  bool use_fast_grad = false;   // route key/query gradients through grad_fast
  double eps_target = 1e-8;     // accuracy target for the fast gradient path
};

struct TrainHistoryRow {
  std::size_t step = 0;
  double loss = 0.0;
  double subspace_error = 0.0;  // NaN when no reference basis was supplied
};

struct TrainResult {
  std::vector<TrainHistoryRow> history;
};

struct SampleRunReport {
  std::vector<std::vector<double>> samples;  // chains at time T0
  // Spectral distance of the on-support sample covariance from B B^T
  // (equivalently, of the latent covariance from I).
  double subspace_error = 0.0;
  // Spectral norm of the orthogonal-complement sample covariance.
  double orth_cov_spectral = 0.0;
  std::size_t steps_taken = 0;
};

/// One denoising-score-matching term: mean over the batch of
/// || s_W(x_t, t) - (beta(t) x0 - x_t) / sigma(t) ||_2^2 with gamma(t) == 1.
struct DsmBatchItem {
  std::vector<double> x0;
  double t = 0.0;
  std::vector<double> x_t;
};

double dsm_loss(const ScoreNetwork& net, const std::vector<DsmBatchItem>& batch,
                const DiffusionSchedule& schedule);

/// Same loss against an arbitrary score map (oracle injection hook).
double dsm_loss_with_score(
    const std::function<std::vector<double>(const std::vector<double>&, double)>& score,
    const std::vector<DsmBatchItem>& batch, const DiffusionSchedule& schedule);

/// Minibatch gradient descent on the DSM objective: per step draw (sample,
/// time) pairs, perturb, accumulate gradients, update, re-orthonormalize the
/// encoder. Deterministic in config.seed. reference_basis, when given, is only
/// used for the per-step subspace error column.
TrainResult train(const TrainConfig& config,
                  const std::vector<std::vector<double>>& dataset, ScoreNetwork& net,
                  const DenseMatrix* reference_basis = nullptr);

using ScoreFn = std::function<std::vector<double>(const std::vector<double>&, double)>;

/// Euler-Maruyama discretization of the reverse SDE with frozen per-step
/// drift, from y ~ N(0, I_D) down to T0. noise_grid (default: the schedule
/// step) sets the Brownian refinement so runs with coarser multiples of the
/// same grid share one noise path. basis, when given, enables the covariance
/// metrics in the report.
SampleRunReport backward_sample(const ScoreFn& score, const DiffusionSchedule& schedule,
                                std::size_t n, std::uint64_t seed,
                                const DenseMatrix* basis = nullptr,
                                double noise_grid = 0.0, std::size_t ambient_dim = 0);

/// || W_B W_B^T - B B^T ||_F^2. Sets *warning when either input fails the
/// orthonormal-columns check at 1e-8.
double subspace_error(const DenseMatrix& w_b, const DenseMatrix& b,
                      bool* warning = nullptr);

/// Sliced Kolmogorov-Smirnov proxy: mean over random unit directions of the
/// two-sample KS statistic between the projected sample sets.
double dist_proxy(const std::vector<std::vector<double>>& samples_a,
                  const std::vector<std::vector<double>>& samples_b,
                  std::size_t n_slices, std::uint64_t seed);

void write_history_csv(const std::string& path, const std::vector<TrainHistoryRow>& rows);

}  // namespace ditlab
