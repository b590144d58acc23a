#pragma once

#include <vector>

#include "ditlab/subspace_data.hpp"

namespace ditlab {

/// Split of the ground-truth score at a point into the component living on
/// the subspace and the component orthogonal to it.
struct ScoreDecomposition {
  std::vector<double> on_support;  // s_plus, in span(B)
  std::vector<double> orthogonal;  // s_minus, in span(B)^perp
  std::vector<double> total;       // on_support + orthogonal
};

/// Gradient of log p_t^h at h_bar for a Gaussian-mixture latent law. The
/// noised mixture has component covariances (beta^2 cov_scale + sigma) I, so
/// the score is the responsibility-weighted sum of per-component Gaussian
/// scores, evaluated in the log domain.
std::vector<double> latent_score(const LatentMixtureSpec& latent,
                                 const std::vector<double>& h_bar, double t,
                                 const DiffusionSchedule& schedule);

/// Log density of the noised latent mixture at h_bar (log-sum-exp stabilized).
double latent_log_density(const LatentMixtureSpec& latent,
                          const std::vector<double>& h_bar, double t,
                          const DiffusionSchedule& schedule);

/// Full-space score decomposition:
///   on_support = B * latent_score(B^T x_bar),
///   orthogonal = -(I - B B^T) x_bar / sigma(t).
ScoreDecomposition decompose_score(const SubspaceSpec& spec,
                                   const LatentMixtureSpec& latent,
                                   const std::vector<double>& x_bar, double t,
                                   const DiffusionSchedule& schedule);

}  // namespace ditlab
