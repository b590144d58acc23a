#include "ditlab/analytic_score.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ditlab {

namespace {

constexpr double kTwoPi = 6.283185307179586477;

struct ComponentLogTerm {
  double log_weighted_density;  // log w_k + log N(h_bar; beta m_k, v_k I)
  double variance;              // v_k = beta^2 cov_scale + sigma
};

std::vector<ComponentLogTerm> component_terms(const LatentMixtureSpec& latent,
                                              const std::vector<double>& h_bar,
                                              double t) {
  const double beta = DiffusionSchedule::beta(t);
  const double sigma = DiffusionSchedule::sigma(t);
  const std::size_t d0 = h_bar.size();
  std::vector<ComponentLogTerm> terms;
  terms.reserve(latent.components.size());
  for (const auto& c : latent.components) {
    const double v = beta * beta * c.cov_scale + sigma;
    if (v <= 0.0)
      throw std::domain_error("latent_score: singular noised density (variance 0)");
    double sq = 0.0;
    for (std::size_t j = 0; j < d0; ++j) {
      const double r = h_bar[j] - beta * c.mean[j];
      sq += r * r;
    }
    const double logdens = -0.5 * sq / v -
                           0.5 * static_cast<double>(d0) * std::log(kTwoPi * v) +
                           std::log(c.weight);
    terms.push_back({logdens, v});
  }
  return terms;
}

void check_t(double t, const DiffusionSchedule& schedule, const char* where) {
  if (!(t > 0.0) || t > schedule.horizon)
    throw std::domain_error(std::string(where) + ": t must lie in (0, T]");
}

}  // namespace

double latent_log_density(const LatentMixtureSpec& latent,
                          const std::vector<double>& h_bar, double t,
                          const DiffusionSchedule& schedule) {
  check_t(t, schedule, "latent_log_density");
  latent.validate();
  const auto terms = component_terms(latent, h_bar, t);
  double m = -std::numeric_limits<double>::infinity();
  for (const auto& term : terms) m = std::max(m, term.log_weighted_density);
  double acc = 0.0;
  for (const auto& term : terms) acc += std::exp(term.log_weighted_density - m);
  return m + std::log(acc);
}

std::vector<double> latent_score(const LatentMixtureSpec& latent,
                                 const std::vector<double>& h_bar, double t,
                                 const DiffusionSchedule& schedule) {
  check_t(t, schedule, "latent_score");
  latent.validate();
  if (h_bar.size() != latent.dim())
    throw std::invalid_argument("latent_score: h_bar dimension mismatch");
  const double beta = DiffusionSchedule::beta(t);
  const auto terms = component_terms(latent, h_bar, t);

  double m = -std::numeric_limits<double>::infinity();
  for (const auto& term : terms) m = std::max(m, term.log_weighted_density);
  double denom = 0.0;
  for (const auto& term : terms) denom += std::exp(term.log_weighted_density - m);

  std::vector<double> score(h_bar.size(), 0.0);
  for (std::size_t k = 0; k < terms.size(); ++k) {
    const double resp = std::exp(terms[k].log_weighted_density - m) / denom;
    if (resp == 0.0) continue;
    const auto& c = latent.components[k];
    const double inv_v = 1.0 / terms[k].variance;
    for (std::size_t j = 0; j < score.size(); ++j)
      score[j] -= resp * inv_v * (h_bar[j] - beta * c.mean[j]);
  }
  return score;
}

ScoreDecomposition decompose_score(const SubspaceSpec& spec,
                                   const LatentMixtureSpec& latent,
                                   const std::vector<double>& x_bar, double t,
                                   const DiffusionSchedule& schedule) {
  check_t(t, schedule, "decompose_score");
  if (x_bar.size() != spec.ambient_dim)
    throw std::invalid_argument("decompose_score: x_bar dimension mismatch");
  const double sigma = DiffusionSchedule::sigma(t);

  const std::vector<double> h_bar = spec.basis.mul_vec_transposed(x_bar);
  const std::vector<double> ls = latent_score(latent, h_bar, t, schedule);

  ScoreDecomposition out;
  out.on_support = spec.basis.mul_vec(ls);
  const std::vector<double> proj = spec.basis.mul_vec(h_bar);  // B B^T x_bar
  out.orthogonal.resize(x_bar.size());
  for (std::size_t i = 0; i < x_bar.size(); ++i)
    out.orthogonal[i] = -(x_bar[i] - proj[i]) / sigma;
  out.total = vec_add(out.on_support, out.orthogonal);
  return out;
}

}  // namespace ditlab
