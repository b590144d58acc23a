#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ditlab/dense_matrix.hpp"

namespace ditlab {

/// Unknown-subspace generator spec: ambient dimension D, latent dimension d0,
/// and a D x d0 basis with orthonormal columns.
struct SubspaceSpec {
  std::size_t ambient_dim = 0;
  std::size_t latent_dim = 0;
  DenseMatrix basis;  // D x d0, B^T B == I to 1e-10
  std::uint64_t seed = 0;

  void validate() const;
};

struct MixtureComponent {
  double weight = 1.0;
  std::vector<double> mean;
  double cov_scale = 1.0;  // isotropic covariance cov_scale * I; 0 = point mass
};

/// Finite isotropic Gaussian mixture over the latent space.
struct LatentMixtureSpec {
  std::vector<MixtureComponent> components;
  std::optional<double> lipschitz_hint;  // L_{s+}, informational only

  void validate() const;
  std::size_t dim() const { return components.empty() ? 0 : components.front().mean.size(); }

  static LatentMixtureSpec standard_gaussian(std::size_t d0);
};

/// Variance-preserving schedule: beta(t) = exp(-t/2), sigma(t) = 1 - exp(-t).
/// Weight w(t) and loss weight gamma(t) are both pinned to 1.
struct DiffusionSchedule {
  double horizon = 5.0;      // T
  double early_stop = 0.01;  // T0
  double step = 0.01;        // mu

  static double beta(double t) { return std::exp(-0.5 * t); }
  static double sigma(double t) { return 1.0 - std::exp(-t); }
  static constexpr double weight = 1.0;       // w(t)
  static constexpr double loss_weight = 1.0;  // gamma(t)

  void validate() const;
};

/// Draws a D x d0 basis with orthonormal columns (Gram-Schmidt on seeded
/// Gaussian entries). Deterministic in the seed.
SubspaceSpec sample_basis(std::size_t ambient_dim, std::size_t latent_dim,
                          std::uint64_t seed);

/// n samples x = B h with h drawn from the mixture. Every sample lies on the
/// subspace exactly up to rounding.
std::vector<std::vector<double>> sample_dataset(const SubspaceSpec& spec,
                                                const LatentMixtureSpec& latent,
                                                std::size_t n, std::uint64_t seed);

/// Forward-noising kernel: x_t = beta(t) x0 + sqrt(sigma(t)) z, z ~ N(0, I).
std::vector<double> perturb(const std::vector<double>& x0, double t,
                            const DiffusionSchedule& schedule, std::uint64_t seed);

/// Writes "sample_id, x_0, ..., x_{D-1}" rows plus a JSON sidecar with the
/// generator configuration; the basis goes to its own CSV for oracle use.
void export_dataset_csv(const std::string& csv_path, const std::string& sidecar_json_path,
                        const std::string& basis_csv_path, const SubspaceSpec& spec,
                        const LatentMixtureSpec& latent,
                        const std::vector<std::vector<double>>& samples);

}  // namespace ditlab
