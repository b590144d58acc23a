#include "ditlab/subspace_data.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "ditlab/rng.hpp"
#include "json.hpp"

namespace ditlab {

void SubspaceSpec::validate() const {
  if (latent_dim > ambient_dim)
    throw std::invalid_argument("SubspaceSpec: latent_dim exceeds ambient_dim");
  if (basis.rows() != ambient_dim || basis.cols() != latent_dim)
    throw std::invalid_argument("SubspaceSpec: basis shape mismatch");
  DenseMatrix gram = basis.transposed() * basis;
  gram -= DenseMatrix::identity(latent_dim);
  if (norm(gram, MatrixNorm::max) > 1e-10)
    throw std::invalid_argument("SubspaceSpec: basis columns not orthonormal");
}

void LatentMixtureSpec::validate() const {
  if (components.empty())
    throw std::invalid_argument("LatentMixtureSpec: no components");
  const std::size_t d0 = components.front().mean.size();
  double total = 0.0;
  for (const auto& c : components) {
    if (c.weight <= 0.0)
      throw std::invalid_argument("LatentMixtureSpec: nonpositive weight");
    if (c.cov_scale < 0.0)
      throw std::invalid_argument("LatentMixtureSpec: negative cov_scale");
    if (c.mean.size() != d0)
      throw std::invalid_argument("LatentMixtureSpec: inconsistent mean lengths");
    total += c.weight;
  }
  if (std::fabs(total - 1.0) > 1e-12)
    throw std::invalid_argument("LatentMixtureSpec: weights sum to " + std::to_string(total));
}

LatentMixtureSpec LatentMixtureSpec::standard_gaussian(std::size_t d0) {
  LatentMixtureSpec spec;
  spec.components.push_back({1.0, std::vector<double>(d0, 0.0), 1.0});
  return spec;
}

void DiffusionSchedule::validate() const {
  if (!(0.0 < early_stop && early_stop < horizon))
    throw std::invalid_argument("DiffusionSchedule: need 0 < T0 < T");
  if (!(0.0 < step && step <= early_stop))
    throw std::invalid_argument("DiffusionSchedule: need 0 < mu <= T0");
}

SubspaceSpec sample_basis(std::size_t ambient_dim, std::size_t latent_dim,
                          std::uint64_t seed) {
  if (latent_dim > ambient_dim)
    throw std::invalid_argument("sample_basis: d0 > D");
  CounterRng rng(seed, /*stream=*/0xB515);
  DenseMatrix b(ambient_dim, latent_dim);
  for (std::size_t j = 0; j < latent_dim; ++j) {
    std::vector<double> v(ambient_dim);
    for (auto& e : v) e = rng.normal();
    // Modified Gram-Schmidt with one re-orthogonalization pass.
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t k = 0; k < j; ++k) {
        const std::vector<double> bk = b.col(k);
        const double proj = dot(v, bk);
        for (std::size_t i = 0; i < ambient_dim; ++i) v[i] -= proj * bk[i];
      }
    const double nv = norm2(v);
    if (nv < 1e-12) throw std::runtime_error("sample_basis: degenerate draw");
    for (auto& e : v) e /= nv;
    b.set_col(j, v);
  }
  SubspaceSpec spec{ambient_dim, latent_dim, std::move(b), seed};
  spec.validate();
  return spec;
}

namespace {

std::size_t pick_component(const LatentMixtureSpec& latent, double u) {
  double acc = 0.0;
  for (std::size_t k = 0; k < latent.components.size(); ++k) {
    acc += latent.components[k].weight;
    if (u < acc) return k;
  }
  return latent.components.size() - 1;
}

}  // namespace

std::vector<std::vector<double>> sample_dataset(const SubspaceSpec& spec,
                                                const LatentMixtureSpec& latent,
                                                std::size_t n, std::uint64_t seed) {
  spec.validate();
  latent.validate();
  if (latent.dim() != spec.latent_dim)
    throw std::invalid_argument("sample_dataset: mixture dimension mismatch");
  CounterRng rng(seed, /*stream=*/0xDA7A);
  std::vector<std::vector<double>> out;
  out.reserve(n);
  const std::size_t d0 = spec.latent_dim;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = pick_component(latent, rng.uniform());
    const auto& comp = latent.components[k];
    std::vector<double> h = comp.mean;
    if (comp.cov_scale > 0.0) {
      const double sd = std::sqrt(comp.cov_scale);
      for (std::size_t j = 0; j < d0; ++j) h[j] += sd * rng.normal();
    }
    out.push_back(spec.basis.mul_vec(h));
  }
  return out;
}

std::vector<double> perturb(const std::vector<double>& x0, double t,
                            const DiffusionSchedule& schedule, std::uint64_t seed) {
  if (t < 0.0 || t > schedule.horizon)
    throw std::out_of_range("perturb: t outside [0, T]");
  const double b = DiffusionSchedule::beta(t);
  const double sd = std::sqrt(DiffusionSchedule::sigma(t));
  CounterRng rng(seed, /*stream=*/0x9E27);
  std::vector<double> xt(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) xt[i] = b * x0[i] + sd * rng.normal();
  return xt;
}

void export_dataset_csv(const std::string& csv_path, const std::string& sidecar_json_path,
                        const std::string& basis_csv_path, const SubspaceSpec& spec,
                        const LatentMixtureSpec& latent,
                        const std::vector<std::vector<double>>& samples) {
  std::ofstream csv(csv_path);
  if (!csv) throw std::runtime_error("export_dataset_csv: cannot open " + csv_path);
  csv.precision(17);
  csv << "sample_id";
  for (std::size_t j = 0; j < spec.ambient_dim; ++j) csv << ", x_" << j;
  csv << "\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    csv << i;
    for (double v : samples[i]) csv << ", " << v;
    csv << "\n";
  }

  std::ofstream bcsv(basis_csv_path);
  if (!bcsv) throw std::runtime_error("export_dataset_csv: cannot open " + basis_csv_path);
  bcsv.precision(17);
  for (std::size_t i = 0; i < spec.basis.rows(); ++i) {
    for (std::size_t j = 0; j < spec.basis.cols(); ++j)
      bcsv << (j ? ", " : "") << spec.basis(i, j);
    bcsv << "\n";
  }

  nlohmann::json side;
  side["ambient_dim"] = spec.ambient_dim;
  side["latent_dim"] = spec.latent_dim;
  side["seed"] = spec.seed;
  side["basis_csv"] = basis_csv_path;
  side["n_samples"] = samples.size();
  nlohmann::json comps = nlohmann::json::array();
  for (const auto& c : latent.components)
    comps.push_back({{"weight", c.weight}, {"mean", c.mean}, {"cov_scale", c.cov_scale}});
  side["mixture"] = comps;
  if (latent.lipschitz_hint) side["lipschitz_hint"] = *latent.lipschitz_hint;
  std::ofstream js(sidecar_json_path);
  if (!js) throw std::runtime_error("export_dataset_csv: cannot open " + sidecar_json_path);
  js << side.dump(2) << "\n";
}

}  // namespace ditlab
