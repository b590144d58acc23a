#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ditlab/dense_matrix.hpp"

namespace ditlab {

/// Token grid for the constructive approximation pipeline. delta must be a
/// negative power of two so that every grid coordinate, window edge and shift
/// amount is exact in binary floating point; the constructions below rely on
/// exact threshold comparisons.
struct GridSpec {
  std::size_t token_dim = 1;  // d
  std::size_t seq_len = 2;    // L
  double delta = 0.5;
  double j_big = 0.0;               // J = L + 3 L delta^{-dL}
  std::vector<double> u;            // (1, delta^{-1}, ..., delta^{-d+1})
  double contextual_bound = 0.0;    // M, max |entry| over mapper outputs (enumerated)

  static GridSpec make(std::size_t token_dim, std::size_t seq_len, double delta);
  void validate() const;
  double inv_delta_pow(std::size_t e) const;  // delta^{-e}, exact
  std::size_t base_grid_size() const;         // (1/delta)^{d L}
  std::size_t plus_grid_size() const;         // (1/delta + 1)^{d L}
};

enum class ModifiedLayerKind {
  ff_zeta1,           // out-of-[0,1) rows to -J
  ff_zeta2,           // floor a row to the delta grid at one offset
  shift_attn,         // selective shift on a (b_Q, b'_Q) window
  global_shift_attn,  // one-sided shift xi(.; 0)
  ff_zeta3,           // -(M+1) shift outside [t_l, t_r]
  ff_zeta4,           // clamp one row's negatives to zero
  ff_zeta5,           // write one output column at one contextual id
};

struct ModifiedLayer {
  ModifiedLayerKind kind;
  std::size_t row = 0;        // e_i row for zeta1/zeta2/zeta4
  double grid_offset = 0.0;   // k*delta for zeta2
  double window_lo = 0.0;     // b_Q for shift_attn; gate low for zeta3
  double window_hi = 0.0;     // b'_Q for shift_attn; gate high for zeta3
  double scale = 1.0;         // attention output coefficient
  double shift_amount = 0.0;  // M+1 for zeta3
  // zeta5 writes target_column into the selected column; the additive form
  // X + (A - f) zeta5 is evaluated as A + (X - base) so a column that equals
  // base exactly comes out as the target bit for bit.
  std::vector<double> target_column;
  std::vector<double> base_column;  // f_c2(Gbar)[:,j]
  double center = 0.0;              // u^T base_column
  double halfwidth = 0.0;           // delta/2
};

using LayerStack = std::vector<ModifiedLayer>;

struct ContextMapper {
  DenseMatrix pos_enc;  // every row (0, 1, ..., L-1)
  LayerStack layers;    // L * delta^{-d} selective shifts + one global shift
  double t_l = 0.0;     // L delta^{-2(L+1)d} (delta^{-d} - 1)
  double t_r = 0.0;     // L^2 delta^{-2(L+1)d-1} + L delta^{-(L+1)d}
};

struct Memorizer {
  LayerStack layers;  // zeta3, d x zeta4, then one zeta5 per contextual value
  double contextual_bound = 0.0;  // the M used in the zeta3 shift
  // Enumerated separation interval actually used by the zeta3 gate. The
  // printed t_l formula is not a valid lower bound for the selective-shift
  // dynamics (its derivation drops a factor), so the gate is certified by
  // enumeration instead: every on-grid contextual id lies inside, every
  // off-grid id outside.
  double gate_lo = 0.0;
  double gate_hi = 0.0;
};

/// d layers of zeta1 then d/delta layers of zeta2. Entries in [0,1) are
/// floored to the delta grid, everything else goes to -J.
LayerStack build_quantizer(const GridSpec& grid);

/// Positional encoding plus the selective-shift sweep realizing the
/// contextual mapping; returns the separation bounds (t_l, t_r).
ContextMapper build_context_mapper(const GridSpec& grid);

/// Maps mapper outputs to the targets: A_G on the proper grid, 0 off it.
/// `target` receives each on-grid point (positional encoding included) in
/// enumeration order. Fills grid.contextual_bound. Throws on duplicated
/// contextual values or window collisions with target column ids.
Memorizer build_memorizer(GridSpec& grid, const ContextMapper& mapper,
                          const std::function<DenseMatrix(const DenseMatrix&)>& target);

/// Exact (hardmax) application of a stack; ties in the hardmax break to the
/// lowest index.
DenseMatrix apply_stack(const GridSpec& grid, const LayerStack& layers, DenseMatrix x);

/// Quantizer -> +E -> mapper -> memorizer.
DenseMatrix apply_pipeline(const GridSpec& grid, const LayerStack& quantizer,
                           const ContextMapper& mapper, const Memorizer& memorizer,
                           DenseMatrix x);

/// Contextual ids u^T f_c2(G) for an input already containing E.
std::vector<double> contextual_ids(const GridSpec& grid, const ContextMapper& mapper,
                                   const DenseMatrix& g_plus);

/// All base grid points {0, delta, ..., 1-delta}^{d x L}.
std::vector<DenseMatrix> enumerate_base_grid(const GridSpec& grid);
/// All points of G_delta^+ (entries of column j in {j-1-J} U [j-1 : j-delta]).
std::vector<DenseMatrix> enumerate_plus_grid(const GridSpec& grid);

// ---- softened (standard-transformer) evaluation ----

/// Three-piece piecewise-linear activation description.
struct ThreePiece {
  double c1 = 0.0, c2 = 0.0;            // breakpoints, c1 <= c2
  double a1 = 0.0, b1 = 0.0;            // x < c1:  a1 x + b1
  double a2 = 0.0, b2 = 0.0;            // c1 <= x < c2
  double a3 = 0.0, b3 = 0.0;            // x >= c2
  double eval(double x) const {
    if (x < c1) return a1 * x + b1;
    if (x < c2) return a2 * x + b2;
    return a3 * x + b3;
  }
  /// Four-ReLU approximation: exact outside [c1-eps, c1) U [c2-eps, c2),
  /// linear ramps inside.
  double eval_soft(double x, double eps) const;
};

struct SoftenConfig {
  double lambda = 1000.0;  // softmax temperature replacing the hardmax
  double eps = 0.0;        // activation ramp width; 0 picks delta/4
};

struct SoftenReport {
  double max_deviation = 0.0;   // vs the modified pipeline over the test set
  double analytic_bound = 0.0;  // composed per-layer bound (inf if the
                                // perturbation escapes the flat regions)
};

DenseMatrix apply_pipeline_soft(const GridSpec& grid, const LayerStack& quantizer,
                                const ContextMapper& mapper, const Memorizer& memorizer,
                                const SoftenConfig& cfg, DenseMatrix x);

SoftenReport soften_report(const GridSpec& grid, const LayerStack& quantizer,
                           const ContextMapper& mapper, const Memorizer& memorizer,
                           const SoftenConfig& cfg,
                           const std::vector<DenseMatrix>& inputs);

// ---- verification ----

struct UaVerifyReport {
  std::size_t token_dim = 0, seq_len = 0;
  double delta = 0.0;
  double t_l = 0.0, t_r = 0.0;          // formula values
  double cert_lo = 0.0, cert_hi = 0.0;  // enumerated separation interval
  bool exhaustive = true;  // false when the grid exceeded the enumeration cap
  bool quantizer_ok = false;
  bool prop_distinct_within = false;       // ids distinct within one point
  bool prop_distinct_across = false;       // ids distinct across points
  bool prop_ongrid_in_range = false;       // on-grid ids inside the interval
  bool prop_offgrid_out_of_range = false;  // off-grid ids outside it
  bool formula_interval_ok = false;  // property 3/4 against the printed t_l, t_r
  bool memorizer_ok = false;
  bool soften_decreasing = false;
  double soften_max_deviation = 0.0;
  double soften_bound = 0.0;
  std::string to_json() const;
  bool all_ok() const {
    return quantizer_ok && prop_distinct_within && prop_distinct_across &&
           prop_ongrid_in_range && prop_offgrid_out_of_range && memorizer_ok &&
           soften_decreasing;
  }
};

/// Full verification pass on one grid: quantizer exactness on random inputs,
/// the four contextual-mapping properties (exhaustive up to 4096 grid points,
/// sampled beyond), memorizer exactness against seeded targets, and the
/// softened-pipeline deviation sweep.
UaVerifyReport verify_grid(std::size_t token_dim, std::size_t seq_len, double delta,
                           std::uint64_t seed,
                           const std::vector<double>& lambdas = {10.0, 100.0, 1000.0});

}  // namespace ditlab
