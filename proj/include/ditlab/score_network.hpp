#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ditlab/dense_matrix.hpp"
#include "ditlab/subspace_data.hpp"

namespace ditlab {

/// Bijection between a flat latent vector of length d0 and a d x L token
/// matrix. The image form views the latent as an i x i row-major image cut
/// into p x p patches (patches scanned row-major, row-major within a patch);
/// column k of the token matrix is the flattening of patch k. The flat form
/// (d = d0, L = 1) covers latent dimensions that are not perfect squares.
struct ReshapeSpec {
  std::size_t image_side = 0;  // i (0 for the flat form)
  std::size_t patch_side = 0;  // p
  std::size_t token_dim = 0;   // d
  std::size_t seq_len = 0;     // L
  std::size_t latent_dim = 0;  // d0 == d * L

  static ReshapeSpec image(std::size_t image_side, std::size_t patch_side);
  static ReshapeSpec flat(std::size_t latent_dim);

  DenseMatrix reshape(const std::vector<double>& x) const;
  std::vector<double> unreshape(const DenseMatrix& tokens) const;
  void validate() const;
};

/// Per-block time conditioning: X -> (1 + s(t)) .* X + b(t) broadcast over
/// columns, with s and b affine in the features (t, e^{-t}).
struct TimeModulation {
  DenseMatrix scale_coeff;          // d x 2
  std::vector<double> scale_bias;   // d
  DenseMatrix shift_coeff;          // d x 2
  std::vector<double> shift_bias;   // d

  static TimeModulation zero(std::size_t token_dim);
  void eval(double t, std::vector<double>& scale, std::vector<double>& shift) const;
};

struct TransformerBlock {
  std::size_t heads = 1;     // r
  std::size_t head_dim = 1;  // m
  std::size_t hidden = 1;    // l
  std::vector<DenseMatrix> w_k, w_q, w_v;  // per head, m x d
  std::vector<DenseMatrix> w_o;            // per head, d x m
  DenseMatrix w1;                          // l x d
  DenseMatrix w2;                          // d x l
  std::vector<double> b1;                  // l
  std::vector<double> b2;                  // d
  TimeModulation time_mod;

  static TransformerBlock zero(std::size_t token_dim, std::size_t heads,
                               std::size_t head_dim, std::size_t hidden);
  void validate(std::size_t token_dim) const;
  DenseMatrix w_ov(std::size_t head) const { return w_o[head] * w_v[head]; }
  DenseMatrix w_kq(std::size_t head) const { return w_k[head].transposed() * w_q[head]; }
};

struct ScoreNetwork {
  DenseMatrix encoder;  // W_B, D x d0 with orthonormal columns
  ReshapeSpec reshape;
  DenseMatrix pos_enc;  // E, d x L
  std::vector<TransformerBlock> blocks;

  std::size_t ambient_dim() const { return encoder.rows(); }
  std::size_t latent_dim() const { return encoder.cols(); }
  void validate() const;

  /// Positional encoding with every row (0, 1, ..., L-1), optionally scaled.
  static DenseMatrix default_pos_enc(std::size_t token_dim, std::size_t seq_len,
                                     double scale = 1.0);

  /// Blocks with small seeded random weights, zero time modulation.
  static ScoreNetwork make(const DenseMatrix& encoder, const ReshapeSpec& reshape,
                           std::size_t n_blocks, std::size_t heads, std::size_t head_dim,
                           std::size_t hidden, double init_scale, std::uint64_t seed,
                           double pos_enc_scale = 1.0);
};

/// Norm-budget report: exact norms of the stored
/// weights plus sampled estimates for the output bound and Lipschitz constant
/// (suprema over unbounded sets are not exactly computable; estimates are
/// labelled as such by construction).
struct BlockNormBudget {
  double c_ov_two_inf = 0.0;
  double c_ov_op = 0.0;
  double c_kq_two_inf = 0.0;
  double c_kq_op = 0.0;
  double c_f_two_inf = 0.0;
  double c_f_op = 0.0;
};

struct NormBudget {
  std::vector<BlockNormBudget> blocks;
  double c_e = 0.0;
  double c_t_est = 0.0;
  double l_t_est = 0.0;
  std::size_t sample_count = 0;  // nonzero marks the *_est fields as estimates
};

/// One transformer block on a d x L token matrix: time pre-modulation, then
/// column-softmax multi-head attention with skip, then the feed-forward with
/// skip.
DenseMatrix block_forward(const DenseMatrix& tokens, const TransformerBlock& block,
                          double t);

/// The token-level map f: reshape, add positional encoding, run all blocks,
/// flatten back.
std::vector<double> latent_map(const ScoreNetwork& net, const std::vector<double>& h,
                               double t);

/// Full score: W_B f(W_B^T x, t) / sigma(t) - x / sigma(t).
std::vector<double> score_forward(const ScoreNetwork& net, const std::vector<double>& x_bar,
                                  double t, const DiffusionSchedule& schedule);

/// Same affine tail around an arbitrary latent map; used to inject oracle
/// latent maps in tests.
std::vector<double> score_with_latent_map(
    const DenseMatrix& encoder,
    const std::function<std::vector<double>(const std::vector<double>&, double)>& f,
    const std::vector<double>& x_bar, double t, const DiffusionSchedule& schedule);

NormBudget norm_budget(const ScoreNetwork& net, std::size_t sample_count = 1024,
                       std::uint64_t seed = 7, double t_probe = 1.0);

void save_checkpoint(const ScoreNetwork& net, const std::string& path);
ScoreNetwork load_checkpoint(const std::string& path);

// ---- gradient containers (used by the trainer) ----

struct TimeModulationGrads {
  DenseMatrix scale_coeff;
  std::vector<double> scale_bias;
  DenseMatrix shift_coeff;
  std::vector<double> shift_bias;
};

struct BlockGrads {
  std::vector<DenseMatrix> w_k, w_q, w_v, w_o;
  DenseMatrix w1, w2;
  std::vector<double> b1, b2;
  TimeModulationGrads time_mod;
};

struct NetworkGrads {
  DenseMatrix encoder;
  std::vector<BlockGrads> blocks;

  static NetworkGrads zeros_like(const ScoreNetwork& net);
  void scale(double s);
};

/// Accumulates d||s_W(x,t) - target||^2 / d(params) into grads and returns the
/// squared error. With use_fast_grad the key/query gradient of every head is
/// routed through the chained low-rank approximation at the given target
/// accuracy; all other parameter gradients use the exact path.
double score_backward(const ScoreNetwork& net, const std::vector<double>& x_bar, double t,
                      const DiffusionSchedule& schedule, const std::vector<double>& target,
                      bool use_fast_grad, double fast_eps, NetworkGrads& grads);

/// Plain gradient-descent parameter update followed by QR re-orthonormalization
/// of the encoder columns.
void apply_update(ScoreNetwork& net, const NetworkGrads& grads, double learning_rate);

/// Thin QR retraction (modified Gram-Schmidt with sign-fixed diagonal).
void reorthonormalize_columns(DenseMatrix& m);

}  // namespace ditlab
