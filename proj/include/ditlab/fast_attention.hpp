#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "ditlab/dense_matrix.hpp"

namespace ditlab {

enum class AttentionMode { self_attn, cross_attn };

/// Single-layer attention training instance:
///   f(W) = row-softmax of exp(A1^T W A2),  output = W_OV A3 f(W)^T,
///   loss L0(W) = 0.5 || W_OV A3 f(W)^T - Y ||_F^2.
/// A1 == A2 corresponds to self-attention (unconditional generation),
/// distinct A1, A2 to cross-attention (conditional generation).
struct AttentionInstance {
  DenseMatrix a1, a2, a3;  // d x L
  DenseMatrix w;           // d x d, W = W_K^T W_Q
  DenseMatrix w_ov;        // d x d
  DenseMatrix y;           // d x L
  AttentionMode mode = AttentionMode::cross_attn;
  // Optional split of w; when present the fast paths factor through
  // Qt = (W_K A1)^T, Kt = (W_Q A2)^T, matching the Gamma-norm hypotheses.
  std::optional<DenseMatrix> w_k_split;
  std::optional<DenseMatrix> w_q_split;

  void validate() const;
  std::size_t dim() const { return a1.rows(); }
  std::size_t seq_len() const { return a1.cols(); }
};

/// Intermediates of the exact gradient, exposed for cross-checks.
struct GradientWorkspace {
  DenseMatrix f;   // L x L, rows sum to 1
  DenseMatrix c;   // L x d, f h - Y^T
  DenseMatrix q;   // L x L, c h^T
  DenseMatrix p1;  // L x L, f .* q
  DenseMatrix p2;  // L x L, diag(r) f
  DenseMatrix p;   // L x L, p1 - p2
  std::vector<double> r;  // r_j = <f_j, q_j>
};

/// Per-call instrumentation for the fast paths. Multiply-accumulate counts
/// and the high-water mark of live doubles across temporaries.
struct FastPathStats {
  std::uint64_t flops = 0;
  std::uint64_t peak_doubles = 0;
  std::uint64_t live_doubles = 0;
  std::size_t degree = 0;
  std::size_t rank_k1 = 0;
  double declared_err_bound = 0.0;

  void alloc(std::uint64_t n) {
    live_doubles += n;
    if (live_doubles > peak_doubles) peak_doubles = live_doubles;
  }
  void release(std::uint64_t n) { live_doubles -= n; }
};

/// Exact attention output W_OV A3 f(W)^T. Throws std::overflow_error when an
/// exponent argument exceeds 700.
DenseMatrix attention_exact(const AttentionInstance& inst);

/// Exact loss value L0(W) of the instance (used by finite-difference oracles).
double loss_value(const AttentionInstance& inst);

/// Exact gradient dL0/dW as a d x d matrix, computed as A1 (p1 - p2) A2^T.
DenseMatrix grad_exact(const AttentionInstance& inst);
DenseMatrix grad_exact(const AttentionInstance& inst, GradientWorkspace& ws);

/// Degree/rank choice for the polynomial softmax factorization: smallest g
/// with e^{Bbar} Bbar^{g+1}/(g+1)! <= eps/4 where Bbar = d * gamma_bound^2;
/// rank k1 = C(d+g, g).
struct RankChoice {
  std::size_t degree = 0;
  std::size_t rank = 0;
  bool profitable = true;  // cleared when the rank exceeds any useful size
};
RankChoice rank_for_accuracy(double gamma_bound, std::size_t d, double eps_target);

/// Low-rank factorization of the row-softmax matrix f = D^{-1} exp(Qt Kt^T)
/// through multinomial feature maps of degree g: U1 = Dtilde^{-1} Phi(Qt),
/// V1 = Phi(Kt). The returned err_bound is a certified a-posteriori bound on
/// ||U1 V1^T - f||_max.
LowRankFactors exp_lowrank(const DenseMatrix& qt, const DenseMatrix& kt,
                           double eps_target, double gamma_bound,
                           FastPathStats* stats = nullptr);

/// Almost-linear attention: W_OV A3 V1 U1^T evaluated right to left; no L x L
/// matrix is ever materialized.
DenseMatrix inference_fast(const AttentionInstance& inst, double eps_target,
                           FastPathStats* stats = nullptr);

/// Chained low-rank gradient: builds factors for f, q, p1, p2 and assembles
/// A1 (U3 V3^T - U4 V4^T) A2^T from skinny products only.
DenseMatrix grad_fast(const AttentionInstance& inst, double eps_target,
                      FastPathStats* stats = nullptr);

/// Generic softmax-layer gradient used by the trainer. Given the upstream
/// gradient of the loss with respect to f in factored form q = Uq Vq^T,
/// returns A1 (f .* q - diag(r) f) A2^T.
DenseMatrix softmax_grad_exact_factors(const DenseMatrix& a1, const DenseMatrix& a2,
                                       const DenseMatrix& f, const DenseMatrix& uq,
                                       const DenseMatrix& vq);
DenseMatrix softmax_grad_fast_factors(const DenseMatrix& a1, const DenseMatrix& a2,
                                      const LowRankFactors& f_factors,
                                      const DenseMatrix& uq, const DenseMatrix& vq,
                                      FastPathStats* stats = nullptr);

}  // namespace ditlab
