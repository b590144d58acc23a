#include "ditlab/fast_attention.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ditlab {

namespace {

constexpr double kExpArgLimit = 700.0;  // double overflows past exp(709)

void check_exp_args(const DenseMatrix& scores) {
  for (double v : scores.data())
    if (std::fabs(v) > kExpArgLimit)
      throw std::overflow_error("attention: exp argument " + std::to_string(v) +
                                " exceeds the overflow bound " +
                                std::to_string(kExpArgLimit));
}

// f = D^{-1} exp(A1^T W A2): row j is the softmax of row j of the scores.
// Rows are shifted by their maximum before exponentiating; the value is
// unchanged and row sums cannot overflow for in-contract scores.
DenseMatrix softmax_rows(const DenseMatrix& scores) {
  DenseMatrix f(scores.rows(), scores.cols());
  for (std::size_t j = 0; j < scores.rows(); ++j) {
    double m = scores(j, 0);
    for (std::size_t k = 1; k < scores.cols(); ++k) m = std::max(m, scores(j, k));
    double sum = 0.0;
    for (std::size_t k = 0; k < scores.cols(); ++k) {
      const double e = std::exp(scores(j, k) - m);
      f(j, k) = e;
      sum += e;
    }
    for (std::size_t k = 0; k < scores.cols(); ++k) f(j, k) /= sum;
  }
  return f;
}

DenseMatrix exact_f(const AttentionInstance& inst) {
  DenseMatrix scores = inst.a1.transposed() * inst.w * inst.a2;  // L x L
  check_exp_args(scores);
  return softmax_rows(scores);
}

// h = A3^T W_OV^T, L x d.
DenseMatrix h_matrix(const AttentionInstance& inst) {
  return inst.a3.transposed() * inst.w_ov.transposed();
}

std::uint64_t count_multinomials(std::size_t d, std::size_t g) {
  // C(d+g, g) with overflow saturation.
  long double acc = 1.0L;
  for (std::size_t i = 1; i <= g; ++i) acc = acc * (double)(d + i) / (double)i;
  if (acc > 9e18L) return UINT64_MAX;
  return (std::uint64_t)(acc + 0.5L);
}

double taylor_tail(double b_bar, std::size_t g) {
  // e^{Bbar} * Bbar^{g+1} / (g+1)!  evaluated in the log domain.
  if (b_bar == 0.0) return 0.0;
  double log_tail = b_bar + (double)(g + 1) * std::log(b_bar) - std::lgamma((double)(g + 2));
  return std::exp(log_tail);
}

// Feature map Phi_g: all monomials x^alpha / sqrt(alpha!) with |alpha| <= g.
// The multiset enumeration is precomputed once per factorization so each row
// costs exactly k1 fused multiplies: feature[i] = feature[parent] * x[var]
// with the 1/sqrt(alpha!) weight folded into a per-entry scale.
struct FeaturePlan {
  std::vector<std::uint32_t> parent;
  std::vector<std::uint32_t> var;
  std::vector<double> scale;  // 1/sqrt(new multiplicity of var)
  std::size_t size() const { return parent.size() + 1; }
};

FeaturePlan make_feature_plan(std::size_t d, std::size_t g) {
  FeaturePlan plan;
  struct Node {
    std::uint32_t index;
    std::uint32_t last_var;
    std::uint32_t last_count;  // multiplicity of last_var
  };
  std::vector<Node> frontier{{0, 0, 0}};
  std::uint32_t next = 1;
  for (std::size_t deg = 1; deg <= g; ++deg) {
    std::vector<Node> grown;
    for (const Node& n : frontier)
      for (std::uint32_t v = n.last_count == 0 ? 0 : n.last_var; v < d; ++v) {
        const std::uint32_t count = (n.last_count > 0 && v == n.last_var)
                                        ? n.last_count + 1
                                        : 1;
        plan.parent.push_back(n.index);
        plan.var.push_back(v);
        plan.scale.push_back(1.0 / std::sqrt((double)count));
        grown.push_back({next++, v, count});
      }
    frontier = std::move(grown);
  }
  return plan;
}

DenseMatrix feature_matrix(const DenseMatrix& rows_in, const FeaturePlan& plan,
                           FastPathStats* stats) {
  const std::size_t n = rows_in.rows(), d = rows_in.cols();
  const std::size_t k = plan.size();
  DenseMatrix phi(n, k);
  if (stats) stats->alloc(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = &rows_in.data()[i * d];
    double* out = &phi.data()[i * k];
    out[0] = 1.0;
    for (std::size_t e = 0; e + 1 < k; ++e)
      out[e + 1] = out[plan.parent[e]] * x[plan.var[e]] * plan.scale[e];
  }
  if (stats) stats->flops += (std::uint64_t)n * k;
  return phi;
}

// C = A * B with flop accounting.
DenseMatrix counted_mul(const DenseMatrix& a, const DenseMatrix& b, FastPathStats* stats) {
  DenseMatrix c = a * b;
  if (stats) {
    stats->flops += (std::uint64_t)a.rows() * a.cols() * b.cols();
    stats->alloc(c.size());
  }
  return c;
}

}  // namespace

void AttentionInstance::validate() const {
  const std::size_t d = a1.rows(), len = a1.cols();
  if (a2.rows() != d || a2.cols() != len || a3.rows() != d || a3.cols() != len)
    throw std::invalid_argument("AttentionInstance: A1/A2/A3 shapes differ");
  if (w.rows() != d || w.cols() != d || w_ov.rows() != d || w_ov.cols() != d)
    throw std::invalid_argument("AttentionInstance: W / W_OV must be d x d");
  if (y.rows() != d || y.cols() != len)
    throw std::invalid_argument("AttentionInstance: Y shape mismatch");
  if (mode == AttentionMode::self_attn && a1.data() != a2.data())
    throw std::invalid_argument("AttentionInstance: self mode requires A1 == A2");
  if (w_k_split.has_value() != w_q_split.has_value())
    throw std::invalid_argument("AttentionInstance: W_K/W_Q split must come as a pair");
  if (w_k_split) {
    if (w_k_split->cols() != d || w_q_split->cols() != d ||
        w_k_split->rows() != w_q_split->rows())
      throw std::invalid_argument("AttentionInstance: split shapes mismatch");
    DenseMatrix recomposed = w_k_split->transposed() * *w_q_split;
    recomposed -= w;
    const double scale = std::max(1.0, norm(w, MatrixNorm::max));
    if (norm(recomposed, MatrixNorm::max) > 1e-12 * scale)
      throw std::invalid_argument("AttentionInstance: split does not recompose W");
  }
}

DenseMatrix attention_exact(const AttentionInstance& inst) {
  inst.validate();
  const DenseMatrix f = exact_f(inst);
  return inst.w_ov * inst.a3 * f.transposed();
}

double loss_value(const AttentionInstance& inst) {
  DenseMatrix resid = attention_exact(inst) - inst.y;
  const double fro = norm(resid, MatrixNorm::frobenius);
  return 0.5 * fro * fro;
}

DenseMatrix grad_exact(const AttentionInstance& inst, GradientWorkspace& ws) {
  inst.validate();
  const std::size_t len = inst.seq_len();
  ws.f = exact_f(inst);
  const DenseMatrix h = h_matrix(inst);            // L x d
  ws.c = ws.f * h - inst.y.transposed();           // L x d
  ws.q = ws.c * h.transposed();                    // L x L
  ws.p1 = ws.f.hadamard(ws.q);
  ws.r.assign(len, 0.0);
  ws.p2 = DenseMatrix(len, len);
  for (std::size_t j = 0; j < len; ++j) {
    double rj = 0.0;
    for (std::size_t k = 0; k < len; ++k) rj += ws.f(j, k) * ws.q(j, k);
    ws.r[j] = rj;
    for (std::size_t k = 0; k < len; ++k) ws.p2(j, k) = rj * ws.f(j, k);
  }
  ws.p = ws.p1 - ws.p2;
  return inst.a1 * ws.p * inst.a2.transposed();
}

DenseMatrix grad_exact(const AttentionInstance& inst) {
  GradientWorkspace ws;
  return grad_exact(inst, ws);
}

RankChoice rank_for_accuracy(double gamma_bound, std::size_t d, double eps_target) {
  if (!(eps_target > 0.0)) throw std::invalid_argument("rank_for_accuracy: eps_target <= 0");
  if (gamma_bound < 0.0) throw std::invalid_argument("rank_for_accuracy: negative bound");
  const double b_bar = (double)d * gamma_bound * gamma_bound;
  std::size_t g = 0;
  while (taylor_tail(b_bar, g) > eps_target / 4.0) {
    ++g;
    if (g > 512) throw std::runtime_error("rank_for_accuracy: degree exceeds cap");
  }
  RankChoice rc;
  rc.degree = g;
  rc.rank = count_multinomials(d, g);
  rc.profitable = rc.rank != UINT64_MAX && rc.rank <= (std::size_t)4e6;
  return rc;
}

LowRankFactors exp_lowrank(const DenseMatrix& qt, const DenseMatrix& kt,
                           double eps_target, double gamma_bound, FastPathStats* stats) {
  if (qt.cols() != kt.cols())
    throw std::invalid_argument("exp_lowrank: feature dimensions differ");
  const std::size_t d = qt.cols();
  const std::size_t len = qt.rows();
  if (norm(qt, MatrixNorm::max) > gamma_bound + 1e-12 ||
      norm(kt, MatrixNorm::max) > gamma_bound + 1e-12)
    throw std::invalid_argument("exp_lowrank: input max-norm exceeds gamma_bound");

  RankChoice rc = rank_for_accuracy(gamma_bound, d, eps_target);
  const int retry_cap = 8;
  for (int attempt = 0;; ++attempt) {
    const std::size_t k1 = count_multinomials(d, rc.degree);
    if (k1 == UINT64_MAX || k1 > (std::size_t)6e6)
      throw std::runtime_error("exp_lowrank: rank blow-up (k1 too large)");

    const FeaturePlan plan = make_feature_plan(d, rc.degree);
    DenseMatrix u = feature_matrix(qt, plan, stats);
    DenseMatrix v = feature_matrix(kt, plan, stats);

    // Dtilde = diag(Phi(Qt) (V^T 1)); rescale rows of U by 1/alpha_tilde.
    std::vector<double> col_sums(k1, 0.0);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t s = 0; s < k1; ++s) col_sums[s] += v(i, s);
    if (stats) stats->flops += (std::uint64_t)len * k1;

    bool degenerate = false;
    double min_alpha = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < len && !degenerate; ++j) {
      double alpha = 0.0;
      for (std::size_t s = 0; s < k1; ++s) alpha += u(j, s) * col_sums[s];
      if (!(alpha > 0.0)) {
        degenerate = true;
        break;
      }
      min_alpha = std::min(min_alpha, alpha);
      for (std::size_t s = 0; s < k1; ++s) u(j, s) /= alpha;
    }
    if (stats) stats->flops += 2u * (std::uint64_t)len * k1;

    if (degenerate) {
      if (stats) stats->release(2u * len * k1);
      if (attempt >= retry_cap)
        throw std::runtime_error("exp_lowrank: nonpositive approximate row sum");
      ++rc.degree;
      continue;
    }

    const double tail = taylor_tail((double)d * gamma_bound * gamma_bound, rc.degree);
    LowRankFactors out;
    out.u = std::move(u);
    out.v = std::move(v);
    out.rank = k1;
    out.err_bound = ((double)len + 1.0) * tail / min_alpha;
    if (stats) {
      stats->degree = rc.degree;
      stats->rank_k1 = k1;
    }
    return out;
  }
}

namespace {

double derive_gamma_bound(const AttentionInstance& inst, DenseMatrix& qt, DenseMatrix& kt) {
  if (inst.w_k_split) {
    qt = (*inst.w_k_split * inst.a1).transposed();  // L x s
    kt = (*inst.w_q_split * inst.a2).transposed();
  } else {
    qt = mul_atb(inst.a1, inst.w);  // A1^T W, L x d
    kt = inst.a2.transposed();
  }
  return std::max(norm(qt, MatrixNorm::max), norm(kt, MatrixNorm::max));
}

double max_abs_row_sum(const DenseMatrix& m) {
  double best = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) s += std::fabs(m(i, j));
    best = std::max(best, s);
  }
  return best;
}

}  // namespace

DenseMatrix inference_fast(const AttentionInstance& inst, double eps_target,
                           FastPathStats* stats) {
  inst.validate();
  DenseMatrix qt, kt;
  const double gamma = derive_gamma_bound(inst, qt, kt);
  const std::size_t len = qt.rows(), feat_dim = qt.cols(), d = inst.dim();

  DenseMatrix va3 = counted_mul(inst.w_ov, inst.a3, stats);  // d x L

  // Streamed evaluation of W_OV A3 V1 U1^T: feature rows are consumed on the
  // fly, so only the d x k1 partial product and the k1 column sums persist.
  RankChoice rc = rank_for_accuracy(gamma, feat_dim, eps_target);
  const int retry_cap = 8;
  for (int attempt = 0;; ++attempt) {
    const std::size_t k1 = count_multinomials(feat_dim, rc.degree);
    if (k1 == UINT64_MAX || k1 > (std::size_t)6e6)
      throw std::runtime_error("inference_fast: rank blow-up (k1 too large)");
    const FeaturePlan plan = make_feature_plan(feat_dim, rc.degree);
    std::vector<double> feat(k1), col_sums(k1, 0.0);
    DenseMatrix t2(d, k1);
    if (stats) stats->alloc(2 * k1 + t2.size());

    for (std::size_t k = 0; k < len; ++k) {
      const double* x = &kt.data()[k * feat_dim];
      feat[0] = 1.0;
      for (std::size_t e = 0; e + 1 < k1; ++e)
        feat[e + 1] = feat[plan.parent[e]] * x[plan.var[e]] * plan.scale[e];
      for (std::size_t s = 0; s < k1; ++s) col_sums[s] += feat[s];
      for (std::size_t i = 0; i < d; ++i) {
        const double w = va3(i, k);
        double* row = &t2.data()[i * k1];
        for (std::size_t s = 0; s < k1; ++s) row[s] += w * feat[s];
      }
    }
    if (stats) stats->flops += (std::uint64_t)len * k1 * (2 + d);

    DenseMatrix out(d, len);
    if (stats) stats->alloc(out.size());
    bool degenerate = false;
    double min_alpha = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < len; ++j) {
      const double* x = &qt.data()[j * feat_dim];
      feat[0] = 1.0;
      for (std::size_t e = 0; e + 1 < k1; ++e)
        feat[e + 1] = feat[plan.parent[e]] * x[plan.var[e]] * plan.scale[e];
      double alpha = 0.0;
      for (std::size_t s = 0; s < k1; ++s) alpha += feat[s] * col_sums[s];
      if (!(alpha > 0.0)) {
        degenerate = true;
        break;
      }
      min_alpha = std::min(min_alpha, alpha);
      for (std::size_t i = 0; i < d; ++i) {
        const double* row = &t2.data()[i * k1];
        double acc = 0.0;
        for (std::size_t s = 0; s < k1; ++s) acc += row[s] * feat[s];
        out(i, j) = acc / alpha;
      }
    }
    if (stats) stats->flops += (std::uint64_t)len * k1 * (2 + d);

    if (degenerate) {
      if (stats) stats->release(2 * k1 + t2.size() + out.size());
      if (attempt >= retry_cap)
        throw std::runtime_error("inference_fast: nonpositive approximate row sum");
      ++rc.degree;
      continue;
    }
    if (stats) {
      stats->degree = rc.degree;
      stats->rank_k1 = k1;
      const double tail =
          taylor_tail((double)feat_dim * gamma * gamma, rc.degree);
      stats->declared_err_bound =
          max_abs_row_sum(va3) * ((double)len + 1.0) * tail / min_alpha;
    }
    return out;
  }
}

DenseMatrix softmax_grad_exact_factors(const DenseMatrix& a1, const DenseMatrix& a2,
                                       const DenseMatrix& f, const DenseMatrix& uq,
                                       const DenseMatrix& vq) {
  const std::size_t len = f.rows();
  DenseMatrix q = uq * vq.transposed();  // L x L
  DenseMatrix p(len, len);
  for (std::size_t j = 0; j < len; ++j) {
    double rj = 0.0;
    for (std::size_t k = 0; k < len; ++k) rj += f(j, k) * q(j, k);
    for (std::size_t k = 0; k < len; ++k) p(j, k) = f(j, k) * (q(j, k) - rj);
  }
  return a1 * p * a2.transposed();
}

DenseMatrix softmax_grad_fast_factors(const DenseMatrix& a1, const DenseMatrix& a2,
                                      const LowRankFactors& f_factors,
                                      const DenseMatrix& uq, const DenseMatrix& vq,
                                      FastPathStats* stats) {
  // p1 = (U1 V1^T) .* (Uq Vq^T) = row_kron(U1,Uq) row_kron(V1,Vq)^T.
  // The face-splitting factors are consumed row by row while accumulating
  // A1 U3 and A2 V3 directly, so the L x (k1 kq) products never exist.
  // p2 = diag(r) U1 V1^T with r_j = U1[j,:] (V1^T Vq) Uq[j,:]^T.
  const std::size_t len = f_factors.u.rows();
  const std::size_t d1 = a1.rows(), d2 = a2.rows();
  const std::size_t k1 = f_factors.u.cols(), kq = uq.cols();
  const std::size_t k3 = k1 * kq;

  DenseMatrix a1u3(d1, k3), a2v3(d2, k3);
  std::vector<double> buf(k3);
  if (stats) stats->alloc(a1u3.size() + a2v3.size() + k3);
  for (std::size_t j = 0; j < len; ++j) {
    const double* u1row = &f_factors.u.data()[j * k1];
    const double* uqrow = &uq.data()[j * kq];
    for (std::size_t s = 0; s < k1; ++s) {
      const double us = u1row[s];
      for (std::size_t t = 0; t < kq; ++t) buf[s * kq + t] = us * uqrow[t];
    }
    for (std::size_t i = 0; i < d1; ++i) {
      const double w = a1(i, j);
      if (w == 0.0) continue;
      double* row = &a1u3.data()[i * k3];
      for (std::size_t s = 0; s < k3; ++s) row[s] += w * buf[s];
    }
    const double* v1row = &f_factors.v.data()[j * k1];
    const double* vqrow = &vq.data()[j * kq];
    for (std::size_t s = 0; s < k1; ++s) {
      const double vs = v1row[s];
      for (std::size_t t = 0; t < kq; ++t) buf[s * kq + t] = vs * vqrow[t];
    }
    for (std::size_t i = 0; i < d2; ++i) {
      const double w = a2(i, j);
      if (w == 0.0) continue;
      double* row = &a2v3.data()[i * k3];
      for (std::size_t s = 0; s < k3; ++s) row[s] += w * buf[s];
    }
  }
  if (stats) stats->flops += (std::uint64_t)len * k3 * (2 + d1 + d2);

  DenseMatrix g1 = mul_abt(a1u3, a2v3);  // d x d
  if (stats) {
    stats->flops += (std::uint64_t)a1u3.rows() * a1u3.cols() * a2v3.rows();
    stats->alloc(g1.size());
  }

  DenseMatrix v1tv2 = mul_atb(f_factors.v, vq);              // k1 x kq
  if (stats) {
    stats->flops += (std::uint64_t)f_factors.v.rows() * f_factors.v.cols() * vq.cols();
    stats->alloc(v1tv2.size());
  }
  DenseMatrix u1m = counted_mul(f_factors.u, v1tv2, stats);  // L x kq
  std::vector<double> r(len, 0.0);
  for (std::size_t j = 0; j < len; ++j) {
    double rj = 0.0;
    for (std::size_t s = 0; s < uq.cols(); ++s) rj += u1m(j, s) * uq(j, s);
    r[j] = rj;
  }
  if (stats) stats->flops += (std::uint64_t)len * uq.cols();

  DenseMatrix u4 = f_factors.u;  // diag(r) U1
  for (std::size_t j = 0; j < len; ++j)
    for (std::size_t s = 0; s < u4.cols(); ++s) u4(j, s) *= r[j];
  if (stats) {
    stats->flops += (std::uint64_t)len * u4.cols();
    stats->alloc(u4.size());
  }
  DenseMatrix a1u4 = counted_mul(a1, u4, stats);
  DenseMatrix a2v4 = counted_mul(a2, f_factors.v, stats);
  DenseMatrix g2 = mul_abt(a1u4, a2v4);
  if (stats) {
    stats->flops += (std::uint64_t)a1u4.rows() * a1u4.cols() * a2v4.rows();
    stats->alloc(g2.size());
  }

  return g1 - g2;
}

DenseMatrix grad_fast(const AttentionInstance& inst, double eps_target,
                      FastPathStats* stats) {
  inst.validate();
  DenseMatrix qt, kt;
  const double gamma = derive_gamma_bound(inst, qt, kt);
  LowRankFactors f = exp_lowrank(qt, kt, eps_target, gamma, stats);

  // q_tilde = c_tilde h^T with c_tilde = U1 (V1^T h) - Y^T. Same matrix as the
  // [U1 | Y^T] x [h (V1^T h)^T | -h] pairing but with factor width d, which is
  // what keeps the chained product inside the O(L (k+d)) memory envelope.
  DenseMatrix h = mul_atb(inst.a3, inst.w_ov.transposed());  // A3^T W_OV^T, L x d
  if (stats) {
    stats->flops += (std::uint64_t)inst.seq_len() * inst.dim() * inst.dim();
    stats->alloc(h.size());
  }
  DenseMatrix v1th = mul_atb(f.v, h);                   // k1 x d
  if (stats) {
    stats->flops += (std::uint64_t)f.v.rows() * f.v.cols() * h.cols();
    stats->alloc(v1th.size());
  }
  DenseMatrix c_tilde = counted_mul(f.u, v1th, stats);  // L x d
  c_tilde -= inst.y.transposed();

  DenseMatrix g = softmax_grad_fast_factors(inst.a1, inst.a2, f, c_tilde, h, stats);

  if (stats) {
    // Conservative certified chain: f-error propagated through q, p1, p2 and
    // the final congruence by A1, A2 row sums.
    const double h_max = norm(h, MatrixNorm::max);
    const double d_real = (double)inst.dim();
    const double err_c = (double)inst.seq_len() * f.err_bound * h_max;
    const double err_q = d_real * err_c * h_max;
    const double q_max = d_real * norm(c_tilde, MatrixNorm::max) * h_max;
    const double err_p1 = f.err_bound * (q_max + err_q) + err_q;
    const double err_r = (double)inst.seq_len() * f.err_bound * (q_max + err_q) + err_q;
    const double r_tilde_bound = (1.0 + 2.0 * (double)inst.seq_len() * f.err_bound) * q_max;
    const double err_p2 = r_tilde_bound * f.err_bound + err_r;
    stats->declared_err_bound =
        max_abs_row_sum(inst.a1) * max_abs_row_sum(inst.a2) * (err_p1 + err_p2);
  }
  return g;
}

}  // namespace ditlab
