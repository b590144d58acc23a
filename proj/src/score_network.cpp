#include "ditlab/score_network.hpp"

#include <cmath>
#include <fstream>

#include "ditlab/fast_attention.hpp"
#include "ditlab/rng.hpp"
#include "json.hpp"

namespace ditlab {

// ---------- reshape ----------

ReshapeSpec ReshapeSpec::image(std::size_t image_side, std::size_t patch_side) {
  ReshapeSpec s;
  s.image_side = image_side;
  s.patch_side = patch_side;
  s.token_dim = patch_side * patch_side;
  const std::size_t grid = image_side / patch_side;
  s.seq_len = grid * grid;
  s.latent_dim = s.token_dim * s.seq_len;
  s.validate();
  return s;
}

ReshapeSpec ReshapeSpec::flat(std::size_t latent_dim) {
  ReshapeSpec s;
  s.token_dim = latent_dim;
  s.seq_len = 1;
  s.latent_dim = latent_dim;
  return s;
}

void ReshapeSpec::validate() const {
  if (image_side == 0) {  // flat form
    if (token_dim * seq_len != latent_dim || seq_len != 1)
      throw std::invalid_argument("ReshapeSpec: bad flat form");
    return;
  }
  if (patch_side < 2) throw std::invalid_argument("ReshapeSpec: patch side must be >= 2");
  if (image_side % patch_side != 0)
    throw std::invalid_argument("ReshapeSpec: patch side must divide image side");
  if (token_dim != patch_side * patch_side ||
      seq_len != (image_side / patch_side) * (image_side / patch_side) ||
      latent_dim != token_dim * seq_len)
    throw std::invalid_argument("ReshapeSpec: inconsistent derived dimensions");
}

DenseMatrix ReshapeSpec::reshape(const std::vector<double>& x) const {
  if (x.size() != latent_dim)
    throw std::invalid_argument("reshape: expected length " + std::to_string(latent_dim));
  DenseMatrix tokens(token_dim, seq_len);
  if (image_side == 0) {
    for (std::size_t m = 0; m < token_dim; ++m) tokens(m, 0) = x[m];
    return tokens;
  }
  const std::size_t grid = image_side / patch_side;
  for (std::size_t pr = 0; pr < grid; ++pr)
    for (std::size_t pc = 0; pc < grid; ++pc) {
      const std::size_t k = pr * grid + pc;
      for (std::size_t u = 0; u < patch_side; ++u)
        for (std::size_t v = 0; v < patch_side; ++v)
          tokens(u * patch_side + v, k) =
              x[(pr * patch_side + u) * image_side + pc * patch_side + v];
    }
  return tokens;
}

std::vector<double> ReshapeSpec::unreshape(const DenseMatrix& tokens) const {
  if (tokens.rows() != token_dim || tokens.cols() != seq_len)
    throw std::invalid_argument("unreshape: token matrix shape mismatch");
  std::vector<double> x(latent_dim);
  if (image_side == 0) {
    for (std::size_t m = 0; m < token_dim; ++m) x[m] = tokens(m, 0);
    return x;
  }
  const std::size_t grid = image_side / patch_side;
  for (std::size_t pr = 0; pr < grid; ++pr)
    for (std::size_t pc = 0; pc < grid; ++pc) {
      const std::size_t k = pr * grid + pc;
      for (std::size_t u = 0; u < patch_side; ++u)
        for (std::size_t v = 0; v < patch_side; ++v)
          x[(pr * patch_side + u) * image_side + pc * patch_side + v] =
              tokens(u * patch_side + v, k);
    }
  return x;
}

// ---------- blocks ----------

TimeModulation TimeModulation::zero(std::size_t token_dim) {
  TimeModulation tm;
  tm.scale_coeff = DenseMatrix(token_dim, 2);
  tm.shift_coeff = DenseMatrix(token_dim, 2);
  tm.scale_bias.assign(token_dim, 0.0);
  tm.shift_bias.assign(token_dim, 0.0);
  return tm;
}

void TimeModulation::eval(double t, std::vector<double>& scale,
                          std::vector<double>& shift) const {
  const double phi0 = t, phi1 = std::exp(-t);
  const std::size_t d = scale_bias.size();
  scale.resize(d);
  shift.resize(d);
  for (std::size_t i = 0; i < d; ++i) {
    scale[i] = scale_coeff(i, 0) * phi0 + scale_coeff(i, 1) * phi1 + scale_bias[i];
    shift[i] = shift_coeff(i, 0) * phi0 + shift_coeff(i, 1) * phi1 + shift_bias[i];
  }
}

TransformerBlock TransformerBlock::zero(std::size_t token_dim, std::size_t heads,
                                        std::size_t head_dim, std::size_t hidden) {
  TransformerBlock b;
  b.heads = heads;
  b.head_dim = head_dim;
  b.hidden = hidden;
  b.w_k.assign(heads, DenseMatrix(head_dim, token_dim));
  b.w_q.assign(heads, DenseMatrix(head_dim, token_dim));
  b.w_v.assign(heads, DenseMatrix(head_dim, token_dim));
  b.w_o.assign(heads, DenseMatrix(token_dim, head_dim));
  b.w1 = DenseMatrix(hidden, token_dim);
  b.w2 = DenseMatrix(token_dim, hidden);
  b.b1.assign(hidden, 0.0);
  b.b2.assign(token_dim, 0.0);
  b.time_mod = TimeModulation::zero(token_dim);
  return b;
}

void TransformerBlock::validate(std::size_t token_dim) const {
  auto check = [&](const DenseMatrix& m, std::size_t r, std::size_t c, const char* name) {
    if (m.rows() != r || m.cols() != c)
      throw std::invalid_argument(std::string("TransformerBlock: bad shape for ") + name);
    m.require_finite(name);
  };
  if (w_k.size() != heads || w_q.size() != heads || w_v.size() != heads ||
      w_o.size() != heads)
    throw std::invalid_argument("TransformerBlock: per-head weight count mismatch");
  for (std::size_t i = 0; i < heads; ++i) {
    check(w_k[i], head_dim, token_dim, "W_K");
    check(w_q[i], head_dim, token_dim, "W_Q");
    check(w_v[i], head_dim, token_dim, "W_V");
    check(w_o[i], token_dim, head_dim, "W_O");
  }
  check(w1, hidden, token_dim, "W_1");
  check(w2, token_dim, hidden, "W_2");
  if (b1.size() != hidden || b2.size() != token_dim)
    throw std::invalid_argument("TransformerBlock: bias length mismatch");
}

void ScoreNetwork::validate() const {
  reshape.validate();
  if (encoder.cols() != reshape.latent_dim)
    throw std::invalid_argument("ScoreNetwork: encoder/reshape dimension mismatch");
  DenseMatrix gram = encoder.transposed() * encoder;
  gram -= DenseMatrix::identity(encoder.cols());
  if (norm(gram, MatrixNorm::max) > 1e-8)
    throw std::invalid_argument("ScoreNetwork: encoder columns not orthonormal");
  if (pos_enc.rows() != reshape.token_dim || pos_enc.cols() != reshape.seq_len)
    throw std::invalid_argument("ScoreNetwork: positional encoding shape mismatch");
  for (const auto& b : blocks) b.validate(reshape.token_dim);
}

DenseMatrix ScoreNetwork::default_pos_enc(std::size_t token_dim, std::size_t seq_len,
                                          double scale) {
  DenseMatrix e(token_dim, seq_len);
  for (std::size_t i = 0; i < token_dim; ++i)
    for (std::size_t j = 0; j < seq_len; ++j) e(i, j) = scale * (double)j;
  return e;
}

ScoreNetwork ScoreNetwork::make(const DenseMatrix& encoder, const ReshapeSpec& reshape,
                                std::size_t n_blocks, std::size_t heads,
                                std::size_t head_dim, std::size_t hidden,
                                double init_scale, std::uint64_t seed,
                                double pos_enc_scale) {
  ScoreNetwork net;
  net.encoder = encoder;
  net.reshape = reshape;
  net.pos_enc = default_pos_enc(reshape.token_dim, reshape.seq_len, pos_enc_scale);
  CounterRng rng(seed, /*stream=*/0x5C02E);
  auto fill = [&](DenseMatrix& m) {
    for (double& v : m.data()) v = init_scale * rng.normal();
  };
  for (std::size_t k = 0; k < n_blocks; ++k) {
    TransformerBlock b = TransformerBlock::zero(reshape.token_dim, heads, head_dim, hidden);
    for (std::size_t i = 0; i < heads; ++i) {
      fill(b.w_k[i]);
      fill(b.w_q[i]);
      fill(b.w_v[i]);
      fill(b.w_o[i]);
    }
    fill(b.w1);
    fill(b.w2);
    net.blocks.push_back(std::move(b));
  }
  net.validate();
  return net;
}

namespace {

// Softmax over each column; the attention weight matrix is column-stochastic.
DenseMatrix softmax_columns(const DenseMatrix& scores) {
  DenseMatrix s(scores.rows(), scores.cols());
  for (std::size_t j = 0; j < scores.cols(); ++j) {
    double m = scores(0, j);
    for (std::size_t i = 1; i < scores.rows(); ++i) m = std::max(m, scores(i, j));
    double sum = 0.0;
    for (std::size_t i = 0; i < scores.rows(); ++i) {
      const double e = std::exp(scores(i, j) - m);
      s(i, j) = e;
      sum += e;
    }
    for (std::size_t i = 0; i < scores.rows(); ++i) s(i, j) /= sum;
  }
  return s;
}

struct HeadCache {
  DenseMatrix k, q, v;   // m x L
  DenseMatrix attn;      // L x L column-stochastic
  DenseMatrix v_attn;    // m x L, V * attn
};

struct BlockCache {
  DenseMatrix input;          // X before modulation
  DenseMatrix modulated;      // Xm
  std::vector<double> scale;  // s(t)
  std::vector<HeadCache> heads;
  DenseMatrix after_attn;     // A
  DenseMatrix ff_pre;         // W1 A + b1 1^T
  DenseMatrix output;         // Z
};

DenseMatrix modulate(const DenseMatrix& x, const TransformerBlock& block, double t,
                     std::vector<double>* scale_out) {
  std::vector<double> scale, shift;
  block.time_mod.eval(t, scale, shift);
  DenseMatrix xm = x;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j)
      xm(i, j) = (1.0 + scale[i]) * x(i, j) + shift[i];
  if (scale_out) *scale_out = std::move(scale);
  return xm;
}

DenseMatrix block_forward_cached(const DenseMatrix& tokens, const TransformerBlock& block,
                                 double t, BlockCache* cache) {
  if (cache) cache->input = tokens;
  std::vector<double> scale;
  DenseMatrix xm = modulate(tokens, block, t, &scale);
  if (cache) {
    cache->modulated = xm;
    cache->scale = std::move(scale);
    cache->heads.resize(block.heads);
  }

  DenseMatrix a = xm;
  for (std::size_t h = 0; h < block.heads; ++h) {
    DenseMatrix k = block.w_k[h] * xm;
    DenseMatrix q = block.w_q[h] * xm;
    DenseMatrix v = block.w_v[h] * xm;
    DenseMatrix attn = softmax_columns(k.transposed() * q);
    DenseMatrix v_attn = v * attn;
    a += block.w_o[h] * v_attn;
    if (cache) {
      auto& hc = cache->heads[h];
      hc.k = std::move(k);
      hc.q = std::move(q);
      hc.v = std::move(v);
      hc.attn = std::move(attn);
      hc.v_attn = std::move(v_attn);
    }
  }

  DenseMatrix pre = block.w1 * a;
  for (std::size_t i = 0; i < pre.rows(); ++i)
    for (std::size_t j = 0; j < pre.cols(); ++j) pre(i, j) += block.b1[i];
  DenseMatrix relu = pre;
  for (double& v : relu.data()) v = v > 0.0 ? v : 0.0;
  DenseMatrix z = a + block.w2 * relu;
  for (std::size_t i = 0; i < z.rows(); ++i)
    for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) += block.b2[i];

  if (cache) {
    cache->after_attn = std::move(a);
    cache->ff_pre = std::move(pre);
    cache->output = z;
  }
  return z;
}

}  // namespace

DenseMatrix block_forward(const DenseMatrix& tokens, const TransformerBlock& block,
                          double t) {
  return block_forward_cached(tokens, block, t, nullptr);
}

std::vector<double> latent_map(const ScoreNetwork& net, const std::vector<double>& h,
                               double t) {
  DenseMatrix x = net.reshape.reshape(h);
  x += net.pos_enc;
  for (const auto& block : net.blocks) x = block_forward(x, block, t);
  return net.reshape.unreshape(x);
}

std::vector<double> score_forward(const ScoreNetwork& net, const std::vector<double>& x_bar,
                                  double t, const DiffusionSchedule& schedule) {
  return score_with_latent_map(
      net.encoder,
      [&net](const std::vector<double>& h, double tt) { return latent_map(net, h, tt); },
      x_bar, t, schedule);
}

std::vector<double> score_with_latent_map(
    const DenseMatrix& encoder,
    const std::function<std::vector<double>(const std::vector<double>&, double)>& f,
    const std::vector<double>& x_bar, double t, const DiffusionSchedule& schedule) {
  if (!(t > 0.0) || t > schedule.horizon)
    throw std::domain_error("score_forward: t must lie in (0, T]");
  if (x_bar.size() != encoder.rows())
    throw std::invalid_argument("score_forward: input dimension mismatch");
  const double sigma = DiffusionSchedule::sigma(t);
  const std::vector<double> h = encoder.mul_vec_transposed(x_bar);
  const std::vector<double> u = f(h, t);
  std::vector<double> s = encoder.mul_vec(u);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = (s[i] - x_bar[i]) / sigma;
  return s;
}

NormBudget norm_budget(const ScoreNetwork& net, std::size_t sample_count,
                       std::uint64_t seed, double t_probe) {
  NormBudget nb;
  for (const auto& b : net.blocks) {
    BlockNormBudget bb;
    for (std::size_t h = 0; h < b.heads; ++h) {
      const DenseMatrix ov_t = b.w_ov(h).transposed();
      const DenseMatrix kq = b.w_kq(h);
      bb.c_ov_two_inf = std::max(bb.c_ov_two_inf, norm(ov_t, MatrixNorm::two_inf));
      bb.c_ov_op = std::max(bb.c_ov_op, norm(ov_t, MatrixNorm::op2));
      bb.c_kq_two_inf = std::max(bb.c_kq_two_inf, norm(kq, MatrixNorm::two_inf));
      bb.c_kq_op = std::max(bb.c_kq_op, norm(kq, MatrixNorm::op2));
    }
    for (const DenseMatrix* wf : {&b.w1, &b.w2}) {
      bb.c_f_two_inf = std::max(bb.c_f_two_inf, norm(*wf, MatrixNorm::two_inf));
      bb.c_f_op = std::max(bb.c_f_op, norm(*wf, MatrixNorm::op2));
    }
    nb.blocks.push_back(bb);
  }
  nb.c_e = norm(net.pos_enc.transposed(), MatrixNorm::two_inf);

  // Sampled estimates over the Frobenius ball of radius 10.
  nb.sample_count = sample_count;
  CounterRng rng(seed, /*stream=*/0xE57);
  const std::size_t d = net.reshape.token_dim, L = net.reshape.seq_len;
  auto run_stack = [&](const DenseMatrix& x0) {
    DenseMatrix x = x0;
    for (const auto& block : net.blocks) x = block_forward(x, block, t_probe);
    return x;
  };
  auto random_in_ball = [&]() {
    DenseMatrix x(d, L);
    for (double& v : x.data()) v = rng.normal();
    const double f = norm(x, MatrixNorm::frobenius);
    const double radius = 10.0 * rng.uniform();
    if (f > 0.0) x = x.scaled(radius / f);
    return x;
  };
  for (std::size_t s = 0; s < sample_count; ++s) {
    DenseMatrix x1 = random_in_ball();
    DenseMatrix y1 = run_stack(x1);
    nb.c_t_est = std::max(nb.c_t_est, norm(y1, MatrixNorm::frobenius));
    DenseMatrix x2 = x1;
    const double step = (s % 2 == 0) ? 1e-3 : 1.0;
    for (double& v : x2.data()) v += step * rng.normal();
    DenseMatrix y2 = run_stack(x2);
    const double dx = norm(x2 - x1, MatrixNorm::frobenius);
    if (dx > 0.0)
      nb.l_t_est = std::max(nb.l_t_est, norm(y2 - y1, MatrixNorm::frobenius) / dx);
  }
  return nb;
}

// ---------- checkpoint ----------

namespace {

nlohmann::json matrix_to_json(const DenseMatrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

DenseMatrix matrix_from_json(const nlohmann::json& j) {
  DenseMatrix m(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>());
  const auto data = j.at("data").get<std::vector<double>>();
  if (data.size() != m.size()) throw std::runtime_error("checkpoint: flat array length mismatch");
  m.data() = data;
  return m;
}

}  // namespace

void save_checkpoint(const ScoreNetwork& net, const std::string& path) {
  nlohmann::json j;
  j["format"] = "ditlab-score-net-v1";
  j["encoder"] = matrix_to_json(net.encoder);
  j["reshape"] = {{"image_side", net.reshape.image_side},
                  {"patch_side", net.reshape.patch_side},
                  {"token_dim", net.reshape.token_dim},
                  {"seq_len", net.reshape.seq_len},
                  {"latent_dim", net.reshape.latent_dim}};
  j["pos_enc"] = matrix_to_json(net.pos_enc);
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : net.blocks) {
    nlohmann::json jb;
    jb["heads"] = b.heads;
    jb["head_dim"] = b.head_dim;
    jb["hidden"] = b.hidden;
    for (const char* name : {"w_k", "w_q", "w_v", "w_o"}) jb[name] = nlohmann::json::array();
    for (std::size_t h = 0; h < b.heads; ++h) {
      jb["w_k"].push_back(matrix_to_json(b.w_k[h]));
      jb["w_q"].push_back(matrix_to_json(b.w_q[h]));
      jb["w_v"].push_back(matrix_to_json(b.w_v[h]));
      jb["w_o"].push_back(matrix_to_json(b.w_o[h]));
    }
    jb["w1"] = matrix_to_json(b.w1);
    jb["w2"] = matrix_to_json(b.w2);
    jb["b1"] = b.b1;
    jb["b2"] = b.b2;
    jb["time_mod"] = {{"scale_coeff", matrix_to_json(b.time_mod.scale_coeff)},
                      {"scale_bias", b.time_mod.scale_bias},
                      {"shift_coeff", matrix_to_json(b.time_mod.shift_coeff)},
                      {"shift_bias", b.time_mod.shift_bias}};
    blocks.push_back(std::move(jb));
  }
  j["blocks"] = std::move(blocks);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out << j.dump(2) << "\n";
}

ScoreNetwork load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  nlohmann::json j;
  in >> j;
  if (j.value("format", "") != "ditlab-score-net-v1")
    throw std::runtime_error("load_checkpoint: unknown format");
  ScoreNetwork net;
  net.encoder = matrix_from_json(j.at("encoder"));
  const auto& jr = j.at("reshape");
  net.reshape.image_side = jr.at("image_side").get<std::size_t>();
  net.reshape.patch_side = jr.at("patch_side").get<std::size_t>();
  net.reshape.token_dim = jr.at("token_dim").get<std::size_t>();
  net.reshape.seq_len = jr.at("seq_len").get<std::size_t>();
  net.reshape.latent_dim = jr.at("latent_dim").get<std::size_t>();
  net.pos_enc = matrix_from_json(j.at("pos_enc"));
  for (const auto& jb : j.at("blocks")) {
    TransformerBlock b;
    b.heads = jb.at("heads").get<std::size_t>();
    b.head_dim = jb.at("head_dim").get<std::size_t>();
    b.hidden = jb.at("hidden").get<std::size_t>();
    for (std::size_t h = 0; h < b.heads; ++h) {
      b.w_k.push_back(matrix_from_json(jb.at("w_k").at(h)));
      b.w_q.push_back(matrix_from_json(jb.at("w_q").at(h)));
      b.w_v.push_back(matrix_from_json(jb.at("w_v").at(h)));
      b.w_o.push_back(matrix_from_json(jb.at("w_o").at(h)));
    }
    b.w1 = matrix_from_json(jb.at("w1"));
    b.w2 = matrix_from_json(jb.at("w2"));
    b.b1 = jb.at("b1").get<std::vector<double>>();
    b.b2 = jb.at("b2").get<std::vector<double>>();
    const auto& jt = jb.at("time_mod");
    b.time_mod.scale_coeff = matrix_from_json(jt.at("scale_coeff"));
    b.time_mod.scale_bias = jt.at("scale_bias").get<std::vector<double>>();
    b.time_mod.shift_coeff = matrix_from_json(jt.at("shift_coeff"));
    b.time_mod.shift_bias = jt.at("shift_bias").get<std::vector<double>>();
    net.blocks.push_back(std::move(b));
  }
  net.validate();
  return net;
}

// ---------- gradients ----------

NetworkGrads NetworkGrads::zeros_like(const ScoreNetwork& net) {
  NetworkGrads g;
  g.encoder = DenseMatrix(net.encoder.rows(), net.encoder.cols());
  for (const auto& b : net.blocks) {
    BlockGrads bg;
    bg.w_k.assign(b.heads, DenseMatrix(b.head_dim, net.reshape.token_dim));
    bg.w_q.assign(b.heads, DenseMatrix(b.head_dim, net.reshape.token_dim));
    bg.w_v.assign(b.heads, DenseMatrix(b.head_dim, net.reshape.token_dim));
    bg.w_o.assign(b.heads, DenseMatrix(net.reshape.token_dim, b.head_dim));
    bg.w1 = DenseMatrix(b.hidden, net.reshape.token_dim);
    bg.w2 = DenseMatrix(net.reshape.token_dim, b.hidden);
    bg.b1.assign(b.hidden, 0.0);
    bg.b2.assign(net.reshape.token_dim, 0.0);
    bg.time_mod.scale_coeff = DenseMatrix(net.reshape.token_dim, 2);
    bg.time_mod.scale_bias.assign(net.reshape.token_dim, 0.0);
    bg.time_mod.shift_coeff = DenseMatrix(net.reshape.token_dim, 2);
    bg.time_mod.shift_bias.assign(net.reshape.token_dim, 0.0);
    g.blocks.push_back(std::move(bg));
  }
  return g;
}

void NetworkGrads::scale(double s) {
  for (double& v : encoder.data()) v *= s;
  for (auto& b : blocks) {
    for (auto* group : {&b.w_k, &b.w_q, &b.w_v, &b.w_o})
      for (auto& m : *group)
        for (double& v : m.data()) v *= s;
    for (double& v : b.w1.data()) v *= s;
    for (double& v : b.w2.data()) v *= s;
    for (double& v : b.b1) v *= s;
    for (double& v : b.b2) v *= s;
    for (double& v : b.time_mod.scale_coeff.data()) v *= s;
    for (double& v : b.time_mod.shift_coeff.data()) v *= s;
    for (double& v : b.time_mod.scale_bias) v *= s;
    for (double& v : b.time_mod.shift_bias) v *= s;
  }
}

namespace {

// Backward through one block. g_out is dLoss/dZ; returns dLoss/dX and
// accumulates parameter gradients.
DenseMatrix block_backward(const TransformerBlock& block, const BlockCache& cache,
                           double t, const DenseMatrix& g_out, bool use_fast_grad,
                           double fast_eps, BlockGrads& grads) {
  const std::size_t d = cache.input.rows(), L = cache.input.cols();

  // Feed-forward: Z = A + W2 relu(W1 A + b1 1^T) + b2 1^T.
  DenseMatrix g_a = g_out;
  {
    DenseMatrix g_relu = block.w2.transposed() * g_out;  // l x L
    DenseMatrix relu = cache.ff_pre;
    for (double& v : relu.data()) v = v > 0.0 ? v : 0.0;
    grads.w2 += g_out * relu.transposed();
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < L; ++j) grads.b2[i] += g_out(i, j);
    for (std::size_t i = 0; i < g_relu.rows(); ++i)
      for (std::size_t j = 0; j < L; ++j)
        if (cache.ff_pre(i, j) <= 0.0) g_relu(i, j) = 0.0;
    grads.w1 += g_relu * cache.after_attn.transposed();
    for (std::size_t i = 0; i < g_relu.rows(); ++i)
      for (std::size_t j = 0; j < L; ++j) grads.b1[i] += g_relu(i, j);
    g_a += block.w1.transposed() * g_relu;
  }

  // Attention: A = Xm + sum_h W_O (W_V Xm) S_h.
  DenseMatrix g_xm = g_a;
  for (std::size_t h = 0; h < block.heads; ++h) {
    const auto& hc = cache.heads[h];
    grads.w_o[h] += g_a * hc.v_attn.transposed();
    DenseMatrix g_m = block.w_o[h].transposed() * g_a;  // m x L
    // Value side.
    DenseMatrix g_v = g_m * hc.attn.transposed();
    grads.w_v[h] += g_v * cache.modulated.transposed();
    g_xm += block.w_v[h].transposed() * g_v;

    if (!use_fast_grad) {
      // Column-softmax backward, then the two scores factors.
      DenseMatrix g_s = hc.v.transposed() * g_m;  // L x L
      DenseMatrix g_scores(L, L);
      for (std::size_t j = 0; j < L; ++j) {
        double inner = 0.0;
        for (std::size_t i = 0; i < L; ++i) inner += hc.attn(i, j) * g_s(i, j);
        for (std::size_t i = 0; i < L; ++i)
          g_scores(i, j) = hc.attn(i, j) * (g_s(i, j) - inner);
      }
      DenseMatrix g_k = hc.q * g_scores.transposed();  // m x L
      DenseMatrix g_q = hc.k * g_scores;               // m x L
      grads.w_k[h] += g_k * cache.modulated.transposed();
      grads.w_q[h] += g_q * cache.modulated.transposed();
      g_xm += block.w_k[h].transposed() * g_k;
      g_xm += block.w_q[h].transposed() * g_q;
    } else {
      // Route the key/query gradient through the chained low-rank machinery.
      // With f := S^T (row-stochastic, scores Q^T K), the head output is
      // W_OV Xm f(W')^T for W' = W_Q^T W_K, and dLoss/df = g_m^T V in
      // factored form.
      const DenseMatrix qt = hc.q.transposed();  // L x m
      const DenseMatrix kt = hc.k.transposed();  // L x m
      const double gamma =
          std::max(norm(qt, MatrixNorm::max), norm(kt, MatrixNorm::max));
      LowRankFactors f_factors = exp_lowrank(qt, kt, fast_eps, gamma);
      DenseMatrix uq = g_m.transposed();   // L x m
      DenseMatrix vq = hc.v.transposed();  // L x m
      DenseMatrix g_wprime = softmax_grad_fast_factors(cache.modulated, cache.modulated,
                                                       f_factors, uq, vq);
      grads.w_k[h] += block.w_q[h] * g_wprime;
      grads.w_q[h] += block.w_k[h] * g_wprime.transposed();
      // Input-side gradient through the scores, exact small matrices:
      // g_Xm += W' (diag terms). Reconstruct g_scores from the same f and q
      // factors to keep the input path consistent.
      DenseMatrix f_approx = f_factors.u * f_factors.v.transposed();
      DenseMatrix g_s = hc.v.transposed() * g_m;
      DenseMatrix g_scores(L, L);
      for (std::size_t j = 0; j < L; ++j) {
        double inner = 0.0;
        for (std::size_t i = 0; i < L; ++i) inner += f_approx(j, i) * g_s(i, j);
        for (std::size_t i = 0; i < L; ++i)
          g_scores(i, j) = f_approx(j, i) * (g_s(i, j) - inner);
      }
      DenseMatrix g_k = hc.q * g_scores.transposed();
      DenseMatrix g_q = hc.k * g_scores;
      g_xm += block.w_k[h].transposed() * g_k;
      g_xm += block.w_q[h].transposed() * g_q;
    }
  }

  // Modulation: Xm = (1 + s) .* X + b, both affine in (t, e^{-t}).
  const double phi0 = t, phi1 = std::exp(-t);
  DenseMatrix g_x(d, L);
  for (std::size_t i = 0; i < d; ++i) {
    double gs = 0.0, gb = 0.0;
    for (std::size_t j = 0; j < L; ++j) {
      g_x(i, j) = (1.0 + cache.scale[i]) * g_xm(i, j);
      gs += g_xm(i, j) * cache.input(i, j);
      gb += g_xm(i, j);
    }
    grads.time_mod.scale_coeff(i, 0) += gs * phi0;
    grads.time_mod.scale_coeff(i, 1) += gs * phi1;
    grads.time_mod.scale_bias[i] += gs;
    grads.time_mod.shift_coeff(i, 0) += gb * phi0;
    grads.time_mod.shift_coeff(i, 1) += gb * phi1;
    grads.time_mod.shift_bias[i] += gb;
  }
  return g_x;
}

}  // namespace

double score_backward(const ScoreNetwork& net, const std::vector<double>& x_bar, double t,
                      const DiffusionSchedule& schedule, const std::vector<double>& target,
                      bool use_fast_grad, double fast_eps, NetworkGrads& grads) {
  if (!(t > 0.0) || t > schedule.horizon)
    throw std::domain_error("score_backward: t must lie in (0, T]");
  const double sigma = DiffusionSchedule::sigma(t);

  // Forward with caches.
  const std::vector<double> h0 = net.encoder.mul_vec_transposed(x_bar);
  DenseMatrix x = net.reshape.reshape(h0);
  x += net.pos_enc;
  std::vector<BlockCache> caches(net.blocks.size());
  for (std::size_t k = 0; k < net.blocks.size(); ++k)
    x = block_forward_cached(x, net.blocks[k], t, &caches[k]);
  const std::vector<double> u = net.reshape.unreshape(x);

  std::vector<double> bu = net.encoder.mul_vec(u);
  std::vector<double> resid(x_bar.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < x_bar.size(); ++i) {
    const double s = (bu[i] - x_bar[i]) / sigma;
    resid[i] = s - target[i];
    loss += resid[i] * resid[i];
  }

  // d loss / d u = (2 / sigma) W_B^T resid; decoder-side encoder gradient.
  std::vector<double> g_u = net.encoder.mul_vec_transposed(resid);
  for (auto& v : g_u) v *= 2.0 / sigma;
  for (std::size_t i = 0; i < net.encoder.rows(); ++i)
    for (std::size_t j = 0; j < net.encoder.cols(); ++j)
      grads.encoder(i, j) += (2.0 / sigma) * resid[i] * u[j];

  DenseMatrix g_tokens = net.reshape.reshape(g_u);
  for (std::size_t k = net.blocks.size(); k-- > 0;)
    g_tokens = block_backward(net.blocks[k], caches[k], t, g_tokens, use_fast_grad,
                              fast_eps, grads.blocks[k]);
  const std::vector<double> g_h0 = net.reshape.unreshape(g_tokens);

  // Encoder-side gradient through h0 = W_B^T x.
  for (std::size_t i = 0; i < net.encoder.rows(); ++i)
    for (std::size_t j = 0; j < net.encoder.cols(); ++j)
      grads.encoder(i, j) += x_bar[i] * g_h0[j];

  return loss;
}

void reorthonormalize_columns(DenseMatrix& m) {
  const std::size_t n = m.cols();
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> v = m.col(j);
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t k = 0; k < j; ++k) {
        const std::vector<double> mk = m.col(k);
        const double proj = dot(v, mk);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= proj * mk[i];
      }
    const double nv = norm2(v);
    if (nv < 1e-12) throw std::runtime_error("reorthonormalize: rank-deficient columns");
    for (auto& e : v) e /= nv;
    m.set_col(j, v);
  }
}

void apply_update(ScoreNetwork& net, const NetworkGrads& grads, double learning_rate) {
  if (learning_rate == 0.0) return;
  auto step_mat = [&](DenseMatrix& w, const DenseMatrix& g) {
    for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] -= learning_rate * g.data()[i];
  };
  auto step_vec = [&](std::vector<double>& w, const std::vector<double>& g) {
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= learning_rate * g[i];
  };
  step_mat(net.encoder, grads.encoder);
  for (std::size_t k = 0; k < net.blocks.size(); ++k) {
    auto& b = net.blocks[k];
    const auto& g = grads.blocks[k];
    for (std::size_t h = 0; h < b.heads; ++h) {
      step_mat(b.w_k[h], g.w_k[h]);
      step_mat(b.w_q[h], g.w_q[h]);
      step_mat(b.w_v[h], g.w_v[h]);
      step_mat(b.w_o[h], g.w_o[h]);
    }
    step_mat(b.w1, g.w1);
    step_mat(b.w2, g.w2);
    step_vec(b.b1, g.b1);
    step_vec(b.b2, g.b2);
    step_mat(b.time_mod.scale_coeff, g.time_mod.scale_coeff);
    step_vec(b.time_mod.scale_bias, g.time_mod.scale_bias);
    step_mat(b.time_mod.shift_coeff, g.time_mod.shift_coeff);
    step_vec(b.time_mod.shift_bias, g.time_mod.shift_bias);
  }
  reorthonormalize_columns(net.encoder);
}

}  // namespace ditlab
