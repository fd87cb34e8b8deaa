// SPDX-License-Identifier: Apache-2.0
//
// Multi-token reward decomposition on an explicit softmax head
// f(x) = softmax(W g(x)) with fixed context embeddings g(i, j, w/l).
//
// Token reward:   r(y at g) = beta (log S(W g) - log S(W0 g))[y]
// Response reward: sum of token rewards over positions j = 1..L.
// Weight flow:    tau W' = (beta/N) sum_i sigma(r_l,i - r_w,i)
//                          sum_j (y_w g_w^T - y_l g_l^T - S(W g_w) g_w^T + S(W g_l) g_l^T)
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <istream>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "prefdyn/prefdist.hpp"
#include "prefdyn/rng.hpp"
#include "prefdyn/tabular.hpp"
#include "prefdyn/weight_fn.hpp"

namespace prefdyn::multitoken {

struct SoftmaxModel {
  Matrix w;   // |V| x d
  Matrix w0;  // reference
  double beta = 1.0;

  Eigen::Index vocab() const { return w.rows(); }
  Eigen::Index dim() const { return w.cols(); }

  void validate() const {
    if (w.rows() < 2 || w.cols() < 1) throw std::invalid_argument("SoftmaxModel: need |V| >= 2 and d >= 1");
    if (w.rows() != w0.rows() || w.cols() != w0.cols()) throw std::invalid_argument("SoftmaxModel: W and W0 differ in shape");
    if (!w.allFinite() || !w0.allFinite() || !std::isfinite(beta)) throw std::invalid_argument("SoftmaxModel: non-finite entries");
  }
};

enum class Side { w, l };

struct MultiTokenSample {
  std::vector<Vector> context_w;
  std::vector<Vector> context_l;
  std::vector<TokenId> tokens_w;
  std::vector<TokenId> tokens_l;

  std::size_t length() const { return tokens_w.size(); }
  const std::vector<Vector>& contexts(Side s) const { return s == Side::w ? context_w : context_l; }
  const std::vector<TokenId>& tokens(Side s) const { return s == Side::w ? tokens_w : tokens_l; }

  void validate(Eigen::Index d, Eigen::Index vocab) const {
    const std::size_t len = tokens_w.size();
    if (len == 0) throw std::invalid_argument("MultiTokenSample: empty response");
    if (tokens_l.size() != len || context_w.size() != len || context_l.size() != len)
      throw std::invalid_argument("MultiTokenSample: preferred and rejected responses must have equal length");
    for (std::size_t j = 0; j < len; ++j) {
      if (context_w[j].size() != d || context_l[j].size() != d)
        throw std::invalid_argument("MultiTokenSample: context dimension mismatch");
      if (tokens_w[j] < 0 || tokens_w[j] >= vocab || tokens_l[j] < 0 || tokens_l[j] >= vocab)
        throw std::invalid_argument("MultiTokenSample: token id out of range");
    }
  }
};

/// Max-shifted log-softmax: z - LSE(z).
inline Vector log_softmax(const Vector& z) {
  const double m = z.maxCoeff();
  const double lse = m + std::log((z.array() - m).exp().sum());
  return z.array() - lse;
}

inline Vector softmax(const Vector& z) { return log_softmax(z).array().exp(); }

inline double token_reward(const SoftmaxModel& model, const Vector& g, TokenId token) {
  if (g.size() != model.dim()) throw std::invalid_argument("token_reward: embedding dimension mismatch");
  if (token < 0 || token >= model.vocab()) throw std::invalid_argument("token_reward: token out of range");
  return model.beta * (log_softmax(model.w * g)[token] - log_softmax(model.w0 * g)[token]);
}

inline double response_reward(const SoftmaxModel& model, const MultiTokenSample& s, Side side) {
  const auto& ctx = s.contexts(side);
  const auto& tok = s.tokens(side);
  double r = 0.0;
  for (std::size_t j = 0; j < tok.size(); ++j) r += token_reward(model, ctx[j], tok[j]);
  return r;
}

inline double sample_margin(const SoftmaxModel& model, const MultiTokenSample& s) {
  return response_reward(model, s, Side::w) - response_reward(model, s, Side::l);
}

/// (1/N) sum -log sigma(r_w - r_l).
inline double batch_loss(const SoftmaxModel& model, const std::vector<MultiTokenSample>& batch) {
  double s = 0.0;
  for (const auto& b : batch) s += softplus(-sample_margin(model, b));
  return s / static_cast<double>(batch.size());
}

/// tau W' (equivalently -dLoss/dW).
inline Matrix weight_gradient(const SoftmaxModel& model, const std::vector<MultiTokenSample>& batch) {
  if (batch.empty()) throw std::invalid_argument("weight_gradient: empty batch");
  Matrix grad = Matrix::Zero(model.vocab(), model.dim());
  for (const auto& s : batch) {
    const double weight = sigmoid(-sample_margin(model, s));
    if (weight == 0.0) continue;
    for (std::size_t j = 0; j < s.length(); ++j) {
      const Vector& gw = s.context_w[j];
      const Vector& gl = s.context_l[j];
      Vector dir_w = -softmax(model.w * gw);
      dir_w[s.tokens_w[j]] += 1.0;
      Vector dir_l = -softmax(model.w * gl);
      dir_l[s.tokens_l[j]] += 1.0;
      grad.noalias() += weight * (dir_w * gw.transpose() - dir_l * gl.transpose());
    }
  }
  return (model.beta / static_cast<double>(batch.size())) * grad;
}

struct GradientBreakdown {
  double cooccurrence = 0;
  double probability = 0;
  double distribution_corr = 0;
  double total = 0;  // cooccurrence - probability + distribution_corr
};

/// Three-factor decomposition of tau d/dt r(probe_token at probe_g), with
///   C*(i,j,s)  = g(i,j,s)^T g*
///   p(i,j,s)   = S(W g(i,j,s))[y] + S(W g*)[y_s^(j)]
///   d_p(i,j,s) = S(W g*)^T S(W g(i,j,s)).
/// The '+' in p is what the chain rule through log S(W g*) produces.
inline GradientBreakdown reward_gradient_breakdown(const SoftmaxModel& model, const std::vector<MultiTokenSample>& batch,
                                                   TokenId probe_token, const Vector& probe_g) {
  if (probe_g.size() != model.dim()) throw std::invalid_argument("reward_gradient_breakdown: probe dimension mismatch");
  if (probe_token < 0 || probe_token >= model.vocab()) throw std::invalid_argument("reward_gradient_breakdown: probe token out of range");
  if (batch.empty()) throw std::invalid_argument("reward_gradient_breakdown: empty batch");
  const Vector s_star = softmax(model.w * probe_g);
  GradientBreakdown out;
  for (const auto& s : batch) {
    const double weight = sigmoid(-sample_margin(model, s));
    for (std::size_t j = 0; j < s.length(); ++j) {
      for (Side side : {Side::w, Side::l}) {
        const double sgn = side == Side::w ? 1.0 : -1.0;
        const Vector& g = s.contexts(side)[j];
        const TokenId tok = s.tokens(side)[j];
        const Vector s_ctx = softmax(model.w * g);
        const double c_star = g.dot(probe_g);
        const double p = s_ctx[probe_token] + s_star[tok];
        const double dp = s_star.dot(s_ctx);
        out.cooccurrence += weight * sgn * (tok == probe_token ? 1.0 : 0.0) * c_star;
        out.probability += weight * sgn * p * c_star;
        out.distribution_corr += weight * sgn * dp * c_star;
      }
    }
  }
  const double scale = model.beta * model.beta / static_cast<double>(batch.size());
  out.cooccurrence *= scale;
  out.probability *= scale;
  out.distribution_corr *= scale;
  out.total = out.cooccurrence - out.probability + out.distribution_corr;
  return out;
}

/// Same quantity by direct contraction: beta (y - S(W g*))^T (tau W') g*.
inline double reward_rate_by_contraction(const SoftmaxModel& model, const std::vector<MultiTokenSample>& batch,
                                         TokenId probe_token, const Vector& probe_g) {
  Vector sens = -softmax(model.w * probe_g);
  sens[probe_token] += 1.0;
  return model.beta * sens.dot(weight_gradient(model, batch) * probe_g);
}

// --- random instances -------------------------------------------------------

inline SoftmaxModel random_model(Eigen::Index vocab, Eigen::Index d, double beta, CounterRng& rng, double scale = 0.5) {
  std::normal_distribution<double> nd(0.0, scale);
  SoftmaxModel m{Matrix(vocab, d), Matrix(vocab, d), beta};
  for (Eigen::Index i = 0; i < m.w.size(); ++i) m.w.data()[i] = nd(rng);
  for (Eigen::Index i = 0; i < m.w0.size(); ++i) m.w0.data()[i] = nd(rng);
  return m;
}

inline std::vector<MultiTokenSample> random_batch(std::size_t n, std::size_t length, Eigen::Index vocab, Eigen::Index d,
                                                  CounterRng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_int_distribution<TokenId> tok(0, vocab - 1);
  auto vec = [&] {
    Vector v(d);
    for (Eigen::Index k = 0; k < d; ++k) v[k] = nd(rng);
    return v;
  };
  std::vector<MultiTokenSample> batch(n);
  for (auto& s : batch)
    for (std::size_t j = 0; j < length; ++j) {
      s.context_w.push_back(vec());
      s.context_l.push_back(vec());
      s.tokens_w.push_back(tok(rng));
      s.tokens_l.push_back(tok(rng));
    }
  return batch;
}

// --- tabular batch input ----------------------------------------------------

/// Rows: sample_id, side (w|l), position, token, then d floats. A header row
/// is skipped when its first field is not an integer. Samples keep first-seen
/// order; positions are sorted within each side.
inline std::vector<MultiTokenSample> read_batch(std::istream& in) {
  struct Row {
    long long pos;
    TokenId token;
    Vector g;
  };
  std::vector<long long> order;
  std::map<long long, std::pair<std::vector<Row>, std::vector<Row>>> rows;
  std::string line;
  std::size_t lineno = 0;
  Eigen::Index d = -1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto f = tabular::split_fields(line);
    if (lineno == 1) {
      long long probe = 0;
      auto [p, ec] = std::from_chars(f[0].data(), f[0].data() + f[0].size(), probe);
      if (ec != std::errc{} || p != f[0].data() + f[0].size()) continue;
    }
    if (f.size() < 5) throw tabular::ParseError(lineno, f.size() + 1, "expected sample_id, side, position, token and at least one float");
    const auto id = tabular::parse_int(f[0], lineno, 1);
    if (f[1] != "w" && f[1] != "l") throw tabular::ParseError(lineno, 2, "side must be 'w' or 'l', got '" + f[1] + "'");
    Row r{tabular::parse_int(f[2], lineno, 3), tabular::parse_int(f[3], lineno, 4),
          Vector(static_cast<Eigen::Index>(f.size() - 4))};
    if (d < 0) d = r.g.size();
    if (r.g.size() != d) throw tabular::ParseError(lineno, f.size(), "expected " + std::to_string(d) + " embedding columns");
    for (std::size_t c = 4; c < f.size(); ++c) r.g[static_cast<Eigen::Index>(c - 4)] = tabular::parse_real(f[c], lineno, c + 1);
    if (!rows.count(id)) order.push_back(id);
    auto& slot = rows[id];
    (f[1] == "w" ? slot.first : slot.second).push_back(std::move(r));
  }
  std::vector<MultiTokenSample> batch;
  for (auto id : order) {
    auto& [wr, lr] = rows[id];
    auto by_pos = [](const Row& a, const Row& b) { return a.pos < b.pos; };
    std::sort(wr.begin(), wr.end(), by_pos);
    std::sort(lr.begin(), lr.end(), by_pos);
    if (wr.size() != lr.size())
      throw std::invalid_argument("sample " + std::to_string(id) + ": preferred and rejected lengths differ");
    MultiTokenSample s;
    for (std::size_t j = 0; j < wr.size(); ++j) {
      if (j > 0 && (wr[j].pos == wr[j - 1].pos || lr[j].pos == lr[j - 1].pos))
        throw std::invalid_argument("sample " + std::to_string(id) + ": duplicate position");
      s.context_w.push_back(wr[j].g);
      s.tokens_w.push_back(wr[j].token);
      s.context_l.push_back(lr[j].g);
      s.tokens_l.push_back(lr[j].token);
    }
    batch.push_back(std::move(s));
  }
  if (!batch.empty()) {
    const auto len = batch.front().length();
    for (const auto& s : batch)
      if (s.length() != len) throw std::invalid_argument("read_batch: responses must share one length L across the batch");
  }
  return batch;
}

}  // namespace prefdyn::multitoken
