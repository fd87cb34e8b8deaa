// SPDX-License-Identifier: Apache-2.0
//
// Synthetic preference distribution: K pairs of Gaussian concept clusters
// N(l_b e_1 +/- e_{1+i}, v^2 I_d), each pair carrying a fixed (preferred,
// rejected) token pair that is swapped between the aligned and misaligned
// cluster.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "prefdyn/rng.hpp"
#include "prefdyn/tabular.hpp"

namespace prefdyn {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using TokenId = std::int64_t;

struct TokenPair {
  TokenId preferred = 0;
  TokenId rejected = 1;
  bool operator==(const TokenPair&) const = default;
  auto operator<=>(const TokenPair&) const = default;
};

enum class Sign { aligned, misaligned };

inline int sign_value(Sign s) { return s == Sign::aligned ? 1 : -1; }
inline char sign_char(Sign s) { return s == Sign::aligned ? '+' : '-'; }

inline Sign parse_sign(const std::string& s) {
  if (s == "+" || s == "aligned" || s == "1" || s == "+1") return Sign::aligned;
  if (s == "-" || s == "misaligned" || s == "-1") return Sign::misaligned;
  throw std::invalid_argument("unrecognized sign '" + s + "'");
}

using TokenAssignment = std::vector<TokenPair>;

/// Max occurrences of any token across all response pairs.
inline std::size_t derived_z(const TokenAssignment& assignment) {
  std::map<TokenId, std::size_t> count;
  std::size_t z = 0;
  for (const auto& p : assignment) {
    z = std::max(z, ++count[p.preferred]);
    z = std::max(z, ++count[p.rejected]);
  }
  return z;
}

/// Deterministic assignment with Z = min(z_target, K). Clusters are grouped
/// into stars of size min(z_target, K) around a hub token; z_target = 1 gives
/// disjoint pairs (0,1), (2,3), ...
inline TokenAssignment default_token_assignment(std::size_t k, std::size_t z_target) {
  if (k == 0 || z_target == 0) throw std::invalid_argument("default_token_assignment: K and Z_target must be >= 1");
  TokenAssignment out;
  out.reserve(k);
  const std::size_t group = std::min(z_target, k);
  TokenId next = 0;
  for (std::size_t start = 0; start < k; start += group) {
    const std::size_t members = std::min(group, k - start);
    const TokenId first = next++;
    const TokenId hub = next++;
    out.push_back({first, hub});
    for (std::size_t m = 1; m < members; ++m) out.push_back({hub, next++});
  }
  return out;
}

inline std::size_t vocab_size_for(const TokenAssignment& assignment) {
  TokenId hi = -1;
  for (const auto& p : assignment) hi = std::max({hi, p.preferred, p.rejected});
  return static_cast<std::size_t>(hi + 1);
}

struct DistributionSpec {
  std::size_t k = 1;
  std::size_t q = 100;
  std::size_t d = 500;
  double v = 0.025;
  double l_b = 0.5;
  TokenAssignment token_assignment = default_token_assignment(1, 1);
  std::size_t vocab_size = 2;

  static DistributionSpec make(std::size_t k, std::size_t q, std::size_t d, double v, double l_b,
                               std::size_t z_target = 1) {
    DistributionSpec s;
    s.k = k;
    s.q = q;
    s.d = d;
    s.v = v;
    s.l_b = l_b;
    s.token_assignment = default_token_assignment(k, z_target);
    s.vocab_size = vocab_size_for(s.token_assignment);
    return s;
  }

  std::size_t n() const { return 2 * k * q; }
  std::size_t z() const { return derived_z(token_assignment); }

  /// Pair carried by a sample of cluster `c` with the given sign.
  TokenPair tokens(std::size_t c, Sign s) const {
    const auto& p = token_assignment.at(c);
    return s == Sign::aligned ? p : TokenPair{p.rejected, p.preferred};
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("DistributionSpec: " + m); };
    if (k < 1) fail("K must be >= 1");
    if (q < 1) fail("Q must be >= 1");
    if (d < k + 1) fail("d must be >= K + 1 (got d=" + std::to_string(d) + ", K=" + std::to_string(k) + ")");
    if (!(v > 0.0) || !std::isfinite(v)) fail("v must be a positive finite real");
    if (!(l_b >= 0.0 && l_b <= 1.0)) fail("l_b must lie in [0, 1]");
    if (token_assignment.size() != k) fail("token_assignment must have exactly K entries");
    std::set<TokenPair> seen;
    for (const auto& p : token_assignment) {
      if (p.preferred == p.rejected) fail("preferred and rejected tokens must differ");
      if (p.preferred < 0 || p.rejected < 0) fail("token ids must be nonnegative");
      if (static_cast<std::size_t>(std::max(p.preferred, p.rejected)) >= vocab_size)
        fail("token id exceeds vocab_size");
      if (!seen.insert(p).second) fail("two cluster pairs share an identical (preferred, rejected) pair");
    }
  }
};

struct PreferenceSample {
  Vector embedding;
  TokenId preferred = 0;
  TokenId rejected = 1;
  std::size_t cluster = 0;
  Sign sign = Sign::aligned;
};

struct Dataset {
  DistributionSpec spec;
  std::vector<PreferenceSample> samples;
  std::uint64_t seed = 0;

  std::size_t size() const { return samples.size(); }
};

namespace detail {

inline PreferenceSample draw_sample(const DistributionSpec& spec, std::size_t cluster, Sign sign,
                                    CounterRng& rng) {
  std::normal_distribution<double> noise(0.0, spec.v);
  PreferenceSample s;
  s.embedding.resize(static_cast<Eigen::Index>(spec.d));
  for (Eigen::Index m = 0; m < s.embedding.size(); ++m) s.embedding[m] = noise(rng);
  s.embedding[0] += spec.l_b;
  s.embedding[static_cast<Eigen::Index>(1 + cluster)] += sign_value(sign);
  const auto tp = spec.tokens(cluster, sign);
  s.preferred = tp.preferred;
  s.rejected = tp.rejected;
  s.cluster = cluster;
  s.sign = sign;
  return s;
}

}  // namespace detail

/// Q aligned then Q misaligned samples per cluster, clusters in order.
inline Dataset sample_dataset(const DistributionSpec& spec, std::uint64_t seed) {
  spec.validate();
  Dataset out{spec, {}, seed};
  out.samples.reserve(spec.n());
  CounterRng rng(seed, streams::kTraining);
  for (std::size_t c = 0; c < spec.k; ++c)
    for (Sign s : {Sign::aligned, Sign::misaligned})
      for (std::size_t j = 0; j < spec.q; ++j) out.samples.push_back(detail::draw_sample(spec, c, s, rng));
  return out;
}

/// Held-out draws from the equal-weight mixture over the 2K clusters.
inline std::vector<PreferenceSample> sample_fresh(const DistributionSpec& spec, std::size_t m, std::uint64_t seed) {
  if (m == 0) throw std::invalid_argument("sample_fresh: m must be >= 1");
  spec.validate();
  CounterRng rng(seed, streams::kFresh);
  std::uniform_int_distribution<std::size_t> pick(0, 2 * spec.k - 1);
  std::vector<PreferenceSample> out;
  out.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t slot = pick(rng);
    out.push_back(detail::draw_sample(spec, slot / 2, slot % 2 == 0 ? Sign::aligned : Sign::misaligned, rng));
  }
  return out;
}

/// Rows are g(x_i).
inline Matrix embedding_matrix(const std::vector<PreferenceSample>& samples) {
  if (samples.empty()) return Matrix(0, 0);
  Matrix x(static_cast<Eigen::Index>(samples.size()), samples.front().embedding.size());
  for (std::size_t i = 0; i < samples.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = samples[i].embedding.transpose();
  return x;
}

// --- serialization --------------------------------------------------------

inline nlohmann::json to_json(const DistributionSpec& s) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : s.token_assignment) pairs.push_back({p.preferred, p.rejected});
  return {{"K", s.k},   {"Q", s.q},         {"d", s.d},         {"v", s.v},
          {"l_b", s.l_b}, {"Z", s.z()},     {"N", s.n()},       {"vocab_size", s.vocab_size},
          {"token_assignment", pairs}};
}

inline void write_dataset_table(const Dataset& data, std::ostream& out) {
  out << "sample_id\tcluster\tsign\tpreferred_token\trejected_token";
  for (std::size_t m = 0; m < data.spec.d; ++m) out << "\tg" << m;
  out << '\n';
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& s = data.samples[i];
    out << i << '\t' << s.cluster << '\t' << sign_char(s.sign) << '\t' << s.preferred << '\t' << s.rejected;
    for (Eigen::Index m = 0; m < s.embedding.size(); ++m) out << '\t' << tabular::format_real(s.embedding[m]);
    out << '\n';
  }
}

/// Writes the table to `table_path` and the spec + seed sidecar to `meta_path`.
inline void write_dataset(const Dataset& data, const std::string& table_path, const std::string& meta_path) {
  auto table = tabular::open_for_write(table_path);
  write_dataset_table(data, table);
  auto meta = tabular::open_for_write(meta_path);
  meta << nlohmann::json{{"spec", to_json(data.spec)}, {"seed", data.seed}, {"n_samples", data.samples.size()}}.dump(2)
       << '\n';
}

/// Embedding-corpus view of a dataset: concept label, sign, then d floats.
inline void write_embedding_corpus(const Dataset& data, std::ostream& out) {
  out << "concept_label\tsign";
  for (std::size_t m = 0; m < data.spec.d; ++m) out << "\tg" << m;
  out << '\n';
  for (const auto& s : data.samples) {
    out << "concept_" << s.cluster << '\t' << sign_char(s.sign);
    for (Eigen::Index m = 0; m < s.embedding.size(); ++m) out << '\t' << tabular::format_real(s.embedding[m]);
    out << '\n';
  }
}

}  // namespace prefdyn
