// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <ostream>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "prefdyn/prefdist.hpp"
#include "prefdyn/tabular.hpp"

namespace prefdyn {

/// (y_w,a - y_l,a) . (y_w,b - y_l,b) over one-hot token vectors.
inline int preference_sharing(TokenId wa, TokenId la, TokenId wb, TokenId lb) {
  return (wa == wb) - (wa == lb) - (la == wb) + (la == lb);
}

inline int preference_sharing(const PreferenceSample& a, const PreferenceSample& b) {
  return preference_sharing(a.preferred, a.rejected, b.preferred, b.rejected);
}

inline double covariance(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw std::invalid_argument("covariance: dimension mismatch");
  return a.dot(b);
}

/// C[i][j] = preference_sharing(i, j) * g(x_i).g(x_j). Symmetric.
struct InteractionMatrix {
  Matrix values;
  std::size_t n() const { return static_cast<std::size_t>(values.rows()); }
  double operator()(std::size_t i, std::size_t j) const {
    return values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
};

/// Rows hold C(x~_m, x_i) for each held-out sample m.
struct CrossInteraction {
  Matrix values;  // M x N
};

namespace detail {

inline Matrix sharing_matrix(const std::vector<PreferenceSample>& rows, const std::vector<PreferenceSample>& cols) {
  Matrix p(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j)
    for (std::size_t i = 0; i < rows.size(); ++i)
      p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = preference_sharing(rows[i], cols[j]);
  return p;
}

}  // namespace detail

inline InteractionMatrix build_interaction_matrix(const Dataset& data) {
  if (data.samples.empty()) throw std::invalid_argument("build_interaction_matrix: empty dataset");
  const Matrix x = embedding_matrix(data.samples);
  Matrix gram(x.rows(), x.rows());
  gram.setZero();
  gram.selfadjointView<Eigen::Lower>().rankUpdate(x);
  gram.triangularView<Eigen::StrictlyUpper>() = gram.transpose();
  return {detail::sharing_matrix(data.samples, data.samples).cwiseProduct(gram)};
}

inline CrossInteraction build_cross_rows(const std::vector<PreferenceSample>& fresh, const Dataset& data) {
  if (fresh.empty()) return {Matrix(0, static_cast<Eigen::Index>(data.size()))};
  for (const auto& f : fresh)
    if (f.embedding.size() != static_cast<Eigen::Index>(data.spec.d))
      throw std::invalid_argument("build_cross_rows: dimension mismatch");
  const Matrix xf = embedding_matrix(fresh);
  const Matrix xt = embedding_matrix(data.samples);
  Matrix gram = xf * xt.transpose();
  return {detail::sharing_matrix(fresh, data.samples).cwiseProduct(gram)};
}

inline Vector build_cross_row(const PreferenceSample& fresh, const Dataset& data) {
  Vector row(static_cast<Eigen::Index>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i)
    row[static_cast<Eigen::Index>(i)] =
        preference_sharing(fresh, data.samples[i]) * covariance(fresh.embedding, data.samples[i].embedding);
  return row;
}

inline void write_matrix_table(const Matrix& m, std::ostream& out) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) out << '\t';
      out << tabular::format_real(m(i, j));
    }
    out << '\n';
  }
}

}  // namespace prefdyn
