// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <istream>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "prefdyn/prefdist.hpp"
#include "prefdyn/tabular.hpp"

namespace prefdyn::embed {

struct EmbeddingCorpus {
  Matrix vectors;                   // M x d
  std::vector<std::size_t> concept_ids;  // index into concept_names
  std::vector<Sign> signs;
  std::vector<std::string> concept_names;  // first-appearance order

  std::size_t rows() const { return static_cast<std::size_t>(vectors.rows()); }
  std::size_t concepts() const { return concept_names.size(); }

  void validate() const {
    if (concept_ids.size() != rows() || signs.size() != rows())
      throw std::invalid_argument("EmbeddingCorpus: label count does not match row count");
    std::map<std::pair<std::size_t, Sign>, std::size_t> count;
    for (std::size_t i = 0; i < rows(); ++i) {
      if (concept_ids[i] >= concepts()) throw std::invalid_argument("EmbeddingCorpus: concept id out of range");
      ++count[{concept_ids[i], signs[i]}];
    }
    for (std::size_t c = 0; c < concepts(); ++c)
      for (Sign s : {Sign::aligned, Sign::misaligned})
        if (count[{c, s}] < 2)
          throw std::invalid_argument("EmbeddingCorpus: concept '" + concept_names[c] + "' sign '" + sign_char(s) +
                                      "' has fewer than 2 rows");
  }
};

/// Entry (a, b) is the mean cosine similarity over all cross pairs of
/// concept-a rows and concept-b rows, signs pooled; the diagonal skips i == j.
inline Matrix mean_similarity_matrix(const EmbeddingCorpus& corpus) {
  corpus.validate();
  Matrix unit = corpus.vectors;
  for (Eigen::Index i = 0; i < unit.rows(); ++i) {
    const double norm = unit.row(i).norm();
    if (!(norm > 0.0))
      throw std::invalid_argument("mean_similarity_matrix: row " + std::to_string(i) + " (concept '" +
                                  corpus.concept_names[corpus.concept_ids[static_cast<std::size_t>(i)]] +
                                  "') has zero norm; cosine similarity is undefined");
    unit.row(i) /= norm;
  }
  const Matrix cos = unit * unit.transpose();
  const auto k = static_cast<Eigen::Index>(corpus.concepts());
  Matrix sum = Matrix::Zero(k, k);
  Matrix cnt = Matrix::Zero(k, k);
  for (Eigen::Index i = 0; i < cos.rows(); ++i) {
    const auto a = static_cast<Eigen::Index>(corpus.concept_ids[static_cast<std::size_t>(i)]);
    for (Eigen::Index j = 0; j < cos.cols(); ++j) {
      if (i == j) continue;
      const auto b = static_cast<Eigen::Index>(corpus.concept_ids[static_cast<std::size_t>(j)]);
      sum(a, b) += cos(i, j);
      cnt(a, b) += 1.0;
    }
  }
  return sum.cwiseQuotient(cnt);
}

/// Removes the global mean embedding (the estimate of the shared component).
inline EmbeddingCorpus subtract_shared_component(const EmbeddingCorpus& corpus) {
  EmbeddingCorpus out = corpus;
  const Eigen::RowVectorXd mean = corpus.vectors.colwise().mean();
  out.vectors.rowwise() -= mean;
  return out;
}

/// Mean of the off-diagonal entries.
inline double off_diagonal_mean(const Matrix& m) {
  if (m.rows() < 2) return 0.0;
  return (m.sum() - m.trace()) / static_cast<double>(m.rows() * (m.rows() - 1));
}

inline EmbeddingCorpus corpus_from_dataset(const Dataset& data) {
  EmbeddingCorpus c;
  c.vectors = embedding_matrix(data.samples);
  for (std::size_t k = 0; k < data.spec.k; ++k) c.concept_names.push_back("concept_" + std::to_string(k));
  for (const auto& s : data.samples) {
    c.concept_ids.push_back(s.cluster);
    c.signs.push_back(s.sign);
  }
  return c;
}

/// Header row, then concept_label, sign, d floats per row.
inline EmbeddingCorpus read_corpus(std::istream& in) {
  EmbeddingCorpus c;
  std::map<std::string, std::size_t> ids;
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  std::size_t d = 0;
  bool header = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    const auto f = tabular::split_fields(line);
    if (f.size() < 3) throw tabular::ParseError(lineno, f.size() + 1, "expected concept_label, sign and at least one float");
    if (d == 0) d = f.size() - 2;
    if (f.size() - 2 != d)
      throw tabular::ParseError(lineno, f.size(), "expected " + std::to_string(d) + " embedding columns, got " + std::to_string(f.size() - 2));
    Sign s;
    try {
      s = parse_sign(f[1]);
    } catch (const std::invalid_argument& e) {
      throw tabular::ParseError(lineno, 2, e.what());
    }
    auto [it, inserted] = ids.emplace(f[0], c.concept_names.size());
    if (inserted) c.concept_names.push_back(f[0]);
    c.concept_ids.push_back(it->second);
    c.signs.push_back(s);
    std::vector<double> row(d);
    for (std::size_t k = 0; k < d; ++k) row[k] = tabular::parse_real(f[k + 2], lineno, k + 3);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::invalid_argument("read_corpus: no data rows");
  c.vectors.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t k = 0; k < d; ++k) c.vectors(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
  return c;
}

/// Square matrix with concept names as header and row names.
inline void write_similarity_table(const Matrix& m, const std::vector<std::string>& names, std::ostream& out) {
  out << "concept";
  for (const auto& n : names) out << '\t' << n;
  out << '\n';
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    out << names[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < m.cols(); ++j) out << '\t' << tabular::format_real(m(i, j));
    out << '\n';
  }
}

}  // namespace prefdyn::embed
