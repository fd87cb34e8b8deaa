// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "prefdyn/multitoken.hpp"

using namespace prefdyn;
using namespace prefdyn::multitoken;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

// Naive loss with explicit exponentials; fine for the moderate logits used here.
double naive_loss(const SoftmaxModel& m, const std::vector<MultiTokenSample>& batch) {
  auto logp = [&](const Matrix& w, const Vector& g, TokenId y) {
    const Vector z = w * g;
    double s = 0;
    for (Eigen::Index k = 0; k < z.size(); ++k) s += std::exp(z[k]);
    return z[y] - std::log(s);
  };
  double total = 0;
  for (const auto& s : batch) {
    double margin = 0;
    for (std::size_t j = 0; j < s.length(); ++j) {
      margin += logp(m.w, s.context_w[j], s.tokens_w[j]) - logp(m.w0, s.context_w[j], s.tokens_w[j]);
      margin -= logp(m.w, s.context_l[j], s.tokens_l[j]) - logp(m.w0, s.context_l[j], s.tokens_l[j]);
    }
    total += std::log(1 + std::exp(-m.beta * margin));
  }
  return total / static_cast<double>(batch.size());
}

}  // namespace

TEST_CASE("log-softmax stays finite for extreme logits") {
  Vector z(3);
  z << 1000.0, 0.0, -1000.0;
  const Vector ls = log_softmax(z);
  CHECK(ls.allFinite());
  CHECK_THAT(ls[0], WithinAbs(0.0, 1e-15));
  CHECK_THAT(ls[1], WithinAbs(-1000.0, 1e-9));
  CHECK_THAT(softmax(z).sum(), WithinAbs(1.0, 1e-15));
}

TEST_CASE("token reward example: two-token vocabulary") {
  // W g = (2, 0) against a uniform reference: beta (log sigma(2) - log 0.5).
  SoftmaxModel m{Matrix::Zero(2, 1), Matrix::Zero(2, 1), 1.0};
  m.w(0, 0) = 2.0;
  Vector g(1);
  g << 1.0;
  CHECK_THAT(token_reward(m, g, 0), WithinRel(0.566219169516972813, 1e-14));
  m.beta = 0.5;
  CHECK_THAT(token_reward(m, g, 0), WithinRel(0.5 * 0.566219169516972813, 1e-14));
}

TEST_CASE("batch loss matches a naive evaluation") {
  CounterRng rng(3, streams::kMultiToken);
  const auto m = random_model(5, 3, 0.7, rng);
  const auto batch = random_batch(4, 3, 5, 3, rng);
  CHECK_THAT(batch_loss(m, batch), WithinRel(naive_loss(m, batch), 1e-12));
}

TEST_CASE("weight gradient equals minus the finite-difference loss gradient", "[property]") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    CounterRng rng(seed, streams::kMultiToken);
    auto m = random_model(4 + static_cast<Eigen::Index>(seed % 3), 3, 0.5 + 0.01 * static_cast<double>(seed), rng);
    const auto batch = random_batch(1 + seed % 4, 1 + seed % 3, m.vocab(), m.dim(), rng);
    const Matrix g = weight_gradient(m, batch);
    const double h = 1e-5;
    for (Eigen::Index i = 0; i < m.w.rows(); ++i)
      for (Eigen::Index j = 0; j < m.w.cols(); ++j) {
        auto up = m, down = m;
        up.w(i, j) += h;
        down.w(i, j) -= h;
        const double fd = -(naive_loss(up, batch) - naive_loss(down, batch)) / (2 * h);
        CHECK(std::abs(fd - g(i, j)) <= 1e-4 * std::max({std::abs(fd), std::abs(g(i, j)), 1e-6}));
      }
  }
}

TEST_CASE("three-factor breakdown sums to the direct reward rate", "[property]") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    CounterRng rng(seed, 99);
    const auto m = random_model(6, 4, 1.2, rng);
    const auto batch = random_batch(3, 2, 6, 4, rng);
    const Vector probe = batch[seed % 3].context_l[seed % 2];
    const TokenId tok = static_cast<TokenId>(seed % 6);
    const auto b = reward_gradient_breakdown(m, batch, tok, probe);
    // Direct contraction with the FD-checked weight gradient.
    Vector sens = -softmax(m.w * probe);
    sens[tok] += 1;
    const double direct = m.beta * sens.dot(weight_gradient(m, batch) * probe);
    const double scale = std::max(std::abs(direct), std::abs(b.cooccurrence) + std::abs(b.probability) + std::abs(b.distribution_corr));
    CHECK(std::abs(b.total - direct) <= 1e-12 * scale);
    CHECK(b.total == b.cooccurrence - b.probability + b.distribution_corr);
  }
}

TEST_CASE("single-token responses with shared contexts reduce to the linear margin") {
  CounterRng rng(1, 2);
  const auto m = random_model(4, 3, 1.5, rng);
  std::normal_distribution<double> nd;
  for (int t = 0; t < 20; ++t) {
    Vector g(3);
    for (int k = 0; k < 3; ++k) g[k] = nd(rng);
    const MultiTokenSample s{{g}, {g}, {t % 4}, {(t + 1) % 4}};
    const double linear = m.beta * ((m.w - m.w0).row(t % 4) - (m.w - m.w0).row((t + 1) % 4)).dot(g);
    CHECK_THAT(sample_margin(m, s), WithinAbs(linear, 1e-13));
  }
}

TEST_CASE("batch reader groups rows, sorts positions and reports errors") {
  std::istringstream in(
      "sample_id\tside\tposition\ttoken\tg0\tg1\n"
      "7\tw\t1\t2\t0.5\t0.25\n"
      "7\tw\t0\t1\t1\t2\n"
      "7\tl\t0\t0\t3\t4\n"
      "7\tl\t1\t3\t5\t6\n"
      "2\tw\t0\t1\t0\t1\n"
      "2\tl\t0\t2\t1\t0\n"
      "2\tw\t1\t1\t0\t1\n"
      "2\tl\t1\t2\t1\t0\n");
  const auto batch = read_batch(in);
  REQUIRE(batch.size() == 2);
  CHECK(batch[0].tokens_w == std::vector<TokenId>{1, 2});
  CHECK(batch[0].context_w[1][1] == 0.25);
  CHECK(batch[0].tokens_l == std::vector<TokenId>{0, 3});

  std::istringstream bad_side("0\tx\t0\t1\t0.5\n");
  try {
    read_batch(bad_side);
    FAIL("expected a parse error");
  } catch (const tabular::ParseError& e) {
    CHECK(e.row() == 1);
    CHECK(e.column() == 2);
  }
  std::istringstream bad_float("0\tw\t0\t1\tabc\n");
  CHECK_THROWS_AS(read_batch(bad_float), tabular::ParseError);
  std::istringstream uneven("0\tw\t0\t1\t1\n0\tw\t1\t1\t1\n0\tl\t0\t1\t1\n");
  CHECK_THROWS_AS(read_batch(uneven), std::invalid_argument);
}

TEST_CASE("sample validation") {
  MultiTokenSample s{{Vector::Zero(2)}, {Vector::Zero(2)}, {0}, {5}};
  CHECK_THROWS_AS(s.validate(2, 4), std::invalid_argument);
  s.tokens_l = {1};
  CHECK_NOTHROW(s.validate(2, 4));
  CHECK_THROWS_AS(s.validate(3, 4), std::invalid_argument);
}
