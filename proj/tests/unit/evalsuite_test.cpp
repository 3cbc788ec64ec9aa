#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "../oracles.hpp"
#include "omniembed/evalsuite.hpp"
#include "support.hpp"

using namespace omniembed;
using omniembed::testing::random_store;
using omniembed::testing::store_of;

namespace {

std::vector<std::vector<double>> basis(std::size_t n) {
  std::vector<std::vector<double>> rows(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) rows[i][i] = 1.0;
  return rows;
}

std::map<std::string, std::string> identity_gold(std::size_t n, const std::string& q = "q", const std::string& t = "t") {
  std::map<std::string, std::string> g;
  for (std::size_t i = 0; i < n; ++i) g[q + std::to_string(i)] = t + std::to_string(i);
  return g;
}

// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
std::vector<std::vector<double>> random_rotation(Rng& rng, std::size_t d) {
  std::vector<std::vector<double>> q;
  while (q.size() < d) {
    std::vector<double> v(d);
    for (auto& x : v) x = rng.normal();
    for (const auto& u : q) {
      const double p = std::inner_product(v.begin(), v.end(), u.begin(), 0.0);
      for (std::size_t k = 0; k < d; ++k) v[k] -= p * u[k];
    }
    const double n = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (n < 1e-6) continue;
    for (auto& x : v) x /= n;
    q.push_back(v);
  }
  return q;
}

EmbeddingStore rotate(const EmbeddingStore& s, const std::vector<std::vector<double>>& r) {
  EmbeddingStore out(s.dim());
  std::vector<double> row(s.dim());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto x = s.row(i);
    for (std::size_t a = 0; a < s.dim(); ++a) row[a] = std::inner_product(r[a].begin(), r[a].end(), x.begin(), 0.0);
    out.add(s.id(i), row);
  }
  return out;
}

// Targets t_i = base_i; queries q_i = base_i + noise.
std::pair<EmbeddingStore, EmbeddingStore> noisy_pairs(Rng& rng, std::size_t n, std::size_t dim, double noise) {
  EmbeddingStore q(dim), t(dim);
  std::vector<double> base(dim), row(dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& x : base) x = rng.normal();
    for (std::size_t k = 0; k < dim; ++k) row[k] = base[k] + rng.normal(0, noise);
    t.add("t" + std::to_string(i), base);
    q.add("q" + std::to_string(i), row);
  }
  return {q, t};
}

}  // namespace

TEST(Recall, OrthogonalIdentityIsPerfect) {
  const auto q = store_of(basis(5), "q"), t = store_of(basis(5), "t");
  const auto r = recall_at_k(q, t, identity_gold(5), std::vector<std::size_t>{1});
  EXPECT_EQ(r.recall.at(1), 1.0);
  EXPECT_TRUE(r.missing_gold.empty());
}

TEST(Recall, MissingGoldCountsAsMissEverywhere) {
  const auto q = store_of(basis(3), "q"), t = store_of(basis(3), "t");
  auto gold = identity_gold(3);
  gold["q0"] = "gone";
  const auto r = recall_at_k(q, t, gold, std::vector<std::size_t>{1, 2, 3});
  ASSERT_EQ(r.missing_gold, std::vector<std::string>{"gone"});
  for (const auto& [k, v] : r.recall) EXPECT_LE(v, 2.0 / 3.0);
  EXPECT_NEAR(r.recall.at(3), 2.0 / 3.0, 1e-15);
}

TEST(Recall, LargeKIsClampedWithWarning) {
  const auto q = store_of(basis(3), "q"), t = store_of(basis(3), "t");
  const auto r = recall_at_k(q, t, identity_gold(3), std::vector<std::size_t>{100});
  EXPECT_EQ(r.recall.at(100), 1.0);
  EXPECT_EQ(r.warnings.size(), 1u);
  EXPECT_THROW(recall_at_k(q, t, identity_gold(3), std::vector<std::size_t>{0}), Error);
}

TEST(Recall, MatchesFullSortOracle) {
  Rng rng(80);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t dim = 2 + rng.uniform_index(6);
    // coarse values so exact score ties occur and exercise the id tie-break
    EmbeddingStore q(dim), t(dim);
    std::vector<double> row(dim);
    for (std::size_t i = 0; i < 20; ++i) {
      for (auto& x : row) x = static_cast<double>(static_cast<int>(rng.uniform_index(5)) - 2);
      q.add("q" + std::to_string(i), row);
      for (auto& x : row) x = static_cast<double>(static_cast<int>(rng.uniform_index(5)) - 2);
      t.add("t" + std::to_string(i), row);
    }
    const auto gold = identity_gold(20);
    const std::vector<std::size_t> ks = {1, 3, 10, 20};
    const auto r = recall_at_k(q, t, gold, ks, 1 + trial % 3);
    for (auto k : ks) EXPECT_EQ(r.recall.at(k), oracle::recall(q, t, gold, k)) << "trial " << trial << " k " << k;
  }
}

TEST(Recall, MonotoneInK) {
  Rng rng(81);
  for (int trial = 0; trial < 50; ++trial) {
    const auto [q, t] = noisy_pairs(rng, 30, 8, rng.uniform(0.1, 3.0));
    const std::vector<std::size_t> ks = {1, 2, 5, 10, 25, 30};
    const auto r = recall_at_k(q, t, identity_gold(30), ks);
    for (std::size_t i = 1; i < ks.size(); ++i) EXPECT_LE(r.recall.at(ks[i - 1]), r.recall.at(ks[i]));
  }
}

TEST(Retrieval, InvariantUnderCommonRotation) {
  Rng rng(82);
  for (int trial = 0; trial < 10; ++trial) {
    const auto [q, t] = noisy_pairs(rng, 40, 6, 1.0);
    const auto rot = random_rotation(rng, 6);
    const auto rq = rotate(q, rot), rt = rotate(t, rot);
    const auto gold = identity_gold(40);
    const std::vector<std::size_t> ks = {1, 5, 10};
    const auto a = recall_at_k(q, t, gold, ks), b = recall_at_k(rq, rt, gold, ks);
    for (auto k : ks) EXPECT_EQ(a.recall.at(k), b.recall.at(k));
    EXPECT_EQ(bijective_alignment(q, t, gold), bijective_alignment(rq, rt, gold));
  }
}

TEST(Separability, Examples) {
  const std::vector<double> ones(5, 1.0), minus(7, -1.0);
  const auto s = separability(ones, minus);
  EXPECT_EQ(s.gap, 2.0);
  EXPECT_EQ(s.overlap, 0.0);
  EXPECT_EQ(s.pos_hist[kHistogramBins - 1], 5u);
  EXPECT_EQ(s.neg_hist[0], 7u);

  const std::vector<double> same = {0.1, 0.5, -0.3};
  EXPECT_EQ(separability(same, same).gap, 0.0);

  const std::vector<double> pos = {0.9, 0.7}, neg = {0.8, 0.1};
  EXPECT_NEAR(separability(pos, neg).gap, 0.35, 1e-15);
  EXPECT_THROW(separability(pos, std::vector<double>{}), Error);
}

TEST(Separability, HistogramsCountEverything) {
  Rng rng(83);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> pos(1 + rng.uniform_index(40)), neg(1 + rng.uniform_index(40));
    for (auto& x : pos) x = rng.uniform(-1, 1);
    for (auto& x : neg) x = rng.uniform(-1, 1);
    const auto s = separability(pos, neg);
    EXPECT_EQ(std::accumulate(s.pos_hist.begin(), s.pos_hist.end(), std::size_t{0}), pos.size());
    EXPECT_EQ(std::accumulate(s.neg_hist.begin(), s.neg_hist.end(), std::size_t{0}), neg.size());
    EXPECT_GE(s.overlap, 0.0);
    EXPECT_LE(s.overlap, 1.0);
  }
}

TEST(Nmi, Examples) {
  using L = std::vector<int>;
  EXPECT_NEAR(nmi(L{0, 0, 1, 1}, L{0, 0, 1, 1}).value, 1.0, 1e-12);
  EXPECT_NEAR(nmi(L{0, 0, 1, 1}, L{1, 1, 0, 0}).value, 1.0, 1e-12);
  EXPECT_NEAR(nmi(L{0, 0, 1, 1}, L{0, 1, 0, 1}).value, 0.0, 1e-12);
  const auto single = nmi(L{3, 3, 3}, L{7, 7, 7});
  EXPECT_EQ(single.value, 1.0);
  EXPECT_TRUE(single.degenerate);
  EXPECT_THROW(nmi(L{0, 1}, L{0}), Error);
}

TEST(Nmi, SymmetricAndRelabelInvariant) {
  Rng rng(84);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.uniform_index(60);
    const std::size_t ka = 1 + rng.uniform_index(5), kb = 1 + rng.uniform_index(5);
    std::vector<int> a(n), b(n);
    for (auto& x : a) x = static_cast<int>(rng.uniform_index(ka));
    for (auto& x : b) x = static_cast<int>(rng.uniform_index(kb));
    const double v = nmi(a, b).value;
    EXPECT_NEAR(v, nmi(b, a).value, 1e-12);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    std::vector<int> relabeled(n);
    for (std::size_t i = 0; i < n; ++i) relabeled[i] = 100 - 7 * a[i];
    EXPECT_NEAR(v, nmi(relabeled, b).value, 1e-12);
  }
}

TEST(RankingConsistency, Examples) {
  using R = std::vector<int>;
  const auto same = ranking_consistency(R{1, 2, 3, 4}, R{1, 2, 3, 4}, 2);
  EXPECT_EQ(same.kendall_tau, 1.0);
  EXPECT_EQ(same.topk_overlap, 1.0);
  EXPECT_EQ(ranking_consistency(R{1, 2, 3, 4}, R{4, 3, 2, 1}, 2).kendall_tau, -1.0);
  const auto r = ranking_consistency(R{1, 2, 3}, R{1, 3, 2}, 1);
  EXPECT_EQ(r.concordant, 2u);
  EXPECT_EQ(r.discordant, 1u);
  EXPECT_NEAR(r.kendall_tau, 1.0 / 3.0, 1e-15);
  EXPECT_THROW(ranking_consistency(R{1, 1, 2}, R{1, 2, 3}, 1), Error);
  EXPECT_THROW(ranking_consistency(R{1, 2, 3}, R{1, 2, 4}, 1), Error);
}

TEST(RankingConsistency, ReverseIsAntisymmetricAndTauMatchesPairCount) {
  Rng rng(85);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.uniform_index(30);
    std::vector<int> a(n), b;
    std::iota(a.begin(), a.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(a[i - 1], a[rng.uniform_index(i)]);
    b = a;
    for (std::size_t i = n; i > 1; --i) std::swap(b[i - 1], b[rng.uniform_index(i)]);
    std::vector<int> rev(a.rbegin(), a.rend());
    EXPECT_EQ(ranking_consistency(a, rev, 1).kendall_tau, -1.0);
    EXPECT_EQ(ranking_consistency(a, a, n).kendall_tau, 1.0);
    // pair count oracle
    double c = 0, d = 0;
    std::vector<std::size_t> pos_b(n);
    for (std::size_t i = 0; i < n; ++i) pos_b[static_cast<std::size_t>(b[i])] = i;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) (pos_b[a[i]] < pos_b[a[j]] ? c : d) += 1;
    EXPECT_NEAR(ranking_consistency(a, b, 1).kendall_tau, (c - d) / (c + d), 1e-15);
  }
}

TEST(Bijective, Examples) {
  const auto q = store_of(basis(4), "q"), t = store_of(basis(4), "t");
  EXPECT_EQ(bijective_alignment(q, t, identity_gold(4)), 1.0);

  // identical embeddings: every lookup resolves to the smallest id
  const std::vector<std::vector<double>> flat(4, std::vector<double>{1.0, 1.0});
  const auto fq = store_of(flat, "q"), ft = store_of(flat, "t");
  const auto gold = identity_gold(4);
  EXPECT_EQ(bijective_alignment(fq, ft, gold), 0.25);
  EXPECT_EQ(bijective_alignment(fq, ft, gold), oracle::bijective(fq, ft, gold));

  EXPECT_THROW(bijective_alignment(q, store_of(basis(3), "t"), identity_gold(4)), Error);
}

TEST(Bijective, MatchesRoundTripOracle) {
  Rng rng(86);
  for (double noise : {0.05, 0.5, 1.0, 2.0}) {
    const auto [q, t] = noisy_pairs(rng, 100, 32, noise);
    const auto gold = identity_gold(100);
    EXPECT_EQ(bijective_alignment(q, t, gold, 2), oracle::bijective(q, t, gold)) << "noise " << noise;
  }
}

TEST(Auc, Examples) {
  EXPECT_EQ(auc(std::vector<double>{0.9, 0.8, 0.7, 0.1}, std::vector<int>{1, 1, 0, 0}), 1.0);
  EXPECT_EQ(auc(std::vector<double>{0.9, 0.4, 0.7, 0.1}, std::vector<int>{1, 1, 0, 0}), 0.75);
  EXPECT_EQ(auc(std::vector<double>{0.3, 0.3, 0.3}, std::vector<int>{1, 0, 1}), 0.5);
  EXPECT_THROW(auc(std::vector<double>{0.3, 0.4}, std::vector<int>{1, 1}), Error);
}

TEST(Auc, MatchesPairCountAndIsRankInvariant) {
  Rng rng(87);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.uniform_index(60);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = std::round(rng.uniform(-1, 1) * 10) / 10;
      y[i] = i == 0 ? 1 : (i == 1 ? 0 : static_cast<int>(rng.bernoulli(0.5)));
    }
    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (y[i] == 1 && y[j] == 0) {
          pairs += 1;
          wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        }
    const double a = auc(s, y);
    EXPECT_NEAR(a, wins / pairs, 1e-12);
    std::vector<double> transformed(n);
    for (std::size_t i = 0; i < n; ++i) transformed[i] = std::exp(3 * s[i]) - 5;
    EXPECT_NEAR(auc(transformed, y), a, 1e-12);
  }
}
