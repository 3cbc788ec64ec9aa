/// \file mining.hpp
/// Dynamic hard-negative mining. Positives and the Cartesian product of the
/// remaining query/target pairs are scored by cosine, a threshold is swept to
/// maximise F1 of the rule "score >= lambda means positive", and per query
/// the negatives just below the optimal threshold form the hard pool.
/// Negatives at or above the threshold are treated as unlabeled positives
/// and never enter the pool.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "omniembed/core.hpp"
#include "omniembed/error.hpp"
#include "omniembed/parallel.hpp"
#include "omniembed/rng.hpp"

namespace omniembed {

struct ScoredPair {
  double score = 0.0;
  bool positive = false;
  std::uint32_t query = 0;   // index into LabeledScoreSet::query_ids
  std::uint32_t target = 0;  // index into LabeledScoreSet::target_ids
};

struct LabeledScoreSet {
  std::vector<std::string> query_ids;
  std::vector<std::string> target_ids;
  std::vector<ScoredPair> pairs;
  std::size_t negatives_total = 0;    // before any sampling cap
  std::size_t negatives_sampled = 0;  // stored in `pairs`

  std::size_t count(bool positive) const {
    return static_cast<std::size_t>(
        std::count_if(pairs.begin(), pairs.end(), [&](const ScoredPair& p) { return p.positive == positive; }));
  }
};

using PositivePairs = std::vector<std::pair<std::string, std::string>>;

inline constexpr std::size_t kDefaultNegativeCap = 10'000'000;

namespace detail {

inline std::vector<std::string> distinct_in_order(const PositivePairs& pairs, bool query_side) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& [q, t] : pairs) {
    const auto& id = query_side ? q : t;
    if (seen.insert(id).second) out.push_back(id);
  }
  return out;
}

}  // namespace detail

/// Labels every positive 1 and every other (query, target) combination 0,
/// scoring each with cosine. Query rows come from `queries`, target rows from
/// `targets`. When the negative count exceeds `cap`, a uniform reservoir
/// sample of `cap` negatives is kept (seeded, worker-count independent).
inline LabeledScoreSet build_negative_pool(const PositivePairs& positives, const EmbeddingStore& queries,
                                           const EmbeddingStore& targets, std::size_t cap = kDefaultNegativeCap,
                                           std::uint64_t seed = 0, std::size_t workers = 1) {
  if (queries.dim() != targets.dim())
    throw Error(ErrorCode::dimension_mismatch, "build_negative_pool: query/target dims differ");
  LabeledScoreSet set;
  set.query_ids = detail::distinct_in_order(positives, true);
  set.target_ids = detail::distinct_in_order(positives, false);
  std::vector<std::size_t> qrow(set.query_ids.size()), trow(set.target_ids.size());
  for (std::size_t i = 0; i < qrow.size(); ++i) qrow[i] = queries.index_of(set.query_ids[i]);
  for (std::size_t j = 0; j < trow.size(); ++j) trow[j] = targets.index_of(set.target_ids[j]);

  std::unordered_map<std::string, std::uint32_t> qidx, tidx;
  for (std::uint32_t i = 0; i < set.query_ids.size(); ++i) qidx.emplace(set.query_ids[i], i);
  for (std::uint32_t j = 0; j < set.target_ids.size(); ++j) tidx.emplace(set.target_ids[j], j);

  const std::size_t nq = qrow.size(), nt = trow.size();
  std::vector<char> is_positive(nq * nt, 0);
  std::size_t distinct_positives = 0;
  for (const auto& [q, t] : positives) {
    auto& flag = is_positive[qidx.at(q) * nt + tidx.at(t)];
    if (!flag) ++distinct_positives;
    flag = 1;
  }

  for (std::size_t cell = 0; cell < nq * nt; ++cell)
    if (is_positive[cell])
      set.pairs.push_back({0.0, true, static_cast<std::uint32_t>(cell / nt), static_cast<std::uint32_t>(cell % nt)});

  set.negatives_total = nq * nt - distinct_positives;
  std::vector<std::size_t> negative_cells;
  if (set.negatives_total <= cap) {
    negative_cells.reserve(set.negatives_total);
    for (std::size_t cell = 0; cell < nq * nt; ++cell)
      if (!is_positive[cell]) negative_cells.push_back(cell);
  } else {
    Rng rng(seed);
    negative_cells.reserve(cap);
    std::size_t seen = 0;
    for (std::size_t cell = 0; cell < nq * nt; ++cell) {
      if (is_positive[cell]) continue;
      if (seen < cap) {
        negative_cells.push_back(cell);
      } else {
        const auto r = rng.uniform_index(seen + 1);
        if (r < cap) negative_cells[r] = cell;
      }
      ++seen;
    }
    std::sort(negative_cells.begin(), negative_cells.end());
  }
  set.negatives_sampled = negative_cells.size();
  for (auto cell : negative_cells)
    set.pairs.push_back({0.0, false, static_cast<std::uint32_t>(cell / nt), static_cast<std::uint32_t>(cell % nt)});

  parallel_for(set.pairs.size(), workers, [&](std::size_t k) {
    auto& p = set.pairs[k];
    p.score = cosine(queries.row(qrow[p.query]), targets.row(trow[p.target]));
  });
  return set;
}

/// Single-store overload: query and target ids are looked up in one store.
inline LabeledScoreSet build_negative_pool(const PositivePairs& positives, const EmbeddingStore& store,
                                           std::size_t cap = kDefaultNegativeCap, std::uint64_t seed = 0,
                                           std::size_t workers = 1) {
  return build_negative_pool(positives, store, store, cap, seed, workers);
}

// ---------------------------------------------------------------------------

struct ThresholdPoint {
  double lambda = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct ThresholdSweepResult {
  double lambda_star = 0.0;
  double f1_at_star = 0.0;
  std::vector<ThresholdPoint> curve;  // ascending lambda
};

inline constexpr double kSweepEndpointEps = 1e-6;

/// Precision, recall and F1 from confusion counts. Precision is 0 when
/// nothing is predicted positive; F1 is 0 when precision + recall is 0.
inline ThresholdPoint f1_from_counts(double lambda, std::size_t tp, std::size_t fp, std::size_t fn) {
  ThresholdPoint pt{lambda, 0.0, 0.0, 0.0};
  if (tp + fp > 0) pt.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (tp + fn > 0) pt.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (pt.precision + pt.recall > 0.0) pt.f1 = 2.0 * pt.precision * pt.recall / (pt.precision + pt.recall);
  return pt;
}

/// Exact F1-optimal threshold. Candidates are the midpoints between adjacent
/// distinct scores plus one point above the maximum and one below the
/// minimum; ties in F1 resolve to the largest lambda.
inline ThresholdSweepResult sweep_threshold(const LabeledScoreSet& set) {
  std::vector<std::pair<double, bool>> scored;
  scored.reserve(set.pairs.size());
  std::size_t positives = 0;
  for (const auto& p : set.pairs) {
    if (!std::isfinite(p.score)) throw Error(ErrorCode::numeric, "sweep_threshold: non-finite score");
    scored.emplace_back(p.score, p.positive);
    positives += p.positive ? 1 : 0;
  }
  const std::size_t negatives = scored.size() - positives;
  if (positives == 0 || negatives == 0)
    throw Error(ErrorCode::invalid_argument, "sweep_threshold: need at least one positive and one negative");

  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });

  ThresholdSweepResult result;
  // Walk from the highest threshold down; `descending` collects points in
  // decreasing lambda order.
  std::vector<ThresholdPoint> descending;
  descending.push_back(f1_from_counts(scored.front().first + kSweepEndpointEps, 0, 0, positives));
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < scored.size();) {
    const double value = scored[i].first;
    while (i < scored.size() && scored[i].first == value) {
      (scored[i].second ? tp : fp) += 1;
      ++i;
    }
    const double lambda = i < scored.size() ? 0.5 * (value + scored[i].first) : value - kSweepEndpointEps;
    descending.push_back(f1_from_counts(lambda, tp, fp, positives - tp));
  }
  // Strictly-greater comparison while walking downwards keeps the largest
  // lambda among ties.
  const ThresholdPoint* best = &descending.front();
  for (const auto& pt : descending)
    if (pt.f1 > best->f1) best = &pt;
  result.lambda_star = best->lambda;
  result.f1_at_star = best->f1;
  result.curve.assign(descending.rbegin(), descending.rend());
  return result;
}

// ---------------------------------------------------------------------------

struct HardNegative {
  std::string target;
  double score = 0.0;
};

struct HardNegativePool {
  double lambda_star = 0.0;
  std::size_t m = 0;
  std::map<std::string, std::vector<HardNegative>> per_query;  // every query of the set, possibly empty

  const std::vector<HardNegative>& of(const std::string& query) const {
    static const std::vector<HardNegative> none;
    auto it = per_query.find(query);
    return it == per_query.end() ? none : it->second;
  }
};

inline constexpr std::size_t kDefaultHardNegativesPerQuery = 8;

/// For each query keeps the `m` highest-scoring negatives strictly below
/// lambda_star, sorted descending (ties by target id).
inline HardNegativePool select_hard_negatives(const LabeledScoreSet& set, double lambda_star,
                                              std::size_t m = kDefaultHardNegativesPerQuery) {
  if (m == 0) throw Error(ErrorCode::invalid_argument, "select_hard_negatives: m must be >= 1");
  HardNegativePool pool;
  pool.lambda_star = lambda_star;
  pool.m = m;
  std::vector<std::vector<const ScoredPair*>> buckets(set.query_ids.size());
  for (const auto& p : set.pairs)
    if (!p.positive && p.score < lambda_star) buckets[p.query].push_back(&p);
  for (std::size_t q = 0; q < buckets.size(); ++q) {
    auto& b = buckets[q];
    std::sort(b.begin(), b.end(), [&](const ScoredPair* x, const ScoredPair* y) {
      if (x->score != y->score) return x->score > y->score;
      return set.target_ids[x->target] < set.target_ids[y->target];
    });
    auto& out = pool.per_query[set.query_ids[q]];
    for (std::size_t k = 0; k < std::min(m, b.size()); ++k) out.push_back({set.target_ids[b[k]->target], b[k]->score});
  }
  return pool;
}

struct MiningResult {
  ThresholdSweepResult sweep;
  HardNegativePool pool;
  std::size_t positives = 0;
  std::size_t negatives_total = 0;
  std::size_t negatives_sampled = 0;
};

/// Whole mining stage for one dataset: pool, sweep, selection.
inline MiningResult mine_hard_negatives(const PositivePairs& positives, const EmbeddingStore& queries,
                                        const EmbeddingStore& targets, std::size_t m = kDefaultHardNegativesPerQuery,
                                        std::size_t cap = kDefaultNegativeCap, std::uint64_t seed = 0,
                                        std::size_t workers = 1) {
  MiningResult r;
  const auto set = build_negative_pool(positives, queries, targets, cap, seed, workers);
  r.sweep = sweep_threshold(set);
  r.pool = select_hard_negatives(set, r.sweep.lambda_star, m);
  r.positives = set.count(true);
  r.negatives_total = set.negatives_total;
  r.negatives_sampled = set.negatives_sampled;
  return r;
}

}  // namespace omniembed
