/// \file evalsuite.hpp
/// Offline evaluation: exact cosine retrieval with Recall@k, positive /
/// negative separability, clustering agreement (NMI), ranking consistency
/// (Kendall tau, top-k overlap), bijective round-trip alignment and AUC.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "omniembed/core.hpp"
#include "omniembed/error.hpp"
#include "omniembed/parallel.hpp"

namespace omniembed {

struct Hit {
  std::size_t index = 0;
  double score = 0.0;
};

/// Brute-force cosine search. Ties are broken by ascending id so results
/// are platform independent.
class RetrievalIndex {
 public:
  explicit RetrievalIndex(const EmbeddingStore& targets) : targets_(&targets), norms_(targets.size()) {
    for (std::size_t i = 0; i < targets.size(); ++i) norms_[i] = norm(targets.row(i));
  }

  const EmbeddingStore& targets() const noexcept { return *targets_; }

  std::vector<Hit> search(std::span<const double> query, std::size_t k) const {
    if (query.size() != targets_->dim())
      throw Error(ErrorCode::dimension_mismatch, "search: query dim " + std::to_string(query.size()) +
                                                     " != index dim " + std::to_string(targets_->dim()));
    k = std::min(k, targets_->size());
    const double qn = norm(query);
    std::vector<Hit> all(targets_->size());
    for (std::size_t i = 0; i < all.size(); ++i) {
      const double denom = qn * norms_[i];
      const double s = denom == 0.0 ? 0.0 : std::clamp(dot(query, targets_->row(i)) / denom, -1.0, 1.0);
      all[i] = {i, s};
    }
    auto before = [this](const Hit& a, const Hit& b) {
      if (a.score != b.score) return a.score > b.score;
      return targets_->id(a.index) < targets_->id(b.index);
    };
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), before);
    all.resize(k);
    return all;
  }

 private:
  const EmbeddingStore* targets_;
  std::vector<double> norms_;
};

inline const std::vector<std::size_t> kDefaultRecallKs = {1, 10, 25, 50, 100};

struct RecallResult {
  std::map<std::size_t, double> recall;   // keyed by the requested k
  std::vector<std::string> missing_gold;  // gold targets absent from the store
  std::vector<std::string> warnings;
  std::size_t queries = 0;
};

/// Fraction of gold queries whose gold target is in their top-k. A gold
/// target missing from the store counts as a miss at every k and is
/// reported; k above the store size is clamped with a warning.
inline RecallResult recall_at_k(const EmbeddingStore& queries, const EmbeddingStore& targets,
                                const std::map<std::string, std::string>& gold,
                                std::span<const std::size_t> ks = kDefaultRecallKs, std::size_t workers = 1) {
  if (ks.empty()) throw Error(ErrorCode::invalid_argument, "recall_at_k: no k given");
  if (gold.empty()) throw Error(ErrorCode::invalid_argument, "recall_at_k: empty gold mapping");
  RecallResult result;
  std::size_t kmax = 0;
  for (auto k : ks) {
    if (k == 0) throw Error(ErrorCode::invalid_argument, "recall_at_k: k must be >= 1");
    if (k > targets.size())
      result.warnings.push_back("k=" + std::to_string(k) + " clamped to " + std::to_string(targets.size()));
    kmax = std::max(kmax, std::min(k, targets.size()));
  }
  std::vector<std::pair<std::size_t, std::optional<std::size_t>>> jobs;  // query row, gold target row
  for (const auto& [q, t] : gold) {
    const auto qi = queries.index_of(q);
    if (!targets.contains(t)) {
      result.missing_gold.push_back(t);
      jobs.emplace_back(qi, std::nullopt);
    } else {
      jobs.emplace_back(qi, targets.index_of(t));
    }
  }
  RetrievalIndex index(targets);
  // Rank of the gold target within the top kmax, or kmax when absent.
  std::vector<std::size_t> rank(jobs.size(), kmax);
  parallel_for(jobs.size(), workers, [&](std::size_t j) {
    if (!jobs[j].second) return;
    const auto hits = index.search(queries.row(jobs[j].first), kmax);
    for (std::size_t r = 0; r < hits.size(); ++r)
      if (hits[r].index == *jobs[j].second) {
        rank[j] = r;
        break;
      }
  });
  result.queries = jobs.size();
  for (auto k : ks) {
    const auto kc = std::min(k, targets.size());
    const auto hits = std::count_if(rank.begin(), rank.end(), [&](std::size_t r) { return r < kc; });
    result.recall[k] = static_cast<double>(hits) / static_cast<double>(jobs.size());
  }
  return result;
}

// ---------------------------------------------------------------------------

inline constexpr std::size_t kHistogramBins = 64;

struct SeparabilityStats {
  double pos_mean = 0.0;
  double neg_mean = 0.0;
  double gap = 0.0;
  double overlap = 0.0;  // fraction of negatives >= 5th percentile of positives
  double pos_p5 = 0.0;
  std::array<std::size_t, kHistogramBins> pos_hist{};
  std::array<std::size_t, kHistogramBins> neg_hist{};
};

/// Linear-interpolation percentile (q in [0, 1]) of unsorted values.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw Error(ErrorCode::invalid_argument, "percentile: empty input");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

/// Bin of a similarity on the fixed [-1, 1] grid; out-of-range values land
/// in the edge bins.
inline std::size_t histogram_bin(double s) {
  const double t = (std::clamp(s, -1.0, 1.0) + 1.0) / 2.0 * static_cast<double>(kHistogramBins);
  return std::min(static_cast<std::size_t>(t), kHistogramBins - 1);
}

inline SeparabilityStats separability(std::span<const double> pos, std::span<const double> neg) {
  if (pos.empty() || neg.empty()) throw Error(ErrorCode::invalid_argument, "separability: empty similarity list");
  SeparabilityStats s;
  s.pos_mean = std::accumulate(pos.begin(), pos.end(), 0.0) / static_cast<double>(pos.size());
  s.neg_mean = std::accumulate(neg.begin(), neg.end(), 0.0) / static_cast<double>(neg.size());
  s.gap = s.pos_mean - s.neg_mean;
  s.pos_p5 = percentile({pos.begin(), pos.end()}, 0.05);
  s.overlap = static_cast<double>(std::count_if(neg.begin(), neg.end(), [&](double x) { return x >= s.pos_p5; })) /
              static_cast<double>(neg.size());
  for (double x : pos) ++s.pos_hist[histogram_bin(x)];
  for (double x : neg) ++s.neg_hist[histogram_bin(x)];
  return s;
}

// ---------------------------------------------------------------------------

struct NmiResult {
  double value = 0.0;
  bool degenerate = false;  // both labelings are a single cluster
};

/// 2 I(A;B) / (H(A) + H(B)) with natural logarithms.
template <class Label>
NmiResult nmi(std::span<const Label> a, std::span<const Label> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::dimension_mismatch, "nmi: labelings differ in length");
  if (a.empty()) throw Error(ErrorCode::invalid_argument, "nmi: empty labeling");
  const double n = static_cast<double>(a.size());
  std::map<Label, double> ca, cb;
  std::map<std::pair<Label, Label>, double> joint;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ca[a[i]] += 1.0;
    cb[b[i]] += 1.0;
    joint[{a[i], b[i]}] += 1.0;
  }
  auto entropy = [n](const auto& counts) {
    double h = 0.0;
    for (const auto& [_, c] : counts) h -= c / n * std::log(c / n);
    return h;
  };
  const double ha = entropy(ca), hb = entropy(cb);
  if (ca.size() == 1 && cb.size() == 1) return {1.0, true};
  double mi = 0.0;
  for (const auto& [key, c] : joint) mi += c / n * std::log(c * n / (ca[key.first] * cb[key.second]));
  if (ha + hb == 0.0) return {1.0, true};
  return {std::clamp(2.0 * mi / (ha + hb), 0.0, 1.0), false};
}

template <class Label>
NmiResult nmi(const std::vector<Label>& a, const std::vector<Label>& b) {
  return nmi(std::span<const Label>(a), std::span<const Label>(b));
}

// ---------------------------------------------------------------------------

struct RankingConsistency {
  double kendall_tau = 0.0;
  double topk_overlap = 0.0;
  std::size_t concordant = 0;
  std::size_t discordant = 0;
};

/// Kendall tau = (C - D) / (C + D) over all element pairs of two rankings
/// of the same elements, plus |top_k(a) & top_k(b)| / k.
template <class T>
RankingConsistency ranking_consistency(std::span<const T> a, std::span<const T> b, std::size_t k) {
  if (a.size() != b.size()) throw Error(ErrorCode::invalid_argument, "ranking_consistency: rankings differ in length");
  if (a.size() < 2) throw Error(ErrorCode::invalid_argument, "ranking_consistency: need at least two elements");
  if (k == 0 || k > a.size()) throw Error(ErrorCode::invalid_argument, "ranking_consistency: k out of range");
  std::map<T, std::size_t> pos_b;
  for (std::size_t i = 0; i < b.size(); ++i)
    if (!pos_b.emplace(b[i], i).second) throw Error(ErrorCode::invalid_argument, "ranking_consistency: duplicate element");
  std::vector<std::size_t> mapped(a.size());
  std::set<T> seen;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!seen.insert(a[i]).second) throw Error(ErrorCode::invalid_argument, "ranking_consistency: duplicate element");
    auto it = pos_b.find(a[i]);
    if (it == pos_b.end()) throw Error(ErrorCode::invalid_argument, "ranking_consistency: element sets differ");
    mapped[i] = it->second;
  }
  RankingConsistency r;
  for (std::size_t i = 0; i < mapped.size(); ++i)
    for (std::size_t j = i + 1; j < mapped.size(); ++j) (mapped[i] < mapped[j] ? r.concordant : r.discordant) += 1;
  r.kendall_tau = (static_cast<double>(r.concordant) - static_cast<double>(r.discordant)) /
                  static_cast<double>(r.concordant + r.discordant);
  std::size_t common = 0;
  for (std::size_t i = 0; i < k; ++i) common += mapped[i] < k ? 1 : 0;
  r.topk_overlap = static_cast<double>(common) / static_cast<double>(k);
  return r;
}

template <class T>
RankingConsistency ranking_consistency(const std::vector<T>& a, const std::vector<T>& b, std::size_t k) {
  return ranking_consistency(std::span<const T>(a), std::span<const T>(b), k);
}

// ---------------------------------------------------------------------------

/// Query -> nearest target -> nearest query. A query counts when the
/// forward hit is its gold target and the backward hit is itself.
inline double bijective_alignment(const EmbeddingStore& queries, const EmbeddingStore& targets,
                                  const std::map<std::string, std::string>& gold, std::size_t workers = 1) {
  if (queries.size() != targets.size())
    throw Error(ErrorCode::dimension_mismatch, "bijective_alignment: query and target counts differ");
  if (queries.size() == 0) throw Error(ErrorCode::invalid_argument, "bijective_alignment: empty stores");
  if (gold.size() != queries.size())
    throw Error(ErrorCode::invalid_argument, "bijective_alignment: gold pairing must cover every query");
  std::set<std::string> gold_targets;
  for (const auto& [q, t] : gold) {
    if (!queries.contains(q) || !targets.contains(t))
      throw Error(ErrorCode::not_found, "bijective_alignment: gold pair references unknown id");
    if (!gold_targets.insert(t).second)
      throw Error(ErrorCode::invalid_argument, "bijective_alignment: gold pairing is not bijective");
  }
  RetrievalIndex forward(targets), backward(queries);
  std::vector<char> hit(queries.size(), 0);
  parallel_for(queries.size(), workers, [&](std::size_t i) {
    const auto t = forward.search(queries.row(i), 1).front().index;
    if (targets.id(t) != gold.at(queries.id(i))) return;
    hit[i] = backward.search(targets.row(t), 1).front().index == i;
  });
  return static_cast<double>(std::count(hit.begin(), hit.end(), 1)) / static_cast<double>(hit.size());
}

// ---------------------------------------------------------------------------

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann-Whitney U / (n_pos n_neg)).
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw Error(ErrorCode::dimension_mismatch, "auc: scores and labels differ in length");
  std::vector<std::pair<double, int>> v;
  std::size_t npos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw Error(ErrorCode::invalid_argument, "auc: labels must be 0 or 1");
    if (!std::isfinite(scores[i])) throw Error(ErrorCode::numeric, "auc: non-finite score");
    v.emplace_back(scores[i], labels[i]);
    npos += static_cast<std::size_t>(labels[i]);
  }
  const std::size_t nneg = v.size() - npos;
  if (npos == 0 || nneg == 0) throw Error(ErrorCode::invalid_argument, "auc: both classes must be present");
  std::sort(v.begin(), v.end());
  // Sum over positives of (negatives strictly below + half the tied negatives).
  double u = 0.0;
  std::size_t below = 0;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i, pos = 0, neg = 0;
    while (j < v.size() && v[j].first == v[i].first) (v[j++].second ? pos : neg) += 1;
    u += static_cast<double>(pos) * (static_cast<double>(below) + 0.5 * static_cast<double>(neg));
    below += neg;
    i = j;
  }
  return u / (static_cast<double>(npos) * static_cast<double>(nneg));
}

inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  return auc(std::span<const double>(scores), std::span<const int>(labels));
}

}  // namespace omniembed
