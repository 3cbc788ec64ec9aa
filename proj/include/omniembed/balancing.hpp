/// \file balancing.hpp
/// Adaptive multi-source sampling weights.
///
/// Each training set and each benchmark is subsampled and clustered with
/// k-means. For every (training set, benchmark) pair the centroid cosine
/// matrix C is reduced to one number: an entropic optimal-transport plan P is
/// computed for the cost 1 - C with uniform marginals, and the score is the
/// sum of P * C. Row means of the resulting m x n matrix go through a
/// temperature softmax to give the sampling weight of each training set.
///
/// Cluster-size marginals are a natural alternative to the uniform ones used
/// here; `sinkhorn` accepts arbitrary marginals for that purpose.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <vector>

#include "omniembed/core.hpp"
#include "omniembed/datasets.hpp"
#include "omniembed/error.hpp"
#include "omniembed/parallel.hpp"
#include "omniembed/rng.hpp"

namespace omniembed {

/// min(n, |store|) rows drawn uniformly without replacement, kept in their
/// original order.
inline EmbeddingStore subsample(const EmbeddingStore& store, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw Error(ErrorCode::invalid_argument, "subsample: n must be >= 1");
  if (n >= store.size()) return store;
  std::vector<std::size_t> idx(store.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + rng.uniform_index(idx.size() - i)]);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return store.select(idx);
}

// ---------------------------------------------------------------------------
// k-means

struct ClusterModel {
  EmbeddingStore centroids;
  std::size_t k = 0;
  double inertia = 0.0;
  std::vector<std::size_t> assignment;
  std::vector<double> inertia_history;  // after each assignment step
  std::size_t iterations = 0;
};

namespace detail {

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace detail

inline constexpr double kKmeansRelTol = 1e-6;

/// Lloyd iterations from greedy k-means++ seeding. Empty clusters keep their
/// previous centroid. Inertia is checked to be non-increasing every
/// iteration (up to rounding).
inline ClusterModel kmeans(const EmbeddingStore& store, std::size_t k, std::size_t max_iters, std::uint64_t seed) {
  const std::size_t n = store.size();
  const std::size_t dim = store.dim();
  if (k == 0) throw Error(ErrorCode::invalid_argument, "kmeans: k must be >= 1");
  if (k > n)
    throw Error(ErrorCode::invalid_argument,
                "kmeans: k=" + std::to_string(k) + " exceeds store size " + std::to_string(n));
  if (max_iters == 0) throw Error(ErrorCode::invalid_argument, "kmeans: max_iters must be >= 1");

  Rng rng(seed);
  Matrix centers(k, dim);
  std::vector<char> chosen(n, 0);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  auto take = [&](std::size_t c, std::size_t point, std::vector<double>&& updated) {
    chosen[point] = 1;
    std::copy(store.row(point).begin(), store.row(point).end(), centers.row(c).begin());
    d2 = std::move(updated);
  };
  auto with_candidate = [&](std::size_t point) {
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = std::min(d2[i], detail::squared_distance(store.row(i), store.row(point)));
    return out;
  };
  // D^2 sampling over the points not yet chosen; n if all remaining mass is 0.
  auto draw = [&] {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += chosen[i] ? 0.0 : d2[i];
    if (!(total > 0.0)) return n;
    double u = rng.uniform() * total;
    for (std::size_t i = 0; i < n; ++i) {
      if (chosen[i]) continue;
      u -= d2[i];
      if (u < 0.0) return i;
    }
    for (std::size_t i = n; i-- > 0;)
      if (!chosen[i] && d2[i] > 0.0) return i;
    return n;
  };
  // Greedy k-means++: each centre is the best of several D^2 draws.
  const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(k)));
  const std::size_t first = rng.uniform_index(n);
  take(0, first, with_candidate(first));
  for (std::size_t c = 1; c < k; ++c) {
    std::size_t pick = n;
    std::vector<double> best_d2;
    double best_potential = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < trials; ++t) {
      const std::size_t cand = draw();
      if (cand == n) break;
      auto cand_d2 = with_candidate(cand);
      const double potential = std::accumulate(cand_d2.begin(), cand_d2.end(), 0.0);
      if (potential < best_potential) {
        best_potential = potential;
        pick = cand;
        best_d2 = std::move(cand_d2);
      }
    }
    if (pick == n) {
      // Every remaining point coincides with a centre; pick uniformly.
      std::vector<std::size_t> free;
      for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i]) free.push_back(i);
      pick = free[rng.uniform_index(free.size())];
      best_d2 = with_candidate(pick);
    }
    take(c, pick, std::move(best_d2));
  }

  ClusterModel model;
  model.k = k;
  model.assignment.assign(n, 0);
  double previous = std::numeric_limits<double>::infinity();
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = detail::squared_distance(store.row(i), centers.row(0));
      for (std::size_t c = 1; c < k; ++c) {
        const double d = detail::squared_distance(store.row(i), centers.row(c));
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      model.assignment[i] = best;
      inertia += best_d;
    }
    if (inertia > previous * (1.0 + 1e-9) + 1e-12)
      throw Error(ErrorCode::numeric, "kmeans: inertia increased between iterations");
    model.inertia_history.push_back(inertia);
    model.iterations = iter + 1;

    Matrix sums(k, dim);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      axpy(1.0, store.row(i), sums.row(model.assignment[i]));
      ++counts[model.assignment[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t j = 0; j < dim; ++j) centers(c, j) = sums(c, j) / static_cast<double>(counts[c]);
    }
    const bool converged = std::isfinite(previous) && (previous - inertia) <= kKmeansRelTol * std::max(previous, 1e-300);
    previous = inertia;
    if (converged || inertia == 0.0) break;
  }
  // Inertia against the final centroids.
  double final_inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    final_inertia += detail::squared_distance(store.row(i), centers.row(model.assignment[i]));
  model.inertia = std::min(final_inertia, previous);

  model.centroids = EmbeddingStore(dim);
  for (std::size_t c = 0; c < k; ++c) model.centroids.add("c" + std::to_string(c), centers.row(c));
  return model;
}

// ---------------------------------------------------------------------------
// Sinkhorn

struct TransportPlan {
  Matrix plan;
  Vector row_marginal;
  Vector col_marginal;
};

struct SinkhornResult {
  TransportPlan transport;
  double score = 0.0;  // sum of plan * C
  bool converged = false;
  std::size_t iterations = 0;
  double marginal_error = 0.0;  // max abs deviation of row/col sums
};

inline constexpr double kDefaultSinkhornEpsilon = 0.05;
inline constexpr std::size_t kDefaultSinkhornIters = 500;
inline constexpr double kSinkhornTolerance = 1e-10;

namespace detail {

inline double log_sum_exp(std::span<const double> v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

}  // namespace detail

/// Entropic OT in the log domain (stable for small epsilon). Transport cost
/// is 1 - C. Returns the last iterate with converged=false if the marginals
/// are not within tolerance after `iters` sweeps.
inline SinkhornResult sinkhorn(const Matrix& similarity, std::span<const double> row_marginal,
                               std::span<const double> col_marginal, double epsilon, std::size_t iters) {
  const std::size_t m = similarity.rows(), n = similarity.cols();
  if (m == 0 || n == 0) throw Error(ErrorCode::invalid_argument, "sinkhorn: empty similarity matrix");
  if (!(epsilon > 0.0)) throw Error(ErrorCode::invalid_argument, "sinkhorn: epsilon must be positive");
  if (row_marginal.size() != m || col_marginal.size() != n)
    throw Error(ErrorCode::dimension_mismatch, "sinkhorn: marginal sizes do not match C");
  if (!all_finite(similarity.values())) throw Error(ErrorCode::numeric, "sinkhorn: non-finite similarity");

  Matrix log_kernel(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) log_kernel(i, j) = -(1.0 - similarity(i, j)) / epsilon;

  Vector log_a(m), log_b(n);
  for (std::size_t i = 0; i < m; ++i) log_a[i] = std::log(row_marginal[i]);
  for (std::size_t j = 0; j < n; ++j) log_b[j] = std::log(col_marginal[j]);
  Vector f(m, 0.0), g(n, 0.0), scratch(std::max(m, n));

  SinkhornResult out;
  auto plan_entry = [&](std::size_t i, std::size_t j) { return std::exp(f[i] + g[j] + log_kernel(i, j)); };
  auto marginal_error = [&] {
    double err = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += plan_entry(i, j);
      err = std::max(err, std::abs(s - row_marginal[i]));
    }
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i) s += plan_entry(i, j);
      err = std::max(err, std::abs(s - col_marginal[j]));
    }
    return err;
  };

  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) scratch[j] = g[j] + log_kernel(i, j);
      f[i] = log_a[i] - detail::log_sum_exp(std::span<const double>(scratch.data(), n));
    }
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t i = 0; i < m; ++i) scratch[i] = f[i] + log_kernel(i, j);
      g[j] = log_b[j] - detail::log_sum_exp(std::span<const double>(scratch.data(), m));
    }
    out.iterations = it + 1;
    // Column marginals are exact after the g-update; rows carry the error.
    out.marginal_error = marginal_error();
    if (out.marginal_error < kSinkhornTolerance) {
      out.converged = true;
      break;
    }
  }

  out.transport.plan = Matrix(m, n);
  double mass = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) mass += out.transport.plan(i, j) = plan_entry(i, j);
  double score = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      out.transport.plan(i, j) /= mass;
      score += out.transport.plan(i, j) * similarity(i, j);
    }
  out.score = score;
  out.transport.row_marginal.assign(row_marginal.begin(), row_marginal.end());
  out.transport.col_marginal.assign(col_marginal.begin(), col_marginal.end());
  return out;
}

/// Uniform-marginal Sinkhorn reduction of a centroid cosine matrix to one
/// similarity score in [min C, max C].
inline SinkhornResult sinkhorn_scalar(const Matrix& similarity, double epsilon = kDefaultSinkhornEpsilon,
                                      std::size_t iters = kDefaultSinkhornIters) {
  for (double c : similarity.values())
    if (c < -1.0 - 1e-12 || c > 1.0 + 1e-12)
      throw Error(ErrorCode::invalid_argument, "sinkhorn_scalar: entries must lie in [-1, 1]");
  const Vector a(similarity.rows(), 1.0 / static_cast<double>(similarity.rows()));
  const Vector b(similarity.cols(), 1.0 / static_cast<double>(similarity.cols()));
  return sinkhorn(similarity, a, b, epsilon, iters);
}

// ---------------------------------------------------------------------------

/// Fused representation when present, otherwise the unimodal one by priority
/// vision > text > audio.
inline const Embedding& fusion_first_select(const std::map<Modality, Embedding>& available,
                                            const std::optional<Embedding>& fused) {
  if (fused) return *fused;
  for (auto m : {Modality::vision, Modality::text, Modality::audio})
    if (auto it = available.find(m); it != available.end()) return it->second;
  throw Error(ErrorCode::invalid_argument, "fusion_first_select: no representation available");
}

struct BalanceReport {
  Matrix sim_matrix;  // training sets x benchmarks
  Vector row_means;
  Vector weights;
  double temperature = 0.1;
  std::vector<std::vector<bool>> converged;  // per cell
};

inline constexpr double kDefaultBalanceTemperature = 0.1;

/// Softmax over benchmark-averaged similarities at the given temperature.
inline BalanceReport compute_weights(const Matrix& sim_matrix, double temperature = kDefaultBalanceTemperature) {
  if (!(temperature > 0.0)) throw Error(ErrorCode::invalid_argument, "compute_weights: temperature must be positive");
  if (sim_matrix.rows() == 0 || sim_matrix.cols() == 0)
    throw Error(ErrorCode::invalid_argument, "compute_weights: empty similarity matrix");
  if (!all_finite(sim_matrix.values())) throw Error(ErrorCode::numeric, "compute_weights: non-finite similarity");
  BalanceReport report;
  report.sim_matrix = sim_matrix;
  report.temperature = temperature;
  const std::size_t m = sim_matrix.rows();
  report.row_means.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto row = sim_matrix.row(i);
    report.row_means[i] = std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(row.size());
  }
  const double mx = *std::max_element(report.row_means.begin(), report.row_means.end());
  report.weights.resize(m);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) total += report.weights[i] = std::exp((report.row_means[i] - mx) / temperature);
  for (auto& w : report.weights) w /= total;
  return report;
}

struct BalanceParams {
  std::size_t sample_size = 10'000;
  std::size_t k = 16;
  std::size_t max_iters = 100;
  double epsilon = kDefaultSinkhornEpsilon;
  std::size_t sinkhorn_iters = kDefaultSinkhornIters;
  double temperature = kDefaultBalanceTemperature;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

/// Full pipeline: subsample and cluster each store once, score every
/// (train, bench) cell by Sinkhorn, then softmax the row means.
inline BalanceReport balance_sources(std::span<const EmbeddingStore> train, std::span<const EmbeddingStore> bench,
                                     const BalanceParams& params) {
  if (train.empty() || bench.empty()) throw Error(ErrorCode::invalid_argument, "balance_sources: need train and bench sets");
  const std::size_t dim = train.front().dim();
  for (const auto& s : train)
    if (s.dim() != dim) throw Error(ErrorCode::dimension_mismatch, "balance_sources: train dims differ");
  for (const auto& s : bench)
    if (s.dim() != dim) throw Error(ErrorCode::dimension_mismatch, "balance_sources: bench dims differ");

  std::vector<const EmbeddingStore*> all;
  for (const auto& s : train) all.push_back(&s);
  for (const auto& s : bench) all.push_back(&s);
  std::vector<EmbeddingStore> centroids(all.size());
  parallel_for(all.size(), params.workers, [&](std::size_t s) {
    const auto sample = subsample(*all[s], params.sample_size, params.seed + 2 * s);
    const std::size_t k = std::min(params.k, sample.size());
    centroids[s] = kmeans(sample, k, params.max_iters, params.seed + 2 * s + 1).centroids;
  });

  const std::size_t m = train.size(), n = bench.size();
  Matrix sim(m, n);
  std::vector<std::vector<bool>> converged(m, std::vector<bool>(n, false));
  std::vector<char> converged_flat(m * n, 0);
  parallel_for(m * n, params.workers, [&](std::size_t cell) {
    const std::size_t i = cell / n, j = cell % n;
    const auto c = pairwise_similarity(centroids[i], centroids[m + j]).values;
    const auto r = sinkhorn_scalar(c, params.epsilon, params.sinkhorn_iters);
    sim(i, j) = r.score;
    converged_flat[cell] = r.converged ? 1 : 0;
  });
  auto report = compute_weights(sim, params.temperature);
  for (std::size_t cell = 0; cell < m * n; ++cell) converged[cell / n][cell % n] = converged_flat[cell] != 0;
  report.converged = std::move(converged);
  return report;
}

}  // namespace omniembed
