/// \file core.hpp
/// Vector and matrix primitives shared by every module: cosine similarity
/// (with its backward pass), pooling, tanh normalisation, nested Matryoshka
/// prefixes and the row-major embedding store.
///
/// All arithmetic is done in double precision; single precision only appears
/// at file boundaries (see embedding_io.hpp).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "omniembed/error.hpp"
#include "omniembed/parallel.hpp"

namespace omniembed {

using Vector = std::vector<double>;
using Embedding = std::vector<double>;

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double x) { return std::isfinite(x); });
}

/// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

/// out = M x
inline void matvec(const Matrix& m, std::span<const double> x, std::span<double> out) {
  for (std::size_t r = 0; r < m.rows(); ++r) out[r] = dot(m.row(r), x);
}

/// out += M^T y
inline void matvec_transposed_add(const Matrix& m, std::span<const double> y, std::span<double> out) {
  for (std::size_t r = 0; r < m.rows(); ++r) axpy(y[r], m.row(r), out);
}

/// G += y x^T
inline void outer_add(std::span<const double> y, std::span<const double> x, Matrix& g) {
  for (std::size_t r = 0; r < g.rows(); ++r) axpy(y[r], x, g.row(r));
}

// ---------------------------------------------------------------------------
// Cosine similarity

struct CosineResult {
  double value = 0.0;
  bool degenerate = false;  // a zero-norm argument; value defined as 0
};

inline CosineResult cosine_checked(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw Error(ErrorCode::dimension_mismatch, "cosine: dimension mismatch (" +
                                                   std::to_string(a.size()) + " vs " +
                                                   std::to_string(b.size()) + ")");
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) return {0.0, true};
  const double c = dot(a, b) / (na * nb);
  return {std::clamp(c, -1.0, 1.0), false};
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  return cosine_checked(a, b).value;
}

/// Accumulates upstream * d cos(a,b) / da into da and likewise for b.
/// Zero-norm arguments contribute no gradient, matching the zero convention.
inline void cosine_backward(std::span<const double> a, std::span<const double> b, double upstream,
                            std::span<double> da, std::span<double> db) {
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0 || upstream == 0.0) return;
  const double inv = 1.0 / (na * nb);
  const double c = dot(a, b) * inv;
  const double ca = c / (na * na);
  const double cb = c / (nb * nb);
  for (std::size_t i = 0; i < a.size(); ++i) {
    da[i] += upstream * (b[i] * inv - ca * a[i]);
    db[i] += upstream * (a[i] * inv - cb * b[i]);
  }
}

// ---------------------------------------------------------------------------
// Pooling and normalisation

inline Embedding mean_pool(std::span<const Embedding> tokens) {
  if (tokens.empty()) throw Error(ErrorCode::invalid_argument, "mean_pool: empty token list");
  const std::size_t dim = tokens.front().size();
  Embedding out(dim, 0.0);
  for (const auto& t : tokens) {
    if (t.size() != dim) throw Error(ErrorCode::dimension_mismatch, "mean_pool: token dims differ");
    for (std::size_t i = 0; i < dim; ++i) out[i] += t[i];
  }
  const double inv = 1.0 / static_cast<double>(tokens.size());
  for (auto& v : out) v *= inv;
  return out;
}

inline Embedding tanh_normalize(std::span<const double> e) {
  Embedding out(e.size());
  std::transform(e.begin(), e.end(), out.begin(), [](double x) { return std::tanh(x); });
  return out;
}

/// Long audio arrives as several fixed-length chunk features; they collapse
/// to a single audio token by mean pooling, whatever the chunk count.
inline Embedding aggregate_audio_chunks(std::span<const Embedding> chunks) {
  if (chunks.empty()) throw Error(ErrorCode::invalid_argument, "aggregate_audio_chunks: no chunks");
  return mean_pool(chunks);
}

// ---------------------------------------------------------------------------
// Matryoshka dimensions

/// Strictly ascending list of nested prefix sizes; the last one is the full
/// embedding dimension.
class MrlDims {
 public:
  MrlDims() = default;
  explicit MrlDims(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
    if (dims_.empty()) throw Error(ErrorCode::invalid_argument, "MrlDims: empty");
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (dims_[i] == 0) throw Error(ErrorCode::invalid_argument, "MrlDims: zero dimension");
      if (i > 0 && dims_[i] <= dims_[i - 1])
        throw Error(ErrorCode::invalid_argument, "MrlDims: dimensions must be strictly ascending");
    }
  }

  static MrlDims full(std::size_t dim) { return MrlDims({dim}); }

  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  std::size_t size() const noexcept { return dims_.size(); }
  std::size_t full_dim() const { return dims_.back(); }
  auto begin() const { return dims_.begin(); }
  auto end() const { return dims_.end(); }

  void validate_for(std::size_t dim) const {
    if (dims_.empty() || dims_.back() > dim)
      throw Error(ErrorCode::dimension_mismatch, "MrlDims: slice exceeds embedding dimension " + std::to_string(dim));
    if (dims_.back() != dim)
      throw Error(ErrorCode::dimension_mismatch, "MrlDims: last slice must equal embedding dimension " + std::to_string(dim));
  }

 private:
  std::vector<std::size_t> dims_;
};

/// Nested prefixes e[0:d] for each d; slice i is a prefix of slice i+1.
inline std::vector<Embedding> slice_embedding(std::span<const double> e, const MrlDims& dims) {
  dims.validate_for(e.size());
  std::vector<Embedding> out;
  out.reserve(dims.size());
  for (std::size_t d : dims) out.emplace_back(e.begin(), e.begin() + static_cast<std::ptrdiff_t>(d));
  return out;
}

// ---------------------------------------------------------------------------
// Embedding store

/// Row-major set of equal-length embeddings with unique string ids.
class EmbeddingStore {
 public:
  EmbeddingStore() = default;
  explicit EmbeddingStore(std::size_t dim) : dim_(dim) {
    if (dim == 0) throw Error(ErrorCode::invalid_argument, "EmbeddingStore: dim must be positive");
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return ids_.size(); }
  bool empty() const noexcept { return ids_.empty(); }

  void add(std::string id, std::span<const double> row) {
    if (row.size() != dim_)
      throw Error(ErrorCode::dimension_mismatch, "EmbeddingStore: row '" + id + "' has dim " +
                                                     std::to_string(row.size()) + ", store dim " +
                                                     std::to_string(dim_));
    if (!all_finite(row)) throw Error(ErrorCode::numeric, "EmbeddingStore: non-finite entry in row '" + id + "'");
    auto [it, inserted] = index_.emplace(id, ids_.size());
    if (!inserted) throw Error(ErrorCode::invalid_argument, "EmbeddingStore: duplicate id '" + id + "'");
    ids_.push_back(std::move(id));
    data_.insert(data_.end(), row.begin(), row.end());
  }

  std::span<const double> row(std::size_t i) const { return {data_.data() + i * dim_, dim_}; }
  const std::string& id(std::size_t i) const { return ids_[i]; }
  const std::vector<std::string>& ids() const noexcept { return ids_; }

  bool contains(const std::string& id) const { return index_.count(id) != 0; }

  std::size_t index_of(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw Error(ErrorCode::not_found, "EmbeddingStore: unknown id '" + id + "'", id);
    return it->second;
  }

  std::span<const double> at(const std::string& id) const { return row(index_of(id)); }

  /// Store restricted to the first `d` coordinates of every row.
  EmbeddingStore prefix(std::size_t d) const {
    if (d == 0 || d > dim_) throw Error(ErrorCode::dimension_mismatch, "EmbeddingStore::prefix: bad dim");
    EmbeddingStore out(d);
    for (std::size_t i = 0; i < size(); ++i) out.add(ids_[i], row(i).first(d));
    return out;
  }

  /// Rows selected by index, in the given order.
  EmbeddingStore select(std::span<const std::size_t> rows) const {
    EmbeddingStore out(dim_);
    for (std::size_t r : rows) out.add(ids_[r], row(r));
    return out;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<double> data_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct SimilarityMatrix {
  Matrix values;
  std::size_t degenerate = 0;  // entries involving a zero-norm row
};

/// M[i][j] = cosine(A.row(i), B.row(j)). Rows are independent, so the result
/// does not depend on the worker count.
inline SimilarityMatrix pairwise_similarity(const EmbeddingStore& a, const EmbeddingStore& b,
                                            std::size_t workers = 1) {
  if (a.dim() != b.dim())
    throw Error(ErrorCode::dimension_mismatch, "pairwise_similarity: store dims differ (" +
                                                   std::to_string(a.dim()) + " vs " + std::to_string(b.dim()) + ")");
  SimilarityMatrix out{Matrix(a.size(), b.size()), 0};
  std::vector<double> norms_b(b.size());
  for (std::size_t j = 0; j < b.size(); ++j) norms_b[j] = norm(b.row(j));
  std::vector<std::size_t> degenerate(a.size(), 0);
  parallel_for(a.size(), workers, [&](std::size_t i) {
    const auto ra = a.row(i);
    const double na = norm(ra);
    for (std::size_t j = 0; j < b.size(); ++j) {
      if (na == 0.0 || norms_b[j] == 0.0) {
        out.values(i, j) = 0.0;
        ++degenerate[i];
        continue;
      }
      out.values(i, j) = std::clamp(dot(ra, b.row(j)) / (na * norms_b[j]), -1.0, 1.0);
    }
  });
  out.degenerate = std::accumulate(degenerate.begin(), degenerate.end(), std::size_t{0});
  return out;
}

}  // namespace omniembed
