/// \file embedding_io.hpp
/// Flat embedding file format:
///
///   {"count":N,"dim":D,"dtype":"f32le"}\n
///   N*D little-endian float32 values, row-major
///   N newline-terminated UTF-8 ids
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "omniembed/core.hpp"
#include "omniembed/error.hpp"

namespace omniembed {

namespace detail {

inline void put_f32le(std::ostream& out, double value) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(value));
  const char bytes[4] = {static_cast<char>(bits & 0xFF), static_cast<char>((bits >> 8) & 0xFF),
                         static_cast<char>((bits >> 16) & 0xFF), static_cast<char>((bits >> 24) & 0xFF)};
  out.write(bytes, 4);
}

inline double get_f32le(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  return static_cast<double>(std::bit_cast<float>(bits));
}

}  // namespace detail

inline void write_embeddings(std::ostream& out, const EmbeddingStore& store) {
  const nlohmann::json header = {{"count", store.size()}, {"dim", store.dim()}, {"dtype", "f32le"}};
  out << header.dump() << '\n';
  for (std::size_t i = 0; i < store.size(); ++i)
    for (double v : store.row(i)) detail::put_f32le(out, v);
  for (const auto& id : store.ids()) {
    if (id.find('\n') != std::string::npos)
      throw Error(ErrorCode::invalid_argument, "write_embeddings: id contains a newline");
    out << id << '\n';
  }
}

inline void write_embeddings(const std::filesystem::path& path, const EmbeddingStore& store) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot open '" + path.string() + "' for writing", path.string());
  write_embeddings(out, store);
  if (!out) throw Error(ErrorCode::io, "write failed for '" + path.string() + "'", path.string());
}

inline EmbeddingStore read_embeddings(std::istream& in, const std::string& origin = "<stream>") {
  std::string header_line;
  if (!std::getline(in, header_line))
    throw Error(ErrorCode::io, origin + ": missing embedding header", origin);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::io, origin + ": malformed embedding header: " + e.what(), origin);
  }
  if (!header.contains("count") || !header.contains("dim") || header.value("dtype", "") != "f32le")
    throw Error(ErrorCode::io, origin + ": header must carry count, dim and dtype=f32le", origin);
  const auto count = header["count"].get<std::size_t>();
  const auto dim = header["dim"].get<std::size_t>();
  if (dim == 0) throw Error(ErrorCode::io, origin + ": dim must be positive", origin);

  std::vector<unsigned char> raw(count * dim * 4);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size())
    throw Error(ErrorCode::io, origin + ": truncated embedding payload", origin);

  EmbeddingStore store(dim);
  Vector row(dim);
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t j = 0; j < dim; ++j) row[j] = detail::get_f32le(raw.data() + (i * dim + j) * 4);
    std::string id;
    if (!std::getline(in, id)) throw Error(ErrorCode::io, origin + ": missing id for row " + std::to_string(i), origin);
    store.add(std::move(id), row);
  }
  return store;
}

inline EmbeddingStore read_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open '" + path.string() + "'", path.string());
  return read_embeddings(in, path.string());
}

/// Matrices (checkpoint tensors) reuse the embedding format, one row per
/// matrix row with the row index as id.
inline EmbeddingStore matrix_to_store(const Matrix& m) {
  EmbeddingStore store(m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) store.add(std::to_string(r), m.row(r));
  return store;
}

inline Matrix store_to_matrix(const EmbeddingStore& store) {
  Matrix m(store.size(), store.dim());
  for (std::size_t r = 0; r < store.size(); ++r) {
    const auto row = store.row(r);
    std::copy(row.begin(), row.end(), m.row(r).begin());
  }
  return m;
}

}  // namespace omniembed
