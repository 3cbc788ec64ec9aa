// Shared generators and fixtures for the unit tests.
#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include <gtest/gtest.h>

#include "omniembed/core.hpp"
#include "omniembed/rng.hpp"

namespace omniembed::testing {

inline std::vector<double> random_vector(Rng& rng, std::size_t dim, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(dim);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Nonzero with overwhelming probability; redraws the (measure-zero) zero case.
inline std::vector<double> random_nonzero(Rng& rng, std::size_t dim) {
  for (;;) {
    auto v = random_vector(rng, dim);
    if (norm(v) > 1e-6) return v;
  }
}

inline EmbeddingStore random_store(Rng& rng, std::size_t n, std::size_t dim, const std::string& prefix = "r") {
  EmbeddingStore s(dim);
  for (std::size_t i = 0; i < n; ++i) s.add(prefix + std::to_string(i), random_nonzero(rng, dim));
  return s;
}

inline EmbeddingStore store_of(const std::vector<std::vector<double>>& rows, const std::string& prefix = "r") {
  EmbeddingStore s(rows.at(0).size());
  for (std::size_t i = 0; i < rows.size(); ++i) s.add(prefix + std::to_string(i), rows[i]);
  return s;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = "omniembed-test";
    if (info) name += std::string("-") + info->test_suite_name() + "-" + info->name();
    path_ = std::filesystem::temp_directory_path() / (name + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& child) const { return path_ / child; }

 private:
  std::filesystem::path path_;
};

}  // namespace omniembed::testing
