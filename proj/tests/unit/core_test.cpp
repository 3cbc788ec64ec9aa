#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "omniembed/core.hpp"
#include "omniembed/embedding_io.hpp"
#include "support.hpp"

using namespace omniembed;
using omniembed::testing::random_nonzero;
using omniembed::testing::random_store;
using omniembed::testing::store_of;

TEST(Cosine, Examples) {
  EXPECT_DOUBLE_EQ(cosine(Vector{1, 0}, Vector{1, 0}), 1.0);
  EXPECT_DOUBLE_EQ(cosine(Vector{1, 0}, Vector{0, 1}), 0.0);
  EXPECT_NEAR(cosine(Vector{1, 1}, Vector{1, 0}), 1.0 / std::sqrt(2.0), 1e-12);
}

TEST(Cosine, ZeroVectorIsFlaggedAndZero) {
  const auto r = cosine_checked(Vector{0, 0}, Vector{0, 0});
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_TRUE(cosine_checked(Vector{0, 0}, Vector{1, 2}).degenerate);
  EXPECT_FALSE(cosine_checked(Vector{1, 0}, Vector{1, 2}).degenerate);
}

TEST(Cosine, DimensionMismatchThrows) {
  try {
    cosine(Vector{1, 0}, Vector{1, 0, 0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::dimension_mismatch);
  }
}

TEST(Cosine, SymmetricAndScaleInvariant) {
  Rng rng(1);
  for (int t = 0; t < 500; ++t) {
    const std::size_t d = 1 + rng.uniform_index(16);
    const auto a = random_nonzero(rng, d);
    const auto b = random_nonzero(rng, d);
    const double c = cosine(a, b);
    EXPECT_EQ(c, cosine(b, a));
    EXPECT_GE(c, -1.0);
    EXPECT_LE(c, 1.0);
    const double s = std::exp(rng.uniform(-5, 5));
    Vector sa = a;
    for (auto& x : sa) x *= s;
    EXPECT_NEAR(cosine(sa, b), c, 1e-12);
    EXPECT_NEAR(cosine(a, a), 1.0, 1e-12);
  }
}

TEST(Cosine, BackwardMatchesCentralDifference) {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    const std::size_t d = 2 + rng.uniform_index(6);
    auto a = random_nonzero(rng, d);
    auto b = random_nonzero(rng, d);
    Vector da(d, 0.0), db(d, 0.0);
    cosine_backward(a, b, 1.0, da, db);
    const double h = 1e-6;
    for (std::size_t i = 0; i < d; ++i) {
      auto ap = a, am = a;
      ap[i] += h;
      am[i] -= h;
      EXPECT_NEAR(da[i], (cosine(ap, b) - cosine(am, b)) / (2 * h), 1e-6);
      auto bp = b, bm = b;
      bp[i] += h;
      bm[i] -= h;
      EXPECT_NEAR(db[i], (cosine(a, bp) - cosine(a, bm)) / (2 * h), 1e-6);
    }
  }
}

TEST(MeanPool, Examples) {
  EXPECT_EQ(mean_pool(std::vector<Embedding>{{0, 0}, {0, 0}}), (Embedding{0, 0}));
  EXPECT_EQ(mean_pool(std::vector<Embedding>{{1, 0}, {0, 1}}), (Embedding{0.5, 0.5}));
  EXPECT_EQ(mean_pool(std::vector<Embedding>{{2, 4}, {4, 8}, {0, 0}}), (Embedding{2, 4}));
}

TEST(MeanPool, Errors) {
  EXPECT_THROW(mean_pool(std::vector<Embedding>{}), Error);
  EXPECT_THROW(mean_pool(std::vector<Embedding>{{1, 2}, {1}}), Error);
}

TEST(TanhNormalize, Examples) {
  EXPECT_EQ(tanh_normalize(Vector{0, 0}), (Embedding{0, 0}));
  EXPECT_NEAR(tanh_normalize(Vector{1e9})[0], 1.0, 1e-9);
  EXPECT_NEAR(tanh_normalize(Vector{1.0})[0], 0.76159416, 1e-8);
}

TEST(TanhNormalize, RangeProperty) {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    const auto v = omniembed::testing::random_vector(rng, 8, -50, 50);
    for (double x : tanh_normalize(v)) {
      EXPECT_GE(x, -1.0);
      EXPECT_LE(x, 1.0);
    }
  }
}

TEST(SliceEmbedding, Examples) {
  const Embedding e4{1, 2, 3, 4};
  EXPECT_EQ(slice_embedding(e4, MrlDims({4})), (std::vector<Embedding>{e4}));
  EXPECT_EQ(slice_embedding(e4, MrlDims({2, 4})), (std::vector<Embedding>{{1, 2}, {1, 2, 3, 4}}));
  EXPECT_EQ(slice_embedding(Embedding{5}, MrlDims({1})), (std::vector<Embedding>{{5}}));
}

TEST(SliceEmbedding, Errors) {
  EXPECT_THROW(slice_embedding(Embedding{1, 2}, MrlDims({1, 3})), Error);
  EXPECT_THROW(slice_embedding(Embedding{1, 2, 3}, MrlDims({1, 2})), Error);
  EXPECT_THROW(MrlDims({4, 2}), Error);
  EXPECT_THROW(MrlDims({0, 2}), Error);
  EXPECT_THROW(MrlDims(std::vector<std::size_t>{}), Error);
}

TEST(SliceEmbedding, NestingProperty) {
  Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    const std::size_t full = 2 + rng.uniform_index(30);
    std::vector<std::size_t> dims;
    for (std::size_t d = 1; d < full; ++d)
      if (rng.bernoulli(0.3)) dims.push_back(d);
    dims.push_back(full);
    const auto e = omniembed::testing::random_vector(rng, full);
    const auto slices = slice_embedding(e, MrlDims(dims));
    ASSERT_EQ(slices.size(), dims.size());
    EXPECT_EQ(slices.back(), e);
    for (std::size_t i = 0; i + 1 < slices.size(); ++i)
      EXPECT_TRUE(std::equal(slices[i].begin(), slices[i].end(), slices[i + 1].begin()));
  }
}

TEST(AudioChunks, Examples) {
  EXPECT_EQ(aggregate_audio_chunks(std::vector<Embedding>{{3, -1}}), (Embedding{3, -1}));
  EXPECT_EQ(aggregate_audio_chunks(std::vector<Embedding>{{1, 1}, {3, 3}}), (Embedding{2, 2}));
  EXPECT_EQ(aggregate_audio_chunks(std::vector<Embedding>{{0, 0}, {0, 0}, {0, 0}}), (Embedding{0, 0}));
  EXPECT_THROW(aggregate_audio_chunks(std::vector<Embedding>{}), Error);
}

TEST(PairwiseSimilarity, Examples) {
  const auto id = store_of({{1, 0}, {0, 1}});
  const auto m = pairwise_similarity(id, id).values;
  EXPECT_EQ(m(0, 0), 1.0);
  EXPECT_EQ(m(0, 1), 0.0);
  EXPECT_EQ(m(1, 0), 0.0);
  EXPECT_EQ(m(1, 1), 1.0);

  const auto one = pairwise_similarity(store_of({{1, 0}}), id).values;
  ASSERT_EQ(one.rows(), 1u);
  ASSERT_EQ(one.cols(), 2u);
  EXPECT_EQ(one(0, 0), 1.0);
  EXPECT_EQ(one(0, 1), 0.0);
}

TEST(PairwiseSimilarity, MatchesCosineOracle) {
  Rng rng(5);
  for (int t = 0; t < 30; ++t) {
    const std::size_t d = 1 + rng.uniform_index(8);
    const auto a = random_store(rng, 1 + rng.uniform_index(64), d, "a");
    const auto b = random_store(rng, 1 + rng.uniform_index(64), d, "b");
    const std::size_t workers = 1 + rng.uniform_index(4);
    const auto m = pairwise_similarity(a, b, workers);
    ASSERT_EQ(m.values.rows(), a.size());
    ASSERT_EQ(m.values.cols(), b.size());
    EXPECT_EQ(m.degenerate, 0u);
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = 0; j < b.size(); ++j) EXPECT_NEAR(m.values(i, j), cosine(a.row(i), b.row(j)), 1e-12);
  }
}

TEST(PairwiseSimilarity, DimensionMismatchThrows) {
  EXPECT_THROW(pairwise_similarity(store_of({{1, 0}}), store_of({{1, 0, 0}})), Error);
}

TEST(EmbeddingStore, Invariants) {
  EmbeddingStore s(2);
  s.add("a", Vector{1, 2});
  EXPECT_THROW(s.add("a", Vector{3, 4}), Error);
  EXPECT_THROW(s.add("b", Vector{3}), Error);
  EXPECT_THROW(s.add("c", Vector{NAN, 1}), Error);
  EXPECT_THROW(EmbeddingStore(0), Error);
  EXPECT_EQ(s.size(), 1u);
  try {
    s.at("zzz");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::not_found);
  }
  const auto p = store_of({{1, 2, 3}, {4, 5, 6}}).prefix(2);
  EXPECT_EQ(p.dim(), 2u);
  EXPECT_EQ(p.row(1)[1], 5.0);
}

TEST(EmbeddingFile, RoundTripIsFloat32Exact) {
  Rng rng(6);
  const auto s = random_store(rng, 17, 5);
  std::stringstream buf;
  write_embeddings(buf, s);
  const auto back = read_embeddings(buf);
  ASSERT_EQ(back.size(), s.size());
  ASSERT_EQ(back.dim(), s.dim());
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_EQ(back.id(i), s.id(i));
    for (std::size_t j = 0; j < s.dim(); ++j)
      EXPECT_EQ(back.row(i)[j], static_cast<double>(static_cast<float>(s.row(i)[j])));
  }
}

TEST(EmbeddingFile, LayoutIsHeaderFloatsIds) {
  std::stringstream buf;
  write_embeddings(buf, store_of({{1.0, -2.0}}, "x"));
  const std::string bytes = buf.str();
  const std::string header = "{\"count\":1,\"dim\":2,\"dtype\":\"f32le\"}\n";
  ASSERT_EQ(bytes.substr(0, header.size()), header);
  // 1.0f = 0x3f800000, -2.0f = 0xc0000000, little endian
  const std::string floats("\x00\x00\x80\x3f\x00\x00\x00\xc0", 8);
  EXPECT_EQ(bytes.substr(header.size(), 8), floats);
  EXPECT_EQ(bytes.substr(header.size() + 8), "x0\n");
}

TEST(EmbeddingFile, RejectsMalformedInput) {
  std::stringstream truncated("{\"count\":2,\"dim\":2,\"dtype\":\"f32le\"}\nabc");
  EXPECT_THROW(read_embeddings(truncated), Error);
  std::stringstream bad_dtype("{\"count\":0,\"dim\":2,\"dtype\":\"f64\"}\n");
  EXPECT_THROW(read_embeddings(bad_dtype), Error);
  std::stringstream empty;
  EXPECT_THROW(read_embeddings(empty), Error);
}
