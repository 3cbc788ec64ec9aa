#include <cmath>

#include <gtest/gtest.h>

#include "omniembed/gradcheck.hpp"
#include "omniembed/losses.hpp"
#include "support.hpp"

using namespace omniembed;
using omniembed::testing::random_nonzero;

namespace {

// Unit vector at angle theta in the plane, so cos(u(a), u(b)) = cos(a - b).
Embedding unit(double theta) { return {std::cos(theta), std::sin(theta)}; }

// Pair of 2-d vectors with the requested cosine.
std::pair<Embedding, Embedding> with_cosine(double c) { return {unit(0.0), unit(std::acos(c))}; }

}  // namespace

TEST(Nce, ClosedForms) {
  {
    const std::vector<Embedding> negs = {unit(M_PI)};
    EXPECT_NEAR(nce_loss(unit(0), unit(0), negs, 1.0).loss, std::log(1 + std::exp(-2.0)), 1e-12);
    EXPECT_NEAR(nce_loss(unit(0), unit(0), negs, 1.0).loss, 0.126928, 1e-6);
  }
  {
    const auto [q, p] = with_cosine(0.8);
    const std::vector<Embedding> negs = {unit(std::acos(0.2))};
    EXPECT_NEAR(nce_loss(q, p, negs, 0.1).loss, std::log(1 + std::exp(-6.0)), 1e-12);
    EXPECT_NEAR(nce_loss(q, p, negs, 0.1).loss, 0.002476, 1e-6);
  }
  const auto empty = nce_loss(unit(0), unit(1), {}, 0.07);
  EXPECT_EQ(empty.loss, 0.0);
  EXPECT_TRUE(empty.flagged);
}

TEST(Nce, Errors) {
  const std::vector<Embedding> negs = {{1, 0, 0}};
  EXPECT_THROW(nce_loss(unit(0), unit(0), negs, 1.0), Error);
  EXPECT_THROW(nce_loss(unit(0), unit(0), {}, 0.0), Error);
}

TEST(Nce, NonNegativeAndMonotoneInPositive) {
  Rng rng(50);
  for (int t = 0; t < 200; ++t) {
    std::vector<Embedding> negs;
    const std::size_t k = 1 + rng.uniform_index(5);
    for (std::size_t j = 0; j < k; ++j) negs.push_back(unit(rng.uniform(0, 2 * M_PI)));
    const double tau = rng.uniform(0.05, 1.0);
    double prev = INFINITY;
    // positive rotating towards the query: cosine increases
    for (double a = M_PI; a >= 0; a -= M_PI / 16) {
      const double l = nce_loss(unit(0), unit(a), negs, tau).loss;
      EXPECT_GE(l, 0.0);
      EXPECT_LT(l, prev);
      prev = l;
    }
  }
}

TEST(NceMrl, FullOnlyEqualsNce) {
  Rng rng(51);
  const auto q = random_nonzero(rng, 6), p = random_nonzero(rng, 6);
  const std::vector<Embedding> negs = {random_nonzero(rng, 6), random_nonzero(rng, 6)};
  EXPECT_EQ(nce_mrl_loss(q, p, negs, MrlDims({6}), 0.3).loss, nce_loss(q, p, negs, 0.3).loss);
}

TEST(NceMrl, ConstantVectorsDoubleTheLoss) {
  const Embedding q(8, 1.0), p(8, 2.0);
  const std::vector<Embedding> negs = {Embedding(8, -1.0), Embedding(8, 0.5)};
  const double single = nce_loss(std::span<const double>(q).first(4), std::span<const double>(p).first(4),
                                 std::vector<Embedding>{Embedding(4, -1.0), Embedding(4, 0.5)}, 0.5)
                            .loss;
  EXPECT_NEAR(nce_mrl_loss(q, p, negs, MrlDims({4, 8}), 0.5).loss, 2 * single, 1e-12);
}

TEST(NceMrl, EqualsSumOfSlices) {
  Rng rng(52);
  for (int t = 0; t < 50; ++t) {
    const auto q = random_nonzero(rng, 8), p = random_nonzero(rng, 8);
    std::vector<Embedding> negs;
    for (int j = 0; j < 3; ++j) negs.push_back(random_nonzero(rng, 8));
    double sum = 0;
    for (std::size_t d : {2, 4, 8}) {
      std::vector<Embedding> nd;
      for (const auto& n : negs) nd.emplace_back(n.begin(), n.begin() + static_cast<std::ptrdiff_t>(d));
      sum += nce_loss(std::span<const double>(q).first(d), std::span<const double>(p).first(d), nd, 0.2).loss;
    }
    EXPECT_NEAR(nce_mrl_loss(q, p, negs, MrlDims({2, 4, 8}), 0.2).loss, sum, 1e-12);
  }
}

TEST(Cosent, ClosedForms) {
  const std::vector<PairSimilarity> sims = {{"hi", 0.6}, {"lo", 0.7}};
  EXPECT_EQ(cosent_loss(sims, {}, 0.05).loss, 0.0);
  const std::vector<PairOrder> order = {{"hi", "lo"}};
  EXPECT_NEAR(cosent_loss(sims, order, 0.05).loss, std::log(1 + std::exp(2.0)), 1e-12);
  EXPECT_NEAR(cosent_loss(sims, order, 0.05).loss, 2.126928, 1e-6);
  const std::vector<PairSimilarity> ok = {{"hi", 0.8}, {"lo", 0.3}};
  EXPECT_NEAR(cosent_loss(ok, order, 0.05).loss, std::log1p(std::exp(-10.0)), 1e-15);
  EXPECT_NEAR(cosent_loss(ok, order, 0.05).loss, 4.54e-5, 1e-7);
}

TEST(Cosent, UnknownPairThrows) {
  const std::vector<PairSimilarity> sims = {{"a", 0.1}};
  const std::vector<PairOrder> order = {{"a", "zzz"}};
  EXPECT_THROW(cosent_loss(sims, order, 0.05), Error);
}

TEST(Cosent, SatisfiedWithMarginIsNearZero) {
  Rng rng(53);
  for (int t = 0; t < 100; ++t) {
    const double tau = rng.uniform(0.01, 0.1);
    // descending similarities spaced 10 tau apart: every ordering has margin >= 10 tau
    std::vector<PairSimilarity> sims;
    const std::size_t n = 2 + rng.uniform_index(4);
    for (std::size_t i = 0; i < n; ++i) sims.push_back({"p" + std::to_string(i), 1.0 - 10.0 * tau * static_cast<double>(i)});
    std::vector<PairOrder> order;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = i + 1; k < n; ++k)
        if (rng.bernoulli(0.7)) order.push_back({sims[i].pair, sims[k].pair});
    const double l = cosent_loss(sims, order, tau).loss;
    EXPECT_GE(l, 0.0);
    EXPECT_LT(l, 1e-3);
  }
}

TEST(Micl, ClosedForm) {
  ModalViews q, p, n;
  q.n_v = p.n_v = Embedding{1, 0};
  q.n_t = p.n_t = Embedding{0, 1};
  q.n_m = p.n_m = Embedding{1, 1};
  n.n_v = Embedding{0, 1};
  n.n_t = Embedding{1, 0};
  n.n_m = Embedding{1, -1};
  const std::vector<ModalViews> batch = {n};
  const auto r = micl_loss(q, p, batch, 1.0);
  EXPECT_NEAR(r.loss, 2 * -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)), 1e-12);
  EXPECT_NEAR(r.loss, 0.626523, 1e-6);
  EXPECT_FALSE(r.flagged);

  ModalViews q2 = q, p2 = p;
  q2.n_t.reset();
  const auto vis_only = micl_loss(q2, p2, batch, 1.0);
  EXPECT_NEAR(vis_only.loss, r.loss / 2, 1e-12);
  EXPECT_TRUE(vis_only.flagged);

  EXPECT_EQ(micl_loss(q, p, {}, 1.0).loss, 0.0);
}

TEST(LateFusion, Examples) {
  const Embedding v{1, -2, 3}, n{0.5, 4, -1};
  auto gate = LateFusionGate::zeros(3);
  const auto half = late_fusion(v, n, gate).fused;
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(half[i], 0.5 * v[i] + 0.5 * n[i], 1e-15);

  gate.b.assign(3, 50.0);
  const auto sat = late_fusion(v, n, gate).fused;
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(sat[i], v[i], 1e-9);

  Rng rng(54);
  for (auto& w : gate.w.values()) w = rng.normal();
  for (auto& b : gate.b) b = rng.normal();
  const auto fixed = late_fusion(v, v, gate).fused;
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(fixed[i], v[i], 1e-15);

  EXPECT_THROW(late_fusion(Embedding{1, 2}, n, gate), Error);
}

TEST(HardContrastive, Examples) {
  Rng rng(55);
  const auto q = random_nonzero(rng, 4), p = random_nonzero(rng, 4);
  const std::vector<Embedding> random = {random_nonzero(rng, 4), random_nonzero(rng, 4)};
  EXPECT_EQ(hard_contrastive_loss(q, p, {}, random, 0.3).loss, nce_loss(q, p, random, 0.3).loss);

  // cos+ = 0.9, hard 0.5, random -0.5
  const std::vector<Embedding> hard = {unit(std::acos(0.5))};
  const std::vector<Embedding> rnd = {unit(std::acos(-0.5))};
  const double expected =
      -std::log(std::exp(0.9) / (std::exp(0.9) + std::exp(0.5) + std::exp(-0.5)));
  const double got = hard_contrastive_loss(unit(0), unit(std::acos(0.9)), hard, rnd, 1.0).loss;
  EXPECT_NEAR(got, expected, 1e-12);
  EXPECT_NEAR(got, 0.650718, 1e-6);

  const std::vector<Embedding> twice = {hard[0], hard[0]};
  EXPECT_GT(hard_contrastive_loss(unit(0), unit(std::acos(0.9)), twice, rnd, 1.0).loss, got);

  const auto none = hard_contrastive_loss(q, p, {}, {}, 1.0);
  EXPECT_EQ(none.loss, 0.0);
  EXPECT_TRUE(none.flagged);
}

namespace {

LossComponents random_components(Rng& rng) {
  LossComponents c;
  for (LossOutput* o : {&c.nce_mrl, &c.cosent, &c.micl, &c.late_fusion}) {
    o->loss = rng.uniform(0, 3);
    o->grad["query"] = omniembed::testing::random_vector(rng, 4);
    o->grad["log_tau"] = {rng.uniform(-1, 1)};
  }
  c.cosent.grad["sim/a"] = {rng.uniform(-1, 1)};
  return c;
}

}  // namespace

TEST(Combined, Examples) {
  Rng rng(56);
  const auto c = random_components(rng);
  const auto plain = combined_loss(c, LossParams{0, 0, 0});
  EXPECT_EQ(plain.loss, c.nce_mrl.loss);
  EXPECT_EQ(plain.grad.at("query"), c.nce_mrl.grad.at("query"));

  EXPECT_EQ(combined_loss(LossComponents{}, LossParams{}).loss, 0.0);

  const LossParams w{0.7, 0.2, 0.3};
  const auto r = combined_loss(c, w);
  EXPECT_NEAR(r.loss, c.nce_mrl.loss + 0.7 * c.cosent.loss + 0.2 * c.micl.loss + 0.3 * c.late_fusion.loss, 1e-12);
  for (std::size_t i = 0; i < 4; ++i) {
    const double hand = c.nce_mrl.grad.at("query")[i] + 0.7 * c.cosent.grad.at("query")[i] +
                        0.2 * c.micl.grad.at("query")[i] + 0.3 * c.late_fusion.grad.at("query")[i];
    EXPECT_NEAR(r.grad.at("query")[i], hand, 1e-12);
  }
  EXPECT_NEAR(r.grad.at("sim/a")[0], 0.7 * c.cosent.grad.at("sim/a")[0], 1e-15);
  EXPECT_THROW(combined_loss(c, LossParams{NAN, 0, 0}), Error);
}

TEST(Combined, GradientLinearity) {
  Rng rng(57);
  for (int t = 0; t < 50; ++t) {
    const auto c = random_components(rng);
    const double s = rng.uniform(0, 2);
    LossComponents a = c, b = c;
    b.nce_mrl = LossOutput{};
    a.cosent = LossOutput{};
    const LossParams w{s, 0.1, 0.1};
    // L(c) with cosent weight s = L_a + s * L_cosent
    const auto whole = combined_loss(c, w);
    auto split = combined_loss(a, w);
    accumulate(split.grad, c.cosent.grad, s);
    for (const auto& [key, g] : whole.grad)
      for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], split.grad.at(key)[i], 1e-10);
  }
}

TEST(FiniteDiff, LinearIsExact) {
  Rng rng(58);
  const auto c = omniembed::testing::random_vector(rng, 8);
  LossFunction fn = [c](const TensorMap& t) {
    LossOutput o;
    o.loss = dot(c, t.at("x"));
    o.grad["x"] = c;
    return o;
  };
  const auto r = finite_diff_check(fn, {{"x", omniembed::testing::random_vector(rng, 8)}});
  EXPECT_LT(r.max_rel_error, 1e-10);
  EXPECT_EQ(r.coordinates, 8u);
}

TEST(FiniteDiff, DetectsWrongGradient) {
  LossFunction fn = [](const TensorMap& t) {
    LossOutput o;
    o.loss = t.at("x")[0] * t.at("x")[0];
    o.grad["x"] = {t.at("x")[0]};  // missing factor 2
    return o;
  };
  EXPECT_GT(finite_diff_check(fn, {{"x", {1.5}}}).max_rel_error, 0.4);
}

TEST(FiniteDiff, NonFiniteLossThrows) {
  LossFunction fn = [](const TensorMap&) {
    LossOutput o;
    o.loss = NAN;
    return o;
  };
  EXPECT_THROW(finite_diff_check(fn, {{"x", {1.0}}}), Error);
}

TEST(Certification, DefaultSeedPassesEveryLoss) {
  const auto cert = certify_gradients(50, 8, 0);
  ASSERT_EQ(cert.entries.size(), 8u);
  for (const auto& e : cert.entries) {
    EXPECT_EQ(e.instances, 50u);
    EXPECT_LT(e.max_rel_error, 1e-4) << e.loss << " worst " << e.worst_key;
  }
  EXPECT_TRUE(cert.passed());
}

// Other seeds occasionally produce a train_step coordinate that cancels to
// ~1e-8, below what central differences resolve to 1e-4 relative. Those are
// excluded here through the diagnostic floor; everything else must hold.
TEST(Certification, OtherSeedsOnResolvableCoordinates) {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const auto cert = certify_gradients(20, 6, seed, kGradCheckStep, 1e-6);
    for (const auto& e : cert.entries) EXPECT_LT(e.max_rel_error, 1e-4) << "seed " << seed << " " << e.loss;
  }
}
