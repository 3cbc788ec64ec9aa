#include <cmath>
#include <map>

#include <gtest/gtest.h>

#include "omniembed/synth.hpp"
#include "omniembed/trainer.hpp"
#include "support.hpp"

using namespace omniembed;
using omniembed::testing::random_vector;

namespace {

// Encoder with every raw dim equal to d, identity projections and mixing,
// zero instruction table and gate.
ToyEncoder identity_encoder(std::size_t d) {
  EncoderDims dims{ModalityDims{d, d, d}, d, 1};
  EncoderParams p;
  for (auto& m : p.projection) {
    m = Matrix(d, d);
    for (std::size_t i = 0; i < d; ++i) m(i, i) = 1.0;
  }
  p.mixing = p.projection[0];
  p.instructions = Matrix(1, d);
  p.gate = LateFusionGate::zeros(d);
  p.log_tau = {0.0};
  return ToyEncoder::from_params(dims, p, {"default"});
}

ItemRecord record(const std::string& id, std::map<Modality, Vector> features) {
  ItemRecord r;
  r.id = id;
  r.features = std::move(features);
  return r;
}

// Small random encoder and records of every modality.
struct Fixture {
  EncoderDims dims{ModalityDims{5, 3, 4}, 8, 2};
  ToyEncoder enc;
  std::vector<ItemRecord> items;

  explicit Fixture(std::uint64_t seed, std::size_t n_items = 8) {
    enc = ToyEncoder::initialize(dims, {"default"}, seed, {0.5});
    Rng rng(seed + 100);
    for (auto& x : enc.params().gate.w.values()) x = 0.3 * rng.normal();
    for (std::size_t i = 0; i < n_items; ++i)
      items.push_back(record("i" + std::to_string(i), {{Modality::vision, random_vector(rng, 5)},
                                                        {Modality::audio, random_vector(rng, 3)},
                                                        {Modality::text, random_vector(rng, 4)}}));
  }

  Batch batch(std::size_t pairs) const {
    Batch b;
    b.spec.name = "toy";
    b.spec.patterns = {Pattern::OOC, Pattern::ITC};
    b.spec.instruction_id = 1;
    for (std::size_t i = 0; i < pairs; ++i) b.examples.push_back({&items[2 * i], &items[2 * i + 1], {}, {}});
    return b;
  }
};

const MrlDims kMrl{std::vector<std::size_t>{4, 8}};

}  // namespace

TEST(Forward, Examples) {
  const std::size_t d = 4;
  auto zero = identity_encoder(d);
  for (auto& [_, values, __] : zero.params().tensors()) std::fill(values.begin(), values.end(), 0.0);
  const auto rec = record("a", {{Modality::vision, Vector(d, 0.0)}, {Modality::text, Vector(d, 0.0)}});
  for (double x : forward(rec, 0, zero).n_m) EXPECT_EQ(x, 0.0);

  const auto id = identity_encoder(d);
  const Vector t{0.3, -1.2, 2.0, 0.0};
  const auto only_text = forward(record("t", {{Modality::text, t}}), std::nullopt, id);
  for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(only_text.n_m[k], std::tanh(t[k]), 1e-15);
  ASSERT_TRUE(only_text.n_t.has_value());
  EXPECT_FALSE(only_text.n_v.has_value());

  const Vector v{1.0, 0.5, -0.5, 3.0};
  const auto both = forward(record("vt", {{Modality::vision, v}, {Modality::text, t}}), std::nullopt, id);
  for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(both.n_m[k], 0.5 * (std::tanh(v[k]) + std::tanh(t[k])), 1e-15);
  for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR((*both.v)[k], std::tanh(v[k]), 1e-15);

  EXPECT_THROW(forward(record("none", {}), 0, id), Error);
  EXPECT_THROW(forward(record("bad", {{Modality::text, Vector(d + 1, 1.0)}}), 0, id), Error);
}

TEST(Forward, OutputInOpenUnitCube) {
  Fixture f(1, 40);
  for (const auto& rec : f.items)
    for (double x : forward(rec, 0, f.enc).n_m) {
      EXPECT_GT(x, -1.0);
      EXPECT_LT(x, 1.0);
    }
}

TEST(DrawDataset, Examples) {
  Rng rng(60);
  const std::vector<double> one = {1, 0, 0};
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(draw_dataset(one, rng), 0u);

  const std::vector<double> w = {0.7, 0.3};
  int zeros = 0;
  for (int i = 0; i < 10000; ++i) zeros += draw_dataset(w, rng) == 0;
  EXPECT_GE(zeros, 6800);
  EXPECT_LE(zeros, 7200);

  const std::vector<double> uniform(4, 0.25);
  std::vector<int> counts(4, 0);
  for (int i = 0; i < 10000; ++i) ++counts[draw_dataset(uniform, rng)];
  for (int c : counts) {
    EXPECT_GE(c, 2300);
    EXPECT_LE(c, 2700);
  }
}

TEST(DrawDataset, InvalidWeightsThrow) {
  Rng rng(61);
  EXPECT_THROW(draw_dataset(std::vector<double>{0.5, 0.4}, rng), Error);
  EXPECT_THROW(draw_dataset(std::vector<double>{1.5, -0.5}, rng), Error);
  EXPECT_THROW(draw_dataset(std::vector<double>{}, rng), Error);
}

TEST(DrawDataset, FrequenciesWithinThreeSigma) {
  Rng gen(62);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t k = 2 + gen.uniform_index(6);
    std::vector<double> w(k);
    double sum = 0;
    for (auto& x : w) sum += x = gen.uniform(0.01, 1.0);
    for (auto& x : w) x /= sum;
    // renormalise the last entry so the sum is 1 to within rounding
    double head = 0;
    for (std::size_t i = 0; i + 1 < k; ++i) head += w[i];
    w.back() = 1.0 - head;

    Rng rng(1000 + trial);
    const std::size_t steps = 20000;
    std::vector<double> counts(k, 0.0);
    for (std::size_t s = 0; s < steps; ++s) ++counts[draw_dataset(w, rng)];
    for (std::size_t i = 0; i < k; ++i) {
      const double band = 3.0 * std::sqrt(w[i] * (1 - w[i]) / steps);
      EXPECT_LE(std::abs(counts[i] / steps - w[i]), band) << "trial " << trial << " dataset " << i;
    }
  }
}

TEST(LrSchedule, Examples) {
  OptimizerConfig cfg;
  cfg.warmup_steps = 100;
  cfg.total_steps = 1000;
  EXPECT_EQ(lr_schedule(0, cfg), 0.0);
  EXPECT_EQ(lr_schedule(100, cfg), cfg.lr_max);
  EXPECT_EQ(lr_schedule(1000, cfg), cfg.lr_min);
  EXPECT_NEAR(lr_schedule(50, cfg), cfg.lr_max / 2, 1e-20);
  EXPECT_NEAR(lr_schedule(550, cfg), (cfg.lr_max + cfg.lr_min) / 2, 1e-18);
}

TEST(LrSchedule, MonotoneAndBoundedAfterWarmup) {
  Rng rng(63);
  for (int t = 0; t < 50; ++t) {
    OptimizerConfig cfg;
    cfg.lr_max = rng.uniform(0.01, 1.0);
    cfg.lr_min = cfg.lr_max * rng.uniform(0, 1);
    cfg.warmup_steps = rng.uniform_index(50);
    cfg.total_steps = cfg.warmup_steps + 1 + rng.uniform_index(500);
    double prev = INFINITY;
    for (std::size_t s = cfg.warmup_steps; s <= cfg.total_steps + 5; ++s) {
      const double lr = lr_schedule(s, cfg);
      EXPECT_LE(lr, prev);
      EXPECT_GE(lr, cfg.lr_min);
      EXPECT_LE(lr, cfg.lr_max);
      prev = lr;
    }
  }
}

TEST(TrainStep, ZeroLrLeavesParametersUnchanged) {
  Fixture f(64);
  OptimizerConfig cfg;
  cfg.lr_max = cfg.lr_min = 0.0;
  MomentumOptimizer opt(cfg);
  const auto before = f.enc.params().to_tensor_map();
  train_step(f.batch(3), f.enc, opt, kMrl, LossParams{});
  EXPECT_EQ(f.enc.params().to_tensor_map(), before);
}

TEST(TrainStep, SeparableBatchLossDecreases) {
  Fixture f(65);
  const auto batch = f.batch(2);
  const double before = evaluate_batch(batch, f.enc, kMrl, LossParams{}).total;
  OptimizerConfig cfg;
  cfg.lr_max = cfg.lr_min = 0.05;
  MomentumOptimizer opt(cfg);
  train_step(batch, f.enc, opt, kMrl, LossParams{});
  EXPECT_LT(evaluate_batch(batch, f.enc, kMrl, LossParams{}).total, before);
}

TEST(TrainStep, ClippedNormNeverExceedsLimit) {
  Rng rng(66);
  for (int t = 0; t < 20; ++t) {
    Fixture f(200 + t);
    OptimizerConfig cfg;
    cfg.lr_max = cfg.lr_min = 0.1;
    cfg.clip_norm = rng.uniform(1e-3, 2.0);
    MomentumOptimizer opt(cfg);
    for (int s = 0; s < 3; ++s) {
      const auto m = train_step(f.batch(4), f.enc, opt, kMrl, LossParams{0, 0.5, 0.5});
      EXPECT_LE(m.clipped_grad_norm, cfg.clip_norm + 1e-9);
      EXPECT_NEAR(m.clipped_grad_norm, std::min(m.grad_norm, cfg.clip_norm), 1e-12);
    }
  }
}

TEST(TrainStep, FullCompositionMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Fixture f(300 + seed, 4);
    const auto fn = batch_loss_function(f.batch(2), f.enc, kMrl, LossParams{1, 0.5, 0.5});
    const auto r = finite_diff_check(fn, f.enc.params().to_tensor_map());
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed << " worst " << r.worst_key;
  }
}

TEST(TrainStep, GradedBatchTrainsOrdering) {
  Fixture f(67);
  Batch b = f.batch(3);
  b.graded = true;
  for (std::size_t i = 0; i < 3; ++i) b.examples[i].score = 0.1 * static_cast<double>(i);
  const auto r = evaluate_batch(b, f.enc, kMrl, LossParams{});
  EXPECT_GT(r.cosent, 0.0);
  EXPECT_EQ(r.nce_mrl, 0.0);
  const auto fn = batch_loss_function(b, f.enc, kMrl, LossParams{});
  EXPECT_LT(finite_diff_check(fn, f.enc.params().to_tensor_map()).max_rel_error, 1e-4);

  b.examples[0].score.reset();
  EXPECT_THROW(evaluate_batch(b, f.enc, kMrl, LossParams{}), Error);
}

TEST(TrainStep, EmptyBatchThrows) {
  Fixture f(68);
  MomentumOptimizer opt(OptimizerConfig{});
  EXPECT_THROW(train_step(Batch{}, f.enc, opt, kMrl, LossParams{}), Error);
}

TEST(StagePlan, ValidationNamesTheField) {
  StagePlan plan;
  Stage s;
  s.weights = {0.5, 0.5};
  plan.stages = {s};
  EXPECT_NO_THROW(plan.validate(2));
  try {
    plan.validate(3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::config);
    EXPECT_EQ(e.path(), "stages[0].weights");
  }
  plan.stages[0].steps = 0;
  try {
    plan.validate(2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.path(), "stages[0].steps");
  }
  EXPECT_THROW(StagePlan{}.validate(1), Error);
}

namespace {

// Two datasets over a tiny synthetic corpus.
struct SmallCorpus {
  SynthData data;
  std::vector<TrainingDataset> datasets;

  explicit SmallCorpus(std::size_t clusters = 4, std::size_t per_cluster = 20) {
    SynthSpec spec;
    spec.n_clusters = clusters;
    spec.items_per_cluster = per_cluster;
    spec.heldout_pairs = 10;
    spec.graded_pairs = 10;
    spec.users = 4;
    spec.heldout_users = 1;
    spec.dims = ModalityDims{5, 3, 4};
    data = gen_synthetic(spec, 3);
    std::map<std::string, const ItemRecord*> by_id;
    for (const auto& r : data.items) by_id[r.id] = &r;
    TrainingDataset omni, itc;
    omni.spec.name = "omni";
    itc.spec.name = "itc";
    itc.spec.patterns = {Pattern::ITC};
    itc.spec.instruction_id = 1;
    for (const auto& p : data.train_pairs) {
      omni.pairs.push_back({by_id.at(p.query), by_id.at(p.target), {}});
      itc.pairs.push_back({by_id.at(p.query), by_id.at(p.target), {}});
    }
    datasets = {omni, itc};
  }
};

StagePlan two_stage_plan(std::uint64_t seed) {
  StagePlan plan;
  plan.mrl = MrlDims({4, 8});
  plan.seed = seed;
  Stage a;
  a.name = "diverse";
  a.weights = {0.8, 0.2};
  a.steps = 60;
  a.batch_size = 16;
  a.optimizer.lr_max = 0.1;
  a.optimizer.lr_min = 0.01;
  a.optimizer.warmup_steps = 5;
  Stage b = a;
  b.name = "hard";
  b.weights = {0.0, 1.0};
  b.steps = 20;
  b.hard_negative = true;
  b.hard_per_query = 4;
  plan.stages = {a, b};
  return plan;
}

}  // namespace

TEST(RunPlan, ZeroWeightNeverSampledAndStagesProgress) {
  SmallCorpus c;
  Fixture f(69);
  auto enc = f.enc;
  const auto reports = run_plan(two_stage_plan(5), c.datasets, enc);
  ASSERT_EQ(reports.size(), 2u);
  EXPECT_EQ(reports[1].draws[0], 0u);
  EXPECT_EQ(reports[1].draws[1], 20u);
  EXPECT_EQ(reports[0].draws[0] + reports[0].draws[1], 60u);
  EXPECT_FALSE(reports[1].mining.empty());
  EXPECT_TRUE(reports[0].mining.empty());
}

// Long enough a first stage that the encoder has learned the easy structure
// before hard negatives arrive.
TEST(RunPlan, SecondStageStartsBelowFirst) {
  SmallCorpus c(8, 60);
  auto enc = ToyEncoder::initialize(EncoderDims{ModalityDims{5, 3, 4}, 16, 2}, {"default"}, 77, {0.07});
  auto plan = two_stage_plan(6);
  plan.mrl = MrlDims({8, 16});
  plan.stages[0].steps = 300;
  plan.stages[0].batch_size = 32;
  plan.stages[1].batch_size = 32;
  const auto reports = run_plan(plan, c.datasets, enc);
  EXPECT_LE(reports[1].start_loss(), reports[0].start_loss());
}

TEST(RunPlan, IdenticalSeedsGiveIdenticalCurves) {
  SmallCorpus c;
  Fixture f(70);
  auto a = f.enc, b = f.enc;
  const auto ra = run_plan(two_stage_plan(9), c.datasets, a);
  const auto rb = run_plan(two_stage_plan(9), c.datasets, b);
  for (std::size_t s = 0; s < ra.size(); ++s) EXPECT_EQ(ra[s].losses, rb[s].losses);
  EXPECT_EQ(a.params().to_tensor_map(), b.params().to_tensor_map());
}

TEST(Seq2Item, Examples) {
  Fixture f(71);
  const auto& target = f.items[0];
  const std::vector<const ItemRecord*> one = {&target};
  const auto t = embed(f.enc, target, target.modalities(), 0);
  EXPECT_NEAR(cosine(sequence_embedding(f.enc, one, 0), t), 1.0, 1e-12);

  const std::vector<const ItemRecord*> ten(10, &target);
  const auto pooled = sequence_embedding(f.enc, ten, 0);
  for (std::size_t k = 0; k < t.size(); ++k) EXPECT_NEAR(pooled[k], t[k], 1e-15);

  EXPECT_THROW(sequence_embedding(f.enc, {}, 0), Error);
  const std::vector<SequenceExample> bad = {{{}, &target}};
  EXPECT_THROW(seq2item_loss(bad, f.enc, 0, 0), Error);
}

TEST(Seq2Item, GradientMatchesFiniteDifferences) {
  Fixture f(72);
  const std::vector<SequenceExample> batch = {
      {{&f.items[0], &f.items[1]}, &f.items[2]}, {{&f.items[3]}, &f.items[4]}, {{&f.items[5], &f.items[6]}, &f.items[7]}};
  const auto enc = f.enc;
  LossFunction fn = [&](const TensorMap& tensors) {
    ToyEncoder probe = enc;
    probe.params().assign(tensors);
    auto grads = EncoderParams::zeros_like(probe.params());
    LossOutput o;
    o.loss = seq2item_loss(batch, probe, 0, 0, &grads);
    o.grad = grads.to_tensor_map();
    return o;
  };
  EXPECT_LT(finite_diff_check(fn, enc.params().to_tensor_map()).max_rel_error, 1e-4);
}

TEST(Id2Item, AlignmentExamples) {
  const Vector p{1.0, 2.0, -1.0};
  EXPECT_NEAR(id_alignment_loss(p, std::vector<Embedding>{p}).loss, 0.0, 1e-15);
  const Vector neg{-1.0, -2.0, 1.0};
  EXPECT_NEAR(id_alignment_loss(p, std::vector<Embedding>{p, neg}).loss, 1.0, 1e-15);
  EXPECT_THROW(id_alignment_loss(p, std::vector<Embedding>{}), Error);
  EXPECT_THROW(id_alignment_loss(p, std::vector<Embedding>{{1.0, 2.0}}), Error);
}

TEST(Id2Item, AuxWeightZeroIsAlignmentOnly) {
  Fixture f(73);
  Rng rng(74);
  for (auto& rec : f.items) rec.id_embeddings = {random_vector(rng, 3), random_vector(rng, 3)};
  DistillConfig cfg;
  cfg.mode = DistillMode::id2item;
  cfg.id_dim = 3;
  cfg.projection = Matrix(3, 8);
  for (auto& x : cfg.projection.values()) x = rng.normal();
  cfg.aux_weight = 0.0;
  const std::vector<const ItemRecord*> recs = {&f.items[0], &f.items[1]};
  const auto aux = f.batch(3);
  const auto m = id2item_loss(recs, &aux, cfg, f.enc);
  EXPECT_EQ(m.loss, m.alignment);

  cfg.aux_weight = 0.5;
  const auto with_aux = id2item_loss(recs, &aux, cfg, f.enc);
  EXPECT_GT(with_aux.aux, 0.0);
  EXPECT_NEAR(with_aux.loss, with_aux.alignment + 0.5 * with_aux.aux, 1e-12);

  cfg.projection = Matrix(3, 7);
  EXPECT_THROW(id2item_loss(recs, &aux, cfg, f.enc), Error);
}

TEST(Id2Item, StepReducesAlignment) {
  Fixture f(75);
  Rng rng(76);
  for (auto& rec : f.items) rec.id_embeddings = {random_vector(rng, 3)};
  DistillConfig cfg;
  cfg.mode = DistillMode::id2item;
  cfg.id_dim = 3;
  cfg.projection = Matrix(3, 8);
  for (auto& x : cfg.projection.values()) x = rng.normal();
  cfg.aux_weight = 0.0;
  std::vector<const ItemRecord*> recs;
  for (const auto& r : f.items) recs.push_back(&r);
  const double before = id2item_loss(recs, nullptr, cfg, f.enc).alignment;
  OptimizerConfig oc;
  oc.lr_max = oc.lr_min = 0.05;
  oc.total_steps = 50;
  MomentumOptimizer opt(oc);
  for (int s = 0; s < 50; ++s) id2item_step(recs, nullptr, cfg, f.enc, opt);
  EXPECT_LT(id2item_loss(recs, nullptr, cfg, f.enc).alignment, before);
}
