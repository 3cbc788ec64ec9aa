/// \file gradcheck.hpp
/// Finite-difference certification of every analytic gradient on random
/// small instances: each loss on its own, their weighted combination, and
/// the complete encoder + batch loss composition used by train_step.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "omniembed/core.hpp"
#include "omniembed/datasets.hpp"
#include "omniembed/encoder.hpp"
#include "omniembed/losses.hpp"
#include "omniembed/rng.hpp"
#include "omniembed/trainer.hpp"

namespace omniembed {

struct GradCertEntry {
  std::string loss;
  std::size_t instances = 0;
  double max_rel_error = 0.0;
  std::string worst_key;
};

struct GradCertification {
  double threshold = 1e-4;
  std::vector<GradCertEntry> entries;
  bool passed() const {
    for (const auto& e : entries)
      if (!(e.max_rel_error < threshold)) return false;
    return true;
  }
};

namespace detail {

/// Entries are +-U(0.5, 1.5). Gaussian draws occasionally land near zero,
/// and products of such entries give gradient coordinates around 1e-7 whose
/// central difference is dominated by rounding (about eps * |L| / h), which
/// then dwarfs the relative-error floor.
inline Vector random_vec(Rng& rng, std::size_t n) {
  Vector v(n);
  for (auto& x : v) x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.5, 1.5);
  return v;
}

/// A vector whose entries differ from `base` by +-U(0.5, 1.5), keeping the
/// gate's (v - n_m) factor away from zero.
inline Vector offset_vec(Rng& rng, const Vector& base) {
  Vector v = random_vec(rng, base.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += base[i];
  return v;
}

inline double tau_of(const TensorMap& t) { return std::exp(t.at("log_tau")[0]); }

/// Scalar probe upstream . fused, so the gate can be checked on its own.
inline LossOutput fused_projection(std::span<const double> v, std::span<const double> n_m, const LateFusionGate& gate,
                                   std::span<const double> upstream) {
  auto r = late_fusion(v, n_m, gate, upstream);
  LossOutput out;
  out.loss = dot(upstream, r.fused);
  out.grad = std::move(r.grad);
  return out;
}

/// Random encoder + batch for the composition check: two examples under
/// OOC and ITC, one hard negative, shared dim `d`.
struct CompositionInstance {
  std::vector<ItemRecord> records;
  Batch batch;
  ToyEncoder enc;
  MrlDims mrl{std::vector<std::size_t>{1}};
};

inline CompositionInstance composition_instance(Rng& rng, std::size_t d, bool graded) {
  CompositionInstance inst;
  EncoderDims dims{ModalityDims{5, 3, 4}, d, 2};
  inst.enc = ToyEncoder::initialize(dims, {"t"}, rng.next_u64(), {0.5 + 0.5 * rng.uniform()});
  // Non-zero but unsaturated gate so the late-fusion path is exercised.
  for (auto& x : inst.enc.params().gate.w.values()) x = 0.1 * rng.normal();
  for (auto& x : inst.enc.params().gate.b) x = 0.3 * rng.normal();
  for (int i = 0; i < 5; ++i) {
    ItemRecord r;
    r.id = "r" + std::to_string(i);
    r.features[Modality::vision] = random_vec(rng, 5);
    r.features[Modality::text] = random_vec(rng, 4);
    if (i % 2 == 0) r.features[Modality::audio] = random_vec(rng, 3);
    inst.records.push_back(std::move(r));
  }
  inst.batch.spec.name = "check";
  inst.batch.spec.patterns = {Pattern::OOC, Pattern::ITC};
  inst.batch.spec.instruction_id = 1;
  inst.batch.graded = graded;
  const auto& r = inst.records;
  inst.batch.examples.push_back({&r[0], &r[1], 0.9, {}});
  inst.batch.examples.push_back({&r[2], &r[3], 0.2, {}});
  if (!graded) inst.batch.examples[0].hard_negatives[Pattern::OOC] = {&r[4]};
  inst.mrl = MrlDims{std::vector<std::size_t>{d / 2, d}};
  return inst;
}

}  // namespace detail

/// Runs `instances` random checks per loss at dimension `dim` (>= 2).
inline GradCertification certify_gradients(std::size_t instances = 50, std::size_t dim = 8, std::uint64_t seed = 0,
                                           double h = kGradCheckStep, double floor = kGradCheckFloor) {
  if (dim < 2) throw Error(ErrorCode::invalid_argument, "certify_gradients: dim must be >= 2");
  Rng rng(seed);
  GradCertification cert;
  auto run = [&](const std::string& name, auto make) {
    GradCertEntry e{name, instances, 0.0, ""};
    for (std::size_t i = 0; i < instances; ++i) {
      auto [fn, inputs] = make();
      const auto r = finite_diff_check(fn, inputs, h, floor);
      if (r.max_rel_error > e.max_rel_error) {
        e.max_rel_error = r.max_rel_error;
        e.worst_key = r.worst_key;
      }
    }
    cert.entries.push_back(e);
  };
  const std::size_t d = dim;
  // Temperatures in [0.5, 1]: much colder softmaxes produce gradient
  // coordinates around e^-20 whose central difference drowns in rounding.
  auto log_tau = [&] { return Vector{std::log(0.5 + 0.5 * rng.uniform())}; };

  run("nce", [&] {
    TensorMap in{{"query", detail::random_vec(rng, d)}, {"positive", detail::random_vec(rng, d)}, {"log_tau", log_tau()}};
    for (int j = 0; j < 3; ++j) in["negative/" + std::to_string(j)] = detail::random_vec(rng, d);
    LossFunction fn = [](const TensorMap& t) {
      std::vector<Embedding> negs;
      for (int j = 0; j < 3; ++j) negs.push_back(t.at("negative/" + std::to_string(j)));
      return nce_loss(t.at("query"), t.at("positive"), negs, detail::tau_of(t));
    };
    return std::pair{fn, in};
  });

  run("nce_mrl", [&] {
    TensorMap in{{"query", detail::random_vec(rng, d)}, {"positive", detail::random_vec(rng, d)}, {"log_tau", log_tau()}};
    for (int j = 0; j < 3; ++j) in["negative/" + std::to_string(j)] = detail::random_vec(rng, d);
    const MrlDims dims(std::vector<std::size_t>{d / 4 ? d / 4 : 1, d / 2, d});
    LossFunction fn = [dims](const TensorMap& t) {
      std::vector<Embedding> negs;
      for (int j = 0; j < 3; ++j) negs.push_back(t.at("negative/" + std::to_string(j)));
      return nce_mrl_loss(t.at("query"), t.at("positive"), negs, dims, detail::tau_of(t));
    };
    return std::pair{fn, in};
  });

  run("cosent", [&] {
    TensorMap in{{"log_tau", log_tau()}};
    const std::size_t n = 4;
    for (std::size_t i = 0; i < n; ++i) in["sim/p" + std::to_string(i)] = Vector{rng.uniform(-1.0, 1.0)};
    std::vector<PairOrder> order;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < n; ++k)
        if (i != k && rng.bernoulli(0.4)) order.push_back({"p" + std::to_string(i), "p" + std::to_string(k)});
    if (order.empty()) order.push_back({"p0", "p1"});
    LossFunction fn = [order, n](const TensorMap& t) {
      std::vector<PairSimilarity> sims;
      for (std::size_t i = 0; i < n; ++i) sims.push_back({"p" + std::to_string(i), t.at("sim/p" + std::to_string(i))[0]});
      return cosent_loss(sims, order, detail::tau_of(t));
    };
    return std::pair{fn, in};
  });

  run("micl", [&] {
    TensorMap in{{"log_tau", log_tau()}};
    for (const char* who : {"query", "positive", "negative/0", "negative/1"})
      for (const char* view : {"n_v", "n_t"}) in[std::string(who) + "/" + view] = detail::random_vec(rng, d);
    LossFunction fn = [](const TensorMap& t) {
      auto views = [&](const std::string& who) {
        ModalViews mv;
        mv.n_v = t.at(who + "/n_v");
        mv.n_t = t.at(who + "/n_t");
        mv.n_m = *mv.n_v;
        return mv;
      };
      const std::vector<ModalViews> batch{views("negative/0"), views("negative/1")};
      return micl_loss(views("query"), views("positive"), batch, detail::tau_of(t));
    };
    return std::pair{fn, in};
  });

  run("late_fusion", [&] {
    TensorMap in{{"v", detail::random_vec(rng, d)}};
    in["n_m"] = detail::offset_vec(rng, in["v"]);
    Vector w = detail::random_vec(rng, d * 2 * d);
    for (auto& x : w) x *= 0.1;
    in["gate/W"] = w;
    in["gate/b"] = detail::random_vec(rng, d);
    const Vector upstream = detail::random_vec(rng, d);
    LossFunction fn = [upstream, d](const TensorMap& t) {
      LateFusionGate gate = LateFusionGate::zeros(d);
      std::copy(t.at("gate/W").begin(), t.at("gate/W").end(), gate.w.values().begin());
      gate.b = t.at("gate/b");
      return detail::fused_projection(t.at("v"), t.at("n_m"), gate, upstream);
    };
    return std::pair{fn, in};
  });

  run("hard_contrastive", [&] {
    TensorMap in{{"query", detail::random_vec(rng, d)}, {"positive", detail::random_vec(rng, d)}, {"log_tau", log_tau()}};
    for (int j = 0; j < 2; ++j) in["hard/" + std::to_string(j)] = detail::random_vec(rng, d);
    for (int j = 0; j < 2; ++j) in["random/" + std::to_string(j)] = detail::random_vec(rng, d);
    LossFunction fn = [](const TensorMap& t) {
      std::vector<Embedding> hard, random;
      for (int j = 0; j < 2; ++j) hard.push_back(t.at("hard/" + std::to_string(j)));
      for (int j = 0; j < 2; ++j) random.push_back(t.at("random/" + std::to_string(j)));
      return hard_contrastive_loss(t.at("query"), t.at("positive"), hard, random, detail::tau_of(t));
    };
    return std::pair{fn, in};
  });

  run("combined", [&] {
    // One shared temperature; each component reads its own keys.
    TensorMap in{{"query", detail::random_vec(rng, d)}, {"positive", detail::random_vec(rng, d)}, {"log_tau", log_tau()}};
    for (int j = 0; j < 2; ++j) in["negative/" + std::to_string(j)] = detail::random_vec(rng, d);
    for (int i = 0; i < 3; ++i) in["sim/p" + std::to_string(i)] = Vector{rng.uniform(-1.0, 1.0)};
    in["v"] = detail::random_vec(rng, d);
    in["n_m"] = detail::offset_vec(rng, in["v"]);
    Vector w = detail::random_vec(rng, d * 2 * d);
    for (auto& x : w) x *= 0.1;
    in["gate/W"] = w;
    in["gate/b"] = detail::random_vec(rng, d);
    const Vector upstream = detail::random_vec(rng, d);
    const LossParams params{rng.uniform(0.1, 2.0), rng.uniform(0.05, 1.0), rng.uniform(0.05, 1.0)};
    const MrlDims dims(std::vector<std::size_t>{d / 2, d});
    LossFunction fn = [=](const TensorMap& t) {
      const double tau = detail::tau_of(t);
      std::vector<Embedding> negs{t.at("negative/0"), t.at("negative/1")};
      LossComponents c;
      c.nce_mrl = nce_mrl_loss(t.at("query"), t.at("positive"), negs, dims, tau);
      std::vector<PairSimilarity> sims;
      for (int i = 0; i < 3; ++i) sims.push_back({"p" + std::to_string(i), t.at("sim/p" + std::to_string(i))[0]});
      const std::vector<PairOrder> order{{"p0", "p1"}, {"p1", "p2"}, {"p0", "p2"}};
      c.cosent = cosent_loss(sims, order, tau);
      ModalViews q, p, n0, n1;
      q.n_v = t.at("query");
      p.n_v = t.at("positive");
      n0.n_v = t.at("negative/0");
      n1.n_v = t.at("negative/1");
      const std::vector<ModalViews> batch{n0, n1};
      auto micl = micl_loss(q, p, batch, tau);
      // micl keys its gradients by view; map them back onto the shared inputs.
      c.micl.loss = micl.loss;
      c.micl.grad["query"] = micl.grad["query/n_v"];
      c.micl.grad["positive"] = micl.grad["positive/n_v"];
      c.micl.grad["negative/0"] = micl.grad["negative/0/n_v"];
      c.micl.grad["negative/1"] = micl.grad["negative/1/n_v"];
      c.micl.grad["log_tau"] = micl.grad["log_tau"];
      LateFusionGate gate = LateFusionGate::zeros(d);
      std::copy(t.at("gate/W").begin(), t.at("gate/W").end(), gate.w.values().begin());
      gate.b = t.at("gate/b");
      c.late_fusion = detail::fused_projection(t.at("v"), t.at("n_m"), gate, upstream);
      return combined_loss(c, params);
    };
    return std::pair{fn, in};
  });

  run("train_step", [&] {
    auto inst = std::make_shared<detail::CompositionInstance>(detail::composition_instance(rng, d, rng.bernoulli(0.25)));
    const LossParams params{1.0, rng.uniform(0.05, 1.0), rng.uniform(0.05, 1.0)};
    auto inner = batch_loss_function(inst->batch, inst->enc, inst->mrl, params);
    // Keep the records alive for as long as the closure.
    LossFunction fn = [inst, inner](const TensorMap& t) { return inner(t); };
    return std::pair{fn, inst->enc.params().to_tensor_map()};
  });

  return cert;
}

}  // namespace omniembed
