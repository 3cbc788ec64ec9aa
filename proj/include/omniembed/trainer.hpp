/// \file trainer.hpp
/// Contrastive training of the toy encoder: batch loss with hand-derived
/// backprop, single-dataset-per-step sampling, progressive stage plans with
/// hard-negative mining at stage entry, and the seq2item / ID2item
/// distillation steps.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "omniembed/core.hpp"
#include "omniembed/datasets.hpp"
#include "omniembed/encoder.hpp"
#include "omniembed/error.hpp"
#include "omniembed/losses.hpp"
#include "omniembed/mining.hpp"
#include "omniembed/optimizer.hpp"
#include "omniembed/rng.hpp"

namespace omniembed {

/// (query, target) with an optional graded similarity. Records are owned
/// by the caller.
struct TrainingPair {
  const ItemRecord* query = nullptr;
  const ItemRecord* target = nullptr;
  std::optional<double> score;
};

struct TrainingDataset {
  DatasetSpec spec;
  std::vector<TrainingPair> pairs;
  std::string tau_key = "default";
  /// Graded datasets train the COSENT ordering objective from pair scores;
  /// the others train NCE with in-batch negatives.
  bool graded = false;
};

struct BatchExample {
  const ItemRecord* query = nullptr;
  const ItemRecord* target = nullptr;
  std::optional<double> score;
  std::map<Pattern, std::vector<const ItemRecord*>> hard_negatives;
};

/// A batch always comes from one dataset.
struct Batch {
  DatasetSpec spec;
  std::vector<BatchExample> examples;
  std::size_t tau_index = 0;
  bool graded = false;
};

struct BatchLoss {
  double total = 0.0;
  double nce_mrl = 0.0;
  double cosent = 0.0;
  double micl = 0.0;
  double late_fusion = 0.0;
  std::size_t anchors = 0;
  std::size_t flagged = 0;  // anchors without any negative
};

namespace detail {

struct EncodedPair {
  std::size_t example = 0;
  PatternView view;
};

inline std::span<const double> head(const Vector& v, std::size_t d) { return std::span<const double>(v).first(d); }
inline std::span<double> head(Vector& v, std::size_t d) { return std::span<double>(v).first(d); }

}  // namespace detail

/// Loss of one batch and, when `grads` is given, its gradient accumulated
/// into `grads`. Examples expand into one view pair per feasible pattern;
/// each pattern group contributes mean-over-anchor losses:
///
///   NCE summed over the nested prefixes (negatives: other targets of the
///   group plus the anchor's mined hard negatives), late-fusion NCE on the
///   gated output, and mICL inside the visual and text views. Graded
///   batches contribute COSENT over all score-ordered pairs instead.
inline BatchLoss evaluate_batch(const Batch& batch, const ToyEncoder& enc, const MrlDims& mrl, const LossParams& weights,
                                EncoderParams* grads = nullptr) {
  if (batch.examples.empty()) throw Error(ErrorCode::invalid_argument, "train_step: empty batch");
  mrl.validate_for(enc.dim());
  const std::size_t d = enc.dim();
  const double tau = enc.tau(batch.tau_index);
  const std::optional<std::size_t> instruction = batch.spec.instruction_id;

  std::map<Pattern, std::vector<detail::EncodedPair>> groups;
  for (std::size_t e = 0; e < batch.examples.size(); ++e) {
    const auto& ex = batch.examples[e];
    for (const auto& v : enumerate_patterns(*ex.query, *ex.target, batch.spec)) groups[v.pattern].push_back({e, v});
  }

  BatchLoss out;
  double dlog_tau = 0.0;
  for (const auto& [pattern, members] : groups) {
    const std::size_t n = members.size();
    const double inv_n = 1.0 / static_cast<double>(n);
    std::vector<ViewForward> fq, ft;
    std::vector<ViewGrad> gq(n, ViewGrad(d)), gt(n, ViewGrad(d));
    std::vector<std::vector<ViewForward>> fh(n);
    std::vector<std::vector<ViewGrad>> gh(n);
    std::set<std::string> group_targets;
    for (const auto& m : members) group_targets.insert(batch.examples[m.example].target->id);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& ex = batch.examples[members[i].example];
      fq.push_back(forward_view(enc, *ex.query, members[i].view.query, instruction));
      ft.push_back(forward_view(enc, *ex.target, members[i].view.target, instruction));
      if (batch.graded) continue;
      auto it = ex.hard_negatives.find(pattern);
      if (it == ex.hard_negatives.end()) continue;
      for (const auto* rec : it->second) {
        if (group_targets.count(rec->id)) continue;  // already an in-batch negative (or the positive)
        const auto views = pattern_views(pattern, ex.query->modalities().intersect(batch.spec.query_modalities),
                                         rec->modalities().intersect(batch.spec.target_modalities));
        if (!views) continue;
        fh[i].push_back(forward_view(enc, *rec, views->second, instruction));
        gh[i].emplace_back(d);
      }
    }

    if (batch.graded) {
      // COSENT over the group's pair cosines, ordered by the graded scores.
      std::vector<PairSimilarity> sims;
      std::vector<PairOrder> order;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& ex = batch.examples[members[i].example];
        if (!ex.score) throw Error(ErrorCode::invalid_argument, "train_step: graded example without a score");
        sims.push_back({std::to_string(i), cosine(fq[i].n_m, ft[i].n_m)});
      }
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n; ++k)
          if (*batch.examples[members[i].example].score > *batch.examples[members[k].example].score)
            order.push_back({std::to_string(i), std::to_string(k)});
      const auto r = cosent_loss(sims, order, tau);
      out.cosent += r.loss;
      out.anchors += n;
      if (grads) {
        for (std::size_t i = 0; i < n; ++i) {
          const double up = weights.cosent_weight * r.grad.at("sim/" + std::to_string(i))[0];
          cosine_backward(fq[i].n_m, ft[i].n_m, up, gq[i].n_m, gt[i].n_m);
        }
        dlog_tau += weights.cosent_weight * r.grad.at("log_tau")[0];
      }
    } else {
      Vector scores;
      for (std::size_t i = 0; i < n; ++i) {
        ++out.anchors;
        // Negatives of anchor i: every other target of the group, then hard negatives.
        std::vector<std::pair<const ViewForward*, ViewGrad*>> negs;
        for (std::size_t j = 0; j < n; ++j)
          if (j != i) negs.emplace_back(&ft[j], &gt[j]);
        for (std::size_t k = 0; k < fh[i].size(); ++k) negs.emplace_back(&fh[i][k], &gh[i][k]);
        if (negs.empty()) {
          ++out.flagged;
          continue;
        }
        scores.assign(negs.size() + 1, 0.0);

        for (std::size_t dd : mrl) {
          scores[0] = cosine(detail::head(fq[i].n_m, dd), detail::head(ft[i].n_m, dd));
          for (std::size_t j = 0; j < negs.size(); ++j)
            scores[j + 1] = cosine(detail::head(fq[i].n_m, dd), detail::head(negs[j].first->n_m, dd));
          const auto r = detail::nce_from_scores(scores, tau);
          out.nce_mrl += r.loss * inv_n;
          if (!grads) continue;
          cosine_backward(detail::head(fq[i].n_m, dd), detail::head(ft[i].n_m, dd), r.dscores[0] * inv_n,
                          detail::head(gq[i].n_m, dd), detail::head(gt[i].n_m, dd));
          for (std::size_t j = 0; j < negs.size(); ++j)
            cosine_backward(detail::head(fq[i].n_m, dd), detail::head(negs[j].first->n_m, dd), r.dscores[j + 1] * inv_n,
                            detail::head(gq[i].n_m, dd), detail::head(negs[j].second->n_m, dd));
          dlog_tau += r.dlog_tau * inv_n;
        }

        if (weights.late_fusion_weight != 0.0 && (fq[i].gate || ft[i].gate)) {
          scores[0] = cosine(fq[i].fused(), ft[i].fused());
          for (std::size_t j = 0; j < negs.size(); ++j) scores[j + 1] = cosine(fq[i].fused(), negs[j].first->fused());
          const auto r = detail::nce_from_scores(scores, tau);
          out.late_fusion += r.loss * inv_n;
          if (grads) {
            const double w = weights.late_fusion_weight * inv_n;
            cosine_backward(fq[i].fused(), ft[i].fused(), r.dscores[0] * w, gq[i].fused, gt[i].fused);
            for (std::size_t j = 0; j < negs.size(); ++j)
              cosine_backward(fq[i].fused(), negs[j].first->fused(), r.dscores[j + 1] * w, gq[i].fused,
                              negs[j].second->fused);
            dlog_tau += r.dlog_tau * w;
          }
        }

        if (weights.micl_weight != 0.0) {
          // Same-modality in-batch negatives only.
          auto modal_term = [&](std::optional<std::size_t> ViewForward::*token, Vector ViewGrad::*slot) {
            if (!(fq[i].*token) || !(ft[i].*token)) return;
            const auto& qh = fq[i].tokens[*(fq[i].*token)].hidden;
            std::vector<std::size_t> owners;
            for (std::size_t j = 0; j < n; ++j)
              if (j != i && ft[j].*token) owners.push_back(j);
            if (owners.empty()) return;
            Vector s(owners.size() + 1);
            s[0] = cosine(qh, ft[i].tokens[*(ft[i].*token)].hidden);
            for (std::size_t k = 0; k < owners.size(); ++k)
              s[k + 1] = cosine(qh, ft[owners[k]].tokens[*(ft[owners[k]].*token)].hidden);
            const auto r = detail::nce_from_scores(s, tau);
            out.micl += r.loss * inv_n;
            if (!grads) return;
            const double w = weights.micl_weight * inv_n;
            cosine_backward(qh, ft[i].tokens[*(ft[i].*token)].hidden, r.dscores[0] * w, gq[i].*slot, gt[i].*slot);
            for (std::size_t k = 0; k < owners.size(); ++k) {
              const auto j = owners[k];
              cosine_backward(qh, ft[j].tokens[*(ft[j].*token)].hidden, r.dscores[k + 1] * w, gq[i].*slot, gt[j].*slot);
            }
            dlog_tau += r.dlog_tau * w;
          };
          modal_term(&ViewForward::vision_token, &ViewGrad::n_v);
          modal_term(&ViewForward::text_token, &ViewGrad::n_t);
        }
      }
    }

    if (grads) {
      for (std::size_t i = 0; i < n; ++i) {
        backward_view(enc, fq[i], gq[i], *grads);
        backward_view(enc, ft[i], gt[i], *grads);
        for (std::size_t k = 0; k < fh[i].size(); ++k) backward_view(enc, fh[i][k], gh[i][k], *grads);
      }
    }
  }
  if (grads) grads->log_tau.at(batch.tau_index) += dlog_tau;
  out.total = out.nce_mrl + weights.cosent_weight * out.cosent + weights.micl_weight * out.micl +
              weights.late_fusion_weight * out.late_fusion;
  return out;
}

/// The batch loss as a function of every encoder tensor, for finite
/// differences over the whole composition.
inline LossFunction batch_loss_function(const Batch& batch, const ToyEncoder& enc, const MrlDims& mrl,
                                        const LossParams& weights) {
  return [batch, enc, mrl, weights](const TensorMap& tensors) {
    ToyEncoder probe = enc;
    probe.params().assign(tensors);
    auto grads = EncoderParams::zeros_like(probe.params());
    LossOutput out;
    out.loss = evaluate_batch(batch, probe, mrl, weights, &grads).total;
    out.grad = grads.to_tensor_map();
    return out;
  };
}

struct StepMetrics {
  BatchLoss loss;
  double grad_norm = 0.0;
  double clipped_grad_norm = 0.0;
  double lr = 0.0;
};

inline std::vector<ParamSlot> parameter_slots(EncoderParams& values, const EncoderParams& grads) {
  std::vector<ParamSlot> slots;
  auto v = values.tensors();
  auto g = grads.tensors();
  for (std::size_t k = 0; k < v.size(); ++k)
    slots.push_back({std::get<0>(v[k]), std::get<1>(v[k]), std::get<1>(g[k]), std::get<2>(v[k])});
  return slots;
}

/// One optimisation step. A non-finite loss aborts the step before any
/// parameter is touched.
inline StepMetrics train_step(const Batch& batch, ToyEncoder& enc, MomentumOptimizer& opt, const MrlDims& mrl,
                              const LossParams& weights) {
  auto grads = EncoderParams::zeros_like(enc.params());
  StepMetrics m;
  m.loss = evaluate_batch(batch, enc, mrl, weights, &grads);
  if (!std::isfinite(m.loss.total)) throw Error(ErrorCode::numeric, "train_step: non-finite loss, step aborted");
  const auto slots = parameter_slots(enc.params(), grads);
  const auto info = opt.apply(slots);
  m.grad_norm = info.grad_norm;
  m.clipped_grad_norm = info.clipped_grad_norm;
  m.lr = info.lr;
  return m;
}

// ---------------------------------------------------------------------------
// Stochastic specialization

inline constexpr double kWeightSumTolerance = 1e-9;

inline void validate_weights(std::span<const double> weights) {
  if (weights.empty()) throw Error(ErrorCode::invalid_argument, "weights: empty");
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw Error(ErrorCode::invalid_argument, "weights: entries must be >= 0");
    sum += w;
  }
  if (std::abs(sum - 1.0) > kWeightSumTolerance)
    throw Error(ErrorCode::invalid_argument, "weights: must sum to 1 (got " + std::to_string(sum) + ")");
}

/// Categorical draw of the dataset that supplies the whole next batch.
/// Zero-weight entries are never returned.
inline std::size_t draw_dataset(std::span<const double> weights, Rng& rng) {
  validate_weights(weights);
  const double u = rng.uniform();
  double cum = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] == 0.0) continue;
    cum += weights[i];
    last = i;
    if (u < cum) return i;
  }
  return last;  // rounding left u above the cumulative sum
}

// ---------------------------------------------------------------------------
// Stage plans

struct Stage {
  std::string name;
  std::vector<double> weights;  // one per dataset passed to run_plan
  std::size_t steps = 1;
  std::size_t batch_size = 32;
  bool hard_negative = false;
  std::size_t hard_per_query = kDefaultHardNegativesPerQuery;
  LossParams loss;
  OptimizerConfig optimizer;  // total_steps is taken from `steps`
};

struct StagePlan {
  std::vector<Stage> stages;
  MrlDims mrl{std::vector<std::size_t>{16, 32, 64}};
  std::uint64_t seed = 0;
  std::size_t mining_cap = kDefaultNegativeCap;
  std::size_t workers = 1;

  void validate(std::size_t n_datasets) const {
    if (stages.empty()) throw Error(ErrorCode::config, "plan: no stages", "stages");
    for (std::size_t s = 0; s < stages.size(); ++s) {
      const auto& st = stages[s];
      const std::string path = "stages[" + std::to_string(s) + "]";
      if (st.steps == 0) throw Error(ErrorCode::config, "plan: steps must be >= 1", path + ".steps");
      if (st.batch_size == 0) throw Error(ErrorCode::config, "plan: batch_size must be >= 1", path + ".batch_size");
      if (st.weights.size() != n_datasets)
        throw Error(ErrorCode::config, "plan: one weight per dataset required", path + ".weights");
      try {
        validate_weights(st.weights);
      } catch (const Error& e) {
        throw Error(ErrorCode::config, e.what(), path + ".weights");
      }
      if (st.hard_per_query == 0)
        throw Error(ErrorCode::config, "plan: hard_per_query must be >= 1", path + ".hard_per_query");
      auto cfg = st.optimizer;
      cfg.total_steps = st.steps;
      try {
        cfg.validate();
      } catch (const Error& e) {
        throw Error(ErrorCode::config, e.what(), path + "." + e.path());
      }
    }
  }
};

struct MiningSummary {
  std::string dataset;
  Pattern pattern = Pattern::OOC;
  double lambda_star = 0.0;
  double f1 = 0.0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::size_t hard_negatives = 0;
};

struct StageReport {
  std::string name;
  std::vector<double> losses;
  std::vector<std::size_t> draws;  // batches per dataset
  std::vector<MiningSummary> mining;

  /// Mean loss of the first / last `window` steps.
  double start_loss(std::size_t window = 10) const {
    const auto w = std::min(window, losses.size());
    return w ? std::accumulate(losses.begin(), losses.begin() + static_cast<std::ptrdiff_t>(w), 0.0) / w : 0.0;
  }
  double final_loss(std::size_t window = 10) const {
    const auto w = std::min(window, losses.size());
    return w ? std::accumulate(losses.end() - static_cast<std::ptrdiff_t>(w), losses.end(), 0.0) / w : 0.0;
  }
};

/// Hard-negative pools for one dataset, per pattern.
struct DatasetPools {
  std::map<Pattern, HardNegativePool> pools;
  std::unordered_map<std::string, const ItemRecord*> targets;
};

/// Mines every pattern of a dataset with the current encoder: queries and
/// targets are embedded in the pattern's views and scored exhaustively.
inline DatasetPools mine_dataset(const TrainingDataset& ds, const ToyEncoder& enc, std::size_t m, std::size_t cap,
                                 std::uint64_t seed, std::size_t workers, std::vector<MiningSummary>* summary = nullptr) {
  DatasetPools out;
  const std::optional<std::size_t> instruction = ds.spec.instruction_id;
  for (auto pattern : ds.spec.patterns) {
    EmbeddingStore queries(enc.dim()), targets(enc.dim());
    PositivePairs positives;
    for (const auto& pair : ds.pairs) {
      const auto views = pattern_views(pattern, pair.query->modalities().intersect(ds.spec.query_modalities),
                                       pair.target->modalities().intersect(ds.spec.target_modalities));
      if (!views) continue;
      if (!queries.contains(pair.query->id))
        queries.add(pair.query->id, embed(enc, *pair.query, views->first, instruction));
      if (!targets.contains(pair.target->id))
        targets.add(pair.target->id, embed(enc, *pair.target, views->second, instruction));
      out.targets.emplace(pair.target->id, pair.target);
      positives.emplace_back(pair.query->id, pair.target->id);
    }
    if (positives.empty()) continue;
    const auto res = mine_hard_negatives(positives, queries, targets, m, cap, seed, workers);
    if (summary) {
      std::size_t hard = 0;
      for (const auto& [_, list] : res.pool.per_query) hard += list.size();
      summary->push_back({ds.spec.name, pattern, res.sweep.lambda_star, res.sweep.f1_at_star, res.positives,
                          res.negatives_sampled, hard});
    }
    out.pools.emplace(pattern, res.pool);
  }
  return out;
}

/// Uniform sample (without replacement) of `size` pairs of `ds`.
inline Batch sample_batch(const TrainingDataset& ds, std::size_t tau_index, std::size_t size, Rng& rng,
                          const DatasetPools* pools = nullptr) {
  if (ds.pairs.empty()) throw Error(ErrorCode::invalid_argument, "dataset '" + ds.spec.name + "' has no pairs");
  Batch batch;
  batch.spec = ds.spec;
  batch.tau_index = tau_index;
  batch.graded = ds.graded;
  std::vector<std::size_t> order(ds.pairs.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t take = std::min(size, order.size());
  for (std::size_t i = 0; i < take; ++i) std::swap(order[i], order[i + rng.uniform_index(order.size() - i)]);
  for (std::size_t i = 0; i < take; ++i) {
    const auto& p = ds.pairs[order[i]];
    BatchExample ex{p.query, p.target, p.score, {}};
    if (pools)
      for (const auto& [pattern, pool] : pools->pools)
        for (const auto& h : pool.of(p.query->id)) ex.hard_negatives[pattern].push_back(pools->targets.at(h.target));
    batch.examples.push_back(std::move(ex));
  }
  return batch;
}

using StageCallback = std::function<void(std::size_t stage, const StageReport&, const ToyEncoder&)>;

/// Runs the stages in order. Every step draws one dataset and trains on a
/// batch from it. Stages flagged hard_negative mine all their active
/// non-graded datasets once on entry with the encoder as it stands.
inline std::vector<StageReport> run_plan(const StagePlan& plan, std::span<const TrainingDataset> datasets,
                                         ToyEncoder& enc, const StageCallback& on_stage_end = {}) {
  plan.validate(datasets.size());
  plan.mrl.validate_for(enc.dim());
  std::vector<std::size_t> tau_index;
  for (const auto& ds : datasets) tau_index.push_back(enc.tau_index(ds.tau_key));

  Rng rng(plan.seed);
  std::vector<StageReport> reports;
  for (std::size_t s = 0; s < plan.stages.size(); ++s) {
    const auto& stage = plan.stages[s];
    StageReport report;
    report.name = stage.name;
    report.draws.assign(datasets.size(), 0);

    std::vector<std::optional<DatasetPools>> pools(datasets.size());
    if (stage.hard_negative)
      for (std::size_t k = 0; k < datasets.size(); ++k)
        if (stage.weights[k] > 0.0 && !datasets[k].graded)
          pools[k] = mine_dataset(datasets[k], enc, stage.hard_per_query, plan.mining_cap,
                                  plan.seed ^ (0x9e3779b97f4a7c15ULL * (s + 1) + k), plan.workers, &report.mining);

    auto cfg = stage.optimizer;
    cfg.total_steps = stage.steps;
    MomentumOptimizer opt(cfg);
    for (std::size_t step = 0; step < stage.steps; ++step) {
      const auto k = draw_dataset(stage.weights, rng);
      ++report.draws[k];
      const auto batch =
          sample_batch(datasets[k], tau_index[k], stage.batch_size, rng, pools[k] ? &*pools[k] : nullptr);
      report.losses.push_back(train_step(batch, enc, opt, plan.mrl, stage.loss).loss.total);
    }
    if (on_stage_end) on_stage_end(s, report, enc);
    reports.push_back(std::move(report));
  }
  return reports;
}

// ---------------------------------------------------------------------------
// Distillation

enum class DistillMode { seq2item, id2item };

struct DistillConfig {
  DistillMode mode = DistillMode::seq2item;
  std::size_t seq_len = 10;
  std::size_t id_dim = 0;
  Matrix projection;  // id_dim x d, maps n_m into the ID-embedding space
  double aux_weight = 1.0;
  std::optional<std::size_t> instruction;
  std::size_t tau_index = 0;

  void validate(std::size_t d) const {
    if (seq_len == 0) throw Error(ErrorCode::config, "distill: seq_len must be >= 1", "seq_len");
    if (!(aux_weight >= 0.0)) throw Error(ErrorCode::config, "distill: aux_weight must be >= 0", "aux_weight");
    if (mode == DistillMode::id2item && (projection.rows() != id_dim || projection.cols() != d))
      throw Error(ErrorCode::dimension_mismatch, "distill: projection must be id_dim x d", "projection");
  }
};

struct SequenceExample {
  std::vector<const ItemRecord*> history;
  const ItemRecord* target = nullptr;
};

/// Mean of the history items' n_m embeddings.
inline Embedding sequence_embedding(const ToyEncoder& enc, std::span<const ItemRecord* const> history,
                                    std::optional<std::size_t> instruction) {
  if (history.empty()) throw Error(ErrorCode::invalid_argument, "sequence: empty history");
  std::vector<Embedding> rows;
  for (const auto* rec : history) rows.push_back(embed(enc, *rec, rec->modalities(), instruction));
  return mean_pool(rows);
}

struct DistillMetrics {
  double loss = 0.0;
  double alignment = 0.0;
  double aux = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
};

/// Sequence-to-item NCE: each pooled history must pick its own target out
/// of the batch's targets.
inline double seq2item_loss(std::span<const SequenceExample> batch, const ToyEncoder& enc,
                            std::optional<std::size_t> instruction, std::size_t tau_index,
                            EncoderParams* grads = nullptr) {
  if (batch.empty()) throw Error(ErrorCode::invalid_argument, "seq2item: empty batch");
  const std::size_t d = enc.dim();
  const double tau = enc.tau(tau_index);
  const std::size_t n = batch.size();
  const double inv_n = 1.0 / static_cast<double>(n);

  std::vector<std::vector<ViewForward>> fh(n);
  std::vector<Embedding> seq(n);
  std::vector<ViewForward> ft;
  for (std::size_t i = 0; i < n; ++i) {
    if (batch[i].history.empty()) throw Error(ErrorCode::invalid_argument, "seq2item: empty history");
    seq[i].assign(d, 0.0);
    for (const auto* rec : batch[i].history) {
      fh[i].push_back(forward_view(enc, *rec, rec->modalities(), instruction));
      axpy(1.0 / static_cast<double>(batch[i].history.size()), fh[i].back().n_m, seq[i]);
    }
    ft.push_back(forward_view(enc, *batch[i].target, batch[i].target->modalities(), instruction));
  }

  double loss = 0.0, dlog_tau = 0.0;
  std::vector<Vector> dseq(n, Vector(d, 0.0));
  std::vector<ViewGrad> gt(n, ViewGrad(d));
  Vector scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (n == 1) break;  // no negatives: loss 0
    scores[0] = cosine(seq[i], ft[i].n_m);
    for (std::size_t j = 0, c = 1; j < n; ++j)
      if (j != i) scores[c++] = cosine(seq[i], ft[j].n_m);
    const auto r = detail::nce_from_scores(scores, tau);
    loss += r.loss * inv_n;
    if (!grads) continue;
    cosine_backward(seq[i], ft[i].n_m, r.dscores[0] * inv_n, dseq[i], gt[i].n_m);
    for (std::size_t j = 0, c = 1; j < n; ++j)
      if (j != i) cosine_backward(seq[i], ft[j].n_m, r.dscores[c++] * inv_n, dseq[i], gt[j].n_m);
    dlog_tau += r.dlog_tau * inv_n;
  }
  if (grads) {
    for (std::size_t i = 0; i < n; ++i) {
      ViewGrad g(d);
      for (std::size_t k = 0; k < d; ++k) g.n_m[k] = dseq[i][k] / static_cast<double>(fh[i].size());
      for (const auto& f : fh[i]) backward_view(enc, f, g, *grads);
      backward_view(enc, ft[i], gt[i], *grads);
    }
    grads->log_tau.at(tau_index) += dlog_tau;
  }
  return loss;
}

inline DistillMetrics seq2item_step(std::span<const SequenceExample> batch, ToyEncoder& enc, MomentumOptimizer& opt,
                                    const DistillConfig& cfg) {
  cfg.validate(enc.dim());
  auto grads = EncoderParams::zeros_like(enc.params());
  DistillMetrics m;
  m.loss = seq2item_loss(batch, enc, cfg.instruction, cfg.tau_index, &grads);
  if (!std::isfinite(m.loss)) throw Error(ErrorCode::numeric, "seq2item_step: non-finite loss, step aborted");
  const auto info = opt.apply(parameter_slots(enc.params(), grads));
  m.grad_norm = info.grad_norm;
  m.lr = info.lr;
  return m;
}

/// Mean over the ID embeddings of 1 - cos(projected, id). Gradient under
/// key "projected".
inline LossOutput id_alignment_loss(std::span<const double> projected, std::span<const Embedding> ids) {
  if (ids.empty()) throw Error(ErrorCode::invalid_argument, "id2item: at least one ID embedding required");
  LossOutput out;
  auto& g = out.grad["projected"] = Vector(projected.size(), 0.0);
  Vector scratch(projected.size());
  const double inv = 1.0 / static_cast<double>(ids.size());
  for (const auto& id : ids) {
    if (id.size() != projected.size())
      throw Error(ErrorCode::dimension_mismatch, "id2item: ID embedding dim " + std::to_string(id.size()) +
                                                     " != projection dim " + std::to_string(projected.size()));
    out.loss += (1.0 - cosine(projected, id)) * inv;
    cosine_backward(projected, id, -inv, g, scratch);
  }
  return out;
}

/// Alignment of projected n_m with each record's ID embeddings (averaged
/// over records) plus aux_weight times the NCE loss of an auxiliary
/// item-to-item batch. `dprojection` receives the projection gradient.
inline DistillMetrics id2item_loss(std::span<const ItemRecord* const> records, const Batch* aux,
                                   const DistillConfig& cfg, const ToyEncoder& enc, EncoderParams* grads = nullptr,
                                   Matrix* dprojection = nullptr) {
  cfg.validate(enc.dim());
  if (records.empty()) throw Error(ErrorCode::invalid_argument, "id2item: no records");
  const std::size_t d = enc.dim();
  const double inv_n = 1.0 / static_cast<double>(records.size());
  DistillMetrics m;
  Vector projected(cfg.id_dim);
  for (const auto* rec : records) {
    const auto f = forward_view(enc, *rec, rec->modalities(), cfg.instruction);
    matvec(cfg.projection, f.n_m, projected);
    const auto r = id_alignment_loss(projected, rec->id_embeddings);
    m.alignment += r.loss * inv_n;
    if (!grads) continue;
    Vector dp = r.grad.at("projected");
    for (auto& x : dp) x *= inv_n;
    if (dprojection) outer_add(dp, f.n_m, *dprojection);
    ViewGrad g(d);
    matvec_transposed_add(cfg.projection, dp, g.n_m);
    backward_view(enc, f, g, *grads);
  }
  if (aux && cfg.aux_weight > 0.0) {
    const LossParams nce_only{0.0, 0.0, 0.0};
    const MrlDims full{std::vector<std::size_t>{d}};
    if (grads) {
      auto aux_grads = EncoderParams::zeros_like(enc.params());
      m.aux = evaluate_batch(*aux, enc, full, nce_only, &aux_grads).total;
      grads->add_scaled(aux_grads, cfg.aux_weight);
    } else {
      m.aux = evaluate_batch(*aux, enc, full, nce_only).total;
    }
  }
  m.loss = m.alignment + cfg.aux_weight * m.aux;
  return m;
}

/// One multi-task step; the projection is trained alongside the encoder.
inline DistillMetrics id2item_step(std::span<const ItemRecord* const> records, const Batch* aux, DistillConfig& cfg,
                                   ToyEncoder& enc, MomentumOptimizer& opt) {
  auto grads = EncoderParams::zeros_like(enc.params());
  Matrix dproj(cfg.projection.rows(), cfg.projection.cols());
  auto m = id2item_loss(records, aux, cfg, enc, &grads, &dproj);
  if (!std::isfinite(m.loss)) throw Error(ErrorCode::numeric, "id2item_step: non-finite loss, step aborted");
  auto slots = parameter_slots(enc.params(), grads);
  slots.push_back({"distill/projection", cfg.projection.values(), dproj.values(), true});
  const auto info = opt.apply(slots);
  m.grad_norm = info.grad_norm;
  m.lr = info.lr;
  return m;
}

// ---------------------------------------------------------------------------

/// Embeds each record in the view chosen by `view_of`.
inline EmbeddingStore embed_records(const ToyEncoder& enc, std::span<const ItemRecord* const> records,
                                    const std::function<ModalitySet(const ItemRecord&)>& view_of,
                                    std::optional<std::size_t> instruction) {
  EmbeddingStore store(enc.dim());
  for (const auto* rec : records) store.add(rec->id, embed(enc, *rec, view_of(*rec), instruction));
  return store;
}

}  // namespace omniembed
