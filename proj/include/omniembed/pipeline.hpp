/// \file pipeline.hpp
/// Command-level operations: each takes resolved inputs and returns the
/// result object of a report. The CLI only parses flags and writes files.
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "omniembed/balancing.hpp"
#include "omniembed/checkpoint.hpp"
#include "omniembed/config.hpp"
#include "omniembed/core.hpp"
#include "omniembed/datasets.hpp"
#include "omniembed/embedding_io.hpp"
#include "omniembed/encoder.hpp"
#include "omniembed/evalsuite.hpp"
#include "omniembed/gradcheck.hpp"
#include "omniembed/mining.hpp"
#include "omniembed/synth.hpp"
#include "omniembed/trainer.hpp"

namespace omniembed {

/// Independent stream for one purpose, so adding a consumer never shifts
/// the draws of another.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
  return fnv1a64(purpose) ^ (seed * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL);
}

// ---------------------------------------------------------------------------
// Inputs

struct Corpus {
  std::vector<ItemRecord> items;
  std::unordered_map<std::string, const ItemRecord*> by_id;

  const ItemRecord& at(const std::string& id, const std::string& origin) const {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw Error(ErrorCode::not_found, origin + ": unknown item id '" + id + "'", origin);
    return *it->second;
  }
};

/// Loads an item file; any malformed line fails the load with its line number.
inline Corpus load_corpus(const std::filesystem::path& path, const ModalityDims& dims) {
  auto loaded = load_items(path, dims);
  if (!loaded.errors.empty()) {
    const auto& e = loaded.errors.front();
    throw Error(ErrorCode::invalid_argument, path.string() + ":" + std::to_string(e.line) + ": " + e.message,
                path.string());
  }
  Corpus c;
  c.items = std::move(loaded.items);
  for (const auto& rec : c.items) c.by_id.emplace(rec.id, &rec);
  return c;
}

inline std::map<std::string, std::string> gold_map(std::span<const GoldPair> pairs, const std::string& origin) {
  std::map<std::string, std::string> gold;
  for (const auto& p : pairs)
    if (!gold.emplace(p.query, p.target).second)
      throw Error(ErrorCode::invalid_argument, origin + ": query '" + p.query + "' has more than one gold target", origin);
  return gold;
}

inline std::vector<TrainingDataset> build_datasets(const PipelineConfig& cfg, const Corpus& corpus) {
  std::vector<TrainingDataset> out;
  for (const auto& dc : cfg.datasets) {
    TrainingDataset ds;
    ds.spec = dc.spec;
    ds.tau_key = dc.tau_key;
    ds.graded = dc.graded;
    const auto origin = dc.file.string();
    if (dc.graded) {
      for (const auto& g : read_graded(dc.file))
        ds.pairs.push_back({&corpus.at(g.query, origin), &corpus.at(g.target, origin), g.score});
    } else {
      for (const auto& p : read_pairs(dc.file))
        ds.pairs.push_back({&corpus.at(p.query, origin), &corpus.at(p.target, origin), std::nullopt});
    }
    if (ds.pairs.empty()) throw Error(ErrorCode::invalid_argument, "dataset '" + dc.name + "' has no pairs", origin);
    out.push_back(std::move(ds));
  }
  return out;
}

inline ToyEncoder init_encoder(const PipelineConfig& cfg, std::uint64_t seed) {
  return ToyEncoder::initialize(cfg.encoder, cfg.tau_keys, derive_seed(seed, "encoder"), cfg.tau_init);
}

inline StagePlan make_plan(const PipelineConfig& cfg, std::uint64_t seed) {
  StagePlan plan;
  plan.stages = cfg.stages;
  plan.mrl = cfg.mrl;
  plan.seed = derive_seed(seed, "plan");
  plan.mining_cap = cfg.mining_cap;
  plan.workers = cfg.workers;
  return plan;
}

// ---------------------------------------------------------------------------
// Held-out retrieval evaluation used during training and distillation

struct Heldout {
  std::vector<GoldPair> pairs;
  std::map<std::size_t, std::size_t> twin;  // cluster -> near-duplicate cluster, when known
};

inline Heldout load_heldout(const PipelineConfig& cfg) {
  Heldout h;
  h.pairs = read_pairs(cfg.eval.gold);
  if (h.pairs.empty()) throw Error(ErrorCode::invalid_argument, "held-out set is empty", cfg.eval.gold.string());
  const auto clusters = cfg.data_dir / SynthFiles::clusters;
  if (std::filesystem::exists(clusters)) {
    for (const auto& c : read_json_file(clusters))
      if (c.contains("twin") && !c["twin"].is_null())
        h.twin[c.at("id").get<std::size_t>()] = c["twin"].get<std::size_t>();
  }
  return h;
}

inline ModalitySet view_of(const ItemRecord& rec, ModalitySet wanted) {
  const auto v = rec.modalities().intersect(wanted);
  if (v.empty())
    throw Error(ErrorCode::invalid_argument, "item '" + rec.id + "' has none of the modalities " + wanted.to_string(), rec.id);
  return v;
}

inline std::pair<EmbeddingStore, EmbeddingStore> embed_heldout(const ToyEncoder& enc, const PipelineConfig& cfg,
                                                               const Corpus& corpus, const Heldout& h) {
  EmbeddingStore q(enc.dim()), t(enc.dim());
  const auto origin = cfg.eval.gold.string();
  for (const auto& p : h.pairs) {
    const auto& qr = corpus.at(p.query, origin);
    const auto& tr = corpus.at(p.target, origin);
    if (!q.contains(p.query)) q.add(p.query, embed(enc, qr, view_of(qr, cfg.eval.query_view), cfg.eval.instruction));
    if (!t.contains(p.target)) t.add(p.target, embed(enc, tr, view_of(tr, cfg.eval.target_view), cfg.eval.instruction));
  }
  return {std::move(q), std::move(t)};
}

inline Json recall_json(const RecallResult& r) {
  Json j = Json::object();
  for (const auto& [k, v] : r.recall) j[std::to_string(k)] = v;
  return j;
}

inline Json separability_summary(const SeparabilityStats& s, std::size_t npos, std::size_t nneg) {
  return {{"pos_mean", s.pos_mean}, {"neg_mean", s.neg_mean}, {"gap", s.gap},
          {"overlap", s.overlap},   {"pos_p5", s.pos_p5},     {"positives", npos},
          {"negatives", nneg}};
}

/// Recall at full dimension and at the smallest MRL slice, plus the
/// separability of hard-cluster pairs against their twin cluster's targets.
inline Json heldout_eval(const ToyEncoder& enc, const PipelineConfig& cfg, const Corpus& corpus, const Heldout& h) {
  const auto [q, t] = embed_heldout(enc, cfg, corpus, h);
  const auto gold = gold_map(h.pairs, cfg.eval.gold.string());
  Json j;
  j["queries"] = gold.size();
  j["recall"] = recall_json(recall_at_k(q, t, gold, cfg.eval.ks, cfg.workers));
  const std::size_t slice = cfg.mrl.dims().front();
  j["slice_dim"] = slice;
  j["recall_slice"] = recall_json(recall_at_k(q.prefix(slice), t.prefix(slice), gold, cfg.eval.ks, cfg.workers));

  std::vector<double> pos, neg;
  for (const auto& p : h.pairs) {
    auto tw = h.twin.find(p.cluster);
    if (tw == h.twin.end()) continue;
    pos.push_back(cosine(q.at(p.query), t.at(p.target)));
    for (const auto& o : h.pairs)
      if (o.cluster == tw->second) neg.push_back(cosine(q.at(p.query), t.at(o.target)));
  }
  j["hard_separability"] = pos.empty() || neg.empty() ? Json(nullptr) : separability_summary(separability(pos, neg), pos.size(), neg.size());
  return j;
}

// ---------------------------------------------------------------------------
// train

inline Json mining_json(const MiningSummary& m) {
  return {{"dataset", m.dataset}, {"pattern", to_string(m.pattern)}, {"lambda_star", m.lambda_star},
          {"f1", m.f1},           {"positives", m.positives},        {"negatives", m.negatives},
          {"hard_negatives", m.hard_negatives}};
}

inline std::string stage_dir_name(std::size_t s, const std::string& name) {
  std::string safe;
  for (char c : name) safe += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  return "stage-" + std::to_string(s + 1) + "-" + safe;
}

/// Runs the configured stage plan on `enc`, evaluating the held-out set
/// before training and after every stage. With `checkpoints`, each stage's
/// encoder is saved under it plus a final copy in "final".
inline Json run_training(const PipelineConfig& cfg, std::uint64_t seed, ToyEncoder& enc, const Corpus& corpus,
                         const std::optional<std::filesystem::path>& checkpoints = std::nullopt) {
  if (cfg.datasets.empty()) throw Error(ErrorCode::config, "no datasets configured", "datasets");
  if (cfg.stages.empty()) throw Error(ErrorCode::config, "no stages configured", "stages");
  const auto datasets = build_datasets(cfg, corpus);
  const auto heldout = load_heldout(cfg);
  const auto plan = make_plan(cfg, seed);

  Json result;
  result["initial"] = heldout_eval(enc, cfg, corpus, heldout);
  result["stages"] = Json::array();
  run_plan(plan, datasets, enc, [&](std::size_t s, const StageReport& r, const ToyEncoder& e) {
    Json st;
    st["name"] = r.name;
    st["steps"] = r.losses.size();
    st["weights"] = Json::object();
    st["draws"] = Json::object();
    for (std::size_t k = 0; k < datasets.size(); ++k) {
      st["weights"][cfg.datasets[k].name] = cfg.stages[s].weights[k];
      st["draws"][cfg.datasets[k].name] = r.draws[k];
    }
    st["start_loss"] = r.start_loss();
    st["final_loss"] = r.final_loss();
    st["losses"] = r.losses;
    st["mining"] = Json::array();
    for (const auto& m : r.mining) st["mining"].push_back(mining_json(m));
    st["eval"] = heldout_eval(e, cfg, corpus, heldout);
    if (checkpoints) {
      const auto name = stage_dir_name(s, r.name);
      save_checkpoint(*checkpoints / name, e);
      st["checkpoint"] = name;
    }
    result["stages"].push_back(std::move(st));
  });
  if (checkpoints) {
    save_checkpoint(*checkpoints / "final", enc);
    result["final_checkpoint"] = "final";
  }
  Json tau = Json::object();
  for (std::size_t i = 0; i < enc.tau_keys().size(); ++i) tau[enc.tau_keys()[i]] = enc.tau(i);
  result["temperatures"] = tau;
  return result;
}

// ---------------------------------------------------------------------------
// distill

inline std::size_t aux_dataset_index(const PipelineConfig& cfg) {
  if (!cfg.distill.aux_dataset.empty()) return cfg.dataset_index(cfg.distill.aux_dataset);
  for (std::size_t i = 0; i < cfg.datasets.size(); ++i)
    if (!cfg.datasets[i].graded) return i;
  throw Error(ErrorCode::config, "id2item needs a non-graded auxiliary dataset", "distill.aux_dataset");
}

struct SequenceSplit {
  std::vector<UserHistory> users;  // owns the records
  std::vector<std::pair<std::string, SequenceExample>> train, heldout;
};

/// Builds one seq2item example per user with the encoder as the content
/// embedder (histories are selected by similarity to the target).
inline SequenceSplit build_sequences(const PipelineConfig& cfg, const ToyEncoder& enc) {
  SequenceSplit split;
  split.users = read_users(cfg.distill.sequences, cfg.encoder.raw);
  const auto instr = cfg.distill.instruction;
  const ItemEmbedder embedder = [&](const ItemRecord& r) { return embed(enc, r, r.modalities(), instr); };
  for (const auto& u : split.users) {
    std::unordered_map<std::string, const ItemRecord*> ids;
    for (const auto& r : u.items) ids.emplace(r.id, &r);
    for (const auto& s : build_sequence_samples(u.items, cfg.distill.sequence_mode, cfg.distill.seq_len, embedder)) {
      if (s.history.empty()) continue;
      SequenceExample ex;
      for (const auto& h : s.history) ex.history.push_back(ids.at(h));
      ex.target = ids.at(s.target);
      (u.heldout ? split.heldout : split.train).emplace_back(u.user, std::move(ex));
    }
  }
  return split;
}

inline RecallResult sequence_recall(const ToyEncoder& enc, std::span<const std::pair<std::string, SequenceExample>> set,
                                    std::optional<std::size_t> instruction, std::span<const std::size_t> ks,
                                    std::size_t workers) {
  EmbeddingStore q(enc.dim()), t(enc.dim());
  std::map<std::string, std::string> gold;
  for (const auto& [user, ex] : set) {
    q.add(user, sequence_embedding(enc, ex.history, instruction));
    t.add(ex.target->id, embed(enc, *ex.target, ex.target->modalities(), instruction));
    gold[user] = ex.target->id;
  }
  return recall_at_k(q, t, gold, ks, workers);
}

/// seq2item or id2item distillation on an already trained encoder, with
/// before/after measurements on held-out data.
inline Json run_distillation(const PipelineConfig& cfg, std::uint64_t seed, ToyEncoder& enc, const Corpus& corpus) {
  const auto& dc = cfg.distill;
  OptimizerConfig oc = dc.optimizer;
  oc.total_steps = dc.steps;
  MomentumOptimizer opt(oc);
  DistillConfig dcfg;
  dcfg.mode = dc.mode;
  dcfg.seq_len = dc.seq_len;
  dcfg.aux_weight = dc.aux_weight;
  dcfg.instruction = dc.instruction;
  dcfg.tau_index = enc.tau_index(dc.tau_key);
  Rng rng(derive_seed(seed, "distill"));

  Json result;
  result["mode"] = dc.mode == DistillMode::seq2item ? "seq2item" : "id2item";
  std::vector<double> losses;

  if (dc.mode == DistillMode::seq2item) {
    const auto split = build_sequences(cfg, enc);
    if (split.train.empty() || split.heldout.empty())
      throw Error(ErrorCode::invalid_argument, "seq2item needs training and held-out sequences", cfg.distill.sequences.string());
    result["sequence_mode"] = to_string(dc.sequence_mode);
    result["samples"] = {{"train", split.train.size()}, {"heldout", split.heldout.size()}};
    result["pre"] = {{"recall", recall_json(sequence_recall(enc, split.heldout, dc.instruction, cfg.eval.ks, cfg.workers))}};
    for (std::size_t step = 0; step < dc.steps; ++step) {
      std::vector<SequenceExample> batch;
      // Distinct examples per batch: a duplicate target would be its own negative.
      std::vector<std::size_t> order(split.train.size());
      std::iota(order.begin(), order.end(), 0);
      const std::size_t take = std::min(dc.batch_size, order.size());
      for (std::size_t i = 0; i < take; ++i) std::swap(order[i], order[i + rng.uniform_index(order.size() - i)]);
      for (std::size_t i = 0; i < take; ++i) batch.push_back(split.train[order[i]].second);
      losses.push_back(seq2item_step(batch, enc, opt, dcfg).loss);
    }
    result["post"] = {{"recall", recall_json(sequence_recall(enc, split.heldout, dc.instruction, cfg.eval.ks, cfg.workers))}};
  } else {
    const auto datasets = build_datasets(cfg, corpus);
    const auto heldout = load_heldout(cfg);
    const std::size_t aux_k = aux_dataset_index(cfg);
    const auto& aux_ds = datasets[aux_k];
    const std::size_t aux_tau = enc.tau_index(aux_ds.tau_key);

    std::vector<const ItemRecord*> records, test;
    std::set<std::string> seen;
    for (const auto& p : aux_ds.pairs)
      if (seen.insert(p.target->id).second) records.push_back(p.target);
    for (const auto& p : heldout.pairs) test.push_back(&corpus.at(p.target, cfg.eval.gold.string()));
    for (const auto* r : records)
      if (r->id_embeddings.empty())
        throw Error(ErrorCode::invalid_argument, "id2item: item '" + r->id + "' has no id_embeddings", r->id);
    dcfg.id_dim = records.front()->id_embeddings.front().size();
    dcfg.projection = Matrix(dcfg.id_dim, enc.dim());
    Rng prng(derive_seed(seed, "projection"));
    for (auto& x : dcfg.projection.values()) x = dc.projection_scale * prng.normal();

    auto measure = [&] {
      return Json{{"alignment", id2item_loss(test, nullptr, dcfg, enc).alignment},
                  {"aux_eval", heldout_eval(enc, cfg, corpus, heldout)}};
    };
    result["aux_dataset"] = cfg.datasets[aux_k].name;
    result["records"] = records.size();
    result["pre"] = measure();
    for (std::size_t step = 0; step < dc.steps; ++step) {
      std::vector<const ItemRecord*> batch;
      for (std::size_t i = 0; i < dc.batch_size; ++i) batch.push_back(records[rng.uniform_index(records.size())]);
      const auto aux = sample_batch(aux_ds, aux_tau, dc.batch_size, rng);
      losses.push_back(id2item_step(batch, &aux, dcfg, enc, opt).loss);
    }
    result["post"] = measure();
  }
  result["steps"] = dc.steps;
  result["losses"] = losses;
  return result;
}

// ---------------------------------------------------------------------------
// gen-synth

inline Json synth_to_json(const SynthSpec& s) {
  return {{"n_clusters", s.n_clusters},
          {"items_per_cluster", s.items_per_cluster},
          {"noise_sigma", s.noise_sigma},
          {"view_noise_ratio", s.view_noise_ratio},
          {"modality_dims", {{"vision", s.dims.vision}, {"audio", s.dims.audio}, {"text", s.dims.text}}},
          {"latent_dim", s.latent_dim},
          {"hard_fraction", s.hard_fraction},
          {"hard_cosine", s.hard_cosine},
          {"audio_prob", s.audio_prob},
          {"heldout_pairs", s.heldout_pairs},
          {"graded_pairs", s.graded_pairs},
          {"users", s.users},
          {"heldout_users", s.heldout_users},
          {"history_len", s.history_len},
          {"taste_dims", s.taste_dims},
          {"taste_scale", s.taste_scale},
          {"id_dim", s.id_dim},
          {"ids_per_item", s.ids_per_item},
          {"id_noise", s.id_noise}};
}

inline Json gen_synth(const SynthSpec& spec, std::uint64_t seed, const std::filesystem::path& dir) {
  spec.validate();
  const auto data = gen_synthetic(spec, seed);
  write_synthetic(dir, data);
  std::size_t hard_clusters = 0;
  for (const auto& c : data.clusters) hard_clusters += c.twin && c.id > *c.twin ? 1 : 0;
  Json files = Json::object();
  for (const char* f : {SynthFiles::items, SynthFiles::train_pairs, SynthFiles::heldout_pairs, SynthFiles::graded,
                        SynthFiles::users, SynthFiles::clusters})
    files[f] = file_hash(dir / f);
  return {{"items", data.items.size()},
          {"train_pairs", data.train_pairs.size()},
          {"heldout_pairs", data.heldout_pairs.size()},
          {"graded_pairs", data.graded.size()},
          {"users", data.users.size()},
          {"clusters", data.clusters.size()},
          {"hard_clusters", hard_clusters},
          {"files", files}};
}

// ---------------------------------------------------------------------------
// mine

/// Keeps at most `max_points` of the curve, evenly spaced, always including
/// both ends and the optimum.
inline std::vector<ThresholdPoint> thin_curve(const std::vector<ThresholdPoint>& curve, double lambda_star,
                                              std::size_t max_points) {
  if (curve.size() <= max_points || max_points < 3) return curve;
  std::set<std::size_t> keep;
  for (std::size_t i = 0; i < max_points - 1; ++i) keep.insert(i * (curve.size() - 1) / (max_points - 2));
  keep.insert(curve.size() - 1);
  for (std::size_t i = 0; i < curve.size(); ++i)
    if (curve[i].lambda == lambda_star) keep.insert(i);
  std::vector<ThresholdPoint> out;
  for (auto i : keep) out.push_back(curve[i]);
  return out;
}

inline constexpr std::size_t kMaxCurvePoints = 1000;

inline Json mine(const EmbeddingStore& store, const PositivePairs& positives, std::size_t m, std::size_t cap,
                 std::uint64_t seed, std::size_t workers) {
  for (const auto& [q, t] : positives) {
    if (!store.contains(q)) throw Error(ErrorCode::not_found, "pairs reference unknown query id '" + q + "'", q);
    if (!store.contains(t)) throw Error(ErrorCode::not_found, "pairs reference unknown target id '" + t + "'", t);
  }
  const auto res = mine_hard_negatives(positives, store, store, m, cap, seed, workers);
  Json curve = Json::array();
  for (const auto& p : thin_curve(res.sweep.curve, res.sweep.lambda_star, kMaxCurvePoints))
    curve.push_back({{"lambda", p.lambda}, {"precision", p.precision}, {"recall", p.recall}, {"f1", p.f1}});
  Json hard = Json::object();
  for (const auto& [q, list] : res.pool.per_query) {
    Json ids = Json::array();
    for (const auto& h : list) ids.push_back(h.target);
    hard[q] = std::move(ids);
  }
  return {{"lambda_star", res.sweep.lambda_star},
          {"f1", res.sweep.f1_at_star},
          {"curve", curve},
          {"curve_points_total", res.sweep.curve.size()},
          {"hard_negatives", hard},
          {"m", m},
          {"positives", res.positives},
          {"negatives_total", res.negatives_total},
          {"negatives_sampled", res.negatives_sampled}};
}

// ---------------------------------------------------------------------------
// balance

inline Json balance(const std::vector<std::string>& train_names, std::span<const EmbeddingStore> train,
                    const std::vector<std::string>& bench_names, std::span<const EmbeddingStore> bench,
                    const BalanceParams& params) {
  const auto report = balance_sources(train, bench, params);
  Json sim = Json::array();
  for (std::size_t i = 0; i < report.sim_matrix.rows(); ++i) {
    const auto row = report.sim_matrix.row(i);
    sim.push_back(std::vector<double>(row.begin(), row.end()));
  }
  Json by_name = Json::object();
  for (std::size_t i = 0; i < train_names.size(); ++i) by_name[train_names[i]] = report.weights[i];
  Json converged = Json::array();
  for (const auto& row : report.converged) converged.push_back(std::vector<bool>(row.begin(), row.end()));
  return {{"train", train_names},
          {"bench", bench_names},
          {"sim_matrix", sim},
          {"row_means", report.row_means},
          {"weights", report.weights},
          {"weights_by_name", by_name},
          {"temperature", report.temperature},
          {"converged", converged}};
}

// ---------------------------------------------------------------------------
// schedule

inline Json schedule(const std::vector<double>& weights, std::size_t draws, std::uint64_t seed) {
  validate_weights(weights);
  Rng rng(seed);
  std::vector<std::size_t> sequence(draws), counts(weights.size(), 0);
  for (auto& d : sequence) ++counts[d = draw_dataset(weights, rng)];
  std::vector<double> freq(weights.size(), 0.0);
  bool within = true;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double n = static_cast<double>(draws);
    freq[i] = draws ? static_cast<double>(counts[i]) / n : 0.0;
    const double sigma = std::sqrt(n * weights[i] * (1.0 - weights[i]));
    within = within && std::abs(static_cast<double>(counts[i]) - n * weights[i]) <= 3.0 * sigma + 1e-9;
  }
  return {{"weights", weights}, {"draws", draws},       {"counts", counts},
          {"frequencies", freq}, {"within_3_sigma", within}, {"sequence", sequence}};
}

// ---------------------------------------------------------------------------
// check-grads

inline Json check_grads(std::size_t instances, std::size_t dim, std::uint64_t seed) {
  const auto cert = certify_gradients(instances, dim, seed);
  Json entries = Json::array();
  for (const auto& e : cert.entries)
    entries.push_back({{"loss", e.loss},
                       {"instances", e.instances},
                       {"max_rel_error", e.max_rel_error},
                       {"worst_key", e.worst_key},
                       {"passed", e.max_rel_error < cert.threshold}});
  return {{"threshold", cert.threshold}, {"instances", instances}, {"dim", dim},
          {"entries", entries},          {"passed", cert.passed()}};
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::vector<std::size_t> ks = kDefaultRecallKs;
  std::set<std::string> metrics = {"recall", "separability", "nmi", "ranking", "bijective", "auc"};
  std::size_t nmi_k = 8;
  std::size_t rank_k = 10;
  std::size_t rank_dim = 0;  // 0: a quarter of the dimension
  std::size_t rank_queries = 100;
  std::size_t neg_per_query = 64;
  std::size_t kmeans_iters = 100;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

inline const std::set<std::string>& known_metrics() {
  static const std::set<std::string> m = {"recall", "separability", "nmi", "ranking", "bijective", "auc"};
  return m;
}

/// Full metric report over a query store, a target store and gold pairs.
/// Negatives for separability and AUC are up to `neg_per_query` seeded
/// non-gold targets per query.
inline Json evaluate_stores(const EmbeddingStore& queries, const EmbeddingStore& targets,
                            const std::map<std::string, std::string>& gold, const EvalOptions& opt) {
  for (const auto& m : opt.metrics)
    if (!known_metrics().count(m)) throw Error(ErrorCode::config, "unknown metric '" + m + "'", "metrics");
  std::vector<std::string> missing_queries;
  for (const auto& [q, _] : gold)
    if (!queries.contains(q)) missing_queries.push_back(q);
  if (!missing_queries.empty())
    throw Error(ErrorCode::not_found, "gold references unknown query id '" + missing_queries.front() + "'",
                missing_queries.front());

  Json out;
  out["queries"] = gold.size();
  out["targets"] = targets.size();
  auto want = [&](const char* m) { return opt.metrics.count(m) != 0; };

  if (want("recall")) {
    const auto r = recall_at_k(queries, targets, gold, opt.ks, opt.workers);
    out["recall"] = {{"at", recall_json(r)}, {"missing_gold", r.missing_gold}, {"warnings", r.warnings}};
  }

  // Positive / negative similarity samples shared by separability and AUC.
  std::vector<double> pos, neg;
  if (want("separability") || want("auc")) {
    Rng rng(derive_seed(opt.seed, "eval-negatives"));
    for (const auto& [q, t] : gold) {
      if (!targets.contains(t)) continue;
      const auto qv = queries.at(q);
      pos.push_back(cosine(qv, targets.at(t)));
      const std::size_t gold_row = targets.index_of(t);
      const std::size_t others = targets.size() - 1;
      if (others == 0) continue;
      if (others <= opt.neg_per_query) {
        for (std::size_t j = 0; j < targets.size(); ++j)
          if (j != gold_row) neg.push_back(cosine(qv, targets.row(j)));
      } else {
        for (std::size_t s = 0; s < opt.neg_per_query; ++s) {
          std::size_t j = rng.uniform_index(others);
          if (j >= gold_row) ++j;
          neg.push_back(cosine(qv, targets.row(j)));
        }
      }
    }
  }
  if (want("separability")) {
    if (pos.empty() || neg.empty()) {
      out["separability"] = nullptr;
    } else {
      const auto s = separability(pos, neg);
      auto j = separability_summary(s, pos.size(), neg.size());
      j["pos_hist"] = s.pos_hist;
      j["neg_hist"] = s.neg_hist;
      out["separability"] = j;
    }
  }
  if (want("auc")) {
    if (pos.empty() || neg.empty()) {
      out["auc"] = nullptr;
    } else {
      std::vector<double> scores = pos;
      scores.insert(scores.end(), neg.begin(), neg.end());
      std::vector<int> labels(pos.size(), 1);
      labels.resize(scores.size(), 0);
      out["auc"] = {{"value", auc(scores, labels)}, {"positives", pos.size()}, {"negatives", neg.size()}};
    }
  }

  // Gold-restricted stores for the paired metrics.
  EmbeddingStore gq(queries.dim()), gt(targets.dim());
  std::map<std::string, std::string> gold_present;
  for (const auto& [q, t] : gold) {
    if (!targets.contains(t)) continue;
    gq.add(q, queries.at(q));
    if (!gt.contains(t)) gt.add(t, targets.at(t));
    gold_present[q] = t;
  }

  if (want("nmi")) {
    if (gq.size() < 2) {
      out["nmi"] = nullptr;
    } else {
      // Cluster each side on its own; a good cross-modal space puts a
      // query and its gold target in corresponding clusters.
      const std::size_t k = std::min(opt.nmi_k, gt.size());
      const auto cq = kmeans(gq, std::min(k, gq.size()), opt.kmeans_iters, derive_seed(opt.seed, "nmi-q"));
      const auto ct = kmeans(gt, k, opt.kmeans_iters, derive_seed(opt.seed, "nmi-t"));
      std::vector<std::size_t> la, lb;
      for (std::size_t i = 0; i < gq.size(); ++i) {
        la.push_back(cq.assignment[i]);
        lb.push_back(ct.assignment[gt.index_of(gold_present.at(gq.id(i)))]);
      }
      const auto r = nmi(la, lb);
      out["nmi"] = {{"value", r.value}, {"degenerate", r.degenerate}, {"k", k}};
    }
  }

  if (want("ranking")) {
    const std::size_t d = queries.dim();
    const std::size_t rd = opt.rank_dim ? opt.rank_dim : std::max<std::size_t>(1, d / 4);
    if (rd > d) throw Error(ErrorCode::config, "rank_dim exceeds the embedding dimension", "rank_dim");
    if (targets.size() < 2) {
      out["ranking"] = nullptr;
    } else {
      // Ranking of all targets by the full embedding vs by its rd-prefix.
      const auto qs = queries.prefix(rd), ts = targets.prefix(rd);
      const RetrievalIndex full(targets), part(ts);
      const std::size_t n = std::min(opt.rank_queries, gq.size());
      const std::size_t k = std::min(opt.rank_k, targets.size());
      double tau_sum = 0.0, overlap_sum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& id = gq.id(i);
        std::vector<std::size_t> a, b;
        for (const auto& h : full.search(queries.at(id), targets.size())) a.push_back(h.index);
        for (const auto& h : part.search(qs.at(id), targets.size())) b.push_back(h.index);
        const auto rc = ranking_consistency(a, b, k);
        tau_sum += rc.kendall_tau;
        overlap_sum += rc.topk_overlap;
      }
      out["ranking"] = n ? Json{{"kendall_tau", tau_sum / static_cast<double>(n)},
                               {"topk_overlap", overlap_sum / static_cast<double>(n)},
                               {"k", k},
                               {"prefix_dim", rd},
                               {"queries", n}}
                         : Json(nullptr);
    }
  }

  if (want("bijective")) {
    if (gq.empty() || gq.size() != gt.size()) {
      out["bijective"] = {{"value", nullptr}, {"skipped", "gold pairing is not one-to-one"}};
    } else {
      out["bijective"] = {{"value", bijective_alignment(gq, gt, gold_present, opt.workers)}};
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// embed

/// Embeds `ids` (all corpus items when empty) in the given view.
inline EmbeddingStore embed_items(const ToyEncoder& enc, const Corpus& corpus, const std::vector<std::string>& ids,
                                  ModalitySet view, std::optional<std::size_t> instruction, const std::string& origin) {
  std::vector<const ItemRecord*> recs;
  if (ids.empty()) {
    for (const auto& r : corpus.items) recs.push_back(&r);
  } else {
    std::set<std::string> seen;
    for (const auto& id : ids)
      if (seen.insert(id).second) recs.push_back(&corpus.at(id, origin));
  }
  return embed_records(enc, recs, [&](const ItemRecord& r) { return view_of(r, view); }, instruction);
}

}  // namespace omniembed
