/// \file config.hpp
/// Pipeline configuration (JSON) with field-path diagnostics, the config
/// hash, seed resolution and the report envelope shared by every command.
#pragma once

#include <array>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "omniembed/balancing.hpp"
#include "omniembed/core.hpp"
#include "omniembed/datasets.hpp"
#include "omniembed/encoder.hpp"
#include "omniembed/error.hpp"
#include "omniembed/evalsuite.hpp"
#include "omniembed/mining.hpp"
#include "omniembed/synth.hpp"
#include "omniembed/trainer.hpp"

#ifndef OMNIEMBED_BUILD
#define OMNIEMBED_BUILD "unknown"
#endif

namespace omniembed {

inline constexpr const char* kToolName = "omniembed";
inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kBuild = OMNIEMBED_BUILD;
inline constexpr const char* kSeedEnv = "OMNI_EMBED_SEED";

using Json = nlohmann::json;

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Hash of the canonical (sorted-key, compact) dump.
inline std::string config_hash(const Json& config) { return hex64(fnv1a64(config.dump())); }

inline std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open '" + path.string() + "'", path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex64(fnv1a64(bytes));
}

// ---------------------------------------------------------------------------
// Path-tracking reader

/// Read-only view of a JSON object that knows its own field path, so every
/// type or range error names the offending field ("stages[1].steps").
class JsonReader {
 public:
  JsonReader(const Json& j, std::string path) : j_(&j), path_(std::move(path)) {
    if (!j.is_object()) throw Error(ErrorCode::config, "expected an object", path_.empty() ? "<root>" : path_);
  }

  const std::string& path() const noexcept { return path_; }
  std::string field(std::string_view key) const { return path_.empty() ? std::string(key) : path_ + "." + std::string(key); }
  bool has(const std::string& key) const { return j_->contains(key) && !(*j_)[key].is_null(); }
  const Json& raw(const std::string& key) const { return (*j_)[key]; }
  const Json& json() const noexcept { return *j_; }

  template <class T>
  std::optional<T> opt(const std::string& key) const {
    if (!has(key)) return std::nullopt;
    return convert<T>((*j_)[key], field(key));
  }
  template <class T>
  T get(const std::string& key, T fallback) const {
    auto v = opt<T>(key);
    return v ? std::move(*v) : std::move(fallback);
  }
  template <class T>
  T req(const std::string& key) const {
    if (!has(key)) throw Error(ErrorCode::config, "missing required field", field(key));
    return convert<T>((*j_)[key], field(key));
  }

  /// Nested object; an absent key reads as an empty object.
  JsonReader object(const std::string& key) const {
    static const Json empty = Json::object();
    return has(key) ? JsonReader((*j_)[key], field(key)) : JsonReader(empty, field(key));
  }

  /// Rejects keys outside `known` so typos do not pass silently.
  void only(std::initializer_list<std::string_view> known) const {
    for (const auto& [key, _] : j_->items()) {
      bool ok = false;
      for (auto k : known) ok = ok || key == k;
      if (!ok) throw Error(ErrorCode::config, "unknown field", field(key));
    }
  }

  template <class T>
  static T convert(const Json& v, const std::string& path) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw Error(ErrorCode::config, "expected a boolean", path);
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw Error(ErrorCode::config, "expected a string", path);
      return v.get<std::string>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
        throw Error(ErrorCode::config, "expected a non-negative integer", path);
      return static_cast<T>(v.get<std::uint64_t>());
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw Error(ErrorCode::config, "expected a number", path);
      const double x = v.get<double>();
      if (!std::isfinite(x)) throw Error(ErrorCode::config, "expected a finite number", path);
      return x;
    } else {
      // std::vector<U>
      if (!v.is_array()) throw Error(ErrorCode::config, "expected an array", path);
      T out;
      for (std::size_t i = 0; i < v.size(); ++i)
        out.push_back(convert<typename T::value_type>(v[i], path + "[" + std::to_string(i) + "]"));
      return out;
    }
  }

 private:
  const Json* j_;
  std::string path_;
};

// ---------------------------------------------------------------------------
// Configuration

struct DatasetConfig {
  std::string name;
  std::filesystem::path file;  // pairs or graded JSONL, resolved
  bool graded = false;
  DatasetSpec spec;
  std::string tau_key = "retrieval";
};

struct EvalConfig {
  std::vector<std::size_t> ks = kDefaultRecallKs;
  std::filesystem::path gold;  // held-out pairs, resolved
  ModalitySet query_view = ModalitySet::all();
  ModalitySet target_view = ModalitySet::all();
  std::optional<std::size_t> instruction;
  std::size_t nmi_k = 8;
  std::size_t rank_k = 10;
};

struct DistillSettings {
  DistillMode mode = DistillMode::seq2item;
  SequenceMode sequence_mode = SequenceMode::content_single_peak;
  std::size_t seq_len = 10;
  std::size_t steps = 500;
  std::size_t batch_size = 32;
  std::optional<std::size_t> instruction;
  double aux_weight = 1.0;
  std::string aux_dataset;  // defaults to the first non-graded dataset
  double projection_scale = 0.125;
  std::string tau_key = "retrieval";
  std::filesystem::path sequences;  // user histories, resolved
  OptimizerConfig optimizer;
};

struct PipelineConfig {
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
  SynthSpec synth;
  std::filesystem::path data_dir;
  std::filesystem::path items;
  EncoderDims encoder;
  std::vector<std::string> tau_keys{"retrieval"};
  std::vector<double> tau_init{kRetrievalTauInit};
  MrlDims mrl{std::vector<std::size_t>{16, 32, 64}};
  std::vector<DatasetConfig> datasets;
  std::vector<Stage> stages;
  std::size_t mining_m = kDefaultHardNegativesPerQuery;
  std::size_t mining_cap = kDefaultNegativeCap;
  BalanceParams balancing;
  EvalConfig eval;
  DistillSettings distill;
  Json echo = Json::object();  // the config as written

  std::size_t dataset_index(const std::string& name) const {
    for (std::size_t i = 0; i < datasets.size(); ++i)
      if (datasets[i].name == name) return i;
    throw Error(ErrorCode::config, "unknown dataset '" + name + "'", "datasets");
  }
};

namespace detail {

inline ModalitySet parse_view(const JsonReader& r, const std::string& key, ModalitySet fallback) {
  if (!r.has(key)) return fallback;
  const auto names = r.req<std::vector<std::string>>(key);
  ModalitySet out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == "all") return ModalitySet::all();
    const auto m = parse_modality(names[i]);
    if (!m) throw Error(ErrorCode::config, "unknown modality '" + names[i] + "'", r.field(key) + "[" + std::to_string(i) + "]");
    out.insert(*m);
  }
  if (out.empty()) throw Error(ErrorCode::config, "view needs at least one modality", r.field(key));
  return out;
}

inline ModalityDims parse_modality_dims(const JsonReader& r) {
  r.only({"vision", "audio", "text"});
  ModalityDims d;
  d.vision = r.get<std::size_t>("vision", d.vision);
  d.audio = r.get<std::size_t>("audio", d.audio);
  d.text = r.get<std::size_t>("text", d.text);
  for (auto m : kModalities)
    if (d.of(m) == 0) throw Error(ErrorCode::config, "modality dims must be >= 1", r.field(to_string(m)));
  return d;
}

inline OptimizerConfig parse_optimizer(const JsonReader& r, OptimizerConfig cfg = {}) {
  r.only({"lr_max", "lr_min", "weight_decay", "momentum", "warmup_steps", "clip_norm"});
  cfg.lr_max = r.get("lr_max", cfg.lr_max);
  cfg.lr_min = r.get("lr_min", cfg.lr_min);
  cfg.weight_decay = r.get("weight_decay", cfg.weight_decay);
  cfg.momentum = r.get("momentum", cfg.momentum);
  cfg.warmup_steps = r.get("warmup_steps", cfg.warmup_steps);
  cfg.clip_norm = r.get("clip_norm", cfg.clip_norm);
  auto check = cfg;
  check.total_steps = std::max<std::size_t>(check.total_steps, 1);
  try {
    check.validate();
  } catch (const Error& e) {
    // e.path() is "optimizer.<field>"; re-root it under this reader.
    const auto leaf = e.path().substr(e.path().find('.') + 1);
    throw Error(ErrorCode::config, e.what(), r.field(leaf));
  }
  return cfg;
}

inline SynthSpec parse_synth(const JsonReader& r) {
  r.only({"n_clusters", "items_per_cluster", "noise_sigma", "view_noise_ratio", "modality_dims", "latent_dim",
          "hard_fraction", "hard_cosine", "audio_prob", "heldout_pairs", "graded_pairs", "users", "heldout_users",
          "history_len", "taste_dims", "taste_scale", "id_dim", "ids_per_item", "id_noise"});
  SynthSpec s;
  s.n_clusters = r.get("n_clusters", s.n_clusters);
  s.items_per_cluster = r.get("items_per_cluster", s.items_per_cluster);
  s.noise_sigma = r.get("noise_sigma", s.noise_sigma);
  s.view_noise_ratio = r.get("view_noise_ratio", s.view_noise_ratio);
  if (r.has("modality_dims")) s.dims = parse_modality_dims(r.object("modality_dims"));
  s.latent_dim = r.get("latent_dim", s.latent_dim);
  s.hard_fraction = r.get("hard_fraction", s.hard_fraction);
  s.hard_cosine = r.get("hard_cosine", s.hard_cosine);
  s.audio_prob = r.get("audio_prob", s.audio_prob);
  s.heldout_pairs = r.get("heldout_pairs", s.heldout_pairs);
  s.graded_pairs = r.get("graded_pairs", s.graded_pairs);
  s.users = r.get("users", s.users);
  s.heldout_users = r.get("heldout_users", s.heldout_users);
  s.history_len = r.get("history_len", s.history_len);
  s.taste_dims = r.get("taste_dims", s.taste_dims);
  s.taste_scale = r.get("taste_scale", s.taste_scale);
  s.id_dim = r.get("id_dim", s.id_dim);
  s.ids_per_item = r.get("ids_per_item", s.ids_per_item);
  s.id_noise = r.get("id_noise", s.id_noise);
  try {
    s.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::config, e.what(), r.field(e.path()));
  }
  return s;
}

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::filesystem::path& p) {
  return (p.is_absolute() ? p : base / p).lexically_normal();
}

/// Weights of a balance report keyed by training-set name.
inline std::map<std::string, double> read_balance_weights(const std::filesystem::path& path, const std::string& field) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open balance report '" + path.string() + "'", path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::io, "balance report is not valid JSON: " + std::string(e.what()), path.string());
  }
  if (!j.contains("weights_by_name") || !j["weights_by_name"].is_object())
    throw Error(ErrorCode::config, "balance report lacks weights_by_name", field);
  std::map<std::string, double> out;
  for (const auto& [k, v] : j["weights_by_name"].items()) out[k] = JsonReader::convert<double>(v, field + "." + k);
  return out;
}

}  // namespace detail

/// Parses a pipeline config. Relative paths resolve against `base_dir`
/// (the config file's directory); `data_dir` anchors the data files.
/// With `read_weights_from` false, stages using `weights_from` are left with
/// zero weights: enough for commands that never train (gen-synth, embed) and
/// run before the balance report exists.
inline PipelineConfig parse_config(const Json& j, const std::filesystem::path& base_dir, bool read_weights_from = true) {
  PipelineConfig cfg;
  cfg.echo = j;
  const JsonReader root(j, "");
  root.only({"seed", "workers", "synth", "data_dir", "items", "encoder", "mrl", "datasets", "stages", "mining",
             "balancing", "eval", "distill"});
  cfg.seed = root.opt<std::uint64_t>("seed");
  cfg.workers = root.get<std::size_t>("workers", 1);
  if (cfg.workers == 0) throw Error(ErrorCode::config, "workers must be >= 1", "workers");
  cfg.synth = detail::parse_synth(root.object("synth"));
  cfg.data_dir = detail::resolve(base_dir, root.get<std::string>("data_dir", "."));
  cfg.items = detail::resolve(cfg.data_dir, root.get<std::string>("items", SynthFiles::items));

  {
    const auto r = root.object("encoder");
    r.only({"shared", "instructions", "modality_dims", "temperatures"});
    cfg.encoder.raw = r.has("modality_dims") ? detail::parse_modality_dims(r.object("modality_dims")) : cfg.synth.dims;
    cfg.encoder.shared = r.get<std::size_t>("shared", 64);
    cfg.encoder.instructions = r.get<std::size_t>("instructions", 4);
    if (cfg.encoder.shared == 0) throw Error(ErrorCode::config, "shared dim must be >= 1", r.field("shared"));
    if (r.has("temperatures")) {
      const auto t = r.object("temperatures");
      cfg.tau_keys.clear();
      cfg.tau_init.clear();
      for (const auto& [key, _] : t.json().items()) {
        const double tau = t.req<double>(key);
        if (!(tau > 0.0)) throw Error(ErrorCode::config, "temperature must be positive", t.field(key));
        cfg.tau_keys.push_back(key);
        cfg.tau_init.push_back(tau);
      }
      if (cfg.tau_keys.empty()) throw Error(ErrorCode::config, "at least one temperature required", r.field("temperatures"));
    }
  }
  {
    const auto dims = root.get<std::vector<std::size_t>>("mrl", {16, 32, 64});
    try {
      cfg.mrl = MrlDims(dims);
      cfg.mrl.validate_for(cfg.encoder.shared);
    } catch (const Error& e) {
      throw Error(ErrorCode::config, e.what(), "mrl");
    }
  }

  auto tau_known = [&](const std::string& key, const std::string& path) {
    if (std::find(cfg.tau_keys.begin(), cfg.tau_keys.end(), key) == cfg.tau_keys.end())
      throw Error(ErrorCode::config, "unknown temperature key '" + key + "'", path);
  };

  if (root.has("datasets")) {
    const auto& arr = root.raw("datasets");
    if (!arr.is_array()) throw Error(ErrorCode::config, "expected an array", "datasets");
    std::set<std::string> names;
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const JsonReader r(arr[i], "datasets[" + std::to_string(i) + "]");
      r.only({"name", "pairs", "graded", "patterns", "instruction", "temperature", "meta_task", "query_modalities",
              "target_modalities"});
      DatasetConfig ds;
      ds.name = r.req<std::string>("name");
      if (!names.insert(ds.name).second) throw Error(ErrorCode::config, "duplicate dataset name", r.field("name"));
      const bool has_pairs = r.has("pairs"), has_graded = r.has("graded");
      if (has_pairs == has_graded) throw Error(ErrorCode::config, "exactly one of 'pairs' or 'graded' required", r.path());
      ds.graded = has_graded;
      ds.file = detail::resolve(cfg.data_dir, r.req<std::string>(has_pairs ? "pairs" : "graded"));
      ds.spec.name = ds.name;
      if (r.has("patterns")) {
        ds.spec.patterns.clear();
        const auto pats = r.req<std::vector<std::string>>("patterns");
        for (std::size_t p = 0; p < pats.size(); ++p) {
          const auto pat = parse_pattern(pats[p]);
          if (!pat) throw Error(ErrorCode::config, "unknown pattern '" + pats[p] + "'", r.field("patterns") + "[" + std::to_string(p) + "]");
          ds.spec.patterns.push_back(*pat);
        }
      }
      if (r.has("meta_task")) {
        const auto t = parse_meta_task(r.req<std::string>("meta_task"));
        if (!t) throw Error(ErrorCode::config, "unknown meta task", r.field("meta_task"));
        ds.spec.meta_task = *t;
      }
      ds.spec.query_modalities = detail::parse_view(r, "query_modalities", ModalitySet::all());
      ds.spec.target_modalities = detail::parse_view(r, "target_modalities", ModalitySet::all());
      ds.spec.instruction_id = r.get<std::size_t>("instruction", 0);
      if (ds.spec.instruction_id >= cfg.encoder.instructions)
        throw Error(ErrorCode::config, "instruction id exceeds encoder.instructions", r.field("instruction"));
      ds.tau_key = r.get<std::string>("temperature", cfg.tau_keys.front());
      tau_known(ds.tau_key, r.field("temperature"));
      try {
        ds.spec.validate();
      } catch (const Error& e) {
        throw Error(ErrorCode::config, e.what(), r.path());
      }
      cfg.datasets.push_back(std::move(ds));
    }
  }

  if (root.has("stages")) {
    const auto& arr = root.raw("stages");
    if (!arr.is_array()) throw Error(ErrorCode::config, "expected an array", "stages");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const JsonReader r(arr[i], "stages[" + std::to_string(i) + "]");
      r.only({"name", "steps", "batch_size", "weights", "weights_from", "hard_negative", "hard_per_query", "loss",
              "optimizer"});
      Stage st;
      st.name = r.get<std::string>("name", "stage" + std::to_string(i));
      st.steps = r.req<std::size_t>("steps");
      st.batch_size = r.get<std::size_t>("batch_size", st.batch_size);
      st.hard_negative = r.get("hard_negative", false);
      st.hard_per_query = r.get<std::size_t>("hard_per_query", cfg.mining_m);
      std::map<std::string, double> by_name;
      if (r.has("weights") == r.has("weights_from"))
        throw Error(ErrorCode::config, "exactly one of 'weights' or 'weights_from' required", r.path());
      if (r.has("weights")) {
        const auto w = r.object("weights");
        for (const auto& [name, _] : w.json().items()) by_name[name] = w.req<double>(name);
      } else if (read_weights_from) {
        by_name = detail::read_balance_weights(detail::resolve(base_dir, r.req<std::string>("weights_from")),
                                               r.field("weights_from"));
      }
      st.weights.assign(cfg.datasets.size(), 0.0);
      for (const auto& [name, w] : by_name) {
        const auto field = r.field(r.has("weights") ? "weights" : "weights_from") + "." + name;
        std::size_t k = cfg.datasets.size();
        for (std::size_t d = 0; d < cfg.datasets.size(); ++d)
          if (cfg.datasets[d].name == name) k = d;
        if (k == cfg.datasets.size()) throw Error(ErrorCode::config, "weight for unknown dataset '" + name + "'", field);
        st.weights[k] = w;
      }
      const auto loss = r.object("loss");
      loss.only({"lambda", "alpha", "beta"});
      st.loss.cosent_weight = loss.get("lambda", st.loss.cosent_weight);
      st.loss.micl_weight = loss.get("alpha", st.loss.micl_weight);
      st.loss.late_fusion_weight = loss.get("beta", st.loss.late_fusion_weight);
      if (st.loss.cosent_weight < 0 || st.loss.micl_weight < 0 || st.loss.late_fusion_weight < 0)
        throw Error(ErrorCode::config, "loss weights must be >= 0", r.field("loss"));
      st.optimizer = detail::parse_optimizer(r.object("optimizer"));
      cfg.stages.push_back(std::move(st));
    }
  }

  {
    const auto r = root.object("mining");
    r.only({"m", "cap"});
    cfg.mining_m = r.get("m", cfg.mining_m);
    cfg.mining_cap = r.get("cap", cfg.mining_cap);
    if (cfg.mining_m == 0) throw Error(ErrorCode::config, "m must be >= 1", r.field("m"));
    if (cfg.mining_cap == 0) throw Error(ErrorCode::config, "cap must be >= 1", r.field("cap"));
  }
  {
    const auto r = root.object("balancing");
    r.only({"k", "epsilon", "iters", "kmeans_iters", "temperature", "sample_size"});
    auto& b = cfg.balancing;
    b.k = r.get("k", b.k);
    b.epsilon = r.get("epsilon", b.epsilon);
    b.sinkhorn_iters = r.get("iters", b.sinkhorn_iters);
    b.max_iters = r.get("kmeans_iters", b.max_iters);
    b.temperature = r.get("temperature", b.temperature);
    b.sample_size = r.get("sample_size", b.sample_size);
    if (b.k == 0) throw Error(ErrorCode::config, "k must be >= 1", r.field("k"));
    if (!(b.epsilon > 0.0)) throw Error(ErrorCode::config, "epsilon must be positive", r.field("epsilon"));
    if (!(b.temperature > 0.0)) throw Error(ErrorCode::config, "temperature must be positive", r.field("temperature"));
    if (b.sample_size == 0) throw Error(ErrorCode::config, "sample_size must be >= 1", r.field("sample_size"));
  }
  {
    const auto r = root.object("eval");
    r.only({"ks", "gold", "query_view", "target_view", "instruction", "nmi_k", "rank_k"});
    auto& e = cfg.eval;
    e.ks = r.get("ks", e.ks);
    if (e.ks.empty()) throw Error(ErrorCode::config, "at least one k required", r.field("ks"));
    for (std::size_t i = 0; i < e.ks.size(); ++i)
      if (e.ks[i] == 0) throw Error(ErrorCode::config, "k must be >= 1", r.field("ks") + "[" + std::to_string(i) + "]");
    e.gold = detail::resolve(cfg.data_dir, r.get<std::string>("gold", SynthFiles::heldout_pairs));
    e.query_view = detail::parse_view(r, "query_view", e.query_view);
    e.target_view = detail::parse_view(r, "target_view", e.target_view);
    e.instruction = r.opt<std::size_t>("instruction");
    if (e.instruction && *e.instruction >= cfg.encoder.instructions)
      throw Error(ErrorCode::config, "instruction id exceeds encoder.instructions", r.field("instruction"));
    e.nmi_k = r.get("nmi_k", e.nmi_k);
    e.rank_k = r.get("rank_k", e.rank_k);
    if (e.nmi_k == 0) throw Error(ErrorCode::config, "nmi_k must be >= 1", r.field("nmi_k"));
    if (e.rank_k == 0) throw Error(ErrorCode::config, "rank_k must be >= 1", r.field("rank_k"));
  }
  {
    const auto r = root.object("distill");
    r.only({"mode", "sequence_mode", "seq_len", "steps", "batch_size", "instruction", "aux_weight", "aux_dataset",
            "projection_scale", "temperature", "sequences", "optimizer"});
    auto& d = cfg.distill;
    const auto mode = r.get<std::string>("mode", "seq2item");
    if (mode == "seq2item") d.mode = DistillMode::seq2item;
    else if (mode == "id2item") d.mode = DistillMode::id2item;
    else throw Error(ErrorCode::config, "mode must be seq2item or id2item", r.field("mode"));
    if (r.has("sequence_mode")) {
      const auto m = parse_sequence_mode(r.req<std::string>("sequence_mode"));
      if (!m) throw Error(ErrorCode::config, "unknown sequence mode", r.field("sequence_mode"));
      d.sequence_mode = *m;
    }
    d.seq_len = r.get("seq_len", d.seq_len);
    d.steps = r.get("steps", d.steps);
    d.batch_size = r.get("batch_size", d.batch_size);
    d.instruction = r.opt<std::size_t>("instruction");
    if (d.instruction && *d.instruction >= cfg.encoder.instructions)
      throw Error(ErrorCode::config, "instruction id exceeds encoder.instructions", r.field("instruction"));
    d.aux_weight = r.get("aux_weight", d.aux_weight);
    d.aux_dataset = r.get<std::string>("aux_dataset", "");
    d.projection_scale = r.get("projection_scale", d.projection_scale);
    d.tau_key = r.get<std::string>("temperature", cfg.tau_keys.front());
    tau_known(d.tau_key, r.field("temperature"));
    d.sequences = detail::resolve(cfg.data_dir, r.get<std::string>("sequences", SynthFiles::users));
    d.optimizer = detail::parse_optimizer(r.object("optimizer"));
    if (d.seq_len == 0) throw Error(ErrorCode::config, "seq_len must be >= 1", r.field("seq_len"));
    if (d.steps == 0) throw Error(ErrorCode::config, "steps must be >= 1", r.field("steps"));
    if (d.batch_size == 0) throw Error(ErrorCode::config, "batch_size must be >= 1", r.field("batch_size"));
    if (!(d.aux_weight >= 0.0)) throw Error(ErrorCode::config, "aux_weight must be >= 0", r.field("aux_weight"));
    if (!d.aux_dataset.empty()) {
      bool found = false;
      for (const auto& ds : cfg.datasets) found = found || ds.name == d.aux_dataset;
      if (!found) throw Error(ErrorCode::config, "unknown dataset '" + d.aux_dataset + "'", r.field("aux_dataset"));
    }
  }
  return cfg;
}

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open '" + path.string() + "'", path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::config, path.string() + " is not valid JSON: " + e.what(), path.string());
  }
}

inline PipelineConfig load_config(const std::filesystem::path& path, bool read_weights_from = true) {
  return parse_config(read_json_file(path), path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path(),
                      read_weights_from);
}

// ---------------------------------------------------------------------------
// Seeds and reports

/// --seed wins over OMNI_EMBED_SEED, which wins over the config, then 0.
inline std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, std::optional<std::uint64_t> config) {
  if (flag) return *flag;
  if (const char* env = std::getenv(kSeedEnv); env && *env) {
    char* end = nullptr;
    errno = 0;
    const auto v = std::strtoull(env, &end, 10);
    if (errno != 0 || *end != '\0' || env[0] == '-')
      throw Error(ErrorCode::config, std::string(kSeedEnv) + " must be a non-negative integer", kSeedEnv);
    return v;
  }
  return config.value_or(0);
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline constexpr std::array<const char*, 8> kEnvelopeFields = {"tool", "version", "build", "command",
                                                               "seed", "config", "config_hash", "timestamp"};

/// Adds the envelope common to every report to the command's result object.
/// `timestamp` is the only field allowed to differ between identical runs.
inline Json make_report(const std::string& command, std::uint64_t seed, const Json& config, Json result) {
  if (!result.is_object()) throw Error(ErrorCode::invalid_argument, "report result must be an object");
  for (const char* f : kEnvelopeFields)
    if (result.contains(f)) throw Error(ErrorCode::invalid_argument, std::string("report result uses reserved field '") + f + "'");
  Json r = std::move(result);
  r["tool"] = kToolName;
  r["version"] = kVersion;
  r["build"] = kBuild;
  r["command"] = command;
  r["seed"] = seed;
  r["config"] = config;
  r["config_hash"] = config_hash(config);
  r["timestamp"] = utc_timestamp();
  return r;
}

inline void write_json(const std::filesystem::path& path, const Json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot write '" + path.string() + "'", path.string());
  out << j.dump(2) << '\n';
}

}  // namespace omniembed
