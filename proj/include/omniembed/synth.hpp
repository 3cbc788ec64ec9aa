/// \file synth.hpp
/// Seeded synthetic corpus with known structure.
///
/// Every cluster has a unit latent center. Each positive pair draws its own
/// latent z = center + noise_sigma * g; the query record "q<k>" and target
/// record "t<k>" both render z into every modality through fixed
/// modality-specific linear maps, each with its own small view noise
/// (view_noise_ratio * noise_sigma in latent units). Hard clusters are
/// copies of a base cluster rotated to a fixed center cosine (>= 0.9).
///
/// Besides pairs the generator emits graded pairs whose score is the latent
/// cosine (COSENT ordering data), user viewing histories for seq2item, and
/// per-item ID embeddings for ID2item. A user's items come from arbitrary
/// clusters but share a personal "taste" offset along latent directions
/// orthogonal to every cluster center, so the history -> next-item relation
/// is invisible to pair training and has to be learned from sequences.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "omniembed/core.hpp"
#include "omniembed/datasets.hpp"
#include "omniembed/error.hpp"
#include "omniembed/rng.hpp"

namespace omniembed {

struct SynthSpec {
  std::size_t n_clusters = 8;
  std::size_t items_per_cluster = 125;  // positive pairs per cluster (two records each)
  double noise_sigma = 0.1;             // per-coordinate latent spread inside a cluster
  double view_noise_ratio = 0.3;        // record-level noise relative to noise_sigma
  ModalityDims dims;
  std::size_t latent_dim = 16;
  double hard_fraction = 0.25;  // share of clusters built as near-duplicates of another
  double hard_cosine = 0.95;    // center cosine of a hard cluster to its twin
  double audio_prob = 0.7;      // records without audio exercise partial views
  std::size_t heldout_pairs = 500;
  std::size_t graded_pairs = 1000;
  std::size_t users = 300;
  std::size_t heldout_users = 100;
  std::size_t history_len = 16;
  std::size_t taste_dims = 4;
  double taste_scale = 1.0;
  std::size_t id_dim = 16;
  std::size_t ids_per_item = 2;
  double id_noise = 0.1;

  void validate() const {
    auto need = [](bool ok, const char* field, const char* msg) {
      if (!ok) throw Error(ErrorCode::config, std::string("synth: ") + msg, field);
    };
    need(n_clusters >= 1, "n_clusters", "n_clusters must be >= 1");
    need(items_per_cluster >= 1, "items_per_cluster", "items_per_cluster must be >= 1");
    need(noise_sigma >= 0.0 && std::isfinite(noise_sigma), "noise_sigma", "noise_sigma must be >= 0");
    need(view_noise_ratio >= 0.0, "view_noise_ratio", "view_noise_ratio must be >= 0");
    need(latent_dim >= 1, "latent_dim", "latent_dim must be >= 1");
    need(hard_fraction >= 0.0 && hard_fraction <= 0.5, "hard_fraction", "hard_fraction must be in [0, 0.5]");
    need(hard_cosine >= 0.9 && hard_cosine < 1.0, "hard_cosine", "hard_cosine must be in [0.9, 1)");
    need(audio_prob >= 0.0 && audio_prob <= 1.0, "audio_prob", "audio_prob must be in [0, 1]");
    need(heldout_pairs < n_clusters * items_per_cluster, "heldout_pairs", "heldout_pairs must leave training pairs");
    need(heldout_users <= users, "heldout_users", "heldout_users must be <= users");
    need(history_len >= 2, "history_len", "history_len must be >= 2");
    need(taste_scale >= 0.0, "taste_scale", "taste_scale must be >= 0");
    for (auto m : kModalities) need(dims.of(m) >= 1, "dims", "modality dims must be >= 1");
  }
};

struct GoldPair {
  std::string query;
  std::string target;
  std::size_t cluster = 0;
  bool hard = false;  // cluster has a near-duplicate twin
};

struct GradedPair {
  std::string query;
  std::string target;
  double score = 0.0;
};

struct UserHistory {
  std::string user;
  std::vector<ItemRecord> items;  // oldest first
  bool heldout = false;
};

struct ClusterInfo {
  std::size_t id = 0;
  std::optional<std::size_t> twin;
  Vector center;
};

struct SynthData {
  std::vector<ItemRecord> items;
  std::vector<GoldPair> train_pairs;
  std::vector<GoldPair> heldout_pairs;
  std::vector<GradedPair> graded;
  std::vector<UserHistory> users;
  std::vector<ClusterInfo> clusters;
};

namespace detail {

inline Vector gaussian_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  Vector v(n);
  for (auto& x : v) x = rng.normal() * scale;
  return v;
}

inline void normalize_in_place(Vector& v) {
  const double n = norm(v);
  if (n > 0.0)
    for (auto& x : v) x /= n;
}

/// Gram-Schmidt against `basis`; falls back to the raw draw once the space
/// is exhausted.
inline Vector orthogonal_unit(Rng& rng, std::size_t dim, const std::vector<Vector>& basis) {
  Vector v = gaussian_vector(rng, dim);
  Vector raw = v;
  for (const auto& b : basis) axpy(-dot(v, b), b, v);
  if (norm(v) < 1e-8) v = raw;
  normalize_in_place(v);
  return v;
}

}  // namespace detail

inline SynthData gen_synthetic(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng root(seed);
  Rng rng_maps = root.fork(1), rng_centers = root.fork(2), rng_items = root.fork(3), rng_graded = root.fork(4),
      rng_users = root.fork(5), rng_split = root.fork(6);
  const std::size_t L = spec.latent_dim;

  // Modality renderers x_m = A_m z, entries N(0, 1) so features are O(|z|).
  std::array<Matrix, 3> render;
  for (auto m : kModalities) {
    auto& a = render[static_cast<std::size_t>(m)];
    a = Matrix(spec.dims.of(m), L);
    for (auto& x : a.values()) x = rng_maps.normal();
  }
  std::vector<Matrix> id_maps(spec.ids_per_item, Matrix(spec.id_dim, L));
  for (auto& b : id_maps)
    for (auto& x : b.values()) x = rng_maps.normal() / std::sqrt(static_cast<double>(L));

  SynthData data;
  const auto n_hard = static_cast<std::size_t>(std::llround(spec.hard_fraction * static_cast<double>(spec.n_clusters)));
  const std::size_t n_base = spec.n_clusters - n_hard;
  std::vector<Vector> basis;
  for (std::size_t c = 0; c < n_base; ++c) {
    basis.push_back(detail::orthogonal_unit(rng_centers, L, basis));
    data.clusters.push_back({c, std::nullopt, basis.back()});
  }
  // Hard cluster h twins base cluster h mod n_base: cos(center_h, center_twin) = hard_cosine.
  for (std::size_t h = 0; h < n_hard; ++h) {
    const std::size_t twin = h % n_base;
    const Vector u = detail::orthogonal_unit(rng_centers, L, basis);
    basis.push_back(u);
    Vector c(L);
    const double s = std::sqrt(1.0 - spec.hard_cosine * spec.hard_cosine);
    for (std::size_t i = 0; i < L; ++i) c[i] = spec.hard_cosine * data.clusters[twin].center[i] + s * u[i];
    data.clusters.push_back({n_base + h, twin, c});
    data.clusters[twin].twin = n_base + h;
  }

  std::vector<Vector> taste_basis;
  for (std::size_t t = 0; t < spec.taste_dims; ++t) {
    taste_basis.push_back(detail::orthogonal_unit(rng_centers, L, basis));
    basis.push_back(taste_basis.back());
  }

  const double view_sigma = spec.view_noise_ratio * spec.noise_sigma;
  auto render_record = [&](Rng& rng, const std::string& id, const Vector& z, std::size_t cluster) {
    ItemRecord rec;
    rec.id = id;
    for (auto m : kModalities) {
      if (m == Modality::audio && !rng.bernoulli(spec.audio_prob)) continue;
      Vector zv = z;
      if (view_sigma > 0.0)
        for (auto& x : zv) x += view_sigma * rng.normal();
      Vector x(spec.dims.of(m));
      matvec(render[static_cast<std::size_t>(m)], zv, x);
      rec.features.emplace(m, std::move(x));
    }
    rec.text_fields["title"] = "cluster " + std::to_string(cluster) + " item " + id;
    rec.text_fields["tags"] = "c" + std::to_string(cluster);
    rec.tags.insert("cluster:" + std::to_string(cluster));
    for (const auto& b : id_maps) {
      Vector e(spec.id_dim);
      matvec(b, z, e);
      for (auto& x : e) x += spec.id_noise * rng.normal();
      rec.id_embeddings.push_back(std::move(e));
    }
    return rec;
  };
  auto draw_latent = [&](Rng& rng, const Vector& center, double sigma) {
    Vector z = center;
    for (auto& x : z) x += sigma * rng.normal();
    return z;
  };

  std::vector<Vector> latents;
  std::vector<GoldPair> pairs;
  char buf[32];
  std::size_t k = 0;
  for (const auto& cl : data.clusters) {
    for (std::size_t i = 0; i < spec.items_per_cluster; ++i, ++k) {
      latents.push_back(draw_latent(rng_items, cl.center, spec.noise_sigma));
      std::snprintf(buf, sizeof buf, "%06zu", k);
      const bool hard = cl.twin.has_value();
      GoldPair p{std::string("q") + buf, std::string("t") + buf, cl.id, hard};
      data.items.push_back(render_record(rng_items, p.query, latents.back(), cl.id));
      data.items.push_back(render_record(rng_items, p.target, latents.back(), cl.id));
      pairs.push_back(std::move(p));
    }
  }

  // Held-out split: a seeded subset of pairs, kept in generation order.
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = 0; i < spec.heldout_pairs; ++i)
    std::swap(order[i], order[i + rng_split.uniform_index(order.size() - i)]);
  std::vector<char> heldout(pairs.size(), 0);
  for (std::size_t i = 0; i < spec.heldout_pairs; ++i) heldout[order[i]] = 1;
  std::vector<std::size_t> train_idx;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    (heldout[i] ? data.heldout_pairs : data.train_pairs).push_back(pairs[i]);
    if (!heldout[i]) train_idx.push_back(i);
  }

  // Graded pairs over training latents: half within a cluster, half anywhere.
  for (std::size_t g = 0; g < spec.graded_pairs && train_idx.size() > 1; ++g) {
    const auto a = train_idx[rng_graded.uniform_index(train_idx.size())];
    std::size_t b = a;
    while (b == a) {
      b = train_idx[rng_graded.uniform_index(train_idx.size())];
      if (rng_graded.bernoulli(0.5)) {
        const std::size_t c = pairs[a].cluster;
        std::vector<std::size_t> same;
        for (auto i : train_idx)
          if (pairs[i].cluster == c && i != a) same.push_back(i);
        if (!same.empty()) b = same[rng_graded.uniform_index(same.size())];
      }
    }
    data.graded.push_back({pairs[a].query, pairs[b].target, cosine(latents[a], latents[b])});
  }

  // Viewing histories: every item is a fresh latent from a random cluster
  // plus the user's taste offset; the last item is the most recent.
  static const std::vector<std::string> kBehaviors = {"like", "share", "comment", "follow", "finish"};
  for (std::size_t u = 0; u < spec.users; ++u) {
    UserHistory h;
    std::snprintf(buf, sizeof buf, "u%05zu", u);
    h.user = buf;
    h.heldout = u >= spec.users - spec.heldout_users;
    Vector taste(L, 0.0);
    for (const auto& b : taste_basis) axpy(spec.taste_scale * rng_users.normal(), b, taste);
    for (std::size_t i = 0; i < spec.history_len; ++i) {
      const auto& cl = data.clusters[rng_users.uniform_index(data.clusters.size())];
      Vector z = draw_latent(rng_users, cl.center, spec.noise_sigma);
      axpy(1.0, taste, z);
      std::snprintf(buf, sizeof buf, "/%03zu", i);
      auto rec = render_record(rng_users, h.user + buf, z, cl.id);
      rec.positive_behavior_count = rng_users.uniform_index(7);
      for (const auto& b : kBehaviors)
        if (rng_users.bernoulli(0.4)) rec.behavior_labels.insert(b);
      h.items.push_back(std::move(rec));
    }
    h.items.back().positive_behavior_count = std::max<std::size_t>(h.items.back().positive_behavior_count, 3);
    data.users.push_back(std::move(h));
  }
  return data;
}

// ---------------------------------------------------------------------------
// Files

inline nlohmann::json pair_to_json(const GoldPair& p) {
  return {{"query", p.query}, {"target", p.target}, {"cluster", p.cluster}, {"hard", p.hard}};
}

inline GoldPair pair_from_json(const nlohmann::json& j) {
  GoldPair p;
  p.query = j.at("query").get<std::string>();
  p.target = j.at("target").get<std::string>();
  p.cluster = j.value("cluster", std::size_t{0});
  p.hard = j.value("hard", false);
  return p;
}

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot open '" + path.string() + "' for writing", path.string());
  return out;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open '" + path.string() + "'", path.string());
  return in;
}

/// Parses every non-blank line of a JSONL file; errors name file and line.
template <class F>
void for_each_jsonl(const std::filesystem::path& path, F&& f) {
  auto in = open_in(path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      f(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::invalid_argument, path.string() + ":" + std::to_string(lineno) + ": " + e.what(),
                  path.string());
    }
  }
}

}  // namespace detail

inline void write_pairs(const std::filesystem::path& path, std::span<const GoldPair> pairs) {
  auto out = detail::open_out(path);
  for (const auto& p : pairs) out << pair_to_json(p).dump() << '\n';
}

inline std::vector<GoldPair> read_pairs(const std::filesystem::path& path) {
  std::vector<GoldPair> out;
  detail::for_each_jsonl(path, [&](const nlohmann::json& j) { out.push_back(pair_from_json(j)); });
  return out;
}

inline void write_graded(const std::filesystem::path& path, std::span<const GradedPair> pairs) {
  auto out = detail::open_out(path);
  for (const auto& p : pairs)
    out << nlohmann::json{{"query", p.query}, {"target", p.target}, {"score", p.score}}.dump() << '\n';
}

inline std::vector<GradedPair> read_graded(const std::filesystem::path& path) {
  std::vector<GradedPair> out;
  detail::for_each_jsonl(path, [&](const nlohmann::json& j) {
    out.push_back({j.at("query").get<std::string>(), j.at("target").get<std::string>(), j.at("score").get<double>()});
  });
  return out;
}

inline void write_users(const std::filesystem::path& path, std::span<const UserHistory> users) {
  auto out = detail::open_out(path);
  for (const auto& u : users) {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& rec : u.items) items.push_back(item_to_json(rec));
    out << nlohmann::json{{"user", u.user}, {"heldout", u.heldout}, {"items", items}}.dump() << '\n';
  }
}

inline std::vector<UserHistory> read_users(const std::filesystem::path& path, const ModalityDims& dims) {
  std::vector<UserHistory> out;
  detail::for_each_jsonl(path, [&](const nlohmann::json& j) {
    UserHistory u;
    u.user = j.at("user").get<std::string>();
    u.heldout = j.value("heldout", false);
    for (const auto& item : j.at("items")) u.items.push_back(item_from_json(item, dims));
    out.push_back(std::move(u));
  });
  return out;
}

inline nlohmann::json clusters_to_json(std::span<const ClusterInfo> clusters) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : clusters) {
    nlohmann::json j{{"id", c.id}, {"center", c.center}};
    j["twin"] = c.twin ? nlohmann::json(*c.twin) : nlohmann::json(nullptr);
    arr.push_back(std::move(j));
  }
  return arr;
}

/// File names written by write_synthetic, relative to the output directory.
struct SynthFiles {
  static constexpr const char* items = "items.jsonl";
  static constexpr const char* train_pairs = "pairs.train.jsonl";
  static constexpr const char* heldout_pairs = "pairs.heldout.jsonl";
  static constexpr const char* graded = "graded.jsonl";
  static constexpr const char* users = "sequences.jsonl";
  static constexpr const char* clusters = "clusters.json";
};

inline void write_synthetic(const std::filesystem::path& dir, const SynthData& data) {
  std::filesystem::create_directories(dir);
  write_items(dir / SynthFiles::items, data.items);
  write_pairs(dir / SynthFiles::train_pairs, data.train_pairs);
  write_pairs(dir / SynthFiles::heldout_pairs, data.heldout_pairs);
  write_graded(dir / SynthFiles::graded, data.graded);
  write_users(dir / SynthFiles::users, data.users);
  auto out = detail::open_out(dir / SynthFiles::clusters);
  out << clusters_to_json(data.clusters).dump(2) << '\n';
}

}  // namespace omniembed
