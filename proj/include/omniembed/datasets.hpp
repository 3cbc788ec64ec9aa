/// \file datasets.hpp
/// Item records, JSONL ingestion, text-field composition, modality pattern
/// enumeration and seq2item sample construction.
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "omniembed/core.hpp"
#include "omniembed/error.hpp"
#include "omniembed/rng.hpp"

namespace omniembed {

enum class Modality : std::uint8_t { vision = 0, audio = 1, text = 2 };

inline constexpr std::array<Modality, 3> kModalities = {Modality::vision, Modality::audio, Modality::text};

inline const char* to_string(Modality m) {
  switch (m) {
    case Modality::vision: return "vision";
    case Modality::audio: return "audio";
    case Modality::text: return "text";
  }
  return "?";
}

inline std::optional<Modality> parse_modality(std::string_view s) {
  for (auto m : kModalities)
    if (s == to_string(m)) return m;
  return std::nullopt;
}

/// Small bitset over the three modalities.
class ModalitySet {
 public:
  constexpr ModalitySet() = default;
  constexpr ModalitySet(std::initializer_list<Modality> ms) {
    for (auto m : ms) insert(m);
  }
  static constexpr ModalitySet all() { return {Modality::vision, Modality::audio, Modality::text}; }

  constexpr void insert(Modality m) { bits_ |= bit(m); }
  constexpr bool contains(Modality m) const { return (bits_ & bit(m)) != 0; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr bool subset_of(ModalitySet other) const { return (bits_ & ~other.bits_) == 0; }
  constexpr ModalitySet intersect(ModalitySet other) const { return from_bits(bits_ & other.bits_); }
  std::size_t count() const { return static_cast<std::size_t>(std::popcount(bits_)); }

  constexpr friend bool operator==(ModalitySet, ModalitySet) = default;

  std::string to_string() const {
    std::string out;
    for (auto m : kModalities) {
      if (!contains(m)) continue;
      if (!out.empty()) out += '+';
      out += omniembed::to_string(m);
    }
    return out.empty() ? "none" : out;
  }

 private:
  static constexpr std::uint8_t bit(Modality m) { return static_cast<std::uint8_t>(1u << static_cast<unsigned>(m)); }
  static constexpr ModalitySet from_bits(std::uint8_t b) {
    ModalitySet s;
    s.bits_ = b;
    return s;
  }
  std::uint8_t bits_ = 0;
};

/// Raw feature width per modality.
struct ModalityDims {
  std::size_t vision = 32;
  std::size_t audio = 16;
  std::size_t text = 24;

  std::size_t of(Modality m) const {
    switch (m) {
      case Modality::vision: return vision;
      case Modality::audio: return audio;
      case Modality::text: return text;
    }
    return 0;
  }
};

inline constexpr std::array<const char*, 5> kTextFieldOrder = {"title", "ocr", "asr", "nickname", "tags"};

struct ItemRecord {
  std::string id;
  std::map<Modality, Vector> features;
  std::map<std::string, std::string> text_fields;
  std::set<std::string> tags;
  std::set<std::string> behavior_labels;
  std::size_t positive_behavior_count = 0;
  // Recommender-side ID embeddings, only present in distillation data.
  std::vector<Vector> id_embeddings;

  bool has(Modality m) const { return features.count(m) != 0; }

  ModalitySet modalities() const {
    ModalitySet s;
    for (const auto& [m, _] : features) s.insert(m);
    return s;
  }

  const Vector& feature(Modality m) const {
    auto it = features.find(m);
    if (it == features.end())
      throw Error(ErrorCode::not_found, "item '" + id + "' has no " + to_string(m) + " feature");
    return it->second;
  }

  friend bool operator==(const ItemRecord&, const ItemRecord&) = default;
};

// ---------------------------------------------------------------------------
// JSONL ingestion

inline nlohmann::json item_to_json(const ItemRecord& rec) {
  nlohmann::json j;
  j["id"] = rec.id;
  nlohmann::json features = nlohmann::json::object();
  for (const auto& [m, v] : rec.features) features[to_string(m)] = v;
  j["features"] = features;
  j["text_fields"] = rec.text_fields;
  j["tags"] = rec.tags;
  j["behavior_labels"] = rec.behavior_labels;
  j["positive_behavior_count"] = rec.positive_behavior_count;
  if (!rec.id_embeddings.empty()) j["id_embeddings"] = rec.id_embeddings;
  return j;
}

/// Parses and validates one record. Audio may be a flat vector or a list of
/// chunk vectors, which is collapsed with aggregate_audio_chunks.
inline ItemRecord item_from_json(const nlohmann::json& j, const ModalityDims& dims) {
  if (!j.is_object()) throw Error(ErrorCode::invalid_argument, "record is not a JSON object");
  ItemRecord rec;
  rec.id = j.at("id").get<std::string>();
  if (rec.id.empty()) throw Error(ErrorCode::invalid_argument, "record id is empty");
  if (j.contains("features")) {
    for (const auto& [key, value] : j.at("features").items()) {
      auto m = parse_modality(key);
      if (!m) throw Error(ErrorCode::invalid_argument, "unknown modality '" + key + "'");
      Vector v;
      if (*m == Modality::audio && !value.empty() && value.front().is_array()) {
        auto chunks = value.get<std::vector<Vector>>();
        v = aggregate_audio_chunks(chunks);
      } else {
        v = value.get<Vector>();
      }
      if (v.size() != dims.of(*m))
        throw Error(ErrorCode::dimension_mismatch, std::string(to_string(*m)) + " feature has dim " +
                                                       std::to_string(v.size()) + ", expected " +
                                                       std::to_string(dims.of(*m)));
      if (!all_finite(v)) throw Error(ErrorCode::numeric, std::string(to_string(*m)) + " feature is not finite");
      rec.features.emplace(*m, std::move(v));
    }
  }
  if (rec.features.empty()) throw Error(ErrorCode::invalid_argument, "record '" + rec.id + "' has no modality feature");
  if (j.contains("text_fields")) rec.text_fields = j.at("text_fields").get<std::map<std::string, std::string>>();
  if (j.contains("tags")) rec.tags = j.at("tags").get<std::set<std::string>>();
  if (j.contains("behavior_labels")) rec.behavior_labels = j.at("behavior_labels").get<std::set<std::string>>();
  if (j.contains("positive_behavior_count")) {
    const auto c = j.at("positive_behavior_count").get<long long>();
    if (c < 0) throw Error(ErrorCode::invalid_argument, "positive_behavior_count is negative");
    rec.positive_behavior_count = static_cast<std::size_t>(c);
  }
  if (j.contains("id_embeddings")) rec.id_embeddings = j.at("id_embeddings").get<std::vector<Vector>>();
  return rec;
}

struct LoadError {
  std::size_t line = 0;  // 1-based
  std::string message;
};

struct LoadResult {
  std::vector<ItemRecord> items;
  std::vector<LoadError> errors;
};

/// Reads newline-delimited item records. Bad lines land in `errors` with
/// their line number; blank lines are ignored.
inline LoadResult load_items(std::istream& in, const ModalityDims& dims) {
  LoadResult result;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto rec = item_from_json(nlohmann::json::parse(line), dims);
      if (!seen.insert(rec.id).second) throw Error(ErrorCode::invalid_argument, "duplicate id '" + rec.id + "'");
      result.items.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      result.errors.push_back({lineno, e.what()});
    } catch (const Error& e) {
      result.errors.push_back({lineno, e.what()});
    }
  }
  return result;
}

inline LoadResult load_items(const std::filesystem::path& path, const ModalityDims& dims) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open '" + path.string() + "'", path.string());
  return load_items(in, dims);
}

inline void write_items(std::ostream& out, std::span<const ItemRecord> items) {
  for (const auto& rec : items) out << item_to_json(rec).dump() << '\n';
}

inline void write_items(const std::filesystem::path& path, std::span<const ItemRecord> items) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::io, "cannot open '" + path.string() + "' for writing", path.string());
  write_items(out, items);
}

// ---------------------------------------------------------------------------
// Text composition

/// Concatenates title, ocr, asr, nickname and tags in that order. Every field
/// but the title is dropped independently with probability `drop_prob`; one
/// uniform draw is consumed per droppable field so the stream is stable.
/// Empty fields and exact duplicates of an earlier field are skipped.
inline std::string compose_text(const ItemRecord& rec, double drop_prob, std::uint64_t seed,
                                std::string_view separator = " | ") {
  if (!(drop_prob >= 0.0 && drop_prob < 1.0))
    throw Error(ErrorCode::invalid_argument, "compose_text: drop_prob must be in [0, 1)");
  Rng rng(seed);
  std::vector<std::string> kept;
  for (std::size_t i = 0; i < kTextFieldOrder.size(); ++i) {
    const std::string key = kTextFieldOrder[i];
    std::string value;
    if (auto it = rec.text_fields.find(key); it != rec.text_fields.end()) {
      value = it->second;
    } else if (key == "tags" && !rec.tags.empty()) {
      for (const auto& t : rec.tags) value += (value.empty() ? "" : " ") + t;
    }
    if (i > 0 && rng.uniform() < drop_prob) continue;
    if (value.empty()) continue;
    if (std::find(kept.begin(), kept.end(), value) != kept.end()) continue;
    kept.push_back(std::move(value));
  }
  std::string out;
  for (std::size_t i = 0; i < kept.size(); ++i) {
    if (i) out += separator;
    out += kept[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset specs and pattern matching

enum class MetaTask { i2i, q2i, cls, seq2item, id2item };

inline const char* to_string(MetaTask t) {
  switch (t) {
    case MetaTask::i2i: return "i2i";
    case MetaTask::q2i: return "q2i";
    case MetaTask::cls: return "cls";
    case MetaTask::seq2item: return "seq2item";
    case MetaTask::id2item: return "id2item";
  }
  return "?";
}

inline std::optional<MetaTask> parse_meta_task(std::string_view s) {
  for (auto t : {MetaTask::i2i, MetaTask::q2i, MetaTask::cls, MetaTask::seq2item, MetaTask::id2item})
    if (s == to_string(t)) return t;
  return std::nullopt;
}

/// Query/target modality patterns. "Image" is the vision feature alone;
/// "video" is vision plus audio when the item carries audio.
enum class Pattern { ITC, IIC, VTC, VVC, TTC, OOC };

inline const char* to_string(Pattern p) {
  switch (p) {
    case Pattern::ITC: return "ITC";
    case Pattern::IIC: return "IIC";
    case Pattern::VTC: return "VTC";
    case Pattern::VVC: return "VVC";
    case Pattern::TTC: return "TTC";
    case Pattern::OOC: return "OOC";
  }
  return "?";
}

inline std::optional<Pattern> parse_pattern(std::string_view s) {
  for (auto p : {Pattern::ITC, Pattern::IIC, Pattern::VTC, Pattern::VVC, Pattern::TTC, Pattern::OOC})
    if (s == to_string(p)) return p;
  return std::nullopt;
}

struct PatternRequirement {
  ModalitySet query;   // must all be present on the query side
  ModalitySet target;  // must all be present on the target side
};

inline PatternRequirement requirement(Pattern p) {
  switch (p) {
    case Pattern::ITC: return {{Modality::vision}, {Modality::text}};
    case Pattern::IIC: return {{Modality::vision}, {Modality::vision}};
    case Pattern::VTC: return {{Modality::vision}, {Modality::text}};
    case Pattern::VVC: return {{Modality::vision}, {Modality::vision}};
    case Pattern::TTC: return {{Modality::text}, {Modality::text}};
    case Pattern::OOC: return {{}, {}};
  }
  return {};
}

struct DatasetSpec {
  std::string name;
  MetaTask meta_task = MetaTask::i2i;
  ModalitySet query_modalities = ModalitySet::all();
  ModalitySet target_modalities = ModalitySet::all();
  std::vector<Pattern> patterns = {Pattern::OOC};
  std::size_t instruction_id = 0;

  void validate() const {
    if (patterns.empty()) throw Error(ErrorCode::config, "dataset '" + name + "': patterns must be non-empty", "patterns");
    for (auto p : patterns) {
      const auto req = requirement(p);
      if (!req.query.subset_of(query_modalities) || !req.target.subset_of(target_modalities))
        throw Error(ErrorCode::config,
                    "dataset '" + name + "': pattern " + to_string(p) + " needs modalities not declared", "patterns");
    }
  }
};

struct PatternView {
  Pattern pattern;
  ModalitySet query;
  ModalitySet target;

  friend bool operator==(const PatternView&, const PatternView&) = default;
};

/// Modalities the given pattern reads from an item with `available`
/// features, or nullopt when the pattern cannot be formed.
inline std::optional<std::pair<ModalitySet, ModalitySet>> pattern_views(Pattern p, ModalitySet query_available,
                                                                        ModalitySet target_available) {
  const auto req = requirement(p);
  if (!req.query.subset_of(query_available) || !req.target.subset_of(target_available)) return std::nullopt;
  auto video = [](ModalitySet avail) {
    ModalitySet s{Modality::vision};
    if (avail.contains(Modality::audio)) s.insert(Modality::audio);
    return s;
  };
  switch (p) {
    case Pattern::ITC: return std::pair{ModalitySet{Modality::vision}, ModalitySet{Modality::text}};
    case Pattern::IIC: return std::pair{ModalitySet{Modality::vision}, ModalitySet{Modality::vision}};
    case Pattern::VTC: return std::pair{video(query_available), ModalitySet{Modality::text}};
    case Pattern::VVC: return std::pair{video(query_available), video(target_available)};
    case Pattern::TTC: return std::pair{ModalitySet{Modality::text}, ModalitySet{Modality::text}};
    case Pattern::OOC:
      if (query_available.empty() || target_available.empty()) return std::nullopt;
      return std::pair{query_available, target_available};
  }
  return std::nullopt;
}

/// One view pair per feasible pattern of the spec, in spec order. Patterns
/// whose modalities are missing on either side are skipped.
inline std::vector<PatternView> enumerate_patterns(const ItemRecord& query, const ItemRecord& target,
                                                   const DatasetSpec& spec) {
  std::vector<PatternView> out;
  const auto qa = query.modalities().intersect(spec.query_modalities);
  const auto ta = target.modalities().intersect(spec.target_modalities);
  for (auto p : spec.patterns) {
    if (auto views = pattern_views(p, qa, ta)) out.push_back({p, views->first, views->second});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sequence samples

template <class T>
double jaccard(const std::set<T>& a, const std::set<T>& b) {
  if (a.empty() && b.empty()) return 0.0;
  std::size_t inter = 0;
  for (const auto& x : a) inter += b.count(x);
  const std::size_t uni = a.size() + b.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

enum class SequenceMode { content_single_peak, content_multi_peak, collab_single_peak, collab_multi_peak };

inline const char* to_string(SequenceMode m) {
  switch (m) {
    case SequenceMode::content_single_peak: return "content_single_peak";
    case SequenceMode::content_multi_peak: return "content_multi_peak";
    case SequenceMode::collab_single_peak: return "collab_single_peak";
    case SequenceMode::collab_multi_peak: return "collab_multi_peak";
  }
  return "?";
}

inline std::optional<SequenceMode> parse_sequence_mode(std::string_view s) {
  for (auto m : {SequenceMode::content_single_peak, SequenceMode::content_multi_peak, SequenceMode::collab_single_peak,
                 SequenceMode::collab_multi_peak})
    if (s == to_string(m)) return m;
  return std::nullopt;
}

inline bool is_single_peak(SequenceMode m) {
  return m == SequenceMode::content_single_peak || m == SequenceMode::collab_single_peak;
}
inline bool is_content_mode(SequenceMode m) {
  return m == SequenceMode::content_single_peak || m == SequenceMode::content_multi_peak;
}

struct SequenceSample {
  std::vector<std::string> history;  // most recent last
  std::string target;
  SequenceMode mode = SequenceMode::content_single_peak;
  bool short_history = false;  // fewer survivors than the requested length
};

using ItemEmbedder = std::function<Embedding(const ItemRecord&)>;

inline constexpr std::size_t kSinglePeakMinBehaviors = 3;
inline constexpr std::size_t kMultiPeakMinBehaviors = 1;
inline constexpr double kMultiPeakJaccard = 0.5;

/// Builds the (at most one) seq2item sample for a user's viewing history,
/// given oldest first. Items are filtered by positive-behaviour count; the
/// most recent survivor becomes the target. Multi-peak modes keep items whose
/// behaviour-label Jaccard with the target exceeds 0.5. Content modes keep
/// the `seq_len` items closest to the target under `embed`; collaborative
/// modes group items by identical label sets and fill the history in
/// proportion to group sizes, most recent first within each group.
inline std::vector<SequenceSample> build_sequence_samples(std::span<const ItemRecord> history_items, SequenceMode mode,
                                                          std::size_t seq_len = 10, const ItemEmbedder& embed = {}) {
  if (seq_len == 0) throw Error(ErrorCode::invalid_argument, "build_sequence_samples: seq_len must be >= 1");
  if (is_content_mode(mode) && !embed)
    throw Error(ErrorCode::invalid_argument, "build_sequence_samples: content modes need an embedder");

  const std::size_t min_behaviors = is_single_peak(mode) ? kSinglePeakMinBehaviors : kMultiPeakMinBehaviors;
  std::vector<std::size_t> survivors;
  for (std::size_t i = 0; i < history_items.size(); ++i)
    if (history_items[i].positive_behavior_count >= min_behaviors) survivors.push_back(i);
  if (survivors.empty()) return {};

  const ItemRecord& target = history_items[survivors.back()];
  survivors.pop_back();
  std::erase_if(survivors, [&](std::size_t i) { return history_items[i].id == target.id; });
  if (!is_single_peak(mode)) {
    std::erase_if(survivors, [&](std::size_t i) {
      return !(jaccard(history_items[i].behavior_labels, target.behavior_labels) > kMultiPeakJaccard);
    });
  }
  if (survivors.empty()) return {};

  std::vector<std::size_t> chosen;
  if (is_content_mode(mode)) {
    const Embedding te = embed(target);
    std::vector<std::pair<double, std::size_t>> scored;
    for (auto i : survivors) scored.emplace_back(cosine(embed(history_items[i]), te), i);
    // Stable: equal scores keep the more recent item first.
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second > b.second;
    });
    for (std::size_t k = 0; k < std::min(seq_len, scored.size()); ++k) chosen.push_back(scored[k].second);
  } else {
    std::map<std::set<std::string>, std::vector<std::size_t>> groups;
    for (auto i : survivors) groups[history_items[i].behavior_labels].push_back(i);
    const std::size_t budget = std::min(seq_len, survivors.size());
    // Largest-remainder apportionment of the budget across groups.
    std::vector<std::pair<const std::set<std::string>*, std::vector<std::size_t>*>> gs;
    for (auto& [labels, members] : groups) gs.emplace_back(&labels, &members);
    std::vector<std::size_t> quota(gs.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t g = 0; g < gs.size(); ++g) {
      const double exact = static_cast<double>(budget) * static_cast<double>(gs[g].second->size()) /
                           static_cast<double>(survivors.size());
      quota[g] = static_cast<std::size_t>(exact);
      assigned += quota[g];
      remainders.emplace_back(exact - static_cast<double>(quota[g]), g);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; assigned < budget && r < remainders.size(); ++r, ++assigned) ++quota[remainders[r].second];
    for (std::size_t g = 0; g < gs.size(); ++g) {
      const auto& members = *gs[g].second;
      for (std::size_t k = 0; k < quota[g] && k < members.size(); ++k) chosen.push_back(members[members.size() - 1 - k]);
    }
  }
  std::sort(chosen.begin(), chosen.end());

  SequenceSample sample;
  sample.mode = mode;
  sample.target = target.id;
  for (auto i : chosen) sample.history.push_back(history_items[i].id);
  sample.short_history = sample.history.size() < seq_len;
  return {std::move(sample)};
}

}  // namespace omniembed
