/// \file checkpoint.hpp
/// Encoder checkpoints: one embedding-format file per parameter tensor plus
/// a JSON manifest with the shapes and temperature keys. Values are stored
/// as float32, so a reload reproduces the parameters to float precision.
#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "omniembed/core.hpp"
#include "omniembed/embedding_io.hpp"
#include "omniembed/encoder.hpp"
#include "omniembed/error.hpp"

namespace omniembed {

inline constexpr const char* kCheckpointManifest = "manifest.json";
inline constexpr const char* kCheckpointFormat = "omniembed-checkpoint/1";

namespace detail {

inline std::string tensor_file(const std::string& name) {
  std::string f = name;
  for (auto& c : f)
    if (c == '/') c = '.';
  return f + ".emb";
}

inline std::pair<std::size_t, std::size_t> tensor_shape(const EncoderParams& p, const std::string& name) {
  for (auto m : kModalities)
    if (name == std::string("proj/") + to_string(m)) {
      const auto& x = p.projection[static_cast<std::size_t>(m)];
      return {x.rows(), x.cols()};
    }
  if (name == "mixing") return {p.mixing.rows(), p.mixing.cols()};
  if (name == "instructions") return {p.instructions.rows(), p.instructions.cols()};
  if (name == "gate/W") return {p.gate.w.rows(), p.gate.w.cols()};
  if (name == "gate/b") return {1, p.gate.b.size()};
  if (name == "log_tau") return {1, p.log_tau.size()};
  throw Error(ErrorCode::invalid_argument, "checkpoint: unknown tensor '" + name + "'");
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& dir, const ToyEncoder& enc) {
  std::filesystem::create_directories(dir);
  const auto& d = enc.dims();
  nlohmann::json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["dims"] = {{"vision", d.raw.vision}, {"audio", d.raw.audio}, {"text", d.raw.text},
                      {"shared", d.shared},     {"instructions", d.instructions}};
  manifest["tau_keys"] = enc.tau_keys();
  manifest["tensors"] = nlohmann::json::array();
  for (const auto& [name, values, _] : enc.params().tensors()) {
    const auto [rows, cols] = detail::tensor_shape(enc.params(), name);
    EmbeddingStore store(cols);
    for (std::size_t r = 0; r < rows; ++r) store.add(std::to_string(r), values.subspan(r * cols, cols));
    const auto file = detail::tensor_file(name);
    write_embeddings(dir / file, store);
    manifest["tensors"].push_back({{"name", name}, {"file", file}, {"rows", rows}, {"cols", cols}});
  }
  std::ofstream out(dir / kCheckpointManifest);
  if (!out) throw Error(ErrorCode::io, "cannot write checkpoint manifest", (dir / kCheckpointManifest).string());
  out << manifest.dump(2) << '\n';
}

inline ToyEncoder load_checkpoint(const std::filesystem::path& dir) {
  const auto path = dir / kCheckpointManifest;
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open checkpoint manifest '" + path.string() + "'", path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::io, "checkpoint manifest is not valid JSON: " + std::string(e.what()), path.string());
  }
  if (manifest.value("format", "") != kCheckpointFormat)
    throw Error(ErrorCode::io, "unsupported checkpoint format", path.string());
  EncoderDims dims;
  const auto& jd = manifest.at("dims");
  dims.raw = {jd.at("vision").get<std::size_t>(), jd.at("audio").get<std::size_t>(), jd.at("text").get<std::size_t>()};
  dims.shared = jd.at("shared").get<std::size_t>();
  dims.instructions = jd.at("instructions").get<std::size_t>();
  const auto tau_keys = manifest.at("tau_keys").get<std::vector<std::string>>();

  // Start from a correctly shaped encoder and overwrite every tensor.
  auto enc = ToyEncoder::initialize(dims, tau_keys, 0);
  TensorMap tensors;
  for (const auto& t : manifest.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const auto store = read_embeddings(dir / t.at("file").get<std::string>());
    const auto [rows, cols] = detail::tensor_shape(enc.params(), name);
    if (store.size() != rows || store.dim() != cols)
      throw Error(ErrorCode::dimension_mismatch, "checkpoint: tensor '" + name + "' has the wrong shape", path.string());
    Vector flat;
    for (std::size_t r = 0; r < rows; ++r) {
      const auto row = store.row(r);
      flat.insert(flat.end(), row.begin(), row.end());
    }
    tensors[name] = std::move(flat);
  }
  for (const auto& [name, values, _] : enc.params().tensors())
    if (!tensors.count(name)) throw Error(ErrorCode::io, "checkpoint: missing tensor '" + name + "'", path.string());
  enc.params().assign(tensors);
  enc.validate();
  return enc;
}

}  // namespace omniembed
