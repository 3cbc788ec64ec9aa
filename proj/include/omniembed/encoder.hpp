/// \file encoder.hpp
/// Desk-scale omni-modal encoder.
///
/// Each available modality feature is projected to the shared width d, an
/// optional task-instruction token is prepended, every token goes through
/// one shared linear mixing layer, then tanh, and the tokens are mean
/// pooled:
///
///   n_m = mean_i tanh(M u_i)
///
/// The mixing layer stands in for a full fusion backbone. It keeps the
/// tokens -> mix -> tanh -> mean-pool shape of the pipeline, but tokens do
/// not attend to each other.
///
/// Alongside n_m the forward pass exposes the visual-only (n_v) and
/// text-only (n_t) pooled views and the raw visual token v, and, when the
/// view has vision, the late-fusion output z * v + (1 - z) * n_m.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <type_traits>
#include <utility>
#include <vector>

#include "omniembed/core.hpp"
#include "omniembed/datasets.hpp"
#include "omniembed/error.hpp"
#include "omniembed/losses.hpp"
#include "omniembed/rng.hpp"

namespace omniembed {

struct EncoderDims {
  ModalityDims raw;
  std::size_t shared = 64;
  std::size_t instructions = 4;
};

/// Every trainable tensor. Used both for the model and for its gradient.
struct EncoderParams {
  std::array<Matrix, 3> projection;  // indexed by Modality; d x raw
  Matrix mixing;                     // d x d
  Matrix instructions;               // n_instructions x d
  LateFusionGate gate;
  Vector log_tau;                    // one per temperature key

  static EncoderParams zeros_like(const EncoderParams& p) {
    EncoderParams z;
    for (std::size_t m = 0; m < 3; ++m) z.projection[m] = Matrix(p.projection[m].rows(), p.projection[m].cols());
    z.mixing = Matrix(p.mixing.rows(), p.mixing.cols());
    z.instructions = Matrix(p.instructions.rows(), p.instructions.cols());
    z.gate = LateFusionGate::zeros(p.gate.dim());
    z.log_tau.assign(p.log_tau.size(), 0.0);
    return z;
  }

  /// (name, values, weight-decayed) for every tensor, in a fixed order.
  template <class Self>
  static auto tensors_of(Self& self) {
    using Span = std::conditional_t<std::is_const_v<Self>, std::span<const double>, std::span<double>>;
    std::vector<std::tuple<std::string, Span, bool>> out;
    for (auto m : kModalities)
      out.emplace_back(std::string("proj/") + to_string(m), self.projection[static_cast<std::size_t>(m)].values(), true);
    out.emplace_back("mixing", self.mixing.values(), true);
    out.emplace_back("instructions", self.instructions.values(), true);
    out.emplace_back("gate/W", self.gate.w.values(), true);
    out.emplace_back("gate/b", Span(self.gate.b), true);
    out.emplace_back("log_tau", Span(self.log_tau), false);
    return out;
  }
  auto tensors() { return tensors_of(*this); }
  auto tensors() const { return tensors_of(*this); }

  TensorMap to_tensor_map() const {
    TensorMap out;
    for (const auto& [name, values, _] : tensors()) out[name] = Vector(values.begin(), values.end());
    return out;
  }

  void assign(const TensorMap& map) {
    for (auto& [name, values, _] : tensors()) {
      auto it = map.find(name);
      if (it == map.end()) continue;
      if (it->second.size() != values.size())
        throw Error(ErrorCode::dimension_mismatch, "EncoderParams::assign: size mismatch for '" + name + "'");
      std::copy(it->second.begin(), it->second.end(), values.begin());
    }
  }

  void add_scaled(const EncoderParams& other, double scale) {
    auto mine = tensors();
    auto theirs = other.tensors();
    for (std::size_t k = 0; k < mine.size(); ++k) axpy(scale, std::get<1>(theirs[k]), std::get<1>(mine[k]));
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& [_, values, __] : tensors()) s += dot(values, values);
    return s;
  }
};

class ToyEncoder {
 public:
  ToyEncoder() = default;

  /// Random initialisation scaled so pre-activations are O(1) for O(1)
  /// features. Temperatures start at `tau_init` for every key.
  static ToyEncoder initialize(const EncoderDims& dims, std::vector<std::string> tau_keys, std::uint64_t seed,
                               std::vector<double> tau_init = {}) {
    if (dims.shared == 0) throw Error(ErrorCode::invalid_argument, "ToyEncoder: shared dim must be positive");
    ToyEncoder enc;
    enc.dims_ = dims;
    enc.tau_keys_ = std::move(tau_keys);
    if (enc.tau_keys_.empty()) enc.tau_keys_.push_back("default");
    Rng rng(seed);
    const std::size_t d = dims.shared;
    auto gaussian = [&](Matrix& m, double scale) {
      for (auto& x : m.values()) x = rng.normal() * scale;
    };
    for (auto m : kModalities) {
      const std::size_t raw = dims.raw.of(m);
      auto& p = enc.params_.projection[static_cast<std::size_t>(m)];
      p = Matrix(d, raw);
      gaussian(p, 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(raw, 1))));
    }
    enc.params_.mixing = Matrix(d, d);
    gaussian(enc.params_.mixing, 1.0 / std::sqrt(static_cast<double>(d)));
    enc.params_.instructions = Matrix(dims.instructions, d);
    gaussian(enc.params_.instructions, 0.1);
    enc.params_.gate = LateFusionGate::zeros(d);
    gaussian(enc.params_.gate.w, 0.01);
    enc.params_.log_tau.resize(enc.tau_keys_.size());
    for (std::size_t k = 0; k < enc.tau_keys_.size(); ++k)
      enc.params_.log_tau[k] = std::log(k < tau_init.size() ? tau_init[k] : kRetrievalTauInit);
    return enc;
  }

  /// Encoder with explicit parameters (tests, checkpoints).
  static ToyEncoder from_params(const EncoderDims& dims, EncoderParams params, std::vector<std::string> tau_keys) {
    ToyEncoder enc;
    enc.dims_ = dims;
    enc.params_ = std::move(params);
    enc.tau_keys_ = std::move(tau_keys);
    enc.validate();
    return enc;
  }

  void validate() const {
    const std::size_t d = dims_.shared;
    for (auto m : kModalities) {
      const auto& p = params_.projection[static_cast<std::size_t>(m)];
      if (p.rows() != d || p.cols() != dims_.raw.of(m))
        throw Error(ErrorCode::dimension_mismatch, std::string("ToyEncoder: bad projection shape for ") + to_string(m));
    }
    if (params_.mixing.rows() != d || params_.mixing.cols() != d)
      throw Error(ErrorCode::dimension_mismatch, "ToyEncoder: mixing must be d x d");
    if (params_.instructions.cols() != d) throw Error(ErrorCode::dimension_mismatch, "ToyEncoder: bad instruction table");
    if (params_.gate.dim() != d || params_.gate.w.rows() != d || params_.gate.w.cols() != 2 * d)
      throw Error(ErrorCode::dimension_mismatch, "ToyEncoder: bad gate shape");
    if (params_.log_tau.size() != tau_keys_.size())
      throw Error(ErrorCode::dimension_mismatch, "ToyEncoder: one log_tau per temperature key");
    for (const auto& [name, values, _] : params_.tensors())
      if (!all_finite(values)) throw Error(ErrorCode::numeric, "ToyEncoder: non-finite parameter in " + name);
  }

  const EncoderDims& dims() const noexcept { return dims_; }
  std::size_t dim() const noexcept { return dims_.shared; }
  EncoderParams& params() noexcept { return params_; }
  const EncoderParams& params() const noexcept { return params_; }
  const std::vector<std::string>& tau_keys() const noexcept { return tau_keys_; }

  std::size_t tau_index(const std::string& key) const {
    for (std::size_t k = 0; k < tau_keys_.size(); ++k)
      if (tau_keys_[k] == key) return k;
    throw Error(ErrorCode::not_found, "ToyEncoder: unknown temperature key '" + key + "'", key);
  }
  double tau(std::size_t index) const { return std::exp(params_.log_tau.at(index)); }

 private:
  EncoderDims dims_;
  EncoderParams params_;
  std::vector<std::string> tau_keys_;
};

// ---------------------------------------------------------------------------
// Forward / backward

enum class TokenKind { instruction, vision, audio, text };

struct TokenCache {
  TokenKind kind;
  std::size_t source = 0;  // instruction row for instruction tokens
  const Vector* feature = nullptr;  // raw feature for modality tokens
  Vector input;   // u (projected token)
  Vector hidden;  // tanh(M u)
};

/// Everything backward needs for one encoded view.
struct ViewForward {
  std::vector<TokenCache> tokens;
  Embedding n_m;
  std::optional<std::size_t> vision_token;
  std::optional<std::size_t> text_token;
  std::optional<LateFusionCache> gate;

  /// Late-fusion output, or n_m when the view has no visual token.
  const Embedding& fused() const { return gate ? gate->fused : n_m; }

  ModalViews views() const {
    ModalViews mv;
    mv.n_m = n_m;
    if (vision_token) {
      mv.n_v = tokens[*vision_token].hidden;
      mv.v = tokens[*vision_token].hidden;
    }
    if (text_token) mv.n_t = tokens[*text_token].hidden;
    return mv;
  }
};

/// Upstream gradients for one view.
struct ViewGrad {
  Vector n_m, n_v, n_t, fused;

  explicit ViewGrad(std::size_t d = 0) : n_m(d, 0.0), n_v(d, 0.0), n_t(d, 0.0), fused(d, 0.0) {}
};

inline TokenKind token_kind(Modality m) {
  switch (m) {
    case Modality::vision: return TokenKind::vision;
    case Modality::audio: return TokenKind::audio;
    case Modality::text: return TokenKind::text;
  }
  return TokenKind::text;
}

/// Encodes `rec` restricted to `view`. An instruction id adds the learned
/// task token to the sequence.
inline ViewForward forward_view(const ToyEncoder& enc, const ItemRecord& rec, ModalitySet view,
                                std::optional<std::size_t> instruction) {
  const auto& p = enc.params();
  const std::size_t d = enc.dim();
  ViewForward out;
  if (instruction) {
    if (*instruction >= p.instructions.rows())
      throw Error(ErrorCode::invalid_argument, "forward: instruction id " + std::to_string(*instruction) + " out of range");
    TokenCache t{TokenKind::instruction, *instruction, nullptr, {}, {}};
    const auto row = p.instructions.row(*instruction);
    t.input.assign(row.begin(), row.end());
    out.tokens.push_back(std::move(t));
  }
  for (auto m : kModalities) {
    if (!view.contains(m) || !rec.has(m)) continue;
    const auto& x = rec.feature(m);
    const auto& proj = p.projection[static_cast<std::size_t>(m)];
    if (x.size() != proj.cols())
      throw Error(ErrorCode::dimension_mismatch, "forward: item '" + rec.id + "' " + to_string(m) + " feature has dim " +
                                                     std::to_string(x.size()));
    TokenCache t{token_kind(m), 0, &x, Vector(d), {}};
    matvec(proj, x, t.input);
    if (m == Modality::vision) out.vision_token = out.tokens.size();
    if (m == Modality::text) out.text_token = out.tokens.size();
    out.tokens.push_back(std::move(t));
  }
  if (!out.vision_token && !out.text_token &&
      std::none_of(out.tokens.begin(), out.tokens.end(), [](const auto& t) { return t.kind == TokenKind::audio; }))
    throw Error(ErrorCode::invalid_argument, "forward: item '" + rec.id + "' has no modality in view " + view.to_string());

  out.n_m.assign(d, 0.0);
  Vector pre(d);
  for (auto& t : out.tokens) {
    matvec(p.mixing, t.input, pre);
    t.hidden = tanh_normalize(pre);
    axpy(1.0, t.hidden, out.n_m);
  }
  for (auto& x : out.n_m) x /= static_cast<double>(out.tokens.size());
  if (out.vision_token) out.gate = late_fusion_forward(out.tokens[*out.vision_token].hidden, out.n_m, p.gate);
  return out;
}

/// Accumulates parameter gradients for one view into `grads`.
inline void backward_view(const ToyEncoder& enc, const ViewForward& fwd, const ViewGrad& upstream, EncoderParams& grads) {
  const auto& p = enc.params();
  const std::size_t d = enc.dim();
  Vector dn_m = upstream.n_m;
  Vector dv(d, 0.0);
  if (fwd.gate) late_fusion_backward(*fwd.gate, p.gate, upstream.fused, dv, dn_m, grads.gate.w, grads.gate.b);
  else axpy(1.0, upstream.fused, dn_m);  // fused() is n_m itself

  const double inv_t = 1.0 / static_cast<double>(fwd.tokens.size());
  Vector dh(d), da(d), du(d);
  for (std::size_t i = 0; i < fwd.tokens.size(); ++i) {
    const auto& t = fwd.tokens[i];
    for (std::size_t k = 0; k < d; ++k) dh[k] = dn_m[k] * inv_t;
    if (fwd.vision_token && *fwd.vision_token == i) {
      axpy(1.0, upstream.n_v, dh);
      axpy(1.0, dv, dh);
    }
    if (fwd.text_token && *fwd.text_token == i) axpy(1.0, upstream.n_t, dh);
    for (std::size_t k = 0; k < d; ++k) da[k] = dh[k] * (1.0 - t.hidden[k] * t.hidden[k]);
    outer_add(da, t.input, grads.mixing);
    std::fill(du.begin(), du.end(), 0.0);
    matvec_transposed_add(p.mixing, da, du);
    switch (t.kind) {
      case TokenKind::instruction: axpy(1.0, du, grads.instructions.row(t.source)); break;
      case TokenKind::vision: outer_add(du, *t.feature, grads.projection[0]); break;
      case TokenKind::audio: outer_add(du, *t.feature, grads.projection[1]); break;
      case TokenKind::text: outer_add(du, *t.feature, grads.projection[2]); break;
    }
  }
}

/// Forward over all of the record's modalities.
inline ModalViews forward(const ItemRecord& rec, std::optional<std::size_t> instruction, const ToyEncoder& enc) {
  return forward_view(enc, rec, rec.modalities(), instruction).views();
}

/// Main retrieval embedding (n_m) of a view.
inline Embedding embed(const ToyEncoder& enc, const ItemRecord& rec, ModalitySet view,
                       std::optional<std::size_t> instruction) {
  return forward_view(enc, rec, view, instruction).n_m;
}

}  // namespace omniembed
