/// \file losses.hpp
/// Training objectives with analytic gradients.
///
/// Every loss returns a LossOutput whose gradient bundle is keyed by input
/// name ("query", "positive", "negative/3", "log_tau", ...). Temperatures are
/// parameterised as tau = exp(log_tau), so the temperature gradient is always
/// reported with respect to log_tau.
///
/// finite_diff_check certifies any of these against central differences.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "omniembed/core.hpp"
#include "omniembed/error.hpp"

namespace omniembed {

using TensorMap = std::map<std::string, Vector>;
using GradientBundle = TensorMap;

/// dst[key] += scale * src[key] for every key of src.
inline void accumulate(GradientBundle& dst, const GradientBundle& src, double scale = 1.0) {
  for (const auto& [key, g] : src) {
    auto& d = dst[key];
    if (d.empty()) d.assign(g.size(), 0.0);
    if (d.size() != g.size()) throw Error(ErrorCode::dimension_mismatch, "accumulate: shape mismatch for '" + key + "'");
    axpy(scale, g, d);
  }
}

inline double global_norm(const GradientBundle& g) {
  double s = 0.0;
  for (const auto& [_, v] : g) s += dot(v, v);
  return std::sqrt(s);
}

struct LossOutput {
  double loss = 0.0;
  GradientBundle grad;
  bool flagged = false;  // a degenerate case (empty negatives, missing view, ...)
};

struct LossParams {
  double cosent_weight = 1.0;       // lambda
  double micl_weight = 0.1;         // alpha
  double late_fusion_weight = 0.1;  // beta
};

inline constexpr double kRetrievalTauInit = 0.07;
inline constexpr double kClassificationTauInit = 0.05;

namespace detail {

struct ScoreNce {
  double loss = 0.0;
  Vector dscores;  // dL/dscore_j
  double dlog_tau = 0.0;
};

/// -log softmax(scores / tau)[0]. scores[0] is the positive.
inline ScoreNce nce_from_scores(std::span<const double> scores, double tau) {
  ScoreNce r;
  r.dscores.assign(scores.size(), 0.0);
  if (scores.size() <= 1) return r;
  double mx = -std::numeric_limits<double>::infinity();
  for (double s : scores) mx = std::max(mx, s / tau);
  double z = 0.0;
  for (double s : scores) z += std::exp(s / tau - mx);
  const double lse = mx + std::log(z);
  r.loss = lse - scores[0] / tau;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    const double p = std::exp(scores[j] / tau - lse);
    r.dscores[j] = (p - (j == 0 ? 1.0 : 0.0)) / tau;
    r.dlog_tau -= r.dscores[j] * scores[j];
  }
  return r;
}

inline void check_tau(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw Error(ErrorCode::invalid_argument, "temperature must be positive");
}

inline void check_dims(std::size_t dim, std::span<const double> v, const char* what) {
  if (v.size() != dim)
    throw Error(ErrorCode::dimension_mismatch, std::string(what) + ": dimension " + std::to_string(v.size()) +
                                                   " does not match " + std::to_string(dim));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// NCE

/// InfoNCE over cosine logits. Without negatives the softmax is over a
/// single term, so the loss is 0 and the result is flagged.
inline LossOutput nce_loss(std::span<const double> query, std::span<const double> positive,
                           std::span<const Embedding> negatives, double tau) {
  detail::check_tau(tau);
  const std::size_t dim = query.size();
  detail::check_dims(dim, positive, "nce_loss positive");
  for (const auto& n : negatives) detail::check_dims(dim, n, "nce_loss negative");

  LossOutput out;
  auto& dq = out.grad["query"] = Vector(dim, 0.0);
  auto& dp = out.grad["positive"] = Vector(dim, 0.0);
  std::vector<Vector*> dn;
  for (std::size_t j = 0; j < negatives.size(); ++j)
    dn.push_back(&(out.grad["negative/" + std::to_string(j)] = Vector(dim, 0.0)));
  out.grad["log_tau"] = Vector(1, 0.0);
  if (negatives.empty()) {
    out.flagged = true;
    return out;
  }

  Vector scores(negatives.size() + 1);
  scores[0] = cosine(query, positive);
  for (std::size_t j = 0; j < negatives.size(); ++j) scores[j + 1] = cosine(query, negatives[j]);
  const auto r = detail::nce_from_scores(scores, tau);
  out.loss = r.loss;
  cosine_backward(query, positive, r.dscores[0], dq, dp);
  for (std::size_t j = 0; j < negatives.size(); ++j) cosine_backward(query, negatives[j], r.dscores[j + 1], dq, *dn[j]);
  out.grad["log_tau"][0] = r.dlog_tau;
  return out;
}

/// Sum of nce_loss over every nested prefix, sharing one temperature.
inline LossOutput nce_mrl_loss(std::span<const double> query, std::span<const double> positive,
                               std::span<const Embedding> negatives, const MrlDims& dims, double tau) {
  dims.validate_for(query.size());
  const std::size_t dim = query.size();
  LossOutput out;
  out.grad["query"] = Vector(dim, 0.0);
  out.grad["positive"] = Vector(dim, 0.0);
  for (std::size_t j = 0; j < negatives.size(); ++j) out.grad["negative/" + std::to_string(j)] = Vector(dim, 0.0);
  out.grad["log_tau"] = Vector(1, 0.0);
  for (std::size_t d : dims) {
    std::vector<Embedding> negs;
    negs.reserve(negatives.size());
    for (const auto& n : negatives) {
      detail::check_dims(dim, n, "nce_mrl_loss negative");
      negs.emplace_back(n.begin(), n.begin() + static_cast<std::ptrdiff_t>(d));
    }
    const auto slice = nce_loss(query.first(d), positive.first(d), negs, tau);
    out.loss += slice.loss;
    out.flagged = out.flagged || slice.flagged;
    for (const auto& [key, g] : slice.grad) axpy(1.0, g, std::span<double>(out.grad[key]).first(g.size()));
  }
  return out;
}

/// InfoNCE whose denominator holds mined hard negatives next to the random
/// (in-batch) ones.
inline LossOutput hard_contrastive_loss(std::span<const double> query, std::span<const double> positive,
                                        std::span<const Embedding> hard, std::span<const Embedding> random,
                                        double tau) {
  std::vector<Embedding> negs(hard.begin(), hard.end());
  negs.insert(negs.end(), random.begin(), random.end());
  auto inner = nce_loss(query, positive, negs, tau);
  LossOutput out;
  out.loss = inner.loss;
  out.flagged = inner.flagged;
  out.grad["query"] = std::move(inner.grad["query"]);
  out.grad["positive"] = std::move(inner.grad["positive"]);
  out.grad["log_tau"] = std::move(inner.grad["log_tau"]);
  for (std::size_t j = 0; j < hard.size(); ++j)
    out.grad["hard/" + std::to_string(j)] = std::move(inner.grad["negative/" + std::to_string(j)]);
  for (std::size_t j = 0; j < random.size(); ++j)
    out.grad["random/" + std::to_string(j)] = std::move(inner.grad["negative/" + std::to_string(hard.size() + j)]);
  return out;
}

// ---------------------------------------------------------------------------
// COSENT

struct PairSimilarity {
  std::string pair;
  double cosine = 0.0;
};

struct PairOrder {
  std::string higher;  // pair that should score higher
  std::string lower;
};

/// log(1 + sum over ordered pairs of exp((cos_lower - cos_higher) / tau)).
/// Gradients are keyed "sim/<pair>".
inline LossOutput cosent_loss(std::span<const PairSimilarity> sims, std::span<const PairOrder> order, double tau) {
  detail::check_tau(tau);
  std::map<std::string, double> by_id;
  LossOutput out;
  for (const auto& s : sims) {
    by_id[s.pair] = s.cosine;
    out.grad["sim/" + s.pair] = Vector(1, 0.0);
  }
  out.grad["log_tau"] = Vector(1, 0.0);
  if (order.empty()) return out;

  Vector x(order.size());
  double mx = 0.0;  // the implicit "1" term is exp(0)
  for (std::size_t k = 0; k < order.size(); ++k) {
    auto hi = by_id.find(order[k].higher);
    auto lo = by_id.find(order[k].lower);
    if (hi == by_id.end() || lo == by_id.end())
      throw Error(ErrorCode::not_found, "cosent_loss: ordering references an unknown pair");
    x[k] = (lo->second - hi->second) / tau;
    mx = std::max(mx, x[k]);
  }
  double z = std::exp(-mx);
  for (double v : x) z += std::exp(v - mx);
  out.loss = mx + std::log(z);
  for (std::size_t k = 0; k < order.size(); ++k) {
    const double w = std::exp(x[k] - out.loss);
    out.grad["sim/" + order[k].lower][0] += w / tau;
    out.grad["sim/" + order[k].higher][0] -= w / tau;
    out.grad["log_tau"][0] -= w * x[k];
  }
  return out;
}

// ---------------------------------------------------------------------------
// mICL

/// Per-item views produced by the encoder: visual-only and text-only pooled
/// embeddings, the multimodal embedding, and the raw visual token.
struct ModalViews {
  std::optional<Embedding> n_v;
  std::optional<Embedding> n_t;
  Embedding n_m;
  std::optional<Embedding> v;
};

/// NCE within the visual view plus NCE within the text view; in-batch
/// negatives come from the same modality only. A view missing on either
/// side drops its term and flags the result.
inline LossOutput micl_loss(const ModalViews& query, const ModalViews& target, std::span<const ModalViews> in_batch,
                            double tau) {
  detail::check_tau(tau);
  LossOutput out;
  out.grad["log_tau"] = Vector(1, 0.0);
  auto term = [&](const std::optional<Embedding> ModalViews::*view, const std::string& suffix) {
    if (!(query.*view) || !(target.*view)) {
      out.flagged = true;
      return;
    }
    std::vector<Embedding> negs;
    std::vector<std::size_t> owners;
    for (std::size_t i = 0; i < in_batch.size(); ++i)
      if (in_batch[i].*view) {
        negs.push_back(*(in_batch[i].*view));
        owners.push_back(i);
      }
    auto r = nce_loss(*(query.*view), *(target.*view), negs, tau);
    out.loss += r.loss;
    out.flagged = out.flagged || r.flagged;
    accumulate(out.grad, {{"query/" + suffix, r.grad["query"]}, {"positive/" + suffix, r.grad["positive"]}});
    for (std::size_t j = 0; j < negs.size(); ++j)
      accumulate(out.grad, {{"negative/" + std::to_string(owners[j]) + "/" + suffix, r.grad["negative/" + std::to_string(j)]}});
    out.grad["log_tau"][0] += r.grad["log_tau"][0];
  };
  term(&ModalViews::n_v, "n_v");
  term(&ModalViews::n_t, "n_t");
  return out;
}

// ---------------------------------------------------------------------------
// Late fusion gate

/// z = sigmoid(W [v; n_m] + b); fused = z * v + (1 - z) * n_m.
struct LateFusionGate {
  Matrix w;  // d x 2d
  Vector b;  // d

  static LateFusionGate zeros(std::size_t dim) { return {Matrix(dim, 2 * dim), Vector(dim, 0.0)}; }
  std::size_t dim() const { return b.size(); }
};

struct LateFusionCache {
  Vector input;  // [v; n_m]
  Vector gate;   // z
  Embedding fused;
};

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline LateFusionCache late_fusion_forward(std::span<const double> v, std::span<const double> n_m,
                                           const LateFusionGate& gate) {
  const std::size_t d = gate.dim();
  if (v.size() != d || n_m.size() != d || gate.w.rows() != d || gate.w.cols() != 2 * d)
    throw Error(ErrorCode::dimension_mismatch, "late_fusion: shapes inconsistent with gate");
  LateFusionCache c;
  c.input.assign(v.begin(), v.end());
  c.input.insert(c.input.end(), n_m.begin(), n_m.end());
  c.gate.resize(d);
  c.fused.resize(d);
  for (std::size_t i = 0; i < d; ++i) {
    c.gate[i] = sigmoid(dot(gate.w.row(i), c.input) + gate.b[i]);
    c.fused[i] = c.gate[i] * v[i] + (1.0 - c.gate[i]) * n_m[i];
  }
  return c;
}

/// Accumulates gradients of upstream . fused into dv, dn_m, dw, db.
inline void late_fusion_backward(const LateFusionCache& c, const LateFusionGate& gate, std::span<const double> upstream,
                                 std::span<double> dv, std::span<double> dn_m, Matrix& dw, std::span<double> db) {
  const std::size_t d = gate.dim();
  Vector dinput(2 * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    const double v = c.input[i], nm = c.input[d + i], z = c.gate[i];
    dv[i] += upstream[i] * z;
    dn_m[i] += upstream[i] * (1.0 - z);
    const double dpre = upstream[i] * (v - nm) * z * (1.0 - z);
    if (dpre == 0.0) continue;
    db[i] += dpre;
    axpy(dpre, c.input, dw.row(i));
    axpy(dpre, gate.w.row(i), dinput);
  }
  for (std::size_t i = 0; i < d; ++i) {
    dv[i] += dinput[i];
    dn_m[i] += dinput[d + i];
  }
}

struct LateFusionOutput {
  Embedding fused;
  GradientBundle grad;  // of upstream . fused; keys v, n_m, gate/W, gate/b
};

inline LateFusionOutput late_fusion(std::span<const double> v, std::span<const double> n_m, const LateFusionGate& gate,
                                    std::span<const double> upstream = {}) {
  auto cache = late_fusion_forward(v, n_m, gate);
  const std::size_t d = gate.dim();
  LateFusionOutput out;
  out.fused = cache.fused;
  if (upstream.empty()) return out;
  detail::check_dims(d, upstream, "late_fusion upstream");
  Vector dv(d, 0.0), dnm(d, 0.0), db(d, 0.0);
  Matrix dw(d, 2 * d);
  late_fusion_backward(cache, gate, upstream, dv, dnm, dw, db);
  out.grad["v"] = std::move(dv);
  out.grad["n_m"] = std::move(dnm);
  out.grad["gate/W"] = Vector(dw.values().begin(), dw.values().end());
  out.grad["gate/b"] = std::move(db);
  return out;
}

// ---------------------------------------------------------------------------
// Combination

struct LossComponents {
  LossOutput nce_mrl;
  LossOutput cosent;
  LossOutput micl;
  LossOutput late_fusion;
};

/// L = L_nce_mrl + lambda L_cosent + alpha L_micl + beta L_lf, with the
/// gradient being the same weighted sum of component gradients.
inline LossOutput combined_loss(const LossComponents& c, const LossParams& params) {
  for (double w : {params.cosent_weight, params.micl_weight, params.late_fusion_weight})
    if (!std::isfinite(w)) throw Error(ErrorCode::invalid_argument, "combined_loss: weights must be finite");
  LossOutput out;
  out.loss = c.nce_mrl.loss + params.cosent_weight * c.cosent.loss + params.micl_weight * c.micl.loss +
             params.late_fusion_weight * c.late_fusion.loss;
  accumulate(out.grad, c.nce_mrl.grad, 1.0);
  accumulate(out.grad, c.cosent.grad, params.cosent_weight);
  accumulate(out.grad, c.micl.grad, params.micl_weight);
  accumulate(out.grad, c.late_fusion.grad, params.late_fusion_weight);
  out.flagged = c.nce_mrl.flagged;
  return out;
}

// ---------------------------------------------------------------------------
// Gradient certification

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_key;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

using LossFunction = std::function<LossOutput(const TensorMap&)>;

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kGradCheckFloor = 1e-8;

/// Central differences per coordinate against the analytic gradient; the
/// error of a coordinate is |numeric - analytic| / max(1e-8, |analytic|).
/// Keys missing from the analytic bundle count as zero gradient. `floor` is
/// exposed for diagnostics only; certification uses the default.
inline GradCheckReport finite_diff_check(const LossFunction& fn, const TensorMap& inputs, double h = kGradCheckStep,
                                         double floor = kGradCheckFloor) {
  if (!(h > 0.0)) throw Error(ErrorCode::invalid_argument, "finite_diff_check: h must be positive");
  const auto base = fn(inputs);
  if (!std::isfinite(base.loss)) throw Error(ErrorCode::numeric, "finite_diff_check: non-finite loss");
  GradCheckReport report;
  TensorMap probe = inputs;
  for (const auto& [key, values] : inputs) {
    auto git = base.grad.find(key);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double analytic = git == base.grad.end() ? 0.0 : git->second.at(i);
      probe[key][i] = values[i] + h;
      const double up = fn(probe).loss;
      probe[key][i] = values[i] - h;
      const double down = fn(probe).loss;
      probe[key][i] = values[i];
      if (!std::isfinite(up) || !std::isfinite(down)) throw Error(ErrorCode::numeric, "finite_diff_check: non-finite loss");
      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(numeric - analytic) / std::max(floor, std::abs(analytic));
      ++report.coordinates;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_key = key;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace omniembed
