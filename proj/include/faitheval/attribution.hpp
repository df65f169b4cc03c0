#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "faitheval/model.hpp"
#include "faitheval/numerics.hpp"

namespace faitheval {

enum class FaKind {
  attention,
  scaled_attention,
  input_x_grad,
  integrated_gradients,
  deeplift,
  random,
  external,
};

const char* fa_name(FaKind kind);
std::optional<FaKind> fa_from_name(const std::string& name);

// How per-dimension attributions collapse to one score per token.
enum class TokenScoreRule {
  abs_sum,  // |sum over dims| (default; keeps signed cancellation)
  l2_norm,
};

struct AttributionScores {
  std::string instance_id;
  FaKind fa = FaKind::random;
  std::vector<double> raw;
  std::vector<double> normalized;  // min-max mapped into [0,1]
};

// Min-max normalization; a constant vector maps to all 0.5 so an
// uninformative FA behaves as unbiased 50% dropout downstream.
std::vector<double> normalize_scores(std::span<const double> raw);

// Token i scored by the mean over query rows of attention column i.
AttributionScores attention_fa(const ForwardTrace& trace);

// Column means of A (.) dlogit/dA.
AttributionScores scaled_attention_fa(const ForwardTrace& trace,
                                      const Matrix& attention_grad);

AttributionScores input_x_grad(const Matrix& x, const Matrix& input_grad,
                               TokenScoreRule rule = TokenScoreRule::abs_sum);

// Per-dimension attributions plus the collapsed token scores, for the
// methods whose completeness properties are checked dimension-wise.
struct PerDimAttribution {
  Matrix per_dim;  // T x d
  AttributionScores scores;
  double attribution_sum = 0.0;  // sum over all (token, dim) entries
};

// Right-endpoint Riemann approximation of the path integral from the
// zero baseline. The gradient mean is accumulated relative to the first
// step so a constant gradient reproduces input x gradient bit-exactly.
PerDimAttribution integrated_gradients(const Matrix& x,
                                       const ModelParams& params, int cls,
                                       int steps,
                                       TokenScoreRule rule = TokenScoreRule::abs_sum);

// Rescale-rule propagation against the zero-embedding reference.
// Multipliers at the attention softmax use (A - A_ref)/(S - S_ref),
// falling back to the local gradient when |S - S_ref| < 1e-8; products
// split their cross term evenly; linear layers propagate exactly.
PerDimAttribution deeplift(const Matrix& x, const ModelParams& params, int cls,
                           TokenScoreRule rule = TokenScoreRule::abs_sum);

// i.i.d. uniform [0,1) scores; the unfaithful baseline.
AttributionScores random_fa(RngStream rng, std::size_t token_count);

struct RationaleMask {
  std::string instance_id;
  double ratio = 0.0;
  std::vector<std::uint8_t> member;  // 1 = part of the rationale

  std::size_t member_count() const;
  std::size_t size() const { return member.size(); }
};

// k = max(1, ceil(ratio * T)) top-scored tokens; ties broken by lower
// token index.
RationaleMask top_k_rationale(const AttributionScores& scores, double ratio);

// Line-delimited records {"id":..., "fa":..., "scores":[...]} for FAs
// computed outside the engine.
struct ImportedAttribution {
  std::string id;
  std::string fa_label;
  std::vector<double> raw;
};

std::vector<ImportedAttribution> load_attribution_file(
    const std::string& path);

}  // namespace faitheval
