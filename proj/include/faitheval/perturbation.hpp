#pragma once

#include <span>
#include <vector>

#include "faitheval/attribution.hpp"
#include "faitheval/model.hpp"
#include "faitheval/numerics.hpp"

namespace faitheval {

Matrix zero_baseline(const Matrix& x);

// Keep member-token rows, zero the rest. Token positions are preserved:
// erasure is zero-embedding replacement, never deletion, so the all-token
// removal limit coincides with the zero baseline.
Matrix hard_retain(const Matrix& x, const RationaleMask& rationale);

// Complement: hard_retain(x, r) + hard_remove(x, r) == x elementwise.
Matrix hard_remove(const Matrix& x, const RationaleMask& rationale);

enum class PerturbMode { retain, remove };

struct SoftPerturbConfig {
  PerturbMode mode = PerturbMode::retain;
  int samples = 16;  // M
  RngStream rng;     // instance-scoped stream; sample/token ids are
                     // derived below it, so results are schedule-free
};

// Bernoulli embedding masking: sample s masks token i's dims with
// keep-probability a_i (retain) or 1 - a_i (remove), drawn from the
// stream at rng.child(s).child(i).
std::vector<Matrix> soft_perturb(const Matrix& x,
                                 std::span<const double> importances,
                                 const SoftPerturbConfig& config);

enum class GaussianVariant {
  scaled_importance,    // x' = x + gamma * a_i (.) x, gamma ~ N(mu, sigma2)
  variance_importance,  // x' = x + gamma (.) x, gamma ~ N(mu, a_i * sigma2)
};

struct GaussianPerturbConfig {
  GaussianVariant variant = GaussianVariant::scaled_importance;
  double mu = 0.0;
  double sigma2 = 0.1;
  RngStream rng;
};

Matrix gaussian_perturb(const Matrix& x, std::span<const double> importances,
                        const GaussianPerturbConfig& config);

// Soft masking in attention space: token j's attention logit is offset
// by log(a_j + 1e-12) in every row. Returns the class probabilities.
std::vector<double> continuous_attention_mask(
    const ForwardTrace& trace, std::span<const double> importances,
    const ModelParams& params);

}  // namespace faitheval
