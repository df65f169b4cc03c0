#include "faitheval/perturbation.hpp"

#include <cmath>

namespace faitheval {

namespace {

void check_rationale(const Matrix& x, const RationaleMask& rationale) {
  if (rationale.member.size() != x.rows()) {
    throw ShapeError("rationale length != token count");
  }
}

void check_importances(const Matrix& x, std::span<const double> importances) {
  if (importances.size() != x.rows()) {
    throw ParameterError("importances length != token count");
  }
  for (double a : importances) {
    if (!(a >= 0.0 && a <= 1.0)) {
      throw ParameterError("importances must be normalized into [0,1]");
    }
  }
}

}  // namespace

Matrix zero_baseline(const Matrix& x) { return Matrix(x.rows(), x.cols()); }

Matrix hard_retain(const Matrix& x, const RationaleMask& rationale) {
  check_rationale(x, rationale);
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (!rationale.member[i]) continue;
    for (std::size_t d = 0; d < x.cols(); ++d) {
      out(i, d) = x(i, d);
    }
  }
  return out;
}

Matrix hard_remove(const Matrix& x, const RationaleMask& rationale) {
  check_rationale(x, rationale);
  Matrix out = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (!rationale.member[i]) continue;
    for (std::size_t d = 0; d < x.cols(); ++d) {
      out(i, d) = 0.0;
    }
  }
  return out;
}

std::vector<Matrix> soft_perturb(const Matrix& x,
                                 std::span<const double> importances,
                                 const SoftPerturbConfig& config) {
  check_importances(x, importances);
  if (config.samples < 1) {
    throw ParameterError("soft_perturb: sample count must be >= 1");
  }

  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(config.samples));
  for (int s = 0; s < config.samples; ++s) {
    const RngStream sample_rng =
        config.rng.child(static_cast<std::uint64_t>(s));
    Matrix perturbed(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const double q = config.mode == PerturbMode::retain
                           ? importances[i]
                           : 1.0 - importances[i];
      const MaskVector mask =
          bernoulli_mask(sample_rng.child(i), q, x.cols());
      for (std::size_t d = 0; d < x.cols(); ++d) {
        perturbed(i, d) = mask[d] ? x(i, d) : 0.0;
      }
    }
    out.push_back(std::move(perturbed));
  }
  return out;
}

Matrix gaussian_perturb(const Matrix& x, std::span<const double> importances,
                        const GaussianPerturbConfig& config) {
  check_importances(x, importances);
  if (!(config.sigma2 > 0.0)) {
    throw ParameterError("gaussian_perturb: sigma2 must be > 0");
  }
  if (config.variant != GaussianVariant::scaled_importance &&
      config.variant != GaussianVariant::variance_importance) {
    throw ParameterError("gaussian_perturb: invalid variant");
  }

  RngStream rng = config.rng;
  const double sigma = std::sqrt(config.sigma2);
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double a = importances[i];
    for (std::size_t d = 0; d < x.cols(); ++d) {
      double noise;
      if (config.variant == GaussianVariant::scaled_importance) {
        // gamma ~ N(mu, sigma2), scaled by the importance score.
        noise = rng.next_gaussian(config.mu, sigma) * a;
      } else {
        // per-token variance a_i * sigma2
        noise = rng.next_gaussian(config.mu, std::sqrt(a * config.sigma2));
      }
      out(i, d) = x(i, d) + noise * x(i, d);
    }
  }
  return out;
}

std::vector<double> continuous_attention_mask(
    const ForwardTrace& trace, std::span<const double> importances,
    const ModelParams& params) {
  if (importances.size() != trace.input.rows()) {
    throw ParameterError("continuous_attention_mask: importances length != T");
  }
  for (double a : importances) {
    if (!(a >= 0.0 && a <= 1.0)) {
      throw ParameterError(
          "continuous_attention_mask: importances must lie in [0,1]");
    }
  }
  std::vector<double> bias(importances.size());
  for (std::size_t j = 0; j < importances.size(); ++j) {
    bias[j] = std::log(importances[j] + 1e-12);
  }
  return forward_with_attention_bias(trace.input, params, bias).probs;
}

}  // namespace faitheval
