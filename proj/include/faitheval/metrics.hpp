#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "faitheval/attribution.hpp"

namespace faitheval {

// Predictive likelihoods entering Eq-style sufficiency/comprehensiveness:
// the full input, the perturbed input, and the zeroed baseline.
struct LikelihoodTriple {
  double p_full = 0.0;
  double p_perturbed = 0.0;
  double p_zero = 0.0;
};

// Below this, the normalizer 1 - S0 = max(0, p_full - p_zero) is treated
// as degenerate and the instance is excluded rather than divided by ~0.
inline constexpr double kDenominatorFloor = 1e-6;
inline constexpr const char* kDegenerateReason = "degenerate_denominator";

// Returns nullopt when the normalizer is degenerate (the caller records
// an exclusion, it is not a failure). Values are clamped into [0,1].
std::optional<double> normalized_sufficiency(const LikelihoodTriple& t);
std::optional<double> normalized_comprehensiveness(const LikelihoodTriple& t);

enum class SoftAggregation {
  mean_probability,  // average p over masks, apply the metric once
  mean_metric,       // per-mask metric values averaged (sensitivity knob)
};

std::optional<double> soft_ns(
    double p_full, std::span<const double> retain_probs, double p_zero,
    SoftAggregation aggregation = SoftAggregation::mean_probability);
std::optional<double> soft_nc(
    double p_full, std::span<const double> remove_probs, double p_zero,
    SoftAggregation aggregation = SoftAggregation::mean_probability);

// Arithmetic mean over the rationale-ratio grid; expected_ratios guards
// against a partially filled grid.
double aopc(std::span<const double> values, std::size_t expected_ratios);

enum class MetricKind { ns, nc, soft_ns, soft_nc };
const char* metric_name(MetricKind kind);
std::optional<MetricKind> metric_from_name(const std::string& name);

// One faithfulness value with its provenance.
struct MetricRecord {
  std::string instance_id;
  FaKind fa = FaKind::random;
  MetricKind metric = MetricKind::ns;
  std::optional<double> value;   // empty iff excluded
  std::optional<double> ratio;   // hard metrics only
  std::optional<int> samples;    // soft metrics only
  std::string exclusion_reason;  // non-empty iff excluded
};

struct DiagnosticityCount {
  std::size_t pairs = 0;
  std::size_t wins = 0;  // strict u > v + epsilon
  std::size_t ties = 0;  // |u - v| <= epsilon, counted as losses
  double value = 0.0;    // wins / pairs
};

// pairs hold (u, v) = (FA explanation's metric value, random
// explanation's metric value) for the same instance and metric.
DiagnosticityCount diagnosticity(
    std::span<const std::pair<double, double>> pairs, double epsilon = 0.0);

struct DiagnosticityReport {
  MetricKind metric = MetricKind::ns;
  std::string fa_label;  // fa name or "average"
  std::string dataset_id;
  std::size_t pair_count = 0;
  std::size_t wins = 0;
  std::size_t ties = 0;
  double value = 0.0;
  std::optional<double> p_value;  // soft metric vs its hard counterpart
};

// Two-sided Wilcoxon rank-sum p-value. Exact enumeration of all
// C(n1+n2, n1) rank assignments when both samples have <= 10 values,
// normal approximation with tie correction otherwise.
double rank_sum_test(std::span<const double> sample_a,
                     std::span<const double> sample_b);

}  // namespace faitheval
