#include "faitheval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace faitheval {

namespace {

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// 1 - S0, the shared normalizer of Eq-style metrics.
std::optional<double> normalizer(double p_full, double p_zero) {
  const double denom = std::max(0.0, p_full - p_zero);
  if (denom <= kDenominatorFloor) {
    return std::nullopt;
  }
  return denom;
}

double sufficiency_from(double p_full, double p_perturbed, double denom) {
  const double s = 1.0 - std::max(0.0, p_full - p_perturbed);
  const double s0 = 1.0 - denom;
  return clamp01((s - s0) / denom);
}

double comprehensiveness_from(double p_full, double p_perturbed,
                              double denom) {
  return clamp01(std::max(0.0, p_full - p_perturbed) / denom);
}

double mean_of(std::span<const double> values) {
  return std::accumulate(values.begin(), values.end(), 0.0) /
         static_cast<double>(values.size());
}

}  // namespace

std::optional<double> normalized_sufficiency(const LikelihoodTriple& t) {
  const auto denom = normalizer(t.p_full, t.p_zero);
  if (!denom) return std::nullopt;
  return sufficiency_from(t.p_full, t.p_perturbed, *denom);
}

std::optional<double> normalized_comprehensiveness(const LikelihoodTriple& t) {
  const auto denom = normalizer(t.p_full, t.p_zero);
  if (!denom) return std::nullopt;
  return comprehensiveness_from(t.p_full, t.p_perturbed, *denom);
}

std::optional<double> soft_ns(double p_full,
                              std::span<const double> retain_probs,
                              double p_zero, SoftAggregation aggregation) {
  if (retain_probs.empty()) {
    throw ParameterError("soft_ns: need at least one sample probability");
  }
  const auto denom = normalizer(p_full, p_zero);
  if (!denom) return std::nullopt;
  if (aggregation == SoftAggregation::mean_probability) {
    return sufficiency_from(p_full, mean_of(retain_probs), *denom);
  }
  double total = 0.0;
  for (double p : retain_probs) {
    total += sufficiency_from(p_full, p, *denom);
  }
  return total / static_cast<double>(retain_probs.size());
}

std::optional<double> soft_nc(double p_full,
                              std::span<const double> remove_probs,
                              double p_zero, SoftAggregation aggregation) {
  if (remove_probs.empty()) {
    throw ParameterError("soft_nc: need at least one sample probability");
  }
  const auto denom = normalizer(p_full, p_zero);
  if (!denom) return std::nullopt;
  if (aggregation == SoftAggregation::mean_probability) {
    return comprehensiveness_from(p_full, mean_of(remove_probs), *denom);
  }
  double total = 0.0;
  for (double p : remove_probs) {
    total += comprehensiveness_from(p_full, p, *denom);
  }
  return total / static_cast<double>(remove_probs.size());
}

double aopc(std::span<const double> values, std::size_t expected_ratios) {
  if (expected_ratios == 0 || values.size() != expected_ratios) {
    throw ParameterError("aopc: need one value per rationale ratio");
  }
  return mean_of(values);
}

const char* metric_name(MetricKind kind) {
  switch (kind) {
    case MetricKind::ns: return "ns";
    case MetricKind::nc: return "nc";
    case MetricKind::soft_ns: return "soft_ns";
    case MetricKind::soft_nc: return "soft_nc";
  }
  return "unknown";
}

std::optional<MetricKind> metric_from_name(const std::string& name) {
  for (MetricKind kind : {MetricKind::ns, MetricKind::nc, MetricKind::soft_ns,
                          MetricKind::soft_nc}) {
    if (name == metric_name(kind)) return kind;
  }
  return std::nullopt;
}

DiagnosticityCount diagnosticity(
    std::span<const std::pair<double, double>> pairs, double epsilon) {
  if (pairs.empty()) {
    throw ParameterError("diagnosticity: empty pair set");
  }
  if (epsilon < 0.0) {
    throw ParameterError("diagnosticity: epsilon must be >= 0");
  }
  DiagnosticityCount count;
  count.pairs = pairs.size();
  for (const auto& [u, v] : pairs) {
    if (u > v + epsilon) {
      ++count.wins;
    } else if (std::abs(u - v) <= epsilon) {
      ++count.ties;
    }
  }
  count.value =
      static_cast<double>(count.wins) / static_cast<double>(count.pairs);
  return count;
}

namespace {

// Midranks of the pooled sample, plus the tie term sum(t^3 - t).
struct PooledRanks {
  std::vector<double> ranks;  // aligned with the pooled value order
  double tie_term = 0.0;
};

PooledRanks pooled_midranks(std::vector<double>& pooled) {
  std::vector<std::size_t> order(pooled.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&pooled](std::size_t a, std::size_t b) {
    return pooled[a] < pooled[b];
  });

  PooledRanks out;
  out.ranks.assign(pooled.size(), 0.0);
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() &&
           pooled[order[j + 1]] == pooled[order[i]]) {
      ++j;
    }
    // positions i..j share the midrank
    const double midrank = (static_cast<double>(i + 1) +
                            static_cast<double>(j + 1)) / 2.0;
    const double t = static_cast<double>(j - i + 1);
    out.tie_term += t * t * t - t;
    for (std::size_t k = i; k <= j; ++k) {
      out.ranks[order[k]] = midrank;
    }
    i = j + 1;
  }
  return out;
}

// Counts rank assignments at least as extreme as the observed rank sum
// over all C(n, k) subsets. Deviations compare against |W - mu|.
void count_extreme(const std::vector<double>& ranks, std::size_t next,
                   std::size_t remaining, double partial_sum,
                   double threshold, double mu, double& extreme,
                   double& total) {
  if (remaining == 0) {
    total += 1.0;
    if (std::abs(partial_sum - mu) >= threshold - 1e-12) {
      extreme += 1.0;
    }
    return;
  }
  if (ranks.size() - next < remaining) return;
  for (std::size_t i = next; i + remaining <= ranks.size(); ++i) {
    count_extreme(ranks, i + 1, remaining - 1, partial_sum + ranks[i],
                  threshold, mu, extreme, total);
  }
}

double normal_sf(double z) {
  // 1 - Phi(z)
  return 0.5 * std::erfc(z / std::sqrt(2.0));
}

}  // namespace

double rank_sum_test(std::span<const double> sample_a,
                     std::span<const double> sample_b) {
  if (sample_a.empty() || sample_b.empty()) {
    throw ParameterError("rank_sum_test: both samples must be non-empty");
  }
  const std::size_t n1 = sample_a.size();
  const std::size_t n2 = sample_b.size();
  const std::size_t n = n1 + n2;

  std::vector<double> pooled;
  pooled.reserve(n);
  pooled.insert(pooled.end(), sample_a.begin(), sample_a.end());
  pooled.insert(pooled.end(), sample_b.begin(), sample_b.end());
  for (double v : pooled) {
    if (!std::isfinite(v)) {
      throw NumericError("rank_sum_test: non-finite sample value");
    }
  }

  const PooledRanks pr = pooled_midranks(pooled);
  double rank_sum_a = 0.0;
  for (std::size_t i = 0; i < n1; ++i) {
    rank_sum_a += pr.ranks[i];
  }

  const double nd = static_cast<double>(n);
  const double n1d = static_cast<double>(n1);
  const double n2d = static_cast<double>(n2);
  const double mu = n1d * (nd + 1.0) / 2.0;

  if (n1 <= 10 && n2 <= 10) {
    // Exact enumeration over all subsets of size n1.
    std::vector<double> ranks = pr.ranks;
    std::sort(ranks.begin(), ranks.end());
    double extreme = 0.0;
    double total = 0.0;
    count_extreme(ranks, 0, n1, 0.0, std::abs(rank_sum_a - mu), mu, extreme,
                  total);
    return extreme / total;
  }

  const double tie_correction = pr.tie_term / (nd * (nd - 1.0));
  const double variance = n1d * n2d / 12.0 * ((nd + 1.0) - tie_correction);
  if (variance <= 0.0) {
    return 1.0;  // all pooled values identical
  }
  const double z = (rank_sum_a - mu) / std::sqrt(variance);
  return std::min(1.0, 2.0 * normal_sf(std::abs(z)));
}

}  // namespace faitheval
