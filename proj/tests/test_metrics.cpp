#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "faitheval/metrics.hpp"
#include "faitheval/numerics.hpp"

using namespace faitheval;

TEST_CASE("normalized sufficiency hand values") {
  // unchanged prediction -> fully sufficient
  CHECK(*normalized_sufficiency({0.9, 0.9, 0.4}) == 1.0);
  // no better than the zero baseline
  CHECK(*normalized_sufficiency({0.9, 0.4, 0.4}) == 0.0);
  // S = 0.8, S0 = 0.5 -> (0.8-0.5)/0.5
  CHECK(*normalized_sufficiency({0.9, 0.7, 0.4}) ==
        doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("normalized comprehensiveness hand values") {
  CHECK(*normalized_comprehensiveness({0.9, 0.9, 0.4}) == 0.0);
  CHECK(*normalized_comprehensiveness({0.9, 0.4, 0.4}) == 1.0);
  CHECK(*normalized_comprehensiveness({0.9, 0.6, 0.4}) ==
        doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("metrics clamp into [0,1]") {
  // removal hurting more than zeroing everything would push NC over 1
  CHECK(*normalized_comprehensiveness({0.9, 0.1, 0.4}) == 1.0);
  // perturbed better than full would push NS over 1
  CHECK(*normalized_sufficiency({0.9, 0.95, 0.4}) == 1.0);
}

TEST_CASE("degenerate normalizer excludes rather than fails") {
  CHECK(!normalized_sufficiency({0.5, 0.7, 0.5}));
  CHECK(!normalized_comprehensiveness({0.5, 0.7, 0.5}));
  CHECK(!normalized_sufficiency({0.4, 0.7, 0.5}));
  const std::vector<double> probs{0.5};
  CHECK(!soft_ns(0.5, probs, 0.5));
  CHECK(!soft_nc(0.5, probs, 0.5));
  // just above the floor is kept
  CHECK(normalized_sufficiency({0.5 + 2e-6, 0.5, 0.5}).has_value());
}

TEST_CASE("soft metrics hand values") {
  const std::vector<double> retain{0.8};
  CHECK(*soft_ns(0.9, retain, 0.4) == doctest::Approx(0.8).epsilon(1e-12));
  const std::vector<double> remove{0.5};
  CHECK(*soft_nc(0.9, remove, 0.4) == doctest::Approx(0.8).epsilon(1e-12));

  // identity perturbation boundaries
  const std::vector<double> full(7, 0.9);
  CHECK(*soft_ns(0.9, full, 0.4) == 1.0);
  CHECK(*soft_nc(0.9, full, 0.4) == 0.0);
  const std::vector<double> zeroed(7, 0.4);
  CHECK(*soft_ns(0.9, zeroed, 0.4) == 0.0);
  CHECK(*soft_nc(0.9, zeroed, 0.4) == 1.0);
}

TEST_CASE("soft metrics average probabilities before the nonlinearity") {
  // mean prob = 0.7 -> Soft-NS = (1 - 0.2 - 0.5)/0.5 = 0.6; the per-mask
  // metric average differs, which is what the config knob is for.
  const std::vector<double> probs{0.9, 0.5};
  CHECK(*soft_ns(0.9, probs, 0.4) == doctest::Approx(0.6).epsilon(1e-12));
  const double per_mask =
      (*normalized_sufficiency({0.9, 0.9, 0.4}) +
       *normalized_sufficiency({0.9, 0.5, 0.4})) /
      2.0;
  CHECK(*soft_ns(0.9, probs, 0.4, SoftAggregation::mean_metric) ==
        doctest::Approx(per_mask).epsilon(1e-12));
  CHECK_THROWS_AS(soft_ns(0.9, std::vector<double>{}, 0.4), ParameterError);
}

TEST_CASE("aopc is the mean over the ratio grid") {
  CHECK(aopc(std::vector<double>{0.2, 0.4, 0.6, 0.8, 1.0}, 5) ==
        doctest::Approx(0.6).epsilon(1e-15));
  CHECK(aopc(std::vector<double>{0.7, 0.7, 0.7}, 3) ==
        doctest::Approx(0.7).epsilon(1e-15));
  CHECK(aopc(std::vector<double>{0.1, 0.1, 0.2, 0.3, 0.8}, 5) ==
        doctest::Approx(0.3).epsilon(1e-15));
  CHECK_THROWS_AS(aopc(std::vector<double>{0.1, 0.2}, 5), ParameterError);
  CHECK_THROWS_AS(aopc(std::vector<double>{}, 0), ParameterError);
}

TEST_CASE("diagnosticity counts strict wins") {
  const std::vector<std::pair<double, double>> saturated{
      {0.9, 0.1}, {0.8, 0.2}, {0.7, 0.3}};
  CHECK(diagnosticity(saturated).value == 1.0);

  const std::vector<std::pair<double, double>> mixed{
      {0.9, 0.1}, {0.8, 0.2}, {0.7, 0.3}, {0.1, 0.9}};
  const auto count = diagnosticity(mixed);
  CHECK(count.value == 0.75);
  CHECK(count.wins == 3);
  CHECK(count.ties == 0);

  // ties count as losses but are tracked
  const std::vector<std::pair<double, double>> tied{{0.5, 0.5}, {0.9, 0.1}};
  const auto tc = diagnosticity(tied);
  CHECK(tc.value == 0.5);
  CHECK(tc.ties == 1);

  CHECK_THROWS_AS(diagnosticity({}), ParameterError);
}

TEST_CASE("diagnosticity epsilon margin") {
  const std::vector<std::pair<double, double>> pairs{
      {0.60, 0.50}, {0.52, 0.50}, {0.50, 0.52}};
  const auto strict = diagnosticity(pairs, 0.0);
  CHECK(strict.wins == 2);
  const auto margin = diagnosticity(pairs, 0.05);
  CHECK(margin.wins == 1);
  CHECK(margin.ties == 2);  // within the margin either way
}

TEST_CASE("null diagnosticity converges to one half") {
  RngStream rng(61, {});
  std::vector<std::pair<double, double>> pairs;
  for (int i = 0; i < 2000; ++i) {
    pairs.emplace_back(rng.next_double(), rng.next_double());
  }
  const auto count = diagnosticity(pairs);
  CHECK(std::abs(count.value - 0.5) <= 0.05);
  CHECK(count.ties == 0);
}

TEST_CASE("rank sum exact enumeration hand value") {
  const std::vector<double> a{1, 2, 3};
  const std::vector<double> b{4, 5, 6};
  // 2 of the C(6,3)=20 rank splits are as extreme (two-sided)
  CHECK(rank_sum_test(a, b) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(rank_sum_test(b, a) == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("rank sum on identical samples is one") {
  const std::vector<double> a{1, 2, 3};
  CHECK(rank_sum_test(a, a) == 1.0);
  const std::vector<double> constant(8, 2.5);
  CHECK(rank_sum_test(constant, constant) == 1.0);
  // large identical samples take the tie-corrected normal path
  const std::vector<double> big(50, 1.0);
  CHECK(rank_sum_test(big, big) == 1.0);
}

TEST_CASE("rank sum agrees with enumeration under ties") {
  // pooled {1,1,2} vs {2,3}: verified against direct enumeration of all
  // C(5,2)=10 splits with midranks.
  const std::vector<double> a{1, 1, 2};
  const std::vector<double> b{2, 3};
  // observed W_a = 1.5+1.5+3.5 = 6.5, mu = 9; |dev| = 2.5
  // splits with |W' - 9| >= 2.5: enumerate -> 3 of 10
  CHECK(rank_sum_test(a, b) == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("rank sum calibration on null samples") {
  int above = 0;
  for (int seed = 0; seed < 100; ++seed) {
    RngStream rng(1000 + seed, {});
    std::vector<double> a(50), b(50);
    for (auto& v : a) v = rng.next_gaussian();
    for (auto& v : b) v = rng.next_gaussian();
    if (rank_sum_test(a, b) > 0.01) ++above;
  }
  CHECK(above >= 95);
}

TEST_CASE("rank sum detects a clear shift") {
  RngStream rng(71, {});
  std::vector<double> a(60), b(60);
  for (auto& v : a) v = rng.next_gaussian(0.0, 1.0);
  for (auto& v : b) v = rng.next_gaussian(1.5, 1.0);
  CHECK(rank_sum_test(a, b) < 0.01);
}

TEST_CASE("rank sum input validation") {
  CHECK_THROWS_AS(rank_sum_test({}, std::vector<double>{1.0}),
                  ParameterError);
  CHECK_THROWS_AS(
      rank_sum_test(std::vector<double>{std::nan("")}, std::vector<double>{1.0}),
      NumericError);
}

TEST_CASE("metric names round-trip") {
  for (MetricKind kind : {MetricKind::ns, MetricKind::nc, MetricKind::soft_ns,
                          MetricKind::soft_nc}) {
    CHECK(metric_from_name(metric_name(kind)) == kind);
  }
  CHECK(!metric_from_name("bogus"));
}
