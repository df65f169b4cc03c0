#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "faitheval/corpus.hpp"
#include "faitheval/model.hpp"
#include "faitheval/perturbation.hpp"

using namespace faitheval;

namespace {

Matrix random_matrix(std::size_t t, std::size_t d, std::uint64_t seed) {
  Matrix x(t, d);
  RngStream rng(seed, {});
  for (auto& v : x.data()) v = 2.0 * rng.next_double() - 1.0;
  return x;
}

RationaleMask mask_of(std::vector<std::uint8_t> members) {
  RationaleMask r;
  r.ratio = 0.5;
  r.member = std::move(members);
  return r;
}

}  // namespace

TEST_CASE("zero_baseline zeroes everything") {
  const Matrix x = random_matrix(3, 4, 1);
  const Matrix z = zero_baseline(x);
  CHECK(z.rows() == 3);
  CHECK(z.cols() == 4);
  for (double v : z.data()) CHECK(v == 0.0);
  CHECK(zero_baseline(z) == z);
}

TEST_CASE("hard_retain keeps member rows only") {
  const Matrix x = random_matrix(3, 4, 2);
  const auto all = hard_retain(x, mask_of({1, 1, 1}));
  CHECK(all == x);

  const auto none = hard_retain(x, mask_of({0, 0, 0}));
  for (double v : none.data()) CHECK(v == 0.0);

  const auto first = hard_retain(x, mask_of({1, 0, 0}));
  for (std::size_t d = 0; d < 4; ++d) {
    CHECK(first(0, d) == x(0, d));
    CHECK(first(1, d) == 0.0);
    CHECK(first(2, d) == 0.0);
  }
  CHECK_THROWS_AS(hard_retain(x, mask_of({1, 0})), ShapeError);
}

TEST_CASE("hard_remove zeroes member rows only") {
  const Matrix x = random_matrix(3, 4, 3);
  const auto none_left = hard_remove(x, mask_of({1, 1, 1}));
  for (double v : none_left.data()) CHECK(v == 0.0);

  const auto middle = hard_remove(x, mask_of({0, 1, 0}));
  for (std::size_t d = 0; d < 4; ++d) {
    CHECK(middle(0, d) == x(0, d));
    CHECK(middle(1, d) == 0.0);
    CHECK(middle(2, d) == x(2, d));
  }
}

TEST_CASE("retain and remove partition the input") {
  RngStream rng(4, {});
  for (int rep = 0; rep < 25; ++rep) {
    const Matrix x = random_matrix(6, 5, 40 + rep);
    std::vector<std::uint8_t> members(6);
    for (auto& m : members) m = rng.next_double() < 0.5 ? 1 : 0;
    const auto kept = hard_retain(x, mask_of(members));
    const auto removed = hard_remove(x, mask_of(members));
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(kept.data()[i] + removed.data()[i] == x.data()[i]);
    }
  }
}

TEST_CASE("soft_perturb degenerate importances") {
  const Matrix x = random_matrix(4, 6, 5);
  const std::vector<double> ones(4, 1.0);

  SoftPerturbConfig retain{PerturbMode::retain, 3, RngStream(9, {1})};
  for (const auto& sample : soft_perturb(x, ones, retain)) {
    CHECK(sample == x);
  }
  SoftPerturbConfig remove{PerturbMode::remove, 3, RngStream(9, {1})};
  for (const auto& sample : soft_perturb(x, ones, remove)) {
    for (double v : sample.data()) CHECK(v == 0.0);
  }
}

TEST_CASE("soft_perturb validates inputs") {
  const Matrix x = random_matrix(2, 3, 6);
  SoftPerturbConfig config{PerturbMode::retain, 1, RngStream(1, {})};
  CHECK_THROWS_AS(soft_perturb(x, std::vector<double>{0.5}, config),
                  ParameterError);
  CHECK_THROWS_AS(soft_perturb(x, std::vector<double>{0.5, 1.5}, config),
                  ParameterError);
  SoftPerturbConfig no_samples{PerturbMode::retain, 0, RngStream(1, {})};
  CHECK_THROWS_AS(soft_perturb(x, std::vector<double>{0.5, 0.5}, no_samples),
                  ParameterError);
}

TEST_CASE("soft_perturb keep rate concentrates around q") {
  const std::size_t d = 128;
  Matrix x(1, d, 1.0);
  const std::vector<double> a{0.25};
  SoftPerturbConfig config{PerturbMode::retain, 1000, RngStream(7, {2})};
  const auto samples = soft_perturb(x, a, config);
  double kept = 0.0;
  for (const auto& sample : samples) {
    for (double v : sample.data()) kept += v;
  }
  const double rate = kept / (1000.0 * d);
  const double bound = 3.0 * std::sqrt(0.25 * 0.75 / 128000.0);
  CHECK(std::abs(rate - 0.25) <= bound);
}

TEST_CASE("soft_perturb expectation is q times x") {
  const Matrix x = random_matrix(3, 32, 8);
  const std::vector<double> a{0.2, 0.6, 0.9};
  SoftPerturbConfig config{PerturbMode::retain, 4000, RngStream(11, {3})};
  const auto samples = soft_perturb(x, a, config);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t dd = 0; dd < 32; ++dd) {
      double mean = 0.0;
      for (const auto& s : samples) mean += s(i, dd);
      mean /= static_cast<double>(samples.size());
      const double sigma =
          std::abs(x(i, dd)) * std::sqrt(a[i] * (1 - a[i]) / 4000.0);
      CHECK(std::abs(mean - a[i] * x(i, dd)) <= 3.5 * sigma + 1e-12);
    }
  }
}

TEST_CASE("soft_perturb is deterministic per (seed, sample, token) path") {
  const Matrix x = random_matrix(5, 16, 9);
  const std::vector<double> a{0.1, 0.3, 0.5, 0.7, 0.9};
  const RngStream stream(13, {4});
  SoftPerturbConfig c1{PerturbMode::remove, 8, stream};
  SoftPerturbConfig c2{PerturbMode::remove, 8, stream};
  const auto s1 = soft_perturb(x, a, c1);
  const auto s2 = soft_perturb(x, a, c2);
  REQUIRE(s1.size() == s2.size());
  for (std::size_t s = 0; s < s1.size(); ++s) {
    CHECK(s1[s] == s2[s]);
  }
  // a larger M prefix-matches the smaller one (per-sample streams)
  SoftPerturbConfig c3{PerturbMode::remove, 16, stream};
  const auto s3 = soft_perturb(x, a, c3);
  for (std::size_t s = 0; s < s1.size(); ++s) {
    CHECK(s3[s] == s1[s]);
  }
}

TEST_CASE("gaussian_perturb keeps x fixed when variance collapses") {
  const Matrix x = random_matrix(3, 8, 10);
  GaussianPerturbConfig config;
  config.variant = GaussianVariant::variance_importance;
  config.mu = 0.0;
  config.sigma2 = 0.5;
  config.rng = RngStream(15, {5});
  const std::vector<double> zero_importance(3, 0.0);
  CHECK(gaussian_perturb(x, zero_importance, config) == x);
}

TEST_CASE("gaussian_perturb approaches identity as sigma2 shrinks") {
  const Matrix x = random_matrix(3, 8, 11);
  const std::vector<double> a{0.2, 0.5, 0.8};
  for (const auto variant : {GaussianVariant::scaled_importance,
                             GaussianVariant::variance_importance}) {
    GaussianPerturbConfig config;
    config.variant = variant;
    config.sigma2 = 1e-18;
    config.rng = RngStream(17, {6});
    const Matrix out = gaussian_perturb(x, a, config);
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(out.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-6));
    }
  }
}

TEST_CASE("gaussian_perturb empirical variance matches sigma2") {
  // Eq.-7-style variant with lambda = 1: (x' - x)/x is N(mu, sigma2).
  Matrix x(1, 10000, 1.0);
  const std::vector<double> a{1.0};
  GaussianPerturbConfig config;
  config.variant = GaussianVariant::scaled_importance;
  config.sigma2 = 0.1;
  config.rng = RngStream(19, {7});
  const Matrix out = gaussian_perturb(x, a, config);
  double mean = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mean += out.data()[i] - 1.0;
  }
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = out.data()[i] - 1.0 - mean;
    var += d * d;
  }
  var /= static_cast<double>(x.size() - 1);
  CHECK(std::abs(var - 0.1) <= 0.05 * 0.1);
}

TEST_CASE("gaussian_perturb validates configuration") {
  const Matrix x = random_matrix(2, 4, 12);
  GaussianPerturbConfig config;
  config.sigma2 = 0.0;
  CHECK_THROWS_AS(gaussian_perturb(x, std::vector<double>{0.5, 0.5}, config),
                  ParameterError);
}

TEST_CASE("continuous attention mask is identity at all-ones importances") {
  const auto params = ModelParams::init(16, 8, 2, 12, RngStream(21, {}));
  const Matrix x = embed({"cam", {3, 7, 11, 2}, 0}, params);
  const auto trace = forward(x, params);
  const auto probs =
      continuous_attention_mask(trace, std::vector<double>(4, 1.0), params);
  for (int c = 0; c < 2; ++c) {
    CHECK(std::abs(probs[c] - trace.probs[c]) <= 1e-9);
  }
}

TEST_CASE("continuous attention mask suppresses near-zero tokens") {
  const auto params = ModelParams::init(16, 8, 2, 12, RngStream(23, {}));
  const Matrix x = embed({"cam2", {1, 9, 14}, 0}, params);
  const auto trace = forward(x, params);
  const std::vector<double> a{1.0, 0.0, 1.0};
  const std::vector<double> bias{std::log(1.0 + 1e-12),
                                 std::log(0.0 + 1e-12),
                                 std::log(1.0 + 1e-12)};
  const auto masked = forward_with_attention_bias(x, params, bias);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(masked.attention(i, 1) <= 1e-9);
  }
  const auto probs = continuous_attention_mask(trace, a, params);
  double sum = 0.0;
  for (double p : probs) {
    CHECK(p >= 0.0);
    sum += p;
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("soft removal degrades predictions monotonically in importance") {
  SyntheticSpec spec;
  spec.train_size = 96;
  spec.dev_size = 0;
  spec.test_size = 24;
  const auto corpora = generate_synthetic(spec, RngStream(27, {0xC0}));
  TrainingConfig tc;
  tc.epochs = 30;
  const auto params = train(corpora.train, tc, RngStream(27, {0x7A})).params;

  const std::vector<double> scales{0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<double> mean_prob(scales.size(), 0.0);
  for (std::size_t s = 0; s < scales.size(); ++s) {
    double total = 0.0;
    for (std::size_t k = 0; k < corpora.test.size(); ++k) {
      const auto& seq = corpora.test[k];
      const Matrix x = embed(seq, params);
      const auto trace = forward(x, params);
      // attention importances scaled by t
      auto scores = attention_fa(trace);
      std::vector<double> a = scores.normalized;
      for (auto& v : a) v *= scales[s];
      SoftPerturbConfig config{PerturbMode::remove, 16,
                               RngStream(29, {k})};
      double inst = 0.0;
      const auto samples = soft_perturb(x, a, config);
      for (const auto& sample : samples) {
        inst += forward(sample, params).probs[trace.predicted];
      }
      total += inst / static_cast<double>(samples.size());
    }
    mean_prob[s] = total / static_cast<double>(corpora.test.size());
  }
  int inversions = 0;
  for (std::size_t s = 1; s < scales.size(); ++s) {
    if (mean_prob[s] > mean_prob[s - 1] + 1e-12) ++inversions;
  }
  CHECK(inversions <= 1);
}
