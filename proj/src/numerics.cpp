#include "faitheval/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <utility>

namespace faitheval {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("matrix data length does not match rows*cols");
  }
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ");
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) {
        out(i, j) += aik * b(k, j);
      }
    }
  }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      out(j, i) = a(i, j);
    }
  }
  return out;
}

std::vector<double> softmax(std::span<const double> values) {
  if (values.empty()) {
    throw NumericError("softmax: empty input");
  }
  double max_v = values[0];
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError("softmax: non-finite input");
    }
    max_v = std::max(max_v, v);
  }
  std::vector<double> out(values.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = std::exp(values[i] - max_v);
    sum += out[i];
  }
  for (double& v : out) {
    v /= sum;
  }
  return out;
}

namespace {

// 64-bit finalizer (xor-shift-multiply, as in splitmix64).
inline std::uint64_t mix64(std::uint64_t z) {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ULL;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return z;
}

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
constexpr std::uint64_t kPathSalt = 0xD1B54A32D192ED03ULL;

inline std::uint64_t derive_key(std::uint64_t key, std::uint64_t id) {
  return mix64((key + kGolden) ^ mix64(id ^ kPathSalt));
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::span<const std::uint64_t> path)
    : key_(mix64(seed ^ 0x5DEECE66DULL)) {
  for (std::uint64_t id : path) {
    key_ = derive_key(key_, id);
  }
}

RngStream RngStream::child(std::uint64_t id) const {
  return RngStream(derive_key(key_, id));
}

std::uint64_t RngStream::next_u64() {
  ++counter_;
  return mix64(key_ + counter_ * kGolden);
}

double RngStream::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::next_gaussian(double mu, double sigma) {
  double u1 = next_double();
  const double u2 = next_double();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  const double radius = std::sqrt(-2.0 * std::log(u1));
  return mu + sigma * radius * std::cos(2.0 * std::numbers::pi * u2);
}

MaskVector bernoulli_mask(RngStream rng, double q, std::size_t n) {
  if (!(q >= 0.0 && q <= 1.0)) {
    throw ParameterError("bernoulli_mask: q must lie in [0,1]");
  }
  if (n == 0) {
    throw ParameterError("bernoulli_mask: n must be >= 1");
  }
  MaskVector mask(n);
  for (std::size_t i = 0; i < n; ++i) {
    mask[i] = rng.next_double() < q ? 1 : 0;
  }
  return mask;
}

}  // namespace faitheval
