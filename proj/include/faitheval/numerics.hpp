#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "faitheval/error.hpp"

namespace faitheval {

// Dense row-major matrix of 64-bit floats. Deliberately minimal: the
// rest of the library needs products, transposes and elementwise loops,
// nothing more.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) {
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool all_finite() const;
  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

// Stable softmax (max-subtraction). Throws NumericError on empty or
// non-finite input.
std::vector<double> softmax(std::span<const double> values);

// Splittable counter-based random stream. A stream is identified by a
// 64-bit key derived from (seed, path); each draw hashes (key, counter),
// so derivation and drawing never interfere:
//
//   rng_for(seed, {a}).child(b) == rng_for(seed, {a, b})
//
// and the draw sequence is a pure function of (seed, path). Workers can
// derive their own streams and produce schedule-independent results.
class RngStream {
 public:
  RngStream() : RngStream(0, {}) {}
  RngStream(std::uint64_t seed, std::initializer_list<std::uint64_t> path)
      : RngStream(seed, std::span<const std::uint64_t>(path.begin(), path.size())) {}
  RngStream(std::uint64_t seed, std::span<const std::uint64_t> path);

  // Derives the stream for path + [id] without disturbing this stream.
  RngStream child(std::uint64_t id) const;

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double next_double();
  // Box-Muller; two uniforms consumed per draw.
  double next_gaussian(double mu = 0.0, double sigma = 1.0);

  std::uint64_t key() const { return key_; }

 private:
  explicit RngStream(std::uint64_t key) : key_(key) {}

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

inline RngStream rng_for(std::uint64_t seed,
                         std::span<const std::uint64_t> path = {}) {
  return RngStream(seed, path);
}

// Binary mask, one byte per entry (0 or 1).
using MaskVector = std::vector<std::uint8_t>;

// Each entry is independently 1 with probability q. Takes the stream by
// value: the result is a pure function of (stream, q, n).
MaskVector bernoulli_mask(RngStream rng, double q, std::size_t n);

}  // namespace faitheval
