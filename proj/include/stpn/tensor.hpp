#pragma once

// Dense row-major matrices and vectors in double precision, plus a seeded
// xoshiro256** generator. Everything else in the library is built on these.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace stpn {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;
  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(Shape s) {
  return std::to_string(s.rows) + "x" + std::to_string(s.cols);
}

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t n, double fill = 0.0) : data_(n, fill) {}
  Vector(std::initializer_list<double> v) : data_(v) {}
  explicit Vector(std::vector<double> v) : data_(std::move(v)) {}

  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  auto begin() { return data_.begin(); }
  auto end() { return data_.end(); }
  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }
  void fill(double v) { data_.assign(data_.size(), v); }

  friend bool operator==(const Vector&, const Vector&) = default;

 private:
  std::vector<double> data_;
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  explicit Matrix(Shape s, double fill = 0.0) : Matrix(s.rows, s.cols, fill) {}
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw Error("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  Shape shape() const { return {rows_, cols_}; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double* row(std::size_t r) { return data_.data() + r * cols_; }
  const double* row(std::size_t r) const { return data_.data() + r * cols_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  void fill(double v) { data_.assign(data_.size(), v); }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline void require_same(Shape a, Shape b, const char* op) {
  if (!(a == b))
    throw Error(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

inline Vector matvec(const Matrix& m, const Vector& v) {
  if (m.cols() != v.size())
    throw Error("matvec: shape mismatch " + to_string(m.shape()) + " vs vector of length " +
                std::to_string(v.size()));
  Vector out(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double* mr = m.row(r);
    double acc = 0.0;
    for (std::size_t c = 0; c < m.cols(); ++c) acc += mr[c] * v[c];
    out[r] = acc;
  }
  return out;
}

// m^T v
inline Vector matvec_transposed(const Matrix& m, const Vector& v) {
  if (m.rows() != v.size())
    throw Error("matvec_transposed: shape mismatch " + to_string(m.shape()) +
                " vs vector of length " + std::to_string(v.size()));
  Vector out(m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double* mr = m.row(r);
    const double vr = v[r];
    for (std::size_t c = 0; c < m.cols(); ++c) out[c] += mr[c] * vr;
  }
  return out;
}

// result(i, j) = a[i] * b[j]
inline Matrix outer(const Vector& a, const Vector& b) {
  Matrix out(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    double* r = out.row(i);
    for (std::size_t j = 0; j < b.size(); ++j) r[j] = a[i] * b[j];
  }
  return out;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  require_same(a.shape(), b.shape(), "hadamard");
  Matrix out(a.shape());
  for (std::size_t k = 0; k < a.size(); ++k) out.data()[k] = a.data()[k] * b.data()[k];
  return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  require_same(a.shape(), b.shape(), "add");
  Matrix out(a.shape());
  for (std::size_t k = 0; k < a.size(); ++k) out.data()[k] = a.data()[k] + b.data()[k];
  return out;
}

inline Matrix subtract(const Matrix& a, const Matrix& b) {
  require_same(a.shape(), b.shape(), "subtract");
  Matrix out(a.shape());
  for (std::size_t k = 0; k < a.size(); ++k) out.data()[k] = a.data()[k] - b.data()[k];
  return out;
}

inline Vector add(const Vector& a, const Vector& b) {
  if (a.size() != b.size())
    throw Error("add: length mismatch " + std::to_string(a.size()) + " vs " +
                std::to_string(b.size()));
  Vector out(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k] + b[k];
  return out;
}

inline Matrix scale(const Matrix& a, double s) {
  Matrix out(a.shape());
  for (std::size_t k = 0; k < a.size(); ++k) out.data()[k] = a.data()[k] * s;
  return out;
}

inline Vector scale(const Vector& a, double s) {
  Vector out(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k] * s;
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) out(c, r) = a(r, c);
  return out;
}

inline Vector row_l2_norms(const Matrix& a) {
  Vector out(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* ar = a.row(r);
    double acc = 0.0;
    for (std::size_t c = 0; c < a.cols(); ++c) acc += ar[c] * ar[c];
    out[r] = std::sqrt(acc);
  }
  return out;
}

// [a; b]
inline Vector concat(const Vector& a, const Vector& b) {
  Vector out(a.size() + b.size());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k];
  for (std::size_t k = 0; k < b.size(); ++k) out[a.size() + k] = b[k];
  return out;
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}
inline bool all_finite(const Matrix& m) { return all_finite(m.values()); }
inline bool all_finite(const Vector& v) { return all_finite(v.values()); }

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

// xoshiro256** 1.0 (Blackman & Vigna), seeded through splitmix64. Output
// sequence depends only on the seed, never on the platform's <random>.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& s : state_) s = splitmix64(x);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // [0, 1) with 53 bits of resolution
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw Error("Rng::below: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return uniform01() < p; }

  // Independent child stream; used to give each seed / split its own generator.
  Rng split(std::uint64_t stream) {
    std::uint64_t mix = next_u64() ^ (stream * 0x9E3779B97F4A7C15ULL);
    return Rng(mix);
  }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t state_[4]{};
};

inline Matrix uniform(Rng& rng, double lo, double hi, Shape shape) {
  if (lo > hi) throw Error("uniform: lo > hi");
  Matrix out(shape);
  for (auto& v : out.values()) v = rng.uniform(lo, hi);
  return out;
}

}  // namespace stpn
