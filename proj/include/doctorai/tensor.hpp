#pragma once

// Dense double-precision kernels, activations, the library RNG and the
// parameter initializers. Every reduction runs left to right in index order
// so results are bitwise reproducible.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "doctorai/errors.hpp"

namespace doctorai {

// xoshiro256** seeded through splitmix64. Both algorithms are public domain
// (Blackman & Vigna) and fully specified, so a seed reproduces the same
// stream on any platform. Distribution transforms below are implemented here
// rather than taken from <random>, whose distributions are
// implementation-defined.
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

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), unbiased by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw InvalidArgument("Rng::below: n must be positive");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  // Standard normal via Box-Muller; one draw per call, the sine branch is
  // discarded so the state stays a plain xoshiro state.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Marsaglia-Tsang; shape < 1 handled by the usual boost u^(1/shape).
  double gamma(double shape, double scale) {
    if (!(shape > 0.0) || !(scale > 0.0)) throw InvalidArgument("Rng::gamma: shape and scale must be positive");
    if (shape < 1.0) {
      double u = uniform();
      while (u <= 0.0) u = uniform();
      return gamma(shape + 1.0, scale) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v * scale;
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v * scale;
    }
  }

  // Knuth's multiplication method; fine for the small means used here.
  std::uint64_t poisson(double mean) {
    if (mean < 0.0) throw InvalidArgument("Rng::poisson: negative mean");
    if (mean == 0.0) return 0;
    const double limit = std::exp(-mean);
    std::uint64_t k = 0;
    double prod = uniform();
    while (prod > limit) {
      ++k;
      prod *= uniform();
    }
    return k;
  }

  // Number of failures before the first success, success probability p.
  std::uint64_t geometric(double p) {
    if (!(p > 0.0) || p > 1.0) throw InvalidArgument("Rng::geometric: p must be in (0, 1]");
    if (p == 1.0) return 0;
    double u = uniform();
    while (u <= 0.0) u = uniform();
    return static_cast<std::uint64_t>(std::floor(std::log(u) / std::log1p(-p)));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Index drawn from nonnegative weights (need not be normalized).
  std::size_t categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) throw InvalidArgument("Rng::categorical: weights sum to zero");
    const double target = uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      acc += weights[i];
      if (target < acc) return i;
    }
    for (std::size_t i = weights.size(); i > 0; --i)
      if (weights[i - 1] > 0.0) return i - 1;
    return weights.size() - 1;
  }

  std::string serialize() const {
    std::string out;
    char buf[17];
    for (auto s : state_) {
      std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(s));
      out += buf;
    }
    return out;
  }

  static Rng deserialize(const std::string& text) {
    if (text.size() != 64) throw CorruptionError("rng state must be 64 hex characters");
    Rng rng;
    for (std::size_t i = 0; i < 4; ++i) {
      std::uint64_t v = 0;
      for (std::size_t k = 0; k < 16; ++k) {
        const char ch = text[i * 16 + k];
        int digit;
        if (ch >= '0' && ch <= '9') digit = ch - '0';
        else if (ch >= 'a' && ch <= 'f') digit = ch - 'a' + 10;
        else throw CorruptionError("rng state contains a non-hex character");
        v = (v << 4) | static_cast<std::uint64_t>(digit);
      }
      rng.state_[i] = v;
    }
    return rng;
  }

  bool operator==(const Rng&) const = default;

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::array<std::uint64_t, 4> state_{};
};

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t len, double fill = 0.0) : data_(len, fill) {}
  Vector(std::initializer_list<double> values) : data_(values) {}
  explicit Vector(std::vector<double> values) : data_(std::move(values)) {}

  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> span() noexcept { return data_; }
  std::span<const double> span() const noexcept { return data_; }
  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }
  const std::vector<double>& values() const noexcept { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  bool operator==(const Vector&) const = default;

 private:
  std::vector<double> data_;
};

// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), data_(std::move(values)) {
    if (data_.size() != rows_ * cols_) throw DimensionError("Matrix: data length does not match shape");
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionError("Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double* row(std::size_t r) noexcept { return data_.data() + r * cols_; }
  const double* row(std::size_t r) const noexcept { return data_.data() + r * cols_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> span() noexcept { return data_; }
  std::span<const double> span() const noexcept { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
  return t;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* o = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const double* brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aik * brow[j];
    }
  }
  return out;
}

// out = A x
inline void matvec_into(const Matrix& a, std::span<const double> x, std::span<double> out) {
  if (a.cols() != x.size() || a.rows() != out.size()) throw DimensionError("matvec: shape mismatch");
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* w = a.row(r);
    double acc = 0.0;
    for (std::size_t c = 0; c < a.cols(); ++c) acc += w[c] * x[c];
    out[r] = acc;
  }
}

inline Vector matvec(const Matrix& a, const Vector& x) {
  Vector out(a.rows());
  matvec_into(a, x.span(), out.span());
  return out;
}

// out += A^T x, accumulated row by row.
inline void matvec_transposed_acc(const Matrix& a, std::span<const double> x, std::span<double> out) {
  if (a.rows() != x.size() || a.cols() != out.size()) throw DimensionError("matvec_transposed: shape mismatch");
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double xr = x[r];
    if (xr == 0.0) continue;
    const double* w = a.row(r);
    for (std::size_t c = 0; c < a.cols(); ++c) out[c] += w[c] * xr;
  }
}

inline Vector matvec_transposed(const Matrix& a, const Vector& x) {
  Vector out(a.cols());
  matvec_transposed_acc(a, x.span(), out.span());
  return out;
}

// A += u v^T
inline void outer_acc(Matrix& a, std::span<const double> u, std::span<const double> v) {
  if (a.rows() != u.size() || a.cols() != v.size()) throw DimensionError("outer: shape mismatch");
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double ur = u[r];
    if (ur == 0.0) continue;
    double* w = a.row(r);
    for (std::size_t c = 0; c < a.cols(); ++c) w[c] += ur * v[c];
  }
}

inline Vector add(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw DimensionError("add: length mismatch");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("add: shape mismatch");
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  return out;
}

inline Vector hadamard(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw DimensionError("hadamard: length mismatch");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("hadamard: shape mismatch");
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Vector sigmoid(const Vector& v) {
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = sigmoid(v[i]);
  return out;
}

inline Vector tanh(const Vector& v) {
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::tanh(v[i]);
  return out;
}

inline Vector relu(const Vector& v) {
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : 0.0;
  return out;
}

inline void softmax_into(std::span<const double> v, std::span<double> out) {
  if (v.empty()) throw DimensionError("softmax: empty input");
  if (out.size() != v.size()) throw DimensionError("softmax: output length mismatch");
  const double mx = *std::max_element(v.begin(), v.end());
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    total += out[i];
  }
  const double inv = 1.0 / total;
  for (auto& o : out) o *= inv;
}

inline Vector softmax(const Vector& v) {
  Vector out(v.size());
  softmax_into(v.span(), out.span());
  return out;
}

namespace detail {

// One-sided Jacobi on the columns of a (m >= n). On return a holds U*Sigma
// and v holds V, so that the input equals a * v^T.
inline void one_sided_jacobi(Matrix& a, Matrix& v) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  v = Matrix::identity(n);
  constexpr double kTol = 1e-15;
  for (int sweep = 0; sweep < 100; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += a(i, p) * a(i, p);
          beta += a(i, q) * a(i, q);
          gamma += a(i, p) * a(i, q);
        }
        if (std::abs(gamma) <= kTol * std::sqrt(alpha * beta) || gamma == 0.0) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double ap = a(i, p), aq = a(i, q);
          a(i, p) = c * ap - s * aq;
          a(i, q) = s * ap + c * aq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }
}

// Orthonormal polar factor U V^T of a tall matrix.
inline Matrix polar_factor_tall(Matrix a) {
  Matrix v;
  one_sided_jacobi(a, v);
  const std::size_t m = a.rows(), n = a.cols();
  for (std::size_t j = 0; j < n; ++j) {
    double norm = 0.0;
    for (std::size_t i = 0; i < m; ++i) norm += a(i, j) * a(i, j);
    norm = std::sqrt(norm);
    // Gaussian draws are full rank with probability one.
    if (norm == 0.0) throw InvalidArgument("orthonormal_init: rank-deficient draw");
    for (std::size_t i = 0; i < m; ++i) a(i, j) /= norm;
  }
  return matmul(a, transpose(v));
}

}  // namespace detail

// Orthonormal factor of the SVD of a Gaussian matrix. Columns are orthonormal
// when rows >= cols, rows are orthonormal otherwise.
inline Matrix orthonormal_init(std::size_t rows, std::size_t cols, Rng& rng) {
  if (rows == 0 || cols == 0) throw DimensionError("orthonormal_init: empty shape");
  Matrix g(rows, cols);
  for (auto& x : g.span()) x = rng.normal();
  if (rows >= cols) return detail::polar_factor_tall(std::move(g));
  return transpose(detail::polar_factor_tall(transpose(g)));
}

inline Vector uniform_init(std::size_t len, double lo, double hi, Rng& rng) {
  if (!(lo < hi)) throw InvalidArgument("uniform_init: lo must be below hi");
  Vector out(len);
  for (auto& x : out) {
    x = rng.uniform(lo, hi);
    // lo + (hi - lo) * u can round up to hi for u close to 1.
    if (x >= hi) x = std::nextafter(hi, lo);
  }
  return out;
}

}  // namespace doctorai
