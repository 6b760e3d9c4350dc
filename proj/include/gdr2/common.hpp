#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace gdr2 {

using index_t = std::int64_t;

// Contract violations are exceptions, never silent repairs.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ContractError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct RangeError : std::out_of_range {
  using std::out_of_range::out_of_range;
};
struct ParseError : std::runtime_error {
  ParseError(const std::string& msg, std::size_t byte_offset)
      : std::runtime_error(msg + " (byte " + std::to_string(byte_offset) + ")"),
        offset(byte_offset) {}
  std::size_t offset;
};

inline void check_dim(bool ok, const char* msg) {
  if (!ok) throw DimensionError(msg);
}
inline void check_contract(bool ok, const char* msg) {
  if (!ok) throw ContractError(msg);
}

// Dense row-major matrix. Rows are tokens for all chunk tensors.
template <typename scalar_t>
struct Mat {
  index_t rows = 0;
  index_t cols = 0;
  std::vector<scalar_t> data;

  Mat() = default;
  Mat(index_t r, index_t c)
      : rows(r), cols(c), data(static_cast<std::size_t>(r * c), scalar_t(0)) {}

  static Mat eye(index_t n) {
    Mat m(n, n);
    for (index_t i = 0; i < n; ++i) m(i, i) = scalar_t(1);
    return m;
  }

  scalar_t* row(index_t r) { return data.data() + r * cols; }
  const scalar_t* row(index_t r) const { return data.data() + r * cols; }

  scalar_t& operator()(index_t r, index_t c) {
    return data[static_cast<std::size_t>(r * cols + c)];
  }
  scalar_t operator()(index_t r, index_t c) const {
    return data[static_cast<std::size_t>(r * cols + c)];
  }

  index_t size() const { return rows * cols; }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

template <typename scalar_t>
using Vec = std::vector<scalar_t>;

template <typename scalar_t>
Mat<scalar_t> zeros_like(const Mat<scalar_t>& m) {
  return Mat<scalar_t>(m.rows, m.cols);
}

template <typename scalar_t>
double max_abs(const Mat<scalar_t>& m) {
  double v = 0.0;
  for (scalar_t x : m.data) v = std::max(v, std::abs(static_cast<double>(x)));
  return v;
}

template <typename scalar_t>
double max_abs_diff(const Mat<scalar_t>& a, const Mat<scalar_t>& b) {
  check_dim(a.same_shape(b), "max_abs_diff: shape mismatch");
  double v = 0.0;
  for (index_t i = 0; i < a.size(); ++i)
    v = std::max(v, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
  return v;
}

template <typename scalar_t>
double max_abs_diff(const Vec<scalar_t>& a, const Vec<scalar_t>& b) {
  check_dim(a.size() == b.size(), "max_abs_diff: length mismatch");
  double v = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    v = std::max(v, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return v;
}

template <typename scalar_t>
bool all_finite(const Mat<scalar_t>& m) {
  for (scalar_t x : m.data)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

// Counter-based generator (splitmix64). Identical seed gives an identical
// stream on every platform; distributions below use only portable arithmetic.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  double uniform() {  // [0, 1)
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Independent substream; stepping the child never touches the parent.
  Rng fork() { return Rng(next_u64()); }

 private:
  std::uint64_t state_;
};

template <typename scalar_t>
Mat<scalar_t> random_uniform(Rng& rng, index_t rows, index_t cols, double lo, double hi) {
  Mat<scalar_t> m(rows, cols);
  for (index_t i = 0; i < m.size(); ++i)
    m.data[i] = static_cast<scalar_t>(rng.uniform(lo, hi));
  return m;
}

template <typename scalar_t>
Vec<scalar_t> random_uniform_vec(Rng& rng, index_t len, double lo, double hi) {
  Vec<scalar_t> v(static_cast<std::size_t>(len));
  for (auto& x : v) x = static_cast<scalar_t>(rng.uniform(lo, hi));
  return v;
}

}  // namespace gdr2
