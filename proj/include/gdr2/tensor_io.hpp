#pragma once

#include <string>
#include <vector>

#include "gdr2/common.hpp"

namespace gdr2 {

// Binary tensor container: magic "GDR2", version u16, then per tensor a
// record of dtype u8 (1 = binary32, 2 = binary64), ndim u8, dims u64[ndim],
// a length-prefixed UTF-8 name and the row-major little-endian payload.
// Records are concatenated until end of file.
struct NamedTensor {
  std::string name;
  std::vector<index_t> dims;
  int dtype = 2;  // 1 = binary32, 2 = binary64
  std::vector<float> f32;
  std::vector<double> f64;

  index_t element_count() const {
    index_t n = 1;
    for (index_t d : dims) n *= d;
    return n;
  }
};

inline constexpr std::uint16_t kTensorFileVersion = 1;

std::vector<NamedTensor> read_tensor_file(const std::string& path);
void write_tensor_file(const std::string& path, const std::vector<NamedTensor>& tensors);

template <typename scalar_t>
NamedTensor make_tensor(const std::string& name, const Mat<scalar_t>& m) {
  NamedTensor t;
  t.name = name;
  t.dims = {m.rows, m.cols};
  if constexpr (std::is_same_v<scalar_t, float>) {
    t.dtype = 1;
    t.f32 = m.data;
  } else {
    t.dtype = 2;
    t.f64 = m.data;
  }
  return t;
}

template <typename scalar_t>
NamedTensor make_tensor(const std::string& name, const Vec<scalar_t>& v) {
  NamedTensor t;
  t.name = name;
  t.dims = {static_cast<index_t>(v.size())};
  if constexpr (std::is_same_v<scalar_t, float>) {
    t.dtype = 1;
    t.f32 = v;
  } else {
    t.dtype = 2;
    t.f64 = v;
  }
  return t;
}

// Rejects cross-precision reads instead of converting silently.
template <typename scalar_t>
void expect_dtype(const NamedTensor& t) {
  const int want = std::is_same_v<scalar_t, float> ? 1 : 2;
  if (t.dtype != want)
    throw ParseError("tensor '" + t.name + "': dtype " + std::to_string(t.dtype) +
                         " does not match requested precision",
                     0);
}

template <typename scalar_t>
Mat<scalar_t> tensor_to_mat(const NamedTensor& t) {
  expect_dtype<scalar_t>(t);
  check_dim(t.dims.size() == 2, "tensor_to_mat: tensor is not 2-D");
  Mat<scalar_t> m(t.dims[0], t.dims[1]);
  if constexpr (std::is_same_v<scalar_t, float>)
    m.data = t.f32;
  else
    m.data = t.f64;
  return m;
}

template <typename scalar_t>
Vec<scalar_t> tensor_to_vec(const NamedTensor& t) {
  expect_dtype<scalar_t>(t);
  check_dim(t.dims.size() == 1, "tensor_to_vec: tensor is not 1-D");
  if constexpr (std::is_same_v<scalar_t, float>)
    return t.f32;
  else
    return t.f64;
}

}  // namespace gdr2
