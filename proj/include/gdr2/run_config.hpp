#pragma once

#include <cstdint>
#include <string>

namespace gdr2 {

// Line-based key=value run configuration. '#' starts a comment, unknown keys
// are rejected, every dimension must be >= 1.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string precision = "f64";        // f32 | f64
  std::int64_t L = 64;
  std::int64_t C = 64;
  std::int64_t d_model = 32;
  std::int64_t H = 1;
  std::int64_t H_v = 1;
  std::int64_t d_k = 16;
  std::int64_t d_v = 16;
  std::int64_t conv_width = 4;
  bool neg_eig = false;
  std::string solve_precision = "input";  // input | f64
  // recall task
  std::int64_t vocab = 16;
  std::int64_t pairs = 8;
  std::int64_t steps = 2000;
  std::int64_t batch = 32;
  double lr = 0.0;  // 0 selects the built-in sweep

  void validate() const;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

}  // namespace gdr2
