#include "gdr2/run_config.hpp"

#include <charconv>
#include <fstream>

#include "gdr2/common.hpp"

namespace gdr2 {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  std::size_t e = s.find_last_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, e - b + 1);
}

std::int64_t parse_int(const std::string& v, std::size_t offset) {
  std::int64_t out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw ParseError("run config: invalid integer '" + v + "'", offset);
  return out;
}

double parse_real(const std::string& v, std::size_t offset) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ParseError("run config: invalid real '" + v + "'", offset);
  }
}

bool parse_flag(const std::string& v, std::size_t offset) {
  if (v == "0" || v == "false") return false;
  if (v == "1" || v == "true") return true;
  throw ParseError("run config: invalid flag '" + v + "'", offset);
}

}  // namespace

void RunConfig::validate() const {
  const auto dim_ok = [](std::int64_t d) { return d >= 1; };
  check_contract(dim_ok(L) && dim_ok(C) && dim_ok(d_model) && dim_ok(H) && dim_ok(H_v) &&
                     dim_ok(d_k) && dim_ok(d_v) && dim_ok(conv_width) && dim_ok(vocab) &&
                     dim_ok(pairs) && dim_ok(steps) && dim_ok(batch),
                 "run config: all dims must be >= 1");
  check_contract(precision == "f32" || precision == "f64",
                 "run config: precision must be f32 or f64");
  check_contract(solve_precision == "input" || solve_precision == "f64",
                 "run config: solve_precision must be input or f64");
  check_contract(H_v % H == 0, "run config: H_v must be a multiple of H");
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::size_t line_start = 0;
  while (line_start <= text.size()) {
    std::size_t line_end = text.find('\n', line_start);
    if (line_end == std::string::npos) line_end = text.size();
    std::string line = text.substr(line_start, line_end - line_start);
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (!line.empty()) {
      const std::size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw ParseError("run config: expected key=value, got '" + line + "'", line_start);
      const std::string key = trim(line.substr(0, eq));
      const std::string val = trim(line.substr(eq + 1));
      if (key == "seed")
        cfg.seed = static_cast<std::uint64_t>(parse_int(val, line_start));
      else if (key == "precision")
        cfg.precision = val;
      else if (key == "L")
        cfg.L = parse_int(val, line_start);
      else if (key == "C")
        cfg.C = parse_int(val, line_start);
      else if (key == "d_model")
        cfg.d_model = parse_int(val, line_start);
      else if (key == "H")
        cfg.H = parse_int(val, line_start);
      else if (key == "H_v")
        cfg.H_v = parse_int(val, line_start);
      else if (key == "d_k")
        cfg.d_k = parse_int(val, line_start);
      else if (key == "d_v")
        cfg.d_v = parse_int(val, line_start);
      else if (key == "conv_width")
        cfg.conv_width = parse_int(val, line_start);
      else if (key == "neg_eig")
        cfg.neg_eig = parse_flag(val, line_start);
      else if (key == "solve_precision")
        cfg.solve_precision = val;
      else if (key == "vocab")
        cfg.vocab = parse_int(val, line_start);
      else if (key == "pairs")
        cfg.pairs = parse_int(val, line_start);
      else if (key == "steps")
        cfg.steps = parse_int(val, line_start);
      else if (key == "batch")
        cfg.batch = parse_int(val, line_start);
      else if (key == "lr")
        cfg.lr = parse_real(val, line_start);
      else
        throw ParseError("run config: unknown key '" + key + "'", line_start);
    }
    if (line_end == text.size()) break;
    line_start = line_end + 1;
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open run config '" + path + "'", 0);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_run_config(text);
}

}  // namespace gdr2
