#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "gdr2/model.hpp"
#include "gdr2/run_config.hpp"
#include "gdr2/suites.hpp"
#include "gdr2/tensor_io.hpp"

namespace {

using namespace gdr2;

RunConfig resolve_config(const std::string& config_path, const std::string& seed_flag,
                         const std::string& precision_flag) {
  RunConfig cfg;
  if (!config_path.empty()) cfg = load_run_config(config_path);
  if (!seed_flag.empty()) cfg.seed = std::stoull(seed_flag);
  if (!precision_flag.empty()) cfg.precision = precision_flag;
  cfg.validate();
  return cfg;
}

int emit(const Report& rep, const std::string& csv_path, const Csv* csv) {
  std::cout << rep.to_text();
  if (!csv_path.empty() && csv) {
    std::ofstream f(csv_path, std::ios::trunc);
    if (!f) {
      std::cerr << "cannot write csv '" << csv_path << "'\n";
      return 2;
    }
    f << csv->to_text();
  }
  return rep.exit_code();
}

template <typename scalar_t>
int run_decode(const RunConfig& cfg, const std::string& params_path,
               const std::string& prompt_path, index_t steps, const std::string& dump_path) {
  LayerConfig lc;
  lc.d_model = cfg.d_model;
  lc.H = cfg.H;
  lc.H_v = cfg.H_v;
  lc.d_k = cfg.d_k;
  lc.d_v = cfg.d_v;
  lc.conv_width = cfg.conv_width;
  lc.chunk_size = cfg.C;
  lc.neg_eig = cfg.neg_eig;

  const ToyModel<scalar_t> model =
      model_from_tensors<scalar_t>(lc, read_tensor_file(params_path));

  std::vector<index_t> prompt;
  for (const NamedTensor& t : read_tensor_file(prompt_path))
    if (t.name == "tokens") {
      expect_dtype<scalar_t>(t);
      const index_t n = t.element_count();
      for (index_t i = 0; i < n; ++i) {
        const double v = t.dtype == 1 ? static_cast<double>(t.f32[static_cast<std::size_t>(i)])
                                      : t.f64[static_cast<std::size_t>(i)];
        prompt.push_back(static_cast<index_t>(v));
      }
    }
  if (prompt.empty()) throw ParseError("prompt file has no 'tokens' tensor", 0);

  const DecodeRun<scalar_t> run = greedy_decode(model, prompt, steps);
  for (std::size_t i = 0; i < run.generated.size(); ++i)
    std::cout << (i ? " " : "") << run.generated[i];
  std::cout << "\n";

  if (!dump_path.empty()) {
    std::vector<NamedTensor> states;
    for (std::size_t hv = 0; hv < run.state.head_states.size(); ++hv) {
      const Mat<double>& sd = run.state.head_states[hv];
      if constexpr (std::is_same_v<scalar_t, float>) {
        Mat<float> sf(sd.rows, sd.cols);
        for (index_t i = 0; i < sd.size(); ++i) sf.data[i] = static_cast<float>(sd.data[i]);
        states.push_back(make_tensor("state_h" + std::to_string(hv), sf));
      } else {
        states.push_back(make_tensor("state_h" + std::to_string(hv), sd));
      }
    }
    write_tensor_file(dump_path, states);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gated Delta Rule-2 verification harness"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, seed_flag, precision_flag, csv_path;
  app.add_option("--config", config_path, "run configuration file (key=value lines)");
  app.add_option("--seed", seed_flag, "override the config seed");
  app.add_option("--precision", precision_flag, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));
  app.add_option("--csv", csv_path, "write benchmark series to this CSV path");

  auto* equiv = app.add_subcommand("check-equivalence",
                                   "chunkwise forward vs the tokenwise reference");
  equiv->fallthrough();
  auto* grads = app.add_subcommand("check-gradients",
                                   "analytic backward vs central finite differences");
  grads->fallthrough();
  auto* reds = app.add_subcommand("check-reductions", "tied-gate reduction lattice");
  reds->fallthrough();
  auto* bench = app.add_subcommand("bench", "tokenwise vs chunkwise throughput");
  bench->fallthrough();
  auto* recall = app.add_subcommand("train-recall", "toy associative-recall training");
  recall->fallthrough();
  auto* decode = app.add_subcommand("decode", "greedy recurrent decoding");
  decode->fallthrough();

  std::string params_path, prompt_path, dump_path;
  std::int64_t steps = 0;
  decode->add_option("--params", params_path, "model checkpoint (tensor file)")->required();
  decode->add_option("--prompt", prompt_path, "prompt tokens (tensor file)")->required();
  decode->add_option("--steps", steps, "tokens to generate");
  decode->add_option("--dump", dump_path, "write final head states to this tensor file");

  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig cfg = resolve_config(config_path, seed_flag, precision_flag);
    if (equiv->parsed()) return emit(run_equivalence_suite(cfg), "", nullptr);
    if (grads->parsed()) return emit(run_gradient_suite(cfg), "", nullptr);
    if (reds->parsed()) return emit(run_reduction_suite(cfg), "", nullptr);
    if (bench->parsed()) {
      Csv csv;
      const Report rep = run_bench_suite(cfg, &csv);
      return emit(rep, csv_path, &csv);
    }
    if (recall->parsed()) return emit(run_recall_suite(cfg), "", nullptr);
    if (decode->parsed()) {
      if (cfg.precision == "f32")
        return run_decode<float>(cfg, params_path, prompt_path, steps, dump_path);
      return run_decode<double>(cfg, params_path, prompt_path, steps, dump_path);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
