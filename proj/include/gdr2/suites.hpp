#pragma once

#include "gdr2/report.hpp"
#include "gdr2/run_config.hpp"

namespace gdr2 {

// Verification and measurement suites behind the CLI. Every suite is
// deterministic given (config, seed); bench timings are the one exception,
// the CSV layout and case list still are.
Report run_equivalence_suite(const RunConfig& cfg);
Report run_gradient_suite(const RunConfig& cfg);
Report run_reduction_suite(const RunConfig& cfg);
Report run_bench_suite(const RunConfig& cfg, Csv* csv);
Report run_recall_suite(const RunConfig& cfg);

}  // namespace gdr2
