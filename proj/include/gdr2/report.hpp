#pragma once

#include <string>
#include <vector>

namespace gdr2 {

// One record per checked case. XFAIL marks expected-fail negative controls;
// they are listed but never flip the exit code. INFO rows carry measurements
// without a pass/fail decision.
enum class CaseStatus { pass, fail, xfail, info };

struct CaseRecord {
  std::string suite;
  std::string case_id;  // no whitespace
  std::string metric;
  double value = 0.0;
  double threshold = 0.0;
  CaseStatus status = CaseStatus::pass;
};

struct Report {
  std::vector<CaseRecord> records;

  // value <= threshold passes
  void check_le(const std::string& suite, const std::string& case_id,
                const std::string& metric, double value, double threshold);
  // value >= threshold passes
  void check_ge(const std::string& suite, const std::string& case_id,
                const std::string& metric, double value, double threshold);
  // expected failure: listed as XFAIL when value exceeds the threshold as
  // intended, FAIL when the negative control unexpectedly passes
  void check_xfail_gt(const std::string& suite, const std::string& case_id,
                      const std::string& metric, double value, double threshold);
  void info(const std::string& suite, const std::string& case_id,
            const std::string& metric, double value);

  bool all_pass() const;
  int exit_code() const { return all_pass() ? 0 : 1; }
  std::string to_text() const;
};

Report parse_report(const std::string& text);

// Plain numeric CSV with a header row.
struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  std::string to_text() const;
};

Csv parse_csv(const std::string& text);

}  // namespace gdr2
