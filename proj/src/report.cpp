#include "gdr2/report.hpp"

#include <cstdio>
#include <sstream>

#include "gdr2/common.hpp"

namespace gdr2 {

namespace {

std::string format_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12e", v);
  return buf;
}

const char* status_name(CaseStatus s) {
  switch (s) {
    case CaseStatus::pass: return "PASS";
    case CaseStatus::fail: return "FAIL";
    case CaseStatus::xfail: return "XFAIL";
    case CaseStatus::info: return "INFO";
  }
  return "FAIL";
}

CaseStatus status_from_name(const std::string& s, std::size_t offset) {
  if (s == "PASS") return CaseStatus::pass;
  if (s == "FAIL") return CaseStatus::fail;
  if (s == "XFAIL") return CaseStatus::xfail;
  if (s == "INFO") return CaseStatus::info;
  throw ParseError("report: unknown status '" + s + "'", offset);
}

}  // namespace

void Report::check_le(const std::string& suite, const std::string& case_id,
                      const std::string& metric, double value, double threshold) {
  records.push_back({suite, case_id, metric, value, threshold,
                     value <= threshold ? CaseStatus::pass : CaseStatus::fail});
}

void Report::check_ge(const std::string& suite, const std::string& case_id,
                      const std::string& metric, double value, double threshold) {
  records.push_back({suite, case_id, metric, value, threshold,
                     value >= threshold ? CaseStatus::pass : CaseStatus::fail});
}

void Report::check_xfail_gt(const std::string& suite, const std::string& case_id,
                            const std::string& metric, double value, double threshold) {
  records.push_back({suite, case_id, metric, value, threshold,
                     value > threshold ? CaseStatus::xfail : CaseStatus::fail});
}

void Report::info(const std::string& suite, const std::string& case_id,
                  const std::string& metric, double value) {
  records.push_back({suite, case_id, metric, value, 0.0, CaseStatus::info});
}

bool Report::all_pass() const {
  for (const CaseRecord& r : records)
    if (r.status == CaseStatus::fail) return false;
  return true;
}

std::string Report::to_text() const {
  std::ostringstream out;
  for (const CaseRecord& r : records)
    out << r.suite << ' ' << r.case_id << ' ' << r.metric << ' ' << format_value(r.value)
        << ' ' << format_value(r.threshold) << ' ' << status_name(r.status) << '\n';
  return out.str();
}

Report parse_report(const std::string& text) {
  Report rep;
  std::istringstream in(text);
  std::string line;
  std::size_t offset = 0;
  while (std::getline(in, line)) {
    if (!line.empty()) {
      std::istringstream ls(line);
      CaseRecord r;
      std::string value, threshold, status;
      if (!(ls >> r.suite >> r.case_id >> r.metric >> value >> threshold >> status))
        throw ParseError("report: malformed record '" + line + "'", offset);
      r.value = std::stod(value);
      r.threshold = std::stod(threshold);
      r.status = status_from_name(status, offset);
      rep.records.push_back(std::move(r));
    }
    offset += line.size() + 1;
  }
  return rep;
}

std::string Csv::to_text() const {
  std::ostringstream out;
  for (std::size_t i = 0; i < header.size(); ++i)
    out << (i ? "," : "") << header[i];
  out << '\n';
  for (const auto& row : rows) {
    check_dim(row.size() == header.size(), "csv: row width differs from header");
    for (std::size_t i = 0; i < row.size(); ++i)
      out << (i ? "," : "") << format_value(row[i]);
    out << '\n';
  }
  return out.str();
}

Csv parse_csv(const std::string& text) {
  Csv csv;
  std::istringstream in(text);
  std::string line;
  std::size_t offset = 0;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty()) {
      std::vector<std::string> fields;
      std::size_t start = 0;
      while (true) {
        const std::size_t comma = line.find(',', start);
        fields.push_back(line.substr(start, comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
      }
      if (first) {
        csv.header = std::move(fields);
        first = false;
      } else {
        if (fields.size() != csv.header.size())
          throw ParseError("csv: row width differs from header", offset);
        std::vector<double> row;
        for (const std::string& f : fields) {
          try {
            row.push_back(std::stod(f));
          } catch (const std::exception&) {
            throw ParseError("csv: invalid number '" + f + "'", offset);
          }
        }
        csv.rows.push_back(std::move(row));
      }
    }
    offset += line.size() + 1;
  }
  return csv;
}

}  // namespace gdr2
