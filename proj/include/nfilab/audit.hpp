#pragma once

// Softmax Collapse audit of externally produced logit dumps.
//
// Accepted inputs, one row per line:
//   JSONL  {"logits": [z_0, ..., z_{K-1}], "label": r}
//   CSV    r,z_0,...,z_{K-1}   (an optional header line is skipped)
// Blank lines are ignored. Line numbers in errors are 1-based.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "nfilab/errors.hpp"
#include "nfilab/precision.hpp"
#include "nfilab/softmax_ce.hpp"

namespace nfilab {

enum class LogitFormat { CSV, JSONL };

struct AuditedRow {
  std::size_t line = 0;
  int label = 0;
  double margin = 0.0;
  bool collapsed = false;
  double residual_mass = 0.0;
};

struct AuditReport {
  static constexpr double kHistLo = -40.0;
  static constexpr double kHistWidth = 4.0;
  static constexpr int kHistBins = 30;  // last bin is open-ended
  static constexpr std::size_t kTopOffenders = 10;

  PrecisionMode mode;
  double threshold = 0.0;
  int num_classes = 0;
  std::vector<AuditedRow> rows;
  std::size_t collapsed = 0;
  std::vector<std::size_t> margin_hist = std::vector<std::size_t>(kHistBins, 0);
  std::vector<AuditedRow> top_offenders;  // collapsed rows, largest margin first

  std::size_t count() const { return rows.size(); }
  /// NaN for an empty input.
  double sc_fraction() const {
    return rows.empty() ? std::numeric_limits<double>::quiet_NaN()
                        : static_cast<double>(collapsed) / static_cast<double>(rows.size());
  }
  static int bin(double margin) {
    const int b = static_cast<int>(std::floor((margin - kHistLo) / kHistWidth));
    return std::clamp(b, 0, kHistBins - 1);
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline bool parse_double(std::string_view s, double& out) {
  s = trim(s);
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

inline bool parse_int(std::string_view s, int& out) {
  s = trim(s);
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return !s.empty() && res.ec == std::errc() && res.ptr == s.data() + s.size();
}

inline LogitRow parse_csv_row(std::string_view line, std::size_t lineno) {
  LogitRow row;
  std::size_t start = 0;
  bool first = true;
  while (true) {
    const std::size_t comma = line.find(',', start);
    const std::string_view field =
        line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    if (first) {
      if (!parse_int(field, row.label))
        throw ParseError(lineno, "label '" + std::string(trim(field)) + "' is not an integer");
      first = false;
    } else {
      double v;
      if (!parse_double(field, v))
        throw ParseError(lineno, "logit '" + std::string(trim(field)) + "' is not a number");
      row.values.push_back(v);
    }
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return row;
}

inline LogitRow parse_jsonl_row(const std::string& line, std::size_t lineno) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(lineno, std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("logits") || !j.contains("label"))
    throw ParseError(lineno, "expected an object with 'logits' and 'label'");
  if (!j["label"].is_number_integer()) throw ParseError(lineno, "'label' must be an integer");
  if (!j["logits"].is_array()) throw ParseError(lineno, "'logits' must be an array");
  LogitRow row;
  row.label = j["label"].get<int>();
  for (const auto& v : j["logits"]) {
    if (!v.is_number()) throw ParseError(lineno, "'logits' entries must be numbers");
    row.values.push_back(v.get<double>());
  }
  return row;
}

}  // namespace detail

inline LogitFormat format_for_path(const std::string& path) {
  const auto dot = path.rfind('.');
  const std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  return (ext == "jsonl" || ext == "json" || ext == "ndjson") ? LogitFormat::JSONL : LogitFormat::CSV;
}

inline AuditReport audit_logits(std::istream& in, LogitFormat format, const PrecisionMode& mode) {
  validate(mode);
  AuditReport rep;
  rep.mode = mode;
  rep.threshold = absorption_threshold(mode);
  std::string line;
  std::size_t lineno = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string_view body = detail::trim(line);
    if (body.empty()) continue;
    LogitRow row;
    if (format == LogitFormat::JSONL) {
      row = detail::parse_jsonl_row(line, lineno);
    } else {
      int ignored;
      const std::string_view head = body.substr(0, body.find(','));
      // A first non-blank line whose leading field is not a label is a header.
      const bool header = first && !detail::parse_int(head, ignored);
      first = false;
      if (header) continue;
      row = detail::parse_csv_row(body, lineno);
    }
    const int K = static_cast<int>(row.values.size());
    if (K < 2) throw ParseError(lineno, "need at least two logits");
    if (rep.num_classes == 0) rep.num_classes = K;
    else if (K != rep.num_classes)
      throw InconsistentK("line " + std::to_string(lineno) + ": " + std::to_string(K) +
                          " logits, earlier rows have " + std::to_string(rep.num_classes));
    if (row.label < 0 || row.label >= K)
      throw ParseError(lineno, "label " + std::to_string(row.label) + " outside [0, " +
                                   std::to_string(K) + ")");
    CEOutcome out;
    try {
      out = stable_ce(row, mode);
    } catch (const NonFiniteLogit& e) {
      throw ParseError(lineno, e.what());
    }
    AuditedRow a;
    a.line = lineno;
    a.label = row.label;
    a.margin = logit_margin(row.values, row.label);
    a.collapsed = out.collapsed;
    a.residual_mass = out.residual_mass;
    rep.collapsed += a.collapsed ? 1 : 0;
    ++rep.margin_hist[AuditReport::bin(a.margin)];
    rep.rows.push_back(a);
  }
  for (const auto& r : rep.rows)
    if (r.collapsed) rep.top_offenders.push_back(r);
  std::stable_sort(rep.top_offenders.begin(), rep.top_offenders.end(),
                   [](const AuditedRow& a, const AuditedRow& b) { return a.margin > b.margin; });
  if (rep.top_offenders.size() > AuditReport::kTopOffenders)
    rep.top_offenders.resize(AuditReport::kTopOffenders);
  return rep;
}

inline AuditReport audit_logits(const std::string& path, const PrecisionMode& mode) {
  std::ifstream in(path);
  if (!in) throw ConfigError("audit_logits.path", "cannot open '" + path + "'");
  return audit_logits(in, format_for_path(path), mode);
}

inline std::string summary(const AuditReport& rep) {
  if (rep.rows.empty()) return "0 rows";
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu rows, K=%d, %zu collapsed under %s (sc_fraction %.6g, threshold %.6f)",
                rep.count(), rep.num_classes, rep.collapsed, rep.mode.name().c_str(), rep.sc_fraction(),
                rep.threshold);
  return buf;
}

inline nlohmann::json to_json(const AuditReport& rep) {
  auto row_json = [](const AuditedRow& r) {
    return nlohmann::json{{"line", r.line},
                          {"label", r.label},
                          {"margin", r.margin},
                          {"collapsed", r.collapsed},
                          {"residual_mass", r.residual_mass}};
  };
  nlohmann::json j;
  j["mode"] = rep.mode.name();
  j["threshold"] = rep.threshold;
  j["rows"] = rep.count();
  j["num_classes"] = rep.num_classes;
  j["collapsed"] = rep.collapsed;
  j["sc_fraction"] = rep.rows.empty() ? nlohmann::json(nullptr) : nlohmann::json(rep.sc_fraction());
  j["summary"] = summary(rep);
  j["margin_hist"] = {{"lo", AuditReport::kHistLo}, {"width", AuditReport::kHistWidth}, {"counts", rep.margin_hist}};
  j["top_offenders"] = nlohmann::json::array();
  for (const auto& r : rep.top_offenders) j["top_offenders"].push_back(row_json(r));
  j["per_row"] = nlohmann::json::array();
  for (const auto& r : rep.rows) j["per_row"].push_back(row_json(r));
  return j;
}

}  // namespace nfilab
