#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rlkf/error.hpp"
#include "rlkf/metrics.hpp"

namespace rlkf {

// Percentages are rendered to one decimal place; underlying values stay in
// full precision and only the CSV files carry them.
inline std::string fmt_pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v * 100.0);
  return buf;
}

inline std::string fmt_pct(const std::optional<double>& v) {
  return v ? fmt_pct(*v) : std::string("-");
}

inline std::string fmt_delta_pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+.1f", v * 100.0);
  return buf;
}

inline std::string fmt_full(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

using TableRow = std::vector<std::string>;

// Plain-text table: first column left-aligned (labels), the rest
// right-aligned (numbers).
inline std::string render_table(const TableRow& header,
                                const std::vector<TableRow>& rows) {
  std::vector<std::size_t> widths(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) widths[c] = header[c].size();
  for (const auto& row : rows) {
    if (row.size() != header.size())
      throw Error("table row width does not match header");
    for (std::size_t c = 0; c < row.size(); ++c)
      widths[c] = std::max(widths[c], row[c].size());
  }
  auto emit = [&](const TableRow& row, std::string& out) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c > 0) out += "  ";
      std::size_t pad = widths[c] - row[c].size();
      if (c == 0) {
        out += row[c];
        out.append(pad, ' ');
      } else {
        out.append(pad, ' ');
        out += row[c];
      }
    }
    out += '\n';
  };
  std::string out;
  emit(header, out);
  std::string rule;
  for (std::size_t c = 0; c < widths.size(); ++c) {
    if (c > 0) rule += "  ";
    rule.append(widths[c], '-');
  }
  out += rule + '\n';
  for (const auto& row : rows) emit(row, out);
  return out;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string quoted = "\"";
  for (char c : s) {
    if (c == '"') quoted += '"';
    quoted += c;
  }
  quoted += '"';
  return quoted;
}

inline std::string render_csv(const TableRow& header,
                              const std::vector<TableRow>& rows) {
  std::string out;
  auto emit = [&](const TableRow& row) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c > 0) out += ',';
      out += csv_field(row[c]);
    }
    out += '\n';
  };
  emit(header);
  for (const auto& row : rows) emit(row);
  return out;
}

// Baseline record for a method: exact name match, or the sole baseline row
// when the baseline run has only one.
inline const EvalRecord* match_baseline(
    std::span<const EvalRecord> baseline, const std::string& method) {
  for (const auto& b : baseline)
    if (b.method == method) return &b;
  if (baseline.size() == 1) return &baseline.front();
  return nullptr;
}

// ---------------------------------------------------------------------------
// (a) Per-method reliability table.
// ---------------------------------------------------------------------------

inline std::vector<TableRow> method_rows(std::span<const EvalRecord> records,
                                         std::span<const EvalRecord> baseline,
                                         bool full_precision) {
  auto pct = [&](double v) { return full_precision ? fmt_full(v) : fmt_pct(v); };
  auto opt_pct = [&](const std::optional<double>& v) {
    return v ? pct(*v) : std::string(full_precision ? "" : "-");
  };
  auto delta = [&](double v) {
    return full_precision ? fmt_full(v) : fmt_delta_pct(v);
  };
  std::vector<TableRow> rows;
  for (const auto& rec : records) {
    const ReliabilityReport& r = rec.report;
    TableRow row{rec.method,         std::to_string(r.counts.n),
                 opt_pct(r.prec),    pct(r.acc),
                 pct(r.truth),       pct(r.ans),
                 pct(r.rely_dynamic)};
    if (!baseline.empty()) {
      const EvalRecord* b = match_baseline(baseline, rec.method);
      if (b) {
        double dprec = (r.prec && b->report.prec) ? *r.prec - *b->report.prec
                                                  : 0.0;
        bool have_prec = r.prec && b->report.prec;
        row.push_back(have_prec ? delta(dprec)
                                : std::string(full_precision ? "" : "-"));
        row.push_back(delta(r.acc - b->report.acc));
        row.push_back(delta(r.truth - b->report.truth));
        row.push_back(delta(r.rely_dynamic - b->report.rely_dynamic));
      } else {
        row.insert(row.end(), 4, full_precision ? "" : "-");
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline TableRow method_header(bool with_deltas) {
  TableRow h{"method", "n", "prec", "acc", "truth", "ans", "rely"};
  if (with_deltas) {
    h.insert(h.end(), {"d_prec", "d_acc", "d_truth", "d_rely"});
  }
  return h;
}

inline std::string method_table(std::span<const EvalRecord> records,
                                std::span<const EvalRecord> baseline = {}) {
  if (records.empty()) throw Error("report needs at least one eval record");
  return render_table(method_header(!baseline.empty()),
                      method_rows(records, baseline, false));
}

inline std::string method_csv(std::span<const EvalRecord> records,
                              std::span<const EvalRecord> baseline = {}) {
  if (records.empty()) throw Error("report needs at least one eval record");
  return render_csv(method_header(!baseline.empty()),
                    method_rows(records, baseline, true));
}

// ---------------------------------------------------------------------------
// (b) Per-subtask breakdown: every cell, per-operation and per-bucket
// marginals, and the overall row.
// ---------------------------------------------------------------------------

struct SubtaskLine {
  std::string label;
  OutcomeCounts counts;
};

inline std::vector<SubtaskLine> subtask_lines(const ReliabilityReport& report) {
  std::vector<SubtaskLine> lines;
  std::map<ArithOp, OutcomeCounts> by_op;
  std::map<DigitBucket, OutcomeCounts> by_bucket;
  auto add = [](OutcomeCounts& into, const OutcomeCounts& c) {
    into.n += c.n;
    into.n_c += c.n_c;
    into.n_r += c.n_r;
    into.n_w += c.n_w;
  };
  for (const auto& [key, sub] : report.per_subtask) {
    lines.push_back(SubtaskLine{key.str(), sub.counts});
    add(by_op[key.operation], sub.counts);
    add(by_bucket[key.digit_bucket], sub.counts);
  }
  if (by_op.size() > 1) {
    for (const auto& [op, counts] : by_op)
      lines.push_back(SubtaskLine{to_string(op) + ":*", counts});
  }
  if (by_bucket.size() > 1) {
    for (const auto& [bucket, counts] : by_bucket)
      lines.push_back(SubtaskLine{"*:" + to_string(bucket), counts});
  }
  lines.push_back(SubtaskLine{"all", report.counts});
  return lines;
}

inline std::vector<TableRow> subtask_rows(std::span<const EvalRecord> records,
                                          bool full_precision) {
  auto pct = [&](double v) { return full_precision ? fmt_full(v) : fmt_pct(v); };
  std::vector<TableRow> rows;
  for (const auto& rec : records) {
    for (const auto& line : subtask_lines(rec.report)) {
      ReliabilityReport r = report_from_counts(line.counts, {});
      rows.push_back(TableRow{
          rec.method, line.label, std::to_string(r.counts.n),
          r.prec ? pct(*r.prec) : std::string(full_precision ? "" : "-"),
          pct(r.acc), pct(r.truth), pct(r.ans), pct(r.rely_dynamic)});
    }
  }
  return rows;
}

inline TableRow subtask_header() {
  return {"method", "subtask", "n", "prec", "acc", "truth", "ans", "rely"};
}

inline std::string subtask_table(std::span<const EvalRecord> records) {
  if (records.empty()) throw Error("report needs at least one eval record");
  return render_table(subtask_header(), subtask_rows(records, false));
}

inline std::string subtask_csv(std::span<const EvalRecord> records) {
  if (records.empty()) throw Error("report needs at least one eval record");
  return render_csv(subtask_header(), subtask_rows(records, true));
}

// ---------------------------------------------------------------------------
// (c) Rejection-rate table, with deltas against a baseline run.
// ---------------------------------------------------------------------------

inline std::map<std::string, double> rejection_rates(
    const ReliabilityReport& report) {
  std::map<std::string, double> rates;
  for (const auto& line : subtask_lines(report)) {
    rates[line.label] = static_cast<double>(line.counts.n_r) /
                        static_cast<double>(line.counts.n);
  }
  return rates;
}

inline std::vector<TableRow> rejection_rows(
    std::span<const EvalRecord> records, std::span<const EvalRecord> baseline,
    bool full_precision) {
  auto pct = [&](double v) { return full_precision ? fmt_full(v) : fmt_pct(v); };
  auto delta = [&](double v) {
    return full_precision ? fmt_full(v) : fmt_delta_pct(v);
  };
  std::vector<TableRow> rows;
  for (const auto& rec : records) {
    auto rates = rejection_rates(rec.report);
    const EvalRecord* b =
        baseline.empty() ? nullptr : match_baseline(baseline, rec.method);
    std::map<std::string, double> base_rates;
    if (b) {
      base_rates = rejection_rates(b->report);
      if (base_rates.size() != rates.size())
        throw Error("rejection breakdown for method '" + rec.method +
                    "' has different subtask keys than the baseline run");
      for (const auto& [label, rate] : rates) {
        if (!base_rates.count(label))
          throw Error("subtask '" + label + "' of method '" + rec.method +
                      "' is missing from the baseline run");
        (void)rate;
      }
    }
    for (const auto& [label, rate] : rates) {
      TableRow row{rec.method, label, pct(rate)};
      if (!baseline.empty()) {
        if (b) {
          row.push_back(pct(base_rates.at(label)));
          row.push_back(delta(rate - base_rates.at(label)));
        } else {
          row.insert(row.end(), 2, full_precision ? "" : "-");
        }
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

inline TableRow rejection_header(bool with_deltas) {
  TableRow h{"method", "subtask", "reject_rate"};
  if (with_deltas) h.insert(h.end(), {"baseline_rate", "delta"});
  return h;
}

inline std::string rejection_table(std::span<const EvalRecord> records,
                                   std::span<const EvalRecord> baseline = {}) {
  if (records.empty()) throw Error("report needs at least one eval record");
  return render_table(rejection_header(!baseline.empty()),
                      rejection_rows(records, baseline, false));
}

inline std::string rejection_csv(std::span<const EvalRecord> records,
                                 std::span<const EvalRecord> baseline = {}) {
  if (records.empty()) throw Error("report needs at least one eval record");
  return render_csv(rejection_header(!baseline.empty()),
                    rejection_rows(records, baseline, true));
}

// ---------------------------------------------------------------------------
// (d) rely(alpha) sweep, one column per method. At alpha = 0 the column is
// exactly acc; at alpha = 1 it is exactly truth.
// ---------------------------------------------------------------------------

inline std::string rely_sweep_csv(std::span<const EvalRecord> records) {
  if (records.empty()) throw Error("report needs at least one eval record");
  const auto& grid = records.front().report.rely_grid;
  if (grid.empty())
    throw Error("eval records carry no rely(alpha) grid to sweep");
  for (const auto& rec : records) {
    if (rec.report.rely_grid.size() != grid.size())
      throw Error("eval records disagree on the rely(alpha) grid");
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (rec.report.rely_grid[i].alpha != grid[i].alpha)
        throw Error("eval records disagree on the rely(alpha) grid");
    }
  }
  TableRow header{"alpha"};
  for (const auto& rec : records) header.push_back(rec.method);
  std::vector<TableRow> rows;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    TableRow row{fmt_full(grid[i].alpha)};
    for (const auto& rec : records)
      row.push_back(fmt_full(rec.report.rely_grid[i].rely));
    rows.push_back(std::move(row));
  }
  return render_csv(header, rows);
}

// ---------------------------------------------------------------------------
// File emission.
// ---------------------------------------------------------------------------

inline void write_text_file(const std::filesystem::path& path,
                            const std::string& content) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << content;
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

inline std::vector<std::filesystem::path> write_report_files(
    const std::filesystem::path& dir, std::span<const EvalRecord> records,
    std::span<const EvalRecord> baseline = {}) {
  if (records.empty()) throw Error("report needs at least one eval record");
  std::vector<std::filesystem::path> written;
  auto emit = [&](const char* name, const std::string& content) {
    auto path = dir / name;
    write_text_file(path, content);
    written.push_back(path);
  };
  emit("methods.txt", method_table(records, baseline));
  emit("methods.csv", method_csv(records, baseline));
  emit("subtasks.txt", subtask_table(records));
  emit("subtasks.csv", subtask_csv(records));
  emit("rejections.txt", rejection_table(records, baseline));
  emit("rejections.csv", rejection_csv(records, baseline));
  emit("rely_sweep.csv", rely_sweep_csv(records));
  return written;
}

}  // namespace rlkf
