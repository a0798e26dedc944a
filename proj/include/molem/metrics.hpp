#pragma once

// Continual-learning metrics over an accuracy matrix a[t][i] (accuracy on
// test set i after stage t, tasks indexed in training order, row 0 = the
// untouched reasoner), plus the report tables.

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace molem {

struct AccuracyMatrix {
  std::vector<std::string> tasks;         // test-set names in training order
  std::vector<std::vector<double>> rows;  // rows[0] = baseline, rows[t] = after stage t

  std::size_t stages() const { return rows.empty() ? 0 : rows.size() - 1; }
  double at(std::size_t t, std::size_t i) const { return rows.at(t).at(i); }

  void validate() const {
    require(!rows.empty(), "accuracy matrix needs a baseline row");
    for (const auto& r : rows) {
      require(r.size() == tasks.size(), "accuracy row width differs from the task count");
      for (double v : r) require(v >= 0.0 && v <= 100.0, "accuracy outside [0, 100]");
    }
  }
};

inline double average(const AccuracyMatrix& a, std::size_t t) {
  const auto& r = a.rows.at(t);
  require(!r.empty(), "average of an empty row");
  double s = 0.0;
  for (double v : r) s += v;
  return s / static_cast<double>(r.size());
}

/// Mean over i < k of (max over l in 1..k-1 of a[l][i]) - a[k][i].
inline std::optional<double> forgetting(const AccuracyMatrix& a, std::size_t k) {
  if (k < 2) return std::nullopt;
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < k; ++i) {
    double best = a.at(1, i);
    for (std::size_t l = 2; l < k; ++l) best = std::max(best, a.at(l, i));
    s += best - a.at(k, i);
  }
  return s / static_cast<double>(k - 1);
}

/// Mean over i < k of a[k][i] - a[i][i] (task i is trained at stage i).
inline std::optional<double> bwt(const AccuracyMatrix& a, std::size_t k) {
  if (k < 2) return std::nullopt;
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < k; ++i) s += a.at(k, i) - a.at(i + 1, i);
  return s / static_cast<double>(k - 1);
}

/// Mean over t = 2..k of a[t-1][t] - a[0][t]: accuracy on task t just before
/// it is trained, relative to the baseline.
inline std::optional<double> fwt(const AccuracyMatrix& a, std::size_t k) {
  if (k < 2) return std::nullopt;
  double s = 0.0;
  for (std::size_t t = 2; t <= k; ++t) s += a.at(t - 1, t - 1) - a.at(0, t - 1);
  return s / static_cast<double>(k - 1);
}

/// Half-up rounding to two decimals, for reporting only.
inline double round2(double x) { return std::floor(x * 100.0 + 0.5 + 1e-9) / 100.0; }

inline std::string fmt2(double x) {
  char buf[32];
  double r = round2(x);
  if (r == 0.0) r = 0.0;  // no "-0.00"
  std::snprintf(buf, sizeof buf, "%.2f", r);
  return buf;
}

inline std::string fmt2(const std::optional<double>& x) { return x ? fmt2(*x) : std::string("--"); }

struct MetricRow {
  std::string label;
  std::vector<double> accuracy;
  double average = 0.0;
  std::optional<double> forget, bwt, fwt;
};

inline std::vector<MetricRow> metric_rows(const AccuracyMatrix& a, const std::string& method = "MoLEM") {
  a.validate();
  std::vector<MetricRow> out;
  out.push_back({"Vanilla", a.rows[0], average(a, 0), std::nullopt, std::nullopt, std::nullopt});
  for (std::size_t k = 1; k <= a.stages(); ++k) {
    const std::string label = "Stage " + std::to_string(k) + " " + a.tasks.at(k - 1) + " (" + method + ")";
    out.push_back({label, a.rows[k], average(a, k), forgetting(a, k), bwt(a, k), fwt(a, k)});
  }
  return out;
}

inline std::string metrics_markdown(const AccuracyMatrix& a, const std::string& method = "MoLEM") {
  std::ostringstream out;
  out << "| Trained on |";
  for (const auto& t : a.tasks) out << ' ' << t << " test |";
  out << " Average | Forget | BWT | FWT |\n|---|";
  for (std::size_t i = 0; i < a.tasks.size(); ++i) out << "---|";
  out << "---|---|---|---|\n";
  for (const MetricRow& r : metric_rows(a, method)) {
    out << "| " << r.label << " |";
    for (double v : r.accuracy) out << ' ' << fmt2(v) << " |";
    out << ' ' << fmt2(r.average) << " | " << fmt2(r.forget) << " | " << fmt2(r.bwt) << " | " << fmt2(r.fwt) << " |\n";
  }
  return out.str();
}

inline std::string metrics_csv(const AccuracyMatrix& a) {
  std::ostringstream out;
  out << "stage";
  for (const auto& t : a.tasks) out << ',' << t;
  out << ",average,forget,bwt,fwt\n";
  const auto rows = metric_rows(a);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    out << k;
    for (double v : rows[k].accuracy) out << ',' << fmt2(v);
    out << ',' << fmt2(rows[k].average) << ',' << fmt2(rows[k].forget) << ',' << fmt2(rows[k].bwt) << ','
        << fmt2(rows[k].fwt) << '\n';
  }
  return out.str();
}

/// Grid CSV: header "stage,<task>,...", then one row per stage starting
/// with the baseline (stage label "0" or "vanilla"). Columns are test sets in
/// training order.
inline AccuracyMatrix parse_grid_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  AccuracyMatrix a;
  bool header = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    require(cells.size() >= 2, "grid line needs a stage label and at least one accuracy: '" + line + "'");
    if (header) {
      a.tasks.assign(cells.begin() + 1, cells.end());
      header = false;
      continue;
    }
    const std::string expected = a.rows.empty() ? "0" : std::to_string(a.rows.size());
    require(cells[0] == expected || (a.rows.empty() && cells[0] == "vanilla"),
            "grid rows must be ordered 0 (vanilla), 1, 2, ...; got '" + cells[0] + "'");
    std::vector<double> row;
    for (std::size_t i = 1; i < cells.size(); ++i) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cells[i], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      require(used == cells[i].size() && used > 0, "not a number in grid: '" + cells[i] + "'");
      row.push_back(v);
    }
    a.rows.push_back(std::move(row));
  }
  require(!header, "grid has no header line");
  a.validate();
  return a;
}

}  // namespace molem
