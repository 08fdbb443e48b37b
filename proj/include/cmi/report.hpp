#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cmi/train.hpp"

namespace cmi {

inline constexpr std::array<const char*, 8> kCanonicalColumns{"CMI1", "CI1", "CMI2", "CI2",
                                                               "CMI3", "CI3", "MI",   "I"};
inline constexpr std::array<const char*, 4> kReportRows{"F1_train", "F1_valid", "T_train(s)", "T_test(s)"};

// Groups reports by table column and aggregates each group.
inline std::map<std::string, GroupSummary> summarize(const std::vector<RunReport>& reports) {
  std::map<std::string, std::vector<RunReport>> groups;
  for (const auto& r : reports) groups[column_of(r)].push_back(r);
  std::map<std::string, GroupSummary> out;
  for (const auto& [col, rs] : groups) out.emplace(col, aggregate_reports(rs));
  return out;
}

// The eight canonical columns in order, then other architectures sorted by
// id, each as its CMI(...) column followed by CI(...).
inline std::vector<std::string> report_columns(const std::map<std::string, GroupSummary>& groups) {
  std::vector<std::string> cols(kCanonicalColumns.begin(), kCanonicalColumns.end());
  std::set<std::string> extra;
  for (const auto& [col, g] : groups)
    if (std::find(cols.begin(), cols.end(), col) == cols.end()) extra.insert(g.best.arch);
  for (const auto& arch : extra)
    for (bool multi : {true, false})
      if (groups.count(report_column(arch, multi))) cols.push_back(report_column(arch, multi));
  return cols;
}

struct Table {
  std::string title;
  std::vector<std::string> columns;
  std::vector<std::string> row_labels;
  std::vector<std::vector<std::string>> cells;  // [row][column]
};

namespace detail {

inline std::string fmt(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

inline std::vector<std::string> row_values(double f1_train, double f1_valid, double t_train, double t_test) {
  return {fmt(f1_train, 4), fmt(f1_valid, 4), fmt(t_train, 2), fmt(t_test, 2)};
}

inline Table make_table(const std::string& title, const std::map<std::string, GroupSummary>& groups,
                        bool best) {
  Table t;
  t.title = title;
  t.columns = report_columns(groups);
  t.row_labels.assign(kReportRows.begin(), kReportRows.end());
  t.cells.assign(kReportRows.size(), std::vector<std::string>(t.columns.size(), "n/a"));
  for (std::size_t c = 0; c < t.columns.size(); ++c) {
    auto it = groups.find(t.columns[c]);
    if (it == groups.end()) continue;
    const auto& g = it->second;
    const auto vals = best ? row_values(g.best.f1_train, g.best.f1_valid, g.best.t_train_seconds,
                                        g.best.t_test_seconds)
                           : row_values(g.mean.f1_train, g.mean.f1_valid, g.mean.t_train_seconds,
                                        g.mean.t_test_seconds);
    for (std::size_t r = 0; r < vals.size(); ++r) t.cells[r][c] = vals[r];
  }
  return t;
}

}  // namespace detail

// Best model per column, selected by validation F1.
inline Table best_model_table(const std::map<std::string, GroupSummary>& groups) {
  return detail::make_table("Best model per architecture (highest cross-validation F1_valid)", groups, true);
}

inline Table average_table(const std::map<std::string, GroupSummary>& groups) {
  return detail::make_table("Average over all models per architecture", groups, false);
}

inline std::string render_markdown(const Table& t) {
  std::string s = "### " + t.title + "\n\n| |";
  for (const auto& c : t.columns) s += " " + c + " |";
  s += "\n|---|";
  for (std::size_t i = 0; i < t.columns.size(); ++i) s += "---|";
  s += "\n";
  for (std::size_t r = 0; r < t.row_labels.size(); ++r) {
    s += "| " + t.row_labels[r] + " |";
    for (const auto& cell : t.cells[r]) s += " " + cell + " |";
    s += "\n";
  }
  return s;
}

inline std::string render_csv(const Table& t) {
  std::string s = "metric";
  for (const auto& c : t.columns) s += "," + c;
  s += "\n";
  for (std::size_t r = 0; r < t.row_labels.size(); ++r) {
    s += t.row_labels[r];
    for (const auto& cell : t.cells[r]) s += "," + cell;
    s += "\n";
  }
  return s;
}

// Every *.json file in `dir` that parses as a run report, in file-name order.
inline std::vector<RunReport> load_reports(const std::string& dir) {
  namespace fs = std::filesystem;
  require(fs::is_directory(dir), "report directory '" + dir + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<RunReport> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    const auto j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("folds") || !j.contains("arch")) continue;
    try {
      out.push_back(run_report_from_json(j));
    } catch (const StructuralError& e) {
      throw StructuralError(f.string() + ": " + e.what());
    }
  }
  return out;
}

struct RenderedReport {
  Table best, average;
  std::string markdown;
  std::string best_csv, average_csv;
};

inline RenderedReport render_report(const std::vector<RunReport>& reports) {
  require(!reports.empty(), "render_report: no run reports");
  const auto groups = summarize(reports);
  RenderedReport r{best_model_table(groups), average_table(groups), {}, {}, {}};
  r.markdown = render_markdown(r.best) + "\n" + render_markdown(r.average);
  r.best_csv = render_csv(r.best);
  r.average_csv = render_csv(r.average);
  return r;
}

}  // namespace cmi
