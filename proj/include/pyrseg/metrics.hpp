#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <json.hpp>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "pyrseg/error.hpp"

namespace pyrseg {

struct ClassDice {
  double value = 0.0;
  bool absent = false;  // class absent in both volumes; value reported as 1
};

// Hard-label Dice 2|A n B| / (|A| + |B|) for every class in [0, K).
inline std::vector<ClassDice> dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
                                         int num_classes) {
  if (pred.size() != truth.size())
    throw ShapeError("dice_score: volumes differ in size (" + std::to_string(pred.size()) + " vs " +
                     std::to_string(truth.size()) + ")");
  if (num_classes < 1) throw ConfigError("dice_score: num_classes must be >= 1");
  std::vector<std::uint64_t> inter(num_classes, 0), a(num_classes, 0), b(num_classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < num_classes) ++a[pred[i]];
    if (truth[i] < num_classes) ++b[truth[i]];
    if (pred[i] == truth[i] && pred[i] < num_classes) ++inter[pred[i]];
  }
  std::vector<ClassDice> out(num_classes);
  for (int k = 0; k < num_classes; ++k) {
    if (a[k] + b[k] == 0)
      out[k] = {1.0, true};
    else
      out[k] = {2.0 * static_cast<double>(inter[k]) / static_cast<double>(a[k] + b[k]), false};
  }
  return out;
}

// Dice from Jaccard (intersection over union): d = 2j / (1 + j).
inline double jaccard_to_dice(double j) {
  if (!(j >= 0.0 && j <= 1.0)) throw ContractError("jaccard_to_dice: value outside [0, 1]: " + std::to_string(j));
  return 2.0 * j / (1.0 + j);
}

struct ClassSummary {
  std::string name;
  double avg = 0.0, std = 0.0, min = 0.0, max = 0.0;  // percentages
};

// Table of per-class Dice percentages over cases: rows Avg/Std/Min/Max, one column per
// class plus an overall "Avg." column (mean over classes of the per-class values).
struct DiceReport {
  std::vector<ClassSummary> classes;
  ClassSummary overall{"Avg."};
  std::size_t cases = 0;

  std::string to_text() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(1);
    os << std::left << std::setw(8) << "Dice(%)";
    for (const auto& c : classes) os << std::right << std::setw(10) << c.name;
    os << std::right << std::setw(10) << overall.name << "\n";
    auto row = [&](const char* label, auto field) {
      os << std::left << std::setw(8) << label;
      for (const auto& c : classes) os << std::right << std::setw(10) << c.*field;
      os << std::right << std::setw(10) << overall.*field << "\n";
    };
    row("Avg", &ClassSummary::avg);
    row("Std", &ClassSummary::std);
    row("Min", &ClassSummary::min);
    row("Max", &ClassSummary::max);
    os << "cases: " << cases << "\n";
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["cases"] = cases;
    auto rec = [](const ClassSummary& c) {
      return nlohmann::json{{"class", c.name}, {"avg", c.avg}, {"std", c.std}, {"min", c.min}, {"max", c.max}};
    };
    j["classes"] = nlohmann::json::array();
    for (const auto& c : classes) j["classes"].push_back(rec(c));
    j["overall"] = rec(overall);
    return j;
  }
};

namespace detail {

inline ClassSummary summarize_column(std::string name, const std::vector<double>& v) {
  ClassSummary s{std::move(name)};
  double sum = 0.0;
  for (double x : v) sum += x;
  s.avg = sum / static_cast<double>(v.size());
  double sq = 0.0;
  for (double x : v) sq += (x - s.avg) * (x - s.avg);
  s.std = std::sqrt(sq / static_cast<double>(v.size()));
  s.min = *std::min_element(v.begin(), v.end());
  s.max = *std::max_element(v.begin(), v.end());
  return s;
}

}  // namespace detail

// scores[case][class] in [0, 1]; population standard deviation. The overall column summarizes
// each case's class-mean.
inline DiceReport summarize(const std::vector<std::vector<double>>& scores, const std::vector<std::string>& class_names) {
  if (scores.empty()) throw ContractError("summarize: no cases");
  const std::size_t K = class_names.size();
  for (const auto& row : scores)
    if (row.size() != K)
      throw ShapeError("summarize: case has " + std::to_string(row.size()) + " scores, expected " + std::to_string(K));
  if (K == 0) throw ContractError("summarize: no classes");
  DiceReport r;
  r.cases = scores.size();
  std::vector<double> case_means(scores.size(), 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<double> col;
    for (std::size_t c = 0; c < scores.size(); ++c) {
      col.push_back(100.0 * scores[c][k]);
      case_means[c] += 100.0 * scores[c][k] / static_cast<double>(K);
    }
    r.classes.push_back(detail::summarize_column(class_names[k], col));
  }
  r.overall = detail::summarize_column("Avg.", case_means);
  // Mean of per-class averages equals mean of per-case class-means; keep the former exactly.
  double avg = 0.0;
  for (const auto& c : r.classes) avg += c.avg;
  r.overall.avg = avg / static_cast<double>(K);
  return r;
}

}  // namespace pyrseg
