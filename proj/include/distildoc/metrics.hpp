/*
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "distildoc/text.hpp"

namespace distildoc {

/// One top-1 prediction: its posterior confidence and whether it was right.
struct PredictionRecord {
  double confidence = 1.0;
  bool correct = false;
  std::vector<double> probabilities;  // optional full posterior
  int predicted = -1;                 // argmax class when known

  static PredictionRecord from_probabilities(std::vector<double> probs, int label) {
    if (probs.empty()) throw std::domain_error("PredictionRecord: empty probability vector");
    const auto top = std::max_element(probs.begin(), probs.end());
    PredictionRecord r;
    r.confidence = *top;
    r.predicted = static_cast<int>(top - probs.begin());
    r.correct = r.predicted == label;
    r.probabilities = std::move(probs);
    return r;
  }
};

struct RiskCoveragePoint {
  double coverage = 0.0;
  double selective_risk = 0.0;
};

namespace detail {

inline void require_records(std::span<const PredictionRecord> records, const char* op) {
  if (records.empty()) throw std::domain_error(std::string(op) + ": no records");
}

}  // namespace detail

inline double accuracy(std::span<const PredictionRecord> records) {
  detail::require_records(records, "accuracy");
  const auto hits = std::count_if(records.begin(), records.end(), [](const auto& r) { return r.correct; });
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

/// Equal-width expected calibration error. Bin b covers (b/n, (b+1)/n], so a
/// confidence of exactly 1 falls in the last bin.
inline double ece(std::span<const PredictionRecord> records, int n_bins = 10) {
  detail::require_records(records, "ece");
  if (n_bins < 1) throw std::domain_error("ece: n_bins must be >= 1");
  const auto bins = static_cast<std::size_t>(n_bins);
  std::vector<double> conf_sum(bins, 0.0);
  std::vector<std::size_t> hits(bins, 0), count(bins, 0);
  auto edge = [n_bins](std::size_t b) { return static_cast<double>(b) / n_bins; };

  for (const auto& r : records) {
    if (!(r.confidence > 0.0 && r.confidence <= 1.0))
      throw std::domain_error("ece: confidence " + std::to_string(r.confidence) + " outside (0, 1]");
    auto b = static_cast<std::size_t>(std::clamp(std::ceil(r.confidence * n_bins) - 1.0, 0.0,
                                                 static_cast<double>(bins - 1)));
    // ceil() can land one bin off when c * n rounds; settle against the edges.
    while (b > 0 && r.confidence <= edge(b)) --b;
    while (b + 1 < bins && r.confidence > edge(b + 1)) ++b;
    conf_sum[b] += r.confidence;
    hits[b] += r.correct ? 1 : 0;
    ++count[b];
  }

  const auto n = static_cast<double>(records.size());
  double total = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    if (count[b] == 0) continue;
    const auto m = static_cast<double>(count[b]);
    total += (m / n) * std::abs(static_cast<double>(hits[b]) / m - conf_sum[b] / m);
  }
  return total;
}

/// Selective risk at every coverage level i/N, taking records in descending
/// confidence. Ties keep their input order, so the curve depends on the
/// order of tied records.
inline std::vector<RiskCoveragePoint> risk_coverage_curve(std::span<const PredictionRecord> records) {
  detail::require_records(records, "risk_coverage_curve");
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return records[a].confidence > records[b].confidence;
  });
  std::vector<RiskCoveragePoint> curve;
  curve.reserve(records.size());
  std::size_t errors = 0;
  const auto n = static_cast<double>(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    errors += records[order[i]].correct ? 0 : 1;
    const auto covered = static_cast<double>(i + 1);
    curve.push_back({covered / n, static_cast<double>(errors) / covered});
  }
  return curve;
}

/// Area under the risk-coverage curve: the mean selective risk over all N
/// coverage levels.
inline double aurc(std::span<const PredictionRecord> records) {
  const auto curve = risk_coverage_curve(records);
  double total = 0.0;
  for (const auto& p : curve) total += p.selective_risk;
  return total / static_cast<double>(curve.size());
}

// ---------------------------------------------------------------------------
// ANLS

/// Edit distance over Unicode code points (unit-cost insert/delete/substitute).
inline std::size_t levenshtein(std::u32string_view a, std::u32string_view b) {
  if (a.size() < b.size()) std::swap(a, b);
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline std::size_t levenshtein(std::string_view a, std::string_view b) {
  return levenshtein(text::decode_utf8(a), text::decode_utf8(b));
}

/// Lowercases ASCII letters, trims, and collapses whitespace runs to one space.
inline std::u32string normalize_answer(std::string_view s) {
  std::u32string out;
  bool pending_space = false;
  for (char32_t c : text::decode_utf8(s)) {
    if (text::is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(U' ');
    pending_space = false;
    out.push_back(c >= U'A' && c <= U'Z' ? c - U'A' + U'a' : c);
  }
  return out;
}

inline constexpr double kDefaultAnlsThreshold = 0.5;

/// Best normalized Levenshtein similarity against any gold answer, cut to 0
/// below the threshold.
inline double anls_single(std::string_view prediction, std::span<const std::string> golds,
                          double threshold = kDefaultAnlsThreshold) {
  if (golds.empty()) throw std::domain_error("anls_single: empty gold list");
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw std::domain_error("anls_single: threshold outside [0, 1]");
  const auto pred = normalize_answer(prediction);
  double best = 0.0;
  for (const auto& gold : golds) {
    const auto g = normalize_answer(gold);
    const std::size_t longest = std::max(pred.size(), g.size());
    const double sim = longest == 0 ? 1.0
                                    : 1.0 - static_cast<double>(levenshtein(pred, g)) / static_cast<double>(longest);
    best = std::max(best, sim);
  }
  return best >= threshold ? best : 0.0;
}

struct AnlsItem {
  std::string prediction;
  std::vector<std::string> golds;
};

inline double anls_dataset(std::span<const AnlsItem> items, double threshold = kDefaultAnlsThreshold) {
  if (items.empty()) throw std::domain_error("anls_dataset: no items");
  double total = 0.0;
  for (const auto& item : items) total += anls_single(item.prediction, item.golds, threshold);
  return total / static_cast<double>(items.size());
}

// ---------------------------------------------------------------------------
// Report

struct MetricsReport {
  std::size_t n = 0;
  double accuracy = 0.0;
  int n_bins = 10;
  double ece = 0.0;
  double aurc = 0.0;
  std::optional<double> anls;

  static MetricsReport compute(std::span<const PredictionRecord> records, int n_bins = 10) {
    return {records.size(), distildoc::accuracy(records), n_bins, distildoc::ece(records, n_bins),
            distildoc::aurc(records), std::nullopt};
  }
};

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j{{"n", r.n},
                   {"accuracy", r.accuracy},
                   {"ece", {{"n_bins", r.n_bins}, {"value", r.ece}}},
                   {"aurc", r.aurc}};
  if (r.anls) j["anls"] = *r.anls;
  return j;
}

}  // namespace distildoc
