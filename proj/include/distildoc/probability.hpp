/*
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace distildoc {

/// Floor applied to probabilities before taking a logarithm.
inline constexpr double kProbabilityFloor = 1e-12;

/// exp(x_k / tau) / sum_j exp(x_j / tau), evaluated with max-subtraction.
inline std::vector<double> temp_softmax(std::span<const double> logits, double tau) {
  if (logits.empty()) throw std::domain_error("temp_softmax: empty logits");
  if (!(tau > 0.0)) throw std::domain_error("temp_softmax: temperature must be positive");
  double peak = logits[0] / tau;
  for (double x : logits) peak = std::max(peak, x / tau);
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[k] = std::exp(logits[k] / tau - peak);
    z += out[k];
  }
  for (double& p : out) p /= z;
  return out;
}

/// -log(probs[target]) with the probability floored at kProbabilityFloor.
inline double cross_entropy(std::span<const double> probs, std::size_t target) {
  if (target >= probs.size())
    throw std::domain_error("cross_entropy: target " + std::to_string(target) +
                            " outside [0, " + std::to_string(probs.size()) + ")");
  return -std::log(std::max(probs[target], kProbabilityFloor));
}

/// KL(p || q) = sum_k p_k ln(p_k / q_k), with 0 ln(0/q) = 0 and q floored.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size())
    throw std::domain_error("kl_divergence: length mismatch " + std::to_string(p.size()) +
                            " vs " + std::to_string(q.size()));
  double total = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k] <= 0.0) continue;
    total += p[k] * (std::log(p[k]) - std::log(std::max(q[k], kProbabilityFloor)));
  }
  return std::max(total, 0.0);
}

/// Shannon entropy in nats.
inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

}  // namespace distildoc
