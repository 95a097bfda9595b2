/*
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "distildoc/kd_losses.hpp"
#include "distildoc/random.hpp"
#include "distildoc/tensor.hpp"

namespace distildoc {

enum class LossKind { vanilla, mse, nkd, fitnet, simkd };

inline constexpr std::array<LossKind, 5> kAllLosses{LossKind::vanilla, LossKind::mse, LossKind::nkd,
                                                    LossKind::fitnet, LossKind::simkd};

inline std::string_view to_string(LossKind kind) {
  switch (kind) {
    case LossKind::vanilla: return "vanilla";
    case LossKind::mse: return "mse";
    case LossKind::nkd: return "nkd";
    case LossKind::fitnet: return "fitnet";
    case LossKind::simkd: return "simkd";
  }
  return "?";
}

inline LossKind loss_kind_from_string(std::string_view name) {
  for (auto k : kAllLosses)
    if (to_string(k) == name) return k;
  throw std::domain_error("unknown loss '" + std::string(name) + "'");
}

/// Coordinates whose analytic and numeric gradients are both below this are
/// compared on an absolute scale (see max_relative_error).
inline constexpr double kGradcheckFloor = 1e-6;

struct GradcheckResult {
  LossKind loss;
  int trials = 0;
  std::size_t coordinates = 0;
  double max_relative_error = 0.0;
};

/// One randomized loss instance: a loss closure over its trainable leaves.
struct LossInstance {
  std::vector<Tensor> leaves;
  std::function<Tensor(GradTape&)> loss;
};

namespace detail {

inline Tensor random_tensor(Rng& rng, Shape shape, bool requires_grad, double spread = 2.0) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.uniform(-spread, spread);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline DistillBatch random_batch(Rng& rng) {
  const auto b = static_cast<std::size_t>(rng.integer(1, 4));
  const auto k = static_cast<std::size_t>(rng.integer(2, 8));
  DistillBatch batch{random_tensor(rng, {b, k}, true, 3.0), random_tensor(rng, {b, k}, false, 3.0), {}};
  for (std::size_t i = 0; i < b; ++i) batch.labels.push_back(rng.integer(0, static_cast<int>(k) - 1));
  return batch;
}

// Random projector plus matching student/teacher features (B <= 4, D <= 16).
inline std::pair<FeaturePair, Projector> random_feature_setup(Rng& rng) {
  const auto b = static_cast<std::size_t>(rng.integer(1, 4));
  const auto seed = rng.next_u64();
  switch (rng.integer(0, 3)) {
    case 0: {
      const auto d = static_cast<std::size_t>(rng.integer(1, 16));
      auto proj = make_projector(ProjectorKind::identity, {d}, {d}, seed);
      return {{random_tensor(rng, {b, d}, true), random_tensor(rng, {b, d}, false), 1}, proj};
    }
    case 1: {
      const auto ds = static_cast<std::size_t>(rng.integer(1, 16));
      const auto dt = static_cast<std::size_t>(rng.integer(1, 16));
      auto proj = make_projector(ProjectorKind::linear_cls, {ds}, {dt}, seed);
      return {{random_tensor(rng, {b, ds}, true), random_tensor(rng, {b, dt}, false), 1}, proj};
    }
    case 2: {
      const auto t = static_cast<std::size_t>(rng.integer(2, 5));
      const auto ds = static_cast<std::size_t>(rng.integer(1, 16));
      const auto dt = static_cast<std::size_t>(rng.integer(1, 16));
      auto proj = make_projector(ProjectorKind::linear_cls, {t, ds}, {dt}, seed);
      return {{random_tensor(rng, {b, t, ds}, true), random_tensor(rng, {b, dt}, false), 1}, proj};
    }
    default: {
      const auto side = static_cast<std::size_t>(rng.integer(1, 3));
      const auto d = static_cast<std::size_t>(rng.integer(1, 4));
      const auto c = static_cast<std::size_t>(rng.integer(1, 4));
      auto proj = make_projector(ProjectorKind::conv_reshape, {side * side + 1, d}, {c, side, side}, seed);
      return {{random_tensor(rng, {b, side * side + 1, d}, true), random_tensor(rng, {b, c, side, side}, false), 1},
              proj};
    }
  }
}

}  // namespace detail

inline LossInstance random_loss_instance(LossKind kind, Rng& rng) {
  switch (kind) {
    case LossKind::vanilla: {
      auto batch = detail::random_batch(rng);
      KDHyperparams hp{rng.uniform(0.0, 1.0), rng.uniform(1.0, 4.0), 0.0};
      return {{batch.student_logits}, [batch, hp](GradTape& t) { return vanilla_kd_loss(t, batch, hp); }};
    }
    case LossKind::mse: {
      auto batch = detail::random_batch(rng);
      return {{batch.student_logits}, [batch](GradTape& t) { return mse_logit_loss(t, batch); }};
    }
    case LossKind::nkd: {
      auto batch = detail::random_batch(rng);
      KDHyperparams hp{0.5, rng.uniform(1.0, 4.0), rng.uniform(0.0, 2.0)};
      return {{batch.student_logits}, [batch, hp](GradTape& t) { return nkd_loss(t, batch, hp); }};
    }
    case LossKind::fitnet:
    case LossKind::simkd: {
      auto [pair, proj] = detail::random_feature_setup(rng);
      std::vector<Tensor> leaves{pair.student_features};
      for (auto& p : proj.parameters()) leaves.push_back(p);
      if (kind == LossKind::fitnet)
        return {leaves, [pair, proj](GradTape& t) { return fitnet_loss(t, pair, proj); }};
      return {leaves, [pair, proj](GradTape& t) { return simkd_loss(t, pair, proj, pair.hint_layer); }};
    }
  }
  throw std::logic_error("unreachable");
}

/// Max relative error between tape gradients and central differences over
/// every leaf of the instance.
inline double instance_relative_error(LossInstance& inst, double eps, std::size_t* coordinates = nullptr) {
  for (auto& leaf : inst.leaves) leaf.zero_grad();
  {
    GradTape tape;
    tape.backward(inst.loss(tape));
  }
  double worst = 0.0;
  for (auto& leaf : inst.leaves) {
    auto live = leaf.mutable_values();
    const std::vector<double> original(live.begin(), live.end());
    auto value_at = [&](const Tensor& probe) {
      std::copy(probe.values().begin(), probe.values().end(), live.begin());
      GradTape tape;
      return inst.loss(tape).item();
    };
    const auto numeric = finite_difference_grad(value_at, leaf.detach(), eps);
    std::copy(original.begin(), original.end(), live.begin());
    worst = std::max(worst, max_relative_error(leaf.grad(), numeric.values(), kGradcheckFloor));
    if (coordinates) *coordinates += leaf.size();
  }
  return worst;
}

inline GradcheckResult gradcheck_loss(LossKind kind, int trials, double eps, std::uint64_t seed) {
  detail::require(trials >= 1, "gradcheck: trials must be >= 1");
  detail::require(eps >= 1e-7 && eps <= 1e-3, "gradcheck: eps must lie in [1e-7, 1e-3]");
  Rng rng(derive_seed(seed, std::string("gradcheck/") + std::string(to_string(kind))));
  GradcheckResult result{kind, trials, 0, 0.0};
  for (int i = 0; i < trials; ++i) {
    auto inst = random_loss_instance(kind, rng);
    result.max_relative_error =
        std::max(result.max_relative_error, instance_relative_error(inst, eps, &result.coordinates));
  }
  return result;
}

}  // namespace distildoc
