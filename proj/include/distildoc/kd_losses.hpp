/*
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "distildoc/random.hpp"
#include "distildoc/tensor.hpp"
#include "distildoc/tensor_json.hpp"

namespace distildoc {

// ---------------------------------------------------------------------------
// Response-based distillation: vanilla KD, logit MSE, NKD.
// ---------------------------------------------------------------------------

struct KDHyperparams {
  double alpha = 0.5;  // weight of the hard-label term in vanilla KD
  double tau = 1.0;    // softmax temperature
  double gamma = 1.5;  // NKD non-target weight

  void validate() const {
    detail::require(alpha >= 0.0 && alpha <= 1.0, "alpha must lie in [0, 1]");
    detail::require(tau >= 1.0, "tau must be >= 1");
    detail::require(gamma >= 0.0, "gamma must be >= 0");
  }

  static KDHyperparams vanilla_defaults() { return {0.5, 2.5, 0.0}; }
  static KDHyperparams nkd_defaults() { return {0.5, 1.0, 1.5}; }
};

/// Student and teacher logits (B x K) with hard labels. Teacher logits are
/// only ever read as constants.
struct DistillBatch {
  Tensor student_logits;
  Tensor teacher_logits;
  std::vector<int> labels;

  void validate() const {
    detail::require(student_logits.rank() == 2, "student logits must be (B x K), got " +
                                                    shape_string(student_logits.shape()));
    detail::require(student_logits.shape() == teacher_logits.shape(),
                    "student/teacher logit shapes differ: " + shape_string(student_logits.shape()) +
                        " vs " + shape_string(teacher_logits.shape()));
    detail::require_labels(labels, student_logits.dim(0), student_logits.dim(1), "DistillBatch");
  }

  std::size_t batch() const { return student_logits.dim(0); }
  std::size_t classes() const { return student_logits.dim(1); }
};

namespace detail {

// Row-wise probabilities of a constant (B x K) matrix, optionally leaving out
// one column per row (that entry is 0 and the rest renormalize).
inline std::vector<double> constant_softmax(const Tensor& logits, double tau,
                                            std::span<const int> excluded = {}) {
  GradTape scratch;
  const auto logp = log_softmax(scratch, logits.detach(), tau, excluded);
  std::vector<double> p(logp.values().begin(), logp.values().end());
  for (double& v : p) v = std::exp(v);
  if (!excluded.empty()) {
    const std::size_t cols = logits.dim(1);
    for (std::size_t r = 0; r < excluded.size(); ++r) p[r * cols + static_cast<std::size_t>(excluded[r])] = 0.0;
  }
  return p;
}

}  // namespace detail

/// Batch-mean cross-entropy of softmax(logits) against hard labels.
inline Tensor cross_entropy_loss(GradTape& tape, const Tensor& logits, std::span<const int> labels) {
  detail::require_rank(logits, 2, "cross_entropy_loss");
  const auto batch = static_cast<double>(logits.dim(0));
  return scale(tape, sum(tape, pick(tape, log_softmax(tape, logits, 1.0), labels)), -1.0 / batch);
}

/// alpha * CE(y, softmax(s)) + (1 - alpha) * tau^2 * KL(softmax(t/tau) || softmax(s/tau)),
/// averaged over the batch.
inline Tensor vanilla_kd_loss(GradTape& tape, const DistillBatch& batch, const KDHyperparams& hp) {
  batch.validate();
  hp.validate();
  const auto rows = static_cast<double>(batch.batch());
  const auto& s = batch.student_logits;

  const auto ce = cross_entropy_loss(tape, s, batch.labels);

  // KL = (1/B) * (sum p log p - sum p log q); the first sum is a constant.
  GradTape scratch;
  const auto teacher_logp = log_softmax(scratch, batch.teacher_logits.detach(), hp.tau);
  std::vector<double> p(teacher_logp.values().begin(), teacher_logp.values().end());
  for (double& v : p) v = std::exp(v);
  double p_log_p = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) p_log_p += p[i] * teacher_logp.values()[i];

  const auto student_logq = log_softmax(tape, s, hp.tau);
  const Tensor teacher_probs(s.shape(), std::move(p));
  const auto cross = sum(tape, mul(tape, student_logq, teacher_probs));
  const auto kl = scale(tape, sub(tape, Tensor::scalar(p_log_p), cross), 1.0 / rows);

  return add(tape, scale(tape, ce, hp.alpha), scale(tape, kl, (1.0 - hp.alpha) * hp.tau * hp.tau));
}

/// Batch mean of the per-sample squared L2 distance between logit vectors.
inline Tensor mse_logit_loss(GradTape& tape, const DistillBatch& batch) {
  batch.validate();
  const auto diff = sub(tape, batch.student_logits, batch.teacher_logits.detach());
  return scale(tape, sum(tape, square(tape, diff)), 1.0 / static_cast<double>(batch.batch()));
}

/// Teacher weights of the NKD non-target term for one sample: the
/// temperature softmax renormalized over the K-1 non-target classes.
/// Returned with length K; the target entry is 0.
inline std::vector<double> nkd_nontarget_weights(std::span<const double> teacher_logits, int label,
                                                 double tau) {
  const std::vector<int> excluded{label};
  return detail::constant_softmax(
      Tensor(Shape{1, teacher_logits.size()}, {teacher_logits.begin(), teacher_logits.end()}), tau,
      excluded);
}

/// Normalized KD in cross-entropy form, averaged over the batch:
///   -t_c ln s_c - gamma * tau^2 * sum_{k != c} N(t/tau)_k ln N(s/tau)_k
/// with t, s the tau=1 softmaxes for the target term and N(.) the softmax
/// renormalized over non-target classes.
inline Tensor nkd_loss(GradTape& tape, const DistillBatch& batch, const KDHyperparams& hp) {
  batch.validate();
  hp.validate();
  detail::require(batch.classes() >= 2, "nkd_loss: needs K >= 2 (non-target set is empty)");
  const auto rows = static_cast<double>(batch.batch());
  const std::size_t cols = batch.classes();
  const auto& s = batch.student_logits;

  auto target_weights = detail::constant_softmax(batch.teacher_logits, 1.0);
  for (std::size_t r = 0; r < batch.labels.size(); ++r)
    for (std::size_t c = 0; c < cols; ++c)
      if (c != static_cast<std::size_t>(batch.labels[r])) target_weights[r * cols + c] = 0.0;
  const auto nontarget_weights = detail::constant_softmax(batch.teacher_logits, hp.tau, batch.labels);

  const auto target = scale(
      tape, sum(tape, mul(tape, log_softmax(tape, s, 1.0), Tensor(s.shape(), std::move(target_weights)))),
      -1.0 / rows);
  const auto nontarget = scale(tape,
                               sum(tape, mul(tape, log_softmax(tape, s, hp.tau, batch.labels),
                                             Tensor(s.shape(), nontarget_weights))),
                               -hp.gamma * hp.tau * hp.tau / rows);
  return add(tape, target, nontarget);
}

// ---------------------------------------------------------------------------
// Feature-based distillation: projectors, FitNet, SimKD.
// ---------------------------------------------------------------------------

enum class ProjectorKind { identity, linear_cls, conv_reshape };

inline std::string_view to_string(ProjectorKind kind) {
  switch (kind) {
    case ProjectorKind::identity: return "identity";
    case ProjectorKind::linear_cls: return "linear_cls";
    case ProjectorKind::conv_reshape: return "conv_reshape";
  }
  return "?";
}

/// Accepts both snake_case and the CLI's kebab-case spelling.
inline ProjectorKind projector_kind_from_string(std::string_view name) {
  if (name == "identity") return ProjectorKind::identity;
  if (name == "linear_cls" || name == "linear-cls") return ProjectorKind::linear_cls;
  if (name == "conv_reshape" || name == "conv-reshape") return ProjectorKind::conv_reshape;
  throw std::domain_error("unknown projector kind '" + std::string(name) + "'");
}

struct ProjectorOptions {
  bool drop_pooled_token = true;  // conv_reshape: discard token 0 before reshaping
  std::size_t kernel_size = 3;    // conv_reshape: odd, stride 1, same padding
};

/// Trainable map from student features to the teacher's feature shape.
/// Shapes are per sample (no batch axis):
///   identity      S -> S
///   linear_cls    [D_s] or [T, D_s] -> [D_t]; a token sequence uses token 0
///   conv_reshape  [T, D] -> [C, S, S]; tokens become a D-channel S x S map
///                 (after dropping the pooled token) followed by a k x k conv
class Projector {
 public:
  ProjectorKind kind() const { return kind_; }
  std::uint64_t seed() const { return seed_; }
  const Shape& student_shape() const { return student_shape_; }
  const Shape& teacher_shape() const { return teacher_shape_; }
  const ProjectorOptions& options() const { return options_; }

  /// Parameter handles; updating their values updates the projector.
  std::vector<Tensor> parameters() const {
    if (kind_ == ProjectorKind::identity) return {};
    return {weight_, bias_};
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.size();
    return n;
  }

  /// (B x student_shape) -> (B x teacher_shape).
  Tensor apply(GradTape& tape, const Tensor& x) const {
    detail::require(x.rank() == student_shape_.size() + 1 &&
                        Shape(x.shape().begin() + 1, x.shape().end()) == student_shape_,
                    "projector expects per-sample shape " + shape_string(student_shape_) + ", got " +
                        shape_string(x.shape()));
    switch (kind_) {
      case ProjectorKind::identity:
        return x;
      case ProjectorKind::linear_cls: {
        const auto cls = x.rank() == 3 ? take_token(tape, x, 0) : x;
        return linear(tape, cls, weight_, bias_);
      }
      case ProjectorKind::conv_reshape:
        return conv2d_same(tape, tokens_to_grid(tape, x, options_.drop_pooled_token), weight_, bias_);
    }
    throw std::logic_error("unreachable");
  }

  TensorDocument to_document() const {
    TensorDocument doc;
    doc.kind = std::string(to_string(kind_));
    doc.seed = seed_;
    doc.shapes = {{"student", student_shape_}, {"teacher", teacher_shape_}};
    doc.attributes = {{"drop_pooled_token", options_.drop_pooled_token},
                      {"kernel_size", options_.kernel_size}};
    if (kind_ != ProjectorKind::identity) doc.tensors = {{"weight", weight_}, {"bias", bias_}};
    return doc;
  }

  static Projector from_document(const TensorDocument& doc);

 private:
  friend Projector make_projector(ProjectorKind, Shape, Shape, std::uint64_t, ProjectorOptions);

  ProjectorKind kind_ = ProjectorKind::identity;
  std::uint64_t seed_ = 0;
  Shape student_shape_;
  Shape teacher_shape_;
  ProjectorOptions options_;
  Tensor weight_;
  Tensor bias_;
};

namespace detail {

inline Tensor uniform_parameter(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace detail

/// Builds a projector with parameters drawn uniformly from +-1/sqrt(fan_in).
inline Projector make_projector(ProjectorKind kind, Shape student_shape, Shape teacher_shape,
                                std::uint64_t seed, ProjectorOptions options = {}) {
  Projector p;
  p.kind_ = kind;
  p.seed_ = seed;
  p.options_ = options;
  Rng rng(derive_seed(seed, "projector"));

  switch (kind) {
    case ProjectorKind::identity:
      detail::require(student_shape == teacher_shape,
                      "identity projector needs equal shapes, got " + shape_string(student_shape) +
                          " and " + shape_string(teacher_shape));
      break;
    case ProjectorKind::linear_cls: {
      detail::require(student_shape.size() == 1 || student_shape.size() == 2,
                      "linear_cls expects student features [D] or [T, D]");
      detail::require(teacher_shape.size() == 1, "linear_cls expects teacher features [D]");
      const std::size_t in = student_shape.back(), out = teacher_shape[0];
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      p.weight_ = detail::uniform_parameter({in, out}, bound, rng);
      p.bias_ = detail::uniform_parameter({out}, bound, rng);
      break;
    }
    case ProjectorKind::conv_reshape: {
      detail::require(student_shape.size() == 2, "conv_reshape expects student tokens [T, D]");
      detail::require(teacher_shape.size() == 3, "conv_reshape expects teacher maps [C, H, W]");
      detail::require(options.kernel_size % 2 == 1, "conv_reshape kernel size must be odd");
      const std::size_t offset = options.drop_pooled_token ? 1 : 0;
      detail::require(student_shape[0] > offset, "conv_reshape: no spatial tokens");
      const std::size_t spatial = student_shape[0] - offset;
      const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(spatial))));
      detail::require(side * side == spatial, "conv_reshape: " + std::to_string(spatial) +
                                                  " spatial tokens are not a square grid");
      detail::require(teacher_shape[1] == side && teacher_shape[2] == side,
                      "conv_reshape: student grid " + std::to_string(side) + "x" + std::to_string(side) +
                          " does not match teacher " + shape_string(teacher_shape));
      const std::size_t cin = student_shape[1], cout = teacher_shape[0], k = options.kernel_size;
      const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
      p.weight_ = detail::uniform_parameter({cout, cin, k, k}, bound, rng);
      p.bias_ = detail::uniform_parameter({cout}, bound, rng);
      break;
    }
  }
  p.student_shape_ = std::move(student_shape);
  p.teacher_shape_ = std::move(teacher_shape);
  return p;
}

inline Projector Projector::from_document(const TensorDocument& doc) {
  try {
    ProjectorOptions options;
    options.drop_pooled_token = doc.attributes.value("drop_pooled_token", true);
    options.kernel_size = doc.attributes.value("kernel_size", std::size_t{3});
    auto p = make_projector(projector_kind_from_string(doc.kind), doc.shapes.at("student"),
                            doc.shapes.at("teacher"), doc.seed, options);
    if (p.kind_ != ProjectorKind::identity) {
      const auto& w = doc.tensor("weight");
      const auto& b = doc.tensor("bias");
      detail::require(w.shape() == p.weight_.shape() && b.shape() == p.bias_.shape(),
                      "projector tensor shapes do not match its declared shapes");
      p.weight_ = Tensor(w.shape(), {w.values().begin(), w.values().end()}, true);
      p.bias_ = Tensor(b.shape(), {b.values().begin(), b.values().end()}, true);
    }
    return p;
  } catch (const std::domain_error& e) {
    throw ParseError(e.what(), "projector");
  } catch (const std::out_of_range&) {
    throw ParseError("missing student/teacher shapes", "shapes");
  }
}

/// Intermediate features of one hint layer. Teacher features are constants.
struct FeaturePair {
  Tensor student_features;
  Tensor teacher_features;
  std::size_t hint_layer = 0;
};

/// Sum of squared differences over all non-batch axes, averaged over the batch.
inline Tensor feature_mse(GradTape& tape, const Tensor& projected, const Tensor& target) {
  detail::require(projected.shape() == target.shape(),
                  "projected features " + shape_string(projected.shape()) +
                      " do not match teacher features " + shape_string(target.shape()));
  const auto diff = sub(tape, projected, target.detach());
  return scale(tape, sum(tape, square(tape, diff)), 1.0 / static_cast<double>(projected.dim(0)));
}

inline Tensor fitnet_loss(GradTape& tape, const FeaturePair& pair, const Projector& projector) {
  detail::require(pair.student_features.rank() >= 1 && pair.teacher_features.rank() >= 1 &&
                      pair.student_features.dim(0) == pair.teacher_features.dim(0),
                  "student and teacher features must share the batch dimension");
  Shape teacher_sample(pair.teacher_features.shape().begin() + 1, pair.teacher_features.shape().end());
  detail::require(teacher_sample == projector.teacher_shape(),
                  "projector output " + shape_string(projector.teacher_shape()) +
                      " is incompatible with teacher features " + shape_string(teacher_sample));
  return feature_mse(tape, projector.apply(tape, pair.student_features), pair.teacher_features);
}

/// Feature MSE at the penultimate layer. When `penultimate_layer` is given,
/// the pair's hint layer must equal it.
inline Tensor simkd_loss(GradTape& tape, const FeaturePair& pair, const Projector& projector,
                         std::optional<std::size_t> penultimate_layer = std::nullopt) {
  if (penultimate_layer)
    detail::require(pair.hint_layer == *penultimate_layer,
                    "simkd_loss: hint layer " + std::to_string(pair.hint_layer) +
                        " is not the penultimate layer " + std::to_string(*penultimate_layer));
  return fitnet_loss(tape, pair, projector);
}

/// The teacher's final linear layer, reused frozen at SimKD inference.
/// weight is (D x K), bias (K).
struct TeacherClassifier {
  Tensor weight;
  Tensor bias;

  /// Copies the parameters so later training of the source cannot leak in.
  static TeacherClassifier frozen(const Tensor& weight, const Tensor& bias) {
    return {weight.detach(), bias.detach()};
  }
};

/// teacher_classifier(projector(student_penultimate)). Feature maps from a
/// conv projector are average-pooled over space before the classifier.
inline Tensor simkd_infer(GradTape& tape, const Tensor& student_penultimate, const Projector& projector,
                          const TeacherClassifier& classifier) {
  auto features = projector.apply(tape, student_penultimate);
  if (features.rank() == 4) features = spatial_mean(tape, features);
  detail::require(features.rank() == 2 && classifier.weight.rank() == 2 &&
                      features.dim(1) == classifier.weight.dim(0),
                  "simkd_infer: projected features " + shape_string(features.shape()) +
                      " do not fit teacher classifier " + shape_string(classifier.weight.shape()));
  detail::require(classifier.bias.size() == classifier.weight.dim(1),
                  "simkd_infer: classifier bias does not match its weight");
  return linear(tape, features, classifier.weight.detach(), classifier.bias.detach());
}

inline Tensor simkd_infer(const Tensor& student_penultimate, const Projector& projector,
                          const TeacherClassifier& classifier) {
  GradTape tape;
  return simkd_infer(tape, student_penultimate, projector, classifier).detach();
}

}  // namespace distildoc
