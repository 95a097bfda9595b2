/*
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "distildoc/kd_losses.hpp"
#include "distildoc/metrics.hpp"
#include "distildoc/probability.hpp"
#include "distildoc/random.hpp"
#include "distildoc/tensor.hpp"
#include "distildoc/tensor_json.hpp"

namespace distildoc {

/// Raised when a training run is asked for something it cannot do, such as
/// a KD method without a teacher.
class ConfigError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct SyntheticDataset {
  Tensor points;  // N x 2
  std::vector<int> labels;
  std::size_t classes = 0;
  std::uint64_t seed = 0;

  std::size_t size() const { return labels.size(); }
};

/// K isotropic Gaussian clusters centred on the unit circle at angles
/// 2*pi*k/K. Points are emitted class-interleaved (0, 1, ..., K-1, 0, ...).
inline SyntheticDataset gen_gaussian_blobs(std::size_t classes, std::size_t n_per_class, double spread,
                                           std::uint64_t seed) {
  detail::require(classes >= 2, "gen_gaussian_blobs: need at least 2 classes");
  detail::require(n_per_class >= 1, "gen_gaussian_blobs: n_per_class must be >= 1");
  detail::require(spread > 0.0 && std::isfinite(spread), "gen_gaussian_blobs: spread must be > 0");
  Rng rng(derive_seed(seed, "blobs"));
  std::vector<double> xy;
  std::vector<int> labels;
  xy.reserve(2 * classes * n_per_class);
  for (std::size_t i = 0; i < n_per_class; ++i) {
    for (std::size_t k = 0; k < classes; ++k) {
      const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(classes);
      xy.push_back(std::cos(angle) + spread * rng.normal());
      xy.push_back(std::sin(angle) + spread * rng.normal());
      labels.push_back(static_cast<int>(k));
    }
  }
  const auto n = labels.size();
  return {Tensor({n, 2}, std::move(xy)), std::move(labels), classes, seed};
}

struct MlpOutput {
  Tensor logits;               // B x K
  std::vector<Tensor> hidden;  // tanh activations of layers 1 .. L-1
};

/// Fully connected tanh network. Layer l maps dims[l] -> dims[l+1]; the last
/// layer is linear and produces logits.
class Mlp {
 public:
  static Mlp create(std::vector<std::size_t> dims, std::uint64_t seed) {
    detail::require(dims.size() >= 2, "Mlp needs at least input and output dimensions");
    for (auto d : dims) detail::require(d > 0, "Mlp layer widths must be positive");
    Mlp m;
    m.dims_ = std::move(dims);
    m.seed_ = seed;
    Rng rng(derive_seed(seed, "mlp"));
    for (std::size_t l = 0; l + 1 < m.dims_.size(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(m.dims_[l]));
      m.weights_.push_back(detail::uniform_parameter({m.dims_[l], m.dims_[l + 1]}, bound, rng));
      m.biases_.push_back(detail::uniform_parameter({m.dims_[l + 1]}, bound, rng));
    }
    return m;
  }

  /// Deep copy; plain copies share parameter storage.
  Mlp clone() const {
    Mlp m;
    m.dims_ = dims_;
    m.seed_ = seed_;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      m.weights_.push_back(trainable_copy(weights_[l]));
      m.biases_.push_back(trainable_copy(biases_[l]));
    }
    return m;
  }

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t layers() const { return weights_.size(); }
  std::size_t classes() const { return dims_.back(); }
  std::size_t penultimate_layer() const { return layers() - 1; }

  /// Width of hidden layer l (1 .. L-1).
  std::size_t width(std::size_t layer) const {
    detail::require(layer >= 1 && layer < layers(), "Mlp: no hidden layer " + std::to_string(layer));
    return dims_[layer];
  }

  MlpOutput forward(GradTape& tape, const Tensor& x) const {
    detail::require(x.rank() == 2 && x.dim(1) == dims_.front(),
                    "Mlp input must be B x " + std::to_string(dims_.front()) + ", got " + shape_string(x.shape()));
    MlpOutput out;
    Tensor h = x;
    for (std::size_t l = 0; l + 1 < layers(); ++l) {
      h = tanh(tape, linear(tape, h, weights_[l], biases_[l]));
      out.hidden.push_back(h);
    }
    out.logits = linear(tape, h, weights_.back(), biases_.back());
    return out;
  }

  /// Forward pass with every output detached.
  MlpOutput infer(const Tensor& x) const {
    GradTape tape;
    auto out = forward(tape, x);
    out.logits = out.logits.detach();
    for (auto& h : out.hidden) h = h.detach();
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> p;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      p.push_back(weights_[l]);
      p.push_back(biases_[l]);
    }
    return p;
  }

  TeacherClassifier head() const { return TeacherClassifier::frozen(weights_.back(), biases_.back()); }

  /// FNV-1a over the bit patterns of every parameter.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : parameters())
      for (double v : p.values()) {
        auto bits = std::bit_cast<std::uint64_t>(v);
        for (int i = 0; i < 8; ++i) {
          h ^= (bits >> (8 * i)) & 0xFF;
          h *= 0x100000001b3ULL;
        }
      }
    return h;
  }

  TensorDocument to_document() const {
    TensorDocument doc;
    doc.kind = "mlp";
    doc.seed = seed_;
    doc.shapes = {{"layer_dims", dims_}};
    doc.attributes = {{"activation", "tanh"}};
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      doc.tensors.push_back({"w" + std::to_string(l), weights_[l]});
      doc.tensors.push_back({"b" + std::to_string(l), biases_[l]});
    }
    return doc;
  }

  static Mlp from_document(const TensorDocument& doc) {
    if (doc.kind != "mlp") throw ParseError("expected kind 'mlp', got '" + doc.kind + "'", "kind");
    const auto dims = doc.shapes.find("layer_dims");
    if (dims == doc.shapes.end()) throw ParseError("missing layer_dims", "shapes");
    Mlp m;
    try {
      m = create(dims->second, doc.seed);
    } catch (const std::domain_error& e) {
      throw ParseError(e.what(), "shapes.layer_dims");
    }
    for (std::size_t l = 0; l < m.layers(); ++l) {
      for (auto* slot : {&m.weights_[l], &m.biases_[l]}) {
        const auto name = (slot == &m.weights_[l] ? "w" : "b") + std::to_string(l);
        const auto& t = doc.tensor(name);
        if (t.shape() != slot->shape())
          throw ParseError("tensor " + name + " has shape " + shape_string(t.shape()) + ", expected " +
                               shape_string(slot->shape()),
                           "tensors." + name);
        *slot = trainable_copy(t);
      }
    }
    return m;
  }

 private:
  static Tensor trainable_copy(const Tensor& t) {
    return Tensor(t.shape(), {t.values().begin(), t.values().end()}, true);
  }

  std::vector<std::size_t> dims_;
  std::uint64_t seed_ = 0;
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

// ---------------------------------------------------------------------------
// Training

enum class TrainMethod { ce, vanilla, nkd, mse, fitnet, simkd };

inline constexpr std::array<TrainMethod, 6> kAllMethods{TrainMethod::ce,  TrainMethod::vanilla,
                                                        TrainMethod::nkd, TrainMethod::mse,
                                                        TrainMethod::fitnet, TrainMethod::simkd};

inline std::string_view to_string(TrainMethod m) {
  switch (m) {
    case TrainMethod::ce: return "ce";
    case TrainMethod::vanilla: return "vanilla";
    case TrainMethod::nkd: return "nkd";
    case TrainMethod::mse: return "mse";
    case TrainMethod::fitnet: return "fitnet";
    case TrainMethod::simkd: return "simkd";
  }
  return "?";
}

inline TrainMethod train_method_from_string(std::string_view name) {
  for (auto m : kAllMethods)
    if (to_string(m) == name) return m;
  throw ConfigError("unknown method '" + std::string(name) + "'");
}

inline bool uses_projector(TrainMethod m) { return m == TrainMethod::fitnet || m == TrainMethod::simkd; }

struct TrainConfig {
  TrainMethod method = TrainMethod::ce;
  KDHyperparams hyperparams;
  ProjectorKind projector_kind = ProjectorKind::linear_cls;
  double learning_rate = 0.1;
  int epochs = 60;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::optional<std::size_t> hint_layer;  // fitnet only; defaults to the middle hidden layer

  void validate() const {
    if (!(learning_rate >= 0.0 && std::isfinite(learning_rate)))
      throw ConfigError("learning rate must be finite and >= 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (method != TrainMethod::ce) {
      try {
        hyperparams.validate();
      } catch (const std::domain_error& e) {
        throw ConfigError(e.what());
      }
    }
  }
};

struct TrainResult {
  Mlp model;
  std::optional<Projector> projector;
  std::vector<double> loss_trace;  // mean batch loss per epoch
};

namespace detail {

inline Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows) {
  const std::size_t width = t.size() / t.dim(0);
  std::vector<double> out;
  out.reserve(rows.size() * width);
  for (auto r : rows) {
    const auto row = t.values().subspan(r * width, width);
    out.insert(out.end(), row.begin(), row.end());
  }
  Shape shape = t.shape();
  shape[0] = rows.size();
  return Tensor(std::move(shape), std::move(out));
}

inline std::size_t resolve_feature_layer(const Mlp& student, const Mlp& teacher, const TrainConfig& cfg) {
  const std::size_t hidden = student.layers() - 1;
  if (hidden == 0 || teacher.layers() != student.layers())
    throw ConfigError("feature distillation needs student and teacher with the same number of hidden layers (>= 1)");
  if (cfg.method == TrainMethod::simkd) return student.penultimate_layer();
  const std::size_t layer = cfg.hint_layer.value_or(std::max<std::size_t>(1, student.layers() / 2));
  if (layer < 1 || layer > hidden) throw ConfigError("hint layer " + std::to_string(layer) + " is not a hidden layer");
  return layer;
}

}  // namespace detail

/// Minibatch SGD from `init` (left untouched). KD methods read the teacher's
/// outputs, computed once up front; the teacher itself is never modified.
inline TrainResult train(const Mlp& init, const SyntheticDataset& data, const TrainConfig& cfg,
                         const Mlp* teacher = nullptr) {
  cfg.validate();
  if (cfg.method != TrainMethod::ce && teacher == nullptr)
    throw ConfigError("method '" + std::string(to_string(cfg.method)) + "' requires a teacher");
  detail::require(data.size() > 0 && data.points.dim(1) == init.dims().front(),
                  "train: data does not fit the model input");
  if (teacher) {
    detail::require(teacher->dims().front() == init.dims().front() && teacher->classes() == init.classes(),
                    "train: teacher and student disagree on input or class count");
  }

  TrainResult result{init.clone(), std::nullopt, {}};
  Mlp& student = result.model;

  std::optional<MlpOutput> teacher_out;
  std::size_t feature_layer = 0;
  if (cfg.method != TrainMethod::ce) teacher_out = teacher->infer(data.points);
  if (uses_projector(cfg.method)) {
    feature_layer = detail::resolve_feature_layer(student, *teacher, cfg);
    try {
      result.projector = make_projector(cfg.projector_kind, {student.width(feature_layer)},
                                        {teacher->width(feature_layer)}, derive_seed(cfg.seed, "train/projector"));
    } catch (const std::domain_error& e) {
      throw ConfigError(std::string("projector not applicable to this model: ") + e.what());
    }
  }

  std::vector<Tensor> params = student.parameters();
  if (result.projector)
    for (auto& p : result.projector->parameters()) params.push_back(p);

  Rng rng(derive_seed(cfg.seed, "train/shuffle"));
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::span<const std::size_t> rows(order.data() + start, std::min(cfg.batch_size, order.size() - start));
      const Tensor x = detail::gather_rows(data.points, rows);
      std::vector<int> labels;
      for (auto r : rows) labels.push_back(data.labels[r]);

      GradTape tape;
      const auto out = student.forward(tape, x);
      Tensor loss;
      if (cfg.method == TrainMethod::ce) {
        loss = cross_entropy_loss(tape, out.logits, labels);
      } else if (uses_projector(cfg.method)) {
        const FeaturePair pair{out.hidden[feature_layer - 1],
                               detail::gather_rows(teacher_out->hidden[feature_layer - 1], rows), feature_layer};
        if (cfg.method == TrainMethod::simkd) {
          loss = simkd_loss(tape, pair, *result.projector, student.penultimate_layer());
        } else {
          loss = add(tape, cross_entropy_loss(tape, out.logits, labels), fitnet_loss(tape, pair, *result.projector));
        }
      } else {
        const DistillBatch batch{out.logits, detail::gather_rows(teacher_out->logits, rows), labels};
        switch (cfg.method) {
          case TrainMethod::vanilla: loss = vanilla_kd_loss(tape, batch, cfg.hyperparams); break;
          case TrainMethod::nkd: loss = nkd_loss(tape, batch, cfg.hyperparams); break;
          default: loss = mse_logit_loss(tape, batch); break;
        }
      }

      for (auto& p : params) p.zero_grad();
      tape.backward(loss);
      for (auto& p : params) {
        if (!p.has_grad()) continue;
        auto v = p.mutable_values();
        const auto g = p.grad();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= cfg.learning_rate * g[i];
      }
      epoch_loss += loss.item();
      ++batches;
    }
    result.loss_trace.push_back(epoch_loss / static_cast<double>(batches));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct OwnHead {};

/// Student penultimate features, mapped by the trained projector into the
/// teacher's frozen classifier.
struct SimkdReuse {
  Projector projector;
  TeacherClassifier head;
};

using Inference = std::variant<OwnHead, SimkdReuse>;

inline std::vector<PredictionRecord> evaluate(const Mlp& model, const SyntheticDataset& data,
                                              const Inference& inference = OwnHead{}) {
  const auto out = model.infer(data.points);
  const Tensor logits = std::holds_alternative<OwnHead>(inference)
                            ? out.logits
                            : simkd_infer(out.hidden.back(), std::get<SimkdReuse>(inference).projector,
                                          std::get<SimkdReuse>(inference).head);
  detail::require(logits.dim(1) == data.classes, "evaluate: model class count does not match the data");
  std::vector<PredictionRecord> records;
  records.reserve(data.size());
  const std::size_t k = logits.dim(1);
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto probs = temp_softmax(logits.values().subspan(i * k, k), 1.0);
    records.push_back(PredictionRecord::from_probabilities(std::move(probs), data.labels[i]));
  }
  return records;
}

/// Fraction of positions where both record lists predict the same class.
inline double argmax_agreement(std::span<const PredictionRecord> a, std::span<const PredictionRecord> b) {
  detail::require(!a.empty() && a.size() == b.size(), "argmax_agreement: record lists differ in length");
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i].predicted == b[i].predicted ? 1 : 0;
  return static_cast<double>(same) / static_cast<double>(a.size());
}

}  // namespace distildoc
