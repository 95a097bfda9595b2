/*
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace distildoc {

using Shape = std::vector<std::size_t>;

namespace detail {

inline void require(bool condition, const std::string& message) {
  if (!condition) throw std::domain_error(message);
}

}  // namespace detail

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

class GradTape;

/// Dense row-major array of doubles with an optional gradient slot.
///
/// Tensor is a handle: copies share storage, so a parameter held by a model
/// and the same parameter seen by a tape are one object. Values are only
/// mutated through mutable_values(), which optimizers use on leaf tensors.
class Tensor {
 public:
  Tensor() : Tensor(Shape{}, {0.0}) {}

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : s_(std::make_shared<Storage>()) {
    for (auto d : shape) detail::require(d > 0, "tensor dimensions must be positive, got " + shape_string(shape));
    detail::require(values.size() == shape_size(shape),
                    "tensor value count " + std::to_string(values.size()) +
                        " does not match shape " + shape_string(shape));
    s_->shape = std::move(shape);
    s_->values = std::move(values);
    s_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor(Shape{}, {value}, requires_grad);
  }

  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return s_->shape.at(axis); }
  std::size_t size() const { return s_->values.size(); }
  bool is_scalar() const { return size() == 1 && rank() <= 1; }

  std::span<const double> values() const { return s_->values; }
  std::span<double> mutable_values() { return s_->values; }

  double item() const {
    detail::require(is_scalar(), "item() on non-scalar tensor of shape " + shape_string(shape()));
    return s_->values[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const double> grad() const { return s_->grad; }
  void zero_grad() { std::fill(s_->grad.begin(), s_->grad.end(), 0.0); }

  /// Deep copy without gradient tracking.
  Tensor detach() const { return Tensor(s_->shape, s_->values, false); }

  bool shares_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  friend class GradTape;

  struct Storage {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
  };

  std::span<double> grad_buffer() {
    if (s_->grad.size() != s_->values.size()) s_->grad.assign(s_->values.size(), 0.0);
    return s_->grad;
  }

  std::shared_ptr<Storage> s_;
};

/// Dynamic record of differentiable operations, replayed in reverse by
/// backward(). Built fresh for each forward pass and confined to one thread.
class GradTape {
 public:
  /// Receives the output gradient and one span per input. The span is empty
  /// when that input does not require a gradient. Implementations must
  /// accumulate (+=) into the input spans.
  using Backward = std::function<void(std::span<const double> grad_out,
                                      std::span<const std::span<double>> grad_in)>;

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;
  GradTape(GradTape&&) = default;
  GradTape& operator=(GradTape&&) = default;

  /// Wraps an op result. Nothing is recorded when no input requires a
  /// gradient; the result is then a constant.
  Tensor record(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                Backward backward) {
    const bool tracked = std::any_of(inputs.begin(), inputs.end(),
                                     [](const Tensor& t) { return t.requires_grad(); });
    Tensor out(std::move(shape), std::move(values), tracked);
    if (tracked) entries_.push_back(Entry{out, std::move(inputs), std::move(backward)});
    return out;
  }

  /// Populates grad on every requires_grad tensor reachable from loss.
  /// Leaf gradients accumulate across calls; intermediate ones are reset.
  void backward(const Tensor& loss) {
    detail::require(loss.is_scalar(), "backward() needs a scalar loss, got shape " +
                                          shape_string(loss.shape()));
    if (!loss.requires_grad()) return;

    for (auto& e : entries_) {
      auto g = e.output.grad_buffer();
      std::fill(g.begin(), g.end(), 0.0);
    }
    Tensor seed = loss;
    seed.grad_buffer()[0] += 1.0;

    std::vector<std::span<double>> grad_in;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      grad_in.clear();
      for (auto& in : it->inputs)
        grad_in.push_back(in.requires_grad() ? in.grad_buffer() : std::span<double>{});
      it->backward(it->output.grad(), grad_in);
    }
  }

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    Tensor output;
    std::vector<Tensor> inputs;
    Backward backward;
  };
  std::vector<Entry> entries_;
};

// ---------------------------------------------------------------------------
// Differentiable primitives. Each takes the tape that records it.
// ---------------------------------------------------------------------------

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  require(t.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got shape " + shape_string(t.shape()));
}

inline void require_labels(std::span<const int> labels, std::size_t rows, std::size_t classes,
                           const char* op) {
  require(labels.size() == rows, std::string(op) + ": label count " +
                                     std::to_string(labels.size()) + " != batch " +
                                     std::to_string(rows));
  for (int y : labels)
    require(y >= 0 && static_cast<std::size_t>(y) < classes,
            std::string(op) + ": label " + std::to_string(y) + " outside [0, " +
                std::to_string(classes) + ")");
}

}  // namespace detail

inline Tensor add(GradTape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return tape.record(a.shape(), std::move(out), {a, b}, [](auto g, auto gin) {
    for (auto& gi : gin)
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[i];
  });
}

inline Tensor sub(GradTape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return tape.record(a.shape(), std::move(out), {a, b}, [](auto g, auto gin) {
    for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += g[i];
    for (std::size_t i = 0; i < gin[1].size(); ++i) gin[1][i] -= g[i];
  });
}

inline Tensor mul(GradTape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return tape.record(a.shape(), std::move(out), {a, b}, [a, b](auto g, auto gin) {
    for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += g[i] * b.values()[i];
    for (std::size_t i = 0; i < gin[1].size(); ++i) gin[1][i] += g[i] * a.values()[i];
  });
}

inline Tensor scale(GradTape& tape, const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * a.values()[i];
  return tape.record(a.shape(), std::move(out), {a}, [factor](auto g, auto gin) {
    for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += factor * g[i];
  });
}

inline Tensor square(GradTape& tape, const Tensor& a) { return mul(tape, a, a); }

inline Tensor tanh(GradTape& tape, const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.values()[i]);
  auto y = out;
  return tape.record(a.shape(), std::move(out), {a}, [y = std::move(y)](auto g, auto gin) {
    for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

/// Sum of all elements; returns a rank-0 scalar.
inline Tensor sum(GradTape& tape, const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  return tape.record(Shape{}, {total}, {a}, [](auto g, auto gin) {
    for (double& gi : gin[0]) gi += g[0];
  });
}

inline Tensor reshape(GradTape& tape, const Tensor& a, Shape shape) {
  detail::require(shape_size(shape) == a.size(), "reshape: " + shape_string(a.shape()) +
                                                     " cannot become " + shape_string(shape));
  std::vector<double> out(a.values().begin(), a.values().end());
  return tape.record(std::move(shape), std::move(out), {a}, [](auto g, auto gin) {
    for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += g[i];
  });
}

/// (M x K) . (K x N)
inline Tensor matmul(GradTape& tape, const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  detail::require(b.dim(0) == k, "matmul: inner dimensions differ, " + shape_string(a.shape()) +
                                     " x " + shape_string(b.shape()));
  std::vector<double> out(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  return tape.record(Shape{m, n}, std::move(out), {a, b}, [a, b, m, k, n](auto g, auto gin) {
    const auto av = a.values();
    const auto bv = b.values();
    if (!gin[0].empty())
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
          gin[0][i * k + p] += acc;
        }
    if (!gin[1].empty())
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gin[1][p * n + j] += aip * g[i * n + j];
        }
  });
}

/// Adds a length-N bias to every row of a (B x N) matrix.
inline Tensor add_bias(GradTape& tape, const Tensor& x, const Tensor& bias) {
  detail::require_rank(x, 2, "add_bias");
  detail::require(bias.size() == x.dim(1), "add_bias: bias length " + std::to_string(bias.size()) +
                                               " != columns " + std::to_string(x.dim(1)));
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(x.values().begin(), x.values().end());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bias.values()[c];
  return tape.record(x.shape(), std::move(out), {x, bias}, [rows, cols](auto g, auto gin) {
    for (std::size_t i = 0; i < gin[0].size(); ++i) gin[0][i] += g[i];
    if (!gin[1].empty())
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gin[1][c] += g[r * cols + c];
  });
}

/// x . W + b with W stored (in x out).
inline Tensor linear(GradTape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_bias(tape, matmul(tape, x, weight), bias);
}

/// Row-wise log of the temperature softmax of a (B x K) matrix.
///
/// When `excluded` is non-empty it holds one column per row that is left out
/// of the normalization; that entry's output is 0 and it receives no
/// gradient. This gives the log of the softmax renormalized over the
/// remaining K-1 classes.
inline Tensor log_softmax(GradTape& tape, const Tensor& logits, double tau,
                          std::span<const int> excluded = {}) {
  detail::require_rank(logits, 2, "log_softmax");
  detail::require(tau > 0.0, "log_softmax: temperature must be positive");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  const bool masked = !excluded.empty();
  if (masked) {
    detail::require_labels(excluded, rows, cols, "log_softmax");
    detail::require(cols >= 2, "log_softmax: excluding a class needs at least 2 classes");
  }
  const auto x = logits.values();
  std::vector<double> out(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto skip = masked ? static_cast<std::size_t>(excluded[r]) : cols;
    double peak = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c)
      if (c != skip) peak = std::max(peak, x[r * cols + c] / tau);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c)
      if (c != skip) z += std::exp(x[r * cols + c] / tau - peak);
    const double log_z = peak + std::log(z);
    for (std::size_t c = 0; c < cols; ++c)
      if (c != skip) out[r * cols + c] = x[r * cols + c] / tau - log_z;
  }
  std::vector<int> skip_cols(excluded.begin(), excluded.end());
  auto y = out;
  return tape.record(logits.shape(), std::move(out), {logits},
                     [y = std::move(y), skip_cols = std::move(skip_cols), rows, cols, tau](
                         auto g, auto gin) {
                       if (gin[0].empty()) return;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const auto skip = skip_cols.empty()
                                               ? cols
                                               : static_cast<std::size_t>(skip_cols[r]);
                         double gsum = 0.0;
                         for (std::size_t c = 0; c < cols; ++c)
                           if (c != skip) gsum += g[r * cols + c];
                         for (std::size_t c = 0; c < cols; ++c) {
                           if (c == skip) continue;
                           const double p = std::exp(y[r * cols + c]);
                           gin[0][r * cols + c] += (g[r * cols + c] - p * gsum) / tau;
                         }
                       }
                     });
}

/// Row-wise temperature softmax of a (B x K) matrix.
inline Tensor softmax(GradTape& tape, const Tensor& logits, double tau) {
  GradTape scratch;
  auto logp = log_softmax(scratch, logits.detach(), tau);
  std::vector<double> out(logp.values().begin(), logp.values().end());
  for (double& v : out) v = std::exp(v);
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  auto p = out;
  return tape.record(logits.shape(), std::move(out), {logits},
                     [p = std::move(p), rows, cols, tau](auto g, auto gin) {
                       if (gin[0].empty()) return;
                       for (std::size_t r = 0; r < rows; ++r) {
                         double dot = 0.0;
                         for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * p[r * cols + c];
                         for (std::size_t c = 0; c < cols; ++c)
                           gin[0][r * cols + c] += p[r * cols + c] * (g[r * cols + c] - dot) / tau;
                       }
                     });
}

/// Selects x[b, labels[b]] from a (B x K) matrix; returns shape {B}.
inline Tensor pick(GradTape& tape, const Tensor& x, std::span<const int> labels) {
  detail::require_rank(x, 2, "pick");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  detail::require_labels(labels, rows, cols, "pick");
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = x.values()[r * cols + static_cast<std::size_t>(labels[r])];
  std::vector<int> idx(labels.begin(), labels.end());
  return tape.record(Shape{rows}, std::move(out), {x}, [idx = std::move(idx), cols](auto g, auto gin) {
    if (gin[0].empty()) return;
    for (std::size_t r = 0; r < idx.size(); ++r) gin[0][r * cols + static_cast<std::size_t>(idx[r])] += g[r];
  });
}

/// Selects token `index` from a (B x T x D) tensor; returns (B x D).
inline Tensor take_token(GradTape& tape, const Tensor& x, std::size_t index) {
  detail::require_rank(x, 3, "take_token");
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  detail::require(index < t, "take_token: index out of range");
  std::vector<double> out(b * d);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x.values()[(i * t + index) * d + j];
  return tape.record(Shape{b, d}, std::move(out), {x}, [b, t, d, index](auto g, auto gin) {
    if (gin[0].empty()) return;
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < d; ++j) gin[0][(i * t + index) * d + j] += g[i * d + j];
  });
}

/// Reshapes a token sequence (B x T x D) into a feature map (B x D x S x S)
/// with S*S tokens laid out row-major. With drop_first the leading pooled
/// token is discarded first, so T-1 must be a perfect square.
inline Tensor tokens_to_grid(GradTape& tape, const Tensor& x, bool drop_first) {
  detail::require_rank(x, 3, "tokens_to_grid");
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
  const std::size_t offset = drop_first ? 1 : 0;
  detail::require(t > offset, "tokens_to_grid: no tokens left after dropping the pooled token");
  const std::size_t spatial = t - offset;
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(spatial))));
  detail::require(side * side == spatial, "tokens_to_grid: " + std::to_string(spatial) +
                                              " spatial tokens do not form a square grid");
  std::vector<double> out(b * d * spatial);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t s = 0; s < spatial; ++s)
      for (std::size_t c = 0; c < d; ++c)
        out[(i * d + c) * spatial + s] = x.values()[(i * t + s + offset) * d + c];
  return tape.record(Shape{b, d, side, side}, std::move(out), {x},
                     [b, t, d, spatial, offset](auto g, auto gin) {
                       if (gin[0].empty()) return;
                       for (std::size_t i = 0; i < b; ++i)
                         for (std::size_t s = 0; s < spatial; ++s)
                           for (std::size_t c = 0; c < d; ++c)
                             gin[0][(i * t + s + offset) * d + c] += g[(i * d + c) * spatial + s];
                     });
}

/// Global average over the spatial axes: (B x C x H x W) -> (B x C).
inline Tensor spatial_mean(GradTape& tape, const Tensor& x) {
  detail::require_rank(x, 4, "spatial_mean");
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> out(b * c, 0.0);
  for (std::size_t i = 0; i < b * c; ++i) {
    for (std::size_t s = 0; s < hw; ++s) out[i] += x.values()[i * hw + s];
    out[i] /= static_cast<double>(hw);
  }
  return tape.record(Shape{b, c}, std::move(out), {x}, [b, c, hw](auto g, auto gin) {
    if (gin[0].empty()) return;
    for (std::size_t i = 0; i < b * c; ++i)
      for (std::size_t s = 0; s < hw; ++s) gin[0][i * hw + s] += g[i] / static_cast<double>(hw);
  });
}

/// Stride-1 convolution with zero "same" padding.
/// x: (B x C x H x W), weight: (O x C x k x k) with k odd, bias: (O).
inline Tensor conv2d_same(GradTape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::require_rank(x, 4, "conv2d_same");
  detail::require_rank(weight, 4, "conv2d_same");
  const std::size_t nb = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  detail::require(weight.dim(1) == cin, "conv2d_same: weight expects " + std::to_string(weight.dim(1)) +
                                            " input channels, got " + std::to_string(cin));
  detail::require(weight.dim(3) == k && k % 2 == 1, "conv2d_same: kernel must be square and odd");
  detail::require(bias.size() == cout, "conv2d_same: bias length must equal output channels");
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto hh = static_cast<std::ptrdiff_t>(h), ww = static_cast<std::ptrdiff_t>(w);

  // Visits every (output, input, weight) triple that contributes.
  auto for_each_tap = [=](auto&& visit) {
    for (std::size_t n = 0; n < nb; ++n)
      for (std::size_t o = 0; o < cout; ++o)
        for (std::ptrdiff_t i = 0; i < hh; ++i)
          for (std::ptrdiff_t j = 0; j < ww; ++j) {
            const std::size_t oi = ((n * cout + o) * h + static_cast<std::size_t>(i)) * w + static_cast<std::size_t>(j);
            for (std::size_t c = 0; c < cin; ++c)
              for (std::ptrdiff_t di = 0; di < static_cast<std::ptrdiff_t>(k); ++di) {
                const std::ptrdiff_t yi = i + di - pad;
                if (yi < 0 || yi >= hh) continue;
                for (std::ptrdiff_t dj = 0; dj < static_cast<std::ptrdiff_t>(k); ++dj) {
                  const std::ptrdiff_t xj = j + dj - pad;
                  if (xj < 0 || xj >= ww) continue;
                  const std::size_t xi = ((n * cin + c) * h + static_cast<std::size_t>(yi)) * w + static_cast<std::size_t>(xj);
                  const std::size_t wi = ((o * cin + c) * k + static_cast<std::size_t>(di)) * k + static_cast<std::size_t>(dj);
                  visit(oi, xi, wi);
                }
              }
          }
  };

  std::vector<double> out(nb * cout * h * w);
  for (std::size_t n = 0; n < nb; ++n)
    for (std::size_t o = 0; o < cout; ++o)
      std::fill_n(out.begin() + static_cast<std::ptrdiff_t>((n * cout + o) * h * w), h * w, bias.values()[o]);
  const auto xv = x.values();
  const auto wv = weight.values();
  for_each_tap([&](std::size_t oi, std::size_t xi, std::size_t wi) { out[oi] += wv[wi] * xv[xi]; });

  return tape.record(Shape{nb, cout, h, w}, std::move(out), {x, weight, bias},
                     [x, weight, for_each_tap, nb, cout, h, w](auto g, auto gin) {
                       const auto xv = x.values();
                       const auto wv = weight.values();
                       for_each_tap([&](std::size_t oi, std::size_t xi, std::size_t wi) {
                         if (!gin[0].empty()) gin[0][xi] += g[oi] * wv[wi];
                         if (!gin[1].empty()) gin[1][wi] += g[oi] * xv[xi];
                       });
                       if (!gin[2].empty())
                         for (std::size_t n = 0; n < nb; ++n)
                           for (std::size_t o = 0; o < cout; ++o)
                             for (std::size_t s = 0; s < h * w; ++s) gin[2][o] += g[(n * cout + o) * h * w + s];
                     });
}

// ---------------------------------------------------------------------------
// Verification oracle.
// ---------------------------------------------------------------------------

/// Central-difference gradient of a scalar function at x.
inline Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                     double eps) {
  std::vector<double> grad(x.size());
  Tensor probe = x.detach();
  auto v = probe.mutable_values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double orig = v[i];
    v[i] = orig + eps;
    const double up = f(probe);
    v[i] = orig - eps;
    const double down = f(probe);
    v[i] = orig;
    grad[i] = (up - down) / (2.0 * eps);
  }
  return Tensor(x.shape(), std::move(grad));
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor). The floor keeps coordinates
/// whose true gradient is (near) zero from dominating through round-off.
inline double max_relative_error(std::span<const double> a, std::span<const double> b,
                                 double floor = 1e-6) {
  detail::require(a.size() == b.size(), "max_relative_error: length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

}  // namespace distildoc
