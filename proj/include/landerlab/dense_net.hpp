#pragma once

// Small fully connected networks with tanh hidden layers, exact gradients
// and Adam. All arithmetic is double precision.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "landerlab/common.hpp"

namespace landerlab {

enum class OutputHead { linear, sigmoid, softmax };

inline std::string_view to_string(OutputHead h) {
  switch (h) {
    case OutputHead::linear: return "linear";
    case OutputHead::sigmoid: return "sigmoid";
    case OutputHead::softmax: return "softmax";
  }
  return "linear";
}

inline OutputHead head_from_string(std::string_view s) {
  if (s == "linear") return OutputHead::linear;
  if (s == "sigmoid") return OutputHead::sigmoid;
  if (s == "softmax") return OutputHead::softmax;
  throw Error(ErrorCode::corrupt_data, "unknown output head: " + std::string(s));
}

struct NetSpec {
  std::vector<int> layer_sizes;
  OutputHead head = OutputHead::linear;

  int input_size() const { return layer_sizes.front(); }
  int output_size() const { return layer_sizes.back(); }
  int num_layers() const { return static_cast<int>(layer_sizes.size()) - 1; }

  void validate() const {
    if (layer_sizes.size() < 2)
      throw Error(ErrorCode::invalid_argument, "net spec needs at least 2 layers");
    for (int s : layer_sizes)
      if (s < 1) throw Error(ErrorCode::invalid_argument, "layer sizes must be >= 1");
    if (head == OutputHead::sigmoid && output_size() != 1)
      throw Error(ErrorCode::invalid_argument, "sigmoid head expects a single output");
  }

  // Per layer: weight block (out x in, column-major) followed by the bias.
  std::size_t weight_offset(int layer) const {
    std::size_t off = 0;
    for (int l = 0; l < layer; ++l)
      off += static_cast<std::size_t>(layer_sizes[l + 1]) * (layer_sizes[l] + 1);
    return off;
  }
  std::size_t bias_offset(int layer) const {
    return weight_offset(layer) + static_cast<std::size_t>(layer_sizes[layer + 1]) * layer_sizes[layer];
  }
  std::size_t num_params() const { return weight_offset(num_layers()); }

  friend bool operator==(const NetSpec&, const NetSpec&) = default;
};

struct Params {
  NetSpec spec;
  Eigen::VectorXd values;
  Eigen::VectorXd adam_m;
  Eigen::VectorXd adam_v;

  bool operator==(const Params& o) const {
    return spec == o.spec && values == o.values && adam_m == o.adam_m && adam_v == o.adam_v;
  }
};

inline Params init_params(const NetSpec& spec, std::uint64_t seed) {
  spec.validate();
  Params p{spec, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(spec.num_params())),
           Eigen::VectorXd::Zero(static_cast<Eigen::Index>(spec.num_params())),
           Eigen::VectorXd::Zero(static_cast<Eigen::Index>(spec.num_params()))};
  std::mt19937_64 rng(mix64(seed));
  for (int l = 0; l < spec.num_layers(); ++l) {
    const int fan_in = spec.layer_sizes[l], fan_out = spec.layer_sizes[l + 1];
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    const std::size_t off = spec.weight_offset(l);
    for (std::size_t i = 0; i < static_cast<std::size_t>(fan_in) * fan_out; ++i)
      p.values[static_cast<Eigen::Index>(off + i)] = uniform(rng, -bound, bound);
  }
  return p;
}

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using ConstMatMap = Eigen::Map<const Matrix>;
using ConstVecMap = Eigen::Map<const Vector>;

namespace detail {

inline ConstMatMap weights(const Params& p, int l) {
  return ConstMatMap(p.values.data() + p.spec.weight_offset(l), p.spec.layer_sizes[l + 1],
                     p.spec.layer_sizes[l]);
}
inline ConstVecMap bias(const Params& p, int l) {
  return ConstVecMap(p.values.data() + p.spec.bias_offset(l), p.spec.layer_sizes[l + 1]);
}

inline void apply_head(OutputHead head, Matrix& z) {
  switch (head) {
    case OutputHead::linear:
      break;
    case OutputHead::sigmoid:
      z = z.unaryExpr([](double v) {
        return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      });
      break;
    case OutputHead::softmax:
      for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const double mx = z.row(r).maxCoeff();
        z.row(r) = (z.row(r).array() - mx).exp();
        z.row(r) /= z.row(r).sum();
      }
      break;
  }
}

}  // namespace detail

// Activations of every layer for one batch (rows are samples). `logits` is
// the last pre-head layer; `output` has the head applied.
struct ForwardTrace {
  std::vector<Matrix> activations;  // activations[0] = input
  Matrix logits;
  Matrix output;
};

inline ForwardTrace forward_trace(const Params& p, const Matrix& input) {
  if (input.cols() != p.spec.input_size())
    throw Error(ErrorCode::invalid_argument,
                "input width " + std::to_string(input.cols()) + " != " +
                    std::to_string(p.spec.input_size()));
  ForwardTrace t;
  t.activations.reserve(p.spec.num_layers());
  t.activations.push_back(input);
  const int L = p.spec.num_layers();
  for (int l = 0; l < L; ++l) {
    Matrix z = t.activations.back() * detail::weights(p, l).transpose();
    z.rowwise() += detail::bias(p, l).transpose();
    if (l + 1 < L) {
      t.activations.push_back(z.array().tanh().matrix());
    } else {
      t.logits = std::move(z);
    }
  }
  t.output = t.logits;
  detail::apply_head(p.spec.head, t.output);
  return t;
}

inline Matrix forward(const Params& p, const Matrix& input) {
  return forward_trace(p, input).output;
}

inline Matrix logits(const Params& p, const Matrix& input) {
  return forward_trace(p, input).logits;
}

// Backpropagates d(loss)/d(logits) through the stack. No averaging is done
// here; callers fold the batch mean into the upstream gradient.
inline Vector backprop(const Params& p, const ForwardTrace& t, const Matrix& dlogits) {
  Vector grad = Vector::Zero(p.values.size());
  Matrix delta = dlogits;
  for (int l = p.spec.num_layers() - 1; l >= 0; --l) {
    const Matrix& a = t.activations[static_cast<std::size_t>(l)];
    Eigen::Map<Matrix> gw(grad.data() + p.spec.weight_offset(l), p.spec.layer_sizes[l + 1],
                          p.spec.layer_sizes[l]);
    Eigen::Map<Vector> gb(grad.data() + p.spec.bias_offset(l), p.spec.layer_sizes[l + 1]);
    gw.noalias() = delta.transpose() * a;
    gb = delta.colwise().sum().transpose();
    if (l > 0) {
      Matrix back = delta * detail::weights(p, l);
      delta = back.array() * (1.0 - a.array().square());
    }
  }
  return grad;
}

enum class LossKind { bce, softmax_nll, mse, custom };

// Loss description for backward(). For bce, `targets` holds 0/1 labels in
// column 0; for softmax_nll, class indices in column 0; for mse, regression
// targets with the output's shape; for custom, `upstream` is d(loss)/d(logits)
// and is used as-is. Optional per-sample `weights` apply to bce/nll/mse and
// are normalized to sum to one (uniform 1/n when empty).
struct Loss {
  LossKind kind = LossKind::mse;
  Matrix targets;
  Vector weights;
  Matrix upstream;
};

struct LossAndGrad {
  double loss = 0;
  Vector grad;
};

inline LossAndGrad loss_and_grad(const Params& p, const Matrix& input, const Loss& loss) {
  if (!input.allFinite()) throw Error(ErrorCode::invalid_argument, "non-finite network input");
  const ForwardTrace t = forward_trace(p, input);
  const Eigen::Index n = input.rows();
  Vector w = loss.weights.size() == n ? Vector(loss.weights / loss.weights.sum())
                                      : Vector(Vector::Constant(n, 1.0 / static_cast<double>(n)));
  Matrix dz(t.logits.rows(), t.logits.cols());
  double value = 0;
  switch (loss.kind) {
    case LossKind::bce: {
      if (p.spec.head != OutputHead::sigmoid)
        throw Error(ErrorCode::invalid_argument, "bce loss requires a sigmoid head");
      for (Eigen::Index i = 0; i < n; ++i) {
        const double z = t.logits(i, 0), y = loss.targets(i, 0);
        // log(1 + exp(z)) - y z, evaluated stably
        const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
        value += w[i] * (softplus - y * z);
        dz(i, 0) = w[i] * (t.output(i, 0) - y);
      }
      break;
    }
    case LossKind::softmax_nll: {
      if (p.spec.head != OutputHead::softmax)
        throw Error(ErrorCode::invalid_argument, "softmax_nll loss requires a softmax head");
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto k = static_cast<Eigen::Index>(loss.targets(i, 0));
        value -= w[i] * std::log(std::max(t.output(i, k), 1e-300));
        dz.row(i) = w[i] * t.output.row(i);
        dz(i, k) -= w[i];
      }
      break;
    }
    case LossKind::mse: {
      if (p.spec.head != OutputHead::linear)
        throw Error(ErrorCode::invalid_argument, "mse loss requires a linear head");
      const Matrix diff = t.output - loss.targets;
      for (Eigen::Index i = 0; i < n; ++i) {
        value += w[i] * diff.row(i).squaredNorm();
        dz.row(i) = 2.0 * w[i] * diff.row(i);
      }
      break;
    }
    case LossKind::custom: {
      if (loss.upstream.rows() != t.logits.rows() || loss.upstream.cols() != t.logits.cols())
        throw Error(ErrorCode::invalid_argument, "upstream gradient shape mismatch");
      if (!loss.upstream.allFinite())
        throw Error(ErrorCode::invalid_argument, "non-finite upstream gradient");
      dz = loss.upstream;
      value = (loss.upstream.array() * t.logits.array()).sum();
      break;
    }
  }
  return {value, backprop(p, t, dz)};
}

inline Vector backward(const Params& p, const Matrix& input, const Loss& loss) {
  return loss_and_grad(p, input, loss).grad;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// t is the 1-based step index used for bias correction.
inline Params adam_step(Params p, const Vector& g, const AdamConfig& cfg, long t) {
  if (g.size() != p.values.size())
    throw Error(ErrorCode::invalid_argument, "gradient length mismatch");
  p.adam_m = cfg.beta1 * p.adam_m + (1.0 - cfg.beta1) * g;
  p.adam_v = cfg.beta2 * p.adam_v + (1.0 - cfg.beta2) * g.cwiseAbs2();
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  p.values.array() -=
      cfg.lr * (p.adam_m.array() / c1) / ((p.adam_v.array() / c2).sqrt() + cfg.eps);
  return p;
}

// Global-norm clipping helper used by the trainers.
inline void clip_norm(Vector& g, double max_norm) {
  const double n = g.norm();
  if (max_norm > 0 && n > max_norm) g *= max_norm / n;
}

inline Matrix to_matrix(const std::vector<Observation>& rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(kObsDim));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < kObsDim; ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return m;
}

inline Eigen::RowVectorXd to_row(const Observation& o) {
  return Eigen::Map<const Eigen::RowVectorXd>(o.data(), static_cast<Eigen::Index>(kObsDim));
}

// Frozen per-feature affine normalization applied before a network.
struct Normalizer {
  Vector mean = Vector::Zero(kObsDim);
  Vector scale = Vector::Ones(kObsDim);

  // min_scale keeps rarely varying features (contact flags in airborne data)
  // from being blown up far outside the training range
  static Normalizer fit(const std::vector<Observation>& data, double min_scale = 0.0) {
    Normalizer n;
    if (data.empty()) return n;
    const Matrix m = to_matrix(data);
    n.mean = m.colwise().mean().transpose();
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double var = (m.col(j).array() - n.mean[j]).square().mean();
      n.scale[j] = std::sqrt(var) > 1e-6 ? std::max(std::sqrt(var), min_scale) : 1.0;
    }
    return n;
  }

  Matrix apply(const Matrix& m) const {
    return ((m.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array()).matrix();
  }

  bool operator==(const Normalizer& o) const { return mean == o.mean && scale == o.scale; }
};

}  // namespace landerlab
