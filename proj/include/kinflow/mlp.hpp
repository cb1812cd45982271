#pragma once

// SiLU MLP velocity network v(z, t) with a sinusoidal time embedding.
// Input is [z (2), embed(t) (16)]; hidden widths default to 128-256-256-128.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "kinflow/error.hpp"
#include "kinflow/rng.hpp"
#include "kinflow/synthdata.hpp"

namespace kinflow {

inline constexpr std::size_t kStateDim = 2;
inline constexpr std::size_t kTimeFeatures = 16;
inline constexpr std::size_t kInputDim = kStateDim + kTimeFeatures;

/// [sin(w_0 t), cos(w_0 t), ..., sin(w_7 t), cos(w_7 t)] with w_j = 2^j pi.
inline std::array<double, kTimeFeatures> time_encoding(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw InvalidArgument("time must lie in [0, 1]");
  std::array<double, kTimeFeatures> out{};
  double w = std::numbers::pi;
  for (std::size_t j = 0; j < kTimeFeatures / 2; ++j, w *= 2.0) {
    out[2 * j] = std::sin(w * t);
    out[2 * j + 1] = std::cos(w * t);
  }
  return out;
}

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out
};

struct MlpParams {
  std::vector<DenseLayer> layers;

  std::vector<std::size_t> dims() const {
    std::vector<std::size_t> d;
    if (layers.empty()) return d;
    d.push_back(static_cast<std::size_t>(layers.front().weight.cols()));
    for (const auto& l : layers) d.push_back(static_cast<std::size_t>(l.weight.rows()));
    return d;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  bool all_finite() const {
    for (const auto& l : layers)
      if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
    return true;
  }
};

inline const std::vector<std::size_t>& default_hidden_dims() {
  static const std::vector<std::size_t> dims{128, 256, 256, 128};
  return dims;
}

/// Zero-filled parameters with the given hidden widths.
inline MlpParams zero_params(std::span<const std::size_t> hidden = default_hidden_dims()) {
  MlpParams p;
  std::size_t in = kInputDim;
  auto add = [&](std::size_t out) {
    p.layers.push_back({Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in)),
                        Eigen::VectorXd::Zero(static_cast<Eigen::Index>(out))});
    in = out;
  };
  for (auto h : hidden) add(h);
  add(kStateDim);
  return p;
}

/// Per-layer uniform init on [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
inline MlpParams init_params(std::uint64_t seed, std::span<const std::size_t> hidden = default_hidden_dims()) {
  MlpParams p = zero_params(hidden);
  Rng rng = Rng::stream(seed, 0);
  for (auto& l : p.layers) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.weight.cols()));
    // Row-major fill order so the draw sequence does not depend on Eigen storage.
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = rng.uniform(-bound, bound);
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias(r) = rng.uniform(-bound, bound);
  }
  return p;
}

namespace detail {

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace detail

/// Network inputs for a batch: one column per sample.
inline Eigen::MatrixXd make_inputs(std::span<const Point2> z, std::span<const double> t) {
  require(z.size() == t.size(), "state/time batch size mismatch");
  Eigen::MatrixXd in(static_cast<Eigen::Index>(kInputDim), static_cast<Eigen::Index>(z.size()));
  for (std::size_t i = 0; i < z.size(); ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    in(0, c) = z[i].x;
    in(1, c) = z[i].y;
    const auto enc = time_encoding(t[i]);
    for (std::size_t j = 0; j < kTimeFeatures; ++j) in(static_cast<Eigen::Index>(2 + j), c) = enc[j];
  }
  return in;
}

/// Activations retained by a batched forward pass for reverse-mode accumulation.
struct ForwardCache {
  std::vector<Eigen::MatrixXd> pre;   // pre-activation of each layer
  std::vector<Eigen::MatrixXd> post;  // post[0] = input, post[l+1] = activation of layer l
};

inline Eigen::MatrixXd forward_batch(const MlpParams& p, const Eigen::MatrixXd& input,
                                     ForwardCache* cache = nullptr) {
  require(!p.layers.empty(), "network has no layers");
  require(input.rows() == p.layers.front().weight.cols(), "input width does not match network");
  if (cache) {
    cache->pre.clear();
    cache->post.clear();
    cache->post.push_back(input);
  }
  Eigen::MatrixXd h = input;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& layer = p.layers[l];
    Eigen::MatrixXd a = layer.weight * h;
    a.colwise() += layer.bias;
    const bool hidden = l + 1 < p.layers.size();
    if (cache) cache->pre.push_back(a);
    if (hidden) {
      h = a.unaryExpr([](double x) { return x * detail::sigmoid(x); });
    } else {
      h = std::move(a);
    }
    if (cache) cache->post.push_back(h);
  }
  return h;
}

/// Gradient of sum_i <grad_out_i, v_i> with respect to every parameter.
inline MlpParams backward_batch(const MlpParams& p, const ForwardCache& cache,
                                const Eigen::MatrixXd& grad_out) {
  MlpParams g;
  g.layers.resize(p.layers.size());
  Eigen::MatrixXd delta = grad_out;
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    if (l + 1 < p.layers.size()) {
      // d silu(x)/dx = s(x) (1 + x (1 - s(x)))
      const Eigen::MatrixXd& a = cache.pre[l];
      delta.array() *= a.unaryExpr([](double x) {
        const double s = detail::sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
      }).array();
    }
    g.layers[l].weight = delta * cache.post[l].transpose();
    g.layers[l].bias = delta.rowwise().sum();
    if (l > 0) delta = p.layers[l].weight.transpose() * delta;
  }
  return g;
}

inline Point2 forward(const MlpParams& p, Point2 z, double t) {
  if (!std::isfinite(z.x) || !std::isfinite(z.y) || !std::isfinite(t))
    throw InvalidArgument("network input must be finite");
  const Point2 zs[1] = {z};
  const double ts[1] = {t};
  const Eigen::MatrixXd out = forward_batch(p, make_inputs(zs, ts));
  return {out(0, 0), out(1, 0)};
}

}  // namespace kinflow
