#pragma once

// Conditional flow matching objective, AdamW, and the training loop.

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "kinflow/error.hpp"
#include "kinflow/mlp.hpp"
#include "kinflow/rng.hpp"
#include "kinflow/synthdata.hpp"

namespace kinflow {

/// Largest training time; keeps (1 - t) away from zero for the (x1 - x_t)/(1 - t) form.
inline constexpr double kMaxTrainTime = 1.0 - 1e-6;

/// One draw of (t, z, eps) per sample with x_t = t z + (1 - t) eps and target z - eps.
struct CfmBatch {
  std::vector<double> t;
  std::vector<Point2> data;
  std::vector<Point2> noise;

  std::size_t size() const { return t.size(); }

  Point2 bridge(std::size_t i) const {
    return {t[i] * data[i].x + (1.0 - t[i]) * noise[i].x, t[i] * data[i].y + (1.0 - t[i]) * noise[i].y};
  }
  Point2 target(std::size_t i) const { return {data[i].x - noise[i].x, data[i].y - noise[i].y}; }
};

inline CfmBatch sample_cfm_batch(std::span<const Point2> data, std::size_t batch, Rng& rng) {
  require(!data.empty(), "training data is empty");
  require(batch >= 1, "batch size must be at least 1");
  CfmBatch b;
  b.t.reserve(batch);
  b.data.reserve(batch);
  b.noise.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    b.t.push_back(rng.uniform() * kMaxTrainTime);
    b.data.push_back(data[rng.index(data.size())]);
    const double ex = rng.normal();
    const double ey = rng.normal();
    b.noise.push_back({ex, ey});
  }
  return b;
}

struct LossAndGrad {
  double loss = 0.0;
  MlpParams grad;
};

/// Mean over the batch of |v(x_t, t) - (z - eps)|^2 and its parameter gradient.
inline LossAndGrad cfm_loss_grad(const MlpParams& p, const CfmBatch& b) {
  require(b.size() >= 1, "empty batch");
  std::vector<Point2> xt(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) xt[i] = b.bridge(i);
  ForwardCache cache;
  const Eigen::MatrixXd out = forward_batch(p, make_inputs(xt, b.t), &cache);
  Eigen::MatrixXd resid(2, static_cast<Eigen::Index>(b.size()));
  for (std::size_t i = 0; i < b.size(); ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    const Point2 tgt = b.target(i);
    resid(0, c) = out(0, c) - tgt.x;
    resid(1, c) = out(1, c) - tgt.y;
  }
  const double inv_n = 1.0 / static_cast<double>(b.size());
  LossAndGrad r;
  r.loss = resid.squaredNorm() * inv_n;
  r.grad = backward_batch(p, cache, (2.0 * inv_n) * resid);
  return r;
}

/// Loss only; no gradient.
inline double cfm_loss(const MlpParams& p, const CfmBatch& b) {
  require(b.size() >= 1, "empty batch");
  std::vector<Point2> xt(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) xt[i] = b.bridge(i);
  const Eigen::MatrixXd out = forward_batch(p, make_inputs(xt, b.t));
  double sum = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    const Point2 tgt = b.target(i);
    sum += std::pow(out(0, c) - tgt.x, 2) + std::pow(out(1, c) - tgt.y, 2);
  }
  return sum / static_cast<double>(b.size());
}

inline LossAndGrad cfm_loss_grad(const MlpParams& p, const LabeledDataset& data, std::size_t batch, Rng& rng) {
  require(data.size() > 0, "training data is empty");
  return cfm_loss_grad(p, sample_cfm_batch(data.points, batch, rng));
}

/// Per-sample losses against both target forms: z - eps, and (z - x_t) / (1 - t).
inline std::vector<std::pair<double, double>> cfm_loss_forms(const MlpParams& p, const CfmBatch& b) {
  std::vector<Point2> xt(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) xt[i] = b.bridge(i);
  const Eigen::MatrixXd out = forward_batch(p, make_inputs(xt, b.t));
  std::vector<std::pair<double, double>> losses;
  losses.reserve(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    const Point2 a = b.target(i);
    const double s = 1.0 - b.t[i];
    const Point2 alt{(b.data[i].x - xt[i].x) / s, (b.data[i].y - xt[i].y) / s};
    const double la = std::pow(out(0, c) - a.x, 2) + std::pow(out(1, c) - a.y, 2);
    const double lb = std::pow(out(0, c) - alt.x, 2) + std::pow(out(1, c) - alt.y, 2);
    losses.emplace_back(la, lb);
  }
  return losses;
}

struct TrainConfig {
  double learning_rate = 3e-4;
  double weight_decay = 1e-4;
  std::size_t batch_size = 256;
  std::size_t iterations = 50000;
  std::uint64_t seed = 1;
  std::vector<std::size_t> hidden = default_hidden_dims();

  void validate() const {
    require(learning_rate >= 0.0 && std::isfinite(learning_rate), "learning rate must be non-negative");
    require(weight_decay >= 0.0 && std::isfinite(weight_decay), "weight decay must be non-negative");
    require(batch_size >= 1, "batch size must be positive");
    require(iterations >= 1, "iteration count must be positive");
    require(!hidden.empty(), "network needs at least one hidden layer");
    for (auto h : hidden) require(h >= 1, "hidden widths must be positive");
  }
};

/// AdamW with decoupled weight decay (p <- p - lr * wd * p before the Adam step).
class AdamW {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamW(const MlpParams& like, double lr, double wd)
      : lr_(lr), wd_(wd), m_(zeros_like(like)), v_(zeros_like(like)) {}

  std::size_t steps() const { return step_; }

  void step(MlpParams& p, const MlpParams& g) {
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      update(p.layers[l].weight, g.layers[l].weight, m_.layers[l].weight, v_.layers[l].weight, bc1, bc2);
      update(p.layers[l].bias, g.layers[l].bias, m_.layers[l].bias, v_.layers[l].bias, bc1, bc2);
    }
  }

 private:
  static MlpParams zeros_like(const MlpParams& p) {
    MlpParams z = p;
    for (auto& l : z.layers) {
      l.weight.setZero();
      l.bias.setZero();
    }
    return z;
  }

  template <typename M>
  void update(M& p, const M& g, M& m, M& v, double bc1, double bc2) const {
    if (lr_ == 0.0) {
      m = beta1 * m + (1.0 - beta1) * g;
      v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
      return;
    }
    if (wd_ != 0.0) p *= (1.0 - lr_ * wd_);
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
    p.array() -= lr_ * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
  }

  double lr_;
  double wd_;
  MlpParams m_;
  MlpParams v_;
  std::size_t step_ = 0;
};

struct TrainResult {
  MlpParams params;
  std::vector<double> loss_curve;  // one entry per iteration
};

using TrainProgress = std::function<void(std::size_t iteration, double loss)>;

/// Deterministic given (data, cfg): init from stream 0 of the seed, batches from stream 1.
inline TrainResult train(const LabeledDataset& data, const TrainConfig& cfg, const TrainProgress& progress = {}) {
  cfg.validate();
  require(data.size() > 0, "training data is empty");
  TrainResult r;
  r.params = init_params(cfg.seed, cfg.hidden);
  r.loss_curve.reserve(cfg.iterations);
  AdamW opt(r.params, cfg.learning_rate, cfg.weight_decay);
  Rng rng = Rng::stream(cfg.seed, 1);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const CfmBatch batch = sample_cfm_batch(data.points, cfg.batch_size, rng);
    LossAndGrad lg = cfm_loss_grad(r.params, batch);
    if (!std::isfinite(lg.loss)) throw TrainingDiverged(it, lg.loss);
    opt.step(r.params, lg.grad);
    r.loss_curve.push_back(lg.loss);
    if (progress) progress(it, lg.loss);
  }
  return r;
}

/// Mean of a window of the loss curve; used to compare early and late training.
inline double smoothed_loss(std::span<const double> curve, std::size_t begin, std::size_t window) {
  require(begin + window <= curve.size() && window > 0, "loss window out of range");
  double s = 0.0;
  for (std::size_t i = begin; i < begin + window; ++i) s += curve[i];
  return s / static_cast<double>(window);
}

// ---------------------------------------------------------------------------
// Checkpoint: JSON, layer name -> shape -> row-major float64 payload.

inline nlohmann::json params_to_json(const MlpParams& p) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& layer = p.layers[l];
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(layer.weight.size()));
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) w.push_back(layer.weight(r, c));
    std::vector<double> b(layer.bias.data(), layer.bias.data() + layer.bias.size());
    layers.push_back({{"name", "dense" + std::to_string(l)},
                      {"weight", {{"shape", {layer.weight.rows(), layer.weight.cols()}}, {"data", w}}},
                      {"bias", {{"shape", {layer.bias.size()}}, {"data", b}}}});
  }
  return {{"format", "kinflow-mlp"},
          {"version", 1},
          {"activation", "silu"},
          {"time_encoding", "sincos-2^j-pi-16"},
          {"layers", layers}};
}

inline MlpParams params_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "kinflow-mlp") throw InvalidArgument("not a kinflow-mlp checkpoint");
  MlpParams p;
  for (const auto& lj : j.at("layers")) {
    const auto ws = lj.at("weight").at("shape").get<std::vector<Eigen::Index>>();
    const auto wd = lj.at("weight").at("data").get<std::vector<double>>();
    const auto bd = lj.at("bias").at("data").get<std::vector<double>>();
    require(ws.size() == 2 && static_cast<std::size_t>(ws[0] * ws[1]) == wd.size(), "bad weight shape");
    require(static_cast<Eigen::Index>(bd.size()) == ws[0], "bias length does not match weight rows");
    DenseLayer layer{Eigen::MatrixXd(ws[0], ws[1]), Eigen::VectorXd(ws[0])};
    for (Eigen::Index r = 0; r < ws[0]; ++r)
      for (Eigen::Index c = 0; c < ws[1]; ++c) layer.weight(r, c) = wd[static_cast<std::size_t>(r * ws[1] + c)];
    for (Eigen::Index r = 0; r < ws[0]; ++r) layer.bias(r) = bd[static_cast<std::size_t>(r)];
    if (!p.layers.empty())
      require(p.layers.back().weight.rows() == layer.weight.cols(), "layer shapes do not chain");
    p.layers.push_back(std::move(layer));
  }
  require(!p.layers.empty(), "checkpoint has no layers");
  require(p.layers.front().weight.cols() == static_cast<Eigen::Index>(kInputDim), "checkpoint input width");
  require(p.layers.back().weight.rows() == static_cast<Eigen::Index>(kStateDim), "checkpoint output width");
  return p;
}

inline void save_checkpoint(const std::string& path, const MlpParams& p) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << params_to_json(p).dump() << '\n';
}

inline MlpParams load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InvalidArgument("cannot open checkpoint " + path);
  return params_from_json(nlohmann::json::parse(is));
}

inline void write_loss_curve_csv(const std::string& path, std::span<const double> curve) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << "iter,loss\n";
  for (std::size_t i = 0; i < curve.size(); ++i) os << i << ',' << format_double(curve[i]) << '\n';
}

}  // namespace kinflow
