#pragma once

// Per-stage autoencoder over prompt-end features, reconstruction-error
// scoring, nearest-rank threshold calibration and the gating rule.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "autograd.hpp"
#include "optim.hpp"
#include "rng.hpp"

namespace molem {

struct AutoencoderConfig {
  std::size_t input = 64;
  std::size_t hidden1 = 32;
  std::size_t hidden2 = 16;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double percentile = 0.95;
};

/// input -> h1 -> h2 -> h1 -> input, ReLU on every hidden layer, linear output.
class Autoencoder {
 public:
  Autoencoder() = default;

  Autoencoder(const std::string& name, const AutoencoderConfig& cfg, Rng& rng) {
    const std::size_t dims[] = {cfg.input, cfg.hidden1, cfg.hidden2, cfg.hidden1, cfg.input};
    for (std::size_t l = 0; l < 4; ++l) {
      Tensor w = Tensor::matrix(dims[l], dims[l + 1]);
      for (double& x : w.data) x = rng.truncated_normal(0.02);
      const std::string p = name + "/ae/l" + std::to_string(l);
      weights_.emplace_back(p + "/w", std::move(w));
      biases_.emplace_back(p + "/b", Tensor::matrix(1, dims[l + 1]));
    }
  }

  Autoencoder(const Autoencoder&) = delete;
  Autoencoder& operator=(const Autoencoder&) = delete;
  Autoencoder(Autoencoder&&) = default;
  Autoencoder& operator=(Autoencoder&&) = default;

  bool empty() const { return weights_.empty(); }
  std::size_t input_dim() const { return weights_.front().value.rows(); }
  std::size_t output_dim() const { return weights_.back().value.cols(); }

  Var forward(Tape& t, Var x) {
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      x = add_row(matmul(x, t.param(weights_[l])), t.param(biases_[l]));
      if (l + 1 < weights_.size()) x = relu(x);
    }
    return x;
  }

  std::vector<double> reconstruct(std::span<const double> h) {
    require(!empty(), "autoencoder is not initialized");
    require(h.size() == input_dim(), "feature width does not match the autoencoder");
    Tape t(false);
    return forward(t, t.constant(Tensor({1, h.size()}, std::vector<double>(h.begin(), h.end())))).value().data;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      out.push_back(&weights_[l]);
      out.push_back(&biases_[l]);
    }
    return out;
  }

  void freeze() {
    for (Parameter* p : parameters()) p->frozen = true;
  }

 private:
  std::vector<Parameter> weights_;
  std::vector<Parameter> biases_;
};

/// Squared L2 norm of the reconstruction residual.
inline double squared_error(std::span<const double> reconstruction, std::span<const double> h) {
  require(reconstruction.size() == h.size(), "reconstruction width mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double d = reconstruction[i] - h[i];
    s += d * d;
  }
  return s;
}

inline double recon_error(Autoencoder& ae, std::span<const double> h) { return squared_error(ae.reconstruct(h), h); }

struct AeTrainLog {
  std::vector<double> epoch_loss;  // mean per-feature squared error over each epoch
};

/// Adam on the mean squared reconstruction error of each minibatch.
inline AeTrainLog train_ae(Autoencoder& ae, const std::vector<std::vector<double>>& features,
                           const AutoencoderConfig& cfg, Rng& rng) {
  require(features.size() >= 10, "autoencoder training needs at least 10 features");
  const std::size_t d = ae.input_dim();
  OptimizerConfig oc;
  oc.kind = OptimizerKind::Adam;
  oc.learning_rate = cfg.learning_rate;
  oc.warmup_ratio = 0.0;
  oc.total_steps = cfg.epochs * ((features.size() + cfg.batch_size - 1) / cfg.batch_size);
  Optimizer opt(oc);
  opt.add_all(ae.parameters());
  std::vector<std::size_t> order(features.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  AeTrainLog log;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
      const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      Tensor x = Tensor::matrix(hi - lo, d);
      for (std::size_t i = lo; i < hi; ++i) {
        require(features[order[i]].size() == d, "feature width does not match the autoencoder");
        std::copy(features[order[i]].begin(), features[order[i]].end(), x.data.begin() + (i - lo) * d);
      }
      opt.zero_grad();
      Tape t;
      Var in = t.constant(x);
      Var loss = scale(sum_squares(sub(ae.forward(t, in), in)), 1.0 / static_cast<double>(hi - lo));
      total += loss.scalar() * static_cast<double>(hi - lo);
      t.backward(loss);
      opt.step();
    }
    log.epoch_loss.push_back(total / static_cast<double>(order.size()));
  }
  for (Parameter* p : ae.parameters()) p->clear_grad();
  return log;
}

/// Nearest-rank percentile: the error at 1-based rank ceil(percentile * N).
inline double nearest_rank(std::vector<double> errors, double percentile) {
  require(!errors.empty(), "nearest_rank of an empty set");
  std::sort(errors.begin(), errors.end());
  auto rank = static_cast<std::size_t>(std::ceil(percentile * static_cast<double>(errors.size()) - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, errors.size());
  return errors[rank - 1];
}

inline double calibrate_threshold(Autoencoder& ae, const std::vector<std::vector<double>>& validation,
                                  double percentile = 0.95) {
  require(validation.size() >= 20, "threshold calibration needs at least 20 validation features");
  std::vector<double> errors;
  errors.reserve(validation.size());
  for (const auto& h : validation) errors.push_back(recon_error(ae, h));
  return nearest_rank(std::move(errors), percentile);
}

enum class GateRule { AcceptedArgmin, GlobalArgmin };

/// Index of the chosen stage (0-based), or nullopt for out-of-distribution.
/// AcceptedArgmin: argmin among stages whose threshold accepts the input.
/// GlobalArgmin: argmin over all stages, then the winner's threshold decides.
/// Ties go to the lower index.
inline std::optional<std::size_t> gate(std::span<const double> errors, std::span<const double> thresholds,
                                       GateRule rule = GateRule::AcceptedArgmin) {
  require(errors.size() == thresholds.size(), "one threshold per stage error is required");
  std::optional<std::size_t> best;
  for (std::size_t s = 0; s < errors.size(); ++s) {
    if (rule == GateRule::AcceptedArgmin && !(errors[s] <= thresholds[s])) continue;
    if (!best || errors[s] < errors[*best]) best = s;
  }
  if (best && rule == GateRule::GlobalArgmin && !(errors[*best] <= thresholds[*best])) return std::nullopt;
  return best;
}

}  // namespace molem
