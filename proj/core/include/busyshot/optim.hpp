#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "busyshot/errors.hpp"
#include "busyshot/nn.hpp"

namespace busyshot {

struct OptimizerConfig {
  std::string kind = "sgd";  // "sgd" | "adam"
  double learning_rate = 1e-2;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int step_every = 0;    // epochs between learning-rate decays, 0 = constant
  double step_gamma = 0.1;
  double grad_clip = 0.0;  // global L2 norm, 0 = off
};

void validate(const OptimizerConfig& config);

/// SGD with momentum or Adam over a fixed parameter list. Parameters whose
/// `trainable` flag is false are never touched.
template <typename T>
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::vector<nn::Parameter<T>*> params)
      : config_(std::move(config)), params_(std::move(params)) {
    validate(config_);
    for (auto* p : params_) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(config_.kind == "adam" ? p->size() : 0, 0.0);
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  double learning_rate(int epoch) const {
    if (config_.step_every <= 0) return config_.learning_rate;
    return config_.learning_rate * std::pow(config_.step_gamma, epoch / config_.step_every);
  }

  /// Returns the global gradient norm before clipping.
  double step(int epoch) {
    double sq = 0.0;
    for (auto* p : params_) {
      if (!p->trainable) continue;
      for (T g : p->grad) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    const double clip = config_.grad_clip > 0.0 && norm > config_.grad_clip ? config_.grad_clip / norm : 1.0;
    const double lr = learning_rate(epoch);
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto* p = params_[i];
      if (!p->trainable) continue;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < p->size(); ++j) {
        const double g = clip * p->grad[j] + config_.weight_decay * p->value[j];
        if (config_.kind == "adam") {
          m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g;
          v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g * g;
          p->value[j] -= static_cast<T>(lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + config_.eps));
        } else {
          m[j] = config_.momentum * m[j] + g;
          p->value[j] -= static_cast<T>(lr * m[j]);
        }
      }
    }
    return norm;
  }

 private:
  OptimizerConfig config_;
  std::vector<nn::Parameter<T>*> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  long long t_ = 0;
};

inline void validate(const OptimizerConfig& c) {
  if (c.kind != "sgd" && c.kind != "adam") throw ConfigError("optimizer must be sgd or adam, got " + c.kind);
  if (!(c.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (c.momentum < 0.0 || c.momentum >= 1.0) throw ConfigError("momentum must lie in [0,1)");
  if (c.step_every < 0) throw ConfigError("step_every must be nonnegative");
}

}  // namespace busyshot
