#include "vitfl/optim.hpp"

#include <cmath>

#include "vitfl/error.hpp"

namespace vitfl {

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::AdamW ? "adamw" : "sgd";
}

OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "adamw") return OptimizerKind::AdamW;
  if (s == "sgd") return OptimizerKind::SgdMomentum;
  throw ConfigError("", "unknown optimizer kind '" + s + "' (expected sgd or adamw)");
}

OptimizerConfig OptimizerConfig::transformer_default() {
  OptimizerConfig c;
  c.kind = OptimizerKind::AdamW;
  c.learning_rate = 1e-5;
  c.weight_decay = 0.05;
  c.momentum = 0.9;
  return c;
}

OptimizerConfig OptimizerConfig::convolutional_default() {
  OptimizerConfig c;
  c.kind = OptimizerKind::SgdMomentum;
  c.learning_rate = 0.03;
  c.weight_decay = 0.0;
  c.momentum = 0.9;
  return c;
}

void OptimizerConfig::validate() const {
  // lr = 0 is accepted so that "no-op training" runs are expressible.
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("optimizer.learning_rate", "must be non-negative");
  if (!(weight_decay >= 0.0)) throw ConfigError("optimizer.weight_decay", "must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optimizer.momentum", "must be in [0,1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optimizer.beta2", "must be in [0,1)");
  if (!(epsilon > 0.0)) throw ConfigError("optimizer.epsilon", "must be positive");
}

Optimizer::Optimizer(OptimizerConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void Optimizer::step(std::span<ParamTensor> params) {
  if (first_.empty()) {
    first_.resize(params.size());
    second_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].kind != ParamKind::Trainable) continue;
      first_[i].assign(params[i].value.numel(), 0.0);
      if (cfg_.kind == OptimizerKind::AdamW) second_[i].assign(params[i].value.numel(), 0.0);
    }
  } else if (first_.size() != params.size()) {
    throw Error("optimizer: parameter set changed between steps");
  }
  for (const auto& p : params) {
    if (p.kind == ParamKind::Trainable && !p.value.has_grad())
      throw Error("optimizer: parameter '" + p.name + "' has no gradient");
  }

  const std::size_t t = step_ + 1;
  const double lr = cfg_.learning_rate, wd = cfg_.weight_decay, mu = cfg_.momentum;
  std::vector<std::vector<double>> new_values(params.size());
  std::vector<std::vector<double>> new_first = first_;
  std::vector<std::vector<double>> new_second = second_;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].kind != ParamKind::Trainable) continue;
    auto w = params[i].value.data();
    auto g = params[i].value.grad();
    auto& v = new_first[i];
    auto& out = new_values[i];
    out.resize(w.size());
    if (cfg_.kind == OptimizerKind::SgdMomentum) {
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = mu * v[j] + g[j];
        out[j] = w[j] - lr * (v[j] + wd * w[j]);
      }
    } else {
      auto& s = new_second[i];
      const double c1 = 1.0 - std::pow(mu, static_cast<double>(t));
      const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t));
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double decayed = w[j] - lr * wd * w[j];
        v[j] = mu * v[j] + (1.0 - mu) * g[j];
        s[j] = cfg_.beta2 * s[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        const double mhat = v[j] / c1;
        const double vhat = s[j] / c2;
        out[j] = decayed - lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
      }
    }
    for (double x : out)
      if (!std::isfinite(x)) throw NumericError("optimizer: non-finite update for '" + params[i].name + "'");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].kind != ParamKind::Trainable) continue;
    auto dst = params[i].value.mutable_data();
    std::copy(new_values[i].begin(), new_values[i].end(), dst.begin());
  }
  first_ = std::move(new_first);
  second_ = std::move(new_second);
  step_ = t;
}

}  // namespace vitfl
