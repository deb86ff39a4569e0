#include "stagesum/adam.hpp"

#include <cmath>

#include "stagesum/errors.hpp"

namespace stagesum {

Adam::Adam(AdamOptions options) : options_(options) {
  if (!(options_.lr > 0.0)) throw ConfigError("Adam learning rate must be positive");
}

void Adam::step(ParamStore& params) {
  for (const auto& [name, tensor] : params) {
    if (!tensor.has_grad()) throw TrainingError("no gradient for parameter '" + name + "'");
  }
  ++step_;
  const double t = static_cast<double>(step_);
  const double correction1 = 1.0 - std::pow(options_.beta1, t);
  const double correction2 = 1.0 - std::pow(options_.beta2, t);
  for (auto& [name, tensor] : params) {
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(tensor.size(), 0.0);
      v.assign(tensor.size(), 0.0);
    } else if (m.size() != tensor.size()) {
      throw TrainingError("moment buffer of '" + name + "' no longer matches its parameter");
    }
    auto values = tensor.mutable_values();
    const auto grad = tensor.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad[i];
      m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g;
      v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g * g;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      values[i] -= options_.lr * m_hat / (std::sqrt(v_hat) + options_.eps);
    }
  }
}

const std::vector<double>& Adam::first_moment(const std::string& name) const {
  const auto it = m_.find(name);
  if (it == m_.end()) throw TrainingError("no Adam state for '" + name + "'");
  return it->second;
}

const std::vector<double>& Adam::second_moment(const std::string& name) const {
  const auto it = v_.find(name);
  if (it == v_.end()) throw TrainingError("no Adam state for '" + name + "'");
  return it->second;
}

}  // namespace stagesum
