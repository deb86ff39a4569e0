#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "stagesum/param_store.hpp"

namespace stagesum {

struct AdamOptions {
  double lr = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are created lazily per
/// parameter name and must keep matching that parameter's shape.
class Adam {
 public:
  explicit Adam(AdamOptions options = {});

  /// Applies one update from the gradients currently held by `params`.
  /// Every parameter must carry a gradient; a missing one raises
  /// TrainingError naming it and leaves all parameters untouched.
  void step(ParamStore& params);

  std::int64_t steps() const { return step_; }
  const AdamOptions& options() const { return options_; }
  const std::vector<double>& first_moment(const std::string& name) const;
  const std::vector<double>& second_moment(const std::string& name) const;

 private:
  AdamOptions options_;
  std::int64_t step_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

}  // namespace stagesum
