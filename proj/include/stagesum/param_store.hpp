#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "stagesum/tensor.hpp"

namespace stagesum {

/// Architecture dimensions a checkpoint was produced with, e.g.
/// {"hidden": 32, "layers": 2, ...}. Two stores are load-compatible when their
/// fingerprints agree on every key present in both.
using Fingerprint = std::map<std::string, std::int64_t>;

std::string fingerprint_string(const Fingerprint& fp);
Fingerprint parse_fingerprint(const std::string& text);
/// Human-readable list of keys whose values differ, empty when compatible.
std::vector<std::string> fingerprint_differences(const Fingerprint& expected, const Fingerprint& actual);

/// Named parameter tree: hierarchical name -> tensor, plus the config
/// fingerprint and the append-only chain of stages that produced it.
class ParamStore {
 public:
  ParamStore() = default;

  void add(const std::string& name, Tensor tensor);
  /// Adds or replaces.
  void set(const std::string& name, Tensor tensor);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  std::size_t size() const { return params_.size(); }
  std::vector<std::string> names() const;
  std::size_t parameter_count() const;

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }

  const Fingerprint& fingerprint() const { return fingerprint_; }
  void set_fingerprint(Fingerprint fp) { fingerprint_ = std::move(fp); }

  const std::vector<std::string>& provenance() const { return provenance_; }
  void append_provenance(const std::string& stage) { provenance_.push_back(stage); }
  void set_provenance(std::vector<std::string> chain) { provenance_ = std::move(chain); }

  /// Deep copy: independent buffers, no gradients, same metadata.
  ParamStore clone() const;
  void set_requires_grad(bool on);
  void clear_grads();
  /// True when both stores hold the same names with bitwise-equal values.
  bool bitwise_equal(const ParamStore& other) const;

 private:
  std::map<std::string, Tensor> params_;
  Fingerprint fingerprint_;
  std::vector<std::string> provenance_;
};

}  // namespace stagesum
