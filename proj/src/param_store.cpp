#include "stagesum/param_store.hpp"

#include <cstring>
#include <sstream>

#include "stagesum/errors.hpp"

namespace stagesum {

std::string fingerprint_string(const Fingerprint& fp) {
  std::ostringstream out;
  bool first = true;
  for (const auto& [key, value] : fp) {
    if (!first) out << ';';
    first = false;
    out << key << '=' << value;
  }
  return out.str();
}

Fingerprint parse_fingerprint(const std::string& text) {
  Fingerprint fp;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ';')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw FormatError("malformed fingerprint entry '" + item + "'");
    try {
      fp[item.substr(0, eq)] = std::stoll(item.substr(eq + 1));
    } catch (const std::exception&) {
      throw FormatError("malformed fingerprint entry '" + item + "'");
    }
  }
  return fp;
}

std::vector<std::string> fingerprint_differences(const Fingerprint& expected, const Fingerprint& actual) {
  std::vector<std::string> diffs;
  for (const auto& [key, value] : expected) {
    const auto it = actual.find(key);
    if (it != actual.end() && it->second != value) {
      diffs.push_back(key + ": expected " + std::to_string(value) + ", checkpoint has " +
                      std::to_string(it->second));
    }
  }
  return diffs;
}

void ParamStore::add(const std::string& name, Tensor tensor) {
  if (!params_.emplace(name, std::move(tensor)).second) {
    throw ValidationError("duplicate parameter name '" + name + "'");
  }
}

void ParamStore::set(const std::string& name, Tensor tensor) { params_[name] = std::move(tensor); }

const Tensor& ParamStore::at(const std::string& name) const {
  const auto it = params_.find(name);
  if (it == params_.end()) throw SurgeryError("missing parameter '" + name + "'");
  return it->second;
}

Tensor& ParamStore::at(const std::string& name) {
  const auto it = params_.find(name);
  if (it == params_.end()) throw SurgeryError("missing parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, tensor] : params_) out.push_back(name);
  return out;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, tensor] : params_) total += tensor.size();
  return total;
}

ParamStore ParamStore::clone() const {
  ParamStore copy;
  for (const auto& [name, tensor] : params_) {
    Tensor t = tensor.detach();
    copy.params_.emplace(name, std::move(t));
  }
  copy.fingerprint_ = fingerprint_;
  copy.provenance_ = provenance_;
  return copy;
}

void ParamStore::set_requires_grad(bool on) {
  for (auto& [name, tensor] : params_) tensor.set_requires_grad(on);
}

void ParamStore::clear_grads() {
  for (auto& [name, tensor] : params_) tensor.clear_grad();
}

bool ParamStore::bitwise_equal(const ParamStore& other) const {
  if (params_.size() != other.params_.size()) return false;
  auto a = params_.begin();
  auto b = other.params_.begin();
  for (; a != params_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.shape() != b->second.shape()) return false;
    const auto av = a->second.values(), bv = b->second.values();
    if (std::memcmp(av.data(), bv.data(), av.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

}  // namespace stagesum
