#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stagesum/model.hpp"
#include "stagesum/param_store.hpp"

namespace stagesum {

/// Truncated-normal (σ = 0.02) weights, zero biases, unit gains. Each
/// parameter draws from its own stream derived from the seed and its name,
/// so the same name gets the same values in every layout.
ParamStore init_random(const ModelConfig& config, StoreLayout layout, std::uint64_t seed);

/// Binary container: magic, version, fingerprint, provenance, then for each
/// tensor its name, rank, extents and raw little-endian doubles.
void save_checkpoint(const ParamStore& params, const std::string& path);
ParamStore load_checkpoint(const std::string& path);

/// Throws IncompatibleCheckpointError listing every differing dimension
/// when `params` cannot drive a model built from `config`.
void check_compatible(const ParamStore& params, const ModelConfig& config, StoreLayout layout);

enum class SourceKind { kRandom, kCheckpoint, kSymmetric };

struct ComponentSource {
  SourceKind kind = SourceKind::kRandom;
  const ParamStore* store = nullptr;
  std::string label;  // shown in the surgery report
};

struct InitScheme {
  ComponentSource encoder;
  ComponentSource decoder;
  /// Loadable items kept from the sources: embeddings count as one, then
  /// encoder layers bottom-up, then decoder layers bottom-up. Unset loads all.
  std::optional<std::size_t> layers_to_load;
};

struct Disposition {
  std::string name;
  std::string source;  // "random" or "<label>:<source parameter>"
};

struct SurgeryResult {
  ParamStore params;
  std::vector<Disposition> report;
};

/// Builds a store for `target` by starting from init_random(seed) and
/// copying what the scheme names. Output bias, copy gate and any other
/// head parameters always stay random.
SurgeryResult apply_scheme(const InitScheme& scheme, const ModelConfig& target, StoreLayout layout,
                           std::uint64_t seed);

/// Loads the first k loadable items from `source` (full model, or
/// encoder-only used symmetrically for the decoder). k must lie in
/// [0, 2·num_layers]; 2·num_layers loads everything.
SurgeryResult apply_partial(const ParamStore& source, const ModelConfig& target, std::size_t k,
                            std::uint64_t seed, const std::string& label = "source");

/// One line per parameter: "<name> <- <source>".
std::string surgery_report_text(const std::vector<Disposition>& report);

/// Runs `train` on a copy of `prev` and appends `stage_name` to the result's
/// provenance. A non-finite parameter in the result raises StageError.
ParamStore chain_stage(const ParamStore& prev, const std::string& stage_name,
                       const std::function<ParamStore(const ParamStore&)>& train);

}  // namespace stagesum
