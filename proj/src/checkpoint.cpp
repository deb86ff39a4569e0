#include "stagesum/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "stagesum/errors.hpp"
#include "stagesum/random.hpp"

namespace stagesum {

namespace {

constexpr char kMagic[4] = {'S', 'S', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::uint64_t name_hash(const std::string& name) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

template <class T>
void write_pod(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

void write_string(std::ostream& out, const std::string& s) {
  write_pod<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <class T>
T read_pod(std::istream& in, const std::string& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw FormatError("checkpoint '" + path + "' ends unexpectedly");
  }
  return value;
}

std::string read_string(std::istream& in, const std::string& path) {
  const auto n = read_pod<std::uint64_t>(in, path);
  if (n > (1ULL << 20)) throw FormatError("checkpoint '" + path + "' has an implausible string length");
  std::string s(n, '\0');
  if (n > 0 && !in.read(s.data(), static_cast<std::streamsize>(n))) {
    throw FormatError("checkpoint '" + path + "' ends unexpectedly");
  }
  return s;
}

/// Loadable item of a parameter: 0 = embeddings, 1..L encoder layers,
/// L+1..2L decoder layers, -1 for heads that are never loaded.
int loadable_item(const std::string& name, std::size_t layers) {
  if (name == "shared.word_embedding" || name.find("position_embedding") != std::string::npos ||
      name.find("embedding_norm") != std::string::npos) {
    return 0;
  }
  for (const std::string side : {"encoder", "decoder"}) {
    const std::string prefix = side + ".layer.";
    if (name.rfind(prefix, 0) == 0) {
      const auto layer = std::stoul(name.substr(prefix.size()));
      return static_cast<int>(1 + layer + (side == "decoder" ? layers : 0));
    }
  }
  return -1;
}

bool is_decoder_side(const std::string& name) { return name.rfind("decoder.", 0) == 0; }

/// Name of the encoder parameter that seeds decoder parameter `name` under
/// symmetric initialisation.
std::string symmetric_name(const std::string& name) {
  if (name == "decoder.position_embedding") return "encoder.position_embedding";
  if (name.rfind("decoder.embedding_norm", 0) == 0) return "encoder" + name.substr(7);
  std::string mapped = "encoder" + name.substr(7);
  const auto replace = [&](const std::string& from, const std::string& to) {
    const auto pos = mapped.find(from);
    if (pos != std::string::npos) mapped.replace(pos, from.size(), to);
  };
  replace(".cross_attn_norm.", ".attn_norm.");
  replace(".self_attn_norm.", ".attn_norm.");
  replace(".cross_attn.", ".self_attn.");
  return mapped;
}

void require_fingerprint(const ParamStore& source, const ModelConfig& target, const std::string& label) {
  const auto diffs = fingerprint_differences(target.fingerprint(), source.fingerprint());
  if (!diffs.empty()) {
    std::string msg = "checkpoint '" + label + "' does not fit the target model:";
    for (const auto& d : diffs) msg += " " + d + ";";
    throw IncompatibleCheckpointError(msg);
  }
}

/// Copies source into target. Position tables may differ in length: the
/// leading rows are copied and any extension keeps its random values.
void copy_into(Tensor& target, const Tensor& source, const std::string& target_name,
               const std::string& source_name) {
  const bool positional = target_name.find("position_embedding") != std::string::npos;
  if (target.shape() == source.shape()) {
    auto out = target.mutable_values();
    std::copy(source.values().begin(), source.values().end(), out.begin());
    return;
  }
  if (positional && target.rank() == 2 && source.rank() == 2 && target.dim(1) == source.dim(1)) {
    const std::size_t rows = std::min(target.dim(0), source.dim(0));
    auto out = target.mutable_values();
    std::copy_n(source.values().begin(), rows * target.dim(1), out.begin());
    return;
  }
  throw IncompatibleCheckpointError("parameter " + target_name + " " + shape_string(target.shape()) +
                                    " cannot take " + source_name + " " + shape_string(source.shape()));
}

}  // namespace

ParamStore init_random(const ModelConfig& config, StoreLayout layout, std::uint64_t seed) {
  ParamStore store;
  for (const auto& spec : parameter_specs(config, layout)) {
    Tensor t(spec.shape, spec.kind == ParamKind::kGain ? 1.0 : 0.0);
    if (spec.kind == ParamKind::kWeight) {
      Rng rng(derive_seed(seed, name_hash(spec.name)));
      for (auto& v : t.mutable_values()) v = rng.truncated_normal(0.02);
    }
    store.add(spec.name, std::move(t));
  }
  store.set_fingerprint(config.fingerprint());
  return store;
}

void save_checkpoint(const ParamStore& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write checkpoint '" + path + "'");
  out.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(out, kVersion);
  write_string(out, fingerprint_string(params.fingerprint()));
  write_pod<std::uint64_t>(out, params.provenance().size());
  for (const auto& stage : params.provenance()) write_string(out, stage);
  write_pod<std::uint64_t>(out, params.size());
  for (const auto& [name, tensor] : params) {
    write_string(out, name);
    write_pod<std::uint64_t>(out, tensor.rank());
    for (auto d : tensor.shape()) write_pod<std::uint64_t>(out, d);
    const auto v = tensor.values();
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!out) throw FormatError("failed while writing checkpoint '" + path + "'");
}

ParamStore load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
  char magic[4];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw FormatError("'" + path + "' is not a checkpoint file");
  }
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != kVersion) {
    throw FormatError("checkpoint '" + path + "' has unsupported version " + std::to_string(version));
  }
  ParamStore store;
  store.set_fingerprint(parse_fingerprint(read_string(in, path)));
  const auto stages = read_pod<std::uint64_t>(in, path);
  std::vector<std::string> provenance;
  for (std::uint64_t i = 0; i < stages; ++i) provenance.push_back(read_string(in, path));
  store.set_provenance(std::move(provenance));
  const auto count = read_pod<std::uint64_t>(in, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name = read_string(in, path);
    const auto rank = read_pod<std::uint64_t>(in, path);
    if (rank == 0 || rank > 8) throw FormatError("checkpoint '" + path + "': bad rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = read_pod<std::uint64_t>(in, path);
    std::vector<double> values(shape_size(shape));
    if (!in.read(reinterpret_cast<char*>(values.data()),
                 static_cast<std::streamsize>(values.size() * sizeof(double)))) {
      throw FormatError("checkpoint '" + path + "' ends inside tensor " + name);
    }
    store.add(name, Tensor(std::move(shape), std::move(values)));
  }
  return store;
}

void check_compatible(const ParamStore& params, const ModelConfig& config, StoreLayout layout) {
  std::vector<std::string> problems = fingerprint_differences(config.fingerprint(), params.fingerprint());
  for (const auto& spec : parameter_specs(config, layout)) {
    if (!params.contains(spec.name)) {
      problems.push_back(spec.name + " missing");
    } else if (params.at(spec.name).shape() != spec.shape) {
      problems.push_back(spec.name + " expected " + shape_string(spec.shape) + " found " +
                         shape_string(params.at(spec.name).shape()));
    }
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint does not fit the model:";
    for (const auto& p : problems) msg += " " + p + ";";
    throw IncompatibleCheckpointError(msg);
  }
}

SurgeryResult apply_scheme(const InitScheme& scheme, const ModelConfig& target, StoreLayout layout,
                           std::uint64_t seed) {
  for (const auto* source : {&scheme.encoder, &scheme.decoder}) {
    if (source->kind != SourceKind::kRandom && source->store == nullptr) {
      throw ConfigError("initialisation source '" + source->label + "' has no checkpoint");
    }
  }
  if (scheme.encoder.kind == SourceKind::kSymmetric) {
    throw ConfigError("symmetric initialisation applies to the decoder only");
  }
  const std::size_t items = 2 * target.num_layers;
  if (scheme.layers_to_load && *scheme.layers_to_load > items) {
    throw ConfigError("layers_to_load " + std::to_string(*scheme.layers_to_load) + " outside [0, " +
                      std::to_string(items) + "]");
  }
  for (const auto* source : {&scheme.encoder, &scheme.decoder}) {
    if (source->kind != SourceKind::kRandom) require_fingerprint(*source->store, target, source->label);
  }

  SurgeryResult result;
  result.params = init_random(target, layout, seed);
  const auto loaded = [&](int item) {
    if (item < 0) return false;
    if (!scheme.layers_to_load || *scheme.layers_to_load == items) return true;
    return static_cast<std::size_t>(item) < *scheme.layers_to_load;
  };

  for (auto& [name, tensor] : result.params) {
    const int item = loadable_item(name, target.num_layers);
    const ComponentSource* source = nullptr;
    std::string source_name = name;
    if (loaded(item)) {
      const bool decoder_side = is_decoder_side(name);
      if (name == "shared.word_embedding") {
        source = scheme.encoder.kind != SourceKind::kRandom ? &scheme.encoder
                 : scheme.decoder.kind != SourceKind::kRandom ? &scheme.decoder
                                                              : nullptr;
      } else if (!decoder_side && scheme.encoder.kind == SourceKind::kCheckpoint) {
        source = &scheme.encoder;
      } else if (decoder_side && scheme.decoder.kind == SourceKind::kCheckpoint) {
        source = &scheme.decoder;
      } else if (decoder_side && scheme.decoder.kind == SourceKind::kSymmetric) {
        source = &scheme.decoder;
        source_name = symmetric_name(name);
      }
    }
    if (source == nullptr) {
      result.report.push_back({name, "random"});
      continue;
    }
    if (!source->store->contains(source_name)) {
      throw SurgeryError("checkpoint '" + source->label + "' has no parameter " + source_name + " (needed for " +
                         name + ")");
    }
    copy_into(tensor, source->store->at(source_name), name, source_name);
    result.report.push_back({name, source->label + ":" + source_name});
  }

  const ComponentSource& origin = scheme.encoder.kind != SourceKind::kRandom ? scheme.encoder : scheme.decoder;
  const bool copied_any = std::any_of(result.report.begin(), result.report.end(),
                                      [](const Disposition& d) { return d.source != "random"; });
  if (origin.kind != SourceKind::kRandom && copied_any) result.params.set_provenance(origin.store->provenance());
  return result;
}

SurgeryResult apply_partial(const ParamStore& source, const ModelConfig& target, std::size_t k,
                            std::uint64_t seed, const std::string& label) {
  if (k > 2 * target.num_layers) {
    throw ConfigError("partial loading count " + std::to_string(k) + " outside [0, " +
                      std::to_string(2 * target.num_layers) + "]");
  }
  InitScheme scheme;
  scheme.encoder = {SourceKind::kCheckpoint, &source, label};
  const bool full_model = source.contains("decoder.layer.0.self_attn.q.weight");
  scheme.decoder = {full_model ? SourceKind::kCheckpoint : SourceKind::kSymmetric, &source, label};
  scheme.layers_to_load = k;
  return apply_scheme(scheme, target, StoreLayout::kSummarizer, seed);
}

std::string surgery_report_text(const std::vector<Disposition>& report) {
  std::ostringstream out;
  for (const auto& d : report) out << d.name << " <- " << d.source << '\n';
  return out.str();
}

ParamStore chain_stage(const ParamStore& prev, const std::string& stage_name,
                       const std::function<ParamStore(const ParamStore&)>& train) {
  ParamStore next = train(prev.clone());
  for (const auto& [name, tensor] : next) {
    for (double v : tensor.values()) {
      if (!std::isfinite(v)) throw StageError("stage '" + stage_name + "' produced a non-finite value in " + name);
    }
  }
  std::vector<std::string> provenance = prev.provenance();
  provenance.push_back(stage_name);
  next.set_provenance(std::move(provenance));
  return next;
}

}  // namespace stagesum
