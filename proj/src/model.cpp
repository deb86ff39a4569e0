#include "stagesum/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "stagesum/errors.hpp"
#include "stagesum/ops.hpp"
#include "stagesum/tokenizer.hpp"

namespace stagesum {

namespace {

std::string layer_prefix(const std::string& side, std::size_t layer) {
  return side + ".layer." + std::to_string(layer) + ".";
}

void add_linear(std::vector<ParamSpec>& specs, const std::string& prefix, std::size_t in, std::size_t out) {
  specs.push_back({prefix + ".weight", {in, out}, ParamKind::kWeight});
  specs.push_back({prefix + ".bias", {out}, ParamKind::kBias});
}

void add_norm(std::vector<ParamSpec>& specs, const std::string& prefix, std::size_t hidden) {
  specs.push_back({prefix + ".gain", {hidden}, ParamKind::kGain});
  specs.push_back({prefix + ".bias", {hidden}, ParamKind::kBias});
}

void add_attention(std::vector<ParamSpec>& specs, const std::string& prefix, std::size_t hidden) {
  for (const char* proj : {"q", "k", "v", "o"}) add_linear(specs, prefix + "." + proj, hidden, hidden);
}

void add_embeddings(std::vector<ParamSpec>& specs, const ModelConfig& c, bool with_decoder) {
  specs.push_back({"shared.word_embedding", {c.vocab_size, c.hidden_size}, ParamKind::kWeight});
  specs.push_back({"encoder.position_embedding", {c.encoder_positions, c.hidden_size}, ParamKind::kWeight});
  add_norm(specs, "encoder.embedding_norm", c.hidden_size);
  if (with_decoder) {
    specs.push_back({"decoder.position_embedding", {c.decoder_positions, c.hidden_size}, ParamKind::kWeight});
    add_norm(specs, "decoder.embedding_norm", c.hidden_size);
  }
}

void add_encoder(std::vector<ParamSpec>& specs, const ModelConfig& c) {
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const auto p = layer_prefix("encoder", l);
    add_attention(specs, p + "self_attn", c.hidden_size);
    add_norm(specs, p + "attn_norm", c.hidden_size);
    add_linear(specs, p + "ffn.in", c.hidden_size, c.ffn_size);
    add_linear(specs, p + "ffn.out", c.ffn_size, c.hidden_size);
    add_norm(specs, p + "ffn_norm", c.hidden_size);
  }
}

void add_decoder(std::vector<ParamSpec>& specs, const ModelConfig& c) {
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const auto p = layer_prefix("decoder", l);
    add_attention(specs, p + "self_attn", c.hidden_size);
    add_norm(specs, p + "self_attn_norm", c.hidden_size);
    add_attention(specs, p + "cross_attn", c.hidden_size);
    add_norm(specs, p + "cross_attn_norm", c.hidden_size);
    add_linear(specs, p + "ffn.in", c.hidden_size, c.ffn_size);
    add_linear(specs, p + "ffn.out", c.ffn_size, c.hidden_size);
    add_norm(specs, p + "ffn_norm", c.hidden_size);
  }
}

Tensor linear(const ParamStore& params, const std::string& prefix, const Tensor& x) {
  return add_bias(matmul(x, params.at(prefix + ".weight")), params.at(prefix + ".bias"));
}

Tensor norm(const ParamStore& params, const ModelConfig& config, const std::string& prefix, const Tensor& x) {
  return layer_norm(x, params.at(prefix + ".gain"), params.at(prefix + ".bias"), config.layer_norm_eps);
}

Tensor maybe_dropout(const Tensor& x, const ModelConfig& config, Rng* dropout) {
  if (dropout == nullptr || config.dropout_rate == 0.0) return x;
  return dropout_tokens(x, config.dropout_rate, *dropout);
}

/// Repeats a [1×S] row `rows` times.
Tensor broadcast_row(const Tensor& row, std::size_t rows) {
  const auto v = row.values();
  std::vector<double> out;
  out.reserve(rows * v.size());
  for (std::size_t r = 0; r < rows; ++r) out.insert(out.end(), v.begin(), v.end());
  return Tensor({rows, v.size()}, std::move(out));
}

Tensor causal_offsets(std::size_t t) {
  Tensor out({t, t});
  auto v = out.mutable_values();
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = i + 1; j < t; ++j) v[i * t + j] = kMaskOffset;
  }
  return out;
}

struct AttentionOutput {
  Tensor out;
  Tensor logits;  // [heads×Tq×Tk] before offsets
};

AttentionOutput attend(const ParamStore& params, const std::string& prefix, const ModelConfig& config,
                       const Tensor& query_in, const Tensor& keys, const Tensor& values, const Tensor& offsets) {
  const Tensor q = linear(params, prefix + ".q", query_in);
  Tensor logits = attention_logits(q, keys, config.num_heads);
  Tensor shifted = offsets.defined() ? add_attention_offsets(logits, offsets) : logits;
  const Tensor probs = softmax(shifted, 2);
  return {linear(params, prefix + ".o", attention_context(probs, values)), logits};
}

Tensor feed_forward(const ParamStore& params, const std::string& prefix, const Tensor& x) {
  return linear(params, prefix + "ffn.out", gelu(linear(params, prefix + "ffn.in", x)));
}

struct DecoderLayerOutput {
  Tensor out;
  Tensor cross_logits;
};

/// One post-norm decoder layer. Self keys/values cover every position the
/// queries may see; `self_offsets` hides the rest.
DecoderLayerOutput decoder_layer(const ParamStore& params, const ModelConfig& config, std::size_t layer,
                                 const Tensor& x, const Tensor& self_keys, const Tensor& self_values,
                                 const Tensor& self_offsets, const CrossMemory& memory, Rng* dropout) {
  const auto p = layer_prefix("decoder", layer);
  const auto self = attend(params, p + "self_attn", config, x, self_keys, self_values, self_offsets);
  Tensor h = norm(params, config, p + "self_attn_norm", add(x, maybe_dropout(self.out, config, dropout)));
  const Tensor cross_offsets = broadcast_row(memory.offsets_row, x.dim(0));
  const auto cross =
      attend(params, p + "cross_attn", config, h, memory.keys[layer], memory.values[layer], cross_offsets);
  h = norm(params, config, p + "cross_attn_norm", add(h, maybe_dropout(cross.out, config, dropout)));
  h = norm(params, config, p + "ffn_norm", add(h, maybe_dropout(feed_forward(params, p, h), config, dropout)));
  return {h, cross.logits};
}

void check_ids(std::span<const int> ids, const ModelConfig& config, const char* what) {
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size) {
      throw ValidationError(std::string(what) + ": token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(config.vocab_size));
    }
  }
}

std::vector<double> row_of(const Tensor& t, std::size_t row) {
  const std::size_t cols = t.dim(1);
  const auto v = t.values();
  return {v.begin() + static_cast<std::ptrdiff_t>(row * cols),
          v.begin() + static_cast<std::ptrdiff_t>((row + 1) * cols)};
}

}  // namespace

void ModelConfig::validate() const {
  if (num_layers == 0 || hidden_size == 0 || num_heads == 0 || ffn_size == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (hidden_size % num_heads != 0) {
    throw ConfigError("hidden_size " + std::to_string(hidden_size) + " is not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (vocab_size < 5) throw ConfigError("vocab_size must cover the reserved entries");
  if (encoder_positions == 0 || decoder_positions == 0) throw ConfigError("position limits must be positive");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("dropout_rate must lie in [0, 1)");
  if (copy_enabled && copy_head_index >= num_heads) {
    throw ConfigError("copy_head_index " + std::to_string(copy_head_index) + " must be below num_heads " +
                      std::to_string(num_heads));
  }
}

Fingerprint ModelConfig::fingerprint() const {
  return {{"layers", static_cast<std::int64_t>(num_layers)},
          {"hidden", static_cast<std::int64_t>(hidden_size)},
          {"heads", static_cast<std::int64_t>(num_heads)},
          {"ffn", static_cast<std::int64_t>(ffn_size)},
          {"vocab", static_cast<std::int64_t>(vocab_size)}};
}

std::vector<ParamSpec> parameter_specs(const ModelConfig& config, StoreLayout layout) {
  config.validate();
  std::vector<ParamSpec> specs;
  add_embeddings(specs, config, layout == StoreLayout::kSummarizer);
  add_encoder(specs, config);
  switch (layout) {
    case StoreLayout::kSummarizer:
      add_decoder(specs, config);
      specs.push_back({"output.bias", {config.vocab_size}, ParamKind::kBias});
      if (config.copy_enabled) {
        specs.push_back({"copy_gate.weight", {config.hidden_size, 1}, ParamKind::kWeight});
        specs.push_back({"copy_gate.bias", {1}, ParamKind::kBias});
      }
      break;
    case StoreLayout::kDenoiser:
      specs.push_back({"mlm.bias", {config.vocab_size}, ParamKind::kBias});
      break;
    case StoreLayout::kSelector:
      specs.push_back({"selector.weight", {config.hidden_size, 1}, ParamKind::kWeight});
      specs.push_back({"selector.bias", {1}, ParamKind::kBias});
      break;
  }
  return specs;
}

Tensor embed_tokens(const ParamStore& params, const ModelConfig& config, const std::string& side,
                    std::span<const int> ids, std::size_t first_position, Rng* dropout) {
  const std::size_t limit = side == "encoder" ? config.encoder_positions : config.decoder_positions;
  if (first_position + ids.size() > limit) {
    throw DimensionError(side + ": " + std::to_string(first_position + ids.size()) +
                         " positions exceed the limit of " + std::to_string(limit));
  }
  check_ids(ids, config, side.c_str());
  const Tensor& table = params.at(side + ".position_embedding");
  Tensor positions;
  if (first_position == 0) {
    positions = leading_rows(table, ids.size());
  } else {
    std::vector<int> rows(ids.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<int>(first_position + i);
    positions = gather_rows(table, rows);
  }
  const Tensor x = add(gather_rows(params.at("shared.word_embedding"), ids), positions);
  return maybe_dropout(norm(params, config, side + ".embedding_norm", x), config, dropout);
}

Tensor encode(const ParamStore& params, const ModelConfig& config, SourceView source, Rng* dropout) {
  const std::size_t s = source.ids.size();
  if (s == 0 || source.pad_mask.size() != s) {
    throw ValidationError("encode: source ids and pad mask must be non-empty and of equal length");
  }
  if (std::all_of(source.pad_mask.begin(), source.pad_mask.end(), [](std::uint8_t m) { return m != 0; })) {
    throw ValidationError("encode: source has no non-pad position to attend to");
  }
  Tensor offsets({s, s});
  {
    auto v = offsets.mutable_values();
    for (std::size_t i = 0; i < s; ++i) {
      for (std::size_t j = 0; j < s; ++j) {
        if (source.pad_mask[j]) v[i * s + j] = kMaskOffset;
      }
    }
  }
  Tensor x = embed_tokens(params, config, "encoder", source.ids, 0, dropout);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const auto p = layer_prefix("encoder", l);
    const Tensor k = linear(params, p + "self_attn.k", x);
    const Tensor v = linear(params, p + "self_attn.v", x);
    const auto self = attend(params, p + "self_attn", config, x, k, v, offsets);
    x = norm(params, config, p + "attn_norm", add(x, maybe_dropout(self.out, config, dropout)));
    x = norm(params, config, p + "ffn_norm", add(x, maybe_dropout(feed_forward(params, p, x), config, dropout)));
  }
  return x;
}

CrossMemory build_cross_memory(const ParamStore& params, const ModelConfig& config, const Tensor& encoded,
                               std::span<const std::uint8_t> source_pad_mask) {
  if (encoded.rank() != 2 || encoded.dim(0) != source_pad_mask.size()) {
    throw DimensionError("cross memory: encoder output " + shape_string(encoded.shape()) + " vs " +
                         std::to_string(source_pad_mask.size()) + " mask entries");
  }
  CrossMemory memory;
  memory.source_length = source_pad_mask.size();
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const auto p = layer_prefix("decoder", l) + "cross_attn";
    memory.keys.push_back(linear(params, p + ".k", encoded));
    memory.values.push_back(linear(params, p + ".v", encoded));
  }
  memory.offsets_row = Tensor({1, memory.source_length});
  auto v = memory.offsets_row.mutable_values();
  for (std::size_t j = 0; j < memory.source_length; ++j) v[j] = source_pad_mask[j] ? kMaskOffset : 0.0;
  return memory;
}

DecoderOutput decode_block(const ParamStore& params, const ModelConfig& config, const CrossMemory& memory,
                           std::span<const int> inputs, Rng* dropout) {
  if (inputs.empty()) throw ValidationError("decode: empty decoder input");
  Tensor x = embed_tokens(params, config, "decoder", inputs, 0, dropout);
  const Tensor offsets = causal_offsets(inputs.size());
  Tensor cross_logits;
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const auto p = layer_prefix("decoder", l) + "self_attn";
    const Tensor k = linear(params, p + ".k", x);
    const Tensor v = linear(params, p + ".v", x);
    auto out = decoder_layer(params, config, l, x, k, v, offsets, memory, dropout);
    x = out.out;
    cross_logits = out.cross_logits;
  }
  return {x, select_head(cross_logits, config.copy_head_index)};
}

Tensor generation_logits(const ParamStore& params, const Tensor& hidden) {
  return add_bias(matmul_transposed(hidden, params.at("shared.word_embedding")), params.at("output.bias"));
}

Tensor gate(const ParamStore& params, const Tensor& hidden) {
  return sigmoid(add_bias(matmul(hidden, params.at("copy_gate.weight")), params.at("copy_gate.bias")));
}

Tensor selection_offsets(std::span<const std::uint8_t> keep) {
  Tensor out({1, keep.size()});
  auto v = out.mutable_values();
  for (std::size_t j = 0; j < keep.size(); ++j) v[j] = keep[j] ? 0.0 : kMaskOffset;
  return out;
}

Tensor mix_copy_logits(const Tensor& gate_values, const Tensor& generation, const Tensor& copy_logits,
                       SourceView source, std::size_t vocab_size, const Tensor& offsets) {
  const std::size_t t = copy_logits.dim(0);
  const std::size_t s = copy_logits.dim(1);
  if (source.ids.size() != s || source.pad_mask.size() != s) {
    throw DimensionError("mix_copy_logits: copy logits " + shape_string(copy_logits.shape()) + " vs " +
                         std::to_string(source.ids.size()) + " source ids");
  }
  Tensor copy = copy_logits;
  if (offsets.defined()) {
    const Tensor full = offsets.dim(0) == t ? offsets : broadcast_row(offsets, t);
    copy = add_attention_offsets(copy_logits.reshape({1, t, s}), full).reshape({t, s});
  }
  Mask include(s);
  for (std::size_t j = 0; j < s; ++j) include[j] = source.pad_mask[j] ? 0 : 1;
  return mix_rows(gate_values, generation, scatter_columns(copy, source.ids, include, vocab_size));
}

Tensor output_logits(const ParamStore& params, const ModelConfig& config, const DecoderOutput& decoded,
                     SourceView source, const Tensor& selection_offsets_row) {
  const Tensor generation = generation_logits(params, decoded.hidden);
  if (!config.copy_enabled) return generation;
  return mix_copy_logits(gate(params, decoded.hidden), generation, decoded.copy_logits, source,
                         config.vocab_size, selection_offsets_row);
}

std::vector<int> shift_right(std::span<const int> target_ids) {
  std::vector<int> inputs;
  inputs.reserve(target_ids.size());
  inputs.push_back(Vocabulary::kBos);
  for (std::size_t i = 0; i + 1 < target_ids.size(); ++i) inputs.push_back(target_ids[i]);
  return inputs;
}

TeacherForcedOutput forward_teacher_forced(const ParamStore& params, const ModelConfig& config,
                                           SourceView source, std::span<const int> target_ids,
                                           std::span<const std::uint8_t> selection_keep, Rng* dropout) {
  if (!selection_keep.empty() && selection_keep.size() != source.ids.size()) {
    throw DimensionError("selection mask has " + std::to_string(selection_keep.size()) + " entries for " +
                         std::to_string(source.ids.size()) + " source positions");
  }
  const Tensor encoded = encode(params, config, source, dropout);
  const CrossMemory memory = build_cross_memory(params, config, encoded, source.pad_mask);
  const auto inputs = shift_right(target_ids);
  TeacherForcedOutput out;
  out.decoded = decode_block(params, config, memory, inputs, dropout);
  const Tensor offsets = selection_keep.empty() ? Tensor{} : selection_offsets(selection_keep);
  out.logits = output_logits(params, config, out.decoded, source, offsets);
  out.probs = softmax(out.logits, 1);
  return out;
}

DecoderStepState decode_step(const ParamStore& params, const ModelConfig& config, const Tensor& encoded,
                             SourceView source, std::span<const int> prefix_ids, std::size_t t,
                             std::span<const std::uint8_t> selection_keep) {
  if (t >= config.decoder_positions) {
    throw DecodeError("decode_step: position " + std::to_string(t) + " is beyond the decoder limit of " +
                      std::to_string(config.decoder_positions));
  }
  if (prefix_ids.size() != t + 1) {
    throw DecodeError("decode_step: position " + std::to_string(t) + " needs " + std::to_string(t + 1) +
                      " decoder inputs, got " + std::to_string(prefix_ids.size()));
  }
  NoGradGuard guard;
  const CrossMemory memory = build_cross_memory(params, config, encoded, source.pad_mask);
  const DecoderOutput decoded = decode_block(params, config, memory, prefix_ids, nullptr);
  DecoderStepState state;
  state.hidden = row_of(decoded.hidden, t);
  state.copy_logits = row_of(decoded.copy_logits, t);
  const Tensor generation = generation_logits(params, decoded.hidden);
  state.generation = row_of(generation, t);
  Tensor mixed = generation;
  if (config.copy_enabled) {
    const Tensor gates = gate(params, decoded.hidden);
    state.p_gen = gates.at(t);
    const Tensor offsets = selection_keep.empty() ? Tensor{} : selection_offsets(selection_keep);
    mixed = mix_copy_logits(gates, generation, decoded.copy_logits, source, config.vocab_size, offsets);
  }
  state.mixed = row_of(mixed, t);
  state.probs = row_of(softmax(mixed, 1), t);
  return state;
}

IncrementalDecoder::IncrementalDecoder(const ParamStore& params, const ModelConfig& config,
                                       const CrossMemory& memory, SourceView source,
                                       Tensor selection_offsets_row)
    : params_(&params),
      config_(&config),
      memory_(&memory),
      source_(source),
      selection_offsets_(std::move(selection_offsets_row)),
      self_keys_(config.num_layers),
      self_values_(config.num_layers) {}

std::vector<double> IncrementalDecoder::advance(int input_id) {
  NoGradGuard guard;
  const std::array<int, 1> ids = {input_id};
  Tensor x = embed_tokens(*params_, *config_, "decoder", ids, position_, nullptr);
  Tensor cross_logits;
  for (std::size_t l = 0; l < config_->num_layers; ++l) {
    const auto p = layer_prefix("decoder", l) + "self_attn";
    const Tensor k = linear(*params_, p + ".k", x);
    const Tensor v = linear(*params_, p + ".v", x);
    self_keys_[l] = self_keys_[l].defined() ? concat_rows(self_keys_[l], k) : k;
    self_values_[l] = self_values_[l].defined() ? concat_rows(self_values_[l], v) : v;
    auto out = decoder_layer(*params_, *config_, l, x, self_keys_[l], self_values_[l], Tensor{}, *memory_, nullptr);
    x = out.out;
    cross_logits = out.cross_logits;
  }
  ++position_;
  const DecoderOutput decoded{x, select_head(cross_logits, config_->copy_head_index)};
  const Tensor logits = output_logits(*params_, *config_, decoded, source_, selection_offsets_);
  const auto z = logits.values();
  const double peak = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double v : z) total += std::exp(v - peak);
  const double log_total = std::log(total) + peak;
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - log_total;
  return out;
}

}  // namespace stagesum
