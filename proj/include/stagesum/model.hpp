#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stagesum/param_store.hpp"
#include "stagesum/random.hpp"
#include "stagesum/tensor.hpp"

namespace stagesum {

struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t hidden_size = 64;
  std::size_t num_heads = 2;
  std::size_t ffn_size = 256;
  std::size_t vocab_size = 0;
  std::size_t encoder_positions = 128;
  std::size_t decoder_positions = 64;
  double dropout_rate = 0.3;
  bool copy_enabled = true;
  std::size_t copy_head_index = 0;
  double layer_norm_eps = 1e-12;

  /// Throws ConfigError on inconsistent dimensions.
  void validate() const;
  /// Dimensions that decide whether a checkpoint fits this model.
  Fingerprint fingerprint() const;
};

enum class ParamKind { kWeight, kBias, kGain };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamKind kind;
};

/// Which parts of the architecture a parameter store holds.
enum class StoreLayout {
  kSummarizer,  // embeddings, encoder, decoder, output head, gate when copy is on
  kDenoiser,    // embeddings, encoder, masked-token output bias
  kSelector,    // embeddings, encoder, selection head
};

std::vector<ParamSpec> parameter_specs(const ModelConfig& config, StoreLayout layout);

/// Source side of one example: ids and PAD flags of equal length.
struct SourceView {
  std::span<const int> ids;
  std::span<const std::uint8_t> pad_mask;
};

/// Token embedding + learned position embedding, layer-normalised, then
/// dropped out at token level when `dropout` is non-null. `side` is
/// "encoder" or "decoder"; `first_position` offsets the position table.
Tensor embed_tokens(const ParamStore& params, const ModelConfig& config, const std::string& side,
                    std::span<const int> ids, std::size_t first_position, Rng* dropout);

/// Encoder stack over one source sequence -> [S×hidden]. Pad positions are
/// excluded from attention by a −10000 logit offset. An all-PAD source is a
/// ValidationError; too many positions a DimensionError.
Tensor encode(const ParamStore& params, const ModelConfig& config, SourceView source, Rng* dropout = nullptr);

/// Per-layer cross-attention keys and values for one encoded source.
struct CrossMemory {
  std::vector<Tensor> keys;
  std::vector<Tensor> values;
  Tensor offsets_row;  // [1×S] −10000 at PAD
  std::size_t source_length = 0;
};

CrossMemory build_cross_memory(const ParamStore& params, const ModelConfig& config, const Tensor& encoded,
                               std::span<const std::uint8_t> source_pad_mask);

/// Decoder stack output for a block of positions.
struct DecoderOutput {
  Tensor hidden;       // [T×hidden]
  Tensor copy_logits;  // [T×S] raw logits of the copy head (top layer)
};

/// Causal decoder pass over `inputs` (BOS-shifted ids) at positions 0..T-1.
DecoderOutput decode_block(const ParamStore& params, const ModelConfig& config, const CrossMemory& memory,
                           std::span<const int> inputs, Rng* dropout = nullptr);

/// Generation logits ŷ = d·Vᵀ + b_v for hidden rows d [T×hidden].
Tensor generation_logits(const ParamStore& params, const Tensor& hidden);
/// p_gen = σ(d·x_g + b_g) per row -> [T×1].
Tensor gate(const ParamStore& params, const Tensor& hidden);

/// Offsets row [1×S]: 0 where the copy head may attend, −10000 where the
/// selection mask switches a source position off.
Tensor selection_offsets(std::span<const std::uint8_t> keep);

/// Logit mixing: z = p_gen·ŷ + (1−p_gen)·scatter(â + offsets)
/// where the scatter adds copy logits into vocabulary columns at the source
/// ids, skipping PAD positions. `offsets`, when defined, is [1×S] or [T×S].
Tensor mix_copy_logits(const Tensor& gate_values, const Tensor& generation, const Tensor& copy_logits,
                       SourceView source, std::size_t vocab_size, const Tensor& offsets = {});

/// Final mixed (or pure-generation) logits for decoder rows.
Tensor output_logits(const ParamStore& params, const ModelConfig& config, const DecoderOutput& decoded,
                     SourceView source, const Tensor& selection_offsets_row = {});

/// Teacher-forced pass: inputs are the target shifted right behind BOS.
struct TeacherForcedOutput {
  Tensor probs;   // [T×vocab]
  Tensor logits;  // [T×vocab]
  DecoderOutput decoded;
};

std::vector<int> shift_right(std::span<const int> target_ids);

TeacherForcedOutput forward_teacher_forced(const ParamStore& params, const ModelConfig& config,
                                           SourceView source, std::span<const int> target_ids,
                                           std::span<const std::uint8_t> selection_keep = {},
                                           Rng* dropout = nullptr);

/// Everything computed for one decoding position.
struct DecoderStepState {
  std::vector<double> hidden;            // d_t
  std::vector<double> copy_logits;       // â_t, raw
  std::vector<double> generation;        // ŷ_t
  double p_gen = 1.0;
  std::vector<double> mixed;             // ẑ_t
  std::vector<double> probs;             // softmax(ẑ_t)
};

/// State at position t given the decoder inputs [BOS, y_0 .. y_{t-1}]
/// (prefix length t+1). t ≥ decoder_positions is a DecodeError.
DecoderStepState decode_step(const ParamStore& params, const ModelConfig& config, const Tensor& encoded,
                             SourceView source, std::span<const int> prefix_ids, std::size_t t,
                             std::span<const std::uint8_t> selection_keep = {});

/// Gradient-free incremental decoder keeping per-layer self-attention
/// key/value caches; copies share cached tensors.
class IncrementalDecoder {
 public:
  IncrementalDecoder(const ParamStore& params, const ModelConfig& config, const CrossMemory& memory,
                     SourceView source, Tensor selection_offsets_row = {});

  std::size_t position() const { return position_; }
  /// Feeds the next decoder input id and returns log-probabilities over the
  /// vocabulary for the following token.
  std::vector<double> advance(int input_id);

 private:
  const ParamStore* params_;
  const ModelConfig* config_;
  const CrossMemory* memory_;
  SourceView source_;
  Tensor selection_offsets_;
  std::vector<Tensor> self_keys_;
  std::vector<Tensor> self_values_;
  std::size_t position_ = 0;
};

}  // namespace stagesum
