#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "stagesum/errors.hpp"
#include "stagesum/ops.hpp"
#include "toy_model.hpp"

using namespace stagesum;
using namespace stagesum::testing;

namespace {

Mask not_pad(const Mask& pad) {
  Mask m(pad.size());
  for (std::size_t i = 0; i < pad.size(); ++i) m[i] = pad[i] ? 0 : 1;
  return m;
}

std::vector<double> row(const Tensor& t, std::size_t r) {
  const auto v = t.values();
  const std::size_t c = t.dim(1);
  return {v.begin() + static_cast<std::ptrdiff_t>(r * c), v.begin() + static_cast<std::ptrdiff_t>((r + 1) * c)};
}

}  // namespace

TEST(ModelConfig, RejectsIndivisibleHeads) {
  auto c = toy_config();
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfig, RejectsCopyHeadOutOfRange) {
  auto c = toy_config();
  c.copy_head_index = 2;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ParameterSpecs, NamesAreUniqueAndGateOnlyWithCopy) {
  auto c = toy_config();
  const auto specs = parameter_specs(c, StoreLayout::kSummarizer);
  std::set<std::string> names;
  for (const auto& s : specs) EXPECT_TRUE(names.insert(s.name).second) << s.name;
  EXPECT_TRUE(names.count("copy_gate.weight"));
  EXPECT_TRUE(names.count("decoder.layer.1.cross_attn.q.weight"));
  c.copy_enabled = false;
  for (const auto& s : parameter_specs(c, StoreLayout::kSummarizer)) EXPECT_EQ(s.name.find("copy_gate"), std::string::npos);
}

TEST(Encode, AllPadSourceIsRejected) {
  const auto c = toy_config();
  const auto p = toy_params(c, 1);
  const std::vector<int> ids = {0, 0, 0};
  const Mask pad = {1, 1, 1};
  EXPECT_THROW(encode(p, c, {ids, pad}), ValidationError);
}

TEST(Encode, SingleTokenOutputIgnoresPadRegion) {
  const auto c = toy_config();
  const auto p = toy_params(c, 2);
  const Mask pad = {0, 1, 1, 1};
  const std::vector<int> a = {7, 0, 0, 0};
  const std::vector<int> b = {7, 9, 5, 11};
  const auto ea = encode(p, c, {a, pad});
  const auto eb = encode(p, c, {b, pad});
  EXPECT_EQ(row(ea, 0), row(eb, 0));
  for (double v : ea.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Encode, PermutingPadEmbeddingsLeavesContentBitwise) {
  const auto c = toy_config();
  const auto p = toy_params(c, 3);
  const Mask pad = {0, 0, 0, 1, 1};
  const std::vector<int> a = {6, 8, 10, 5, 11};
  const std::vector<int> b = {6, 8, 10, 11, 5};
  const auto ea = encode(p, c, {a, pad});
  const auto eb = encode(p, c, {b, pad});
  for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(row(ea, r), row(eb, r)) << r;
}

TEST(Encode, TooManyPositionsIsDimensionError) {
  const auto c = toy_config();
  const auto p = toy_params(c, 4);
  const std::vector<int> ids(c.encoder_positions + 1, 6);
  const Mask pad(ids.size(), 0);
  EXPECT_THROW(encode(p, c, {ids, pad}), DimensionError);
}

TEST(DecodeStep, BosOnlyPrefixGivesValidState) {
  const auto c = toy_config();
  const auto p = toy_params(c, 5);
  Rng rng(5);
  const auto ex = toy_example(c, rng);
  const auto enc = encode(p, c, {ex.source_ids, ex.source_pad});
  const std::vector<int> prefix = {2};
  const auto s = decode_step(p, c, enc, {ex.source_ids, ex.source_pad}, prefix, 0);
  EXPECT_EQ(s.hidden.size(), c.hidden_size);
  EXPECT_EQ(s.copy_logits.size(), ex.source_ids.size());
  EXPECT_GT(s.p_gen, 0.0);
  EXPECT_LT(s.p_gen, 1.0);
  double total = 0.0;
  for (double q : s.probs) total += q;
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(DecodeStep, PositionBeyondLimitIsDecodeError) {
  const auto c = toy_config();
  const auto p = toy_params(c, 5);
  Rng rng(5);
  const auto ex = toy_example(c, rng);
  const auto enc = encode(p, c, {ex.source_ids, ex.source_pad});
  const std::vector<int> prefix(c.decoder_positions + 1, 6);
  EXPECT_THROW(decode_step(p, c, enc, {ex.source_ids, ex.source_pad}, prefix, c.decoder_positions), DecodeError);
}

TEST(DecodeStep, LaterTokensDoNotChangeEarlierSteps) {
  const auto c = toy_config();
  const auto p = toy_params(c, 6);
  Rng rng(6);
  const auto ex = toy_example(c, rng);
  const auto enc = encode(p, c, {ex.source_ids, ex.source_pad});
  const std::vector<int> short_prefix = {2, 7, 9};
  const std::vector<int> long_prefix = {2, 7, 9, 10, 6};
  const auto a = decode_step(p, c, enc, {ex.source_ids, ex.source_pad}, short_prefix, 2);
  NoGradGuard guard;
  const auto memory = build_cross_memory(p, c, enc, ex.source_pad);
  const auto full = decode_block(p, c, memory, long_prefix);
  EXPECT_EQ(a.hidden, row(full.hidden, 2));
  EXPECT_EQ(a.copy_logits, row(full.copy_logits, 2));
}

TEST(DecodeStep, GenerationLogitsAreTiedEmbeddingProduct) {
  const auto c = toy_config();
  const auto p = toy_params(c, 7);
  Rng rng(7);
  const auto ex = toy_example(c, rng);
  const auto enc = encode(p, c, {ex.source_ids, ex.source_pad});
  const std::vector<int> prefix = {2, 8};
  const auto s = decode_step(p, c, enc, {ex.source_ids, ex.source_pad}, prefix, 1);
  const auto emb = p.at("shared.word_embedding").values();
  const auto bias = p.at("output.bias").values();
  for (std::size_t v = 0; v < c.vocab_size; ++v) {
    double acc = 0.0;
    for (std::size_t h = 0; h < c.hidden_size; ++h) acc += s.hidden[h] * emb[v * c.hidden_size + h];
    EXPECT_EQ(s.generation[v], acc + bias[v]) << v;
  }
}

TEST(MixCopyLogits, GateOneGivesGenerationLogits) {
  const auto y = Tensor::matrix(1, 4, {0.5, -1, 2, 3});
  const auto a = Tensor::matrix(1, 2, {1, 3});
  const std::vector<int> ids = {2, 1};
  const Mask pad = {0, 0};
  const auto z = mix_copy_logits(Tensor::matrix(1, 1, {1.0}), y, a, {ids, pad}, 4);
  EXPECT_EQ(std::vector<double>(z.values().begin(), z.values().end()), (std::vector<double>{0.5, -1, 2, 3}));
}

TEST(MixCopyLogits, GateZeroGivesScatteredCopyLogits) {
  const auto y = Tensor::matrix(1, 4, {9, 9, 9, 9});
  const auto a = Tensor::matrix(1, 2, {1, 3});
  const std::vector<int> ids = {2, 1};
  const Mask pad = {0, 0};
  const auto z = mix_copy_logits(Tensor::matrix(1, 1, {0.0}), y, a, {ids, pad}, 4);
  EXPECT_EQ(std::vector<double>(z.values().begin(), z.values().end()), (std::vector<double>{0, 3, 1, 0}));
}

TEST(MixCopyLogits, HalfGateAveragesBothPaths) {
  const auto y = Tensor::matrix(1, 4, {2, 0, 0, 0});
  const auto a = Tensor::matrix(1, 2, {1, 3});
  const std::vector<int> ids = {2, 1};
  const Mask pad = {0, 0};
  const auto z = mix_copy_logits(Tensor::matrix(1, 1, {0.5}), y, a, {ids, pad}, 4);
  EXPECT_EQ(std::vector<double>(z.values().begin(), z.values().end()), (std::vector<double>{1, 1.5, 0.5, 0}));
}

TEST(MixCopyLogits, PadPositionsAndDuplicatesFollowScatterRule) {
  const auto y = Tensor::matrix(1, 4, {0, 0, 0, 0});
  const auto a = Tensor::matrix(1, 3, {1, 2, 5});
  const std::vector<int> ids = {1, 1, 3};
  const Mask pad = {0, 0, 1};
  const auto z = mix_copy_logits(Tensor::matrix(1, 1, {0.0}), y, a, {ids, pad}, 4);
  EXPECT_EQ(std::vector<double>(z.values().begin(), z.values().end()), (std::vector<double>{0, 3, 0, 0}));
}

TEST(Gate, ZeroParametersGiveHalf) {
  ParamStore p;
  p.add("copy_gate.weight", Tensor({2, 1}, 0.0));
  p.add("copy_gate.bias", Tensor({1}, 0.0));
  EXPECT_EQ(gate(p, Tensor::matrix(1, 2, {3, -4})).item(), 0.5);
}

TEST(Gate, LargeBiasSaturatesToGeneration) {
  ParamStore p;
  p.add("copy_gate.weight", Tensor({2, 1}, 0.0));
  p.add("copy_gate.bias", Tensor({1}, 20.0));
  EXPECT_NEAR(gate(p, Tensor::matrix(1, 2, {3, -4})).item(), 1.0, 1e-8);
}

TEST(Gate, MatchesScalarSigmoid) {
  ParamStore p;
  p.add("copy_gate.weight", Tensor::matrix(2, 1, {1, 0}));
  p.add("copy_gate.bias", Tensor({1}, 0.0));
  // σ(ln 3) = 3/4.
  EXPECT_NEAR(gate(p, Tensor::matrix(1, 2, {std::log(3.0), 7})).item(), 0.75, 1e-15);
}

TEST(TeacherForced, CopyDisabledIsPureGenerationSoftmax) {
  auto c = toy_config();
  c.copy_enabled = false;
  const auto p = toy_params(c, 8);
  Rng rng(8);
  const auto ex = toy_example(c, rng);
  const auto out = forward_teacher_forced(p, c, {ex.source_ids, ex.source_pad}, ex.target_ids);
  const auto expected = softmax(generation_logits(p, out.decoded.hidden), 1);
  EXPECT_EQ(std::vector<double>(out.probs.values().begin(), out.probs.values().end()),
            std::vector<double>(expected.values().begin(), expected.values().end()));
}

TEST(TeacherForced, SaturatedGateMatchesCopyDisabledPath) {
  const auto c = toy_config();
  auto p = toy_params(c, 9);
  p.at("copy_gate.bias").mutable_values()[0] = 1e6;
  auto plain = c;
  plain.copy_enabled = false;
  Rng rng(9);
  const auto ex = toy_example(c, rng);
  const auto with_copy = forward_teacher_forced(p, c, {ex.source_ids, ex.source_pad}, ex.target_ids);
  const auto without = forward_teacher_forced(p, plain, {ex.source_ids, ex.source_pad}, ex.target_ids);
  for (std::size_t i = 0; i < with_copy.probs.size(); ++i) {
    EXPECT_NEAR(with_copy.probs.at(i), without.probs.at(i), 1e-9);
  }
}

TEST(TeacherForced, SameSeedSameOutputs) {
  auto c = toy_config();
  c.dropout_rate = 0.3;
  const auto p = toy_params(c, 10);
  Rng data(10);
  const auto ex = toy_example(c, data);
  Rng r1(77), r2(77);
  const auto a = forward_teacher_forced(p, c, {ex.source_ids, ex.source_pad}, ex.target_ids, {}, &r1);
  const auto b = forward_teacher_forced(p, c, {ex.source_ids, ex.source_pad}, ex.target_ids, {}, &r2);
  EXPECT_EQ(std::vector<double>(a.probs.values().begin(), a.probs.values().end()),
            std::vector<double>(b.probs.values().begin(), b.probs.values().end()));
}

TEST(TeacherForced, RowsSumToOne) {
  const auto c = toy_config();
  const auto p = toy_params(c, 11);
  Rng rng(11);
  const auto ex = toy_example(c, rng);
  const auto out = forward_teacher_forced(p, c, {ex.source_ids, ex.source_pad}, ex.target_ids);
  for (std::size_t t = 0; t < out.probs.dim(0); ++t) {
    double total = 0.0;
    for (double v : row(out.probs, t)) total += v;
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(TeacherForced, SelectionMaskLeavesGenerationLogitsAlone) {
  const auto c = toy_config();
  const auto p = toy_params(c, 12);
  Rng rng(12);
  const auto ex = toy_example(c, rng);
  const Mask keep = {1, 0, 1, 0, 1, 0, 0, 0};
  const auto masked = forward_teacher_forced(p, c, {ex.source_ids, ex.source_pad}, ex.target_ids, keep);
  const auto open = forward_teacher_forced(p, c, {ex.source_ids, ex.source_pad}, ex.target_ids);
  EXPECT_EQ(std::vector<double>(masked.decoded.hidden.values().begin(), masked.decoded.hidden.values().end()),
            std::vector<double>(open.decoded.hidden.values().begin(), open.decoded.hidden.values().end()));
  EXPECT_EQ(std::vector<double>(masked.decoded.copy_logits.values().begin(), masked.decoded.copy_logits.values().end()),
            std::vector<double>(open.decoded.copy_logits.values().begin(), open.decoded.copy_logits.values().end()));
}

TEST(TeacherForced, LossGradientMatchesFiniteDifferencesForEveryParameter) {
  const auto c = toy_config();
  auto p = toy_params(c, 13);
  p.set_requires_grad(true);
  Rng rng(13);
  const auto ex = toy_example(c, rng);
  const Mask keep = {1, 1, 0, 1, 0, 1, 0, 0};
  const Mask include = not_pad(ex.target_pad);
  auto loss = [&] {
    const auto out = forward_teacher_forced(p, c, {ex.source_ids, ex.source_pad}, ex.target_ids, keep);
    return scale(nll_sum(out.probs, ex.target_ids, include), 1.0 / 4.0);
  };
  std::vector<Tensor> inputs;
  std::vector<std::string> names;
  for (auto& [name, t] : p) {
    inputs.push_back(t);
    names.push_back(name);
  }
  const auto result = check_gradients(loss, inputs);
  EXPECT_LT(result.max_relative_error, 1e-4) << names[result.worst_input];
  for (const auto& name : {"copy_gate.weight", "copy_gate.bias", "shared.word_embedding", "output.bias"}) {
    EXPECT_TRUE(p.at(name).has_grad()) << name;
  }
}

TEST(IncrementalDecoder, MatchesFullPrefixDecodeStep) {
  const auto c = toy_config();
  const auto p = toy_params(c, 14);
  Rng rng(14);
  const auto ex = toy_example(c, rng);
  const Mask keep = {1, 0, 1, 1, 0, 1, 0, 0};
  NoGradGuard guard;
  const auto enc = encode(p, c, {ex.source_ids, ex.source_pad});
  const auto memory = build_cross_memory(p, c, enc, ex.source_pad);
  IncrementalDecoder dec(p, c, memory, {ex.source_ids, ex.source_pad}, selection_offsets(keep));
  const std::vector<int> inputs = {2, 9, 6, 11, 7};
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const auto logp = dec.advance(inputs[t]);
    const std::span<const int> prefix(inputs.data(), t + 1);
    const auto s = decode_step(p, c, enc, {ex.source_ids, ex.source_pad}, prefix, t, keep);
    for (std::size_t v = 0; v < c.vocab_size; ++v) EXPECT_NEAR(std::exp(logp[v]), s.probs[v], 1e-12);
  }
}
