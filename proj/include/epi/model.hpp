// Copyright 2026 The epilab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "epi/parameters.hpp"
#include "epi/random.hpp"
#include "epi/tensor.hpp"
#include "epi/types.hpp"

namespace epi {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t max_len = 64;
  double dropout_rate = 0.0;
  std::size_t vocab_size = 128;

  /// Throws ConfigError when the shape contract is broken.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Encoder g_theta: embeddings, self-attention blocks, final norm.
struct EncoderParams {
  ModelConfig config;
  ParameterSet params;
};

/// Decoder h_phi: embeddings, causal self-attention, cross-attention,
/// feed-forward blocks, final norm and the output projection.
struct DecoderParams {
  ModelConfig config;
  ParameterSet params;
};

EncoderParams init_encoder(const ModelConfig& config, Rng& rng);
DecoderParams init_decoder(const ModelConfig& config, Rng& rng);

/// Non-owning pairing of an encoder with a decoder.
struct ModelRef {
  const EncoderParams* encoder = nullptr;
  const DecoderParams* decoder = nullptr;
  const ModelConfig& config() const { return encoder->config; }
};

/// f(s) = h_phi(g_theta(s)) with both parts owned by value.
struct EncoderDecoderModel {
  ModelConfig config;
  EncoderParams encoder;
  DecoderParams decoder;

  ModelRef ref() const { return ModelRef{&encoder, &decoder}; }
  std::uint64_t checksum() const;
};

EncoderDecoderModel init_model(const ModelConfig& config, std::uint64_t seed);

/// Routes encoding through theta and decoding through phi without copying.
/// Throws CompatibilityError when the two parts disagree on the config or
/// on parameter structure.
ModelRef compose(const EncoderParams& theta, const DecoderParams& phi);

/// Owning variant of compose (deep copies both parts).
EncoderDecoderModel compose_model(const EncoderParams& theta, const DecoderParams& phi);

/// Which parts of a model accumulate gradients in a forward pass. A frozen
/// part still propagates gradients through its activations.
struct Tracking {
  bool encoder = true;
  bool decoder = true;
};

/// Memory features [len(source), d_model] for one source sentence.
Tensor encode(const EncoderParams& theta, const TokenSeq& source, bool track = true);

/// Mean per-token negative log-likelihood over all target tokens (EOS
/// included) of a batch, teacher-forced.
Tensor batch_nll(ModelRef model, std::span<const SentencePair> batch, Tracking tracking = {});

/// nll of a single pair; no history is recorded.
double nll(ModelRef model, const SentencePair& pair);

/// Sum of log P(t_m | t_<m, s) over target tokens and EOS, per pair.
std::vector<double> sequence_logprobs(ModelRef model, std::span<const SentencePair> pairs);

/// Incremental decoder with cached keys/values. step(token) feeds one input
/// token (BOS first) and returns log-probabilities for the next token.
class IncrementalDecoder {
 public:
  IncrementalDecoder(ModelRef model, const TokenSeq& source);
  std::vector<double> step(TokenId token);
  std::size_t position() const { return position_; }

 private:
  struct LayerCache {
    std::vector<double> self_k, self_v;    // [position, d]
    std::vector<double> cross_k, cross_v;  // [len(source), d]
  };
  const DecoderParams* decoder_;
  std::size_t source_len_;
  std::size_t position_ = 0;
  std::vector<LayerCache> layers_;
};

/// Teacher-forced per-step log-probability vectors computed with the
/// incremental decoder: row m is the distribution for position m given
/// BOS, t_1..t_m. Returns len(target) + 1 rows.
std::vector<std::vector<double>> step_log_probs(ModelRef model, const TokenSeq& source, const TokenSeq& target);

/// The same rows from the parallel (batched) teacher-forced pass.
std::vector<std::vector<double>> teacher_forced_log_probs(ModelRef model, const SentencePair& pair);

struct DecodeResult {
  TokenSeq tokens;        // without BOS/EOS
  double log_prob = 0.0;  // sum of log-probabilities of emitted tokens (EOS included)
  std::size_t length = 0; // emitted tokens including EOS when present
  bool truncated = false; // max_steps reached without EOS
  double normalized_score() const { return length ? log_prob / static_cast<double>(length) : 0.0; }
};

/// Decoding emits content tokens or EOS (never PAD/BOS/UNK). Equal scores
/// prefer the lower content token id; EOS ranks after every content token.
DecodeResult greedy_decode(ModelRef model, const TokenSeq& source, std::size_t max_steps);

/// Beam search keeping the top beam_width candidates per step (by summed
/// log-probability; ties by token rank then beam index). A candidate ending
/// in EOS leaves the beam. The result is the best length-normalized
/// hypothesis among finished and truncated ones.
DecodeResult beam_decode(ModelRef model, const TokenSeq& source, std::size_t beam_width, std::size_t max_steps);

// ---- Language model ------------------------------------------------------

/// Decoder-only causal language model.
struct LanguageModel {
  ModelConfig config;
  ParameterSet params;
  std::uint64_t checksum() const { return params.checksum(); }
};

LanguageModel init_language_model(const ModelConfig& config, std::uint64_t seed);

/// Mean per-token nll over sentences (EOS included), BOS-conditioned.
Tensor lm_batch_nll(const LanguageModel& lm, std::span<const TokenSeq> sentences, bool track = true);

/// log P(s) = sum over tokens of s and the final EOS.
double lm_logprob(const LanguageModel& lm, const TokenSeq& sentence);
std::vector<double> lm_logprobs(const LanguageModel& lm, std::span<const TokenSeq> sentences);

/// Per-position next-token log-probability rows (len(sentence) + 1 rows).
std::vector<std::vector<double>> lm_position_log_probs(const LanguageModel& lm, const TokenSeq& sentence);

// ---- Checkpoints -----------------------------------------------------------

void save_model(const std::filesystem::path& path, const EncoderDecoderModel& model);
EncoderDecoderModel load_model(const std::filesystem::path& path, const ModelConfig& config);
void save_language_model(const std::filesystem::path& path, const LanguageModel& lm);
LanguageModel load_language_model(const std::filesystem::path& path, const ModelConfig& config);

}  // namespace epi
