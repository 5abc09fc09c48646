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
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "epi/curriculum.hpp"
#include "epi/json.hpp"
#include "epi/model.hpp"
#include "epi/random.hpp"

namespace epi {

struct Hyperparams {
  double alpha = 3e-3;  // aggregation / episodic learning rate
  double beta = 5e-3;   // domain-specific learning rate
  std::size_t epochs = 1;
  /// When nonzero, the number of update steps (episodes, meta-iterations)
  /// instead of epochs * ceil(corpus / batch_size).
  std::size_t steps = 0;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  std::size_t finetune_epochs = 5;
  double finetune_lr = 3e-3;

  void validate() const;
  /// Update steps for a corpus of n pairs.
  std::size_t total_steps(std::size_t n) const;
  bool operator==(const Hyperparams&) const = default;
};

void to_json(json& j, const Hyperparams& hp);
void from_json(const json& j, Hyperparams& hp);

/// Loss of a batch under the pairing (theta, phi). Parts not tracked are
/// frozen: gradient flows through their activations but never reaches their
/// parameters. The default is batch_nll over compose(theta, phi).
using PairLoss = std::function<Tensor(const EncoderParams& theta, const DecoderParams& phi,
                                      std::span<const SentencePair> batch, Tracking tracking)>;
PairLoss nll_loss();

/// Where training batches come from: a flat corpus sampled uniformly, or a
/// curriculum plan sampled by stage. Both sample with replacement and may be
/// restricted to one domain.
class BatchSource {
 public:
  static BatchSource uniform(std::vector<SentencePair> pairs);
  static BatchSource curriculum(CurriculumPlan plan);

  std::vector<SentencePair> sample(std::size_t n, Rng& rng, std::size_t stage = 3,
                                   std::optional<int> domain = std::nullopt) const;
  bool has_domain(int domain_id) const;
  std::size_t size() const;
  bool is_curriculum() const { return plan_.has_value(); }
  const CurriculumPlan* plan() const { return plan_ ? &*plan_ : nullptr; }

 private:
  std::vector<SentencePair> pairs_;
  std::map<int, std::vector<std::size_t>> by_domain_;
  std::optional<CurriculumPlan> plan_;
};

/// Loss value per update step.
struct LossCurve {
  std::vector<double> losses;
  void write_csv(const std::filesystem::path& path) const;
};

/// Plain nll minimization with epoch-wise shuffled batches at learning rate
/// lr. Returns the per-step losses.
LossCurve train_epochs(EncoderDecoderModel& model, const std::vector<SentencePair>& corpus, std::size_t epochs,
                       std::size_t steps, std::size_t batch_size, double lr, std::uint64_t seed,
                       const PairLoss& loss = nll_loss());

/// Random init from (config, hp.seed) followed by nll training on the
/// generic corpus at lr alpha.
EncoderDecoderModel pretrain_vanilla(const ModelConfig& config, const std::vector<SentencePair>& generic_corpus,
                                     const Hyperparams& hp, LossCurve* curve = nullptr);

/// Continues from model on batches drawn uniformly across seen domains (or
/// by curriculum stage when the source is a plan); theta and phi both step
/// at lr alpha.
EncoderDecoderModel train_agg(const EncoderDecoderModel& start, const BatchSource& source, const Hyperparams& hp,
                              LossCurve* curve = nullptr, const PairLoss& loss = nll_loss());

// ---- Episodic training ---------------------------------------------------

struct EpisodicState {
  EncoderDecoderModel agg;
  std::vector<EncoderDecoderModel> specialists;  // one per seen domain
  std::vector<int> domains;                      // seen domain id of each specialist
  Hyperparams hp;
  std::size_t episode = 0;
  std::size_t total_episodes = 0;

  std::size_t index_of(int domain_id) const;
};

/// agg and every specialist start as copies of start.
EpisodicState init_episodic(const EncoderDecoderModel& start, const std::vector<int>& seen_domains, const Hyperparams& hp,
                            std::size_t total_episodes);

struct EpisodeRecord {
  std::size_t episode = 0;
  std::size_t stage = 0;
  int domain_i = 0;
  int partner_k = 0;
  double loss_agg = 0.0;
  double loss_i = 0.0;
  double loss_enc = 0.0;
  double loss_dec = 0.0;
};

struct EpisodeLog {
  std::vector<EpisodeRecord> records;
  void write_csv(const std::filesystem::path& path) const;
};

/// Uniform over specialist indices other than i. Throws ConfigError when
/// fewer than two domains exist.
std::size_t draw_partner(std::size_t n, std::size_t i, Rng& rng);

/// One SGD step of specialist idx at lr beta on its own-domain batch.
/// Returns the loss. A batch pair from another domain is a ContractError.
double specialist_step(EpisodicState& state, std::size_t idx, std::span<const SentencePair> batch,
                       const PairLoss& loss = nll_loss());

/// L_enc for batch_i through agg's encoder and specialist k's frozen decoder.
/// Accumulates gradient into agg.encoder only.
double accumulate_encoder_loss(EpisodicState& state, std::size_t k, std::span<const SentencePair> batch,
                               const PairLoss& loss = nll_loss());
/// L_dec through specialist k's frozen encoder and agg's decoder.
/// Accumulates gradient into agg.decoder only.
double accumulate_decoder_loss(EpisodicState& state, std::size_t k, std::span<const SentencePair> batch,
                               const PairLoss& loss = nll_loss());

/// Draws k != i, takes one SGD step on agg's encoder with L_enc alone and
/// returns (L_enc, k).
std::pair<double, std::size_t> episodic_encoder_step(EpisodicState& state, std::size_t i,
                                                     std::span<const SentencePair> batch, Rng& rng,
                                                     const PairLoss& loss = nll_loss());
std::pair<double, std::size_t> episodic_decoder_step(EpisodicState& state, std::size_t i,
                                                     std::span<const SentencePair> batch, Rng& rng,
                                                     const PairLoss& loss = nll_loss());

enum class EpisodePhase { specialists_done, episodic_done };
using EpisodeHook = std::function<void(const EpisodicState&, EpisodePhase, const EpisodeRecord&)>;

/// One episode:
///  1. i = episode mod n; stage from progress episode / total_episodes.
///  2. batch_i drawn from the source restricted to domain i.
///  3. every specialist j steps at beta on a fresh batch of domain j.
///  4. k drawn uniformly from the other domains.
///  5. gradients of L_agg, L_enc (decoder k frozen) and L_dec (encoder k
///     frozen) on batch_i are summed; theta and phi step once at alpha.
EpisodeRecord run_episode(EpisodicState& state, const BatchSource& source, Rng& rng,
                          const PairLoss& loss = nll_loss(), const EpisodeHook& hook = {});

/// Runs state.total_episodes - state.episode episodes.
EpisodeLog epi_train(EpisodicState& state, const BatchSource& source, const PairLoss& loss = nll_loss(),
                     const EpisodeHook& hook = {});

/// First-order MAML: per iteration a random seen domain, a support and a
/// query batch; adapt a copy one step at beta on support, then apply the
/// query gradient taken at the adapted parameters to the original at alpha.
EncoderDecoderModel maml_train(const EncoderDecoderModel& start, const BatchSource& source,
                               const std::vector<int>& seen_domains, const Hyperparams& hp, LossCurve* curve = nullptr,
                               const PairLoss& loss = nll_loss());

/// Copy of model trained for hp.finetune_epochs at hp.finetune_lr on the
/// domain's fine-tuning split.
EncoderDecoderModel finetune(const EncoderDecoderModel& model, const std::vector<SentencePair>& pairs,
                             const Hyperparams& hp, std::uint64_t seed, LossCurve* curve = nullptr);

}  // namespace epi
