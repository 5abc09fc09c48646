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

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "epi/json.hpp"
#include "epi/model.hpp"
#include "epi/random.hpp"
#include "epi/types.hpp"

namespace epi {

inline constexpr std::size_t kShards = 5;
inline constexpr std::size_t kStages = 3;

// ---- Scorers ----------------------------------------------------------------

/// Budget for fitting scorer models. Used both for the base models and for
/// the per-domain fine-tuning runs.
struct ScorerRecipe {
  std::size_t base_steps = 1000;
  std::size_t finetune_steps = 200;
  double lr = 0.1;
  std::size_t batch_size = 16;
  std::uint64_t seed = 7;
  bool operator==(const ScorerRecipe&) const = default;
};

/// Base NMT model and per-domain models fine-tuned from it on trusted data.
struct DenoiseScorer {
  EncoderDecoderModel base;
  std::map<int, EncoderDecoderModel> domain_models;
  std::map<int, std::string> provenance;
};

/// Base LM and per-domain LMs fine-tuned from it on domain source sentences.
struct DivergenceScorer {
  LanguageModel base;
  std::map<int, LanguageModel> domain_lms;
  std::map<int, std::string> provenance;
};

/// Each domain model starts from base and takes recipe.finetune_steps SGD
/// steps on batches sampled from trusted[domain].
DenoiseScorer build_denoise_scorer(const EncoderDecoderModel& base,
                                   const std::map<int, std::vector<SentencePair>>& trusted, const ScorerRecipe& recipe);

/// Fits the base LM on generic sentences for recipe.base_steps, then each
/// domain LM for recipe.finetune_steps on its own sentences.
DivergenceScorer build_divergence_scorer(const ModelConfig& config, const std::vector<TokenSeq>& generic_sentences,
                                         const std::map<int, std::vector<TokenSeq>>& domain_sentences,
                                         const ScorerRecipe& recipe);

/// (logp_domain - logp_base) / count, where count includes EOS.
double length_normalized_gain(double logp_domain, double logp_base, std::size_t count);

/// q_Z = [log P(t|s; domain) - log P(t|s; base)] / (|t| + 1).
double denoise_score(const SentencePair& pair, const DenoiseScorer& scorer);
/// Batched form; writes q_score on every pair.
void denoise_score_all(std::vector<SentencePair>& pairs, const DenoiseScorer& scorer);

/// d_Z = [log P(s; domain LM) - log P(s; base LM)] / (|s| + 1).
double divergence_score(const TokenSeq& sentence, const DivergenceScorer& scorer, int domain_id);
/// Batched form over sources; writes d_score using each pair's domain.
void divergence_score_all(std::vector<SentencePair>& pairs, const DivergenceScorer& scorer);

struct FilterResult {
  std::vector<SentencePair> kept;
  std::size_t removed = 0;
};

/// Removes pairs with q_score < 0. Unscored pairs are a ContractError.
FilterResult filter_noise(const std::vector<SentencePair>& scored);

// ---- Scheduler --------------------------------------------------------------

enum class SchedulerVariant { default_, advanced, reversed };

std::string variant_name(SchedulerVariant v);
SchedulerVariant parse_variant(const std::string& name);

struct SchedulerPolicy {
  SchedulerVariant variant = SchedulerVariant::default_;
  std::array<std::array<double, kShards>, kStages> stage_matrix{};
  std::array<double, 2> stage_boundaries{1.0 / 3.0, 2.0 / 3.0};

  /// Throws ConfigError unless rows are probability vectors (within 1e-12)
  /// and 0 < b1 <= b2 <= 1.
  void validate() const;
  bool operator==(const SchedulerPolicy&) const = default;
};

SchedulerPolicy make_policy(SchedulerVariant variant);

/// Stage 1 for progress < b1, 2 for b1 <= progress < b2, otherwise 3.
std::size_t stage_of(double progress, const SchedulerPolicy& policy);

void to_json(json& j, const SchedulerPolicy& p);
void from_json(const json& j, SchedulerPolicy& p);

// ---- Plan -------------------------------------------------------------------

struct CurriculumPlan {
  std::array<std::vector<SentencePair>, kShards> shards;
  /// thresholds[k] = largest d_score in shard k, k = 0..3.
  std::array<double, kShards - 1> shard_thresholds{};
  /// origin[k][m] is the index of shards[k][m] in the corpus the plan was
  /// built from.
  std::array<std::vector<std::size_t>, kShards> origin;
  SchedulerPolicy policy;
  std::size_t filtered_count = 0;

  std::size_t size() const;
  /// Indices into shards[k] of the pairs with the given domain.
  const std::vector<std::size_t>& domain_members(int domain_id, std::size_t shard) const;
  bool has_domain(int domain_id) const { return by_domain_.count(domain_id) != 0; }
  void index_domains();

 private:
  std::map<int, std::array<std::vector<std::size_t>, kShards>> by_domain_;
};

/// Stable ascending sort by d_score, then five contiguous shards whose sizes
/// differ by at most one (the remainder goes to the first shards). Throws
/// SizeError for fewer than 5 pairs, ContractError for an unscored pair.
CurriculumPlan build_plan(const std::vector<SentencePair>& kept, const SchedulerPolicy& policy,
                          std::size_t filtered_count = 0);

/// Draws batch_size pairs with replacement: a shard by the stage row, then a
/// pair uniformly within it. With a domain, only that domain's pairs are
/// eligible. Shards without eligible pairs are dropped and the row is
/// renormalized (logged as a warning).
std::vector<SentencePair> sample_batch(const CurriculumPlan& plan, std::size_t stage, std::size_t batch_size, Rng& rng,
                                       std::optional<int> domain = std::nullopt);

/// Bin k holds pairs with thresholds[k-1] < d <= thresholds[k] (outer bins
/// unbounded). A pair on a threshold goes to the lower bin.
std::array<std::vector<SentencePair>, kShards> bin_testset(const std::vector<SentencePair>& test_pairs,
                                                           const std::array<double, kShards - 1>& thresholds);
std::size_t bin_index(double d_score, const std::array<double, kShards - 1>& thresholds);

/// Plan file: policy, thresholds, filtered count and per-shard indices into
/// a corpus file. file_index maps plan origins to file lines (empty means
/// the plan was built from the file's own order).
json plan_to_json(const CurriculumPlan& plan, std::span<const std::size_t> file_index = {});
CurriculumPlan plan_from_json(const json& j, const std::vector<SentencePair>& corpus);

}  // namespace epi
