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

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "epi/json.hpp"
#include "epi/types.hpp"
#include "epi/vocab.hpp"

namespace epi {

enum class RuleKind { identity, reverse, rotate, swap_adjacent };

struct StructuralRule {
  RuleKind kind = RuleKind::identity;
  std::size_t shift = 0;  // rotate only: left rotation by shift positions

  TokenSeq apply(const TokenSeq& tokens) const;
  bool operator==(const StructuralRule&) const = default;
};

std::string rule_name(const StructuralRule& rule);
StructuralRule parse_rule(const std::string& text);  // "identity", "reverse", "rotate-3", "swap-adjacent"

/// Generator for one synthetic domain. target = rule(substitution(source)).
struct DomainSpec {
  int domain_id = 0;
  std::string name;
  /// substitution[id] is the image of token id; indexed over the whole
  /// vocabulary, identity on reserved ids, bijective on content ids.
  std::vector<TokenId> substitution;
  StructuralRule rule;
  std::size_t min_len = 5;
  std::size_t max_len = 12;
  /// Unnormalized source sampling weights per token id (reserved ids must be
  /// 0). Empty means uniform over content tokens.
  std::vector<double> token_weights;
  std::uint64_t seed = 0;

  /// Throws ConfigError on a non-bijective table or a degenerate length range.
  void validate() const;
  TokenSeq translate(const TokenSeq& source) const;
  bool operator==(const DomainSpec&) const = default;
};

DomainSpec identity_spec(int domain_id, std::size_t vocab_size);

/// n_pairs generated pairs, deterministic per seed, is_noise = false.
std::vector<SentencePair> generate_domain(const DomainSpec& spec, std::size_t n_pairs, std::uint64_t seed);

/// round(fraction * n) pairs (distinct, chosen uniformly) receive the target
/// of a uniformly chosen other pair; is_noise marks exactly those. A corpus
/// with fewer than two pairs gets no corruption.
std::vector<SentencePair> inject_noise(std::vector<SentencePair> pairs, double fraction, std::uint64_t seed);

std::size_t noise_count(std::size_t n, double fraction);

/// Keeps pairs whose source and target lengths both lie in [min_len, max_len].
std::vector<SentencePair> length_filter(const std::vector<SentencePair>& pairs, std::size_t min_len = 5,
                                        std::size_t max_len = 175);

/// Drops later pairs whose source repeats an earlier one.
std::vector<SentencePair> dedupe_sources(const std::vector<SentencePair>& pairs);

std::size_t source_tokens(const std::vector<SentencePair>& pairs);

struct TokenBudgets {
  std::size_t train_tokens = 0;
  std::size_t finetune_tokens = 0;
  std::size_t test_tokens = 0;
  bool operator==(const TokenBudgets&) const = default;
};

struct DatasetSplits {
  std::vector<SentencePair> training;
  std::vector<SentencePair> finetune;
  std::vector<SentencePair> testing;
};

/// Shuffles pairs by seed and fills training, fine-tuning, then testing:
/// pairs are added to a split until its source-token count reaches the
/// budget. Leftover pairs are discarded. Throws BudgetError on shortfall.
DatasetSplits split(const std::vector<SentencePair>& pairs, const TokenBudgets& budgets, std::uint64_t seed);

// ---- Multi-domain dataset -----------------------------------------------

struct DatasetConfig {
  std::size_t vocab_size = 128;
  std::size_t n_seen = 5;
  std::size_t n_unseen = 3;
  std::size_t topic_size = 8;     // tokens per domain topic set
  double topic_boost = 3.0;       // source weight of a domain's own topic tokens vs 1.0
  double generic_topic_weight = 0.05;  // weight of every topic token in the generic domain
  double foreign_topic_weight = 0.3;   // weight of other domains' topic tokens
  std::size_t shifted_terms = 0;  // own topic tokens translated differently than in generic
  std::size_t min_len = 5;
  std::size_t max_len = 12;
  TokenBudgets seen_budgets{20000, 1000, 2000};
  TokenBudgets unseen_budgets{0, 1000, 2000};
  std::size_t generic_train_tokens = 20000;
  double noise_fraction = 0.10;
  std::size_t trusted_size = 200;
  /// One rule per non-generic domain (seen first, then unseen); missing
  /// entries default to identity.
  std::vector<StructuralRule> rules;
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const DatasetConfig&) const = default;
};

struct MultiDomainDataset {
  std::size_t vocab_size = 0;
  int generic_id = 0;
  std::vector<int> seen_ids;
  std::vector<int> unseen_ids;
  std::map<int, DomainSpec> specs;
  std::map<int, DatasetSplits> splits;  // generic has training only
  /// First trusted_size clean generated pairs of each seen domain, held out
  /// of every split.
  std::map<int, std::vector<SentencePair>> trusted;

  bool is_seen(int id) const;
  const DatasetSplits& at(int id) const;
  /// Training pairs of every seen domain, in seen-id order.
  std::vector<SentencePair> seen_training() const;
  std::vector<int> eval_ids() const;  // seen then unseen
};

/// Generic domain 0 (identity rule, topic tokens rare), seen domains
/// 1..n_seen, unseen domains after them. Every non-generic domain boosts its
/// own topic token set; the first shifted_terms of those permute their base
/// images among themselves.
std::vector<DomainSpec> default_domain_specs(const DatasetConfig& config);

MultiDomainDataset build_dataset(const DatasetConfig& config);
MultiDomainDataset build_dataset(const DatasetConfig& config, const std::vector<DomainSpec>& specs);

// ---- Files ----------------------------------------------------------------

/// "source<TAB>target" per line. Missing tab is a ParseError with the line.
std::vector<SentencePair> load_tsv(const std::filesystem::path& path, const Vocabulary& vocab, int domain_id = 0);
void save_tsv(const std::vector<SentencePair>& pairs, const std::filesystem::path& path, const Vocabulary& vocab);

/// "source<TAB>target<TAB>domain<TAB>q<TAB>d"; absent scores are empty fields.
std::vector<SentencePair> load_scored_tsv(const std::filesystem::path& path, const Vocabulary& vocab);
void save_scored_tsv(const std::vector<SentencePair>& pairs, const std::filesystem::path& path,
                     const Vocabulary& vocab);

/// Dataset directory: dataset.json (ids, specs, noise indices), vocab.txt,
/// and <id>-{train,finetune,test,trusted}.tsv for every split present.
void save_dataset(const MultiDomainDataset& data, const std::filesystem::path& dir);
/// Inverse of save_dataset, noise flags included. Missing files are an
/// IoError, malformed ones a ParseError.
MultiDomainDataset load_dataset(const std::filesystem::path& dir);

void to_json(nlohmann::json& j, const DomainSpec& spec);
void from_json(const nlohmann::json& j, DomainSpec& spec);
void to_json(nlohmann::json& j, const DatasetConfig& config);
void from_json(const nlohmann::json& j, DatasetConfig& config);

}  // namespace epi
