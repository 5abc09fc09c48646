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

#include "epi/curriculum.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "epi/errors.hpp"
#include "epi/log.hpp"

namespace epi {

namespace {

void fit_translation(EncoderDecoderModel& model, const std::vector<SentencePair>& pool, std::size_t steps,
                     const ScorerRecipe& recipe, Rng& rng) {
  if (steps == 0) return;
  if (pool.empty()) throw ContractError("cannot fit a scorer on an empty corpus");
  std::vector<SentencePair> batch(recipe.batch_size);
  for (std::size_t s = 0; s < steps; ++s) {
    for (auto& p : batch) p = pool[rng.uniform_index(pool.size())];
    backward(batch_nll(model.ref(), batch));
    sgd_step(model.encoder.params, recipe.lr);
    sgd_step(model.decoder.params, recipe.lr);
  }
}

void fit_lm(LanguageModel& lm, const std::vector<TokenSeq>& pool, std::size_t steps, const ScorerRecipe& recipe,
            Rng& rng) {
  if (steps == 0) return;
  if (pool.empty()) throw ContractError("cannot fit a language model on an empty corpus");
  std::vector<TokenSeq> batch(recipe.batch_size);
  for (std::size_t s = 0; s < steps; ++s) {
    for (auto& t : batch) t = pool[rng.uniform_index(pool.size())];
    backward(lm_batch_nll(lm, batch));
    sgd_step(lm.params, recipe.lr);
  }
}

std::string recipe_note(const char* what, std::size_t steps, const ScorerRecipe& r, std::uint64_t seed) {
  return std::string(what) + ": " + std::to_string(steps) + " steps, lr " + std::to_string(r.lr) + ", batch " +
         std::to_string(r.batch_size) + ", seed " + std::to_string(seed);
}

}  // namespace

DenoiseScorer build_denoise_scorer(const EncoderDecoderModel& base,
                                   const std::map<int, std::vector<SentencePair>>& trusted,
                                   const ScorerRecipe& recipe) {
  DenoiseScorer scorer{base, {}, {}};
  for (const auto& [id, pairs] : trusted) {
    EncoderDecoderModel m = base;
    const std::uint64_t seed = derive_seed(recipe.seed, 1000 + static_cast<std::uint64_t>(id));
    Rng rng(seed);
    fit_translation(m, pairs, recipe.finetune_steps, recipe, rng);
    scorer.domain_models.emplace(id, std::move(m));
    scorer.provenance[id] = recipe_note("base fine-tuned on trusted pairs", recipe.finetune_steps, recipe, seed);
  }
  return scorer;
}

DivergenceScorer build_divergence_scorer(const ModelConfig& config, const std::vector<TokenSeq>& generic_sentences,
                                         const std::map<int, std::vector<TokenSeq>>& domain_sentences,
                                         const ScorerRecipe& recipe) {
  const std::uint64_t base_seed = derive_seed(recipe.seed, 2000);
  DivergenceScorer scorer{init_language_model(config, base_seed), {}, {}};
  Rng rng(derive_seed(base_seed, 1));
  fit_lm(scorer.base, generic_sentences, recipe.base_steps, recipe, rng);
  for (const auto& [id, sentences] : domain_sentences) {
    LanguageModel lm = scorer.base;
    const std::uint64_t seed = derive_seed(recipe.seed, 3000 + static_cast<std::uint64_t>(id));
    Rng drng(seed);
    fit_lm(lm, sentences, recipe.finetune_steps, recipe, drng);
    scorer.domain_lms.emplace(id, std::move(lm));
    scorer.provenance[id] = recipe_note("base LM fine-tuned on domain sources", recipe.finetune_steps, recipe, seed);
  }
  return scorer;
}

double length_normalized_gain(double logp_domain, double logp_base, std::size_t count) {
  if (count == 0) throw ContractError("length normalization over zero tokens");
  return (logp_domain - logp_base) / static_cast<double>(count);
}

namespace {

const EncoderDecoderModel& domain_model(const DenoiseScorer& s, int id) {
  auto it = s.domain_models.find(id);
  if (it == s.domain_models.end()) throw LookupError("denoise scorer has no model for domain " + std::to_string(id));
  return it->second;
}

const LanguageModel& domain_lm(const DivergenceScorer& s, int id) {
  auto it = s.domain_lms.find(id);
  if (it == s.domain_lms.end()) throw LookupError("divergence scorer has no LM for domain " + std::to_string(id));
  return it->second;
}

// Groups pair indices by domain, preserving order.
std::map<int, std::vector<std::size_t>> by_domain(const std::vector<SentencePair>& pairs) {
  std::map<int, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < pairs.size(); ++i) out[pairs[i].domain_id].push_back(i);
  return out;
}

}  // namespace

double denoise_score(const SentencePair& pair, const DenoiseScorer& scorer) {
  const auto& dm = domain_model(scorer, pair.domain_id);
  std::span<const SentencePair> one(&pair, 1);
  const double lz = sequence_logprobs(dm.ref(), one)[0];
  const double lb = sequence_logprobs(scorer.base.ref(), one)[0];
  return length_normalized_gain(lz, lb, pair.target.size() + 1);
}

void denoise_score_all(std::vector<SentencePair>& pairs, const DenoiseScorer& scorer) {
  for (const auto& [id, idx] : by_domain(pairs)) {
    const auto& dm = domain_model(scorer, id);
    std::vector<SentencePair> group;
    group.reserve(idx.size());
    for (std::size_t i : idx) group.push_back(pairs[i]);
    const auto lz = sequence_logprobs(dm.ref(), group);
    const auto lb = sequence_logprobs(scorer.base.ref(), group);
    for (std::size_t m = 0; m < idx.size(); ++m) {
      pairs[idx[m]].q_score = length_normalized_gain(lz[m], lb[m], group[m].target.size() + 1);
    }
  }
}

double divergence_score(const TokenSeq& sentence, const DivergenceScorer& scorer, int domain_id) {
  const auto& lm = domain_lm(scorer, domain_id);
  return length_normalized_gain(lm_logprob(lm, sentence), lm_logprob(scorer.base, sentence), sentence.size() + 1);
}

void divergence_score_all(std::vector<SentencePair>& pairs, const DivergenceScorer& scorer) {
  for (const auto& [id, idx] : by_domain(pairs)) {
    const auto& lm = domain_lm(scorer, id);
    std::vector<TokenSeq> sources;
    sources.reserve(idx.size());
    for (std::size_t i : idx) sources.push_back(pairs[i].source);
    const auto lz = lm_logprobs(lm, sources);
    const auto lb = lm_logprobs(scorer.base, sources);
    for (std::size_t m = 0; m < idx.size(); ++m) {
      pairs[idx[m]].d_score = length_normalized_gain(lz[m], lb[m], sources[m].size() + 1);
    }
  }
}

FilterResult filter_noise(const std::vector<SentencePair>& scored) {
  FilterResult r;
  for (std::size_t i = 0; i < scored.size(); ++i) {
    const auto& p = scored[i];
    if (!p.q_score) throw ContractError("pair " + std::to_string(i) + " has no denoise score");
    if (*p.q_score < 0.0) {
      ++r.removed;
    } else {
      r.kept.push_back(p);
    }
  }
  return r;
}

// ---- Scheduler --------------------------------------------------------------

std::string variant_name(SchedulerVariant v) {
  switch (v) {
    case SchedulerVariant::default_: return "default";
    case SchedulerVariant::advanced: return "advanced";
    case SchedulerVariant::reversed: return "reversed";
  }
  return "default";
}

SchedulerVariant parse_variant(const std::string& name) {
  if (name == "default") return SchedulerVariant::default_;
  if (name == "advanced") return SchedulerVariant::advanced;
  if (name == "reversed") return SchedulerVariant::reversed;
  throw ConfigError("unknown scheduler variant '" + name + "' (expected default, advanced or reversed)");
}

void SchedulerPolicy::validate() const {
  for (std::size_t s = 0; s < kStages; ++s) {
    double total = 0.0;
    for (double p : stage_matrix[s]) {
      if (!(p >= 0.0) || !std::isfinite(p)) throw ConfigError("stage " + std::to_string(s + 1) + " has a negative entry");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-12) {
      throw ConfigError("stage " + std::to_string(s + 1) + " row sums to " + std::to_string(total) + ", not 1");
    }
  }
  const double b1 = stage_boundaries[0], b2 = stage_boundaries[1];
  if (!(b1 > 0.0 && b1 <= b2 && b2 <= 1.0)) throw ConfigError("stage boundaries must satisfy 0 < b1 <= b2 <= 1");
}

SchedulerPolicy make_policy(SchedulerVariant variant) {
  using Row = std::array<double, kShards>;
  const Row easy_first{0.40, 0.25, 0.15, 0.12, 0.08};
  const Row flatter{0.30, 0.25, 0.20, 0.15, 0.10};
  const Row uniform{0.2, 0.2, 0.2, 0.2, 0.2};
  SchedulerPolicy p;
  p.variant = variant;
  switch (variant) {
    case SchedulerVariant::default_:
      p.stage_matrix = {easy_first, flatter, uniform};
      break;
    case SchedulerVariant::advanced:
      p.stage_matrix = {easy_first, easy_first, uniform};
      break;
    case SchedulerVariant::reversed: {
      p.stage_matrix = make_policy(SchedulerVariant::default_).stage_matrix;
      for (auto& row : p.stage_matrix) std::reverse(row.begin(), row.end());
      break;
    }
  }
  return p;
}

std::size_t stage_of(double progress, const SchedulerPolicy& policy) {
  if (progress < policy.stage_boundaries[0]) return 1;
  if (progress < policy.stage_boundaries[1]) return 2;
  return 3;
}

void to_json(json& j, const SchedulerPolicy& p) {
  j = json{{"variant", variant_name(p.variant)}, {"stage_matrix", p.stage_matrix}, {"stage_boundaries", p.stage_boundaries}};
}

void from_json(const json& j, SchedulerPolicy& p) {
  require_keys(j, {"variant", "stage_matrix", "stage_boundaries"}, "policy");
  p = make_policy(parse_variant(j.value("variant", std::string("default"))));
  if (j.contains("stage_matrix")) {
    const auto& m = j.at("stage_matrix");
    if (!m.is_array() || m.size() != kStages) throw ConfigError("policy.stage_matrix must have 3 rows");
    for (std::size_t s = 0; s < kStages; ++s) {
      if (!m[s].is_array() || m[s].size() != kShards) throw ConfigError("policy.stage_matrix rows must have 5 entries");
      for (std::size_t k = 0; k < kShards; ++k) p.stage_matrix[s][k] = m[s][k].get<double>();
    }
  }
  if (j.contains("stage_boundaries")) {
    const auto& b = j.at("stage_boundaries");
    if (!b.is_array() || b.size() != 2) throw ConfigError("policy.stage_boundaries must have 2 entries");
    p.stage_boundaries = {b[0].get<double>(), b[1].get<double>()};
  }
  p.validate();
}

// ---- Plan -------------------------------------------------------------------

std::size_t CurriculumPlan::size() const {
  std::size_t n = 0;
  for (const auto& s : shards) n += s.size();
  return n;
}

void CurriculumPlan::index_domains() {
  by_domain_.clear();
  for (std::size_t k = 0; k < kShards; ++k) {
    for (std::size_t m = 0; m < shards[k].size(); ++m) by_domain_[shards[k][m].domain_id][k].push_back(m);
  }
}

const std::vector<std::size_t>& CurriculumPlan::domain_members(int domain_id, std::size_t shard) const {
  static const std::vector<std::size_t> empty;
  auto it = by_domain_.find(domain_id);
  return it == by_domain_.end() ? empty : it->second.at(shard);
}

CurriculumPlan build_plan(const std::vector<SentencePair>& kept, const SchedulerPolicy& policy,
                          std::size_t filtered_count) {
  policy.validate();
  if (kept.size() < kShards) throw SizeError("a curriculum plan needs at least 5 pairs, got " + std::to_string(kept.size()));
  for (std::size_t i = 0; i < kept.size(); ++i) {
    if (!kept[i].d_score) throw ContractError("pair " + std::to_string(i) + " has no divergence score");
  }
  std::vector<std::size_t> order(kept.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return *kept[a].d_score < *kept[b].d_score; });

  CurriculumPlan plan;
  plan.policy = policy;
  plan.filtered_count = filtered_count;
  const std::size_t base = kept.size() / kShards;
  const std::size_t extra = kept.size() % kShards;
  std::size_t next = 0;
  for (std::size_t k = 0; k < kShards; ++k) {
    const std::size_t n = base + (k < extra ? 1 : 0);
    for (std::size_t m = 0; m < n; ++m, ++next) {
      plan.shards[k].push_back(kept[order[next]]);
      plan.origin[k].push_back(order[next]);
    }
    if (k + 1 < kShards) plan.shard_thresholds[k] = *plan.shards[k].back().d_score;
  }
  plan.index_domains();
  return plan;
}

std::vector<SentencePair> sample_batch(const CurriculumPlan& plan, std::size_t stage, std::size_t batch_size, Rng& rng,
                                       std::optional<int> domain) {
  if (batch_size == 0) throw ContractError("batch_size must be at least 1");
  if (stage < 1 || stage > kStages) throw ContractError("stage must be 1, 2 or 3");
  std::array<double, kShards> row = plan.policy.stage_matrix[stage - 1];
  std::array<std::size_t, kShards> avail{};
  for (std::size_t k = 0; k < kShards; ++k) {
    avail[k] = domain ? plan.domain_members(*domain, k).size() : plan.shards[k].size();
  }
  bool dropped = false;
  double mass = 0.0;
  for (std::size_t k = 0; k < kShards; ++k) {
    if (avail[k] == 0 && row[k] > 0.0) {
      row[k] = 0.0;
      dropped = true;
    }
    mass += row[k];
  }
  if (mass <= 0.0) {
    throw ContractError(domain ? "no eligible pairs for domain " + std::to_string(*domain) + " in the plan"
                               : std::string("no eligible pairs in the plan"));
  }
  if (dropped) log_warn("sample_batch: empty shard with nonzero probability; renormalizing over nonempty shards");

  std::vector<SentencePair> out;
  out.reserve(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const std::size_t k = rng.categorical(row);
    const std::size_t m = rng.uniform_index(avail[k]);
    out.push_back(plan.shards[k][domain ? plan.domain_members(*domain, k)[m] : m]);
  }
  return out;
}

std::size_t bin_index(double d_score, const std::array<double, kShards - 1>& thresholds) {
  for (std::size_t k = 0; k < thresholds.size(); ++k) {
    if (d_score <= thresholds[k]) return k;
  }
  return kShards - 1;
}

std::array<std::vector<SentencePair>, kShards> bin_testset(const std::vector<SentencePair>& test_pairs,
                                                           const std::array<double, kShards - 1>& thresholds) {
  std::array<std::vector<SentencePair>, kShards> bins;
  for (std::size_t i = 0; i < test_pairs.size(); ++i) {
    const auto& p = test_pairs[i];
    if (!p.d_score) throw ContractError("test pair " + std::to_string(i) + " has no divergence score");
    bins[bin_index(*p.d_score, thresholds)].push_back(p);
  }
  return bins;
}

json plan_to_json(const CurriculumPlan& plan, std::span<const std::size_t> file_index) {
  json shards = json::array();
  for (std::size_t k = 0; k < kShards; ++k) {
    json idx = json::array();
    for (std::size_t o : plan.origin[k]) idx.push_back(file_index.empty() ? o : file_index[o]);
    shards.push_back(std::move(idx));
  }
  std::vector<std::size_t> sizes;
  for (const auto& s : plan.shards) sizes.push_back(s.size());
  return json{{"policy", plan.policy},
              {"shard_thresholds", plan.shard_thresholds},
              {"filtered_count", plan.filtered_count},
              {"shard_sizes", sizes},
              {"shards", shards}};
}

CurriculumPlan plan_from_json(const json& j, const std::vector<SentencePair>& corpus) {
  require_keys(j, {"policy", "shard_thresholds", "filtered_count", "shard_sizes", "shards"}, "plan");
  CurriculumPlan plan;
  plan.policy = j.at("policy").get<SchedulerPolicy>();
  plan.filtered_count = j.at("filtered_count").get<std::size_t>();
  const auto& th = j.at("shard_thresholds");
  if (!th.is_array() || th.size() != kShards - 1) throw ParseError("plan: expected 4 shard thresholds");
  for (std::size_t k = 0; k + 1 < kShards; ++k) plan.shard_thresholds[k] = th[k].get<double>();
  const auto& shards = j.at("shards");
  if (!shards.is_array() || shards.size() != kShards) throw ParseError("plan: expected 5 shards");
  for (std::size_t k = 0; k < kShards; ++k) {
    for (const auto& v : shards[k]) {
      const auto idx = v.get<std::size_t>();
      if (idx >= corpus.size()) throw ParseError("plan: shard index " + std::to_string(idx) + " out of range");
      plan.shards[k].push_back(corpus[idx]);
      plan.origin[k].push_back(idx);
    }
  }
  plan.index_domains();
  return plan;
}

}  // namespace epi
