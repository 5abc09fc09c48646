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
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "epi/corpus.hpp"
#include "epi/curriculum.hpp"
#include "epi/eval.hpp"
#include "epi/json.hpp"
#include "epi/model.hpp"
#include "epi/trainers.hpp"

namespace epi {

/// Training methods of the comparison group, in report order.
const std::vector<std::string>& all_methods();
bool is_method(const std::string& name);
bool needs_plan(const std::string& method);  // agg_curriculum, epi_curriculum

void to_json(json& j, const ModelConfig& c);
void from_json(const json& j, ModelConfig& c);
void to_json(json& j, const ScorerRecipe& r);
void from_json(const json& j, ScorerRecipe& r);

struct RunConfig {
  std::uint64_t seed = 1;  // master seed; run r of an experiment uses seed + r
  std::string output_dir = "runs";
  DatasetConfig dataset;
  ModelConfig model;
  struct Curriculum {
    SchedulerPolicy policy = make_policy(SchedulerVariant::default_);
    bool denoise = true;
    ScorerRecipe scorer;
    bool operator==(const Curriculum&) const = default;
  } curriculum;
  struct Training {
    Hyperparams pretrain;     // Vanilla: alpha is the lr
    Hyperparams hyperparams;  // every other method
    std::vector<std::string> methods = all_methods();
    /// Per-method hyperparameter keys replacing those of hyperparams.
    std::map<std::string, json> overrides;
    bool operator==(const Training&) const = default;
  } training;
  struct Eval {
    std::size_t n_seeds = 3;
    std::vector<double> sigmas{0.01, 0.02, 0.03};
    std::size_t noise_seeds = 3;
    DecodeOptions decode;
    std::vector<std::string> swap_methods = {"agg", "epi_nmt", "epi_curriculum"};
    std::vector<std::string> perturb_methods = {"agg", "epi_nmt", "epi_curriculum"};
    bool operator==(const Eval&) const = default;
  } eval;

  /// training.hyperparams with the method's overrides applied.
  Hyperparams hyperparams_for(const std::string& method) const;
  /// Throws ConfigError on any invalid or inconsistent value.
  void validate() const;
  /// 16 hex digits over the canonical JSON without the master seed.
  std::string hash() const;
  bool operator==(const RunConfig&) const = default;
};

void to_json(json& j, const RunConfig& c);
/// Unknown keys anywhere are rejected; missing keys keep their defaults.
void from_json(const json& j, RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& path);

/// Component seeds of one run.
struct RunSeeds {
  std::uint64_t run = 0;
  std::uint64_t pretrain() const { return derive_seed(run, 2); }
  std::uint64_t scorer() const { return derive_seed(run, 3); }
  std::uint64_t training() const { return derive_seed(run, 4); }
  std::uint64_t finetune() const { return derive_seed(run, 5); }
  std::uint64_t noise(std::size_t j) const { return derive_seed(run, 6 + j); }
};

// ---- Pipeline steps -----------------------------------------------------------

EncoderDecoderModel train_vanilla(const RunConfig& cfg, const MultiDomainDataset& data, RunSeeds seeds,
                                  LossCurve* curve = nullptr);

struct DenoiseStats {
  std::size_t noise_total = 0, noise_removed = 0;
  std::size_t clean_total = 0, clean_removed = 0;
  double noise_removed_fraction() const;
  double clean_removed_fraction() const;
};

struct ScoredData {
  std::vector<SentencePair> scored;  // every seen training pair, with q (if denoising) and d
  std::vector<std::size_t> kept_index;  // positions in scored of the kept pairs
  CurriculumPlan plan;
  DenoiseStats stats;
  std::map<int, std::vector<SentencePair>> scored_tests;  // seen test subsets with d
  std::map<int, std::string> provenance;
};

/// Scores seen training pairs (q with the vanilla model as base, d with
/// LMs), filters when denoising is on, and builds the plan.
ScoredData score_corpus(const RunConfig& cfg, const MultiDomainDataset& data, const EncoderDecoderModel& vanilla,
                        RunSeeds seeds);

struct TrainedMethod {
  EncoderDecoderModel model;
  std::vector<EncoderDecoderModel> specialists;  // episodic methods only
  std::vector<int> specialist_domains;
  LossCurve curve;
  EpisodeLog episodes;
};

/// Dispatches to the trainer of method. Curriculum methods need scored data
/// (DependencyError otherwise).
TrainedMethod train_method(const std::string& method, const RunConfig& cfg, const MultiDomainDataset& data,
                           const EncoderDecoderModel& vanilla, const ScoredData* scored, RunSeeds seeds);

// ---- Whole experiment ------------------------------------------------------------

struct SeedResult {
  std::uint64_t seed = 0;
  DenoiseStats denoise;
  std::vector<EvalCell> eval;
  std::vector<SwapReport> swaps;
  PerturbReport perturb;
  std::optional<BinReport> bins;
};

struct ExperimentBundle {
  std::string config_hash;
  std::vector<SeedResult> seeds;
  EvalReport eval;  // all seeds

  double swap_mean(const std::string& method, SwapPart part) const;
  /// BLEU(sigma = 0) - BLEU(sigma), mean over seeds, noise seeds and domains.
  double degradation(const std::string& method, double sigma) const;
  double spearman_mean(const std::string& method) const;
  double denoise_noise_removed() const;
  double denoise_clean_removed() const;
};

/// Protocol, swaps (against the specialists of epi_curriculum, else
/// epi_nmt), perturbation and divergence bins for one seed's trained
/// methods.
SeedResult evaluate_seed(const RunConfig& cfg, const MultiDomainDataset& data, std::uint64_t seed,
                         const std::map<std::string, const TrainedMethod*>& trained, const ScoredData& scored);

json seed_json(const SeedResult& r);
json bundle_json(const ExperimentBundle& b);
/// Checks the documented bundle layout; returns the list of problems.
std::vector<std::string> validate_bundle_json(const json& j);

}  // namespace epi
