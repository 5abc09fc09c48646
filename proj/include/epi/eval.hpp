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
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "epi/corpus.hpp"
#include "epi/curriculum.hpp"
#include "epi/json.hpp"
#include "epi/model.hpp"
#include "epi/trainers.hpp"

namespace epi {

struct BleuScore {
  double score = 0.0;
  std::array<double, 4> precisions{};
  double brevity_penalty = 0.0;
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
};

inline constexpr double kBleuSmoothing = 0.1;

/// Corpus BLEU over token ids: clipped 1-4-gram precisions, geometric mean,
/// exponential brevity penalty. A zero match count at order n becomes
/// epsilon / total_n. Orders with no hypothesis n-grams at all are left out
/// of the mean. Throws ContractError on a count mismatch.
BleuScore corpus_bleu(const std::vector<TokenSeq>& hypotheses, const std::vector<TokenSeq>& references,
                      double epsilon = kBleuSmoothing);

struct DecodeOptions {
  std::size_t beam_width = 5;
  std::size_t max_test_pairs = 0;  // 0 = whole test split
  bool operator==(const DecodeOptions&) const = default;
};

/// Decode budget for one source: 2 * len + 4 (clamped to max_len - 1).
std::size_t decode_budget(const TokenSeq& source);

std::vector<TokenSeq> translate(ModelRef model, const std::vector<SentencePair>& pairs, const DecodeOptions& opts);
std::vector<TokenSeq> references(const std::vector<SentencePair>& pairs);

/// The test pairs evaluated under opts (a prefix when max_test_pairs caps it).
std::vector<SentencePair> test_subset(const std::vector<SentencePair>& testing, const DecodeOptions& opts);

// ---- Protocol ------------------------------------------------------------------

struct EvalCell {
  std::string method;
  int domain = 0;
  bool seen = false;
  std::uint64_t seed = 0;
  double bleu_before = 0.0;
  double bleu_after = 0.0;
  double delta_ft = 0.0;
};

struct AggregateCell {
  std::string method;
  int domain = 0;
  bool seen = false;
  double before_mean = 0.0, before_std = 0.0;
  double after_mean = 0.0, after_std = 0.0;
  double delta_mean = 0.0, delta_std = 0.0;
  std::size_t seeds = 0;
};

struct EvalReport {
  std::vector<EvalCell> cells;  // one per (seed, method, domain)
  std::vector<AggregateCell> aggregate() const;
  /// Mean over seeds and over the seen (or unseen) domains.
  double mean(const std::string& method, bool seen, const char* metric) const;
};

/// Before-FT hypotheses per domain, kept for the divergence-bin analysis.
using Hypotheses = std::map<int, std::vector<TokenSeq>>;

/// For each method and evaluation domain: decode the test split, fine-tune a
/// copy on the domain's fine-tuning split, decode again.
std::vector<EvalCell> evaluate_before_after(const std::map<std::string, const EncoderDecoderModel*>& models,
                                            const MultiDomainDataset& data, const Hyperparams& hp,
                                            const DecodeOptions& opts, std::uint64_t seed,
                                            std::map<std::string, Hypotheses>* before_hyps = nullptr);

struct ProtocolRun {
  std::uint64_t seed = 0;
  const MultiDomainDataset* data = nullptr;
  std::map<std::string, const EncoderDecoderModel*> models;
};

/// Runs evaluate_before_after for every seed run; a run lacking one of the
/// methods is a LookupError.
EvalReport run_protocol(const std::vector<std::string>& methods, const std::vector<ProtocolRun>& runs,
                        const Hyperparams& hp, const DecodeOptions& opts);

// ---- Module swap -----------------------------------------------------------------

enum class SwapPart { encoder, decoder };
std::string part_name(SwapPart part);

struct SwapCell {
  int domain = 0;
  bool seen = false;
  double mean_improvement = 0.0;
  std::size_t specialists = 0;  // number averaged
};

struct SwapReport {
  std::string method;
  SwapPart part = SwapPart::encoder;
  std::vector<SwapCell> cells;
  double domain_mean() const;
};

/// BLEU(trained part + specialist's other part) - BLEU(specialist) on test.
double swap_gain(const EncoderDecoderModel& trained, const EncoderDecoderModel& specialist,
                 const std::vector<SentencePair>& test, SwapPart part, const DecodeOptions& opts);

/// Specialist BLEU on each evaluation domain, cacheable across swap calls.
using SpecialistBleu = std::map<std::pair<int, int>, double>;  // (specialist domain, target domain)
SpecialistBleu specialist_bleu(const std::vector<EncoderDecoderModel>& specialists, const std::vector<int>& domains,
                               const MultiDomainDataset& data, const DecodeOptions& opts);

/// For each evaluation domain d: mean over specialists s with domain(s) != d
/// of BLEU(trained part + specialist's other part) - BLEU(specialist).
SwapReport swap_experiment(const std::string& method, const EncoderDecoderModel& trained,
                           const std::vector<EncoderDecoderModel>& specialists, const std::vector<int>& domains,
                           const MultiDomainDataset& data, SwapPart part, const DecodeOptions& opts,
                           const SpecialistBleu* cache = nullptr);

// ---- Perturbation ---------------------------------------------------------------

struct PerturbCell {
  std::string method;
  double sigma = 0.0;
  int domain = 0;
  std::uint64_t noise_seed = 0;
  double bleu = 0.0;
};

struct PerturbReport {
  std::vector<PerturbCell> cells;
  /// Mean over noise seeds and domains.
  double mean_bleu(const std::string& method, double sigma) const;
};

/// Copy of model with i.i.d. N(0, sigma^2) noise added to every parameter.
EncoderDecoderModel perturb(const EncoderDecoderModel& model, double sigma, std::uint64_t noise_seed);

/// sigma = 0 cells are the unperturbed model (decoded once, shared by all
/// noise seeds); they are always reported, listed in sigmas or not. The
/// noise of level index si is derive_seed(noise_seed, si) for every method.
PerturbReport perturb_experiment(const std::map<std::string, const EncoderDecoderModel*>& models,
                                 const MultiDomainDataset& data, const std::vector<double>& sigmas,
                                 const std::vector<std::uint64_t>& noise_seeds, const DecodeOptions& opts);

// ---- Divergence bins ---------------------------------------------------------------

struct BinReport {
  std::vector<std::string> methods;
  std::array<std::size_t, kShards> bin_sizes{};
  std::map<std::string, std::array<double, kShards>> bleu;  // per method, per bin
  double spearman(const std::string& method) const;
};

/// Bins the seen-domain test pairs (carrying d_score) by the plan thresholds
/// and scores each method's Before-FT hypotheses per bin. Empty bins score 0
/// and are excluded from the rank correlation.
BinReport bin_report(const std::map<std::string, Hypotheses>& before_hyps, const CurriculumPlan& plan,
                     const std::map<int, std::vector<SentencePair>>& scored_tests);

/// Spearman rank correlation with average ranks for ties (0 when either
/// side is constant or fewer than two points).
double spearman(const std::vector<double>& x, const std::vector<double>& y);

double mean_of(const std::vector<double>& v);
double stddev_of(const std::vector<double>& v);

// ---- Serialization ---------------------------------------------------------------

json report_json(const EvalReport& r);
json report_json(const SwapReport& r);
json report_json(const PerturbReport& r);
json report_json(const BinReport& r);

/// Flat CSV rows: method,domain,seen_flag,metric,value,seed.
void write_eval_csv(const EvalReport& r, const std::filesystem::path& path);

}  // namespace epi
