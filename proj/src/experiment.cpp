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

#include "epi/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>

#include "epi/errors.hpp"
#include "epi/log.hpp"

namespace epi {

namespace fs = std::filesystem;

const std::vector<std::string>& all_methods() {
  static const std::vector<std::string> methods{"vanilla", "agg", "agg_curriculum", "meta_mt", "epi_nmt",
                                                "epi_curriculum"};
  return methods;
}

bool is_method(const std::string& name) {
  const auto& m = all_methods();
  return std::find(m.begin(), m.end(), name) != m.end();
}

bool needs_plan(const std::string& method) { return method == "agg_curriculum" || method == "epi_curriculum"; }

// ---- JSON ---------------------------------------------------------------------

void to_json(json& j, const ModelConfig& c) {
  j = json{{"d_model", c.d_model},   {"n_layers", c.n_layers}, {"n_heads", c.n_heads},
           {"d_ff", c.d_ff},         {"max_len", c.max_len},   {"dropout_rate", c.dropout_rate},
           {"vocab_size", c.vocab_size}};
}

void from_json(const json& j, ModelConfig& c) {
  require_keys(j, {"d_model", "n_layers", "n_heads", "d_ff", "max_len", "dropout_rate", "vocab_size"}, "model");
  c = ModelConfig{};
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.max_len = j.value("max_len", c.max_len);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
}

void to_json(json& j, const ScorerRecipe& r) {
  j = json{{"base_steps", r.base_steps},
           {"finetune_steps", r.finetune_steps},
           {"lr", r.lr},
           {"batch_size", r.batch_size},
           {"seed", r.seed}};
}

void from_json(const json& j, ScorerRecipe& r) {
  require_keys(j, {"base_steps", "finetune_steps", "lr", "batch_size", "seed"}, "scorer");
  r = ScorerRecipe{};
  r.base_steps = j.value("base_steps", r.base_steps);
  r.finetune_steps = j.value("finetune_steps", r.finetune_steps);
  r.lr = j.value("lr", r.lr);
  r.batch_size = j.value("batch_size", r.batch_size);
  r.seed = j.value("seed", r.seed);
}

void to_json(json& j, const RunConfig& c) {
  j = json{{"seed", c.seed},
           {"output_dir", c.output_dir},
           {"dataset", c.dataset},
           {"model", c.model},
           {"curriculum", {{"policy", c.curriculum.policy}, {"denoise", c.curriculum.denoise}, {"scorer", c.curriculum.scorer}}},
           {"training",
            {{"pretrain", c.training.pretrain}, {"hyperparams", c.training.hyperparams},
             {"methods", c.training.methods},
             {"overrides", c.training.overrides}}},
           {"eval",
            {{"n_seeds", c.eval.n_seeds},
             {"sigmas", c.eval.sigmas},
             {"noise_seeds", c.eval.noise_seeds},
             {"beam_width", c.eval.decode.beam_width},
             {"max_test_pairs", c.eval.decode.max_test_pairs},
             {"swap_methods", c.eval.swap_methods},
             {"perturb_methods", c.eval.perturb_methods}}}};
}

void from_json(const json& j, RunConfig& c) {
  require_keys(j, {"seed", "output_dir", "dataset", "model", "curriculum", "training", "eval"}, "config");
  c = RunConfig{};
  c.seed = j.value("seed", c.seed);
  c.output_dir = j.value("output_dir", c.output_dir);
  if (j.contains("dataset")) c.dataset = j.at("dataset").get<DatasetConfig>();
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  if (j.contains("curriculum")) {
    const auto& cj = j.at("curriculum");
    require_keys(cj, {"policy", "denoise", "scorer"}, "curriculum");
    if (cj.contains("policy")) c.curriculum.policy = cj.at("policy").get<SchedulerPolicy>();
    c.curriculum.denoise = cj.value("denoise", c.curriculum.denoise);
    if (cj.contains("scorer")) c.curriculum.scorer = cj.at("scorer").get<ScorerRecipe>();
  }
  if (j.contains("training")) {
    const auto& tj = j.at("training");
    require_keys(tj, {"pretrain", "hyperparams", "methods", "overrides"}, "training");
    if (tj.contains("pretrain")) c.training.pretrain = tj.at("pretrain").get<Hyperparams>();
    if (tj.contains("hyperparams")) c.training.hyperparams = tj.at("hyperparams").get<Hyperparams>();
    if (tj.contains("methods")) c.training.methods = tj.at("methods").get<std::vector<std::string>>();
    if (tj.contains("overrides")) {
      if (!tj.at("overrides").is_object()) throw ConfigError("training.overrides must be an object");
      for (const auto& [m, o] : tj.at("overrides").items()) c.training.overrides[m] = o;
    }
  }
  if (j.contains("eval")) {
    const auto& ej = j.at("eval");
    require_keys(ej, {"n_seeds", "sigmas", "noise_seeds", "beam_width", "max_test_pairs", "swap_methods", "perturb_methods"},
                 "eval");
    c.eval.n_seeds = ej.value("n_seeds", c.eval.n_seeds);
    c.eval.sigmas = ej.value("sigmas", c.eval.sigmas);
    c.eval.noise_seeds = ej.value("noise_seeds", c.eval.noise_seeds);
    c.eval.decode.beam_width = ej.value("beam_width", c.eval.decode.beam_width);
    c.eval.decode.max_test_pairs = ej.value("max_test_pairs", c.eval.decode.max_test_pairs);
    c.eval.swap_methods = ej.value("swap_methods", c.eval.swap_methods);
    c.eval.perturb_methods = ej.value("perturb_methods", c.eval.perturb_methods);
  }
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  RunConfig c;
  try {
    c = j.get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

namespace {

void check_methods(const std::vector<std::string>& methods, const std::string& what, bool allow_empty) {
  if (methods.empty() && !allow_empty) throw ConfigError(what + " is empty");
  std::set<std::string> seen;
  for (const auto& m : methods) {
    if (!is_method(m)) throw ConfigError(what + ": unknown method '" + m + "'");
    if (!seen.insert(m).second) throw ConfigError(what + ": duplicate method '" + m + "'");
  }
}

}  // namespace

Hyperparams RunConfig::hyperparams_for(const std::string& method) const {
  auto it = training.overrides.find(method);
  if (it == training.overrides.end()) return training.hyperparams;
  if (!it->second.is_object()) throw ConfigError("training.overrides." + method + " must be an object");
  json merged = training.hyperparams;
  for (const auto& [k, v] : it->second.items()) merged[k] = v;
  return merged.get<Hyperparams>();
}

void RunConfig::validate() const {
  dataset.validate();
  model.validate();
  if (model.vocab_size != dataset.vocab_size) throw ConfigError("model.vocab_size must equal dataset.vocab_size");
  // BOS and EOS around the longest sentence must fit the position table.
  if (model.max_len < dataset.max_len + 2) throw ConfigError("model.max_len too small for dataset.max_len");
  curriculum.policy.validate();
  if (curriculum.scorer.base_steps == 0 || curriculum.scorer.batch_size == 0 || !(curriculum.scorer.lr > 0.0)) {
    throw ConfigError("curriculum.scorer needs positive steps, batch size and lr");
  }
  training.pretrain.validate();
  training.hyperparams.validate();
  check_methods(training.methods, "training.methods", false);
  for (const auto& [m, o] : training.overrides) {
    if (!is_method(m)) throw ConfigError("training.overrides: unknown method '" + m + "'");
    hyperparams_for(m).validate();
  }
  check_methods(eval.swap_methods, "eval.swap_methods", true);
  check_methods(eval.perturb_methods, "eval.perturb_methods", true);
  if (eval.n_seeds == 0) throw ConfigError("eval.n_seeds must be positive");
  if (eval.noise_seeds == 0) throw ConfigError("eval.noise_seeds must be positive");
  if (eval.decode.beam_width == 0) throw ConfigError("eval.beam_width must be positive");
  for (double s : eval.sigmas) {
    if (!(s >= 0.0)) throw ConfigError("eval.sigmas must be non-negative");
  }
}

std::string RunConfig::hash() const {
  json j = *this;
  j.erase("seed");
  j.erase("output_dir");
  const std::string text = j.dump();
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- Pipeline steps -------------------------------------------------------------

EncoderDecoderModel train_vanilla(const RunConfig& cfg, const MultiDomainDataset& data, RunSeeds seeds,
                                  LossCurve* curve) {
  Hyperparams hp = cfg.training.pretrain;
  hp.seed = seeds.pretrain();
  log_info("pretraining vanilla (seed " + std::to_string(seeds.run) + ")");
  return pretrain_vanilla(cfg.model, data.at(data.generic_id).training, hp, curve);
}

double DenoiseStats::noise_removed_fraction() const {
  return noise_total ? static_cast<double>(noise_removed) / static_cast<double>(noise_total) : 0.0;
}

double DenoiseStats::clean_removed_fraction() const {
  return clean_total ? static_cast<double>(clean_removed) / static_cast<double>(clean_total) : 0.0;
}

namespace {

std::vector<TokenSeq> sources_of(const std::vector<SentencePair>& pairs) {
  std::vector<TokenSeq> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(p.source);
  return out;
}

}  // namespace

ScoredData score_corpus(const RunConfig& cfg, const MultiDomainDataset& data, const EncoderDecoderModel& vanilla,
                        RunSeeds seeds) {
  ScoredData out;
  out.scored = data.seen_training();
  ScorerRecipe recipe = cfg.curriculum.scorer;
  recipe.seed = seeds.scorer();

  if (cfg.curriculum.denoise) {
    log_info("fitting denoising scorers");
    const auto dz = build_denoise_scorer(vanilla, data.trusted, recipe);
    denoise_score_all(out.scored, dz);
    out.provenance.insert(dz.provenance.begin(), dz.provenance.end());
  }

  log_info("fitting divergence LMs");
  std::map<int, std::vector<TokenSeq>> domain_sentences;
  for (int id : data.seen_ids) domain_sentences[id] = sources_of(data.at(id).training);
  const auto dv =
      build_divergence_scorer(cfg.model, sources_of(data.at(data.generic_id).training), domain_sentences, recipe);
  divergence_score_all(out.scored, dv);
  for (const auto& [id, text] : dv.provenance) out.provenance[1000 + id] = text;

  std::vector<SentencePair> kept;
  std::size_t removed = 0;
  for (std::size_t i = 0; i < out.scored.size(); ++i) {
    const auto& p = out.scored[i];
    const bool keep = !cfg.curriculum.denoise || *p.q_score >= 0.0;
    (p.is_noise.value_or(false) ? out.stats.noise_total : out.stats.clean_total) += 1;
    if (keep) {
      out.kept_index.push_back(i);
      kept.push_back(p);
    } else {
      ++removed;
      (p.is_noise.value_or(false) ? out.stats.noise_removed : out.stats.clean_removed) += 1;
    }
  }
  out.plan = build_plan(kept, cfg.curriculum.policy, removed);

  for (int id : data.seen_ids) {
    auto tests = test_subset(data.at(id).testing, cfg.eval.decode);
    divergence_score_all(tests, dv);
    out.scored_tests[id] = std::move(tests);
  }
  return out;
}

TrainedMethod train_method(const std::string& method, const RunConfig& cfg, const MultiDomainDataset& data,
                           const EncoderDecoderModel& vanilla, const ScoredData* scored, RunSeeds seeds) {
  if (!is_method(method)) throw ConfigError("unknown method '" + method + "'");
  if (needs_plan(method) && !scored) throw DependencyError(method + " needs a curriculum plan");
  Hyperparams hp = cfg.hyperparams_for(method);
  hp.seed = seeds.training();
  log_info("training " + method + " (seed " + std::to_string(seeds.run) + ")");

  TrainedMethod out{vanilla, {}, {}, {}, {}};
  if (method == "vanilla") return out;

  const BatchSource source = needs_plan(method) ? BatchSource::curriculum(scored->plan)
                                                : BatchSource::uniform(data.seen_training());
  if (method == "agg" || method == "agg_curriculum") {
    out.model = train_agg(vanilla, source, hp, &out.curve);
  } else if (method == "meta_mt") {
    out.model = maml_train(vanilla, source, data.seen_ids, hp, &out.curve);
  } else {
    auto state = init_episodic(vanilla, data.seen_ids, hp, hp.total_steps(source.size()));
    out.episodes = epi_train(state, source);
    out.model = std::move(state.agg);
    out.specialists = std::move(state.specialists);
    out.specialist_domains = std::move(state.domains);
  }
  return out;
}

// ---- Whole experiment ---------------------------------------------------------------

namespace {

bool listed(const std::vector<std::string>& v, const std::string& m) { return std::find(v.begin(), v.end(), m) != v.end(); }

json denoise_json(const DenoiseStats& s) {
  return json{{"noise_total", s.noise_total},
              {"noise_removed", s.noise_removed},
              {"clean_total", s.clean_total},
              {"clean_removed", s.clean_removed},
              {"noise_removed_fraction", s.noise_removed_fraction()},
              {"clean_removed_fraction", s.clean_removed_fraction()}};
}

}  // namespace

json seed_json(const SeedResult& r) {
  json swaps = json::array();
  for (const auto& s : r.swaps) swaps.push_back(report_json(s));
  return json{{"seed", r.seed},
              {"denoise", denoise_json(r.denoise)},
              {"eval", report_json(EvalReport{r.eval})},
              {"swap", swaps},
              {"perturb", report_json(r.perturb)},
              {"bins", r.bins ? report_json(*r.bins) : json(nullptr)}};
}

SeedResult evaluate_seed(const RunConfig& cfg, const MultiDomainDataset& data, std::uint64_t seed,
                         const std::map<std::string, const TrainedMethod*>& trained, const ScoredData& scored) {
  const RunSeeds seeds{seed};
  SeedResult result;
  result.seed = seed;
  result.denoise = scored.stats;

  std::map<std::string, const EncoderDecoderModel*> models;
  for (const auto& [m, t] : trained) models[m] = &t->model;

  Hyperparams ft = cfg.training.hyperparams;
  ft.seed = seeds.finetune();
  std::map<std::string, Hypotheses> before;
  log_info("evaluating before/after fine-tuning");
  result.eval = evaluate_before_after(models, data, ft, cfg.eval.decode, seed, &before);

  // Swaps pair every method with the specialists of the episodic run.
  const TrainedMethod* episodic = nullptr;
  for (const char* name : {"epi_curriculum", "epi_nmt"}) {
    if (!episodic && trained.count(name)) episodic = trained.at(name);
  }
  std::vector<std::string> swapped;
  for (const auto& [m, t] : trained) {
    if (listed(cfg.eval.swap_methods, m)) swapped.push_back(m);
  }
  if (!swapped.empty() && !episodic) log_warn("module swap skipped: no episodic run provides specialists");
  if (!swapped.empty() && episodic) {
    const auto cache = specialist_bleu(episodic->specialists, episodic->specialist_domains, data, cfg.eval.decode);
    for (const auto& m : swapped) {
      log_info("module swap for " + m);
      for (SwapPart part : {SwapPart::encoder, SwapPart::decoder}) {
        result.swaps.push_back(swap_experiment(m, trained.at(m)->model, episodic->specialists,
                                               episodic->specialist_domains, data, part, cfg.eval.decode, &cache));
      }
    }
  }

  std::map<std::string, const EncoderDecoderModel*> perturbed;
  for (const auto& [m, model] : models) {
    if (listed(cfg.eval.perturb_methods, m)) perturbed[m] = model;
  }
  if (!perturbed.empty()) {
    log_info("parameter perturbation");
    std::vector<std::uint64_t> noise_seeds;
    for (std::size_t j = 0; j < cfg.eval.noise_seeds; ++j) noise_seeds.push_back(seeds.noise(j));
    result.perturb = perturb_experiment(perturbed, data, cfg.eval.sigmas, noise_seeds, cfg.eval.decode);
  }

  result.bins = bin_report(before, scored.plan, scored.scored_tests);
  return result;
}

double ExperimentBundle::swap_mean(const std::string& method, SwapPart part) const {
  std::vector<double> v;
  for (const auto& s : seeds) {
    for (const auto& r : s.swaps) {
      if (r.method == method && r.part == part) v.push_back(r.domain_mean());
    }
  }
  if (v.empty()) throw LookupError("no swap report for " + method);
  return mean_of(v);
}

double ExperimentBundle::degradation(const std::string& method, double sigma) const {
  std::vector<double> v;
  for (const auto& s : seeds) v.push_back(s.perturb.mean_bleu(method, 0.0) - s.perturb.mean_bleu(method, sigma));
  return mean_of(v);
}

double ExperimentBundle::spearman_mean(const std::string& method) const {
  std::vector<double> v;
  for (const auto& s : seeds) {
    if (s.bins) v.push_back(s.bins->spearman(method));
  }
  if (v.empty()) throw LookupError("no bin report");
  return mean_of(v);
}

double ExperimentBundle::denoise_noise_removed() const {
  std::vector<double> v;
  for (const auto& s : seeds) v.push_back(s.denoise.noise_removed_fraction());
  return mean_of(v);
}

double ExperimentBundle::denoise_clean_removed() const {
  std::vector<double> v;
  for (const auto& s : seeds) v.push_back(s.denoise.clean_removed_fraction());
  return mean_of(v);
}

json bundle_json(const ExperimentBundle& b) {
  json seeds = json::array();
  for (const auto& s : b.seeds) seeds.push_back(seed_json(s));
  return json{{"config_hash", b.config_hash}, {"eval", report_json(b.eval)}, {"seeds", seeds}};
}

std::vector<std::string> validate_bundle_json(const json& j) {
  std::vector<std::string> problems;
  auto need = [&](const json& obj, const char* key, const std::string& where) {
    if (!obj.is_object() || !obj.contains(key)) {
      problems.push_back(where + ": missing '" + key + "'");
      return false;
    }
    return true;
  };
  if (need(j, "config_hash", "bundle") && !j.at("config_hash").is_string()) problems.push_back("bundle: config_hash not a string");
  if (need(j, "eval", "bundle")) {
    need(j.at("eval"), "cells", "eval");
    need(j.at("eval"), "aggregate", "eval");
  }
  if (need(j, "seeds", "bundle")) {
    if (!j.at("seeds").is_array() || j.at("seeds").empty()) problems.push_back("bundle: seeds must be a nonempty array");
    for (const auto& s : j.at("seeds")) {
      for (const char* key : {"seed", "denoise", "eval", "swap", "perturb", "bins"}) need(s, key, "seed entry");
    }
  }
  if (j.contains("eval") && j.at("eval").contains("cells")) {
    for (const auto& c : j.at("eval").at("cells")) {
      for (const char* key : {"method", "domain", "seen", "seed", "bleu_before", "bleu_after", "delta_ft"}) {
        need(c, key, "eval cell");
      }
    }
  }
  return problems;
}

}  // namespace epi
