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

#include "epi/workspace.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include "epi/errors.hpp"
#include "epi/log.hpp"

#ifndef EPI_REVISION
#define EPI_REVISION "unknown"
#endif

namespace epi {

namespace fs = std::filesystem;

std::string revision() { return EPI_REVISION; }

namespace {

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
  if (!os) throw IoError("write failed for " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  try {
    json j;
    is >> j;
    return j;
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string method_dir(const std::string& method) { return "train/" + method; }

json stats_json(const DenoiseStats& s) {
  return json{{"noise_total", s.noise_total},
              {"noise_removed", s.noise_removed},
              {"clean_total", s.clean_total},
              {"clean_removed", s.clean_removed}};
}

DenoiseStats stats_from(const json& j) {
  DenoiseStats s;
  s.noise_total = j.at("noise_total").get<std::size_t>();
  s.noise_removed = j.at("noise_removed").get<std::size_t>();
  s.clean_total = j.at("clean_total").get<std::size_t>();
  s.clean_removed = j.at("clean_removed").get<std::size_t>();
  return s;
}

}  // namespace

Workspace::Workspace(RunConfig config, std::optional<fs::path> root, bool build_deps)
    : config_(std::move(config)), root_(std::move(root)), build_deps_(build_deps || !root_) {
  config_.validate();
  if (root_) write_root_files();
}

void Workspace::write_root_files() {
  fs::create_directories(*root_);
  json cfg = config_;
  cfg.erase("seed");
  cfg.erase("output_dir");
  write_json(*root_ / "config.json", cfg);
  write_json(*root_ / "manifest.json", json{{"config_hash", config_.hash()},
                                            {"revision", revision()},
                                            {"layout", {"data", "seed-<S>/train/<method>", "seed-<S>/score",
                                                        "seed-<S>/finetune/<method>", "seed-<S>/eval", "experiment"}}});
}

fs::path Workspace::seed_dir(std::uint64_t seed) const {
  if (!root_) throw ContractError("in-memory workspace has no directories");
  return *root_ / ("seed-" + std::to_string(seed));
}

bool Workspace::stored(const fs::path& marker) const { return root_ && fs::exists(marker); }

void Workspace::write_provenance(const fs::path& dir, const std::string& step, std::uint64_t seed,
                                 const json& inputs) const {
  write_json(dir / "provenance.json", json{{"step", step},
                                           {"config_hash", config_.hash()},
                                           {"seed", seed},
                                           {"revision", revision()},
                                           {"inputs", inputs}});
}

// ---- Data ------------------------------------------------------------------------

const MultiDomainDataset& Workspace::gen_data() {
  log_info("building dataset");
  data_ = build_dataset(config_.dataset);
  if (root_) {
    save_dataset(*data_, *root_ / "data");
    json domains = json::object();
    for (const auto& [id, sp] : data_->splits) {
      std::size_t noisy = 0;
      for (const auto& p : sp.training) noisy += p.is_noise.value_or(false);
      auto trusted = data_->trusted.find(id);
      domains[std::to_string(id)] = {{"role", id == data_->generic_id ? "generic" : data_->is_seen(id) ? "seen" : "unseen"},
                                     {"train", sp.training.size()},
                                     {"finetune", sp.finetune.size()},
                                     {"test", sp.testing.size()},
                                     {"trusted", trusted == data_->trusted.end() ? 0 : trusted->second.size()},
                                     {"noise", noisy}};
    }
    write_json(*root_ / "data" / "manifest.json",
               json{{"dataset_seed", config_.dataset.seed},
                    {"noise_fraction", config_.dataset.noise_fraction}, {"domains", domains}});
    write_provenance(*root_ / "data", "gen-data", config_.dataset.seed, json::object());
  }
  return *data_;
}

const MultiDomainDataset& Workspace::data() {
  if (data_) return *data_;
  if (root_ && fs::exists(*root_ / "data" / "dataset.json")) {
    data_ = load_dataset(*root_ / "data");
    return *data_;
  }
  if (!build_deps_) throw DependencyError("no dataset under " + root_->string() + "; run gen-data or pass --build-deps");
  return gen_data();
}

// ---- Training ----------------------------------------------------------------------

const TrainedMethod& Workspace::train(const std::string& method, std::uint64_t seed) {
  if (!is_method(method)) throw ConfigError("unknown method '" + method + "'");
  const auto& ds = data();
  const RunSeeds seeds{seed};
  TrainedMethod t;
  json inputs = json::object();
  if (method == "vanilla") {
    t.model = train_vanilla(config_, ds, seeds, &t.curve);
  } else {
    const auto& vanilla = trained("vanilla", seed).model;
    inputs["vanilla"] = hex(vanilla.checksum());
    const ScoredData* sd = nullptr;
    if (needs_plan(method)) {
      sd = &scored(seed);
      inputs["plan_size"] = sd->plan.size();
    }
    t = train_method(method, config_, ds, vanilla, sd, seeds);
  }

  if (root_) {
    const fs::path dir = seed_dir(seed) / method_dir(method);
    fs::create_directories(dir);
    save_model(dir / "model.ckpt", t.model);
    if (!t.curve.losses.empty()) t.curve.write_csv(dir / "loss.csv");
    if (!t.episodes.records.empty()) t.episodes.write_csv(dir / "episodes.csv");
    for (std::size_t i = 0; i < t.specialists.size(); ++i) {
      save_model(dir / ("specialist-" + std::to_string(t.specialist_domains[i]) + ".ckpt"), t.specialists[i]);
    }
    inputs["model"] = hex(t.model.checksum());
    write_provenance(dir, "train " + method, seed, inputs);
  }
  return trained_[{method, seed}] = std::move(t);
}

const TrainedMethod& Workspace::trained(const std::string& method, std::uint64_t seed) {
  if (auto it = trained_.find({method, seed}); it != trained_.end()) return it->second;
  const fs::path dir = root_ ? seed_dir(seed) / method_dir(method) : fs::path{};
  if (stored(dir / "model.ckpt")) {
    TrainedMethod t;
    t.model = load_model(dir / "model.ckpt", config_.model);
    if (method == "epi_nmt" || method == "epi_curriculum") {
      for (int d : data().seen_ids) {
        t.specialists.push_back(load_model(dir / ("specialist-" + std::to_string(d) + ".ckpt"), config_.model));
        t.specialist_domains.push_back(d);
      }
    }
    return trained_[{method, seed}] = std::move(t);
  }
  if (!build_deps_) {
    throw DependencyError("no " + method + " checkpoint for seed " + std::to_string(seed) +
                          "; run train --method " + method + " or pass --build-deps");
  }
  return train(method, seed);
}

// ---- Scoring ----------------------------------------------------------------------

const ScoredData& Workspace::score(std::uint64_t seed) {
  const auto& ds = data();
  const auto& vanilla = trained("vanilla", seed).model;
  ScoredData sd = score_corpus(config_, ds, vanilla, RunSeeds{seed});
  if (root_) {
    const fs::path dir = seed_dir(seed) / "score";
    fs::create_directories(dir);
    const Vocabulary vocab = Vocabulary::synthetic(ds.vocab_size);
    save_scored_tsv(sd.scored, dir / "scored.tsv", vocab);
    write_json(dir / "plan.json", plan_to_json(sd.plan, sd.kept_index));
    std::vector<SentencePair> tests;
    for (const auto& [id, pairs] : sd.scored_tests) tests.insert(tests.end(), pairs.begin(), pairs.end());
    save_scored_tsv(tests, dir / "test-scored.tsv", vocab);
    json prov = json::object();
    for (const auto& [id, text] : sd.provenance) prov[std::to_string(id)] = text;
    write_json(dir / "summary.json", json{{"denoise", stats_json(sd.stats)},
                                          {"kept", sd.kept_index.size()},
                                          {"filtered", sd.plan.filtered_count},
                                          {"scorers", prov}});
    write_provenance(dir, "score", seed, json{{"vanilla", hex(vanilla.checksum())}});
  }
  return scored_[seed] = std::move(sd);
}

const ScoredData& Workspace::scored(std::uint64_t seed) {
  if (auto it = scored_.find(seed); it != scored_.end()) return it->second;
  const fs::path dir = root_ ? seed_dir(seed) / "score" : fs::path{};
  if (stored(dir / "plan.json")) {
    const Vocabulary vocab = Vocabulary::synthetic(data().vocab_size);
    ScoredData sd;
    sd.scored = load_scored_tsv(dir / "scored.tsv", vocab);
    sd.plan = plan_from_json(read_json(dir / "plan.json"), sd.scored);
    for (const auto& origin : sd.plan.origin) sd.kept_index.insert(sd.kept_index.end(), origin.begin(), origin.end());
    std::sort(sd.kept_index.begin(), sd.kept_index.end());
    const json summary = read_json(dir / "summary.json");
    try {
      sd.stats = stats_from(summary.at("denoise"));
    } catch (const json::exception& e) {
      throw ParseError((dir / "summary.json").string() + ": " + e.what());
    }
    for (auto& p : load_scored_tsv(dir / "test-scored.tsv", vocab)) sd.scored_tests[p.domain_id].push_back(std::move(p));
    return scored_[seed] = std::move(sd);
  }
  if (!build_deps_) {
    throw DependencyError("no curriculum plan for seed " + std::to_string(seed) + "; run score or pass --build-deps");
  }
  return score(seed);
}

// ---- Fine-tuning and evaluation ----------------------------------------------------

std::map<int, EncoderDecoderModel> Workspace::finetune(const std::string& method, std::uint64_t seed) {
  const auto& ds = data();
  const auto& t = trained(method, seed);
  Hyperparams ft = config_.training.hyperparams;
  ft.seed = RunSeeds{seed}.finetune();
  std::map<int, EncoderDecoderModel> out;
  for (int d : ds.eval_ids()) {
    LossCurve curve;
    // Same seed stream as the evaluation protocol, so these are the models it scores.
    out.emplace(d, epi::finetune(t.model, ds.at(d).finetune, ft, derive_seed(seed, 500 + static_cast<std::uint64_t>(d)),
                                 &curve));
    if (root_) {
      const fs::path dir = seed_dir(seed) / "finetune" / method;
      fs::create_directories(dir);
      save_model(dir / ("domain-" + std::to_string(d) + ".ckpt"), out.at(d));
      curve.write_csv(dir / ("loss-" + std::to_string(d) + ".csv"));
    }
  }
  if (root_) {
    write_provenance(seed_dir(seed) / "finetune" / method, "finetune " + method, seed,
                     json{{"model", hex(t.model.checksum())}});
  }
  return out;
}

SeedResult Workspace::eval(std::uint64_t seed, const std::vector<std::string>& methods) {
  const auto& ds = data();
  std::map<std::string, const TrainedMethod*> models;
  for (const auto& m : methods) models[m] = &trained(m, seed);
  const auto& sd = scored(seed);
  SeedResult r = evaluate_seed(config_, ds, seed, models, sd);
  if (root_) {
    std::string name = "eval";
    if (methods != config_.training.methods) {
      for (const auto& m : methods) name += "-" + m;
    }
    const fs::path dir = seed_dir(seed) / name;
    fs::create_directories(dir);
    write_json(dir / "report.json", seed_json(r));
    write_eval_csv(EvalReport{r.eval}, dir / "eval.csv");
    json inputs = json::object();
    for (const auto& [m, t] : models) inputs[m] = hex(t->model.checksum());
    write_provenance(dir, "eval", seed, inputs);
  }
  return r;
}

ExperimentBundle Workspace::experiment() {
  const bool saved = build_deps_;
  build_deps_ = true;
  ExperimentBundle bundle;
  bundle.config_hash = config_.hash();
  for (std::size_t r = 0; r < config_.eval.n_seeds; ++r) {
    const std::uint64_t seed = config_.seed + r;
    bundle.seeds.push_back(eval(seed, config_.training.methods));
    const auto& cells = bundle.seeds.back().eval;
    bundle.eval.cells.insert(bundle.eval.cells.end(), cells.begin(), cells.end());
    // Keep memory flat across seeds; everything needed later is in the result.
    for (auto it = trained_.begin(); it != trained_.end();) it = it->first.second == seed ? trained_.erase(it) : std::next(it);
    scored_.erase(seed);
  }
  build_deps_ = saved;
  if (root_) {
    const fs::path dir = *root_ / "experiment";
    fs::create_directories(dir);
    write_json(dir / "bundle.json", bundle_json(bundle));
    write_eval_csv(bundle.eval, dir / "eval.csv");
  }
  return bundle;
}

ExperimentBundle run_experiment(const RunConfig& cfg, const std::optional<fs::path>& out_dir) {
  std::optional<fs::path> root;
  if (out_dir) root = *out_dir / cfg.hash();
  Workspace ws(cfg, root, true);
  return ws.experiment();
}

}  // namespace epi
