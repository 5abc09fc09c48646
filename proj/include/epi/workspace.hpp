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

#include "epi/experiment.hpp"

namespace epi {

/// Revision string compiled into provenance records.
std::string revision();

/// Artifact store for one configuration. With a root directory, every step
/// writes its outputs below root and later steps load them back; without
/// one, results live in memory only. Layout under root:
///
///   config.json, manifest.json
///   data/                          dataset directory
///   seed-<S>/train/<method>/       model.ckpt, loss.csv or episodes.csv, specialist-<d>.ckpt
///   seed-<S>/score/                scored.tsv, plan.json, test-scored.tsv, summary.json
///   seed-<S>/finetune/<method>/    domain-<d>.ckpt, loss-<d>.csv
///   seed-<S>/eval[-<methods>]/     report.json, eval.csv
///   experiment/                    bundle.json, eval.csv
///
/// Every step directory also holds provenance.json.
/// A step whose inputs are missing throws DependencyError unless
/// build_deps is set, in which case the inputs are produced first.
class Workspace {
 public:
  Workspace(RunConfig config, std::optional<std::filesystem::path> root, bool build_deps);

  const RunConfig& config() const { return config_; }
  const std::optional<std::filesystem::path>& root() const { return root_; }
  std::filesystem::path seed_dir(std::uint64_t seed) const;

  /// Generates (and writes) the dataset, replacing any cached copy.
  const MultiDomainDataset& gen_data();
  const MultiDomainDataset& data();

  /// Trains method for seed (vanilla included) and stores the result.
  const TrainedMethod& train(const std::string& method, std::uint64_t seed);
  const TrainedMethod& trained(const std::string& method, std::uint64_t seed);

  const ScoredData& score(std::uint64_t seed);
  const ScoredData& scored(std::uint64_t seed);

  /// Fine-tuned copies of a trained method, one per evaluation domain.
  std::map<int, EncoderDecoderModel> finetune(const std::string& method, std::uint64_t seed);

  /// Protocol, swaps, perturbation and bins over the listed methods.
  SeedResult eval(std::uint64_t seed, const std::vector<std::string>& methods);

  /// Every step for seeds seed, seed + 1, ..., then the bundle.
  ExperimentBundle experiment();

 private:
  void write_root_files();
  void write_provenance(const std::filesystem::path& dir, const std::string& step, std::uint64_t seed,
                        const json& inputs) const;
  bool stored(const std::filesystem::path& marker) const;

  RunConfig config_;
  std::optional<std::filesystem::path> root_;
  bool build_deps_;
  std::optional<MultiDomainDataset> data_;
  std::map<std::pair<std::string, std::uint64_t>, TrainedMethod> trained_;
  std::map<std::uint64_t, ScoredData> scored_;
};

/// Workspace(cfg, out_dir / cfg.hash(), build_deps = true).experiment(), or
/// fully in memory without out_dir.
ExperimentBundle run_experiment(const RunConfig& cfg,
                                const std::optional<std::filesystem::path>& out_dir = std::nullopt);

}  // namespace epi
