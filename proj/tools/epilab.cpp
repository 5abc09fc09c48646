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

// Command-line front end: gen-data, score, train, finetune, eval, experiment.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 missing or
// malformed data and unmet dependencies, 3 internal error.

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "epi/errors.hpp"
#include "epi/log.hpp"
#include "epi/workspace.hpp"

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string method;
  std::string out;
  bool build_deps = false;
};

epi::Workspace open_workspace(const Options& o) {
  epi::RunConfig cfg = epi::load_run_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  const std::filesystem::path base = o.out.empty() ? std::filesystem::path(cfg.output_dir) : std::filesystem::path(o.out);
  return epi::Workspace(cfg, base / cfg.hash(), o.build_deps);
}

void check_method(const std::string& m) {
  if (epi::is_method(m)) return;
  std::string valid;
  for (const auto& name : epi::all_methods()) valid += (valid.empty() ? "" : ", ") + name;
  throw epi::ConfigError("unknown method '" + m + "' (valid: " + valid + ")");
}

void print_eval(const std::vector<epi::EvalCell>& cells) {
  epi::EvalReport r{cells};
  std::vector<std::string> methods;
  for (const auto& c : cells) {
    if (std::find(methods.begin(), methods.end(), c.method) == methods.end()) methods.push_back(c.method);
  }
  std::printf("%-16s %9s %9s %9s %9s %9s %9s\n", "method", "seen_bef", "seen_aft", "seen_dft", "uns_bef", "uns_aft",
              "uns_dft");
  for (const auto& m : methods) {
    std::printf("%-16s %9.2f %9.2f %9.2f %9.2f %9.2f %9.2f\n", m.c_str(), r.mean(m, true, "before"),
                r.mean(m, true, "after"), r.mean(m, true, "delta"), r.mean(m, false, "before"),
                r.mean(m, false, "after"), r.mean(m, false, "delta"));
  }
}

int run(const std::string& command, const Options& o) {
  auto ws = open_workspace(o);
  const std::uint64_t seed = ws.config().seed;
  if (command == "gen-data") {
    const auto& d = ws.gen_data();
    std::printf("dataset: %zu seen, %zu unseen domains\n", d.seen_ids.size(), d.unseen_ids.size());
  } else if (command == "score") {
    const auto& s = ws.score(seed);
    std::printf("scored %zu pairs, kept %zu, filtered %zu (noise removed %.3f, clean removed %.3f)\n", s.scored.size(),
                s.kept_index.size(), s.plan.filtered_count, s.stats.noise_removed_fraction(),
                s.stats.clean_removed_fraction());
  } else if (command == "train") {
    check_method(o.method);
    const auto& t = ws.train(o.method, seed);
    std::printf("%s checksum %016llx\n", o.method.c_str(), static_cast<unsigned long long>(t.model.checksum()));
  } else if (command == "finetune") {
    check_method(o.method);
    const auto models = ws.finetune(o.method, seed);
    std::printf("fine-tuned %s on %zu domains\n", o.method.c_str(), models.size());
  } else if (command == "eval") {
    std::vector<std::string> methods = ws.config().training.methods;
    if (!o.method.empty()) {
      check_method(o.method);
      methods = {o.method};
    }
    print_eval(ws.eval(seed, methods).eval);
  } else if (command == "experiment") {
    const auto bundle = ws.experiment();
    print_eval(bundle.eval.cells);
  }
  std::printf("output: %s\n", ws.root()->string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Episodic and curriculum training for low-resource domain adaptation on synthetic corpora"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&o](CLI::App* sub, bool method_required) {
    sub->add_option("--config", o.config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "master seed (overrides the config)");
    sub->add_option("--out", o.out, "output directory (overrides the config)");
    sub->add_flag("--build-deps", o.build_deps, "produce missing inputs instead of failing");
    if (method_required) sub->add_option("--method", o.method, "training method")->required();
  };
  add_common(app.add_subcommand("gen-data", "generate and write the synthetic dataset"), false);
  add_common(app.add_subcommand("score", "denoise and divergence scoring, curriculum plan"), false);
  add_common(app.add_subcommand("train", "train one method"), true);
  add_common(app.add_subcommand("finetune", "fine-tune a trained method on every evaluation domain"), true);
  auto* eval = app.add_subcommand("eval", "evaluation protocol, module swap, perturbation, divergence bins");
  add_common(eval, false);
  eval->add_option("--method", o.method, "evaluate only this method");
  add_common(app.add_subcommand("experiment", "every step for all seeds plus the result bundle"), false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, o);
  } catch (const epi::ConfigError& e) {
    epi::log_error(e.what());
    return 1;
  } catch (const epi::DependencyError& e) {
    epi::log_error(e.what());
    return 2;
  } catch (const epi::IoError& e) {
    epi::log_error(e.what());
    return 2;
  } catch (const epi::ParseError& e) {
    epi::log_error(e.what());
    return 2;
  } catch (const epi::BudgetError& e) {
    epi::log_error(e.what());
    return 2;
  } catch (const epi::LookupError& e) {
    epi::log_error(e.what());
    return 2;
  } catch (const std::exception& e) {
    epi::log_error(std::string("internal error: ") + e.what());
    return 3;
  }
}
