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

#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "epi/errors.hpp"
#include "epi/workspace.hpp"

using namespace epi;
namespace fs = std::filesystem;

namespace {

const fs::path kTinyConfig = fs::path(EPI_CONFIG_DIR) / "tiny.json";

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

std::size_t line_count(const fs::path& p) {
  std::ifstream is(p);
  std::size_t n = 0;
  for (std::string line; std::getline(is, line);) ++n;
  return n;
}

struct Result {
  int code = -1;
  std::string err;
};

Result epilab(const std::string& args) {
  const auto err = fs::temp_directory_path() / "epi_test_cli_stderr.txt";
  const std::string cmd = std::string(EPILAB_PATH) + " " + args + " > /dev/null 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

RunConfig tiny() { return load_run_config(kTinyConfig); }

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("run config round trip and strictness") {
    const RunConfig c = tiny();
    json j = c;
    CHECK(j.get<RunConfig>() == c);

    json bad = j;
    bad["extra"] = 1;
    CHECK_THROWS_AS(bad.get<RunConfig>(), ConfigError);
    bad = j;
    bad["training"]["hyperparams"]["gamma"] = 0.1;
    CHECK_THROWS_AS(bad.get<RunConfig>(), ConfigError);
    bad = j;
    bad["eval"]["decode"] = json::object();
    CHECK_THROWS_AS(bad.get<RunConfig>(), ConfigError);

    RunConfig v = c;
    v.training.methods = {"vanilla", "bogus"};
    CHECK_THROWS_AS(v.validate(), ConfigError);
    v = c;
    v.model.vocab_size = 40;  // differs from the dataset vocabulary
    CHECK_THROWS_AS(v.validate(), ConfigError);

    CHECK_THROWS_AS(load_run_config("/nonexistent/config.json"), IoError);
  }

  TEST_CASE("config hash ignores the master seed") {
    RunConfig a = tiny(), b = tiny();
    b.seed = 99;
    b.output_dir = "elsewhere";
    CHECK(a.hash() == b.hash());
    CHECK(a.hash().size() == 16);
    b.training.hyperparams.alpha *= 2.0;
    CHECK(a.hash() != b.hash());
  }

  TEST_CASE("method overrides") {
    RunConfig c = tiny();
    c.training.overrides["meta_mt"] = json{{"beta", 0.01}};
    CHECK(c.hyperparams_for("meta_mt").beta == 0.01);
    CHECK(c.hyperparams_for("agg").beta == c.training.hyperparams.beta);
    c.training.overrides["meta_mt"] = json{{"delta", 1}};
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }

  TEST_CASE("missing inputs without build-deps") {
    const auto dir = fresh_dir("epi_test_ws_deps");
    Workspace ws(tiny(), dir, false);
    CHECK_THROWS_AS(ws.train("agg", 1), DependencyError);
    ws.gen_data();
    CHECK_THROWS_AS(ws.train("agg", 1), DependencyError);  // no vanilla checkpoint yet
    ws.train("vanilla", 1);
    CHECK_THROWS_AS(ws.train("agg_curriculum", 1), DependencyError);
    CHECK_NOTHROW(ws.train("epi_nmt", 1));  // unsharded plan, no scoring needed
    fs::remove_all(dir);
  }

  TEST_CASE("gen-data manifest matches the files") {
    const auto dir = fresh_dir("epi_test_ws_gen");
    RunConfig cfg = tiny();
    Workspace ws(cfg, dir, false);
    const auto& data = ws.gen_data();
    const json m = json::parse(slurp(dir / "data" / "manifest.json"));
    CHECK(m.at("dataset_seed") == cfg.dataset.seed);
    for (const auto& [key, d] : m.at("domains").items()) {
      for (const char* part : {"train", "finetune", "test"})
        CHECK(d.at(part).get<std::size_t>() == line_count(dir / "data" / (key + "-" + part + ".tsv")));
      const int id = std::stoi(key);
      const std::size_t expected_noise = id == data.generic_id || !data.is_seen(id)
                                             ? 0
                                             : noise_count(d.at("train").get<std::size_t>(), cfg.dataset.noise_fraction);
      CHECK(d.at("noise").get<std::size_t>() == expected_noise);
    }
    fs::remove_all(dir);
  }

  TEST_CASE("score toggles and idempotence") {
    const auto dir = fresh_dir("epi_test_ws_score");
    RunConfig cfg = tiny();
    {
      Workspace ws(cfg, dir, true);
      const auto& s = ws.score(1);
      std::size_t lo = SIZE_MAX, hi = 0;
      for (const auto& shard : s.plan.shards) lo = std::min(lo, shard.size()), hi = std::max(hi, shard.size());
      CHECK(hi - lo <= 1);
      CHECK(s.plan.filtered_count == s.stats.noise_removed + s.stats.clean_removed);
    }
    const std::string first = slurp(dir / "seed-1" / "score" / "scored.tsv");
    fs::remove_all(dir);
    {
      Workspace ws(cfg, dir, true);
      ws.score(1);
    }
    CHECK(slurp(dir / "seed-1" / "score" / "scored.tsv") == first);
    fs::remove_all(dir);

    cfg.curriculum.denoise = false;
    Workspace off(cfg, std::nullopt, true);
    CHECK(off.score(1).plan.filtered_count == 0);
  }

  TEST_CASE("bundle schema and method filtering") {
    RunConfig cfg = tiny();
    cfg.training.methods = {"agg"};
    cfg.eval.swap_methods = {"agg"};
    cfg.eval.perturb_methods = {"agg"};
    const auto bundle = run_experiment(cfg);
    for (const auto& c : bundle.eval.cells) CHECK(c.method == "agg");
    const json j = bundle_json(bundle);
    const auto problems = validate_bundle_json(j);
    CHECK_MESSAGE(problems.empty(), (problems.empty() ? "" : problems.front()));
    json broken = j;
    broken.erase("seeds");
    CHECK_FALSE(validate_bundle_json(broken).empty());
  }

  TEST_CASE("exit codes") {
    CHECK(epilab("").code == 1);
    CHECK(epilab("frobnicate").code == 1);
    CHECK(epilab("train --config /nonexistent.json --method agg").code == 1);

    const auto out = fresh_dir("epi_test_cli_codes");
    const auto unknown = epilab("train --config " + kTinyConfig.string() + " --method bogus --out " + out.string());
    CHECK(unknown.code == 1);
    CHECK(unknown.err.find("epi_curriculum") != std::string::npos);

    const auto missing = epilab("train --config " + kTinyConfig.string() + " --method agg --out " + out.string());
    CHECK(missing.code == 2);

    const auto bad_cfg = out / "bad.json";
    fs::create_directories(out);
    { std::ofstream(bad_cfg) << "{\"seed\": 1, \"nonsense\": true}"; }
    CHECK(epilab("gen-data --config " + bad_cfg.string() + " --out " + out.string()).code == 1);

    const std::string common = " --config " + kTinyConfig.string() + " --out " + out.string();
    CHECK(epilab("gen-data" + common).code == 0);
    CHECK(epilab("train --method vanilla" + common).code == 0);
    CHECK(epilab("train --method agg_curriculum" + common).code == 2);
    CHECK(epilab("train --method epi_nmt" + common).code == 0);
    fs::remove_all(out);
  }

  TEST_CASE("repeated commands reproduce identical bytes") {
    const auto a = fresh_dir("epi_test_cli_rep_a"), b = fresh_dir("epi_test_cli_rep_b");
    for (const auto& dir : {a, b}) {
      const std::string common = " --config " + kTinyConfig.string() + " --out " + dir.string();
      REQUIRE(epilab("gen-data" + common).code == 0);
      REQUIRE(epilab("train --method vanilla" + common).code == 0);
      REQUIRE(epilab("score" + common).code == 0);
      REQUIRE(epilab("train --method epi_curriculum" + common).code == 0);
      REQUIRE(epilab("finetune --method epi_curriculum" + common).code == 0);
      REQUIRE(epilab("experiment --build-deps" + common).code == 0);
    }
    const auto ta = tree(a), tb = tree(b);
    CHECK(ta.size() == tb.size());
    for (const auto& [path, bytes] : ta) {
      INFO(path);
      CHECK((tb.count(path) && tb.at(path) == bytes));
    }
    fs::remove_all(a);
    fs::remove_all(b);
  }
}
