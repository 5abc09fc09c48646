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

#include "epi/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "epi/errors.hpp"
#include "epi/random.hpp"

namespace epi {

void require_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& context) {
  if (!j.is_object()) throw ConfigError(context + ": expected an object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || item.key() == a;
    if (!ok) throw ConfigError(context + ": unknown key '" + item.key() + "'");
  }
}

TokenSeq StructuralRule::apply(const TokenSeq& tokens) const {
  TokenSeq out = tokens;
  switch (kind) {
    case RuleKind::identity:
      break;
    case RuleKind::reverse:
      std::reverse(out.begin(), out.end());
      break;
    case RuleKind::rotate:
      if (!out.empty()) std::rotate(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(shift % out.size()), out.end());
      break;
    case RuleKind::swap_adjacent:
      for (std::size_t i = 0; i + 1 < out.size(); i += 2) std::swap(out[i], out[i + 1]);
      break;
  }
  return out;
}

std::string rule_name(const StructuralRule& rule) {
  switch (rule.kind) {
    case RuleKind::identity: return "identity";
    case RuleKind::reverse: return "reverse";
    case RuleKind::rotate: return "rotate-" + std::to_string(rule.shift);
    case RuleKind::swap_adjacent: return "swap-adjacent";
  }
  return "identity";
}

StructuralRule parse_rule(const std::string& text) {
  if (text == "identity") return {RuleKind::identity, 0};
  if (text == "reverse") return {RuleKind::reverse, 0};
  if (text == "swap-adjacent") return {RuleKind::swap_adjacent, 0};
  if (text.rfind("rotate-", 0) == 0) {
    const std::string digits = text.substr(7);
    if (!digits.empty() && std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      return {RuleKind::rotate, static_cast<std::size_t>(std::stoull(digits))};
    }
  }
  throw ConfigError("unknown structural rule '" + text + "'");
}

void DomainSpec::validate() const {
  if (max_len < 5) throw ConfigError("domain " + std::to_string(domain_id) + ": max_len < 5 is degenerate");
  if (min_len > max_len) throw ConfigError("domain " + std::to_string(domain_id) + ": min_len > max_len");
  if (substitution.size() <= kFirstContent) throw ConfigError("domain " + std::to_string(domain_id) + ": empty substitution table");
  const std::size_t v = substitution.size();
  std::vector<bool> hit(v, false);
  for (std::size_t id = 0; id < v; ++id) {
    const TokenId img = substitution[id];
    if (id < kFirstContent ? img != id : (img < kFirstContent || img >= v)) {
      throw ConfigError("domain " + std::to_string(domain_id) + ": substitution must fix reserved ids and map content to content");
    }
    if (hit[img]) throw ConfigError("domain " + std::to_string(domain_id) + ": substitution is not bijective");
    hit[img] = true;
  }
  if (!token_weights.empty()) {
    if (token_weights.size() != v) throw ConfigError("domain " + std::to_string(domain_id) + ": token_weights size mismatch");
    double total = 0.0;
    for (std::size_t id = 0; id < v; ++id) {
      const double w = token_weights[id];
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("domain " + std::to_string(domain_id) + ": invalid token weight");
      if (id < kFirstContent && w != 0.0) throw ConfigError("domain " + std::to_string(domain_id) + ": reserved ids must have weight 0");
      total += w;
    }
    if (total <= 0.0) throw ConfigError("domain " + std::to_string(domain_id) + ": all token weights are zero");
  }
}

TokenSeq DomainSpec::translate(const TokenSeq& source) const {
  TokenSeq mapped(source.size());
  for (std::size_t i = 0; i < source.size(); ++i) mapped[i] = substitution.at(source[i]);
  return rule.apply(mapped);
}

DomainSpec identity_spec(int domain_id, std::size_t vocab_size) {
  DomainSpec spec;
  spec.domain_id = domain_id;
  spec.name = "domain" + std::to_string(domain_id);
  spec.substitution.resize(vocab_size);
  std::iota(spec.substitution.begin(), spec.substitution.end(), TokenId{0});
  return spec;
}

std::vector<SentencePair> generate_domain(const DomainSpec& spec, std::size_t n_pairs, std::uint64_t seed) {
  spec.validate();
  if (n_pairs == 0) throw ConfigError("generate_domain needs n_pairs > 0");
  const std::size_t v = spec.substitution.size();
  std::vector<double> weights = spec.token_weights;
  if (weights.empty()) {
    weights.assign(v, 1.0);
    for (std::size_t id = 0; id < kFirstContent; ++id) weights[id] = 0.0;
  }
  Rng rng(seed);
  std::vector<SentencePair> out;
  out.reserve(n_pairs);
  for (std::size_t n = 0; n < n_pairs; ++n) {
    const std::size_t len = spec.min_len + rng.uniform_index(spec.max_len - spec.min_len + 1);
    SentencePair p;
    p.source.resize(len);
    for (auto& t : p.source) t = rng.categorical(weights);
    p.target = spec.translate(p.source);
    p.domain_id = spec.domain_id;
    p.is_noise = false;
    out.push_back(std::move(p));
  }
  return out;
}

std::size_t noise_count(std::size_t n, double fraction) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("noise fraction must lie in [0, 1]");
  return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
}

std::vector<SentencePair> inject_noise(std::vector<SentencePair> pairs, double fraction, std::uint64_t seed) {
  const std::size_t n = pairs.size();
  std::size_t count = noise_count(n, fraction);
  for (auto& p : pairs) p.is_noise = false;
  if (n < 2) return pairs;
  Rng rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::vector<TokenSeq> targets;
  targets.reserve(n);
  for (const auto& p : pairs) targets.push_back(p.target);
  for (std::size_t c = 0; c < count; ++c) {
    const std::size_t i = order[c];
    std::size_t j = rng.uniform_index(n - 1);
    if (j >= i) ++j;
    pairs[i].target = targets[j];
    pairs[i].is_noise = true;
  }
  return pairs;
}

std::vector<SentencePair> length_filter(const std::vector<SentencePair>& pairs, std::size_t min_len,
                                        std::size_t max_len) {
  std::vector<SentencePair> out;
  auto ok = [&](std::size_t len) { return len >= min_len && len <= max_len; };
  for (const auto& p : pairs) {
    if (ok(p.source.size()) && ok(p.target.size())) out.push_back(p);
  }
  return out;
}

std::vector<SentencePair> dedupe_sources(const std::vector<SentencePair>& pairs) {
  std::set<TokenSeq> seen;
  std::vector<SentencePair> out;
  for (const auto& p : pairs) {
    if (seen.insert(p.source).second) out.push_back(p);
  }
  return out;
}

std::size_t source_tokens(const std::vector<SentencePair>& pairs) {
  std::size_t n = 0;
  for (const auto& p : pairs) n += p.source.size();
  return n;
}

DatasetSplits split(const std::vector<SentencePair>& pairs, const TokenBudgets& budgets, std::uint64_t seed) {
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order);

  DatasetSplits out;
  std::size_t next = 0;
  auto fill = [&](std::vector<SentencePair>& dst, std::size_t budget, const char* name) {
    std::size_t tokens = 0;
    while (tokens < budget && next < order.size()) {
      const auto& p = pairs[order[next++]];
      tokens += p.source.size();
      dst.push_back(p);
    }
    if (tokens < budget) {
      throw BudgetError(std::string("insufficient data for the ") + name + " split: " + std::to_string(budget - tokens) +
                        " source tokens short of " + std::to_string(budget));
    }
  };
  fill(out.training, budgets.train_tokens, "training");
  fill(out.finetune, budgets.finetune_tokens, "fine-tuning");
  fill(out.testing, budgets.test_tokens, "testing");
  return out;
}

// ---- Multi-domain dataset -----------------------------------------------

void DatasetConfig::validate() const {
  if (vocab_size <= kFirstContent + 1 || vocab_size > 512) throw ConfigError("dataset.vocab_size must lie in (5, 512]");
  if (n_seen < 2) throw ConfigError("dataset.n_seen must be at least 2");
  if (min_len < 1 || min_len > max_len) throw ConfigError("dataset length range is empty");
  if (max_len < 5) throw ConfigError("dataset.max_len < 5 is degenerate");
  if ((n_seen + n_unseen) * topic_size > vocab_size - kFirstContent) {
    throw ConfigError("topic sets do not fit in the content vocabulary");
  }
  if (!(topic_boost > 0.0)) throw ConfigError("dataset.topic_boost must be positive");
  if (!(generic_topic_weight > 0.0)) throw ConfigError("dataset.generic_topic_weight must be positive");
  if (!(foreign_topic_weight > 0.0)) throw ConfigError("dataset.foreign_topic_weight must be positive");
  if (shifted_terms > topic_size || shifted_terms == 1) {
    throw ConfigError("dataset.shifted_terms must be 0 or in [2, topic_size]");
  }
  if (!(noise_fraction >= 0.0 && noise_fraction <= 1.0)) throw ConfigError("dataset.noise_fraction must lie in [0, 1]");
  if (rules.size() > n_seen + n_unseen) throw ConfigError("more rules than non-generic domains");
}

bool MultiDomainDataset::is_seen(int id) const {
  return std::find(seen_ids.begin(), seen_ids.end(), id) != seen_ids.end();
}

const DatasetSplits& MultiDomainDataset::at(int id) const {
  auto it = splits.find(id);
  if (it == splits.end()) throw LookupError("no domain with id " + std::to_string(id));
  return it->second;
}

std::vector<SentencePair> MultiDomainDataset::seen_training() const {
  std::vector<SentencePair> out;
  for (int id : seen_ids) {
    const auto& t = at(id).training;
    out.insert(out.end(), t.begin(), t.end());
  }
  return out;
}

std::vector<int> MultiDomainDataset::eval_ids() const {
  std::vector<int> ids = seen_ids;
  ids.insert(ids.end(), unseen_ids.begin(), unseen_ids.end());
  return ids;
}

std::vector<DomainSpec> default_domain_specs(const DatasetConfig& config) {
  config.validate();
  const std::size_t v = config.vocab_size;
  Rng rng(derive_seed(config.seed, 101));

  std::vector<TokenId> content(v - kFirstContent);
  std::iota(content.begin(), content.end(), kFirstContent);
  std::vector<TokenId> images = content;
  rng.shuffle(images);
  std::vector<TokenId> base(v);
  std::iota(base.begin(), base.end(), TokenId{0});
  for (std::size_t i = 0; i < content.size(); ++i) base[content[i]] = images[i];

  std::vector<TokenId> topic_pool = content;
  rng.shuffle(topic_pool);
  const std::size_t n = config.n_seen + config.n_unseen;

  std::vector<DomainSpec> specs;
  DomainSpec generic;
  generic.domain_id = 0;
  generic.name = "generic";
  generic.substitution = base;
  generic.min_len = config.min_len;
  generic.max_len = config.max_len;
  generic.seed = derive_seed(config.seed, 200);
  generic.token_weights.assign(v, 1.0);
  for (std::size_t id = 0; id < kFirstContent; ++id) generic.token_weights[id] = 0.0;
  for (std::size_t i = 0; i < n * config.topic_size; ++i) generic.token_weights[topic_pool[i]] = config.generic_topic_weight;
  specs.push_back(generic);

  for (std::size_t d = 0; d < n; ++d) {
    DomainSpec spec;
    spec.domain_id = static_cast<int>(d + 1);
    spec.name = (d < config.n_seen ? "seen" : "unseen") + std::to_string(d + 1);
    spec.min_len = config.min_len;
    spec.max_len = config.max_len;
    spec.rule = d < config.rules.size() ? config.rules[d] : StructuralRule{};
    spec.seed = derive_seed(config.seed, 200 + d + 1);

    std::vector<TokenId> topic(topic_pool.begin() + static_cast<std::ptrdiff_t>(d * config.topic_size),
                               topic_pool.begin() + static_cast<std::ptrdiff_t>((d + 1) * config.topic_size));
    spec.token_weights.assign(v, 1.0);
    for (std::size_t id = 0; id < kFirstContent; ++id) spec.token_weights[id] = 0.0;
    for (std::size_t i = 0; i < n * config.topic_size; ++i) spec.token_weights[topic_pool[i]] = config.foreign_topic_weight;
    for (TokenId t : topic) spec.token_weights[t] = config.topic_boost;

    // Terminology shift: a derangement of base images over the shifted terms.
    spec.substitution = base;
    for (std::size_t i = 0; i < config.shifted_terms; ++i) {
      spec.substitution[topic[i]] = base[topic[(i + 1) % config.shifted_terms]];
    }
    specs.push_back(std::move(spec));
  }
  return specs;
}

MultiDomainDataset build_dataset(const DatasetConfig& config) {
  return build_dataset(config, default_domain_specs(config));
}

namespace {

// Enough generated pairs to cover a token budget plus reserved pairs.
std::size_t pool_size(const DomainSpec& spec, std::size_t tokens, std::size_t reserved) {
  const double mean_len = 0.5 * static_cast<double>(spec.min_len + spec.max_len);
  return static_cast<std::size_t>(std::ceil(1.2 * static_cast<double>(tokens) / mean_len)) + reserved + 16;
}

}  // namespace

MultiDomainDataset build_dataset(const DatasetConfig& config, const std::vector<DomainSpec>& specs) {
  config.validate();
  if (specs.size() != 1 + config.n_seen + config.n_unseen) {
    throw ConfigError("expected " + std::to_string(1 + config.n_seen + config.n_unseen) + " domain specs, got " +
                      std::to_string(specs.size()));
  }
  MultiDomainDataset ds;
  ds.vocab_size = config.vocab_size;
  for (std::size_t d = 0; d < specs.size(); ++d) {
    const DomainSpec& spec = specs[d];
    if (spec.domain_id != static_cast<int>(d)) throw ConfigError("domain specs must carry ids 0..n in order");
    if (spec.substitution.size() != config.vocab_size) throw ConfigError("domain spec vocabulary size mismatch");
    spec.validate();
    ds.specs.emplace(spec.domain_id, spec);
    if (d == 0) continue;
    (d <= config.n_seen ? ds.seen_ids : ds.unseen_ids).push_back(spec.domain_id);
  }
  ds.generic_id = 0;

  for (const auto& [id, spec] : ds.specs) {
    const bool generic = id == ds.generic_id;
    const bool seen = ds.is_seen(id);
    TokenBudgets budgets = generic ? TokenBudgets{config.generic_train_tokens, 0, 0}
                                   : (seen ? config.seen_budgets : config.unseen_budgets);
    if (!generic && !seen) budgets.train_tokens = 0;
    const std::size_t reserved = seen ? config.trusted_size : 0;
    const std::size_t total = budgets.train_tokens + budgets.finetune_tokens + budgets.test_tokens;
    auto pool = generate_domain(spec, pool_size(spec, total, reserved), spec.seed);
    pool = length_filter(dedupe_sources(pool), config.min_len, std::max<std::size_t>(config.max_len, 5));
    if (pool.size() < reserved) throw BudgetError("domain " + std::to_string(id) + ": too few pairs for the trusted set");
    std::vector<SentencePair> rest(pool.begin() + static_cast<std::ptrdiff_t>(reserved), pool.end());
    if (seen) ds.trusted[id].assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(reserved));

    DatasetSplits s = split(rest, budgets, derive_seed(spec.seed, 1));
    if (seen) s.training = inject_noise(std::move(s.training), config.noise_fraction, derive_seed(spec.seed, 2));
    ds.splits.emplace(id, std::move(s));
  }
  return ds;
}

// ---- Files ----------------------------------------------------------------

namespace {

std::string join_tokens(const TokenSeq& ids, const Vocabulary& vocab) { return detokenize(ids, vocab); }

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return fields;
}

std::optional<double> parse_score(const std::string& field, const std::filesystem::path& path, std::size_t line_no) {
  if (field.empty()) return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(field, &used);
    if (used != field.size()) throw std::invalid_argument(field);
    return v;
  } catch (const std::exception&) {
    throw ParseError(path.string() + ":" + std::to_string(line_no) + ": bad score '" + field + "'");
  }
}

std::string format_score(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(17);
  os << *v;
  return os.str();
}

}  // namespace

std::vector<SentencePair> load_tsv(const std::filesystem::path& path, const Vocabulary& vocab, int domain_id) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open corpus " + path.string());
  std::vector<SentencePair> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto fields = split_tabs(line);
    if (fields.size() != 2) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected 'source<TAB>target'");
    }
    SentencePair p;
    p.source = tokenize(fields[0], vocab);
    p.target = tokenize(fields[1], vocab);
    p.domain_id = domain_id;
    out.push_back(std::move(p));
  }
  return out;
}

void save_tsv(const std::vector<SentencePair>& pairs, const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write corpus " + path.string());
  for (const auto& p : pairs) os << join_tokens(p.source, vocab) << '\t' << join_tokens(p.target, vocab) << '\n';
  if (!os) throw IoError("write failed for " + path.string());
}

std::vector<SentencePair> load_scored_tsv(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open scored corpus " + path.string());
  std::vector<SentencePair> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto fields = split_tabs(line);
    if (fields.size() != 5) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected 5 tab-separated fields");
    }
    SentencePair p;
    p.source = tokenize(fields[0], vocab);
    p.target = tokenize(fields[1], vocab);
    try {
      p.domain_id = std::stoi(fields[2]);
    } catch (const std::exception&) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": bad domain id '" + fields[2] + "'");
    }
    p.q_score = parse_score(fields[3], path, line_no);
    p.d_score = parse_score(fields[4], path, line_no);
    out.push_back(std::move(p));
  }
  return out;
}

void save_scored_tsv(const std::vector<SentencePair>& pairs, const std::filesystem::path& path,
                     const Vocabulary& vocab) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write scored corpus " + path.string());
  for (const auto& p : pairs) {
    os << join_tokens(p.source, vocab) << '\t' << join_tokens(p.target, vocab) << '\t' << p.domain_id << '\t'
       << format_score(p.q_score) << '\t' << format_score(p.d_score) << '\n';
  }
  if (!os) throw IoError("write failed for " + path.string());
}

namespace {

std::vector<std::size_t> noise_indices(const std::vector<SentencePair>& pairs) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].is_noise.value_or(false)) out.push_back(i);
  }
  return out;
}

void flag(std::vector<SentencePair>& pairs, const std::vector<std::size_t>& noisy) {
  for (auto& p : pairs) p.is_noise = false;
  for (std::size_t i : noisy) {
    if (i >= pairs.size()) throw ParseError("noise index " + std::to_string(i) + " out of range");
    pairs[i].is_noise = true;
  }
}

std::string split_file(int id, const char* part) { return std::to_string(id) + "-" + part + ".tsv"; }

}  // namespace

void save_dataset(const MultiDomainDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const Vocabulary vocab = Vocabulary::synthetic(data.vocab_size);
  vocab.save(dir / "vocab.txt");
  json specs = json::array();
  json noise = json::object();
  for (const auto& [id, spec] : data.specs) {
    specs.push_back(spec);
    const auto& sp = data.at(id);
    save_tsv(sp.training, dir / split_file(id, "train"), vocab);
    save_tsv(sp.finetune, dir / split_file(id, "finetune"), vocab);
    save_tsv(sp.testing, dir / split_file(id, "test"), vocab);
    noise[std::to_string(id)] = noise_indices(sp.training);
  }
  for (const auto& [id, pairs] : data.trusted) save_tsv(pairs, dir / split_file(id, "trusted"), vocab);
  const json j{{"vocab_size", data.vocab_size}, {"generic_id", data.generic_id}, {"seen_ids", data.seen_ids},
               {"unseen_ids", data.unseen_ids}, {"specs", specs}, {"noise", noise}};
  std::ofstream os(dir / "dataset.json", std::ios::trunc);
  if (!os) throw IoError("cannot write " + (dir / "dataset.json").string());
  os << j.dump(1) << '\n';
}

MultiDomainDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "dataset.json");
  if (!is) throw IoError("no dataset at " + dir.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ParseError((dir / "dataset.json").string() + ": " + e.what());
  }
  MultiDomainDataset ds;
  try {
    ds.vocab_size = j.at("vocab_size").get<std::size_t>();
    ds.generic_id = j.at("generic_id").get<int>();
    ds.seen_ids = j.at("seen_ids").get<std::vector<int>>();
    ds.unseen_ids = j.at("unseen_ids").get<std::vector<int>>();
    for (const auto& sj : j.at("specs")) {
      auto spec = sj.get<DomainSpec>();
      ds.specs.emplace(spec.domain_id, std::move(spec));
    }
  } catch (const json::exception& e) {
    throw ParseError((dir / "dataset.json").string() + ": " + e.what());
  }
  const Vocabulary vocab = Vocabulary::load(dir / "vocab.txt");
  if (vocab.size() != ds.vocab_size) throw ParseError(dir.string() + ": vocabulary size mismatch");
  for (const auto& [id, spec] : ds.specs) {
    DatasetSplits sp;
    sp.training = load_tsv(dir / split_file(id, "train"), vocab, id);
    sp.finetune = load_tsv(dir / split_file(id, "finetune"), vocab, id);
    sp.testing = load_tsv(dir / split_file(id, "test"), vocab, id);
    const auto key = std::to_string(id);
    flag(sp.training, j.at("noise").contains(key) ? j.at("noise").at(key).get<std::vector<std::size_t>>()
                                                   : std::vector<std::size_t>{});
    for (auto* v : {&sp.finetune, &sp.testing}) {
      for (auto& p : *v) p.is_noise = false;
    }
    ds.splits.emplace(id, std::move(sp));
  }
  for (int id : ds.seen_ids) {
    auto trusted = load_tsv(dir / split_file(id, "trusted"), vocab, id);
    for (auto& p : trusted) p.is_noise = false;
    ds.trusted.emplace(id, std::move(trusted));
  }
  return ds;
}

void to_json(json& j, const DomainSpec& spec) {
  j = json{{"domain_id", spec.domain_id},
           {"name", spec.name},
           {"substitution", spec.substitution},
           {"rule", rule_name(spec.rule)},
           {"min_len", spec.min_len},
           {"max_len", spec.max_len},
           {"token_weights", spec.token_weights},
           {"seed", spec.seed}};
}

void from_json(const json& j, DomainSpec& spec) {
  require_keys(j, {"domain_id", "name", "substitution", "rule", "min_len", "max_len", "token_weights", "seed"},
               "domain spec");
  spec = DomainSpec{};
  spec.domain_id = j.at("domain_id").get<int>();
  spec.name = j.value("name", "domain" + std::to_string(spec.domain_id));
  spec.substitution = j.at("substitution").get<std::vector<TokenId>>();
  spec.rule = parse_rule(j.value("rule", std::string("identity")));
  spec.min_len = j.value("min_len", spec.min_len);
  spec.max_len = j.value("max_len", spec.max_len);
  spec.token_weights = j.value("token_weights", std::vector<double>{});
  spec.seed = j.value("seed", std::uint64_t{0});
  spec.validate();
}

namespace {

json budgets_json(const TokenBudgets& b) {
  return json{{"train_tokens", b.train_tokens}, {"finetune_tokens", b.finetune_tokens}, {"test_tokens", b.test_tokens}};
}

TokenBudgets budgets_from(const json& j, TokenBudgets b, const std::string& context) {
  require_keys(j, {"train_tokens", "finetune_tokens", "test_tokens"}, context);
  b.train_tokens = j.value("train_tokens", b.train_tokens);
  b.finetune_tokens = j.value("finetune_tokens", b.finetune_tokens);
  b.test_tokens = j.value("test_tokens", b.test_tokens);
  return b;
}

}  // namespace

void to_json(json& j, const DatasetConfig& c) {
  std::vector<std::string> rules;
  for (const auto& r : c.rules) rules.push_back(rule_name(r));
  j = json{{"vocab_size", c.vocab_size},
           {"n_seen", c.n_seen},
           {"n_unseen", c.n_unseen},
           {"topic_size", c.topic_size},
           {"topic_boost", c.topic_boost},
           {"generic_topic_weight", c.generic_topic_weight},
           {"foreign_topic_weight", c.foreign_topic_weight},
           {"shifted_terms", c.shifted_terms},
           {"min_len", c.min_len},
           {"max_len", c.max_len},
           {"seen_budgets", budgets_json(c.seen_budgets)},
           {"unseen_budgets", budgets_json(c.unseen_budgets)},
           {"generic_train_tokens", c.generic_train_tokens},
           {"noise_fraction", c.noise_fraction},
           {"trusted_size", c.trusted_size},
           {"rules", rules},
           {"seed", c.seed}};
}

void from_json(const json& j, DatasetConfig& c) {
  require_keys(j,
               {"vocab_size", "n_seen", "n_unseen", "topic_size", "topic_boost", "generic_topic_weight", "foreign_topic_weight",
                "shifted_terms",
                "min_len", "max_len", "seen_budgets", "unseen_budgets", "generic_train_tokens", "noise_fraction",
                "trusted_size", "rules", "seed"},
               "dataset");
  c = DatasetConfig{};
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.n_seen = j.value("n_seen", c.n_seen);
  c.n_unseen = j.value("n_unseen", c.n_unseen);
  c.topic_size = j.value("topic_size", c.topic_size);
  c.topic_boost = j.value("topic_boost", c.topic_boost);
  c.generic_topic_weight = j.value("generic_topic_weight", c.generic_topic_weight);
  c.foreign_topic_weight = j.value("foreign_topic_weight", c.foreign_topic_weight);
  c.shifted_terms = j.value("shifted_terms", c.shifted_terms);
  c.min_len = j.value("min_len", c.min_len);
  c.max_len = j.value("max_len", c.max_len);
  if (j.contains("seen_budgets")) c.seen_budgets = budgets_from(j["seen_budgets"], c.seen_budgets, "dataset.seen_budgets");
  if (j.contains("unseen_budgets")) {
    c.unseen_budgets = budgets_from(j["unseen_budgets"], c.unseen_budgets, "dataset.unseen_budgets");
  }
  c.generic_train_tokens = j.value("generic_train_tokens", c.generic_train_tokens);
  c.noise_fraction = j.value("noise_fraction", c.noise_fraction);
  c.trusted_size = j.value("trusted_size", c.trusted_size);
  c.rules.clear();
  for (const auto& r : j.value("rules", std::vector<std::string>{})) c.rules.push_back(parse_rule(r));
  c.seed = j.value("seed", c.seed);
  c.validate();
}

}  // namespace epi
