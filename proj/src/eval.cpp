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

#include "epi/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>

#include "epi/errors.hpp"
#include "epi/log.hpp"

namespace epi {

// ---- BLEU ----------------------------------------------------------------------

namespace {

using NgramCounts = std::map<TokenSeq, std::size_t>;

NgramCounts count_ngrams(const TokenSeq& seq, std::size_t n) {
  NgramCounts c;
  if (seq.size() < n) return c;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) ++c[TokenSeq(seq.begin() + i, seq.begin() + i + n)];
  return c;
}

}  // namespace

BleuScore corpus_bleu(const std::vector<TokenSeq>& hypotheses, const std::vector<TokenSeq>& references,
                      double epsilon) {
  if (hypotheses.size() != references.size()) {
    throw ContractError("corpus_bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                        std::to_string(references.size()) + " references");
  }
  std::array<std::size_t, 4> match{}, total{};
  BleuScore b;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto& h = hypotheses[s];
    const auto& r = references[s];
    b.hyp_len += h.size();
    b.ref_len += r.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto hc = count_ngrams(h, n);
      const auto rc = count_ngrams(r, n);
      for (const auto& [g, c] : hc) {
        auto it = rc.find(g);
        if (it != rc.end()) match[n - 1] += std::min(c, it->second);
      }
      if (h.size() >= n) total[n - 1] += h.size() - n + 1;
    }
  }
  if (b.hyp_len == 0) {
    b.brevity_penalty = b.ref_len == 0 ? 1.0 : 0.0;
    b.score = b.ref_len == 0 ? 100.0 : 0.0;
    return b;
  }
  double log_sum = 0.0;
  std::size_t orders = 0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (total[n] == 0) continue;
    const double t = static_cast<double>(total[n]);
    b.precisions[n] = match[n] > 0 ? static_cast<double>(match[n]) / t : epsilon / t;
    log_sum += std::log(b.precisions[n]);
    ++orders;
  }
  b.brevity_penalty =
      b.hyp_len < b.ref_len ? std::exp(1.0 - static_cast<double>(b.ref_len) / static_cast<double>(b.hyp_len)) : 1.0;
  b.score = 100.0 * b.brevity_penalty * std::exp(log_sum / static_cast<double>(orders));
  return b;
}

std::size_t decode_budget(const TokenSeq& source) { return 2 * source.size() + 4; }

std::vector<TokenSeq> translate(ModelRef model, const std::vector<SentencePair>& pairs, const DecodeOptions& opts) {
  std::vector<TokenSeq> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    const auto budget = decode_budget(p.source);
    out.push_back(opts.beam_width <= 1 ? greedy_decode(model, p.source, budget).tokens
                                       : beam_decode(model, p.source, opts.beam_width, budget).tokens);
  }
  return out;
}

std::vector<TokenSeq> references(const std::vector<SentencePair>& pairs) {
  std::vector<TokenSeq> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(p.target);
  return out;
}

std::vector<SentencePair> test_subset(const std::vector<SentencePair>& testing, const DecodeOptions& opts) {
  if (opts.max_test_pairs == 0 || testing.size() <= opts.max_test_pairs) return testing;
  return std::vector<SentencePair>(testing.begin(), testing.begin() + static_cast<std::ptrdiff_t>(opts.max_test_pairs));
}

// ---- Statistics ------------------------------------------------------------------

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t m = i; m <= j; ++m) ranks[order[m]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ContractError("spearman: length mismatch");
  if (x.size() < 2) return 0.0;
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double mx = mean_of(rx), my = mean_of(ry);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

// ---- Protocol ------------------------------------------------------------------

std::vector<AggregateCell> EvalReport::aggregate() const {
  std::map<std::pair<std::string, int>, std::vector<const EvalCell*>> groups;
  for (const auto& c : cells) groups[{c.method, c.domain}].push_back(&c);
  std::vector<AggregateCell> out;
  for (const auto& [key, group] : groups) {
    std::vector<double> before, after, delta;
    for (const auto* c : group) {
      before.push_back(c->bleu_before);
      after.push_back(c->bleu_after);
      delta.push_back(c->delta_ft);
    }
    AggregateCell a;
    a.method = key.first;
    a.domain = key.second;
    a.seen = group.front()->seen;
    a.before_mean = mean_of(before);
    a.before_std = stddev_of(before);
    a.after_mean = mean_of(after);
    a.after_std = stddev_of(after);
    a.delta_mean = mean_of(delta);
    a.delta_std = stddev_of(delta);
    a.seeds = group.size();
    out.push_back(a);
  }
  return out;
}

double EvalReport::mean(const std::string& method, bool seen, const char* metric) const {
  const std::string m(metric);
  std::vector<double> v;
  for (const auto& c : cells) {
    if (c.method != method || c.seen != seen) continue;
    if (m == "before") {
      v.push_back(c.bleu_before);
    } else if (m == "after") {
      v.push_back(c.bleu_after);
    } else if (m == "delta") {
      v.push_back(c.delta_ft);
    } else {
      throw ContractError("unknown metric '" + m + "'");
    }
  }
  return mean_of(v);
}

std::vector<EvalCell> evaluate_before_after(const std::map<std::string, const EncoderDecoderModel*>& models,
                                            const MultiDomainDataset& data, const Hyperparams& hp,
                                            const DecodeOptions& opts, std::uint64_t seed,
                                            std::map<std::string, Hypotheses>* before_hyps) {
  std::vector<EvalCell> cells;
  for (const auto& [method, model] : models) {
    if (model == nullptr) throw LookupError("missing checkpoint for method '" + method + "'");
    for (int d : data.eval_ids()) {
      const auto& splits = data.at(d);
      const auto test = test_subset(splits.testing, opts);
      const auto refs = references(test);
      auto before = translate(model->ref(), test, opts);
      EvalCell c;
      c.method = method;
      c.domain = d;
      c.seen = data.is_seen(d);
      c.seed = seed;
      c.bleu_before = corpus_bleu(before, refs).score;
      if (hp.finetune_epochs == 0) {
        c.bleu_after = c.bleu_before;
      } else {
        const auto adapted = finetune(*model, splits.finetune, hp, derive_seed(seed, 500 + static_cast<std::uint64_t>(d)));
        c.bleu_after = corpus_bleu(translate(adapted.ref(), test, opts), refs).score;
      }
      c.delta_ft = c.bleu_after - c.bleu_before;
      log_info("eval " + method + " domain " + std::to_string(d) + ": before " + std::to_string(c.bleu_before) +
               " after " + std::to_string(c.bleu_after));
      if (before_hyps) (*before_hyps)[method][d] = std::move(before);
      cells.push_back(c);
    }
  }
  return cells;
}

EvalReport run_protocol(const std::vector<std::string>& methods, const std::vector<ProtocolRun>& runs,
                        const Hyperparams& hp, const DecodeOptions& opts) {
  EvalReport report;
  for (const auto& run : runs) {
    if (run.data == nullptr) throw ContractError("protocol run without a dataset");
    std::map<std::string, const EncoderDecoderModel*> selected;
    for (const auto& m : methods) {
      auto it = run.models.find(m);
      if (it == run.models.end() || it->second == nullptr) {
        throw LookupError("missing checkpoint for method '" + m + "' (seed " + std::to_string(run.seed) + ")");
      }
      selected.emplace(m, it->second);
    }
    auto cells = evaluate_before_after(selected, *run.data, hp, opts, run.seed);
    report.cells.insert(report.cells.end(), cells.begin(), cells.end());
  }
  return report;
}

// ---- Module swap -----------------------------------------------------------------

std::string part_name(SwapPart part) { return part == SwapPart::encoder ? "encoder" : "decoder"; }

double SwapReport::domain_mean() const {
  std::vector<double> v;
  for (const auto& c : cells) v.push_back(c.mean_improvement);
  return mean_of(v);
}

namespace {

double bleu_on(ModelRef model, const std::vector<SentencePair>& test, const DecodeOptions& opts) {
  return corpus_bleu(translate(model, test, opts), references(test)).score;
}

ModelRef swapped(const EncoderDecoderModel& trained, const EncoderDecoderModel& specialist, SwapPart part) {
  return part == SwapPart::encoder ? compose(trained.encoder, specialist.decoder)
                                   : compose(specialist.encoder, trained.decoder);
}

}  // namespace

double swap_gain(const EncoderDecoderModel& trained, const EncoderDecoderModel& specialist,
                 const std::vector<SentencePair>& test, SwapPart part, const DecodeOptions& opts) {
  return bleu_on(swapped(trained, specialist, part), test, opts) - bleu_on(specialist.ref(), test, opts);
}

SpecialistBleu specialist_bleu(const std::vector<EncoderDecoderModel>& specialists, const std::vector<int>& domains,
                               const MultiDomainDataset& data, const DecodeOptions& opts) {
  if (specialists.size() != domains.size()) throw ContractError("one domain id per specialist expected");
  SpecialistBleu out;
  for (int d : data.eval_ids()) {
    const auto test = test_subset(data.at(d).testing, opts);
    for (std::size_t s = 0; s < specialists.size(); ++s) {
      if (domains[s] == d) continue;
      out[{domains[s], d}] = bleu_on(specialists[s].ref(), test, opts);
    }
  }
  return out;
}

SwapReport swap_experiment(const std::string& method, const EncoderDecoderModel& trained,
                           const std::vector<EncoderDecoderModel>& specialists, const std::vector<int>& domains,
                           const MultiDomainDataset& data, SwapPart part, const DecodeOptions& opts,
                           const SpecialistBleu* cache) {
  if (specialists.size() != domains.size()) throw ContractError("one domain id per specialist expected");
  for (const auto& s : specialists) compose(trained.encoder, s.decoder);  // throws on incompatible configs
  SwapReport r;
  r.method = method;
  r.part = part;
  for (int d : data.eval_ids()) {
    const auto test = test_subset(data.at(d).testing, opts);
    std::vector<double> gains;
    for (std::size_t s = 0; s < specialists.size(); ++s) {
      if (domains[s] == d) continue;
      double base = 0.0;
      auto hit = cache ? cache->find({domains[s], d}) : SpecialistBleu::const_iterator{};
      if (cache && hit != cache->end()) {
        base = hit->second;
      } else {
        base = bleu_on(specialists[s].ref(), test, opts);
      }
      gains.push_back(bleu_on(swapped(trained, specialists[s], part), test, opts) - base);
    }
    r.cells.push_back(SwapCell{d, data.is_seen(d), mean_of(gains), gains.size()});
  }
  return r;
}

// ---- Perturbation ---------------------------------------------------------------

double PerturbReport::mean_bleu(const std::string& method, double sigma) const {
  std::vector<double> v;
  for (const auto& c : cells) {
    if (c.method == method && c.sigma == sigma) v.push_back(c.bleu);
  }
  return mean_of(v);
}

EncoderDecoderModel perturb(const EncoderDecoderModel& model, double sigma, std::uint64_t noise_seed) {
  EncoderDecoderModel copy = model;
  if (sigma == 0.0) return copy;
  Rng rng(noise_seed);
  for (ParameterSet* ps : {&copy.encoder.params, &copy.decoder.params}) {
    for (auto& [name, t] : ps->entries()) {
      for (double& x : t.mutable_data()) x += sigma * rng.normal();
    }
  }
  return copy;
}

PerturbReport perturb_experiment(const std::map<std::string, const EncoderDecoderModel*>& models,
                                 const MultiDomainDataset& data, const std::vector<double>& sigmas,
                                 const std::vector<std::uint64_t>& noise_seeds, const DecodeOptions& opts) {
  PerturbReport r;
  const auto ids = data.eval_ids();
  std::map<int, std::vector<SentencePair>> tests;
  for (int d : ids) tests[d] = test_subset(data.at(d).testing, opts);
  std::vector<double> levels = sigmas;
  if (std::find(levels.begin(), levels.end(), 0.0) == levels.end()) levels.insert(levels.begin(), 0.0);
  for (const auto& [method, model] : models) {
    if (model == nullptr) throw LookupError("missing checkpoint for method '" + method + "'");
    std::map<int, double> clean;
    for (std::size_t si = 0; si < levels.size(); ++si) {
      const double sigma = levels[si];
      for (std::uint64_t ns : noise_seeds) {
        // Same noise stream for every method so the comparison is paired.
        std::optional<EncoderDecoderModel> noisy;
        if (sigma != 0.0) noisy = perturb(*model, sigma, derive_seed(ns, si));
        for (int d : ids) {
          double bleu = 0.0;
          if (!noisy) {
            if (!clean.count(d)) clean[d] = bleu_on(model->ref(), tests[d], opts);
            bleu = clean[d];
          } else {
            bleu = bleu_on(noisy->ref(), tests[d], opts);
          }
          r.cells.push_back(PerturbCell{method, sigma, d, ns, bleu});
        }
      }
    }
  }
  return r;
}

// ---- Divergence bins ---------------------------------------------------------------

double BinReport::spearman(const std::string& method) const {
  auto it = bleu.find(method);
  if (it == bleu.end()) throw LookupError("no bin scores for method '" + method + "'");
  std::vector<double> x, y;
  for (std::size_t k = 0; k < kShards; ++k) {
    if (bin_sizes[k] == 0) continue;
    x.push_back(static_cast<double>(k + 1));
    y.push_back(it->second[k]);
  }
  return epi::spearman(x, y);
}

BinReport bin_report(const std::map<std::string, Hypotheses>& before_hyps, const CurriculumPlan& plan,
                     const std::map<int, std::vector<SentencePair>>& scored_tests) {
  BinReport r;
  // bin membership per (domain, position) so every method is binned alike
  std::map<int, std::vector<std::size_t>> bin_of;
  for (const auto& [d, pairs] : scored_tests) {
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (!pairs[i].d_score) throw ContractError("test pair without divergence score");
      const std::size_t b = bin_index(*pairs[i].d_score, plan.shard_thresholds);
      bin_of[d].push_back(b);
      ++r.bin_sizes[b];
    }
  }
  for (const auto& [method, hyps] : before_hyps) {
    r.methods.push_back(method);
    std::array<std::vector<TokenSeq>, kShards> h, ref;
    for (const auto& [d, pairs] : scored_tests) {
      auto it = hyps.find(d);
      if (it == hyps.end() || it->second.size() != pairs.size()) {
        throw ContractError("hypotheses of '" + method + "' do not match the test pairs of domain " + std::to_string(d));
      }
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        h[bin_of[d][i]].push_back(it->second[i]);
        ref[bin_of[d][i]].push_back(pairs[i].target);
      }
    }
    std::array<double, kShards> scores{};
    for (std::size_t k = 0; k < kShards; ++k) scores[k] = h[k].empty() ? 0.0 : corpus_bleu(h[k], ref[k]).score;
    r.bleu[method] = scores;
  }
  return r;
}

// ---- Serialization ---------------------------------------------------------------

json report_json(const EvalReport& r) {
  json cells = json::array();
  for (const auto& c : r.cells) {
    cells.push_back({{"method", c.method},
                     {"domain", c.domain},
                     {"seen", c.seen},
                     {"seed", c.seed},
                     {"bleu_before", c.bleu_before},
                     {"bleu_after", c.bleu_after},
                     {"delta_ft", c.delta_ft}});
  }
  json agg = json::array();
  for (const auto& a : r.aggregate()) {
    agg.push_back({{"method", a.method},
                   {"domain", a.domain},
                   {"seen", a.seen},
                   {"seeds", a.seeds},
                   {"bleu_before", {{"mean", a.before_mean}, {"std", a.before_std}}},
                   {"bleu_after", {{"mean", a.after_mean}, {"std", a.after_std}}},
                   {"delta_ft", {{"mean", a.delta_mean}, {"std", a.delta_std}}}});
  }
  return json{{"bleu", "corpus BLEU over token ids, 4-gram, epsilon floor 0.1"}, {"cells", cells}, {"aggregate", agg}};
}

json report_json(const SwapReport& r) {
  json cells = json::array();
  for (const auto& c : r.cells) {
    cells.push_back({{"domain", c.domain}, {"seen", c.seen}, {"mean_improvement", c.mean_improvement},
                     {"specialists", c.specialists}});
  }
  return json{{"method", r.method}, {"part", part_name(r.part)}, {"domain_mean", r.domain_mean()}, {"cells", cells}};
}

json report_json(const PerturbReport& r) {
  json cells = json::array();
  for (const auto& c : r.cells) {
    cells.push_back({{"method", c.method}, {"sigma", c.sigma}, {"domain", c.domain}, {"noise_seed", c.noise_seed},
                     {"bleu", c.bleu}});
  }
  return json{{"cells", cells}};
}

json report_json(const BinReport& r) {
  json per_method = json::object();
  for (const auto& m : r.methods) {
    per_method[m] = {{"bleu", r.bleu.at(m)}, {"spearman", r.spearman(m)}};
  }
  return json{{"bin_sizes", r.bin_sizes}, {"methods", per_method}};
}

void write_eval_csv(const EvalReport& r, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os.precision(17);
  os << "method,domain,seen_flag,metric,value,seed\n";
  for (const auto& c : r.cells) {
    const int seen = c.seen ? 1 : 0;
    os << c.method << ',' << c.domain << ',' << seen << ",bleu_before," << c.bleu_before << ',' << c.seed << '\n';
    os << c.method << ',' << c.domain << ',' << seen << ",bleu_after," << c.bleu_after << ',' << c.seed << '\n';
    os << c.method << ',' << c.domain << ',' << seen << ",delta_ft," << c.delta_ft << ',' << c.seed << '\n';
  }
}

}  // namespace epi
