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

#include "checks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "epi/curriculum.hpp"
#include "epi/errors.hpp"
#include "epi/eval.hpp"
#include "epi/random.hpp"

namespace epi::checks {

namespace {

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

Tensor rand_tensor(const Shape& shape, Rng& rng, bool grad = true, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(shape, std::move(v), grad);
}

// Values bounded away from zero (relu kink).
Tensor rand_away_from_zero(const Shape& shape, Rng& rng, double gap) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) {
    do {
      x = rng.uniform(-1.0, 1.0);
    } while (std::abs(x) < gap);
  }
  return Tensor::from(shape, std::move(v), true);
}

// sum(out * r) with a fixed random r, so every output element matters.
Tensor weighted(const Tensor& out, const Tensor& r) { return sum(mul(out, r)); }

std::vector<std::size_t> rand_ids(std::size_t n, std::size_t hi, Rng& rng) {
  std::vector<std::size_t> ids(n);
  for (auto& i : ids) i = rng.uniform_index(hi);
  return ids;
}

TokenSeq rand_tokens(std::size_t len, std::size_t vocab, Rng& rng) {
  TokenSeq s(len);
  for (auto& t : s) t = kFirstContent + rng.uniform_index(vocab - kFirstContent);
  return s;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_len = 12;
  c.vocab_size = 12;
  return c;
}

std::vector<Tensor> all_params(EncoderDecoderModel& m) {
  std::vector<Tensor> out;
  for (auto& [n, t] : m.encoder.params.entries()) out.push_back(t);
  for (auto& [n, t] : m.decoder.params.entries()) out.push_back(t);
  return out;
}

}  // namespace

double gradient_rel_error(const Objective& f, const std::vector<Tensor>& inputs, double h) {
  std::vector<Tensor> in = inputs;
  for (auto& t : in) t.zero_grad();
  backward(f(in));

  double worst = 0.0;
  for (auto& t : in) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    std::vector<double> numeric(t.numel());
    auto d = t.mutable_data();
    for (std::size_t e = 0; e < d.size(); ++e) {
      NoGradGuard guard;
      const double x = d[e];
      d[e] = x + h;
      const double fp = f(in).item();
      d[e] = x - h;
      const double fm = f(in).item();
      d[e] = x;
      numeric[e] = (fp - fm) / (2.0 * h);
    }
    double diff = 0.0, scale = 1e-7;  // above central-difference rounding noise for zero gradients
    for (std::size_t e = 0; e < d.size(); ++e) {
      diff = std::max(diff, std::abs(analytic[e] - numeric[e]));
      scale = std::max({scale, std::abs(analytic[e]), std::abs(numeric[e])});
    }
    worst = std::max(worst, diff / scale);
    t.zero_grad();
  }
  return worst;
}

std::vector<GradCase> gradient_cases() {
  std::vector<GradCase> cases;
  auto add_case = [&cases](std::string op, auto make) { cases.push_back({std::move(op), make}); };

  add_case("matmul", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = rand_tensor({3, 4}, rng), b = rand_tensor({4, 2}, rng), r = rand_tensor({3, 2}, rng, false);
    return std::pair{Objective([r](const std::vector<Tensor>& x) { return weighted(matmul(x[0], x[1]), r); }),
                     std::vector<Tensor>{a, b}};
  });
  add_case("add", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = rand_tensor({3, 4}, rng), b = rand_tensor({4}, rng), r = rand_tensor({3, 4}, rng, false);
    return std::pair{Objective([r](const std::vector<Tensor>& x) { return weighted(add(x[0], x[1]), r); }),
                     std::vector<Tensor>{a, b}};
  });
  add_case("sub", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = rand_tensor({2, 3, 4}, rng), b = rand_tensor({3, 4}, rng), r = rand_tensor({2, 3, 4}, rng, false);
    return std::pair{Objective([r](const std::vector<Tensor>& x) { return weighted(sub(x[0], x[1]), r); }),
                     std::vector<Tensor>{a, b}};
  });
  add_case("mul", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = rand_tensor({3, 4}, rng), b = rand_tensor({4}, rng), r = rand_tensor({3, 4}, rng, false);
    return std::pair{Objective([r](const std::vector<Tensor>& x) { return weighted(mul(x[0], x[1]), r); }),
                     std::vector<Tensor>{a, b}};
  });
  add_case("scale", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = rand_tensor({5}, rng), r = rand_tensor({5}, rng, false);
    const double c = rng.uniform(-2.0, 2.0);
    return std::pair{Objective([r, c](const std::vector<Tensor>& x) { return weighted(scale(x[0], c), r); }),
                     std::vector<Tensor>{a}};
  });
  add_case("relu", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = rand_away_from_zero({3, 4}, rng, 0.01), r = rand_tensor({3, 4}, rng, false);
    return std::pair{Objective([r](const std::vector<Tensor>& x) { return weighted(relu(x[0]), r); }),
                     std::vector<Tensor>{a}};
  });
  add_case("gelu", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = rand_tensor({3, 4}, rng), r = rand_tensor({3, 4}, rng, false);
    return std::pair{Objective([r](const std::vector<Tensor>& x) { return weighted(gelu(x[0]), r); }),
                     std::vector<Tensor>{a}};
  });
  add_case("sum", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = rand_tensor({4, 3}, rng);
    return std::pair{Objective([](const std::vector<Tensor>& x) { return sum(x[0]); }), std::vector<Tensor>{a}};
  });
  add_case("layer_norm", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = rand_tensor({3, 5}, rng), g = rand_tensor({5}, rng), b = rand_tensor({5}, rng);
    Tensor r = rand_tensor({3, 5}, rng, false);
    return std::pair{
        Objective([r](const std::vector<Tensor>& v) { return weighted(layer_norm(v[0], v[1], v[2]), r); }),
        std::vector<Tensor>{x, g, b}};
  });
  add_case("softmax_cross_entropy", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor logits = rand_tensor({4, 6}, rng, true, -2.0, 2.0);
    auto targets = rand_ids(4, 6, rng);
    return std::pair{Objective([targets](const std::vector<Tensor>& x) { return softmax_cross_entropy(x[0], targets); }),
                     std::vector<Tensor>{logits}};
  });
  add_case("embedding", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor table = rand_tensor({7, 3}, rng), r = rand_tensor({6, 3}, rng, false);
    auto ids = rand_ids(6, 7, rng);  // repeats exercise accumulation
    return std::pair{Objective([r, ids](const std::vector<Tensor>& x) { return weighted(embedding(x[0], ids), r); }),
                     std::vector<Tensor>{table}};
  });
  add_case("attention", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor q = rand_tensor({5, 4}, rng), k = rand_tensor({6, 4}, rng), v = rand_tensor({6, 4}, rng);
    Tensor r = rand_tensor({5, 4}, rng, false);
    std::vector<AttentionSegment> segs{{0, 2, 0, 3}, {2, 3, 3, 3}};
    return std::pair{Objective([r, segs](const std::vector<Tensor>& x) {
                       return weighted(attention(x[0], x[1], x[2], segs, 2, false), r);
                     }),
                     std::vector<Tensor>{q, k, v}};
  });
  add_case("attention_causal", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor q = rand_tensor({5, 4}, rng), k = rand_tensor({5, 4}, rng), v = rand_tensor({5, 4}, rng);
    Tensor r = rand_tensor({5, 4}, rng, false);
    std::vector<AttentionSegment> segs{{0, 2, 0, 2}, {2, 3, 2, 3}};
    return std::pair{Objective([r, segs](const std::vector<Tensor>& x) {
                       return weighted(attention(x[0], x[1], x[2], segs, 2, true), r);
                     }),
                     std::vector<Tensor>{q, k, v}};
  });
  add_case("mlp3", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor in = rand_tensor({4, 3}, rng, false);
    Tensor w1 = rand_tensor({3, 5}, rng), b1 = rand_tensor({5}, rng), w2 = rand_tensor({5, 5}, rng);
    Tensor b2 = rand_tensor({5}, rng), w3 = rand_tensor({5, 4}, rng);
    auto targets = rand_ids(4, 4, rng);
    return std::pair{Objective([in, targets](const std::vector<Tensor>& x) {
                       Tensor h1 = gelu(add(matmul(in, x[0]), x[1]));
                       Tensor h2 = relu(add(matmul(h1, x[2]), x[3]));
                       return softmax_cross_entropy(matmul(h2, x[4]), targets);
                     }),
                     std::vector<Tensor>{w1, b1, w2, b2, w3}};
  });
  add_case("seq2seq_nll", [](std::uint64_t seed) {
    Rng rng(seed);
    auto model = std::make_shared<EncoderDecoderModel>(init_model(tiny_config(), seed));
    std::vector<SentencePair> batch;
    for (int p = 0; p < 2; ++p) {
      batch.push_back({rand_tokens(2 + rng.uniform_index(3), 12, rng), rand_tokens(2 + rng.uniform_index(3), 12, rng)});
    }
    return std::pair{Objective([model, batch](const std::vector<Tensor>&) { return batch_nll(model->ref(), batch); }),
                     all_params(*model)};
  });
  add_case("lm_nll", [](std::uint64_t seed) {
    Rng rng(seed);
    auto lm = std::make_shared<LanguageModel>(init_language_model(tiny_config(), seed));
    std::vector<TokenSeq> sents{rand_tokens(3, 12, rng), rand_tokens(4, 12, rng)};
    std::vector<Tensor> params;
    for (auto& [n, t] : lm->params.entries()) params.push_back(t);
    return std::pair{Objective([lm, sents](const std::vector<Tensor>&) { return lm_batch_nll(*lm, sents); }), params};
  });
  return cases;
}

std::vector<Outcome> gradient_suite(std::size_t n_inputs, double tol) {
  std::vector<Outcome> out;
  for (const auto& c : gradient_cases()) {
    double worst = 0.0;
    for (std::size_t s = 0; s < n_inputs; ++s) {
      auto [f, inputs] = c.make(derive_seed(1000, s));
      worst = std::max(worst, gradient_rel_error(f, inputs));
    }
    out.push_back({"grad " + c.op, worst < tol, fmt("max rel err %.3g", worst)});
  }
  return out;
}

// ---- Episodic ---------------------------------------------------------------------

MicroSetup micro_setup(std::size_t n_domains, std::uint64_t seed) {
  MicroSetup s;
  s.config = tiny_config();
  Rng rng(seed);
  const std::size_t content = s.config.vocab_size - kFirstContent;
  for (std::size_t d = 0; d < n_domains; ++d) {
    const int id = static_cast<int>(d) + 1;
    s.domains.push_back(id);
    for (int p = 0; p < 12; ++p) {
      SentencePair pair;
      pair.source = rand_tokens(3 + rng.uniform_index(4), s.config.vocab_size, rng);
      for (TokenId t : pair.source) pair.target.push_back(kFirstContent + (t - kFirstContent + 3 * d) % content);
      if (d % 2 == 1) std::reverse(pair.target.begin(), pair.target.end());
      pair.domain_id = id;
      s.pairs.push_back(std::move(pair));
    }
  }
  s.start = init_model(s.config, derive_seed(seed, 1));
  return s;
}

std::vector<Outcome> freeze_locality_suite(std::size_t episodes) {
  std::vector<Outcome> out;
  const MicroSetup setup = micro_setup(3, 11);
  Hyperparams hp;
  hp.alpha = 0.05;
  hp.beta = 0.05;
  hp.batch_size = 4;
  hp.seed = 3;
  const BatchSource source = BatchSource::uniform(setup.pairs);

  // (a), (c), (d) over one run.
  EpisodicState state = init_episodic(setup.start, setup.domains, hp, episodes);
  bool attribution_ok = true;
  std::size_t specialist_grad_calls = 0;
  const PairLoss inner = nll_loss();
  PairLoss watched = [&](const EncoderParams& theta, const DecoderParams& phi, std::span<const SentencePair> batch,
                         Tracking tr) {
    for (std::size_t j = 0; j < state.specialists.size(); ++j) {
      const bool hit = (tr.encoder && &theta == &state.specialists[j].encoder) ||
                       (tr.decoder && &phi == &state.specialists[j].decoder);
      if (!hit) continue;
      ++specialist_grad_calls;
      for (const auto& p : batch) attribution_ok &= p.domain_id == state.domains[j];
    }
    return inner(theta, phi, batch, tr);
  };

  std::vector<std::uint64_t> spec_sums(state.specialists.size());
  std::uint64_t agg_sum = state.agg.checksum();
  std::vector<std::uint64_t> prev_spec(state.specialists.size());
  for (std::size_t j = 0; j < state.specialists.size(); ++j) prev_spec[j] = state.specialists[j].checksum();
  bool frozen_ok = true, agg_untouched_by_specialists = true, specialists_moved = true;
  EpisodeHook hook = [&](const EpisodicState& st, EpisodePhase phase, const EpisodeRecord&) {
    if (phase == EpisodePhase::specialists_done) {
      agg_untouched_by_specialists &= st.agg.checksum() == agg_sum;
      for (std::size_t j = 0; j < st.specialists.size(); ++j) {
        spec_sums[j] = st.specialists[j].checksum();
        specialists_moved &= spec_sums[j] != prev_spec[j];
      }
    } else {
      for (std::size_t j = 0; j < st.specialists.size(); ++j) {
        frozen_ok &= st.specialists[j].checksum() == spec_sums[j];
        prev_spec[j] = spec_sums[j];
      }
      agg_sum = st.agg.checksum();
    }
  };
  const EpisodeLog log = epi_train(state, source, watched, hook);

  out.push_back({"specialists unchanged by episodic steps", frozen_ok, std::to_string(episodes) + " episodes"});
  const bool iso = attribution_ok && agg_untouched_by_specialists && specialists_moved &&
                   specialist_grad_calls == episodes * setup.domains.size();
  out.push_back({"specialists change only via own steps", iso,
                 std::to_string(specialist_grad_calls) + " specialist gradient passes"});

  bool partner_ok = log.records.size() == episodes;
  for (const auto& r : log.records) partner_ok &= r.partner_k != r.domain_i;
  out.push_back({"partner k != i on every record", partner_ok, std::to_string(log.records.size()) + " records"});

  // Partner uniformity over the other n - 1 domains.
  {
    Rng rng(77);
    const std::size_t n = 5, draws = 20000;
    double worst = 0.0;
    bool self = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::size_t> counts(n, 0);
      for (std::size_t t = 0; t < draws; ++t) ++counts[draw_partner(n, i, rng)];
      self |= counts[i] != 0;
      for (std::size_t k = 0; k < n; ++k) {
        if (k != i) worst = std::max(worst, std::abs(static_cast<double>(counts[k]) / draws - 1.0 / (n - 1)));
      }
    }
    out.push_back({"partner uniform over other domains", !self && worst <= 0.02, fmt("max freq deviation %.4f", worst)});
  }

  // (b) locality of the single episodic steps.
  {
    EpisodicState st = init_episodic(setup.start, setup.domains, hp, episodes);
    Rng rng(9);
    Rng pick(10);
    bool enc_ok = true, dec_ok = true;
    for (std::size_t s = 0; s < 25; ++s) {
      const std::size_t i = s % st.specialists.size();
      const auto batch = source.sample(hp.batch_size, pick, 3, st.domains[i]);
      std::vector<std::uint64_t> before;
      for (const auto& m : st.specialists) before.push_back(m.checksum());

      const auto enc0 = st.agg.encoder.params.checksum(), dec0 = st.agg.decoder.params.checksum();
      episodic_encoder_step(st, i, batch, rng);
      enc_ok &= st.agg.encoder.params.checksum() != enc0 && st.agg.decoder.params.checksum() == dec0;

      const auto enc1 = st.agg.encoder.params.checksum();
      episodic_decoder_step(st, i, batch, rng);
      dec_ok &= st.agg.decoder.params.checksum() != dec0 && st.agg.encoder.params.checksum() == enc1;

      for (std::size_t j = 0; j < st.specialists.size(); ++j) {
        const bool same = st.specialists[j].checksum() == before[j];
        enc_ok &= same;
        dec_ok &= same;
      }
    }
    out.push_back({"episodic_encoder_step changes only theta", enc_ok, "25 steps"});
    out.push_back({"episodic_decoder_step changes only phi", dec_ok, "25 steps"});
  }
  return out;
}

namespace {

// Gradients of batch_nll w.r.t. the tracked parts, by deep copy with the
// frozen part's leaves excluded from the graph.
std::pair<std::vector<std::vector<double>>, std::vector<std::vector<double>>> oracle_grads(
    const EncoderParams& theta, const DecoderParams& phi, const std::vector<SentencePair>& batch, bool enc, bool dec) {
  EncoderParams t = theta;
  DecoderParams p = phi;
  t.params.set_requires_grad(enc);
  p.params.set_requires_grad(dec);
  t.params.zero_grad();
  p.params.zero_grad();
  backward(batch_nll(compose(t, p), batch));
  auto read = [](const ParameterSet& ps, bool on) {
    std::vector<std::vector<double>> g;
    for (const auto& [n, x] : ps.entries()) {
      std::vector<double> v(x.numel(), 0.0);
      if (on && x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), v.begin());
      g.push_back(std::move(v));
    }
    return g;
  };
  return {read(t.params, enc), read(p.params, dec)};
}

void descend(ParameterSet& ps, const std::vector<std::vector<double>>& g, double lr) {
  for (std::size_t e = 0; e < ps.entries().size(); ++e) {
    auto d = ps.entries()[e].second.mutable_data();
    for (std::size_t x = 0; x < d.size(); ++x) d[x] = d[x] - lr * g[e][x];
  }
}

double max_diff(const ParameterSet& a, const ParameterSet& b) {
  double m = 0.0;
  for (std::size_t e = 0; e < a.entries().size(); ++e) {
    auto x = a.entries()[e].second.data();
    auto y = b.entries()[e].second.data();
    for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x[i] - y[i]));
  }
  return m;
}

}  // namespace

double episode_oracle_max_diff(std::uint64_t seed) {
  const MicroSetup setup = micro_setup(2, seed);
  Hyperparams hp;
  hp.alpha = 0.07;
  hp.beta = 0.05;
  hp.batch_size = 3;
  hp.seed = seed;

  EpisodicState state = init_episodic(setup.start, setup.domains, hp, 1);
  epi_train(state, BatchSource::uniform(setup.pairs));

  // Straight-line oracle with its own sampling bookkeeping.
  Rng rng(derive_seed(hp.seed, 31));
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t p = 0; p < setup.pairs.size(); ++p) members[setup.pairs[p].domain_id].push_back(p);
  auto draw = [&](int domain) {
    std::vector<SentencePair> b;
    for (std::size_t x = 0; x < hp.batch_size; ++x) {
      const auto& m = members[domain];
      b.push_back(setup.pairs[m[rng.uniform_index(m.size())]]);
    }
    return b;
  };

  const std::size_t i = 0;
  const auto batch_i = draw(setup.domains[i]);
  std::vector<EncoderDecoderModel> spec(2, setup.start);
  for (std::size_t j = 0; j < 2; ++j) {
    const auto bj = draw(setup.domains[j]);
    auto [ge, gd] = oracle_grads(spec[j].encoder, spec[j].decoder, bj, true, true);
    descend(spec[j].encoder.params, ge, hp.beta);
    descend(spec[j].decoder.params, gd, hp.beta);
  }
  const std::size_t k = 1 - i;  // the only other domain; consumes one draw
  (void)rng.uniform_index(1);

  EncoderDecoderModel agg = setup.start;
  auto [agg_e, agg_d] = oracle_grads(agg.encoder, agg.decoder, batch_i, true, true);
  auto [enc_e, enc_unused] = oracle_grads(agg.encoder, spec[k].decoder, batch_i, true, false);
  auto [dec_unused, dec_d] = oracle_grads(spec[k].encoder, agg.decoder, batch_i, false, true);
  for (std::size_t e = 0; e < agg_e.size(); ++e)
    for (std::size_t x = 0; x < agg_e[e].size(); ++x) agg_e[e][x] += enc_e[e][x];
  for (std::size_t e = 0; e < agg_d.size(); ++e)
    for (std::size_t x = 0; x < agg_d[e].size(); ++x) agg_d[e][x] += dec_d[e][x];
  descend(agg.encoder.params, agg_e, hp.alpha);
  descend(agg.decoder.params, agg_d, hp.alpha);

  double m = std::max(max_diff(agg.encoder.params, state.agg.encoder.params),
                      max_diff(agg.decoder.params, state.agg.decoder.params));
  for (std::size_t j = 0; j < 2; ++j) {
    m = std::max({m, max_diff(spec[j].encoder.params, state.specialists[j].encoder.params),
                  max_diff(spec[j].decoder.params, state.specialists[j].decoder.params)});
  }
  // A model that did not move at all would also match a broken oracle.
  if (state.agg.checksum() == setup.start.checksum()) return INFINITY;
  return m;
}

// ---- BLEU ---------------------------------------------------------------------

double reference_bleu(const std::vector<TokenSeq>& hyps, const std::vector<TokenSeq>& refs) {
  double log_sum = 0.0;
  std::size_t h_len = 0, r_len = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    h_len += hyps[s].size();
    r_len += refs[s].size();
  }
  for (std::size_t n = 1; n <= 4; ++n) {
    std::size_t match = 0, total = 0;
    for (std::size_t s = 0; s < hyps.size(); ++s) {
      std::map<TokenSeq, std::size_t> hc, rc;
      for (std::size_t p = 0; p + n <= hyps[s].size(); ++p) ++hc[TokenSeq(hyps[s].begin() + p, hyps[s].begin() + p + n)];
      for (std::size_t p = 0; p + n <= refs[s].size(); ++p) ++rc[TokenSeq(refs[s].begin() + p, refs[s].begin() + p + n)];
      for (const auto& [g, c] : hc) {
        total += c;
        auto it = rc.find(g);
        if (it != rc.end()) match += std::min(c, it->second);
      }
    }
    if (match == 0) return 0.0;
    log_sum += std::log(static_cast<double>(match) / static_cast<double>(total));
  }
  const double bp = h_len < r_len ? std::exp(1.0 - static_cast<double>(r_len) / static_cast<double>(h_len)) : 1.0;
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

std::vector<Outcome> bleu_suite() {
  std::vector<Outcome> out;
  {
    Rng rng(21);
    bool exact = true;
    for (int c = 0; c < 50; ++c) {
      std::vector<TokenSeq> corpus;
      const std::size_t n = 1 + rng.uniform_index(20);
      for (std::size_t s = 0; s < n; ++s) corpus.push_back(rand_tokens(1 + rng.uniform_index(15), 40, rng));
      exact &= corpus_bleu(corpus, corpus).score == 100.0;
    }
    out.push_back({"bleu(x, x) == 100", exact, "50 seeded corpora"});
  }
  {
    const std::vector<TokenSeq> h{{4, 5, 6, 7}}, r{{4, 5, 6, 7, 8}};
    const double got = corpus_bleu(h, r).score;
    const double ref = reference_bleu(h, r);
    const bool ok = std::abs(got - ref) < 1e-6 && std::abs(ref - 100.0 * std::exp(1.0 - 5.0 / 4.0)) < 1e-9;
    out.push_back({"'a b c d' vs 'a b c d e'", ok, fmt("%.6f", got) + " vs oracle " + fmt("%.6f", ref)});
  }
  {
    std::size_t same = 0;
    for (std::uint64_t c = 0; c < 100; ++c) {
      Rng rng(derive_seed(500, c));
      const auto model = init_model(tiny_config(), derive_seed(600, c));
      const TokenSeq src = rand_tokens(2 + rng.uniform_index(6), 12, rng);
      const auto g = greedy_decode(model.ref(), src, 10);
      const auto b = beam_decode(model.ref(), src, 1, 10);
      if (g.tokens == b.tokens && g.truncated == b.truncated && g.log_prob == b.log_prob) ++same;
    }
    out.push_back({"beam-1 == greedy", same == 100, std::to_string(same) + "/100 cases"});
  }
  return out;
}

// ---- Scheduler ----------------------------------------------------------------

std::vector<Outcome> scheduler_suite() {
  std::vector<Outcome> out;
  {
    double worst = 0.0;
    bool nonneg = true;
    for (auto v : {SchedulerVariant::default_, SchedulerVariant::advanced, SchedulerVariant::reversed}) {
      for (const auto& row : make_policy(v).stage_matrix) {
        double s = 0.0;
        for (double p : row) {
          s += p;
          nonneg &= p >= 0.0;
        }
        worst = std::max(worst, std::abs(s - 1.0));
      }
    }
    out.push_back({"rows are probability vectors", nonneg && worst <= 1e-12, fmt("max |sum - 1| %.3g", worst)});
  }

  std::vector<SentencePair> pairs(50);
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    pairs[p].source = {kFirstContent};
    pairs[p].target = {kFirstContent};
    pairs[p].d_score = static_cast<double>(p);
  }
  const auto policy = make_policy(SchedulerVariant::default_);
  const CurriculumPlan plan = build_plan(pairs, policy);
  auto frequencies = [&](std::size_t stage, std::uint64_t seed) {
    Rng rng(seed);
    std::array<double, kShards> f{};
    const std::size_t draws = 100000;
    for (const auto& p : sample_batch(plan, stage, draws, rng)) f[bin_index(*p.d_score, plan.shard_thresholds)] += 1.0;
    for (double& x : f) x /= draws;
    return f;
  };
  for (std::size_t stage : {std::size_t{3}, std::size_t{1}}) {
    const auto f = frequencies(stage, 40 + stage);
    double worst = 0.0;
    for (std::size_t k = 0; k < kShards; ++k) worst = std::max(worst, std::abs(f[k] - policy.stage_matrix[stage - 1][k]));
    out.push_back({"stage-" + std::to_string(stage) + " default frequencies", worst <= 0.01,
                   fmt("max deviation %.4f over 100k draws", worst)});
  }
  {
    const auto d = make_policy(SchedulerVariant::default_).stage_matrix;
    const auto r = make_policy(SchedulerVariant::reversed).stage_matrix;
    bool eq = true;
    for (std::size_t s = 0; s < kStages; ++s)
      for (std::size_t k = 0; k < kShards; ++k) eq &= r[s][k] == d[s][kShards - 1 - k];
    out.push_back({"reversed rows == reversed default", eq, "exact"});
  }
  return out;
}

}  // namespace epi::checks
