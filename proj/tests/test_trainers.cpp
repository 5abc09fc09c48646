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

#include <algorithm>
#include <cmath>
#include <numeric>

#include "epi/errors.hpp"
#include "epi/trainers.hpp"
#include "support/checks.hpp"

using namespace epi;

namespace {

// ---- Scalar toy: encoder w, decoder v, logits (w v) c over three classes ----

const std::array<double, 3> kCoef{0.7, -0.4, 1.3};

EncoderDecoderModel scalar_model(double w, double v) {
  EncoderDecoderModel m;
  m.encoder.params.add("w", Tensor::from({1, 1}, {w}, true));
  m.decoder.params.add("v", Tensor::from({1, 1}, {v}, true));
  return m;
}

std::size_t toy_label(const SentencePair& p) { return static_cast<std::size_t>(p.target[0]) % 3; }

PairLoss scalar_loss() {
  return [](const EncoderParams& theta, const DecoderParams& phi, std::span<const SentencePair> batch, Tracking tr) {
    Tensor w = tr.encoder ? theta.params.at("w") : theta.params.at("w").detach();
    Tensor v = tr.decoder ? phi.params.at("v") : phi.params.at("v").detach();
    Tensor ones = Tensor::full({batch.size(), 1}, 1.0);
    Tensor c = Tensor::from({1, 3}, {kCoef[0], kCoef[1], kCoef[2]});
    std::vector<std::size_t> y;
    for (const auto& p : batch) y.push_back(toy_label(p));
    return softmax_cross_entropy(matmul(matmul(ones, matmul(w, v)), c), y);
  };
}

// Hand chain rule: z_j = w v c_j, dL/dz_j = p_j - [j == y], averaged over the batch.
// Returns dL/d(wv); dL/dw = v * it, dL/dv = w * it.
double toy_dproduct(double w, double v, std::span<const SentencePair> batch) {
  double z[3], p[3], zmax = -1e300, sum = 0.0;
  for (int j = 0; j < 3; ++j) zmax = std::max(zmax, z[j] = w * v * kCoef[j]);
  for (int j = 0; j < 3; ++j) sum += p[j] = std::exp(z[j] - zmax);
  double g = 0.0;
  for (const auto& pair : batch) {
    const std::size_t y = toy_label(pair);
    for (int j = 0; j < 3; ++j) g += kCoef[j] * (p[j] / sum - (static_cast<std::size_t>(j) == y ? 1.0 : 0.0));
  }
  return g / static_cast<double>(batch.size());
}

double scalar(const ParameterSet& ps, const std::string& name) { return ps.at(name).at(0); }

std::vector<SentencePair> toy_batch(int domain, std::uint64_t seed, std::size_t n = 4) {
  Rng rng(seed);
  std::vector<SentencePair> out;
  for (std::size_t b = 0; b < n; ++b) {
    out.push_back({{kFirstContent}, {static_cast<TokenId>(kFirstContent + rng.uniform_index(3))}, domain});
  }
  return out;
}

EpisodicState toy_state(double alpha, double beta) {
  EpisodicState s;
  s.agg = scalar_model(0.9, -1.1);
  s.specialists = {scalar_model(0.5, 1.4), scalar_model(-0.8, 0.6), scalar_model(1.2, -0.3)};
  s.domains = {1, 2, 3};
  s.hp.alpha = alpha;
  s.hp.beta = beta;
  s.hp.batch_size = 4;
  s.total_episodes = 10;
  return s;
}

// ---- Micro seq2seq helpers ---------------------------------------------------------

// Fresh pairs following micro_setup's rule for domain d (1-based).
std::vector<SentencePair> micro_pairs(const checks::MicroSetup& s, int domain, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t content = s.config.vocab_size - kFirstContent;
  const std::size_t d = static_cast<std::size_t>(domain - 1);
  std::vector<SentencePair> out;
  for (std::size_t p = 0; p < n; ++p) {
    SentencePair pair;
    for (std::size_t t = 0, len = 3 + rng.uniform_index(4); t < len; ++t)
      pair.source.push_back(kFirstContent + rng.uniform_index(content));
    for (TokenId t : pair.source) pair.target.push_back(kFirstContent + (t - kFirstContent + 3 * d) % content);
    if (d % 2 == 1) std::reverse(pair.target.begin(), pair.target.end());
    pair.domain_id = domain;
    out.push_back(std::move(pair));
  }
  return out;
}

double mean_nll(const EncoderDecoderModel& m, const std::vector<SentencePair>& pairs) {
  double s = 0.0;
  for (const auto& p : pairs) s += nll(m.ref(), p);
  return s / static_cast<double>(pairs.size());
}

std::vector<SentencePair> of_domain(const std::vector<SentencePair>& pairs, int id) {
  std::vector<SentencePair> out;
  std::copy_if(pairs.begin(), pairs.end(), std::back_inserter(out), [id](const auto& p) { return p.domain_id == id; });
  return out;
}

Hyperparams micro_hp() {
  Hyperparams hp;
  hp.alpha = 0.05;
  hp.beta = 0.05;
  hp.batch_size = 4;
  hp.steps = 20;
  hp.seed = 9;
  hp.finetune_epochs = 2;
  hp.finetune_lr = 0.05;
  return hp;
}

}  // namespace

TEST_SUITE("trainers") {
  TEST_CASE("hyperparameter validation") {
    Hyperparams hp;
    CHECK_NOTHROW(hp.validate());
    hp.alpha = 0.0;
    CHECK_THROWS_AS(hp.validate(), ConfigError);
    hp = Hyperparams{};
    hp.beta = -1.0;
    CHECK_THROWS_AS(hp.validate(), ConfigError);
    hp = Hyperparams{};
    hp.batch_size = 16;
    hp.epochs = 2;
    CHECK(hp.total_steps(33) == 6);
    hp.steps = 7;
    CHECK(hp.total_steps(33) == 7);
  }

  TEST_CASE("scalar toy: encoder step follows the hand chain rule") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      EpisodicState s = toy_state(0.3, 0.2);
      const auto before = s;
      const auto batch = toy_batch(2, seed);
      Rng rng(seed);
      const auto [l, k] = episodic_encoder_step(s, 1, batch, rng, scalar_loss());
      CHECK(k != 1);
      const double w = scalar(before.agg.encoder.params, "w");
      const double vk = scalar(before.specialists[k].decoder.params, "v");
      const double expect = w - 0.3 * vk * toy_dproduct(w, vk, batch);
      CHECK(std::abs(scalar(s.agg.encoder.params, "w") - expect) < 1e-10);
      CHECK(std::isfinite(l));
      // Frozen partner and everything but theta untouched.
      CHECK(s.agg.decoder.params.bitwise_equal(before.agg.decoder.params));
      for (std::size_t j = 0; j < 3; ++j) {
        CHECK(s.specialists[j].encoder.params.bitwise_equal(before.specialists[j].encoder.params));
        CHECK(s.specialists[j].decoder.params.bitwise_equal(before.specialists[j].decoder.params));
      }
    }
  }

  TEST_CASE("scalar toy: decoder step follows the hand chain rule") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      EpisodicState s = toy_state(0.3, 0.2);
      const auto before = s;
      const auto batch = toy_batch(1, seed + 50);
      Rng rng(seed);
      const auto [l, k] = episodic_decoder_step(s, 0, batch, rng, scalar_loss());
      CHECK(k != 0);
      const double wk = scalar(before.specialists[k].encoder.params, "w");
      const double v = scalar(before.agg.decoder.params, "v");
      const double expect = v - 0.3 * wk * toy_dproduct(wk, v, batch);
      CHECK(std::abs(scalar(s.agg.decoder.params, "v") - expect) < 1e-10);
      CHECK(s.agg.encoder.params.bitwise_equal(before.agg.encoder.params));
      for (std::size_t j = 0; j < 3; ++j) {
        CHECK(s.specialists[j].encoder.params.bitwise_equal(before.specialists[j].encoder.params));
        CHECK(s.specialists[j].decoder.params.bitwise_equal(before.specialists[j].decoder.params));
      }
    }
  }

  TEST_CASE("scalar toy: full episode sums the three gradients") {
    EpisodicState s = toy_state(0.25, 0.15);
    const auto before = s;
    std::vector<SentencePair> pool;
    for (int d = 1; d <= 3; ++d) {
      const auto b = toy_batch(d, 100 + d, 6);
      pool.insert(pool.end(), b.begin(), b.end());
    }
    const BatchSource source = BatchSource::uniform(pool);
    Rng rng(77), replay(77);
    const auto rec = run_episode(s, source, rng, scalar_loss());

    // Replay the draws: batch_i, one batch per specialist, then the partner.
    const auto batch_i = source.sample(4, replay, 3, 1);
    for (std::size_t j = 0; j < 3; ++j) {
      const auto bj = source.sample(4, replay, 3, static_cast<int>(j) + 1);
      const double w = scalar(before.specialists[j].encoder.params, "w");
      const double v = scalar(before.specialists[j].decoder.params, "v");
      const double g = toy_dproduct(w, v, bj);
      CHECK(std::abs(scalar(s.specialists[j].encoder.params, "w") - (w - 0.15 * v * g)) < 1e-10);
      CHECK(std::abs(scalar(s.specialists[j].decoder.params, "v") - (v - 0.15 * w * g)) < 1e-10);
    }
    const std::size_t k = draw_partner(3, 0, replay);
    CHECK(rec.partner_k == static_cast<int>(k) + 1);
    CHECK(rec.domain_i == 1);
    const double w = scalar(before.agg.encoder.params, "w"), v = scalar(before.agg.decoder.params, "v");
    // Partners are read after their own specialist step.
    const double wk = scalar(s.specialists[k].encoder.params, "w"), vk = scalar(s.specialists[k].decoder.params, "v");
    const double g_agg = toy_dproduct(w, v, batch_i);
    const double g_enc = vk * toy_dproduct(w, vk, batch_i);
    const double g_dec = wk * toy_dproduct(wk, v, batch_i);
    CHECK(std::abs(scalar(s.agg.encoder.params, "w") - (w - 0.25 * (v * g_agg + g_enc))) < 1e-10);
    CHECK(std::abs(scalar(s.agg.decoder.params, "v") - (v - 0.25 * (w * g_agg + g_dec))) < 1e-10);
  }

  TEST_CASE("zero learning rates leave every model at its initialization") {
    EpisodicState s = toy_state(0.0, 0.0);
    const auto before = s;
    std::vector<SentencePair> pool;
    for (int d = 1; d <= 3; ++d) {
      const auto b = toy_batch(d, d, 5);
      pool.insert(pool.end(), b.begin(), b.end());
    }
    const auto log = epi_train(s, BatchSource::uniform(pool), scalar_loss());
    CHECK(log.records.size() == 10);
    CHECK(s.agg.encoder.params.bitwise_equal(before.agg.encoder.params));
    CHECK(s.agg.decoder.params.bitwise_equal(before.agg.decoder.params));
    for (std::size_t j = 0; j < 3; ++j) CHECK(s.specialists[j].checksum() == before.specialists[j].checksum());

    // alpha = 0 alone freezes theta through an encoder step.
    EpisodicState e = toy_state(0.0, 0.1);
    Rng rng(1);
    episodic_encoder_step(e, 0, toy_batch(1, 3), rng, scalar_loss());
    CHECK(e.agg.encoder.params.bitwise_equal(before.agg.encoder.params));
  }

  TEST_CASE("specialist_step isolation") {
    EpisodicState s = toy_state(0.1, 0.2);
    const auto before = s;
    specialist_step(s, 1, toy_batch(2, 4), scalar_loss());
    CHECK_FALSE(s.specialists[1].encoder.params.bitwise_equal(before.specialists[1].encoder.params));
    for (std::size_t j : {0u, 2u}) CHECK(s.specialists[j].checksum() == before.specialists[j].checksum());
    CHECK(s.agg.encoder.params.bitwise_equal(before.agg.encoder.params));
    CHECK(s.agg.decoder.params.bitwise_equal(before.agg.decoder.params));

    CHECK_THROWS_AS(specialist_step(s, 1, toy_batch(3, 4), scalar_loss()), ContractError);

    EpisodicState z = toy_state(0.1, 0.0);
    specialist_step(z, 0, toy_batch(1, 4), scalar_loss());
    CHECK(z.specialists[0].checksum() == before.specialists[0].checksum());
  }

  TEST_CASE("decoder loss sends no gradient into the agg encoder") {
    EpisodicState s = toy_state(0.1, 0.1);
    s.agg.encoder.params.zero_grad();
    s.agg.decoder.params.zero_grad();
    accumulate_decoder_loss(s, 2, toy_batch(1, 5), scalar_loss());
    CHECK_FALSE(s.agg.encoder.params.at("w").has_grad());
    CHECK(s.agg.decoder.params.at("v").has_grad());
    for (const auto& m : s.specialists) {
      CHECK_FALSE(m.encoder.params.at("w").has_grad());
      CHECK_FALSE(m.decoder.params.at("v").has_grad());
    }
    s.agg.decoder.params.zero_grad();
  }

  TEST_CASE("partner draws") {
    Rng rng(2);
    CHECK_THROWS_AS(draw_partner(1, 0, rng), ConfigError);
    EpisodicState s = toy_state(0.1, 0.1);
    s.specialists.resize(1);
    s.domains.resize(1);
    CHECK_THROWS_AS(episodic_encoder_step(s, 0, toy_batch(1, 1), rng, scalar_loss()), ConfigError);
    const auto setup = checks::micro_setup(1, 3);
    CHECK_THROWS_AS(init_episodic(setup.start, setup.domains, micro_hp(), 5), ConfigError);
  }

  TEST_CASE("freeze and locality suite") {
    for (const auto& o : checks::freeze_locality_suite(200)) {
      INFO(o.name << ": " << o.detail);
      CHECK(o.ok);
    }
  }

  TEST_CASE("one episode equals the straight-line oracle") {
    for (std::uint64_t seed : {5u, 6u, 7u}) CHECK(checks::episode_oracle_max_diff(seed) < 1e-10);
  }

  TEST_CASE("specialists learn their own domain, not the other") {
    // Specialists start from a model already trained on both domains.
    const auto setup = checks::micro_setup(2, 21);
    auto mixed = micro_pairs(setup, 1, 200, 90);
    const auto mixed2 = micro_pairs(setup, 2, 200, 91);
    mixed.insert(mixed.end(), mixed2.begin(), mixed2.end());
    EncoderDecoderModel start = setup.start;
    train_epochs(start, mixed, 0, 300, 16, 0.1, 92);
    EpisodicState s = init_episodic(start, setup.domains, micro_hp(), 0);
    const auto held1 = micro_pairs(setup, 1, 40, 100), held2 = micro_pairs(setup, 2, 40, 101);
    const double own0 = mean_nll(s.specialists[0], held1), other0 = mean_nll(s.specialists[0], held2);
    const auto train1 = micro_pairs(setup, 1, 200, 102);
    const BatchSource source = BatchSource::uniform(train1);
    Rng rng(4);
    for (int step = 0; step < 200; ++step) specialist_step(s, 0, source.sample(4, rng, 3, 1));
    const double own_drop = own0 - mean_nll(s.specialists[0], held1);
    const double other_drop = other0 - mean_nll(s.specialists[0], held2);
    CHECK(own_drop > 0.0);
    CHECK(other_drop < 0.5 * own_drop);
  }

  TEST_CASE("pretrain_vanilla") {
    const auto setup = checks::micro_setup(1, 31);
    Hyperparams hp = micro_hp();
    hp.epochs = 0;
    hp.steps = 0;
    const auto untouched = pretrain_vanilla(setup.config, setup.pairs, hp);
    CHECK(untouched.checksum() == init_model(setup.config, derive_seed(hp.seed, 11)).checksum());
    CHECK_THROWS_AS(pretrain_vanilla(setup.config, {}, hp), ContractError);

    const auto corpus = micro_pairs(setup, 1, 400, 5);
    hp.steps = 300;
    hp.batch_size = 64;
    hp.alpha = 0.05;
    LossCurve curve;
    const auto m = pretrain_vanilla(setup.config, corpus, hp, &curve);
    REQUIRE(curve.losses.size() == 300);
    CHECK(mean_nll(m, corpus) < std::log(static_cast<double>(setup.config.vocab_size)));
    // Means of consecutive 10-step windows never rise.
    std::vector<double> windows;
    for (std::size_t w = 0; w + 10 <= curve.losses.size(); w += 10)
      windows.push_back(std::accumulate(curve.losses.begin() + w, curve.losses.begin() + w + 10, 0.0) / 10.0);
    std::size_t rises = 0;
    for (std::size_t w = 1; w < windows.size(); ++w) rises += windows[w] > windows[w - 1];
    CHECK(rises == 0);
  }

  TEST_CASE("train_agg") {
    const auto setup = checks::micro_setup(2, 41);
    Hyperparams hp = micro_hp();

    // Single-domain reduction: the same draws as continued training on that domain.
    const auto d1 = of_domain(setup.pairs, 1);
    const auto agg = train_agg(setup.start, BatchSource::uniform(d1), hp);
    EncoderDecoderModel manual = setup.start;
    Rng rng(derive_seed(hp.seed, 21));
    const BatchSource src = BatchSource::uniform(d1);
    for (std::size_t st = 0; st < hp.steps; ++st) {
      const auto b = src.sample(hp.batch_size, rng);
      Tensor l = batch_nll(manual.ref(), b);
      backward(l);
      sgd_step(manual.encoder.params, hp.alpha);
      sgd_step(manual.decoder.params, hp.alpha);
    }
    CHECK(agg.checksum() == manual.checksum());

    // Every step moves the parameters.
    hp.steps = 1;
    EncoderDecoderModel cur = setup.start;
    for (int st = 0; st < 5; ++st) {
      hp.seed = 100 + st;
      const auto next = train_agg(cur, BatchSource::uniform(setup.pairs), hp);
      CHECK_FALSE(next.encoder.params.bitwise_equal(cur.encoder.params));
      CHECK_FALSE(next.decoder.params.bitwise_equal(cur.decoder.params));
      cur = next;
    }
  }

  TEST_CASE("agg beats vanilla on seen domains") {
    const auto setup = checks::micro_setup(2, 51);
    Hyperparams hp = micro_hp();
    hp.steps = 200;
    hp.alpha = 0.1;
    std::vector<SentencePair> train, test;
    for (int d : setup.domains) {
      const auto tr = micro_pairs(setup, d, 200, 60 + d), te = micro_pairs(setup, d, 40, 70 + d);
      train.insert(train.end(), tr.begin(), tr.end());
      test.insert(test.end(), te.begin(), te.end());
    }
    const auto agg = train_agg(setup.start, BatchSource::uniform(train), hp);
    CHECK(mean_nll(agg, test) < mean_nll(setup.start, test));
  }

  TEST_CASE("maml reductions") {
    const auto setup = checks::micro_setup(2, 61);
    const BatchSource source = BatchSource::uniform(setup.pairs);
    Hyperparams hp = micro_hp();
    hp.steps = 10;

    // beta = 0: plain SGD on the query batches.
    hp.beta = 0.0;
    const auto maml = maml_train(setup.start, source, setup.domains, hp);
    EncoderDecoderModel manual = setup.start;
    Rng rng(derive_seed(hp.seed, 41));
    for (std::size_t st = 0; st < hp.steps; ++st) {
      const int d = setup.domains[rng.uniform_index(setup.domains.size())];
      source.sample(hp.batch_size, rng, 3, d);  // support, unused at beta = 0
      const auto query = source.sample(hp.batch_size, rng, 3, d);
      backward(batch_nll(manual.ref(), query));
      sgd_step(manual.encoder.params, hp.alpha);
      sgd_step(manual.decoder.params, hp.alpha);
    }
    CHECK(maml.checksum() == manual.checksum());

    hp.beta = 0.05;
    hp.alpha = 0.0;
    CHECK(maml_train(setup.start, source, setup.domains, hp).checksum() == setup.start.checksum());
    CHECK_THROWS_AS(maml_train(setup.start, source, {}, hp), ConfigError);
  }

  TEST_CASE("finetune") {
    const auto setup = checks::micro_setup(2, 71);
    Hyperparams hp = micro_hp();
    const auto ft_pairs = micro_pairs(setup, 2, 60, 3), test = micro_pairs(setup, 2, 40, 4);
    const auto start_sum = setup.start.checksum();

    hp.finetune_epochs = 0;
    CHECK(finetune(setup.start, ft_pairs, hp, 1).checksum() == start_sum);

    hp.finetune_epochs = 5;
    hp.finetune_lr = 0.1;
    const auto tuned = finetune(setup.start, ft_pairs, hp, 1);
    CHECK(setup.start.checksum() == start_sum);
    CHECK(mean_nll(tuned, test) <= mean_nll(setup.start, test));
    CHECK_THROWS_AS(finetune(setup.start, {}, hp, 1), ContractError);
  }

  TEST_CASE("identical seeds give identical checkpoints") {
    const auto setup = checks::micro_setup(3, 81);
    const Hyperparams hp = micro_hp();
    const BatchSource source = BatchSource::uniform(setup.pairs);
    CHECK(pretrain_vanilla(setup.config, setup.pairs, hp).checksum() ==
          pretrain_vanilla(setup.config, setup.pairs, hp).checksum());
    CHECK(train_agg(setup.start, source, hp).checksum() == train_agg(setup.start, source, hp).checksum());
    CHECK(maml_train(setup.start, source, setup.domains, hp).checksum() ==
          maml_train(setup.start, source, setup.domains, hp).checksum());
    CHECK(finetune(setup.start, setup.pairs, hp, 2).checksum() == finetune(setup.start, setup.pairs, hp, 2).checksum());
    auto run = [&] {
      EpisodicState s = init_episodic(setup.start, setup.domains, hp, 12);
      const auto log = epi_train(s, source);
      std::uint64_t h = s.agg.checksum();
      for (const auto& m : s.specialists) h ^= m.checksum() + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
      return std::pair{h, log.records.back().loss_agg};
    };
    CHECK(run() == run());
  }
}
