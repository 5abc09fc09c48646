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

#include "epi/trainers.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "epi/errors.hpp"

namespace epi {

void Hyperparams::validate() const {
  if (!(alpha > 0.0) || !(beta > 0.0)) throw ConfigError("alpha and beta must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (!(finetune_lr >= 0.0)) throw ConfigError("finetune_lr must be nonnegative");
}

std::size_t Hyperparams::total_steps(std::size_t n) const {
  if (steps > 0) return steps;
  return epochs * ((n + batch_size - 1) / batch_size);
}

void to_json(json& j, const Hyperparams& hp) {
  j = json{{"alpha", hp.alpha},           {"beta", hp.beta},
           {"epochs", hp.epochs},         {"steps", hp.steps},
           {"batch_size", hp.batch_size}, {"seed", hp.seed},
           {"finetune_epochs", hp.finetune_epochs}, {"finetune_lr", hp.finetune_lr}};
}

void from_json(const json& j, Hyperparams& hp) {
  require_keys(j, {"alpha", "beta", "epochs", "steps", "batch_size", "seed", "finetune_epochs", "finetune_lr"},
               "hyperparams");
  hp = Hyperparams{};
  hp.alpha = j.value("alpha", hp.alpha);
  hp.beta = j.value("beta", hp.beta);
  hp.epochs = j.value("epochs", hp.epochs);
  hp.steps = j.value("steps", hp.steps);
  hp.batch_size = j.value("batch_size", hp.batch_size);
  hp.seed = j.value("seed", hp.seed);
  hp.finetune_epochs = j.value("finetune_epochs", hp.finetune_epochs);
  hp.finetune_lr = j.value("finetune_lr", hp.alpha);
}

PairLoss nll_loss() {
  return [](const EncoderParams& theta, const DecoderParams& phi, std::span<const SentencePair> batch,
            Tracking tracking) { return batch_nll(compose(theta, phi), batch, tracking); };
}

// ---- BatchSource -------------------------------------------------------------

BatchSource BatchSource::uniform(std::vector<SentencePair> pairs) {
  if (pairs.empty()) throw ContractError("batch source needs at least one pair");
  BatchSource s;
  s.pairs_ = std::move(pairs);
  for (std::size_t i = 0; i < s.pairs_.size(); ++i) s.by_domain_[s.pairs_[i].domain_id].push_back(i);
  return s;
}

BatchSource BatchSource::curriculum(CurriculumPlan plan) {
  BatchSource s;
  plan.index_domains();
  s.plan_ = std::move(plan);
  return s;
}

std::vector<SentencePair> BatchSource::sample(std::size_t n, Rng& rng, std::size_t stage,
                                              std::optional<int> domain) const {
  if (plan_) return sample_batch(*plan_, stage, n, rng, domain);
  const std::vector<std::size_t>* members = nullptr;
  if (domain) {
    auto it = by_domain_.find(*domain);
    if (it == by_domain_.end()) throw LookupError("batch source has no pairs of domain " + std::to_string(*domain));
    members = &it->second;
  }
  std::vector<SentencePair> out;
  out.reserve(n);
  for (std::size_t b = 0; b < n; ++b) {
    out.push_back(members ? pairs_[(*members)[rng.uniform_index(members->size())]]
                          : pairs_[rng.uniform_index(pairs_.size())]);
  }
  return out;
}

bool BatchSource::has_domain(int domain_id) const {
  return plan_ ? plan_->has_domain(domain_id) : by_domain_.count(domain_id) != 0;
}

std::size_t BatchSource::size() const { return plan_ ? plan_->size() : pairs_.size(); }

namespace {

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os.precision(17);
  return os;
}

void step_model(EncoderDecoderModel& m, double lr) {
  sgd_step(m.encoder.params, lr);
  sgd_step(m.decoder.params, lr);
}

double train_batch(EncoderDecoderModel& m, std::span<const SentencePair> batch, double lr, const PairLoss& loss) {
  Tensor l = loss(m.encoder, m.decoder, batch, Tracking{});
  const double v = l.item();
  backward(l);
  step_model(m, lr);
  return v;
}

std::size_t stage_for(const BatchSource& source, std::size_t step, std::size_t total) {
  if (!source.is_curriculum()) return 0;
  const double progress = total == 0 ? 0.0 : static_cast<double>(step) / static_cast<double>(total);
  return stage_of(progress, source.plan()->policy);
}

// dst <- dst - lr * grad(src) for structurally identical sets.
void apply_gradient(ParameterSet& dst, const ParameterSet& src, double lr) {
  auto& d = dst.entries();
  const auto& s = src.entries();
  for (std::size_t e = 0; e < d.size(); ++e) {
    auto g = s[e].second.grad();
    if (g.empty()) throw ContractError("parameter '" + s[e].first + "' received no query gradient");
    auto w = d[e].second.mutable_data();
    for (std::size_t x = 0; x < w.size(); ++x) w[x] -= lr * g[x];
  }
}

}  // namespace

void LossCurve::write_csv(const std::filesystem::path& path) const {
  auto os = open_csv(path);
  os << "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) os << i << ',' << losses[i] << '\n';
}

LossCurve train_epochs(EncoderDecoderModel& model, const std::vector<SentencePair>& corpus, std::size_t epochs,
                       std::size_t steps, std::size_t batch_size, double lr, std::uint64_t seed,
                       const PairLoss& loss) {
  LossCurve curve;
  if (corpus.empty()) {
    if (epochs == 0 && steps == 0) return curve;
    throw ContractError("training corpus is empty");
  }
  if (batch_size == 0) throw ContractError("batch_size must be at least 1");
  const std::size_t per_epoch = (corpus.size() + batch_size - 1) / batch_size;
  const std::size_t total = steps > 0 ? steps : epochs * per_epoch;
  Rng rng(seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t pos = corpus.size();
  std::vector<SentencePair> batch;
  for (std::size_t s = 0; s < total; ++s) {
    batch.clear();
    while (batch.size() < batch_size) {
      if (pos == corpus.size()) {
        if (!batch.empty()) break;  // last partial batch of an epoch
        rng.shuffle(order);
        pos = 0;
      }
      batch.push_back(corpus[order[pos++]]);
    }
    curve.losses.push_back(train_batch(model, batch, lr, loss));
  }
  return curve;
}

EncoderDecoderModel pretrain_vanilla(const ModelConfig& config, const std::vector<SentencePair>& generic_corpus,
                                     const Hyperparams& hp, LossCurve* curve) {
  if (generic_corpus.empty()) throw ContractError("vanilla pre-training needs a non-empty generic corpus");
  EncoderDecoderModel model = init_model(config, derive_seed(hp.seed, 11));
  LossCurve c = train_epochs(model, generic_corpus, hp.epochs, hp.steps, hp.batch_size, hp.alpha,
                             derive_seed(hp.seed, 12));
  if (curve) *curve = std::move(c);
  return model;
}

EncoderDecoderModel train_agg(const EncoderDecoderModel& start, const BatchSource& source, const Hyperparams& hp,
                              LossCurve* curve, const PairLoss& loss) {
  EncoderDecoderModel model = start;
  Rng rng(derive_seed(hp.seed, 21));
  const std::size_t total = hp.total_steps(source.size());
  LossCurve c;
  for (std::size_t s = 0; s < total; ++s) {
    const auto batch = source.sample(hp.batch_size, rng, std::max<std::size_t>(stage_for(source, s, total), 1));
    c.losses.push_back(train_batch(model, batch, hp.alpha, loss));
  }
  if (curve) *curve = std::move(c);
  return model;
}

// ---- Episodic training ---------------------------------------------------

std::size_t EpisodicState::index_of(int domain_id) const {
  auto it = std::find(domains.begin(), domains.end(), domain_id);
  if (it == domains.end()) throw LookupError("no specialist for domain " + std::to_string(domain_id));
  return static_cast<std::size_t>(it - domains.begin());
}

EpisodicState init_episodic(const EncoderDecoderModel& start, const std::vector<int>& seen_domains,
                            const Hyperparams& hp, std::size_t total_episodes) {
  if (seen_domains.size() < 2) throw ConfigError("episodic training needs at least two seen domains");
  EpisodicState s{start, {}, seen_domains, hp, 0, total_episodes};
  s.specialists.assign(seen_domains.size(), start);
  return s;
}

void EpisodeLog::write_csv(const std::filesystem::path& path) const {
  auto os = open_csv(path);
  os << "episode,stage,domain_i,partner_k,L_agg,L_i,L_enc,L_dec\n";
  for (const auto& r : records) {
    os << r.episode << ',' << r.stage << ',' << r.domain_i << ',' << r.partner_k << ',' << r.loss_agg << ','
       << r.loss_i << ',' << r.loss_enc << ',' << r.loss_dec << '\n';
  }
}

std::size_t draw_partner(std::size_t n, std::size_t i, Rng& rng) {
  if (n < 2) throw ConfigError("no valid partner: fewer than two seen domains");
  if (i >= n) throw ContractError("domain index out of range");
  std::size_t k = rng.uniform_index(n - 1);
  return k >= i ? k + 1 : k;
}

double specialist_step(EpisodicState& state, std::size_t idx, std::span<const SentencePair> batch,
                       const PairLoss& loss) {
  if (idx >= state.specialists.size()) throw ContractError("specialist index out of range");
  for (const auto& p : batch) {
    if (p.domain_id != state.domains[idx]) {
      throw ContractError("specialist for domain " + std::to_string(state.domains[idx]) + " got a pair of domain " +
                          std::to_string(p.domain_id));
    }
  }
  auto& m = state.specialists[idx];
  Tensor l = loss(m.encoder, m.decoder, batch, Tracking{});
  const double v = l.item();
  backward(l);
  step_model(m, state.hp.beta);
  return v;
}

double accumulate_encoder_loss(EpisodicState& state, std::size_t k, std::span<const SentencePair> batch,
                               const PairLoss& loss) {
  Tensor l = loss(state.agg.encoder, state.specialists.at(k).decoder, batch, Tracking{true, false});
  const double v = l.item();
  backward(l);
  return v;
}

double accumulate_decoder_loss(EpisodicState& state, std::size_t k, std::span<const SentencePair> batch,
                               const PairLoss& loss) {
  Tensor l = loss(state.specialists.at(k).encoder, state.agg.decoder, batch, Tracking{false, true});
  const double v = l.item();
  backward(l);
  return v;
}

std::pair<double, std::size_t> episodic_encoder_step(EpisodicState& state, std::size_t i,
                                                     std::span<const SentencePair> batch, Rng& rng,
                                                     const PairLoss& loss) {
  const std::size_t k = draw_partner(state.specialists.size(), i, rng);
  state.agg.encoder.params.zero_grad();
  const double v = accumulate_encoder_loss(state, k, batch, loss);
  sgd_step(state.agg.encoder.params, state.hp.alpha);
  return {v, k};
}

std::pair<double, std::size_t> episodic_decoder_step(EpisodicState& state, std::size_t i,
                                                     std::span<const SentencePair> batch, Rng& rng,
                                                     const PairLoss& loss) {
  const std::size_t k = draw_partner(state.specialists.size(), i, rng);
  state.agg.decoder.params.zero_grad();
  const double v = accumulate_decoder_loss(state, k, batch, loss);
  sgd_step(state.agg.decoder.params, state.hp.alpha);
  return {v, k};
}

EpisodeRecord run_episode(EpisodicState& state, const BatchSource& source, Rng& rng, const PairLoss& loss,
                          const EpisodeHook& hook) {
  const std::size_t n = state.specialists.size();
  if (n < 2) throw ConfigError("episodic training needs at least two seen domains");
  const std::size_t i = state.episode % n;
  const std::size_t stage = stage_for(source, state.episode, state.total_episodes);
  const std::size_t draw_stage = std::max<std::size_t>(stage, 1);
  const std::size_t b = state.hp.batch_size;

  EpisodeRecord rec;
  rec.episode = state.episode;
  rec.stage = stage;
  rec.domain_i = state.domains[i];

  const auto batch_i = source.sample(b, rng, draw_stage, state.domains[i]);
  for (std::size_t j = 0; j < n; ++j) {
    const auto batch_j = source.sample(b, rng, draw_stage, state.domains[j]);
    const double lj = specialist_step(state, j, batch_j, loss);
    if (j == i) rec.loss_i = lj;
  }
  if (hook) hook(state, EpisodePhase::specialists_done, rec);

  const std::size_t k = draw_partner(n, i, rng);
  rec.partner_k = state.domains[k];
  state.agg.encoder.params.zero_grad();
  state.agg.decoder.params.zero_grad();
  {
    Tensor l = loss(state.agg.encoder, state.agg.decoder, batch_i, Tracking{});
    rec.loss_agg = l.item();
    backward(l);
  }
  rec.loss_enc = accumulate_encoder_loss(state, k, batch_i, loss);
  rec.loss_dec = accumulate_decoder_loss(state, k, batch_i, loss);
  step_model(state.agg, state.hp.alpha);
  ++state.episode;
  if (hook) hook(state, EpisodePhase::episodic_done, rec);
  return rec;
}

EpisodeLog epi_train(EpisodicState& state, const BatchSource& source, const PairLoss& loss, const EpisodeHook& hook) {
  EpisodeLog log;
  Rng rng(derive_seed(state.hp.seed, 31 + state.episode));
  while (state.episode < state.total_episodes) log.records.push_back(run_episode(state, source, rng, loss, hook));
  return log;
}

EncoderDecoderModel maml_train(const EncoderDecoderModel& start, const BatchSource& source,
                               const std::vector<int>& seen_domains, const Hyperparams& hp, LossCurve* curve,
                               const PairLoss& loss) {
  if (seen_domains.empty()) throw ConfigError("MAML needs at least one seen domain");
  EncoderDecoderModel model = start;
  Rng rng(derive_seed(hp.seed, 41));
  const std::size_t total = hp.total_steps(source.size());
  LossCurve c;
  for (std::size_t s = 0; s < total; ++s) {
    const int domain = seen_domains[rng.uniform_index(seen_domains.size())];
    const auto support = source.sample(hp.batch_size, rng, 3, domain);
    const auto query = source.sample(hp.batch_size, rng, 3, domain);

    EncoderDecoderModel adapted = model;
    {
      Tensor l = loss(adapted.encoder, adapted.decoder, support, Tracking{});
      backward(l);
      step_model(adapted, hp.beta);
    }
    Tensor lq = loss(adapted.encoder, adapted.decoder, query, Tracking{});
    c.losses.push_back(lq.item());
    backward(lq);
    // First-order outer update: the query gradient at the adapted point is
    // applied to the original parameters.
    apply_gradient(model.encoder.params, adapted.encoder.params, hp.alpha);
    apply_gradient(model.decoder.params, adapted.decoder.params, hp.alpha);
  }
  if (curve) *curve = std::move(c);
  return model;
}

EncoderDecoderModel finetune(const EncoderDecoderModel& model, const std::vector<SentencePair>& pairs,
                             const Hyperparams& hp, std::uint64_t seed, LossCurve* curve) {
  EncoderDecoderModel copy = model;
  if (hp.finetune_epochs == 0) return copy;
  if (pairs.empty()) throw ContractError("fine-tuning split is empty");
  LossCurve c = train_epochs(copy, pairs, hp.finetune_epochs, 0, hp.batch_size, hp.finetune_lr, seed);
  if (curve) *curve = std::move(c);
  return copy;
}

}  // namespace epi
