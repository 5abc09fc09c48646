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

#include "epi/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "epi/errors.hpp"

namespace epi {

namespace {

constexpr double kLnEps = 1e-5;

double positional_value(std::size_t pos, std::size_t i, std::size_t d) {
  const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
  const double angle = static_cast<double>(pos) * freq;
  return i % 2 == 0 ? std::sin(angle) : std::cos(angle);
}

Tensor positional_rows(std::span<const std::size_t> positions, std::size_t d) {
  std::vector<double> v(positions.size() * d);
  for (std::size_t r = 0; r < positions.size(); ++r)
    for (std::size_t i = 0; i < d; ++i) v[r * d + i] = positional_value(positions[r], i, d);
  return Tensor::from({positions.size(), d}, std::move(v));
}

void add_weight(ParameterSet& ps, const std::string& name, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double stddev = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(fan_in * fan_out);
  for (double& x : v) x = rng.normal(0.0, stddev);
  ps.add(name, Tensor::from({fan_in, fan_out}, std::move(v), true));
}

void add_bias(ParameterSet& ps, const std::string& name, std::size_t n) {
  ps.add(name, Tensor::zeros({n}, true));
}

void add_norm(ParameterSet& ps, const std::string& prefix, std::size_t d) {
  ps.add(prefix + ".g", Tensor::full({d}, 1.0, true));
  ps.add(prefix + ".b", Tensor::zeros({d}, true));
}

void add_embedding(ParameterSet& ps, const std::string& name, std::size_t vocab, std::size_t d, Rng& rng) {
  std::vector<double> v(vocab * d);
  for (double& x : v) x = rng.normal();
  ps.add(name, Tensor::from({vocab, d}, std::move(v), true));
}

void add_attention(ParameterSet& ps, const std::string& prefix, std::size_t d, Rng& rng) {
  for (const char* p : {"q", "k", "v", "o"}) {
    add_weight(ps, prefix + ".w" + p, d, d, rng);
    add_bias(ps, prefix + ".b" + p, d);
  }
}

void add_ffn(ParameterSet& ps, const std::string& prefix, std::size_t d, std::size_t d_ff, Rng& rng) {
  add_weight(ps, prefix + ".w1", d, d_ff, rng);
  add_bias(ps, prefix + ".b1", d_ff);
  add_weight(ps, prefix + ".w2", d_ff, d, rng);
  add_bias(ps, prefix + ".b2", d);
}

std::string layer_prefix(const char* part, std::size_t l) { return std::string(part) + ".L" + std::to_string(l); }

// Parameter access for one forward pass. Untracked parts are detached so no
// gradient reaches their leaves.
class Weights {
 public:
  Weights(const ParameterSet& ps, bool track) : ps_(ps), detach_(!track && grad_mode_enabled()) {}
  Tensor operator()(const std::string& name) const {
    const Tensor& t = ps_.at(name);
    return detach_ ? t.detach() : t;
  }

 private:
  const ParameterSet& ps_;
  bool detach_;
};

Tensor linear(const Tensor& x, const Weights& w, const std::string& wname, const std::string& bname) {
  return add(matmul(x, w(wname)), w(bname));
}

Tensor norm(const Tensor& x, const Weights& w, const std::string& prefix) {
  return layer_norm(x, w(prefix + ".g"), w(prefix + ".b"), kLnEps);
}

Tensor attention_block(const Tensor& x_q, const Tensor& x_kv, const Weights& w, const std::string& prefix,
                       std::span<const AttentionSegment> segs, std::size_t heads, bool causal) {
  Tensor q = linear(x_q, w, prefix + ".wq", prefix + ".bq");
  Tensor k = linear(x_kv, w, prefix + ".wk", prefix + ".bk");
  Tensor v = linear(x_kv, w, prefix + ".wv", prefix + ".bv");
  Tensor a = attention(q, k, v, segs, heads, causal);
  return linear(a, w, prefix + ".wo", prefix + ".bo");
}

Tensor ffn_block(const Tensor& x, const Weights& w, const std::string& prefix) {
  return linear(gelu(linear(x, w, prefix + ".w1", prefix + ".b1")), w, prefix + ".w2", prefix + ".b2");
}

// Packed batch: sequences concatenated row-wise, segments describe the
// per-sentence attention problems.
struct Packed {
  std::vector<std::size_t> src_ids, src_pos;
  std::vector<std::size_t> dec_in, dec_pos, dec_out;
  std::vector<AttentionSegment> enc_self, dec_self, cross;
  std::size_t target_tokens = 0;
};

Packed pack(std::span<const SentencePair> batch, const ModelConfig& cfg) {
  if (batch.empty()) throw ContractError("empty batch");
  Packed p;
  std::size_t src_off = 0, dec_off = 0;
  for (const auto& pair : batch) {
    if (pair.source.empty() || pair.target.empty()) throw ContractError("nll requires non-empty source and target");
    if (pair.source.size() > cfg.max_len) {
      throw LengthError("source length " + std::to_string(pair.source.size()) + " exceeds max_len " +
                        std::to_string(cfg.max_len));
    }
    if (pair.target.size() + 1 > cfg.max_len) {
      throw LengthError("target length " + std::to_string(pair.target.size()) + " + EOS exceeds max_len " +
                        std::to_string(cfg.max_len));
    }
    const std::size_t n = pair.source.size();
    const std::size_t m = pair.target.size() + 1;
    for (std::size_t i = 0; i < n; ++i) {
      p.src_ids.push_back(pair.source[i]);
      p.src_pos.push_back(i);
    }
    p.dec_in.push_back(kBos);
    for (std::size_t i = 0; i < pair.target.size(); ++i) p.dec_in.push_back(pair.target[i]);
    for (std::size_t i = 0; i < pair.target.size(); ++i) p.dec_out.push_back(pair.target[i]);
    p.dec_out.push_back(kEos);
    for (std::size_t i = 0; i < m; ++i) p.dec_pos.push_back(i);
    p.enc_self.push_back({src_off, n, src_off, n});
    p.dec_self.push_back({dec_off, m, dec_off, m});
    p.cross.push_back({dec_off, m, src_off, n});
    src_off += n;
    dec_off += m;
  }
  p.target_tokens = dec_off;
  return p;
}

Tensor encode_packed(const EncoderParams& enc, const Packed& p, bool track) {
  const ModelConfig& cfg = enc.config;
  Weights w(enc.params, track);
  Tensor x = add(embedding(w("enc.emb"), p.src_ids), positional_rows(p.src_pos, cfg.d_model));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = layer_prefix("enc", l);
    Tensor h = norm(x, w, pre + ".ln1");
    x = add(x, attention_block(h, h, w, pre + ".attn", p.enc_self, cfg.n_heads, false));
    x = add(x, ffn_block(norm(x, w, pre + ".ln2"), w, pre + ".ff"));
  }
  return norm(x, w, "enc.ln_f");
}

Tensor decode_packed(const DecoderParams& dec, const Tensor& memory, const Packed& p, bool track) {
  const ModelConfig& cfg = dec.config;
  Weights w(dec.params, track);
  Tensor y = add(embedding(w("dec.emb"), p.dec_in), positional_rows(p.dec_pos, cfg.d_model));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = layer_prefix("dec", l);
    Tensor h = norm(y, w, pre + ".ln1");
    y = add(y, attention_block(h, h, w, pre + ".self", p.dec_self, cfg.n_heads, true));
    y = add(y, attention_block(norm(y, w, pre + ".ln2"), memory, w, pre + ".cross", p.cross, cfg.n_heads, false));
    y = add(y, ffn_block(norm(y, w, pre + ".ln3"), w, pre + ".ff"));
  }
  return linear(norm(y, w, "dec.ln_f"), w, "dec.out.w", "dec.out.b");
}

std::vector<double> log_softmax_row(const double* row, std::size_t v) {
  const double mx = *std::max_element(row, row + v);
  double z = 0.0;
  for (std::size_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(v);
  for (std::size_t j = 0; j < v; ++j) out[j] = row[j] - lz;
  return out;
}

// ---- raw row kernels for incremental inference -------------------------

void row_linear(const double* x, const Tensor& W, const Tensor& b, double* out) {
  const std::size_t din = W.dim(0), dout = W.dim(1);
  const double* Wd = W.data().data();
  std::fill(out, out + dout, 0.0);
  for (std::size_t p = 0; p < din; ++p) {
    const double xp = x[p];
    const double* wrow = Wd + p * dout;
    for (std::size_t j = 0; j < dout; ++j) out[j] += xp * wrow[j];
  }
  const double* bd = b.data().data();
  for (std::size_t j = 0; j < dout; ++j) out[j] += bd[j];
}

void row_norm(const double* x, std::size_t d, const Tensor& g, const Tensor& b, double* out) {
  double mean = 0.0;
  for (std::size_t j = 0; j < d; ++j) mean += x[j];
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (std::size_t j = 0; j < d; ++j) var += (x[j] - mean) * (x[j] - mean);
  var /= static_cast<double>(d);
  const double rs = 1.0 / std::sqrt(var + kLnEps);
  for (std::size_t j = 0; j < d; ++j) out[j] = (x[j] - mean) * rs * g.data()[j] + b.data()[j];
}

// One query row against cached key/value rows, all heads.
void row_attention(const double* q, const std::vector<double>& keys, const std::vector<double>& values,
                   std::size_t rows, std::size_t d, std::size_t heads, double* out) {
  const std::size_t dh = d / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> p(rows);
  std::fill(out, out + d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < rows; ++j) {
      const double* kj = keys.data() + j * d + h * dh;
      double acc = 0.0;
      for (std::size_t c = 0; c < dh; ++c) acc += q[h * dh + c] * kj[c];
      p[j] = acc * inv_scale;
      mx = std::max(mx, p[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < rows; ++j) {
      p[j] = std::exp(p[j] - mx);
      z += p[j];
    }
    for (std::size_t j = 0; j < rows; ++j) {
      p[j] /= z;
      const double* vj = values.data() + j * d + h * dh;
      for (std::size_t c = 0; c < dh; ++c) out[h * dh + c] += p[j] * vj[c];
    }
  }
}

void check_same_structure(const ParameterSet& a, const ParameterSet& b, const char* what) {
  if (!a.compatible_with(b)) throw CompatibilityError(std::string(what) + ": parameter structures differ");
}

}  // namespace

void ModelConfig::validate() const {
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || max_len == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (vocab_size <= kFirstContent) throw ConfigError("vocab_size must exceed the reserved tokens");
  if (vocab_size > 512) throw ConfigError("vocab_size above 512 is outside the supported scale");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("dropout_rate must be in [0, 1)");
  if (dropout_rate != 0.0) throw ConfigError("dropout is not supported; set dropout_rate to 0");
}

EncoderParams init_encoder(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  EncoderParams enc{cfg, {}};
  auto& ps = enc.params;
  add_embedding(ps, "enc.emb", cfg.vocab_size, cfg.d_model, rng);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = layer_prefix("enc", l);
    add_norm(ps, pre + ".ln1", cfg.d_model);
    add_attention(ps, pre + ".attn", cfg.d_model, rng);
    add_norm(ps, pre + ".ln2", cfg.d_model);
    add_ffn(ps, pre + ".ff", cfg.d_model, cfg.d_ff, rng);
  }
  add_norm(ps, "enc.ln_f", cfg.d_model);
  return enc;
}

DecoderParams init_decoder(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  DecoderParams dec{cfg, {}};
  auto& ps = dec.params;
  add_embedding(ps, "dec.emb", cfg.vocab_size, cfg.d_model, rng);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = layer_prefix("dec", l);
    add_norm(ps, pre + ".ln1", cfg.d_model);
    add_attention(ps, pre + ".self", cfg.d_model, rng);
    add_norm(ps, pre + ".ln2", cfg.d_model);
    add_attention(ps, pre + ".cross", cfg.d_model, rng);
    add_norm(ps, pre + ".ln3", cfg.d_model);
    add_ffn(ps, pre + ".ff", cfg.d_model, cfg.d_ff, rng);
  }
  add_norm(ps, "dec.ln_f", cfg.d_model);
  add_weight(ps, "dec.out.w", cfg.d_model, cfg.vocab_size, rng);
  add_bias(ps, "dec.out.b", cfg.vocab_size);
  return dec;
}

EncoderDecoderModel init_model(const ModelConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  EncoderParams enc = init_encoder(config, rng);
  DecoderParams dec = init_decoder(config, rng);
  return EncoderDecoderModel{config, std::move(enc), std::move(dec)};
}

std::uint64_t EncoderDecoderModel::checksum() const {
  return encoder.params.checksum() * 1099511628211ULL ^ decoder.params.checksum();
}

ModelRef compose(const EncoderParams& theta, const DecoderParams& phi) {
  if (!(theta.config == phi.config)) throw CompatibilityError("compose: encoder and decoder configs differ");
  return ModelRef{&theta, &phi};
}

EncoderDecoderModel compose_model(const EncoderParams& theta, const DecoderParams& phi) {
  compose(theta, phi);
  return EncoderDecoderModel{theta.config, theta, phi};
}

Tensor encode(const EncoderParams& theta, const TokenSeq& source, bool track) {
  if (source.empty()) throw ContractError("encode: empty source");
  if (source.size() > theta.config.max_len) {
    throw LengthError("source length " + std::to_string(source.size()) + " exceeds max_len " +
                      std::to_string(theta.config.max_len));
  }
  Packed p;
  for (std::size_t i = 0; i < source.size(); ++i) {
    p.src_ids.push_back(source[i]);
    p.src_pos.push_back(i);
  }
  p.enc_self.push_back({0, source.size(), 0, source.size()});
  return encode_packed(theta, p, track);
}

Tensor batch_nll(ModelRef model, std::span<const SentencePair> batch, Tracking tracking) {
  const Packed p = pack(batch, model.config());
  Tensor memory = encode_packed(*model.encoder, p, tracking.encoder);
  Tensor logits = decode_packed(*model.decoder, memory, p, tracking.decoder);
  return softmax_cross_entropy(logits, p.dec_out);
}

double nll(ModelRef model, const SentencePair& pair) {
  NoGradGuard guard;
  return batch_nll(model, std::span<const SentencePair>(&pair, 1)).item();
}

std::vector<double> sequence_logprobs(ModelRef model, std::span<const SentencePair> pairs) {
  std::vector<double> out;
  out.reserve(pairs.size());
  NoGradGuard guard;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < pairs.size(); start += kChunk) {
    auto chunk = pairs.subspan(start, std::min(kChunk, pairs.size() - start));
    const Packed p = pack(chunk, model.config());
    Tensor memory = encode_packed(*model.encoder, p, false);
    Tensor logits = decode_packed(*model.decoder, memory, p, false);
    const std::size_t v = logits.dim(1);
    std::size_t row = 0;
    for (const auto& pair : chunk) {
      double s = 0.0;
      for (std::size_t m = 0; m <= pair.target.size(); ++m, ++row) {
        s += log_softmax_row(logits.data().data() + row * v, v)[p.dec_out[row]];
      }
      out.push_back(s);
    }
  }
  return out;
}

// ---- incremental decoding -------------------------------------------------

IncrementalDecoder::IncrementalDecoder(ModelRef model, const TokenSeq& source)
    : decoder_(model.decoder), source_len_(source.size()) {
  compose(*model.encoder, *model.decoder);
  NoGradGuard guard;
  Tensor memory = encode(*model.encoder, source, false);
  const ModelConfig& cfg = decoder_->config;
  const auto& ps = decoder_->params;
  layers_.resize(cfg.n_layers);
  const std::size_t d = cfg.d_model;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = layer_prefix("dec", l) + ".cross";
    auto& lc = layers_[l];
    lc.cross_k.resize(source_len_ * d);
    lc.cross_v.resize(source_len_ * d);
    for (std::size_t r = 0; r < source_len_; ++r) {
      const double* m = memory.data().data() + r * d;
      row_linear(m, ps.at(pre + ".wk"), ps.at(pre + ".bk"), lc.cross_k.data() + r * d);
      row_linear(m, ps.at(pre + ".wv"), ps.at(pre + ".bv"), lc.cross_v.data() + r * d);
    }
  }
}

std::vector<double> IncrementalDecoder::step(TokenId token) {
  const ModelConfig& cfg = decoder_->config;
  const auto& ps = decoder_->params;
  if (position_ >= cfg.max_len) throw LengthError("decoder position exceeds max_len");
  if (token >= cfg.vocab_size) throw IndexError("token id out of range");
  const std::size_t d = cfg.d_model;
  std::vector<double> x(d), h(d), q(d), k(d), v(d), a(d), o(d), ff(cfg.d_ff);
  const double* emb = ps.at("dec.emb").data().data() + token * d;
  for (std::size_t i = 0; i < d; ++i) x[i] = emb[i] + positional_value(position_, i, d);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = layer_prefix("dec", l);
    auto& lc = layers_[l];
    row_norm(x.data(), d, ps.at(pre + ".ln1.g"), ps.at(pre + ".ln1.b"), h.data());
    row_linear(h.data(), ps.at(pre + ".self.wq"), ps.at(pre + ".self.bq"), q.data());
    row_linear(h.data(), ps.at(pre + ".self.wk"), ps.at(pre + ".self.bk"), k.data());
    row_linear(h.data(), ps.at(pre + ".self.wv"), ps.at(pre + ".self.bv"), v.data());
    lc.self_k.insert(lc.self_k.end(), k.begin(), k.end());
    lc.self_v.insert(lc.self_v.end(), v.begin(), v.end());
    row_attention(q.data(), lc.self_k, lc.self_v, position_ + 1, d, cfg.n_heads, a.data());
    row_linear(a.data(), ps.at(pre + ".self.wo"), ps.at(pre + ".self.bo"), o.data());
    for (std::size_t i = 0; i < d; ++i) x[i] += o[i];

    row_norm(x.data(), d, ps.at(pre + ".ln2.g"), ps.at(pre + ".ln2.b"), h.data());
    row_linear(h.data(), ps.at(pre + ".cross.wq"), ps.at(pre + ".cross.bq"), q.data());
    row_attention(q.data(), lc.cross_k, lc.cross_v, source_len_, d, cfg.n_heads, a.data());
    row_linear(a.data(), ps.at(pre + ".cross.wo"), ps.at(pre + ".cross.bo"), o.data());
    for (std::size_t i = 0; i < d; ++i) x[i] += o[i];

    row_norm(x.data(), d, ps.at(pre + ".ln3.g"), ps.at(pre + ".ln3.b"), h.data());
    row_linear(h.data(), ps.at(pre + ".ff.w1"), ps.at(pre + ".ff.b1"), ff.data());
    for (double& f : ff) f = 0.5 * f * (1.0 + std::erf(f * (1.0 / std::numbers::sqrt2)));
    row_linear(ff.data(), ps.at(pre + ".ff.w2"), ps.at(pre + ".ff.b2"), o.data());
    for (std::size_t i = 0; i < d; ++i) x[i] += o[i];
  }
  row_norm(x.data(), d, ps.at("dec.ln_f.g"), ps.at("dec.ln_f.b"), h.data());
  std::vector<double> logits(cfg.vocab_size);
  row_linear(h.data(), ps.at("dec.out.w"), ps.at("dec.out.b"), logits.data());
  ++position_;
  return log_softmax_row(logits.data(), logits.size());
}

std::vector<std::vector<double>> teacher_forced_log_probs(ModelRef model, const SentencePair& pair) {
  NoGradGuard guard;
  const Packed p = pack(std::span<const SentencePair>(&pair, 1), model.config());
  const Tensor logits = decode_packed(*model.decoder, encode_packed(*model.encoder, p, false), p, false);
  const std::size_t v = logits.dim(1);
  std::vector<std::vector<double>> rows;
  for (std::size_t r = 0; r < logits.dim(0); ++r) rows.push_back(log_softmax_row(logits.data().data() + r * v, v));
  return rows;
}

std::vector<std::vector<double>> step_log_probs(ModelRef model, const TokenSeq& source, const TokenSeq& target) {
  IncrementalDecoder dec(model, source);
  std::vector<std::vector<double>> rows;
  rows.push_back(dec.step(kBos));
  for (TokenId t : target) rows.push_back(dec.step(t));
  return rows;
}

namespace {

// Tie-break rank: content tokens by id, EOS after all of them.
std::size_t token_rank(TokenId t, std::size_t vocab) { return t == kEos ? vocab : t; }

bool emittable(TokenId t) { return t == kEos || t >= kFirstContent; }

std::size_t clamp_steps(const ModelConfig& cfg, std::size_t max_steps) {
  return std::min(max_steps, cfg.max_len - 1);
}

}  // namespace

DecodeResult greedy_decode(ModelRef model, const TokenSeq& source, std::size_t max_steps) {
  max_steps = clamp_steps(model.config(), max_steps);
  const std::size_t vocab = model.config().vocab_size;
  IncrementalDecoder dec(model, source);
  std::vector<double> lp = dec.step(kBos);
  DecodeResult res;
  res.truncated = true;
  for (std::size_t step = 0; step < max_steps; ++step) {
    TokenId best = kEos;
    for (TokenId t = 0; t < vocab; ++t) {
      if (!emittable(t)) continue;
      if (lp[t] > lp[best] || (lp[t] == lp[best] && token_rank(t, vocab) < token_rank(best, vocab))) best = t;
    }
    res.log_prob += lp[best];
    ++res.length;
    if (best == kEos) {
      res.truncated = false;
      break;
    }
    res.tokens.push_back(best);
    if (step + 1 < max_steps) lp = dec.step(best);
  }
  return res;
}

DecodeResult beam_decode(ModelRef model, const TokenSeq& source, std::size_t beam_width, std::size_t max_steps) {
  if (beam_width == 0) throw ContractError("beam_width must be at least 1");
  max_steps = clamp_steps(model.config(), max_steps);
  const std::size_t vocab = model.config().vocab_size;

  struct Beam {
    TokenSeq tokens;
    double log_prob = 0.0;
    IncrementalDecoder state;
    std::vector<double> next;
  };
  struct Candidate {
    double score;
    std::size_t rank;
    std::size_t beam;
    TokenId token;
  };

  std::vector<Beam> alive;
  {
    IncrementalDecoder dec(model, source);
    std::vector<double> lp = dec.step(kBos);
    alive.push_back(Beam{{}, 0.0, std::move(dec), std::move(lp)});
  }
  std::vector<DecodeResult> finished;
  std::vector<Candidate> cands;
  for (std::size_t step = 0; step < max_steps && !alive.empty(); ++step) {
    cands.clear();
    for (std::size_t b = 0; b < alive.size(); ++b) {
      for (TokenId t = 0; t < vocab; ++t) {
        if (!emittable(t)) continue;
        cands.push_back({alive[b].log_prob + alive[b].next[t], token_rank(t, vocab), b, t});
      }
    }
    const std::size_t keep = std::min(beam_width, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& x, const Candidate& y) {
                        if (x.score != y.score) return x.score > y.score;
                        if (x.rank != y.rank) return x.rank < y.rank;
                        return x.beam < y.beam;
                      });
    std::vector<Beam> next_alive;
    for (std::size_t c = 0; c < keep; ++c) {
      const Candidate& cand = cands[c];
      const Beam& parent = alive[cand.beam];
      if (cand.token == kEos) {
        finished.push_back(DecodeResult{parent.tokens, cand.score, parent.tokens.size() + 1, false});
        continue;
      }
      Beam child{parent.tokens, cand.score, parent.state, {}};
      child.tokens.push_back(cand.token);
      if (step + 1 < max_steps) child.next = child.state.step(cand.token);
      next_alive.push_back(std::move(child));
    }
    alive = std::move(next_alive);
  }
  for (const auto& b : alive) finished.push_back(DecodeResult{b.tokens, b.log_prob, b.tokens.size(), true});

  const DecodeResult* best = nullptr;
  for (const auto& r : finished) {
    if (r.length == 0) continue;
    if (!best || r.normalized_score() > best->normalized_score()) best = &r;
  }
  return best ? *best : DecodeResult{{}, 0.0, 0, true};
}

// ---- language model -------------------------------------------------------

LanguageModel init_language_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  LanguageModel lm{cfg, {}};
  auto& ps = lm.params;
  add_embedding(ps, "lm.emb", cfg.vocab_size, cfg.d_model, rng);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = layer_prefix("lm", l);
    add_norm(ps, pre + ".ln1", cfg.d_model);
    add_attention(ps, pre + ".self", cfg.d_model, rng);
    add_norm(ps, pre + ".ln2", cfg.d_model);
    add_ffn(ps, pre + ".ff", cfg.d_model, cfg.d_ff, rng);
  }
  add_norm(ps, "lm.ln_f", cfg.d_model);
  add_weight(ps, "lm.out.w", cfg.d_model, cfg.vocab_size, rng);
  add_bias(ps, "lm.out.b", cfg.vocab_size);
  return lm;
}

namespace {

struct LmPacked {
  std::vector<std::size_t> in, pos, out;
  std::vector<AttentionSegment> segs;
};

LmPacked lm_pack(std::span<const TokenSeq> sentences, const ModelConfig& cfg) {
  if (sentences.empty()) throw ContractError("empty sentence batch");
  LmPacked p;
  std::size_t off = 0;
  for (const auto& s : sentences) {
    if (s.empty()) throw ContractError("language model requires a non-empty sentence");
    if (s.size() + 1 > cfg.max_len) throw LengthError("sentence length + EOS exceeds max_len");
    const std::size_t m = s.size() + 1;
    p.in.push_back(kBos);
    p.in.insert(p.in.end(), s.begin(), s.end());
    p.out.insert(p.out.end(), s.begin(), s.end());
    p.out.push_back(kEos);
    for (std::size_t i = 0; i < m; ++i) p.pos.push_back(i);
    p.segs.push_back({off, m, off, m});
    off += m;
  }
  return p;
}

Tensor lm_logits(const LanguageModel& lm, const LmPacked& p, bool track) {
  const ModelConfig& cfg = lm.config;
  Weights w(lm.params, track);
  Tensor y = add(embedding(w("lm.emb"), p.in), positional_rows(p.pos, cfg.d_model));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = layer_prefix("lm", l);
    Tensor h = norm(y, w, pre + ".ln1");
    y = add(y, attention_block(h, h, w, pre + ".self", p.segs, cfg.n_heads, true));
    y = add(y, ffn_block(norm(y, w, pre + ".ln2"), w, pre + ".ff"));
  }
  return linear(norm(y, w, "lm.ln_f"), w, "lm.out.w", "lm.out.b");
}

}  // namespace

Tensor lm_batch_nll(const LanguageModel& lm, std::span<const TokenSeq> sentences, bool track) {
  const LmPacked p = lm_pack(sentences, lm.config);
  return softmax_cross_entropy(lm_logits(lm, p, track), p.out);
}

std::vector<double> lm_logprobs(const LanguageModel& lm, std::span<const TokenSeq> sentences) {
  std::vector<double> out;
  out.reserve(sentences.size());
  NoGradGuard guard;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < sentences.size(); start += kChunk) {
    auto chunk = sentences.subspan(start, std::min(kChunk, sentences.size() - start));
    const LmPacked p = lm_pack(chunk, lm.config);
    Tensor logits = lm_logits(lm, p, false);
    const std::size_t v = logits.dim(1);
    std::size_t row = 0;
    for (const auto& s : chunk) {
      double total = 0.0;
      for (std::size_t m = 0; m <= s.size(); ++m, ++row) {
        total += log_softmax_row(logits.data().data() + row * v, v)[p.out[row]];
      }
      out.push_back(total);
    }
  }
  return out;
}

double lm_logprob(const LanguageModel& lm, const TokenSeq& sentence) {
  return lm_logprobs(lm, std::span<const TokenSeq>(&sentence, 1)).front();
}

std::vector<std::vector<double>> lm_position_log_probs(const LanguageModel& lm, const TokenSeq& sentence) {
  NoGradGuard guard;
  const LmPacked p = lm_pack(std::span<const TokenSeq>(&sentence, 1), lm.config);
  Tensor logits = lm_logits(lm, p, false);
  const std::size_t v = logits.dim(1);
  std::vector<std::vector<double>> rows;
  for (std::size_t r = 0; r < logits.dim(0); ++r) rows.push_back(log_softmax_row(logits.data().data() + r * v, v));
  return rows;
}

// ---- checkpoints ------------------------------------------------------------

void save_model(const std::filesystem::path& path, const EncoderDecoderModel& model) {
  save_checkpoint(path, {&model.encoder.params, &model.decoder.params});
}

EncoderDecoderModel load_model(const std::filesystem::path& path, const ModelConfig& config) {
  EncoderDecoderModel model = init_model(config, 0);
  ParameterSet loaded;
  for (auto& [name, t] : load_checkpoint_entries(path)) loaded.add(name, std::move(t));
  for (auto* part : {&model.encoder.params, &model.decoder.params}) {
    for (auto& [name, t] : part->entries()) {
      if (!loaded.contains(name)) throw CompatibilityError("checkpoint " + path.string() + " lacks '" + name + "'");
      const Tensor& src = loaded.at(name);
      if (src.shape() != t.shape()) throw CompatibilityError("checkpoint shape mismatch for '" + name + "'");
      std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
    }
  }
  if (loaded.size() != model.encoder.params.size() + model.decoder.params.size()) {
    throw CompatibilityError("checkpoint " + path.string() + " has unexpected parameters");
  }
  return model;
}

void save_language_model(const std::filesystem::path& path, const LanguageModel& lm) { save_parameters(path, lm.params); }

LanguageModel load_language_model(const std::filesystem::path& path, const ModelConfig& config) {
  LanguageModel lm = init_language_model(config, 0);
  ParameterSet loaded = load_parameters(path);
  check_same_structure(lm.params, loaded, "load_language_model");
  lm.params.assign_values(loaded);
  return lm;
}

}  // namespace epi
