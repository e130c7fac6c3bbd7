#include "libs/seq2seq.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace libs {

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab(const std::vector<std::string>& content_tokens) {
  tokens_ = {"[sos]", "[eos]", "[pad]"};
  tokens_.insert(tokens_.end(), content_tokens.begin(), content_tokens.end());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw ConfigError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

const std::string& Vocab::token(TokenId id) const {
  if (id >= tokens_.size()) {
    throw LookupError("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[id];
}

TokenId Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) throw LookupError("unknown token '" + token + "'");
  return it->second;
}

std::string Vocab::render(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId t : ids) {
    if (is_reserved(t)) continue;
    if (!out.empty()) out += ' ';
    out += token(t);
  }
  return out;
}

std::vector<TokenId> with_boundaries(std::span<const TokenId> sentence) {
  std::vector<TokenId> out;
  out.reserve(sentence.size() + 2);
  out.push_back(kSos);
  out.insert(out.end(), sentence.begin(), sentence.end());
  out.push_back(kEos);
  return out;
}

// ---------------------------------------------------------------------------
// GRU

GruParams make_gru(ParameterStore& store, const std::string& prefix,
                   std::size_t d_in, std::size_t d_h, std::mt19937_64& rng) {
  const Real bound = 1 / std::sqrt(static_cast<Real>(d_h));
  GruParams p;
  p.d_in = d_in;
  p.d_h = d_h;
  p.w_z = &store.add(prefix + ".w_z", uniform_init({d_h, d_in}, bound, rng));
  p.w_r = &store.add(prefix + ".w_r", uniform_init({d_h, d_in}, bound, rng));
  p.w_h = &store.add(prefix + ".w_h", uniform_init({d_h, d_in}, bound, rng));
  p.u_z = &store.add(prefix + ".u_z", uniform_init({d_h, d_h}, bound, rng));
  p.u_r = &store.add(prefix + ".u_r", uniform_init({d_h, d_h}, bound, rng));
  p.u_h = &store.add(prefix + ".u_h", uniform_init({d_h, d_h}, bound, rng));
  p.b_z = &store.add(prefix + ".b_z", Tensor(Shape{d_h}));
  p.b_r = &store.add(prefix + ".b_r", Tensor(Shape{d_h}));
  p.b_h = &store.add(prefix + ".b_h", Tensor(Shape{d_h}));
  return p;
}

Var gru_cell(Graph& g, const GruParams& p, Var x, Var h_prev) {
  if (x.value().rank() != 1 || x.value().size() != p.d_in) {
    throw DimensionError("gru_cell input " + shape_str(x.shape()) +
                         " does not match d_in=" + std::to_string(p.d_in));
  }
  if (h_prev.value().rank() != 1 || h_prev.value().size() != p.d_h) {
    throw DimensionError("gru_cell state " + shape_str(h_prev.shape()) +
                         " does not match d_h=" + std::to_string(p.d_h));
  }
  auto gate = [&](const Parameter* w, const Parameter* u, const Parameter* b,
                  Var h) {
    return add(add(matmul(g.param(*w), x), matmul(g.param(*u), h)),
               g.param(*b));
  };
  Var z = sigmoid(gate(p.w_z, p.u_z, p.b_z, h_prev));
  Var r = sigmoid(gate(p.w_r, p.u_r, p.b_r, h_prev));
  Var cand = tanh(gate(p.w_h, p.u_h, p.b_h, mul(r, h_prev)));
  return add(h_prev, mul(z, sub(cand, h_prev)));
}

EncoderOutput encode(Graph& g, std::span<const BiGruLayer> layers,
                     const Tensor& frames) {
  if (layers.empty()) throw ConfigError("encoder needs at least one layer");
  if (frames.rank() != 2 || frames.rows() == 0) {
    throw DomainError("encode needs a non-empty [T x d] frame matrix");
  }
  const std::size_t steps = frames.rows();
  Var input = g.constant(frames);
  std::vector<Var> inputs(steps);
  for (std::size_t t = 0; t < steps; ++t) inputs[t] = row(input, t);

  Var fwd_last, bwd_first;
  for (const BiGruLayer& layer : layers) {
    std::vector<Var> fwd(steps), bwd(steps);
    Var h = g.constant(Tensor(Shape{layer.forward.d_h}));
    for (std::size_t t = 0; t < steps; ++t) {
      h = gru_cell(g, layer.forward, inputs[t], h);
      fwd[t] = h;
    }
    h = g.constant(Tensor(Shape{layer.backward.d_h}));
    for (std::size_t t = steps; t-- > 0;) {
      h = gru_cell(g, layer.backward, inputs[t], h);
      bwd[t] = h;
    }
    for (std::size_t t = 0; t < steps; ++t) inputs[t] = concat(fwd[t], bwd[t]);
    fwd_last = fwd[steps - 1];
    bwd_first = bwd[0];
  }
  EncoderOutput out;
  out.hidden_states = stack_rows(inputs);
  out.sequence_vector = concat(fwd_last, bwd_first);
  return out;
}

// ---------------------------------------------------------------------------
// Attention

const char* attention_kind_name(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::Dot: return "dot";
    case AttentionKind::General: return "general";
    case AttentionKind::Concat: return "concat";
  }
  return "?";
}

AttentionKind parse_attention_kind(const std::string& name) {
  if (name == "dot") return AttentionKind::Dot;
  if (name == "general") return AttentionKind::General;
  if (name == "concat") return AttentionKind::Concat;
  throw ConfigError("unknown attention scorer '" + name +
                    "' (expected dot, general or concat)");
}

namespace {

Var dot(Var a, Var b) { return sum(mul(a, b)); }

void require_params(const AttentionParams& p) {
  switch (p.kind) {
    case AttentionKind::Dot:
      return;
    case AttentionKind::General:
      if (!p.w) throw ConfigError("general attention needs W");
      return;
    case AttentionKind::Concat:
      if (!p.w || !p.v) throw ConfigError("concat attention needs W and v");
      return;
  }
}

}  // namespace

Var attention_score(Graph& g, const AttentionParams& p, Var h_dec,
                    Var h_enc) {
  require_params(p);
  switch (p.kind) {
    case AttentionKind::Dot:
      return dot(h_dec, h_enc);
    case AttentionKind::General:
      return dot(matmul(h_dec, g.param(*p.w)), h_enc);
    case AttentionKind::Concat:
      return dot(g.param(*p.v),
                 tanh(matmul(g.param(*p.w), concat(h_dec, h_enc))));
  }
  throw ConfigError("unknown attention kind");
}

AttentionResult attention_context(Graph& g, const AttentionParams& p,
                                  Var h_dec_prev, Var enc_states) {
  require_params(p);
  if (enc_states.value().rank() != 2) {
    throw DimensionError("attention expects [T x d] encoder states, got " +
                         shape_str(enc_states.shape()));
  }
  Var scores;
  switch (p.kind) {
    case AttentionKind::Dot:
      scores = matmul(enc_states, h_dec_prev);
      break;
    case AttentionKind::General:
      scores = matmul(enc_states, matmul(h_dec_prev, g.param(*p.w)));
      break;
    case AttentionKind::Concat: {
      const std::size_t steps = enc_states.value().rows();
      std::vector<Var> per_row(steps);
      for (std::size_t i = 0; i < steps; ++i) {
        per_row[i] = attention_score(g, p, h_dec_prev, row(enc_states, i));
      }
      scores = concat(per_row);
      break;
    }
  }
  AttentionResult out;
  out.weights = softmax(scores);
  out.context = matmul(out.weights, enc_states);
  return out;
}

// ---------------------------------------------------------------------------
// Decoding helpers

TokenId argmax_token(std::span<const Real> logits) {
  TokenId best = kEos;
  for (TokenId t = 0; t < logits.size(); ++t) {
    if (t == kSos || t == kPad) continue;
    if (logits[t] > logits[best]) best = t;
  }
  return best;
}

std::vector<TokenId> Hypothesis::content() const {
  std::vector<TokenId> out = tokens;
  if (!out.empty() && out.back() == kEos) out.pop_back();
  return out;
}

Hypothesis beam_search(TokenScorer& scorer, std::size_t width,
                       std::size_t max_len) {
  if (width < 1) throw ConfigError("beam width must be >= 1");
  struct Candidate {
    Real log_prob;
    std::size_t beam;
    TokenId token;
  };
  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> done;

  for (std::size_t len = 0; len < max_len && !live.empty(); ++len) {
    std::vector<Candidate> cands;
    for (std::size_t b = 0; b < live.size(); ++b) {
      const auto lp = scorer.next_log_probs(live[b].tokens);
      for (TokenId t = 0; t < lp.size(); ++t) {
        if (!std::isfinite(lp[t])) continue;
        cands.push_back({live[b].log_prob + lp[t], b, t});
      }
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Candidate& a, const Candidate& b) {
                       if (a.log_prob != b.log_prob) {
                         return a.log_prob > b.log_prob;
                       }
                       if (a.beam != b.beam) return a.beam < b.beam;
                       return a.token < b.token;
                     });
    std::vector<Hypothesis> next;
    for (std::size_t c = 0; c < cands.size() && c < width; ++c) {
      Hypothesis h = live[cands[c].beam];
      h.tokens.push_back(cands[c].token);
      h.log_prob = cands[c].log_prob;
      if (cands[c].token == kEos) {
        h.finished = true;
        done.push_back(std::move(h));
      } else {
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
    if (!done.empty() && !live.empty()) {
      Real best_done = -std::numeric_limits<Real>::infinity();
      for (const auto& h : done) best_done = std::max(best_done, h.log_prob);
      // Log-probs only decrease, so no live beam can overtake.
      if (best_done >= live.front().log_prob) break;
    }
  }
  for (auto& h : live) {
    if (h.tokens.size() >= max_len) done.push_back(std::move(h));
  }
  if (done.empty()) return Hypothesis{};
  const Hypothesis* best = &done.front();
  for (const auto& h : done) {
    if (h.log_prob > best->log_prob) best = &h;
  }
  return *best;
}

Hypothesis greedy_decode(TokenScorer& scorer, std::size_t max_len) {
  Hypothesis h;
  while (h.tokens.size() < max_len) {
    const auto lp = scorer.next_log_probs(h.tokens);
    TokenId best = 0;
    bool found = false;
    for (TokenId t = 0; t < lp.size(); ++t) {
      if (!std::isfinite(lp[t])) continue;
      if (!found || lp[t] > lp[best]) {
        best = t;
        found = true;
      }
    }
    if (!found) break;
    h.tokens.push_back(best);
    h.log_prob += lp[best];
    if (best == kEos) {
      h.finished = true;
      break;
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Seq2Seq

Seq2Seq::Seq2Seq(const ModelConfig& config, std::uint64_t seed,
                 const std::string& prefix)
    : config_(config) {
  const auto& c = config_;
  if (c.input_dim == 0 || c.enc_hidden == 0 || c.dec_hidden == 0 ||
      c.embed_dim == 0 || c.enc_layers == 0) {
    throw ConfigError("model dimensions and layer count must be positive");
  }
  if (c.vocab_size <= kFirstContentToken) {
    throw ConfigError("vocabulary must contain content tokens");
  }
  const std::size_t d_enc = 2 * c.enc_hidden;
  if (c.attention == AttentionKind::Dot && c.dec_hidden != d_enc) {
    throw ConfigError("dot attention needs dec_hidden == 2 * enc_hidden");
  }
  std::mt19937_64 rng(seed);
  std::size_t d_in = c.input_dim;
  for (std::size_t l = 0; l < c.enc_layers; ++l) {
    const std::string base = prefix + "enc" + std::to_string(l);
    BiGruLayer layer;
    layer.forward = make_gru(params_, base + ".fwd", d_in, c.enc_hidden, rng);
    layer.backward = make_gru(params_, base + ".bwd", d_in, c.enc_hidden, rng);
    encoder_.push_back(layer);
    d_in = d_enc;
  }
  embedding_ = &params_.add(prefix + "dec.embedding",
                            uniform_init({c.vocab_size, c.embed_dim}, 0.5, rng));
  const Real init_bound = 1 / std::sqrt(static_cast<Real>(d_enc));
  init_w_ = &params_.add(prefix + "dec.init_w",
                         uniform_init({c.dec_hidden, d_enc}, init_bound, rng));
  init_b_ = &params_.add(prefix + "dec.init_b", Tensor(Shape{c.dec_hidden}));
  decoder_ = make_gru(params_, prefix + "dec.gru", c.embed_dim + d_enc,
                      c.dec_hidden, rng);
  attention_.kind = c.attention;
  switch (c.attention) {
    case AttentionKind::Dot:
      break;
    case AttentionKind::General:
      attention_.w = &params_.add(
          prefix + "dec.att_w",
          uniform_init({c.dec_hidden, d_enc},
                       1 / std::sqrt(static_cast<Real>(c.dec_hidden)), rng));
      break;
    case AttentionKind::Concat:
      attention_.w = &params_.add(
          prefix + "dec.att_w",
          uniform_init({c.attention_dim, c.dec_hidden + d_enc},
                       1 / std::sqrt(static_cast<Real>(c.dec_hidden + d_enc)),
                       rng));
      attention_.v = &params_.add(
          prefix + "dec.att_v",
          uniform_init({c.attention_dim},
                       1 / std::sqrt(static_cast<Real>(c.attention_dim)), rng));
      break;
  }
  const std::size_t d_out_in = c.dec_hidden + d_enc;
  out_w_ = &params_.add(
      prefix + "dec.out_w",
      uniform_init({c.vocab_size, d_out_in},
                   1 / std::sqrt(static_cast<Real>(d_out_in)), rng));
  out_b_ = &params_.add(prefix + "dec.out_b", Tensor(Shape{c.vocab_size}));
}

EncoderOutput Seq2Seq::encode(Graph& g, const Tensor& frames) const {
  if (frames.rank() != 2 || frames.cols() != config_.input_dim) {
    throw DimensionError("model expects [T x " +
                         std::to_string(config_.input_dim) + "] frames, got " +
                         shape_str(frames.shape()));
  }
  return libs::encode(g, encoder_, frames);
}

Var Seq2Seq::initial_state(Graph& g, const EncoderOutput& enc) const {
  return tanh(add(matmul(g.param(*init_w_), enc.sequence_vector),
                  g.param(*init_b_)));
}

Seq2Seq::Step Seq2Seq::step(Graph& g, const EncoderOutput& enc, Var h_prev,
                            TokenId prev) const {
  if (prev >= config_.vocab_size) {
    throw ContractError("token id " + std::to_string(prev) +
                        " outside vocabulary");
  }
  AttentionResult att =
      attention_context(g, attention_, h_prev, enc.hidden_states);
  Var emb = row(g.param(*embedding_), prev);
  Step s;
  s.hidden = gru_cell(g, decoder_, concat(emb, att.context), h_prev);
  s.context = att.context;
  s.alpha = att.weights;
  s.logits = add(matmul(g.param(*out_w_), concat(s.hidden, att.context)),
                 g.param(*out_b_));
  return s;
}

TeacherForcedResult Seq2Seq::decode_teacher_forced(
    Graph& g, const EncoderOutput& enc, std::span<const TokenId> target,
    double sampling_prob, std::uint64_t rng_seed) const {
  if (target.size() < 2) {
    throw DomainError("teacher-forced target needs at least [sos] and [eos]");
  }
  if (target.front() != kSos || target.back() != kEos) {
    throw ContractError("teacher-forced target must start with [sos] and end "
                        "with [eos]");
  }
  std::mt19937_64 rng(rng_seed);
  TeacherForcedResult out;
  auto& tr = out.trace;
  Var h = initial_state(g, enc);
  std::vector<Var> losses;
  const std::size_t steps = target.size() - 1;
  for (std::size_t k = 0; k < steps; ++k) {
    TokenId fed = target[k];
    if (k > 0) {
      const double u = uniform01(rng);
      if (!(u < sampling_prob)) fed = tr.argmax.back();
    }
    Step s = step(g, enc, h, fed);
    h = s.hidden;
    tr.hidden.push_back(s.hidden);
    tr.context.push_back(s.context);
    tr.alpha.push_back(s.alpha);
    tr.logits.push_back(s.logits);
    tr.fed_tokens.push_back(fed);
    tr.argmax.push_back(argmax_token(s.logits.value().data()));
    if (target[k + 1] != kPad) losses.push_back(nll(s.logits, target[k + 1]));
  }
  if (losses.empty()) {
    out.base_loss = g.constant(Tensor::scalar(0));
  } else {
    out.base_loss =
        scale(add_n(losses), Real{1} / static_cast<Real>(losses.size()));
  }
  return out;
}

FreeRunResult Seq2Seq::decode_greedy(Graph& g, const EncoderOutput& enc,
                                     std::size_t max_len) const {
  FreeRunResult out;
  auto& tr = out.trace;
  Var h = initial_state(g, enc);
  TokenId prev = kSos;
  for (std::size_t k = 0; k < max_len; ++k) {
    Step s = step(g, enc, h, prev);
    h = s.hidden;
    const TokenId next = argmax_token(s.logits.value().data());
    tr.hidden.push_back(s.hidden);
    tr.context.push_back(s.context);
    tr.alpha.push_back(s.alpha);
    tr.logits.push_back(s.logits);
    tr.fed_tokens.push_back(prev);
    tr.argmax.push_back(next);
    if (next == kEos) {
      out.finished = true;
      break;
    }
    out.tokens.push_back(next);
    prev = next;
  }
  return out;
}

Hypothesis Seq2Seq::beam_search(const Tensor& frames, std::size_t width,
                                std::size_t max_len) const {
  if (width < 1) throw ConfigError("beam width must be >= 1");
  Seq2SeqScorer scorer(*this, frames);
  return libs::beam_search(scorer, width, max_len);
}

Seq2SeqScorer::Seq2SeqScorer(const Seq2Seq& model, const Tensor& frames)
    : model_(model) {
  enc_ = model_.encode(graph_, frames);
  h0_ = model_.initial_state(graph_, enc_);
}

std::vector<Real> Seq2SeqScorer::next_log_probs(
    std::span<const TokenId> prefix) {
  // hidden_after_[q] is the state produced by the step that consumed q's last
  // token; the step consuming prefix p yields the distribution after p.
  std::vector<TokenId> key(prefix.begin(), prefix.end());
  Var h_prev = h0_;
  if (!key.empty()) {
    std::vector<TokenId> parent(key.begin(), key.end() - 1);
    auto it = hidden_after_.find(parent);
    if (it == hidden_after_.end()) {
      next_log_probs(parent);
      it = hidden_after_.find(parent);
    }
    h_prev = it->second;
  }
  const TokenId prev = key.empty() ? kSos : key.back();
  Seq2Seq::Step s = model_.step(graph_, enc_, h_prev, prev);
  hidden_after_[key] = s.hidden;
  auto lp = log_softmax(s.logits.value().data());
  lp[kSos] = -std::numeric_limits<Real>::infinity();
  lp[kPad] = -std::numeric_limits<Real>::infinity();
  return lp;
}

}  // namespace libs
