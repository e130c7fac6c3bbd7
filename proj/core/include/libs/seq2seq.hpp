#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "libs/params.hpp"
#include "libs/tensor.hpp"

namespace libs {

using TokenId = std::uint32_t;

inline constexpr TokenId kSos = 0;
inline constexpr TokenId kEos = 1;
inline constexpr TokenId kPad = 2;
inline constexpr TokenId kFirstContentToken = 3;

inline bool is_reserved(TokenId t) { return t < kFirstContentToken; }

// Token inventory; ids 0..2 are [sos], [eos], [pad].
class Vocab {
 public:
  explicit Vocab(const std::vector<std::string>& content_tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  TokenId id(const std::string& token) const;
  bool contains(const std::string& token) const {
    return ids_.count(token) != 0;
  }

  // Renders content tokens separated by spaces; reserved tokens are dropped.
  std::string render(std::span<const TokenId> ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

// One GRU direction. Reset gate is applied to h before the recurrent matmul:
//   z  = sigmoid(Wz x + Uz h + bz)
//   r  = sigmoid(Wr x + Ur h + br)
//   h~ = tanh(Wh x + Uh (r * h) + bh)
//   h' = (1 - z) * h + z * h~
struct GruParams {
  const Parameter* w_z = nullptr;
  const Parameter* w_r = nullptr;
  const Parameter* w_h = nullptr;
  const Parameter* u_z = nullptr;
  const Parameter* u_r = nullptr;
  const Parameter* u_h = nullptr;
  const Parameter* b_z = nullptr;
  const Parameter* b_r = nullptr;
  const Parameter* b_h = nullptr;
  std::size_t d_in = 0;
  std::size_t d_h = 0;
};

GruParams make_gru(ParameterStore& store, const std::string& prefix,
                   std::size_t d_in, std::size_t d_h, std::mt19937_64& rng);

Var gru_cell(Graph& g, const GruParams& p, Var x, Var h_prev);

struct BiGruLayer {
  GruParams forward;
  GruParams backward;
};

struct EncoderOutput {
  Var hidden_states;    // [T x 2 d_h]
  Var sequence_vector;  // [2 d_h]: final forward state ++ final backward state
};

EncoderOutput encode(Graph& g, std::span<const BiGruLayer> layers,
                     const Tensor& frames);

enum class AttentionKind { Dot, General, Concat };

const char* attention_kind_name(AttentionKind kind);
AttentionKind parse_attention_kind(const std::string& name);

struct AttentionParams {
  AttentionKind kind = AttentionKind::General;
  const Parameter* w = nullptr;  // general: [d_dec x d_enc]; concat: [a x (d_dec + d_enc)]
  const Parameter* v = nullptr;  // concat: [a]
};

// Unnormalised similarity f(h_dec, h_enc); scalar.
Var attention_score(Graph& g, const AttentionParams& p, Var h_dec, Var h_enc);

struct AttentionResult {
  Var context;  // [d_enc]
  Var weights;  // [T]
};

AttentionResult attention_context(Graph& g, const AttentionParams& p,
                                  Var h_dec_prev, Var enc_states);

struct ModelConfig {
  std::size_t input_dim = 16;
  std::size_t vocab_size = 23;
  std::size_t enc_layers = 1;
  std::size_t enc_hidden = 16;  // per direction
  std::size_t dec_hidden = 32;
  std::size_t embed_dim = 16;
  std::size_t attention_dim = 16;  // concat scorer only
  AttentionKind attention = AttentionKind::General;
};

struct DecoderTrace {
  std::vector<Var> hidden;
  std::vector<Var> context;
  std::vector<Var> alpha;
  std::vector<Var> logits;
  std::vector<TokenId> fed_tokens;  // previous token fed at each step
  std::vector<TokenId> argmax;      // model argmax at each step
};

struct TeacherForcedResult {
  DecoderTrace trace;
  Var base_loss;  // mean NLL over the decoded steps
};

struct FreeRunResult {
  DecoderTrace trace;
  std::vector<TokenId> tokens;  // emitted tokens, [eos] excluded
  bool finished = false;        // emitted [eos] before max_len
};

struct Hypothesis {
  std::vector<TokenId> tokens;  // includes the final [eos] when finished
  Real log_prob = 0;
  bool finished = false;

  // Tokens with [eos] stripped.
  std::vector<TokenId> content() const;
};

// Next-token log-probabilities given a prefix (without [sos]). Banned tokens
// carry -infinity.
class TokenScorer {
 public:
  virtual ~TokenScorer() = default;
  virtual std::vector<Real> next_log_probs(std::span<const TokenId> prefix) = 0;
};

// Beam search without length normalisation. Candidates are ranked by
// cumulative log-prob, ties broken by parent beam then lower token id.
Hypothesis beam_search(TokenScorer& scorer, std::size_t width,
                       std::size_t max_len);
Hypothesis greedy_decode(TokenScorer& scorer, std::size_t max_len);

// Argmax over a logit vector excluding [sos] and [pad]; ties -> lower id.
TokenId argmax_token(std::span<const Real> logits);

// Attention encoder-decoder with a bidirectional GRU encoder and a GRU
// decoder whose initial state is tanh(W s + b) of the sequence vector.
class Seq2Seq {
 public:
  Seq2Seq(const ModelConfig& config, std::uint64_t seed,
          const std::string& prefix = "");
  Seq2Seq(Seq2Seq&&) = default;
  Seq2Seq& operator=(Seq2Seq&&) = default;

  const ModelConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  std::size_t enc_dim() const { return 2 * config_.enc_hidden; }
  std::span<const BiGruLayer> encoder_layers() const { return encoder_; }
  const AttentionParams& attention() const { return attention_; }

  EncoderOutput encode(Graph& g, const Tensor& frames) const;

  struct Step {
    Var hidden;
    Var context;
    Var alpha;
    Var logits;
  };
  Var initial_state(Graph& g, const EncoderOutput& enc) const;
  Step step(Graph& g, const EncoderOutput& enc, Var h_prev,
            TokenId prev) const;

  // target = [sos] y_1 .. y_K [eos]. At step k >= 2 the fed token is the
  // ground truth with probability sampling_prob, else the previous argmax.
  TeacherForcedResult decode_teacher_forced(Graph& g, const EncoderOutput& enc,
                                            std::span<const TokenId> target,
                                            double sampling_prob,
                                            std::uint64_t rng_seed) const;

  FreeRunResult decode_greedy(Graph& g, const EncoderOutput& enc,
                              std::size_t max_len) const;

  Hypothesis beam_search(const Tensor& frames, std::size_t width,
                         std::size_t max_len) const;

 private:
  ModelConfig config_;
  ParameterStore params_;
  std::vector<BiGruLayer> encoder_;
  const Parameter* embedding_ = nullptr;
  const Parameter* init_w_ = nullptr;
  const Parameter* init_b_ = nullptr;
  GruParams decoder_;
  AttentionParams attention_;
  const Parameter* out_w_ = nullptr;
  const Parameter* out_b_ = nullptr;
};

// Adapts a Seq2Seq decoder to TokenScorer over one encoded input.
class Seq2SeqScorer : public TokenScorer {
 public:
  Seq2SeqScorer(const Seq2Seq& model, const Tensor& frames);
  std::vector<Real> next_log_probs(std::span<const TokenId> prefix) override;

 private:
  const Seq2Seq& model_;
  Graph graph_{false};
  EncoderOutput enc_;
  Var h0_;
  std::map<std::vector<TokenId>, Var> hidden_after_;
};

// Wraps a target sentence as [sos] y [eos].
std::vector<TokenId> with_boundaries(std::span<const TokenId> sentence);

}  // namespace libs
