#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "libs/align.hpp"
#include "libs/seq2seq.hpp"
#include "libs/tensor.hpp"

namespace libs {

// Synthetic paired-modality corpus generator settings. Video renderings of
// tokens that share a viseme class differ only by a residual scaled by
// video_ambiguity; audio renderings are distinct per token.
struct GenConfig {
  std::size_t vocab_size = 20;  // content tokens (reserved ids excluded)
  std::size_t viseme_classes = 8;
  std::size_t video_rate = 2;  // frames per token
  std::size_t video_dim = 16;
  std::size_t audio_rate = 5;
  std::size_t audio_dim = 16;
  double video_ambiguity = 0.15;
  double video_noise = 0.05;
  double audio_noise = 0.05;
  std::size_t max_blank = 3;  // blank frames per end, uniform in [0, max_blank]
  std::size_t min_len = 3;
  std::size_t max_len = 8;
  std::size_t train_size = 2000;
  std::size_t val_size = 200;
  std::size_t test_size = 200;
  std::uint64_t seed = 1;

  void validate() const;
  // Flat key = value form, as stored in corpus headers.
  std::map<std::string, std::string> to_map() const;
  static GenConfig from_map(const std::map<std::string, std::string>& kv);
};

struct PairedSample {
  std::uint64_t id = 0;
  std::vector<TokenId> tokens;  // y, vocabulary ids (content only)
  Tensor video;                 // x^v [J x d_v]
  Tensor audio;                 // x^a [I x d_a]
  // Blank frame counts, kept for analysis; not serialised.
  std::size_t video_lead = 0, video_trail = 0;
  std::size_t audio_lead = 0, audio_trail = 0;
};

enum class Split { Train, Val, Test };

const char* split_name(Split s);
Split parse_split(const std::string& name);

struct Corpus {
  GenConfig config;
  std::vector<std::size_t> viseme_class;  // per content token (0-based)
  std::vector<PairedSample> train, val, test;

  std::vector<PairedSample>& split(Split s);
  const std::vector<PairedSample>& split(Split s) const;
  const PairedSample* find(std::uint64_t id) const;

  Vocab vocab() const;
  std::size_t model_vocab_size() const {
    return config.vocab_size + kFirstContentToken;
  }
  // Equivalence over model vocabulary ids induced by the viseme classes.
  EquivRelation viseme_equiv() const;
};

// Fixed per-token renderings derived from the master seed.
struct Renderings {
  std::vector<std::vector<Real>> class_embedding;   // [C][d_v]
  std::vector<std::vector<Real>> token_residual;    // [V][d_v]
  std::vector<std::vector<Real>> token_embedding;   // [V][d_a]
  std::vector<std::size_t> viseme_class;            // [V]

  // Noise-free frame for content token index v (0-based).
  std::vector<Real> video_frame(std::size_t v, double ambiguity) const;
  const std::vector<Real>& audio_frame(std::size_t v) const {
    return token_embedding[v];
  }
};

Renderings make_renderings(const GenConfig& cfg);

Corpus gen_corpus(const GenConfig& cfg);

// Binary corpus file, little-endian: "LIBSCRP1", u32 header length + UTF-8
// key=value header, u64 sample count, then per sample id (u64), K (u32),
// K u32 tokens, J (u32), d_v (u32), J*d_v f32, I (u32), d_a (u32), I*d_a f32.
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path);

}  // namespace libs
