#include "libs/synthdata.hpp"

#include <cmath>
#include <sstream>

#include "libs/binio.hpp"
#include "libs/params.hpp"

namespace libs {

namespace {

constexpr std::string_view kCorpusMagic = "LIBSCRP1";

// Salts separating the random streams derived from the master seed.
constexpr std::uint64_t kRenderSalt = 0x52454e44;  // "REND"
constexpr std::uint64_t kSampleSalt = 0x53414d50;  // "SAMP"

std::vector<Real> random_direction(std::size_t dim, std::mt19937_64& rng) {
  // Unit-norm Gaussian direction; independent draws are nearly orthogonal.
  std::vector<Real> v(dim);
  Real norm = 0;
  for (auto& x : v) {
    x = normal01(rng);
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

std::size_t uniform_int(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  // inclusive range
  const std::size_t span = hi - lo + 1;
  return lo + std::min(span - 1,
                       static_cast<std::size_t>(uniform01(rng) *
                                                static_cast<double>(span)));
}

void append_frames(std::vector<Real>& out, std::size_t count,
                   std::span<const Real> base, double noise,
                   std::mt19937_64& rng) {
  for (std::size_t f = 0; f < count; ++f) {
    for (std::size_t d = 0; d < base.size(); ++d) {
      out.push_back(static_cast<float>(base[d] + noise * normal01(rng)));
    }
  }
}

}  // namespace

void GenConfig::validate() const {
  if (viseme_classes < 1) throw ConfigError("viseme_classes must be >= 1");
  if (viseme_classes > vocab_size) {
    throw ConfigError("viseme_classes (" + std::to_string(viseme_classes) +
                      ") exceeds vocab_size (" + std::to_string(vocab_size) +
                      ")");
  }
  if (video_rate == 0 || audio_rate == 0) {
    throw ConfigError("frame rates must be positive");
  }
  if (video_dim == 0 || audio_dim == 0) {
    throw ConfigError("feature dims must be positive");
  }
  if (!(video_ambiguity >= 0) || !(video_noise >= 0) || !(audio_noise >= 0)) {
    throw ConfigError("ambiguity and noise scales must be non-negative");
  }
  if (min_len < 1 || min_len > max_len) {
    throw ConfigError("sentence length range must satisfy 1 <= min <= max");
  }
}

std::map<std::string, std::string> GenConfig::to_map() const {
  std::map<std::string, std::string> kv;
  kv["vocab_size"] = std::to_string(vocab_size);
  kv["viseme_classes"] = std::to_string(viseme_classes);
  kv["video_rate"] = std::to_string(video_rate);
  kv["video_dim"] = std::to_string(video_dim);
  kv["audio_rate"] = std::to_string(audio_rate);
  kv["audio_dim"] = std::to_string(audio_dim);
  kv["video_ambiguity"] = format_real(video_ambiguity);
  kv["video_noise"] = format_real(video_noise);
  kv["audio_noise"] = format_real(audio_noise);
  kv["max_blank"] = std::to_string(max_blank);
  kv["min_len"] = std::to_string(min_len);
  kv["max_len"] = std::to_string(max_len);
  kv["train_size"] = std::to_string(train_size);
  kv["val_size"] = std::to_string(val_size);
  kv["test_size"] = std::to_string(test_size);
  kv["seed"] = std::to_string(seed);
  return kv;
}

GenConfig GenConfig::from_map(const std::map<std::string, std::string>& kv) {
  GenConfig c;
  auto size = [&](const char* key, std::size_t& dst) {
    if (auto it = kv.find(key); it != kv.end()) dst = parse_uint(key, it->second);
  };
  auto real = [&](const char* key, double& dst) {
    if (auto it = kv.find(key); it != kv.end()) dst = parse_real(key, it->second);
  };
  size("vocab_size", c.vocab_size);
  size("viseme_classes", c.viseme_classes);
  size("video_rate", c.video_rate);
  size("video_dim", c.video_dim);
  size("audio_rate", c.audio_rate);
  size("audio_dim", c.audio_dim);
  real("video_ambiguity", c.video_ambiguity);
  real("video_noise", c.video_noise);
  real("audio_noise", c.audio_noise);
  size("max_blank", c.max_blank);
  size("min_len", c.min_len);
  size("max_len", c.max_len);
  size("train_size", c.train_size);
  size("val_size", c.val_size);
  size("test_size", c.test_size);
  if (auto it = kv.find("seed"); it != kv.end()) {
    c.seed = parse_uint("seed", it->second);
  }
  return c;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "val") return Split::Val;
  if (name == "test") return Split::Test;
  throw ConfigError("unknown split '" + name + "' (expected train, val, test)");
}

std::vector<PairedSample>& Corpus::split(Split s) {
  switch (s) {
    case Split::Train: return train;
    case Split::Val: return val;
    case Split::Test: return test;
  }
  return train;
}

const std::vector<PairedSample>& Corpus::split(Split s) const {
  return const_cast<Corpus*>(this)->split(s);
}

const PairedSample* Corpus::find(std::uint64_t id) const {
  for (const auto* part : {&train, &val, &test}) {
    for (const auto& s : *part) {
      if (s.id == id) return &s;
    }
  }
  return nullptr;
}

Vocab Corpus::vocab() const {
  std::vector<std::string> names;
  for (std::size_t v = 0; v < config.vocab_size; ++v) {
    std::ostringstream os;
    os << 't' << (v < 10 ? "0" : "") << v;
    names.push_back(os.str());
  }
  return Vocab(names);
}

EquivRelation Corpus::viseme_equiv() const {
  std::vector<std::vector<TokenId>> classes(config.viseme_classes);
  for (std::size_t v = 0; v < viseme_class.size(); ++v) {
    classes[viseme_class[v]].push_back(
        static_cast<TokenId>(v + kFirstContentToken));
  }
  return class_equiv(classes, model_vocab_size());
}

std::vector<Real> Renderings::video_frame(std::size_t v,
                                          double ambiguity) const {
  std::vector<Real> out = class_embedding[viseme_class[v]];
  for (std::size_t d = 0; d < out.size(); ++d) {
    out[d] += ambiguity * token_residual[v][d];
  }
  return out;
}

Renderings make_renderings(const GenConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(mix_seed(cfg.seed, kRenderSalt));
  Renderings r;
  for (std::size_t c = 0; c < cfg.viseme_classes; ++c) {
    r.class_embedding.push_back(random_direction(cfg.video_dim, rng));
  }
  for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
    r.token_residual.push_back(random_direction(cfg.video_dim, rng));
  }
  for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
    r.token_embedding.push_back(random_direction(cfg.audio_dim, rng));
  }
  for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
    r.viseme_class.push_back(v % cfg.viseme_classes);
  }
  return r;
}

namespace {

PairedSample render_sample(const GenConfig& cfg, const Renderings& r,
                           std::uint64_t index) {
  std::mt19937_64 rng(mix_seed(cfg.seed, kSampleSalt + index));
  PairedSample s;
  s.id = index;
  const std::size_t len = uniform_int(rng, cfg.min_len, cfg.max_len);
  std::vector<std::size_t> content(len);
  for (auto& v : content) v = uniform_int(rng, 0, cfg.vocab_size - 1);
  for (auto v : content) {
    s.tokens.push_back(static_cast<TokenId>(v + kFirstContentToken));
  }
  s.video_lead = uniform_int(rng, 0, cfg.max_blank);
  s.video_trail = uniform_int(rng, 0, cfg.max_blank);
  s.audio_lead = uniform_int(rng, 0, cfg.max_blank);
  s.audio_trail = uniform_int(rng, 0, cfg.max_blank);

  const std::vector<Real> video_blank(cfg.video_dim, 0.0);
  const std::vector<Real> audio_blank(cfg.audio_dim, 0.0);

  std::vector<Real> video;
  append_frames(video, s.video_lead, video_blank, cfg.video_noise, rng);
  for (auto v : content) {
    append_frames(video, cfg.video_rate, r.video_frame(v, cfg.video_ambiguity),
                  cfg.video_noise, rng);
  }
  append_frames(video, s.video_trail, video_blank, cfg.video_noise, rng);

  std::vector<Real> audio;
  append_frames(audio, s.audio_lead, audio_blank, cfg.audio_noise, rng);
  for (auto v : content) {
    append_frames(audio, cfg.audio_rate, r.audio_frame(v), cfg.audio_noise,
                  rng);
  }
  append_frames(audio, s.audio_trail, audio_blank, cfg.audio_noise, rng);

  const std::size_t video_frames = video.size() / cfg.video_dim;
  const std::size_t audio_frames = audio.size() / cfg.audio_dim;
  s.video = Tensor::matrix(video_frames, cfg.video_dim, std::move(video));
  s.audio = Tensor::matrix(audio_frames, cfg.audio_dim, std::move(audio));
  return s;
}

}  // namespace

Corpus gen_corpus(const GenConfig& cfg) {
  cfg.validate();
  const Renderings r = make_renderings(cfg);
  Corpus c;
  c.config = cfg;
  c.viseme_class = r.viseme_class;
  std::uint64_t index = 0;
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    const std::size_t n = s == Split::Train ? cfg.train_size
                          : s == Split::Val ? cfg.val_size
                                            : cfg.test_size;
    auto& part = c.split(s);
    part.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      part.push_back(render_sample(cfg, r, index++));
    }
  }
  return c;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  auto header = corpus.config.to_map();
  std::string classes;
  for (std::size_t v = 0; v < corpus.viseme_class.size(); ++v) {
    if (v) classes += ',';
    classes += std::to_string(corpus.viseme_class[v]);
  }
  header["viseme_class_map"] = classes;
  header["split.train"] = std::to_string(corpus.train.size());
  header["split.val"] = std::to_string(corpus.val.size());
  header["split.test"] = std::to_string(corpus.test.size());

  BinaryWriter w;
  w.raw(kCorpusMagic);
  w.block(format_key_values(header));
  const std::uint64_t count =
      corpus.train.size() + corpus.val.size() + corpus.test.size();
  w.u64(count);
  for (const auto* part : {&corpus.train, &corpus.val, &corpus.test}) {
    for (const auto& s : *part) {
      w.u64(s.id);
      w.u32(static_cast<std::uint32_t>(s.tokens.size()));
      for (TokenId t : s.tokens) w.u32(t);
      w.u32(static_cast<std::uint32_t>(s.video.rows()));
      w.u32(static_cast<std::uint32_t>(s.video.cols()));
      for (Real v : s.video.data()) w.f32(static_cast<float>(v));
      w.u32(static_cast<std::uint32_t>(s.audio.rows()));
      w.u32(static_cast<std::uint32_t>(s.audio.cols()));
      for (Real v : s.audio.data()) w.f32(static_cast<float>(v));
    }
  }
  w.write_file(path);
}

Corpus load_corpus(const std::filesystem::path& path) {
  BinaryReader r = BinaryReader::from_file(path);
  r.expect_magic(kCorpusMagic);
  const std::size_t header_at = r.offset();
  std::map<std::string, std::string> header;
  try {
    header = parse_key_values(r.block(), path.string() + " header");
  } catch (const ConfigError& e) {
    throw FormatError(std::string(e.what()) + " (header at offset " +
                      std::to_string(header_at) + ")");
  }
  Corpus c;
  std::size_t n_train = 0, n_val = 0, n_test = 0;
  try {
    c.config = GenConfig::from_map(header);
    n_train = parse_uint("split.train", header.at("split.train"));
    n_val = parse_uint("split.val", header.at("split.val"));
    n_test = parse_uint("split.test", header.at("split.test"));
    std::stringstream ss(header.at("viseme_class_map"));
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) c.viseme_class.push_back(parse_uint("viseme_class_map", item));
    }
  } catch (const std::out_of_range&) {
    throw FormatError(path.string() + ": corpus header missing split or " +
                      "viseme keys (header at offset " +
                      std::to_string(header_at) + ")");
  } catch (const ConfigError& e) {
    throw FormatError(std::string(e.what()) + " (header at offset " +
                      std::to_string(header_at) + ")");
  }
  if (c.viseme_class.size() != c.config.vocab_size) {
    throw FormatError(path.string() + ": viseme map covers " +
                      std::to_string(c.viseme_class.size()) +
                      " tokens, vocab_size is " +
                      std::to_string(c.config.vocab_size));
  }
  const std::uint64_t count = r.u64();
  if (count != n_train + n_val + n_test) {
    r.fail("sample count disagrees with split sizes");
  }
  auto read_matrix = [&](const char* what) {
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    if (rows == 0 || cols == 0) r.fail(std::string("empty ") + what + " matrix");
    std::vector<Real> data(static_cast<std::size_t>(rows) * cols);
    for (auto& v : data) v = r.f32();
    return Tensor::matrix(rows, cols, std::move(data));
  };
  for (std::uint64_t i = 0; i < count; ++i) {
    PairedSample s;
    s.id = r.u64();
    const std::uint32_t len = r.u32();
    for (std::uint32_t k = 0; k < len; ++k) s.tokens.push_back(r.u32());
    s.video = read_matrix("video");
    s.audio = read_matrix("audio");
    auto& part = i < n_train ? c.train : i < n_train + n_val ? c.val : c.test;
    part.push_back(std::move(s));
  }
  if (!r.at_end()) r.fail("trailing bytes after last sample");
  return c;
}

}  // namespace libs
