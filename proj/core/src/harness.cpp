#include "libs/harness.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "libs/binio.hpp"

namespace libs {

namespace {

constexpr std::uint64_t kInitSaltAudio = 0x41554449;  // "AUDI"
constexpr std::uint64_t kInitSaltVideo = 0x56494445;  // "VIDE"
constexpr std::uint64_t kShuffleSalt = 0x5348554600000000ULL;
constexpr std::uint64_t kSamplingSalt = 0x5353414d00000000ULL;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

std::vector<std::size_t> parse_sizes(const std::string& key,
                                     const std::string& value) {
  std::vector<std::size_t> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto first = item.find_first_not_of(' ');
    const auto last = item.find_last_not_of(' ');
    if (first == std::string::npos) {
      throw ConfigError("'" + key + "': empty list element in '" + value + "'");
    }
    out.push_back(parse_uint(key, item.substr(first, last - first + 1)));
  }
  return out;
}

std::string join_reals(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += format_real(v[i]);
  }
  return out;
}

std::vector<double> parse_reals(const std::string& key,
                                const std::string& value) {
  std::vector<double> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_real(key, item));
  }
  return out;
}

const std::set<std::string>& gen_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k;
    for (const auto& [key, value] : GenConfig{}.to_map()) k.insert(key);
    return k;
  }();
  return keys;
}

const Tensor& input_of(const PairedSample& s, Modality m) {
  return m == Modality::Audio ? s.audio : s.video;
}

std::size_t input_dim_of(const Corpus& c, Modality m) {
  return m == Modality::Audio ? c.config.audio_dim : c.config.video_dim;
}

std::string fmt(double v, int precision = 4) {
  if (std::isnan(v)) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

}  // namespace

const char* modality_name(Modality m) {
  return m == Modality::Audio ? "audio" : "video";
}

Modality parse_modality(const std::string& name) {
  if (name == "audio") return Modality::Audio;
  if (name == "video") return Modality::Video;
  throw ConfigError("unknown modality '" + name + "'");
}

const char* mode_name(StudentMode mode) {
  switch (mode) {
    case StudentMode::Baseline: return "baseline";
    case StudentMode::Kd1: return "kd1";
    case StudentMode::Kd2: return "kd2";
    case StudentMode::Kd3: return "kd3";
    case StudentMode::Kd1Kd2: return "kd1+kd2";
    case StudentMode::Full: return "full";
  }
  return "?";
}

StudentMode parse_mode(const std::string& name) {
  for (StudentMode m : all_modes()) {
    if (name == mode_name(m)) return m;
  }
  throw ConfigError("unknown mode '" + name +
                    "' (expected baseline, kd1, kd2, kd3, kd1+kd2, full)");
}

std::vector<StudentMode> all_modes() {
  return {StudentMode::Baseline, StudentMode::Kd1,    StudentMode::Kd2,
          StudentMode::Kd3,      StudentMode::Kd1Kd2, StudentMode::Full};
}

KDWeights mode_weights(StudentMode mode, const KDWeights& lambdas) {
  KDWeights w{0, 0, 0};
  switch (mode) {
    case StudentMode::Baseline: break;
    case StudentMode::Kd1: w.seq = lambdas.seq; break;
    case StudentMode::Kd2: w.ctx = lambdas.ctx; break;
    case StudentMode::Kd3: w.frame = lambdas.frame; break;
    case StudentMode::Kd1Kd2:
      w.seq = lambdas.seq;
      w.ctx = lambdas.ctx;
      break;
    case StudentMode::Full: w = lambdas; break;
  }
  return w;
}

// --- TrainConfig ------------------------------------------------------------

void TrainConfig::validate() const {
  if (enc_layers == 0 || enc_hidden == 0 || dec_hidden == 0 ||
      embed_dim == 0 || attention_dim == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  lambdas.validate();
  if (!(lr > 0)) throw ConfigError("lr must be > 0, got " + format_real(lr));
  if (!(lr_decay > 0 && lr_decay < 1)) {
    throw ConfigError("lr_decay must lie in (0, 1), got " + format_real(lr_decay));
  }
  if (lr_patience == 0) throw ConfigError("lr_patience must be >= 1");
  if (!(p_lo >= 0 && p_lo <= p_hi && p_hi <= 1)) {
    throw ConfigError("scheduled sampling needs 0 <= p_lo <= p_hi <= 1, got [" +
                      format_real(p_lo) + ", " + format_real(p_hi) + "]");
  }
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (stage_max_len.empty() || stage_max_len.size() != stage_epochs.size()) {
    throw ConfigError("stage_max_len and stage_epochs must be non-empty lists "
                      "of equal length");
  }
  if (beam_width == 0) throw ConfigError("beam_width must be >= 1");
  if (max_decode_len == 0) throw ConfigError("max_decode_len must be >= 1");
}

std::size_t TrainConfig::total_epochs() const {
  return std::accumulate(stage_epochs.begin(), stage_epochs.end(),
                         std::size_t{0});
}

std::size_t TrainConfig::thread_count() const {
  if (threads > 0) return threads;
  return std::max(1u, std::thread::hardware_concurrency());
}

ModelConfig TrainConfig::model_config(std::size_t input_dim,
                                      std::size_t vocab_size) const {
  ModelConfig m;
  m.input_dim = input_dim;
  m.vocab_size = vocab_size;
  m.enc_layers = enc_layers;
  m.enc_hidden = enc_hidden;
  m.dec_hidden = dec_hidden;
  m.embed_dim = embed_dim;
  m.attention_dim = attention_dim;
  m.attention = attention;
  return m;
}

std::map<std::string, std::string> TrainConfig::to_map() const {
  std::map<std::string, std::string> kv;
  kv["enc_layers"] = std::to_string(enc_layers);
  kv["enc_hidden"] = std::to_string(enc_hidden);
  kv["dec_hidden"] = std::to_string(dec_hidden);
  kv["embed_dim"] = std::to_string(embed_dim);
  kv["attention_dim"] = std::to_string(attention_dim);
  kv["attention"] = attention_kind_name(attention);
  kv["mode"] = mode_name(mode);
  kv["lambda_seq"] = format_real(lambdas.seq);
  kv["lambda_ctx"] = format_real(lambdas.ctx);
  kv["lambda_frame"] = format_real(lambdas.frame);
  kv["kd2_equiv"] = kd2_viseme_equiv ? "viseme" : "identity";
  kv["lr"] = format_real(lr);
  kv["lr_patience"] = std::to_string(lr_patience);
  kv["lr_decay"] = format_real(lr_decay);
  kv["clip_norm"] = format_real(clip_norm);
  kv["batch_size"] = std::to_string(batch_size);
  kv["p_lo"] = format_real(p_lo);
  kv["p_hi"] = format_real(p_hi);
  kv["stage_max_len"] = join_sizes(stage_max_len);
  kv["stage_epochs"] = join_sizes(stage_epochs);
  kv["stop_after"] = std::to_string(stop_after);
  kv["max_decode_len"] = std::to_string(max_decode_len);
  kv["beam_width"] = std::to_string(beam_width);
  kv["split"] = split_name(split);
  kv["sample_id"] = std::to_string(sample_id);
  kv["threads"] = std::to_string(threads);
  kv["seed"] = std::to_string(seed);
  kv["corpus"] = corpus.string();
  kv["teacher"] = teacher.string();
  kv["student"] = student.string();
  kv["checkpoint"] = checkpoint.string();
  kv["resume"] = resume.string();
  kv["report_dir"] = report_dir.string();
  kv["cache_dir"] = cache_dir.string();
  return kv;
}

TrainConfig TrainConfig::from_map(const std::map<std::string, std::string>& kv) {
  TrainConfig c;
  const auto known = c.to_map();
  for (const auto& [key, value] : kv) {
    if (!known.count(key) && !gen_keys().count(key)) {
      throw ConfigError("unknown configuration key '" + key + "'");
    }
  }
  auto get = [&](const char* key) -> const std::string* {
    auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };
  auto size = [&](const char* key, std::size_t& dst) {
    if (auto v = get(key)) dst = parse_uint(key, *v);
  };
  auto real = [&](const char* key, double& dst) {
    if (auto v = get(key)) dst = parse_real(key, *v);
  };
  auto path = [&](const char* key, std::filesystem::path& dst) {
    if (auto v = get(key)) dst = *v;
  };
  size("enc_layers", c.enc_layers);
  size("enc_hidden", c.enc_hidden);
  size("dec_hidden", c.dec_hidden);
  size("embed_dim", c.embed_dim);
  size("attention_dim", c.attention_dim);
  if (auto v = get("attention")) c.attention = parse_attention_kind(*v);
  if (auto v = get("mode")) c.mode = parse_mode(*v);
  real("lambda_seq", c.lambdas.seq);
  real("lambda_ctx", c.lambdas.ctx);
  real("lambda_frame", c.lambdas.frame);
  if (auto v = get("kd2_equiv")) {
    if (*v == "viseme") {
      c.kd2_viseme_equiv = true;
    } else if (*v == "identity") {
      c.kd2_viseme_equiv = false;
    } else {
      throw ConfigError("'kd2_equiv': expected identity or viseme, got '" +
                        *v + "'");
    }
  }
  real("lr", c.lr);
  size("lr_patience", c.lr_patience);
  real("lr_decay", c.lr_decay);
  real("clip_norm", c.clip_norm);
  size("batch_size", c.batch_size);
  real("p_lo", c.p_lo);
  real("p_hi", c.p_hi);
  if (auto v = get("stage_max_len")) c.stage_max_len = parse_sizes("stage_max_len", *v);
  if (auto v = get("stage_epochs")) c.stage_epochs = parse_sizes("stage_epochs", *v);
  size("stop_after", c.stop_after);
  size("max_decode_len", c.max_decode_len);
  size("beam_width", c.beam_width);
  if (auto v = get("split")) c.split = parse_split(*v);
  if (auto v = get("sample_id")) c.sample_id = parse_uint("sample_id", *v);
  size("threads", c.threads);
  if (auto v = get("seed")) c.seed = parse_uint("seed", *v);
  path("corpus", c.corpus);
  path("teacher", c.teacher);
  path("student", c.student);
  path("checkpoint", c.checkpoint);
  path("resume", c.resume);
  path("report_dir", c.report_dir);
  path("cache_dir", c.cache_dir);
  c.validate();
  return c;
}

std::map<std::string, std::string> load_config_map(
    const std::filesystem::path& path, std::span<const std::string> overrides,
    std::optional<std::uint64_t> seed) {
  std::map<std::string, std::string> kv;
  if (!path.empty()) {
    std::string text;
    try {
      text = read_text_file(path);
    } catch (const IoError& e) {
      throw ConfigError(e.what());
    }
    kv = parse_key_values(text, path.string());
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("--set expects key=value, got '" + o + "'");
    }
    auto parsed = parse_key_values(o, "--set");
    for (auto& [k, v] : parsed) kv[k] = v;
  }
  if (seed) kv["seed"] = std::to_string(*seed);
  return kv;
}

// --- evaluation ---------------------------------------------------------------

double EvalReport::cer() const {
  if (samples.empty()) return kNaN;
  CorpusErrorRate agg;
  for (const auto& s : samples) agg.add(s.cer);
  return agg.rate();
}

double EvalReport::wer() const {
  if (samples.empty()) return kNaN;
  CorpusErrorRate agg;
  for (const auto& s : samples) agg.add(s.wer);
  return agg.rate();
}

double EvalReport::bleu() const {
  if (samples.empty()) return kNaN;
  double sum = 0;
  for (const auto& s : samples) sum += s.bleu;
  return sum / static_cast<double>(samples.size());
}

std::string EvalReport::csv(const Vocab& vocab) const {
  std::ostringstream os;
  os << "id,reference,hypothesis,ref_len,substitutions,deletions,insertions,"
        "cer,wer,bleu\n";
  for (const auto& s : samples) {
    os << s.id << ',' << vocab.render(s.reference) << ','
       << vocab.render(s.hypothesis) << ',' << s.cer.ref_length << ','
       << s.cer.substitutions << ',' << s.cer.deletions << ','
       << s.cer.insertions << ',' << format_real(s.cer.rate()) << ','
       << format_real(s.wer.rate()) << ',' << format_real(s.bleu) << '\n';
  }
  return os.str();
}

std::string EvalReport::summary() const {
  std::ostringstream os;
  os << "split       " << split << '\n'
     << "beam width  " << beam_width << '\n'
     << "samples     " << samples.size() << '\n';
  if (samples.empty()) {
    os << "CER         n/a\nWER         n/a\nBLEU        n/a\n";
    return os.str();
  }
  std::size_t edits = 0, ref = 0;
  for (const auto& s : samples) {
    edits += s.cer.edits();
    ref += s.cer.ref_length;
  }
  os << "CER         " << fmt(100 * cer(), 2) << "%  (" << edits << " edits / "
     << ref << " tokens)\n"
     << "WER         " << fmt(100 * wer(), 2) << "%\n"
     << "BLEU        " << fmt(100 * bleu(), 2) << '\n';
  return os.str();
}

EvalReport evaluate(const Seq2Seq& model, std::span<const PairedSample> samples,
                    Modality input, std::size_t beam_width, std::size_t max_len,
                    std::size_t threads, const std::string& split_label) {
  if (beam_width == 0) throw ConfigError("beam width must be >= 1");
  EvalReport report;
  report.split = split_label;
  report.beam_width = beam_width;
  report.samples.resize(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    const PairedSample& s = samples[i];
    Hypothesis h = model.beam_search(input_of(s, input), beam_width, max_len);
    SampleResult r;
    r.id = s.id;
    r.reference = s.tokens;
    r.hypothesis = h.content();
    r.cer = edit_distance(std::span<const Symbol>(r.reference),
                          std::span<const Symbol>(r.hypothesis));
    // Word units are whole tokens here, so WER is the same alignment over
    // the same symbols.
    r.wer = r.cer;
    r.bleu = bleu_unigram(r.reference, r.hypothesis);
    report.samples[i] = std::move(r);
  });
  return report;
}

// --- checkpoint <-> model --------------------------------------------------

Modality checkpoint_input(const Checkpoint& ckpt) {
  try {
    return parse_modality(ckpt.meta_at("input"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
}

Seq2Seq model_from_checkpoint(const Checkpoint& ckpt) {
  TrainConfig cfg;
  std::size_t input_dim = 0, vocab = 0;
  try {
    cfg = TrainConfig::from_map([&] {
      std::map<std::string, std::string> kv;
      for (const char* key : {"enc_layers", "enc_hidden", "dec_hidden",
                              "embed_dim", "attention_dim", "attention"}) {
        kv[key] = ckpt.meta_at(key);
      }
      return kv;
    }());
    input_dim = parse_uint("input_dim", ckpt.meta_at("input_dim"));
    vocab = parse_uint("vocab_size", ckpt.meta_at("model_vocab_size"));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  Seq2Seq model(cfg.model_config(input_dim, vocab), 0);
  ckpt.load_store(model.params());
  return model;
}

// --- teacher artifacts --------------------------------------------------------

namespace {

constexpr std::string_view kArtifactMagic = "LIBSTART";

void round_all(TeacherArtifacts& a) {
  round_to_f32(a.enc_states);
  round_to_f32(a.sequence_vector);
  round_to_f32(a.contexts);
}

void write_matrix(BinaryWriter& w, const Tensor& t) {
  w.u32(static_cast<std::uint32_t>(t.rows()));
  w.u32(static_cast<std::uint32_t>(t.empty() ? 0 : t.cols()));
  for (Real v : t.data()) w.f32(static_cast<float>(v));
}

Tensor read_matrix(BinaryReader& r) {
  const std::uint32_t rows = r.u32();
  const std::uint32_t cols = r.u32();
  if (rows == 0 || cols == 0) return Tensor();
  std::vector<Real> data(static_cast<std::size_t>(rows) * cols);
  for (auto& v : data) v = r.f32();
  return Tensor::matrix(rows, cols, std::move(data));
}

std::map<std::uint64_t, TeacherArtifacts> read_artifact_cache(
    const std::filesystem::path& path) {
  std::map<std::uint64_t, TeacherArtifacts> out;
  BinaryReader r = BinaryReader::from_file(path);
  r.expect_magic(kArtifactMagic);
  const std::uint64_t n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    TeacherArtifacts a;
    a.sample_id = r.u64();
    a.enc_states = read_matrix(r);
    Tensor s = read_matrix(r);
    a.sequence_vector = Tensor::vector(std::move(s.storage()));
    a.contexts = read_matrix(r);
    const std::uint32_t len = r.u32();
    for (std::uint32_t k = 0; k < len; ++k) a.prediction.push_back(r.u32());
    out.emplace(a.sample_id, std::move(a));
  }
  if (!r.at_end()) r.fail("trailing bytes in artifact cache");
  return out;
}

void write_artifact_cache(const std::filesystem::path& path,
                          const std::map<std::uint64_t, TeacherArtifacts>& arts) {
  BinaryWriter w;
  w.raw(kArtifactMagic);
  w.u64(arts.size());
  for (const auto& [id, a] : arts) {
    w.u64(id);
    write_matrix(w, a.enc_states);
    write_matrix(w, Tensor::matrix(1, a.sequence_vector.size(),
                                   std::vector<Real>(a.sequence_vector.data().begin(),
                                                     a.sequence_vector.data().end())));
    write_matrix(w, a.contexts);
    w.u32(static_cast<std::uint32_t>(a.prediction.size()));
    for (TokenId t : a.prediction) w.u32(t);
  }
  w.write_file(path);
}

}  // namespace

std::vector<TeacherArtifacts> teacher_artifacts(const Checkpoint& teacher,
                                                const Corpus& corpus,
                                                const TrainConfig& cfg) {
  if (checkpoint_input(teacher) != Modality::Audio) {
    throw ConfigError("teacher checkpoint was not trained on audio");
  }
  const Seq2Seq model = model_from_checkpoint(teacher);
  if (model.config().input_dim != corpus.config.audio_dim) {
    throw ConfigError("teacher expects audio dim " +
                      std::to_string(model.config().input_dim) +
                      ", corpus has " + std::to_string(corpus.config.audio_dim));
  }

  std::map<std::uint64_t, TeacherArtifacts> cached;
  std::filesystem::path cache_file;
  if (!cfg.cache_dir.empty()) {
    cache_file = cfg.cache_dir /
                 ("teacher-" + digest(serialize_checkpoint(teacher)) + "-L" +
                  std::to_string(cfg.max_decode_len) + ".art");
    if (std::filesystem::exists(cache_file)) {
      cached = read_artifact_cache(cache_file);
    }
  }

  const auto& train = corpus.train;
  std::vector<TeacherArtifacts> out(train.size());
  std::vector<std::size_t> missing;
  for (std::size_t i = 0; i < train.size(); ++i) {
    auto it = cached.find(train[i].id);
    if (it != cached.end()) {
      out[i] = it->second;
    } else {
      missing.push_back(i);
    }
  }
  parallel_for(missing.size(), cfg.thread_count(), [&](std::size_t m) {
    const std::size_t i = missing[m];
    out[i] = compute_teacher_artifacts(model, train[i].audio,
                                       cfg.max_decode_len, train[i].id);
    round_all(out[i]);
  });
  if (!cache_file.empty() && !missing.empty()) {
    for (std::size_t i : missing) cached[train[i].id] = out[i];
    write_artifact_cache(cache_file, cached);
  }
  return out;
}

// --- training loop ---------------------------------------------------------------

namespace {

struct SampleLoss {
  Real base = 0, kd1 = 0, kd2 = 0, kd3 = 0, total = 0;
};

// Per-sample loss builder: fills the graph and returns the parts. Must only
// read the parameters.
using LossFn = std::function<LossBreakdown(Graph&, std::size_t index,
                                           double sampling_prob,
                                           std::uint64_t rng_seed)>;

struct TrainState {
  std::size_t epoch = 0;  // epochs completed
  double lr = 0;
  double plateau_best = std::numeric_limits<double>::infinity();
  std::size_t plateau_bad = 0;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::vector<double> val_history;
  std::vector<double> train_history;
};

std::vector<std::vector<std::size_t>> make_batches(
    const std::vector<std::size_t>& pool,
    const std::vector<PairedSample>& samples, std::size_t batch_size,
    std::uint64_t seed) {
  // Equal-length buckets, shuffled within, chunked, then batch order shuffled.
  std::map<std::size_t, std::vector<std::size_t>> buckets;
  for (std::size_t i : pool) buckets[samples[i].tokens.size()].push_back(i);
  std::mt19937_64 rng(seed);
  auto shuffle = [&](auto& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(
          uniform01(rng) * static_cast<double>(i));
      std::swap(v[i - 1], v[std::min(j, i - 1)]);
    }
  };
  std::vector<std::vector<std::size_t>> batches;
  for (auto& [len, ids] : buckets) {
    shuffle(ids);
    for (std::size_t b = 0; b < ids.size(); b += batch_size) {
      batches.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(b),
                           ids.begin() + static_cast<std::ptrdiff_t>(
                                             std::min(ids.size(), b + batch_size)));
    }
  }
  shuffle(batches);
  return batches;
}

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const Corpus& corpus, Modality input,
          Seq2Seq& model, DistillHead* head, LossFn loss)
      : cfg_(cfg),
        corpus_(corpus),
        input_(input),
        model_(model),
        head_(head),
        loss_(std::move(loss)) {
    AdamOptions opts;
    opts.learning_rate = cfg.lr;
    opts.clip_norm = cfg.clip_norm;
    stores_.push_back(&model_.params());
    if (head_) stores_.push_back(&head_->params());
    for (auto* s : stores_) {
      adams_.emplace_back(*s, opts);
      grads_.emplace_back(*s);
      best_.emplace_back();
      for (std::size_t i = 0; i < s->size(); ++i) best_.back().push_back((*s)[i].value);
    }
    state_.lr = cfg.lr;
  }

  void restore(const Checkpoint& ckpt) {
    try {
      state_.epoch = parse_uint("epoch", ckpt.meta_at("epoch"));
      state_.lr = parse_real("lr", ckpt.meta_at("lr"));
      state_.plateau_best = parse_real("plateau_best", ckpt.meta_at("plateau_best"));
      state_.plateau_bad = parse_uint("plateau_bad", ckpt.meta_at("plateau_bad"));
      state_.best_val = parse_real("best_val_cer", ckpt.meta_at("best_val_cer"));
      state_.best_epoch = parse_uint("best_epoch", ckpt.meta_at("best_epoch"));
      state_.val_history = parse_reals("val_history", ckpt.meta_at("val_history"));
      state_.train_history =
          parse_reals("train_history", ckpt.meta_at("train_history"));
      const std::uint64_t steps = parse_uint("adam_steps", ckpt.meta_at("adam_steps"));
      for (std::size_t k = 0; k < stores_.size(); ++k) {
        ParameterStore& s = *stores_[k];
        ckpt.load_store(s);
        for (std::size_t i = 0; i < s.size(); ++i) best_[k][i] = s[i].value;
        ckpt.load_store(s, "resume/");
        load_moments(ckpt, s, adams_[k].first_moments(), "adam.m/");
        load_moments(ckpt, s, adams_[k].second_moments(), "adam.v/");
        adams_[k].set_steps(steps);
        adams_[k].set_learning_rate(state_.lr);
      }
    } catch (const ConfigError& e) {
      throw FormatError(std::string("resume checkpoint: ") + e.what());
    }
  }

  std::vector<EpochLog> run(const TrainHooks& hooks) {
    const auto& train = corpus_.train;
    const std::size_t total = cfg_.total_epochs();
    const std::size_t end =
        cfg_.stop_after ? std::min(total, cfg_.stop_after) : total;
    const std::size_t threads = cfg_.thread_count();
    std::vector<EpochLog> log;
    std::vector<std::uint64_t> batch_ids;
    std::vector<std::size_t> batch_lens;

    for (std::size_t e = state_.epoch; e < end; ++e) {
      std::size_t stage = 0, stage_start = 0;
      while (e >= stage_start + cfg_.stage_epochs[stage]) {
        stage_start += cfg_.stage_epochs[stage];
        ++stage;
      }
      const std::size_t in_stage = e - stage_start;
      const std::size_t bound = cfg_.stage_max_len[stage];
      if (in_stage == 0) {
        // A new stage changes the sentence mix; the plateau reference restarts.
        state_.plateau_best = std::numeric_limits<double>::infinity();
        state_.plateau_bad = 0;
      }

      std::vector<std::size_t> pool;
      for (std::size_t i = 0; i < train.size(); ++i) {
        if (train[i].tokens.size() <= bound) pool.push_back(i);
      }
      const auto batches = make_batches(pool, train, cfg_.batch_size,
                                        mix_seed(cfg_.seed, kShuffleSalt + e));
      const std::size_t nb = batches.size();
      const std::size_t stage_steps = nb * cfg_.stage_epochs[stage];

      EpochLog entry;
      entry.epoch = e + 1;
      entry.stage = stage + 1;
      entry.stage_max_len = bound;
      entry.samples = pool.size();
      entry.lr = state_.lr;
      entry.p_end = cfg_.p_hi;
      SampleLoss sums;

      for (std::size_t b = 0; b < nb; ++b) {
        const std::size_t pos = in_stage * nb + b;
        const double t = stage_steps > 1
                             ? static_cast<double>(pos) /
                                   static_cast<double>(stage_steps - 1)
                             : 0.0;
        const double p = cfg_.p_hi - (cfg_.p_hi - cfg_.p_lo) * t;
        entry.p_end = p;
        const auto& batch = batches[b];
        std::vector<std::vector<GradientBuffer>> per_sample(batch.size());
        std::vector<SampleLoss> losses(batch.size());
        parallel_for(batch.size(), threads, [&](std::size_t k) {
          const std::size_t idx = batch[k];
          Graph g;
          const std::uint64_t ss_seed =
              mix_seed(cfg_.seed, kSamplingSalt + (static_cast<std::uint64_t>(e) << 32) +
                                      train[idx].id);
          LossBreakdown parts = loss_(g, idx, p, ss_seed);
          g.backward(parts.total);
          SampleLoss& l = losses[k];
          l.base = LossBreakdown::value_of(parts.base);
          l.kd1 = LossBreakdown::value_of(parts.kd1);
          l.kd2 = LossBreakdown::value_of(parts.kd2);
          l.kd3 = LossBreakdown::value_of(parts.kd3);
          l.total = LossBreakdown::value_of(parts.total);
          for (auto* s : stores_) {
            per_sample[k].emplace_back(*s);
            per_sample[k].back().accumulate(g, *s);
          }
        });
        Real sq = 0;
        for (std::size_t si = 0; si < stores_.size(); ++si) {
          grads_[si].zero();
          for (std::size_t k = 0; k < batch.size(); ++k) {
            GradientBuffer& src = per_sample[k][si];
            for (std::size_t pi = 0; pi < src.size(); ++pi) {
              auto dst = grads_[si][pi].data();
              auto add = src[pi].data();
              for (std::size_t x = 0; x < dst.size(); ++x) dst[x] += add[x];
            }
          }
          grads_[si].scale(Real{1} / static_cast<Real>(batch.size()));
          sq += grad_sq_norm(grads_[si]);
        }
        const Real factor = clip_scale(sq, cfg_.clip_norm);
        for (std::size_t si = 0; si < stores_.size(); ++si) {
          adams_[si].step_scaled(*stores_[si], grads_[si], factor);
        }
        for (const auto& l : losses) {
          sums.base += l.base;
          sums.kd1 += l.kd1;
          sums.kd2 += l.kd2;
          sums.kd3 += l.kd3;
          sums.total += l.total;
        }
        ++entry.steps;
        if (hooks.on_step) {
          batch_ids.clear();
          batch_lens.clear();
          for (std::size_t idx : batch) {
            batch_ids.push_back(train[idx].id);
            batch_lens.push_back(train[idx].tokens.size());
          }
          StepInfo info;
          info.epoch = e;
          info.step = adams_[0].steps();
          info.stage_max_len = bound;
          info.sampling_prob = p;
          info.lr = state_.lr;
          info.sample_ids = batch_ids;
          info.lengths = batch_lens;
          info.model = &model_.params();
          hooks.on_step(info);
        }
      }

      if (!pool.empty()) {
        const double n = static_cast<double>(pool.size());
        entry.base = sums.base / n;
        entry.kd1 = sums.kd1 / n;
        entry.kd2 = sums.kd2 / n;
        entry.kd3 = sums.kd3 / n;
        entry.total = sums.total / n;
        state_.train_history.push_back(entry.base);
        if (entry.base < state_.plateau_best) {
          state_.plateau_best = entry.base;
          state_.plateau_bad = 0;
        } else if (++state_.plateau_bad >= cfg_.lr_patience) {
          state_.lr *= cfg_.lr_decay;
          state_.plateau_bad = 0;
          for (auto& a : adams_) a.set_learning_rate(state_.lr);
        }
      } else {
        state_.train_history.push_back(kNaN);
      }

      entry.val_cer = kNaN;
      if (!corpus_.val.empty()) {
        entry.val_cer = evaluate(model_, corpus_.val, input_, 1,
                                 cfg_.max_decode_len, threads)
                            .cer();
      }
      state_.val_history.push_back(entry.val_cer);
      if (corpus_.val.empty() || entry.val_cer < state_.best_val) {
        if (!corpus_.val.empty()) state_.best_val = entry.val_cer;
        state_.best_epoch = e + 1;
        for (std::size_t k = 0; k < stores_.size(); ++k) {
          for (std::size_t i = 0; i < stores_[k]->size(); ++i) {
            best_[k][i] = (*stores_[k])[i].value;
          }
        }
      }
      state_.epoch = e + 1;
      log.push_back(entry);
      if (hooks.on_epoch) hooks.on_epoch(entry);
    }
    return log;
  }

  Checkpoint checkpoint(const std::map<std::string, std::string>& extra) const {
    Checkpoint ckpt;
    ckpt.meta = cfg_.to_map();
    for (const auto& [k, v] : extra) ckpt.meta[k] = v;
    ckpt.meta["input"] = modality_name(input_);
    ckpt.meta["input_dim"] = std::to_string(model_.config().input_dim);
    ckpt.meta["model_vocab_size"] = std::to_string(model_.config().vocab_size);
    ckpt.meta["epoch"] = std::to_string(state_.epoch);
    ckpt.meta["lr"] = format_real(state_.lr);
    ckpt.meta["plateau_best"] = format_real(state_.plateau_best);
    ckpt.meta["plateau_bad"] = std::to_string(state_.plateau_bad);
    ckpt.meta["best_val_cer"] = format_real(state_.best_val);
    ckpt.meta["best_epoch"] = std::to_string(state_.best_epoch);
    ckpt.meta["val_history"] = join_reals(state_.val_history);
    ckpt.meta["train_history"] = join_reals(state_.train_history);
    ckpt.meta["adam_steps"] = std::to_string(adams_[0].steps());
    for (std::size_t k = 0; k < stores_.size(); ++k) {
      const ParameterStore& s = *stores_[k];
      for (std::size_t i = 0; i < s.size(); ++i) ckpt.put(s[i].name, best_[k][i]);
    }
    for (std::size_t k = 0; k < stores_.size(); ++k) {
      const ParameterStore& s = *stores_[k];
      ckpt.put_store(s, "resume/");
      for (std::size_t i = 0; i < s.size(); ++i) {
        ckpt.put("adam.m/" + s[i].name, adams_[k].first_moments()[i]);
        ckpt.put("adam.v/" + s[i].name, adams_[k].second_moments()[i]);
      }
    }
    return ckpt;
  }

 private:
  static void load_moments(const Checkpoint& ckpt, const ParameterStore& s,
                           std::vector<Tensor>& dst, const std::string& prefix) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      const Tensor* t = ckpt.find(prefix + s[i].name);
      if (!t || t->shape() != s[i].value.shape()) {
        throw FormatError("resume checkpoint lacks optimiser state '" + prefix +
                          s[i].name + "'");
      }
      dst[i] = *t;
    }
  }

  const TrainConfig& cfg_;
  const Corpus& corpus_;
  Modality input_;
  Seq2Seq& model_;
  DistillHead* head_;
  LossFn loss_;
  std::vector<ParameterStore*> stores_;
  std::vector<Adam> adams_;
  std::vector<GradientBuffer> grads_;
  std::vector<std::vector<Tensor>> best_;
  TrainState state_;
};

void check_corpus(const Corpus& corpus) {
  if (corpus.train.empty()) throw ConfigError("training split is empty");
}

}  // namespace

TrainResult train_recognizer(const TrainConfig& cfg, const Corpus& corpus,
                             Modality input, const TrainHooks& hooks,
                             const Checkpoint* resume) {
  cfg.validate();
  check_corpus(corpus);
  Seq2Seq model(cfg.model_config(input_dim_of(corpus, input),
                                 corpus.model_vocab_size()),
                mix_seed(cfg.seed, input == Modality::Audio ? kInitSaltAudio
                                                            : kInitSaltVideo));
  std::vector<std::vector<TokenId>> targets;
  for (const auto& s : corpus.train) targets.push_back(with_boundaries(s.tokens));

  LossFn loss = [&](Graph& g, std::size_t idx, double p, std::uint64_t seed) {
    EncoderOutput enc = model.encode(g, input_of(corpus.train[idx], input));
    TeacherForcedResult tf = model.decode_teacher_forced(g, enc, targets[idx], p, seed);
    LossBreakdown parts;
    parts.base = tf.base_loss;
    parts.total = tf.base_loss;
    return parts;
  };
  Trainer trainer(cfg, corpus, input, model, nullptr, std::move(loss));
  if (resume) trainer.restore(*resume);
  TrainResult result;
  result.log = trainer.run(hooks);
  result.checkpoint = trainer.checkpoint(
      {{"role", input == Modality::Audio ? "teacher" : "recognizer"}});
  return result;
}

TrainResult train_student(const TrainConfig& cfg, const Corpus& corpus,
                          const Checkpoint& teacher, const TrainHooks& hooks,
                          const Checkpoint* resume) {
  const KDWeights w = mode_weights(cfg.mode, cfg.lambdas);
  std::vector<TeacherArtifacts> arts;
  if (w.seq > 0 || w.ctx > 0 || w.frame > 0) {
    arts = teacher_artifacts(teacher, corpus, cfg);
  }
  return train_student(cfg, corpus, teacher, arts, hooks, resume);
}

TrainResult train_student(const TrainConfig& cfg, const Corpus& corpus,
                          const Checkpoint& teacher,
                          std::span<const TeacherArtifacts> artifacts,
                          const TrainHooks& hooks, const Checkpoint* resume) {
  cfg.validate();
  check_corpus(corpus);
  const KDWeights w = mode_weights(cfg.mode, cfg.lambdas);
  const bool any_kd = w.seq > 0 || w.ctx > 0 || w.frame > 0;

  Seq2Seq student(cfg.model_config(corpus.config.video_dim,
                                   corpus.model_vocab_size()),
                  mix_seed(cfg.seed, kInitSaltVideo));
  std::size_t teacher_dim = student.enc_dim();
  if (any_kd) {
    if (checkpoint_input(teacher) != Modality::Audio) {
      throw ConfigError("teacher checkpoint was not trained on audio");
    }
    teacher_dim = 2 * parse_uint("enc_hidden", teacher.meta_at("enc_hidden"));
    if (artifacts.size() != corpus.train.size()) {
      throw ContractError("teacher artifacts do not match the training split");
    }
  }
  if (w.frame > 0 && teacher_dim != student.enc_dim()) {
    throw ConfigError("frame-level distillation needs equal teacher and student "
                      "encoder widths (" + std::to_string(teacher_dim) + " vs " +
                      std::to_string(student.enc_dim()) + ")");
  }
  DistillHead head(student.enc_dim(), teacher_dim);
  const EquivRelation equiv = cfg.kd2_viseme_equiv
                                  ? corpus.viseme_equiv()
                                  : EquivRelation::identity(corpus.model_vocab_size());
  std::vector<std::vector<TokenId>> targets;
  std::vector<LcsMatch> matches;
  for (std::size_t i = 0; i < corpus.train.size(); ++i) {
    targets.push_back(with_boundaries(corpus.train[i].tokens));
    if (w.ctx > 0) {
      matches.push_back(lcs_match(artifacts[i].prediction,
                                  corpus.train[i].tokens, equiv));
    }
  }

  LossFn loss = [&](Graph& g, std::size_t idx, double p, std::uint64_t seed) {
    EncoderOutput enc = student.encode(g, corpus.train[idx].video);
    TeacherForcedResult tf =
        student.decode_teacher_forced(g, enc, targets[idx], p, seed);
    LossBreakdown parts;
    parts.base = tf.base_loss;
    if (w.seq > 0) {
      parts.kd1 = loss_kd1(g, artifacts[idx].sequence_vector,
                           enc.sequence_vector, head.t_seq());
    }
    if (w.ctx > 0) {
      parts.kd2 = loss_kd2(g, artifacts[idx].contexts, tf.trace.context,
                           matches[idx], head.t_ctx());
    }
    if (w.frame > 0) {
      FrameAlignment al = align_frames(g, artifacts[idx].enc_states,
                                       enc.hidden_states, head.w_align());
      parts.kd3 = loss_kd3(g, artifacts[idx].enc_states, al.aligned);
    }
    return total_loss(parts, w);
  };

  Trainer trainer(cfg, corpus, Modality::Video, student, &head, std::move(loss));
  if (resume) trainer.restore(*resume);
  TrainResult result;
  result.log = trainer.run(hooks);
  std::map<std::string, std::string> extra{{"role", "student"}};
  if (any_kd) extra["teacher_digest"] = digest(serialize_checkpoint(teacher));
  result.checkpoint = trainer.checkpoint(extra);
  return result;
}

// --- ablation -------------------------------------------------------------------

std::vector<AblationRow> ablate(const TrainConfig& cfg, const Corpus& corpus,
                                const Checkpoint& teacher,
                                std::span<const TeacherArtifacts> artifacts) {
  std::vector<AblationRow> rows;
  for (StudentMode mode : all_modes()) {
    TrainConfig c = cfg;
    c.mode = mode;
    TrainResult r = train_student(c, corpus, teacher, artifacts);
    const Seq2Seq model = model_from_checkpoint(r.checkpoint);
    const EvalReport rep =
        evaluate(model, corpus.split(cfg.split), Modality::Video,
                 cfg.beam_width, cfg.max_decode_len, cfg.thread_count(),
                 split_name(cfg.split));
    AblationRow row;
    row.mode = mode;
    row.cer = rep.cer();
    row.wer = rep.wer();
    row.bleu = rep.bleu();
    row.val_cer = parse_real("best_val_cer", r.checkpoint.meta_at("best_val_cer"));
    rows.push_back(row);
  }
  return rows;
}

std::string ablation_csv(std::span<const AblationRow> rows) {
  std::ostringstream os;
  os << "mode,cer,wer,bleu,best_val_cer\n";
  for (const auto& r : rows) {
    os << mode_name(r.mode) << ',' << format_real(r.cer) << ','
       << format_real(r.wer) << ',' << format_real(r.bleu) << ','
       << format_real(r.val_cer) << '\n';
  }
  return os.str();
}

std::string ablation_summary(std::span<const AblationRow> rows) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "mode" << std::right << std::setw(9)
     << "CER(%)" << std::setw(9) << "BLEU" << '\n';
  for (const auto& r : rows) {
    os << std::left << std::setw(10) << mode_name(r.mode) << std::right
       << std::setw(9) << fmt(100 * r.cer, 2) << std::setw(9)
       << fmt(100 * r.bleu, 2) << '\n';
  }
  return os.str();
}

// --- attention export -------------------------------------------------------

double diagonal_mass(const Tensor& alpha, double band_tokens) {
  if (alpha.empty()) return kNaN;
  const std::size_t steps = alpha.rows();
  const std::size_t frames = alpha.cols();
  const double per_token =
      static_cast<double>(frames) / static_cast<double>(steps);
  double inside = 0, total = 0;
  for (std::size_t k = 0; k < steps; ++k) {
    const double centre = (static_cast<double>(k) + 0.5) * per_token;
    for (std::size_t j = 0; j < frames; ++j) {
      const double a = alpha.at(k, j);
      total += a;
      if (std::abs(static_cast<double>(j) + 0.5 - centre) <=
          band_tokens * per_token) {
        inside += a;
      }
    }
  }
  return total > 0 ? inside / total : kNaN;
}

std::string matrix_csv(const Tensor& m, const std::string& row_label,
                       const std::string& col_label) {
  std::ostringstream os;
  os << row_label;
  for (std::size_t c = 0; c < m.cols(); ++c) os << ',' << col_label << c;
  os << '\n';
  for (std::size_t r = 0; r < m.rows(); ++r) {
    os << r;
    for (std::size_t c = 0; c < m.cols(); ++c) os << ',' << format_real(m.at(r, c));
    os << '\n';
  }
  return os.str();
}

AttentionExport export_attention(const Checkpoint& ckpt, const Corpus& corpus,
                                 std::uint64_t sample_id, std::size_t max_len,
                                 const Checkpoint* teacher) {
  const PairedSample* s = corpus.find(sample_id);
  if (!s) {
    throw LookupError("no sample with id " + std::to_string(sample_id) +
                      " in the corpus");
  }
  const Modality input = checkpoint_input(ckpt);
  const Seq2Seq model = model_from_checkpoint(ckpt);
  const Tensor& frames = input_of(*s, input);

  AttentionExport out;
  out.sample_id = sample_id;
  Graph g(false);
  EncoderOutput enc = model.encode(g, frames);
  FreeRunResult run = model.decode_greedy(g, enc, max_len);
  out.tokens = run.trace.argmax;
  const std::size_t steps = run.trace.alpha.size();
  std::vector<Real> data;
  data.reserve(steps * frames.rows());
  for (const Var& a : run.trace.alpha) {
    data.insert(data.end(), a.value().data().begin(), a.value().data().end());
  }
  out.alpha = Tensor::matrix(steps, frames.rows(), std::move(data));
  out.diagonal_mass = diagonal_mass(out.alpha);

  if (input == Modality::Video && teacher && ckpt.find("distill.w_align")) {
    const Seq2Seq t = model_from_checkpoint(*teacher);
    Graph tg(false);
    const Tensor h_a = t.encode(tg, s->audio).hidden_states.value();
    Parameter w_align{"distill.w_align", *ckpt.find("distill.w_align")};
    if (w_align.value.shape() != Shape{model.enc_dim(), t.enc_dim()}) {
      throw FormatError("alignment matrix shape " +
                        shape_str(w_align.value.shape()) +
                        " does not match student/teacher encoders");
    }
    FrameAlignment al = align_frames(g, h_a, enc.hidden_states, w_align);
    out.beta = al.beta.value();
  }
  return out;
}

std::string train_log_csv(std::span<const EpochLog> log) {
  std::ostringstream os;
  os << "epoch,stage,stage_max_len,samples,steps,lr,p_end,base,kd1,kd2,kd3,"
        "total,val_cer\n";
  for (const auto& e : log) {
    os << e.epoch << ',' << e.stage << ',' << e.stage_max_len << ','
       << e.samples << ',' << e.steps << ',' << format_real(e.lr) << ','
       << format_real(e.p_end) << ',' << format_real(e.base) << ','
       << format_real(e.kd1) << ',' << format_real(e.kd2) << ','
       << format_real(e.kd3) << ',' << format_real(e.total) << ','
       << format_real(e.val_cer) << '\n';
  }
  return os.str();
}

}  // namespace libs
