#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "libs/binio.hpp"
#include "libs/harness.hpp"

using namespace libs;

namespace {

Corpus tiny_corpus(std::size_t train = 12, std::uint64_t seed = 3) {
  GenConfig g;
  g.vocab_size = 6;
  g.viseme_classes = 3;
  g.video_dim = 4;
  g.audio_dim = 4;
  g.video_rate = 1;
  g.audio_rate = 2;
  g.max_blank = 1;
  g.min_len = 2;
  g.max_len = 4;
  g.train_size = train;
  g.val_size = 4;
  g.test_size = 4;
  g.seed = seed;
  return gen_corpus(g);
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.enc_hidden = 2;
  c.dec_hidden = 4;
  c.embed_dim = 3;
  c.attention_dim = 3;
  c.lambdas = {0.5, 1.0, 0.5};
  c.lr = 5e-3;
  c.batch_size = 4;
  c.stage_max_len = {3, 4};
  c.stage_epochs = {1, 2};
  c.max_decode_len = 6;
  c.threads = 1;
  c.cache_dir.clear();
  return c;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "libs_test_harness" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

const Checkpoint& tiny_teacher() {
  static const Checkpoint teacher = [] {
    TrainConfig c = tiny_config();
    c.stage_epochs = {1, 1};
    return train_teacher(c, tiny_corpus()).checkpoint;
  }();
  return teacher;
}

}  // namespace

TEST_CASE("config map round trip and validation") {
  TrainConfig c = tiny_config();
  c.mode = StudentMode::Kd1Kd2;
  c.kd2_viseme_equiv = true;
  c.split = Split::Val;
  TrainConfig back = TrainConfig::from_map(c.to_map());
  CHECK(back.to_map() == c.to_map());
  CHECK(back.mode == StudentMode::Kd1Kd2);

  auto kv = c.to_map();
  kv["vocab_size"] = "12";  // generator key, ignored here
  CHECK_NOTHROW(TrainConfig::from_map(kv));
  kv["no_such_key"] = "1";
  CHECK_THROWS_AS(TrainConfig::from_map(kv), ConfigError);

  auto bad = [](const char* key, const char* value) {
    auto m = TrainConfig{}.to_map();
    m[key] = value;
    return m;
  };
  CHECK_THROWS_AS(TrainConfig::from_map(bad("lr", "0")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_map(bad("lr_decay", "1")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_map(bad("p_lo", "-0.1")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_map(bad("p_hi", "1.5")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_map(bad("stage_epochs", "1,2")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_map(bad("mode", "kd4")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_map(bad("lambda_ctx", "-1")), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_map(bad("beam_width", "0")), ConfigError);
  CHECK(TrainConfig{}.total_epochs() == 8);
}

TEST_CASE("config files, overrides and seed") {
  auto dir = temp_dir("config");
  write_text_file(dir / "a.conf", "# base\nlr = 0.01\nbatch_size = 8\n");
  std::vector<std::string> sets{"batch_size=2", "mode = kd2"};
  auto kv = load_config_map(dir / "a.conf", sets, 9);
  TrainConfig c = TrainConfig::from_map(kv);
  CHECK(c.lr == 0.01);
  CHECK(c.batch_size == 2);
  CHECK(c.mode == StudentMode::Kd2);
  CHECK(c.seed == 9);
  CHECK_THROWS_AS(load_config_map(dir / "missing.conf", {}, {}), ConfigError);
  std::vector<std::string> broken{"novalue"};
  CHECK_THROWS_AS(load_config_map("", broken, {}), ConfigError);
}

TEST_CASE("mode masks") {
  KDWeights l{1, 2, 3};
  auto w = mode_weights(StudentMode::Baseline, l);
  CHECK((w.seq == 0 && w.ctx == 0 && w.frame == 0));
  w = mode_weights(StudentMode::Kd2, l);
  CHECK((w.seq == 0 && w.ctx == 2 && w.frame == 0));
  w = mode_weights(StudentMode::Kd1Kd2, l);
  CHECK((w.seq == 1 && w.ctx == 2 && w.frame == 0));
  w = mode_weights(StudentMode::Full, l);
  CHECK((w.seq == 1 && w.ctx == 2 && w.frame == 3));
  CHECK(all_modes().size() == 6);
  CHECK(parse_mode("kd1+kd2") == StudentMode::Kd1Kd2);
}

TEST_CASE("one epoch on ten samples") {
  Corpus c = tiny_corpus(10);
  TrainConfig cfg = tiny_config();
  cfg.stage_max_len = {8};
  cfg.stage_epochs = {1};
  TrainResult r = train_teacher(cfg, c);
  REQUIRE(r.log.size() == 1);
  CHECK(std::isfinite(r.log[0].base));
  CHECK(r.log[0].samples == 10);
  CHECK(checkpoint_input(r.checkpoint) == Modality::Audio);
  CHECK(r.checkpoint.meta_at("epoch") == "1");
  const Seq2Seq m = model_from_checkpoint(r.checkpoint);
  CHECK(m.config().input_dim == 4);
  CHECK(m.config().vocab_size == 9);

  Corpus empty = c;
  empty.train.clear();
  CHECK_THROWS_AS(train_teacher(cfg, empty), ConfigError);
}

TEST_CASE("resuming reproduces an uninterrupted run bit-exactly") {
  Corpus c = tiny_corpus();
  TrainConfig cfg = tiny_config();
  cfg.mode = StudentMode::Full;
  const Checkpoint& teacher = tiny_teacher();
  const auto arts = teacher_artifacts(teacher, c, cfg);

  TrainResult whole = train_student(cfg, c, teacher, arts);
  TrainConfig first = cfg;
  first.stop_after = 1;
  TrainResult part = train_student(first, c, teacher, arts);
  CHECK(part.log.size() == 1);
  const Checkpoint saved = parse_checkpoint(serialize_checkpoint(part.checkpoint), "mem");
  TrainResult rest = train_student(cfg, c, teacher, arts, {}, &saved);
  CHECK(rest.log.size() == 2);
  CHECK(serialize_checkpoint(rest.checkpoint) == serialize_checkpoint(whole.checkpoint));
  REQUIRE(whole.log.size() == 3);
  CHECK(rest.log[1].total == whole.log[2].total);

  Checkpoint stripped = saved;
  std::erase_if(stripped.tensors, [](const NamedTensor& t) { return t.name.starts_with("adam.m/"); });
  CHECK_THROWS_AS(train_student(cfg, c, teacher, arts, {}, &stripped), FormatError);
}

TEST_CASE("thread count does not change training") {
  Corpus c = tiny_corpus();
  TrainConfig one = tiny_config();
  TrainConfig three = one;
  three.threads = 3;
  const Checkpoint& teacher = tiny_teacher();
  Checkpoint a = train_student(one, c, teacher).checkpoint;
  Checkpoint b = train_student(three, c, teacher).checkpoint;
  CHECK(a.tensors == b.tensors);
  a.meta.erase("threads");
  b.meta.erase("threads");
  CHECK(a.meta == b.meta);
}

TEST_CASE("baseline reports zero distillation terms") {
  Corpus c = tiny_corpus();
  TrainConfig cfg = tiny_config();
  cfg.mode = StudentMode::Baseline;
  TrainResult r = train_student(cfg, c, tiny_teacher());
  for (const auto& e : r.log) {
    CHECK(e.kd1 == 0);
    CHECK(e.kd2 == 0);
    CHECK(e.kd3 == 0);
    CHECK(e.total == e.base);
  }
  cfg.mode = StudentMode::Full;
  TrainResult f = train_student(cfg, c, tiny_teacher());
  CHECK(f.log[0].kd1 > 0);
  CHECK(f.log[0].kd3 > 0);
}

TEST_CASE("student errors") {
  Corpus c = tiny_corpus();
  TrainConfig cfg = tiny_config();
  cfg.enc_hidden = 3;
  CHECK_THROWS_AS(train_student(cfg, c, tiny_teacher()), ConfigError);
  cfg.mode = StudentMode::Kd1Kd2;
  CHECK_NOTHROW(train_student(cfg, c, tiny_teacher()));
  TrainConfig v = tiny_config();
  v.stage_epochs = {1, 0};
  Checkpoint video = train_recognizer(v, c, Modality::Video).checkpoint;
  CHECK_THROWS_AS(train_student(tiny_config(), c, video), ConfigError);
}

TEST_CASE("curriculum bounds and sampling schedule") {
  Corpus c = tiny_corpus(24);
  TrainConfig cfg = tiny_config();
  cfg.stage_max_len = {2, 3, 4};
  cfg.stage_epochs = {1, 2, 1};
  std::size_t steps = 0;
  double last_p = 2;
  std::size_t last_bound = 0;
  TrainHooks hooks;
  hooks.on_step = [&](const StepInfo& s) {
    ++steps;
    for (std::size_t len : s.lengths) CHECK(len <= s.stage_max_len);
    for (std::size_t len : s.lengths) CHECK(len == s.lengths[0]);
    CHECK(s.sampling_prob >= cfg.p_lo);
    CHECK(s.sampling_prob <= cfg.p_hi);
    if (s.stage_max_len != last_bound) {
      CHECK(s.sampling_prob == cfg.p_hi);
      last_bound = s.stage_max_len;
    } else {
      CHECK(s.sampling_prob <= last_p);
    }
    last_p = s.sampling_prob;
    CHECK(s.sample_ids.size() <= cfg.batch_size);
  };
  TrainResult r = train_teacher(cfg, c, hooks);
  CHECK(steps > 0);
  REQUIRE(r.log.size() == 4);
  CHECK(r.log[0].stage_max_len == 2);
  CHECK(r.log[2].stage == 2);
  CHECK(r.log[2].p_end == doctest::Approx(cfg.p_lo));
  for (const auto& e : r.log) {
    std::size_t eligible = 0;
    for (const auto& s : c.train) eligible += s.tokens.size() <= e.stage_max_len;
    CHECK(e.samples == eligible);
  }
}

TEST_CASE("learning rate halves exactly on a plateau") {
  // One sample, full teacher forcing and an lr whose updates round to zero
  // in f32: the training error repeats exactly every epoch.
  Corpus c = tiny_corpus(1);
  TrainConfig cfg = tiny_config();
  cfg.lr = 1e-50;
  cfg.p_lo = cfg.p_hi = 1;
  cfg.stage_max_len = {8};
  cfg.stage_epochs = {4};
  TrainResult r = train_teacher(cfg, c);
  REQUIRE(r.log.size() == 4);
  CHECK(r.log[1].base == r.log[0].base);
  CHECK(r.log[0].lr == 1e-50);
  CHECK(r.log[1].lr == 1e-50);
  CHECK(r.log[2].lr == 0.5e-50);
  CHECK(r.log[3].lr == 0.25e-50);
  CHECK(parse_real("lr", r.checkpoint.meta_at("lr")) == 0.125e-50);

  TrainConfig normal = tiny_config();
  normal.lr = 0.05;
  normal.stage_epochs = {2, 4};
  TrainResult n = train_teacher(normal, tiny_corpus());
  for (std::size_t i = 1; i < n.log.size(); ++i) {
    const double prev = n.log[i - 1].lr, cur = n.log[i].lr;
    CHECK((cur == prev || cur == prev * normal.lr_decay));
  }
}

TEST_CASE("evaluation reports") {
  Corpus c = tiny_corpus();
  const Seq2Seq teacher = model_from_checkpoint(tiny_teacher());
  EvalReport empty = evaluate(teacher, {}, Modality::Audio, 1, 6, 1, "test");
  CHECK(empty.empty());
  CHECK(std::isnan(empty.cer()));
  CHECK(empty.csv(c.vocab()) ==
        "id,reference,hypothesis,ref_len,substitutions,deletions,insertions,cer,wer,bleu\n");
  CHECK_FALSE(empty.summary().empty());

  EvalReport b1 = evaluate(teacher, c.test, Modality::Audio, 1, 6, 2, "test");
  EvalReport b4 = evaluate(teacher, c.test, Modality::Audio, 4, 6, 1, "test");
  REQUIRE(b1.samples.size() == c.test.size());
  CHECK(b4.samples.size() == c.test.size());
  CHECK(b1.cer() == b1.wer());
  for (std::size_t i = 0; i < c.test.size(); ++i) {
    Graph g(false);
    EncoderOutput enc = teacher.encode(g, c.test[i].audio);
    CHECK(b1.samples[i].hypothesis == teacher.decode_greedy(g, enc, 6).tokens);
    CHECK(b1.samples[i].reference == c.test[i].tokens);
  }
  CHECK(b1.csv(c.vocab()) ==
        evaluate(teacher, c.test, Modality::Audio, 1, 6, 1, "test").csv(c.vocab()));
  CHECK_THROWS_AS(evaluate(teacher, c.test, Modality::Audio, 0, 6, 1), ConfigError);
}

TEST_CASE("attention export") {
  Corpus c = tiny_corpus();
  TrainConfig cfg = tiny_config();
  Checkpoint student = train_student(cfg, c, tiny_teacher()).checkpoint;
  const PairedSample& s = c.test[1];
  AttentionExport e = export_attention(student, c, s.id, 6, &tiny_teacher());
  REQUIRE(e.alpha.rows() == e.tokens.size());
  CHECK(e.alpha.cols() == s.video.rows());
  for (std::size_t k = 0; k < e.alpha.rows(); ++k) {
    double sum = 0;
    for (auto v : e.alpha.row(k)) sum += v;
    CHECK(std::abs(sum - 1) < 1e-6);
  }
  REQUIRE(e.beta.has_value());
  CHECK(e.beta->rows() == s.video.rows());
  CHECK(e.beta->cols() == s.audio.rows());
  for (std::size_t i = 0; i < e.beta->cols(); ++i) {
    double sum = 0;
    for (std::size_t j = 0; j < e.beta->rows(); ++j) sum += e.beta->at(j, i);
    CHECK(std::abs(sum - 1) < 1e-6);
  }
  CHECK(e.diagonal_mass >= 0);
  CHECK(e.diagonal_mass <= 1);

  AttentionExport t = export_attention(tiny_teacher(), c, s.id, 6);
  CHECK(t.alpha.cols() == s.audio.rows());
  CHECK_FALSE(t.beta.has_value());
  CHECK_THROWS_AS(export_attention(student, c, 999, 6), LookupError);

  std::string csv = matrix_csv(Tensor::matrix(1, 2, {0.25, 0.75}), "step", "frame");
  CHECK(csv == "step,frame0,frame1\n0,0.25,0.75\n");
}

TEST_CASE("diagonal mass") {
  Tensor diag = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(diagonal_mass(diag, 0.5) == 1);
  Tensor anti = Tensor::matrix(3, 6, {0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0});
  CHECK(diagonal_mass(anti, 1) == 0);
}

TEST_CASE("teacher artifacts are cached on disk") {
  Corpus c = tiny_corpus();
  TrainConfig cfg = tiny_config();
  cfg.cache_dir = temp_dir("cache");
  auto fresh = teacher_artifacts(tiny_teacher(), c, cfg);
  std::size_t files = 0;
  for (auto& e : std::filesystem::directory_iterator(cfg.cache_dir)) files += e.is_regular_file();
  CHECK(files == 1);
  auto cached = teacher_artifacts(tiny_teacher(), c, cfg);
  REQUIRE(cached.size() == fresh.size());
  for (std::size_t i = 0; i < fresh.size(); ++i) {
    CHECK(cached[i].sample_id == c.train[i].id);
    CHECK(cached[i].enc_states == fresh[i].enc_states);
    CHECK(cached[i].contexts == fresh[i].contexts);
    CHECK(cached[i].prediction == fresh[i].prediction);
  }
  TrainConfig nocache = cfg;
  nocache.cache_dir.clear();
  auto direct = teacher_artifacts(tiny_teacher(), c, nocache);
  CHECK(direct[0].sequence_vector == fresh[0].sequence_vector);
}

TEST_CASE("ablation rows and the independent baseline") {
  Corpus c = tiny_corpus();
  TrainConfig cfg = tiny_config();
  cfg.stage_epochs = {1, 0};
  const auto arts = teacher_artifacts(tiny_teacher(), c, cfg);
  auto rows = ablate(cfg, c, tiny_teacher(), arts);
  REQUIRE(rows.size() == 6);
  CHECK(rows[0].mode == StudentMode::Baseline);
  CHECK(rows[5].mode == StudentMode::Full);

  TrainConfig base = cfg;
  base.mode = StudentMode::Baseline;
  TrainResult r = train_student(base, c, tiny_teacher());
  EvalReport rep = evaluate(model_from_checkpoint(r.checkpoint), c.test, Modality::Video, 1,
                            cfg.max_decode_len, 1);
  CHECK(rows[0].cer == rep.cer());
  CHECK(rows[0].bleu == rep.bleu());

  const std::string csv = ablation_csv(rows);
  CHECK(csv.starts_with("mode,cer,wer,bleu,best_val_cer\n"));
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
  CHECK(ablation_summary(rows).find("kd1+kd2") != std::string::npos);
}

TEST_CASE("perfect oracle teacher gives a distillation fixed point") {
  // The student is the teacher, the targets are the teacher's own greedy
  // outputs and the feature maps start at identity: KD1 and KD2 vanish.
  Corpus c = tiny_corpus();
  const Seq2Seq teacher = model_from_checkpoint(tiny_teacher());
  const std::size_t d = teacher.enc_dim();
  DistillHead head(d, d);
  Parameter sharp{"w", Tensor::identity(4)};
  for (auto& v : sharp.value.data()) v *= 200;
  for (const auto& s : c.train) {
    TeacherArtifacts a = compute_teacher_artifacts(teacher, s.audio, 8, s.id);
    if (a.prediction.empty()) continue;
    Graph g;
    EncoderOutput enc = teacher.encode(g, s.audio);
    auto target = with_boundaries(a.prediction);
    auto tf = teacher.decode_teacher_forced(g, enc, target, 1.0, 0);
    const auto match = lcs_match(a.prediction, a.prediction,
                                 EquivRelation::identity(c.model_vocab_size()));
    CHECK(match.size() == a.prediction.size());
    CHECK(loss_kd1(g, a.sequence_vector, enc.sequence_vector, head.t_seq()).value().item() == 0);
    CHECK(loss_kd2(g, a.contexts, tf.trace.context, match, head.t_ctx()).value().item() == 0);
  }
  // Frame level: with mutually orthogonal equal-norm states a sharp
  // alignment matrix makes each audio frame attend only to its twin.
  Tensor h = Tensor::matrix(3, 4, {1, 0, 0, 0, 0, 0, 1, 0, 0, 1, 0, 0});
  Graph g;
  const double kd3 =
      loss_kd3(g, h, align_frames(g, h, g.constant(h), sharp).aligned).value().item();
  CHECK(kd3 < 1e-12);
}
