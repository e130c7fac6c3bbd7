// libs: synthetic cross-modal distillation pipeline driver.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "libs/binio.hpp"
#include "libs/harness.hpp"

namespace {

using namespace libs;

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kIo = 3 };

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;

  std::map<std::string, std::string> map() const {
    return load_config_map(config, sets, seed);
  }
  TrainConfig train() const { return TrainConfig::from_map(map()); }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "flat key = value configuration file");
  cmd->add_option("--set", c.sets, "override, key=value (repeatable)")
      ->allow_extra_args(false);
  cmd->add_option("--seed", c.seed, "master seed (overrides config)");
}

Corpus read_corpus(const TrainConfig& cfg) {
  if (!std::filesystem::exists(cfg.corpus)) {
    throw IoError("corpus '" + cfg.corpus.string() + "' does not exist");
  }
  return load_corpus(cfg.corpus);
}

void print_log_line(const EpochLog& e) {
  std::printf("epoch %2zu  stage %zu (K<=%zu)  n=%zu  lr=%.2e  p=%.3f  base=%.4f",
              e.epoch, e.stage, e.stage_max_len, e.samples, e.lr, e.p_end,
              e.base);
  if (e.kd1 != 0 || e.kd2 != 0 || e.kd3 != 0) {
    std::printf("  kd1=%.4f kd2=%.4f kd3=%.4f", e.kd1, e.kd2, e.kd3);
  }
  std::printf("  val_cer=%.4f\n", e.val_cer);
  std::fflush(stdout);
}

std::optional<Checkpoint> resume_from(const TrainConfig& cfg) {
  if (cfg.resume.empty()) return std::nullopt;
  return load_checkpoint(cfg.resume);
}

int gen_data(const Common& c) {
  const auto kv = c.map();
  const TrainConfig cfg = TrainConfig::from_map(kv);
  GenConfig gen = GenConfig::from_map(kv);
  gen.validate();
  const Corpus corpus = gen_corpus(gen);
  save_corpus(corpus, cfg.corpus);
  std::printf("wrote %s: %zu train, %zu val, %zu test (V=%zu, C=%zu)\n",
              cfg.corpus.string().c_str(), corpus.train.size(),
              corpus.val.size(), corpus.test.size(), gen.vocab_size,
              gen.viseme_classes);
  return kOk;
}

int train_teacher_cmd(const Common& c) {
  const TrainConfig cfg = c.train();
  const Corpus corpus = read_corpus(cfg);
  const auto resume = resume_from(cfg);
  TrainHooks hooks;
  hooks.on_epoch = print_log_line;
  TrainResult r = train_teacher(cfg, corpus, hooks, resume ? &*resume : nullptr);
  save_checkpoint(r.checkpoint, cfg.teacher);
  write_text_file(cfg.report_dir / "teacher_train.csv", train_log_csv(r.log));
  std::printf("teacher checkpoint %s (best val CER %s at epoch %s)\n",
              cfg.teacher.string().c_str(),
              r.checkpoint.meta_at("best_val_cer").c_str(),
              r.checkpoint.meta_at("best_epoch").c_str());
  return kOk;
}

int train_student_cmd(const Common& c) {
  const TrainConfig cfg = c.train();
  const Corpus corpus = read_corpus(cfg);
  const Checkpoint teacher = load_checkpoint(cfg.teacher);
  const auto resume = resume_from(cfg);
  TrainHooks hooks;
  hooks.on_epoch = print_log_line;
  TrainResult r =
      train_student(cfg, corpus, teacher, hooks, resume ? &*resume : nullptr);
  save_checkpoint(r.checkpoint, cfg.student);
  write_text_file(cfg.report_dir / (std::string("student_") +
                                    mode_name(cfg.mode) + "_train.csv"),
                  train_log_csv(r.log));
  std::printf("student (%s) checkpoint %s (best val CER %s at epoch %s)\n",
              mode_name(cfg.mode), cfg.student.string().c_str(),
              r.checkpoint.meta_at("best_val_cer").c_str(),
              r.checkpoint.meta_at("best_epoch").c_str());
  return kOk;
}

int eval_cmd(const Common& c) {
  const TrainConfig cfg = c.train();
  const auto path = cfg.checkpoint.empty() ? cfg.student : cfg.checkpoint;
  const Checkpoint ckpt = load_checkpoint(path);
  const Corpus corpus = read_corpus(cfg);
  const Seq2Seq model = model_from_checkpoint(ckpt);
  const EvalReport rep =
      evaluate(model, corpus.split(cfg.split), checkpoint_input(ckpt),
               cfg.beam_width, cfg.max_decode_len, cfg.thread_count(),
               split_name(cfg.split));
  const std::string stem = "eval_" + path.stem().string() + "_" +
                           split_name(cfg.split) + "_beam" +
                           std::to_string(cfg.beam_width);
  write_text_file(cfg.report_dir / (stem + ".csv"), rep.csv(corpus.vocab()));
  const std::string summary = "checkpoint  " + path.string() + "\n" + rep.summary();
  write_text_file(cfg.report_dir / (stem + ".txt"), summary);
  std::cout << summary;
  return kOk;
}

int ablate_cmd(const Common& c) {
  const TrainConfig cfg = c.train();
  const Corpus corpus = read_corpus(cfg);
  const Checkpoint teacher = load_checkpoint(cfg.teacher);
  const auto arts = teacher_artifacts(teacher, corpus, cfg);
  const auto rows = ablate(cfg, corpus, teacher, arts);
  write_text_file(cfg.report_dir / "ablation.csv", ablation_csv(rows));
  const std::string summary = ablation_summary(rows);
  write_text_file(cfg.report_dir / "ablation.txt", summary);
  std::cout << summary;
  return kOk;
}

int export_cmd(const Common& c) {
  const TrainConfig cfg = c.train();
  const auto path = cfg.checkpoint.empty() ? cfg.student : cfg.checkpoint;
  const Checkpoint ckpt = load_checkpoint(path);
  const Corpus corpus = read_corpus(cfg);
  std::optional<Checkpoint> teacher;
  if (ckpt.find("distill.w_align") && std::filesystem::exists(cfg.teacher)) {
    teacher = load_checkpoint(cfg.teacher);
  }
  const AttentionExport ex =
      export_attention(ckpt, corpus, cfg.sample_id, cfg.max_decode_len,
                       teacher ? &*teacher : nullptr);
  const std::string stem = "attention_" + std::to_string(cfg.sample_id);
  write_text_file(cfg.report_dir / (stem + "_alpha.csv"),
                  matrix_csv(ex.alpha, "step", "frame"));
  std::printf("alpha %zu x %zu -> %s\n", ex.alpha.rows(), ex.alpha.cols(),
              (cfg.report_dir / (stem + "_alpha.csv")).string().c_str());
  if (ex.beta) {
    write_text_file(cfg.report_dir / (stem + "_beta.csv"),
                    matrix_csv(*ex.beta, "video_frame", "audio_frame"));
    std::printf("beta  %zu x %zu -> %s\n", ex.beta->rows(), ex.beta->cols(),
                (cfg.report_dir / (stem + "_beta.csv")).string().c_str());
  }
  std::printf("diagonal mass (+-2 tokens) %.4f\n", ex.diagonal_mass);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal distillation from an audio teacher to a video student"};
  app.require_subcommand(1);

  struct Entry {
    const char* name;
    const char* help;
    int (*run)(const Common&);
  };
  const Entry entries[] = {
      {"gen-data", "generate the synthetic paired corpus", gen_data},
      {"train-teacher", "train the audio recogniser", train_teacher_cmd},
      {"train-student", "train the video student (mode = baseline..full)",
       train_student_cmd},
      {"eval", "evaluate a checkpoint on a split", eval_cmd},
      {"ablate", "train and evaluate all six student modes", ablate_cmd},
      {"export-attention", "write attention matrices for one sample",
       export_cmd},
  };
  std::vector<Common> args(std::size(entries));
  std::vector<CLI::App*> cmds;
  for (std::size_t i = 0; i < std::size(entries); ++i) {
    cmds.push_back(app.add_subcommand(entries[i].name, entries[i].help));
    add_common(cmds.back(), args[i]);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    for (std::size_t i = 0; i < cmds.size(); ++i) {
      if (cmds[i]->parsed()) return entries[i].run(args[i]);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kConfig;
  } catch (const LookupError& e) {
    std::fprintf(stderr, "lookup error: %s\n", e.what());
    return kConfig;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kFailure;
}
