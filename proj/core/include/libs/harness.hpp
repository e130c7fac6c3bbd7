#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "libs/checkpoint.hpp"
#include "libs/distill.hpp"
#include "libs/metrics.hpp"
#include "libs/seq2seq.hpp"
#include "libs/synthdata.hpp"

namespace libs {

enum class Modality { Audio, Video };

const char* modality_name(Modality m);
Modality parse_modality(const std::string& name);

// Student training modes; each maps to a mask over the KD weights.
enum class StudentMode { Baseline, Kd1, Kd2, Kd3, Kd1Kd2, Full };

const char* mode_name(StudentMode mode);
StudentMode parse_mode(const std::string& name);
std::vector<StudentMode> all_modes();
// Zeroes the weights the mode switches off.
KDWeights mode_weights(StudentMode mode, const KDWeights& lambdas);

struct TrainConfig {
  // model
  std::size_t enc_layers = 1;
  std::size_t enc_hidden = 16;
  std::size_t dec_hidden = 32;
  std::size_t embed_dim = 16;
  std::size_t attention_dim = 16;
  AttentionKind attention = AttentionKind::General;

  // distillation
  StudentMode mode = StudentMode::Full;
  KDWeights lambdas;
  bool kd2_viseme_equiv = false;  // LCS under viseme classes instead of identity

  // optimisation
  double lr = 1e-3;
  std::size_t lr_patience = 1;
  double lr_decay = 0.5;
  double clip_norm = 5;
  std::size_t batch_size = 16;
  double p_lo = 0.7;  // scheduled sampling: P(feed ground truth)
  double p_hi = 1.0;
  std::vector<std::size_t> stage_max_len{4, 6, 8};
  std::vector<std::size_t> stage_epochs{2, 2, 4};
  std::size_t stop_after = 0;  // stop once this many epochs are done; 0 = all

  // decoding / evaluation
  std::size_t max_decode_len = 16;
  std::size_t beam_width = 1;
  Split split = Split::Test;
  std::uint64_t sample_id = 0;

  std::size_t threads = 0;  // 0 = hardware concurrency
  std::uint64_t seed = 1;

  // paths
  std::filesystem::path corpus = "out/corpus.bin";
  std::filesystem::path teacher = "out/teacher.ckpt";
  std::filesystem::path student = "out/student.ckpt";
  std::filesystem::path checkpoint;  // eval/export input; empty = student
  std::filesystem::path resume;
  std::filesystem::path report_dir = "out/reports";
  std::filesystem::path cache_dir = "out/cache";

  void validate() const;
  std::size_t total_epochs() const;
  std::size_t thread_count() const;
  ModelConfig model_config(std::size_t input_dim, std::size_t vocab_size) const;

  std::map<std::string, std::string> to_map() const;
  // Keys belonging to GenConfig are accepted and ignored; any other unknown
  // key is a ConfigError.
  static TrainConfig from_map(const std::map<std::string, std::string>& kv);
};

// Reads an optional config file, then applies `key=value` overrides in order
// and finally the seed override.
std::map<std::string, std::string> load_config_map(
    const std::filesystem::path& path, std::span<const std::string> overrides,
    std::optional<std::uint64_t> seed);

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  std::size_t stage = 0;
  std::size_t stage_max_len = 0;
  std::size_t samples = 0;
  std::size_t steps = 0;
  double lr = 0;
  double p_end = 0;
  double base = 0;  // per-sample means
  double kd1 = 0;
  double kd2 = 0;
  double kd3 = 0;
  double total = 0;
  double val_cer = 0;  // NaN when the validation split is empty
};

struct StepInfo {
  std::size_t epoch = 0;  // 0-based
  std::size_t step = 0;   // global optimiser step, 1-based
  std::size_t stage_max_len = 0;
  double sampling_prob = 0;
  double lr = 0;
  std::span<const std::uint64_t> sample_ids;
  std::span<const std::size_t> lengths;
  const ParameterStore* model = nullptr;
};

struct TrainHooks {
  std::function<void(const StepInfo&)> on_step;
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
};

// Plain recogniser training on one modality with L_base only. The audio
// variant is the teacher.
TrainResult train_recognizer(const TrainConfig& cfg, const Corpus& corpus,
                             Modality input, const TrainHooks& hooks = {},
                             const Checkpoint* resume = nullptr);

inline TrainResult train_teacher(const TrainConfig& cfg, const Corpus& corpus,
                                 const TrainHooks& hooks = {},
                                 const Checkpoint* resume = nullptr) {
  return train_recognizer(cfg, corpus, Modality::Audio, hooks, resume);
}

// Frozen-teacher outputs for every training sample, in split order.
std::vector<TeacherArtifacts> teacher_artifacts(
    const Checkpoint& teacher, const Corpus& corpus, const TrainConfig& cfg);

TrainResult train_student(const TrainConfig& cfg, const Corpus& corpus,
                          const Checkpoint& teacher,
                          const TrainHooks& hooks = {},
                          const Checkpoint* resume = nullptr);

// Same, with precomputed artifacts (aligned with corpus.train).
TrainResult train_student(const TrainConfig& cfg, const Corpus& corpus,
                          const Checkpoint& teacher,
                          std::span<const TeacherArtifacts> artifacts,
                          const TrainHooks& hooks = {},
                          const Checkpoint* resume = nullptr);

// Rebuilds the (best-validation) recogniser stored in a checkpoint.
Seq2Seq model_from_checkpoint(const Checkpoint& ckpt);
Modality checkpoint_input(const Checkpoint& ckpt);

struct SampleResult {
  std::uint64_t id = 0;
  std::vector<TokenId> reference;
  std::vector<TokenId> hypothesis;
  ErrorRateReport cer;
  ErrorRateReport wer;
  double bleu = 0;
};

struct EvalReport {
  std::string split;
  std::size_t beam_width = 1;
  std::vector<SampleResult> samples;

  bool empty() const { return samples.empty(); }
  double cer() const;  // micro-averaged; NaN when empty
  double wer() const;
  double bleu() const;  // mean per-sample; NaN when empty

  std::string csv(const Vocab& vocab) const;
  std::string summary() const;
};

EvalReport evaluate(const Seq2Seq& model, std::span<const PairedSample> samples,
                    Modality input, std::size_t beam_width,
                    std::size_t max_len, std::size_t threads,
                    const std::string& split_label = "");

struct AblationRow {
  StudentMode mode = StudentMode::Baseline;
  double cer = 0;
  double wer = 0;
  double bleu = 0;
  double val_cer = 0;  // best validation CER seen during training
};

// Trains one student per mode with the same seed and evaluates each on
// cfg.split.
std::vector<AblationRow> ablate(const TrainConfig& cfg, const Corpus& corpus,
                                const Checkpoint& teacher,
                                std::span<const TeacherArtifacts> artifacts);
std::string ablation_csv(std::span<const AblationRow> rows);
std::string ablation_summary(std::span<const AblationRow> rows);

struct AttentionExport {
  std::uint64_t sample_id = 0;
  std::vector<TokenId> tokens;  // emitted, [eos] included when produced
  Tensor alpha;                 // [steps x J]
  std::optional<Tensor> beta;   // [J x I], LIBS students only
  double diagonal_mass = 0;
};

// Greedy-decodes one sample and collects its attention matrices. beta needs
// a student checkpoint carrying an alignment matrix plus the teacher.
AttentionExport export_attention(const Checkpoint& ckpt, const Corpus& corpus,
                                 std::uint64_t sample_id, std::size_t max_len,
                                 const Checkpoint* teacher = nullptr);

// Fraction of attention mass within +-band tokens of the diagonal, where
// step k is centred on frame (k + 1/2) J / steps.
double diagonal_mass(const Tensor& alpha, double band_tokens = 2);

// CSV with a header row: row_label,<col_label>0,<col_label>1,...
std::string matrix_csv(const Tensor& m, const std::string& row_label,
                       const std::string& col_label);

std::string train_log_csv(std::span<const EpochLog> log);

}  // namespace libs
