#include <benchmark/benchmark.h>

#include <random>

#include "libs/align.hpp"
#include "libs/distill.hpp"
#include "libs/metrics.hpp"
#include "libs/seq2seq.hpp"
#include "libs/synthdata.hpp"

using namespace libs;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  Tensor t(Shape{r, c});
  for (auto& v : t.data()) v = 2 * uniform01(rng) - 1;
  return t;
}

std::vector<TokenId> random_tokens(std::size_t n, std::mt19937_64& rng) {
  std::vector<TokenId> out(n);
  for (auto& t : out) t = kFirstContentToken + static_cast<TokenId>(rng() % 20);
  return out;
}

void BM_MatMul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(1);
  Tensor a = random_matrix(n, n, rng), b = random_matrix(n, n, rng);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_MatMul)->Arg(16)->Arg(32)->Arg(64);

void BM_StudentStep(benchmark::State& state) {
  GenConfig gc;
  gc.train_size = 1;
  gc.val_size = gc.test_size = 0;
  Corpus c = gen_corpus(gc);
  const PairedSample& s = c.train[0];
  ModelConfig mc;
  mc.input_dim = gc.video_dim;
  mc.vocab_size = c.model_vocab_size();
  Seq2Seq student(mc, 1);
  mc.input_dim = gc.audio_dim;
  Seq2Seq teacher(mc, 2);
  TeacherArtifacts art = compute_teacher_artifacts(teacher, s.audio, 16);
  DistillHead head(student.enc_dim(), teacher.enc_dim());
  const auto target = with_boundaries(s.tokens);
  const auto match = lcs_match(art.prediction, s.tokens, c.viseme_equiv());
  const bool distill = state.range(0) != 0;
  for (auto _ : state) {
    Graph g;
    EncoderOutput enc = student.encode(g, s.video);
    auto tf = student.decode_teacher_forced(g, enc, target, 0.9, 7);
    LossBreakdown parts;
    parts.base = tf.base_loss;
    KDWeights w{0, 0, 0};
    if (distill) {
      w = KDWeights{};
      parts.kd1 = loss_kd1(g, art.sequence_vector, enc.sequence_vector, head.t_seq());
      parts.kd2 = loss_kd2(g, art.contexts, tf.trace.context, match, head.t_ctx());
      parts.kd3 = loss_kd3(
          g, art.enc_states, align_frames(g, art.enc_states, enc.hidden_states, head.w_align()).aligned);
    }
    g.backward(total_loss(parts, w).total);
    benchmark::DoNotOptimize(g.node_count());
  }
}
BENCHMARK(BM_StudentStep)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);

void BM_BeamSearch(benchmark::State& state) {
  ModelConfig mc;
  Seq2Seq model(mc, 3);
  std::mt19937_64 rng(4);
  Tensor frames = random_matrix(20, mc.input_dim, rng);
  const auto width = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(model.beam_search(frames, width, 12));
}
BENCHMARK(BM_BeamSearch)->Arg(1)->Arg(4)->Unit(benchmark::kMicrosecond);

void BM_Lcs(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(5);
  auto a = random_tokens(n, rng), b = random_tokens(n, rng);
  const auto eq = EquivRelation::identity(32);
  for (auto _ : state) benchmark::DoNotOptimize(lcs_match(a, b, eq));
}
BENCHMARK(BM_Lcs)->Arg(8)->Arg(64)->Arg(256);

void BM_EditDistance(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(6);
  auto a = random_tokens(n, rng), b = random_tokens(n, rng);
  std::vector<Symbol> ra(a.begin(), a.end()), rb(b.begin(), b.end());
  for (auto _ : state) benchmark::DoNotOptimize(edit_distance(ra, rb));
}
BENCHMARK(BM_EditDistance)->Arg(8)->Arg(64)->Arg(256);

}  // namespace
BENCHMARK_MAIN();
