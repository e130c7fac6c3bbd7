#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "libs/align.hpp"
#include "libs/params.hpp"
#include "libs/seq2seq.hpp"

namespace libs {

// Balance weights of the combined objective
//   L = L_base + seq * L_KD1 + ctx * L_KD2 + frame * L_KD3
struct KDWeights {
  Real seq = 10;
  Real ctx = 40;
  Real frame = 10;

  void validate() const;
};

// t(x) = W x + b
struct Affine {
  const Parameter* w = nullptr;
  const Parameter* b = nullptr;

  Var apply(Graph& g, Var x) const;
  std::size_t in_dim() const { return w->value.cols(); }
  std::size_t out_dim() const { return w->value.rows(); }
};

// Trainable distillation-only parameters: the two feature transforms and the
// bilinear audio-video alignment matrix. Discarded at inference.
class DistillHead {
 public:
  DistillHead(std::size_t student_dim, std::size_t teacher_dim,
              const std::string& prefix = "distill.");
  DistillHead(DistillHead&&) = default;
  DistillHead& operator=(DistillHead&&) = default;

  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  const Affine& t_seq() const { return t_seq_; }
  const Affine& t_ctx() const { return t_ctx_; }
  const Parameter& w_align() const { return *w_align_; }

 private:
  ParameterStore params_;
  Affine t_seq_;
  Affine t_ctx_;
  const Parameter* w_align_ = nullptr;
};

// Frozen-teacher outputs for one utterance. Plain tensors: nothing here ever
// enters a graph as anything but a constant.
struct TeacherArtifacts {
  std::uint64_t sample_id = 0;
  Tensor enc_states;       // h^a [I x d_a]
  Tensor sequence_vector;  // s^a [d_a]
  Tensor contexts;         // c^a [L x d_a]; empty when L == 0
  std::vector<TokenId> prediction;  // greedy teacher output, [eos] excluded
};

TeacherArtifacts compute_teacher_artifacts(const Seq2Seq& teacher,
                                           const Tensor& audio,
                                           std::size_t max_len,
                                           std::uint64_t sample_id = 0);

// ||s_a - t(s_v)||^2
Var loss_kd1(Graph& g, const Tensor& s_a, Var s_v, const Affine& t_seq);

// (1/M) sum_m ||c_a[I^a_m] - t(c_v[I^v_m])||^2; exactly zero when M == 0.
Var loss_kd2(Graph& g, const Tensor& c_a, std::span<const Var> c_v,
             const LcsMatch& match, const Affine& t_ctx);

struct FrameAlignment {
  Var aligned;  // h~v [I x d_v]
  Var beta;     // [J x I]; column i is a distribution over video frames
};

// Audio attends video: beta_ji = softmax_j(h_v_j^T W h_a_i).
FrameAlignment align_frames(Graph& g, const Tensor& h_a, Var h_v,
                            const Parameter& w_align);

// (1/I) sum_i ||h_a_i - h~v_i||^2
Var loss_kd3(Graph& g, const Tensor& h_a, Var aligned);

struct LossBreakdown {
  Var base;
  Var kd1;  // invalid when the term is not built
  Var kd2;
  Var kd3;
  Var total;

  static Real value_of(Var v) { return v.valid() ? v.value().item() : 0; }
};

// Weighted sum of the parts. A zero weight removes its term entirely, so the
// result is bit-identical to the base-only objective.
LossBreakdown total_loss(const LossBreakdown& parts,
                         const KDWeights& weights);

}  // namespace libs
