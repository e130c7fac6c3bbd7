#include "libs/distill.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace libs {

void KDWeights::validate() const {
  if (!(seq >= 0) || !(ctx >= 0) || !(frame >= 0)) {
    throw ConfigError("distillation weights must be non-negative, got (" +
                      std::to_string(seq) + ", " + std::to_string(ctx) + ", " +
                      std::to_string(frame) + ")");
  }
}

Var Affine::apply(Graph& g, Var x) const {
  return add(matmul(g.param(*w), x), g.param(*b));
}

namespace {

Tensor near_identity(std::size_t rows, std::size_t cols, Real diag) {
  Tensor t(Shape{rows, cols});
  for (std::size_t i = 0; i < std::min(rows, cols); ++i) t.at(i, i) = diag;
  return t;
}

}  // namespace

DistillHead::DistillHead(std::size_t student_dim, std::size_t teacher_dim,
                         const std::string& prefix) {
  if (student_dim == 0 || teacher_dim == 0) {
    throw ConfigError("distillation feature dims must be positive");
  }
  auto& ws = params_.add(prefix + "t_seq.w",
                         near_identity(teacher_dim, student_dim, 1));
  auto& bs = params_.add(prefix + "t_seq.b", Tensor(Shape{teacher_dim}));
  t_seq_ = {&ws, &bs};
  auto& wc = params_.add(prefix + "t_ctx.w",
                         near_identity(teacher_dim, student_dim, 1));
  auto& bc = params_.add(prefix + "t_ctx.b", Tensor(Shape{teacher_dim}));
  t_ctx_ = {&wc, &bc};
  const Real diag = static_cast<float>(
      1 / std::sqrt(static_cast<Real>(std::min(student_dim, teacher_dim))));
  w_align_ = &params_.add(prefix + "w_align",
                          near_identity(student_dim, teacher_dim, diag));
}

TeacherArtifacts compute_teacher_artifacts(const Seq2Seq& teacher,
                                           const Tensor& audio,
                                           std::size_t max_len,
                                           std::uint64_t sample_id) {
  Graph g(false);
  EncoderOutput enc = teacher.encode(g, audio);
  FreeRunResult run = teacher.decode_greedy(g, enc, max_len);
  TeacherArtifacts out;
  out.sample_id = sample_id;
  out.enc_states = enc.hidden_states.value();
  out.sequence_vector = enc.sequence_vector.value();
  out.prediction = run.tokens;
  const std::size_t steps = run.tokens.size();
  if (steps > 0) {
    const std::size_t d = teacher.enc_dim();
    std::vector<Real> ctx;
    ctx.reserve(steps * d);
    for (std::size_t k = 0; k < steps; ++k) {
      const auto& c = run.trace.context[k].value();
      ctx.insert(ctx.end(), c.data().begin(), c.data().end());
    }
    out.contexts = Tensor::matrix(steps, d, std::move(ctx));
  }
  return out;
}

Var loss_kd1(Graph& g, const Tensor& s_a, Var s_v, const Affine& t_seq) {
  if (s_v.value().size() != t_seq.in_dim()) {
    throw DimensionError("KD1: student sequence vector " +
                         shape_str(s_v.shape()) + " does not match t_seq input " +
                         std::to_string(t_seq.in_dim()));
  }
  if (s_a.rank() != 1 || s_a.size() != t_seq.out_dim()) {
    throw DimensionError("KD1: teacher sequence vector " +
                         shape_str(s_a.shape()) + " does not match t_seq output " +
                         std::to_string(t_seq.out_dim()));
  }
  return sq_l2(g.constant(s_a), t_seq.apply(g, s_v));
}

Var loss_kd2(Graph& g, const Tensor& c_a, std::span<const Var> c_v,
             const LcsMatch& match, const Affine& t_ctx) {
  if (match.empty()) return g.constant(Tensor::scalar(0));
  std::vector<Var> terms;
  terms.reserve(match.size());
  for (const LcsPair& pair : match) {
    if (c_a.empty() || pair.pred_index >= c_a.rows()) {
      throw ContractError("KD2: teacher index " +
                          std::to_string(pair.pred_index) + " out of range");
    }
    if (pair.truth_index >= c_v.size()) {
      throw ContractError("KD2: student index " +
                          std::to_string(pair.truth_index) + " out of range");
    }
    auto r = c_a.row(pair.pred_index);
    Var teacher = g.constant(Tensor::vector(std::vector<Real>(r.begin(), r.end())));
    Var student = t_ctx.apply(g, c_v[pair.truth_index]);
    terms.push_back(sq_l2(teacher, student));
  }
  return scale(add_n(terms), Real{1} / static_cast<Real>(match.size()));
}

FrameAlignment align_frames(Graph& g, const Tensor& h_a, Var h_v,
                            const Parameter& w_align) {
  const Tensor& hv = h_v.value();
  if (h_a.rank() != 2 || hv.rank() != 2) {
    throw DimensionError("align_frames expects matrices, got " +
                         shape_str(h_a.shape()) + " and " +
                         shape_str(hv.shape()));
  }
  const Shape expected{hv.cols(), h_a.cols()};
  if (w_align.value.shape() != expected) {
    throw DimensionError("align_frames: W is " +
                         shape_str(w_align.value.shape()) + ", expected " +
                         shape_str(expected));
  }
  // scores[i][j] = h_a_i^T W^T h_v_j = h_v_j^T W h_a_i
  Var projected = matmul(g.constant(h_a), transpose(g.param(w_align)));
  Var scores = matmul(projected, transpose(h_v));
  Var weights = softmax_rows(scores);  // row i = beta_{., i}
  FrameAlignment out;
  out.aligned = matmul(weights, h_v);
  out.beta = transpose(weights);
  return out;
}

Var loss_kd3(Graph& g, const Tensor& h_a, Var aligned) {
  if (h_a.shape() != aligned.value().shape()) {
    throw ConfigError("KD3 needs equal audio and video feature shapes, got " +
                      shape_str(h_a.shape()) + " and " +
                      shape_str(aligned.shape()));
  }
  return scale(sq_l2(g.constant(h_a), aligned),
               Real{1} / static_cast<Real>(h_a.rows()));
}

LossBreakdown total_loss(const LossBreakdown& parts,
                         const KDWeights& weights) {
  weights.validate();
  if (!parts.base.valid()) throw ContractError("total_loss needs L_base");
  auto check = [](Var v, const char* name) {
    if (v.valid() && !v.value().is_scalar()) {
      throw ContractError(std::string("total_loss: ") + name +
                          " is not a scalar");
    }
  };
  check(parts.base, "L_base");
  check(parts.kd1, "L_KD1");
  check(parts.kd2, "L_KD2");
  check(parts.kd3, "L_KD3");
  LossBreakdown out = parts;
  Var total = parts.base;
  auto fold = [&](Var term, Real weight) {
    if (weight == 0 || !term.valid()) return;
    total = add(total, scale(term, weight));
  };
  fold(parts.kd1, weights.seq);
  fold(parts.kd2, weights.ctx);
  fold(parts.kd3, weights.frame);
  out.total = total;
  return out;
}

}  // namespace libs
