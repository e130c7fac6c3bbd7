#include <doctest.h>

#include <cmath>
#include <random>

#include "check.hpp"
#include "libs/distill.hpp"

using namespace libs;
using libs::testing::grad_check;
using libs::testing::random_tensor;

namespace {

double sq_dist(std::span<const Real> a, std::span<const Real> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

std::vector<Real> vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::vector<Real> affine(const Affine& t, std::span<const Real> x) {
  const Tensor& w = t.w->value;
  std::vector<Real> y(w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    y[r] = t.b->value[r];
    for (std::size_t c = 0; c < w.cols(); ++c) y[r] += w.at(r, c) * x[c];
  }
  return y;
}

void randomize(ParameterStore& s, std::mt19937_64& rng) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    s[i].value = random_tensor(s[i].value.shape(), rng, -0.7, 0.7);
  }
}

}  // namespace

TEST_CASE("distill head initialisation") {
  DistillHead h(4, 4);
  CHECK(h.t_seq().w->value == Tensor::identity(4));
  CHECK(h.t_ctx().w->value == Tensor::identity(4));
  CHECK(h.t_seq().b->value == Tensor(Shape{4}));
  const Tensor& w = h.w_align().value;
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(w.at(r, c) == doctest::Approx(r == c ? 0.5 : 0.0));
    }
  }
  CHECK(h.params().find("distill.w_align") != nullptr);
  DistillHead rect(3, 5);
  CHECK(rect.t_seq().in_dim() == 3);
  CHECK(rect.t_seq().out_dim() == 5);
}

TEST_CASE("KD1 examples") {
  DistillHead h(2, 2);
  Graph g;
  CHECK(loss_kd1(g, Tensor::vector({0.3, -2}), g.constant(Tensor::vector({0.3, -2})),
                 h.t_seq())
            .value()
            .item() == 0);
  CHECK(loss_kd1(g, Tensor::vector({1, 0}), g.constant(Tensor::vector({0, 0})), h.t_seq())
            .value()
            .item() == doctest::Approx(1));

  std::mt19937_64 rng(1);
  DistillHead big(16, 16);
  randomize(big.params(), rng);
  Tensor sa = random_tensor({16}, rng), sv = random_tensor({16}, rng);
  const double expect = sq_dist(vec(sa), affine(big.t_seq(), vec(sv)));
  CHECK(loss_kd1(g, sa, g.constant(sv), big.t_seq()).value().item() ==
        doctest::Approx(expect).epsilon(1e-12));
  CHECK_THROWS_AS(loss_kd1(g, Tensor::vector({1, 2, 3}), g.constant(Tensor::vector({1, 2})),
                           h.t_seq()),
                  DimensionError);
}

TEST_CASE("KD2 examples") {
  DistillHead h(2, 2);
  Graph g;
  Tensor ca = Tensor::matrix(2, 2, {1, 2, 3, 4});
  std::vector<Var> cv{g.constant(Tensor::vector({1, 2})), g.constant(Tensor::vector({3, 4}))};
  CHECK(loss_kd2(g, ca, cv, {}, h.t_ctx()).value().item() == 0);
  LcsMatch perfect{{0, 0}, {1, 1}};
  CHECK(loss_kd2(g, ca, cv, perfect, h.t_ctx()).value().item() == 0);

  std::vector<Var> cv2{g.constant(Tensor::vector({0, 0})), g.constant(Tensor::vector({1, 1})),
                       g.constant(Tensor::vector({5, 5}))};
  LcsMatch m{{0, 1}, {1, 2}};
  // ((1-1)^2 + (2-1)^2 + (3-5)^2 + (4-5)^2) / 2
  CHECK(loss_kd2(g, ca, cv2, m, h.t_ctx()).value().item() == doctest::Approx(3.0));

  LcsMatch bad_a{{2, 0}}, bad_v{{0, 3}};
  CHECK_THROWS_AS(loss_kd2(g, ca, cv2, bad_a, h.t_ctx()), ContractError);
  CHECK_THROWS_AS(loss_kd2(g, ca, cv2, bad_v, h.t_ctx()), ContractError);
}

TEST_CASE("align_frames examples and oracle") {
  std::mt19937_64 rng(2);
  Parameter w{"w", random_tensor({3, 3}, rng)};
  Graph g;
  Tensor ha = random_tensor({4, 3}, rng);
  Tensor hv1 = random_tensor({1, 3}, rng);
  FrameAlignment one = align_frames(g, ha, g.constant(hv1), w);
  CHECK(one.beta.value().rows() == 1);
  CHECK(one.beta.value().cols() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(one.beta.value().at(0, i) == doctest::Approx(1));
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(one.aligned.value().at(i, c) == doctest::Approx(hv1[c]));
    }
  }

  Parameter zero{"w", Tensor(Shape{3, 3})};
  Tensor hv = random_tensor({5, 3}, rng);
  FrameAlignment uni = align_frames(g, ha, g.constant(hv), zero);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      double mean = 0;
      for (std::size_t j = 0; j < 5; ++j) mean += hv.at(j, c) / 5;
      CHECK(uni.aligned.value().at(i, c) == doctest::Approx(mean));
    }
    for (std::size_t j = 0; j < 5; ++j) CHECK(uni.beta.value().at(j, i) == doctest::Approx(0.2));
  }

  Tensor ha2 = random_tensor({2, 3}, rng), hv3 = random_tensor({3, 3}, rng);
  FrameAlignment r = align_frames(g, ha2, g.constant(hv3), w);
  for (std::size_t i = 0; i < 2; ++i) {
    std::vector<double> s(3);
    for (std::size_t j = 0; j < 3; ++j) {
      double v = 0;
      for (std::size_t a = 0; a < 3; ++a) {
        for (std::size_t b = 0; b < 3; ++b) v += hv3.at(j, a) * w.value.at(a, b) * ha2.at(i, b);
      }
      s[j] = v;
    }
    double z = 0;
    for (double v : s) z += std::exp(v);
    double col = 0;
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(r.beta.value().at(j, i) == doctest::Approx(std::exp(s[j]) / z).epsilon(1e-12));
      col += r.beta.value().at(j, i);
    }
    CHECK(std::abs(col - 1) < 1e-6);
    for (std::size_t c = 0; c < 3; ++c) {
      double e = 0;
      for (std::size_t j = 0; j < 3; ++j) e += std::exp(s[j]) / z * hv3.at(j, c);
      CHECK(r.aligned.value().at(i, c) == doctest::Approx(e).epsilon(1e-12));
    }
  }
}

TEST_CASE("beta columns sum to one") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t I = 1 + rng() % 10, J = 1 + rng() % 10;
    Parameter w{"w", random_tensor({4, 4}, rng, -3, 3)};
    Graph g;
    FrameAlignment r =
        align_frames(g, random_tensor({I, 4}, rng, -3, 3), g.constant(random_tensor({J, 4}, rng, -3, 3)), w);
    for (std::size_t i = 0; i < I; ++i) {
      double col = 0;
      for (std::size_t j = 0; j < J; ++j) col += r.beta.value().at(j, i);
      CHECK(std::abs(col - 1) < 1e-6);
    }
  }
}

TEST_CASE("KD3 examples") {
  Graph g;
  Tensor ha = Tensor::matrix(2, 2, {1, 2, 3, 4});
  CHECK(loss_kd3(g, ha, g.constant(ha)).value().item() == 0);
  CHECK(loss_kd3(g, Tensor::matrix(1, 2, {1, 1}), g.constant(Tensor::matrix(1, 2, {0, 0})))
            .value()
            .item() == doctest::Approx(2));
  std::mt19937_64 rng(4);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  double expect = 0;
  for (std::size_t i = 0; i < 3; ++i) expect += sq_dist(a.row(i), b.row(i)) / 3;
  CHECK(loss_kd3(g, a, g.constant(b)).value().item() == doctest::Approx(expect).epsilon(1e-12));
  CHECK_THROWS_AS(loss_kd3(g, a, g.constant(random_tensor({3, 5}, rng))), ConfigError);
}

TEST_CASE("total_loss examples") {
  Graph g;
  LossBreakdown parts;
  parts.base = g.constant(Tensor::scalar(1));
  parts.kd1 = g.constant(Tensor::scalar(1));
  parts.kd2 = g.constant(Tensor::scalar(1));
  parts.kd3 = g.constant(Tensor::scalar(1));
  CHECK(total_loss(parts, KDWeights{}).total.value().item() == 61);
  LossBreakdown base_only = total_loss(parts, KDWeights{0, 0, 0});
  CHECK(base_only.total.id() == parts.base.id());

  std::mt19937_64 rng(5);
  const double b = uniform01(rng), k1 = uniform01(rng), k2 = uniform01(rng), k3 = uniform01(rng);
  parts.base = g.constant(Tensor::scalar(b));
  parts.kd1 = g.constant(Tensor::scalar(k1));
  parts.kd2 = g.constant(Tensor::scalar(k2));
  parts.kd3 = g.constant(Tensor::scalar(k3));
  CHECK(total_loss(parts, KDWeights{2, 10, 10}).total.value().item() ==
        doctest::Approx(b + 2 * k1 + 10 * k2 + 10 * k3).epsilon(1e-14));
  CHECK_THROWS_AS(total_loss(parts, KDWeights{-1, 0, 0}), ConfigError);

  LossBreakdown missing;
  missing.base = parts.base;
  CHECK(total_loss(missing, KDWeights{0, 0, 0}).total.value().item() == b);
  CHECK(total_loss(missing, KDWeights{1, 0, 0}).total.value().item() == b);
  LossBreakdown none;
  CHECK_THROWS_AS(total_loss(none, KDWeights{}), ContractError);
}

TEST_CASE("empty match with positive weight is exactly the base loss") {
  std::mt19937_64 rng(6);
  DistillHead h(3, 3);
  Graph g;
  LossBreakdown parts;
  parts.base = g.constant(Tensor::scalar(uniform01(rng)));
  std::vector<Var> cv{g.constant(random_tensor({3}, rng))};
  parts.kd2 = loss_kd2(g, random_tensor({1, 3}, rng), cv, {}, h.t_ctx());
  const double with = total_loss(parts, KDWeights{0, 40, 0}).total.value().item();
  const double without = total_loss(parts, KDWeights{0, 0, 0}).total.value().item();
  CHECK(with == without);
}

TEST_CASE("teacher values receive no gradient") {
  std::mt19937_64 rng(7);
  DistillHead h(3, 3);
  Graph g;
  Var hv = g.leaf(random_tensor({4, 3}, rng));
  Var sv = g.leaf(random_tensor({3}, rng));
  Tensor ha = random_tensor({2, 3}, rng), sa = random_tensor({3}, rng);
  Tensor ca = random_tensor({2, 3}, rng);
  Var kd1 = loss_kd1(g, sa, sv, h.t_seq());
  std::vector<Var> cv{row(hv, 0), row(hv, 1)};
  Var kd2 = loss_kd2(g, ca, cv, LcsMatch{{0, 0}, {1, 1}}, h.t_ctx());
  FrameAlignment fa = align_frames(g, ha, hv, h.w_align());
  Var kd3 = loss_kd3(g, ha, fa.aligned);
  std::vector<Var> terms{kd1, kd2, kd3};
  Var total = add_n(terms);
  g.backward(total);
  CHECK(g.grad(hv) != nullptr);
  CHECK(g.grad(sv) != nullptr);
  CHECK(g.param_grad(h.w_align()) != nullptr);
  // Perturbing a teacher value changes the loss.
  Graph g2;
  Tensor sa2 = sa;
  sa2[0] += 0.5;
  Var sv2 = g2.leaf(sv.value());
  CHECK(loss_kd1(g2, sa2, sv2, h.t_seq()).value().item() != kd1.value().item());
}

TEST_CASE("total loss gradients match finite differences") {
  ModelConfig c;
  c.input_dim = 2;
  c.vocab_size = 5;
  c.enc_hidden = 1;
  c.dec_hidden = 2;
  c.embed_dim = 2;
  c.attention_dim = 2;
  Seq2Seq student(c, 21);
  const std::size_t d = student.enc_dim();  // 2
  DistillHead head(d, d);
  std::mt19937_64 rng(8);
  randomize(head.params(), rng);
  Tensor video = random_tensor({4, 2}, rng);
  Tensor ha = random_tensor({3, d}, rng), sa = random_tensor({d}, rng);
  Tensor ca = random_tensor({2, d}, rng);
  std::vector<TokenId> target{kSos, 3, 4, 3, kEos};
  LcsMatch match{{0, 0}, {1, 2}};
  KDWeights w{0.7, 1.3, 0.9};

  std::vector<Parameter*> ps;
  for (std::size_t i = 0; i < student.params().size(); ++i) ps.push_back(&student.params()[i]);
  for (std::size_t i = 0; i < head.params().size(); ++i) ps.push_back(&head.params()[i]);
  auto r = grad_check(ps, [&](Graph& g) {
    EncoderOutput enc = student.encode(g, video);
    auto tf = student.decode_teacher_forced(g, enc, target, 1.0, 0);
    LossBreakdown parts;
    parts.base = tf.base_loss;
    parts.kd1 = loss_kd1(g, sa, enc.sequence_vector, head.t_seq());
    parts.kd2 = loss_kd2(g, ca, tf.trace.context, match, head.t_ctx());
    parts.kd3 = loss_kd3(g, ha, align_frames(g, ha, enc.hidden_states, head.w_align()).aligned);
    return total_loss(parts, w).total;
  });
  CHECK_MESSAGE(r.max_error < 1e-4, r.worst);
  CHECK(r.checked > 50);
}

TEST_CASE("teacher artifacts come from greedy decoding") {
  ModelConfig c;
  c.input_dim = 3;
  c.vocab_size = 6;
  c.enc_hidden = 2;
  c.dec_hidden = 4;
  c.embed_dim = 2;
  Seq2Seq teacher(c, 4);
  std::mt19937_64 rng(9);
  Tensor audio = random_tensor({6, 3}, rng);
  TeacherArtifacts a = compute_teacher_artifacts(teacher, audio, 5, 17);
  Graph g(false);
  EncoderOutput enc = teacher.encode(g, audio);
  FreeRunResult run = teacher.decode_greedy(g, enc, 5);
  CHECK(a.sample_id == 17);
  CHECK(a.prediction == run.tokens);
  CHECK(a.enc_states == enc.hidden_states.value());
  CHECK(a.sequence_vector == enc.sequence_vector.value());
  CHECK(a.contexts.rows() == run.tokens.size());
}
