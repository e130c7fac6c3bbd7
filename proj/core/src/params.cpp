#include "libs/params.hpp"

#include <cmath>

namespace libs {

Parameter& ParameterStore::add(std::string name, Tensor init) {
  if (find(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  params_.push_back(
      std::make_unique<Parameter>(Parameter{std::move(name), std::move(init)}));
  return *params_.back();
}

Parameter* ParameterStore::find(std::string_view name) {
  for (auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

const Parameter* ParameterStore::find(std::string_view name) const {
  for (const auto& p : params_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

const Parameter& ParameterStore::at(std::string_view name) const {
  const Parameter* p = find(name);
  if (!p) throw LookupError("no parameter named '" + std::string(name) + "'");
  return *p;
}

void ParameterStore::assign_from(const ParameterStore& other) {
  for (auto& p : params_) {
    const Parameter& src = other.at(p->name);
    if (src.value.shape() != p->value.shape()) {
      throw DimensionError("parameter '" + p->name + "' has shape " +
                           shape_str(p->value.shape()) + ", source has " +
                           shape_str(src.value.shape()));
    }
    p->value = src.value;
  }
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

Tensor uniform_init(Shape shape, Real bound, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) {
    v = static_cast<float>((2 * uniform01(rng) - 1) * bound);
  }
  return t;
}

double normal01(std::mt19937_64& rng) {
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  double u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  if (u1 <= 0) u1 = 0x1.0p-53;
  return std::sqrt(-2 * std::log(u1)) * std::cos(kTwoPi * u2);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void round_to_f32(Tensor& t) {
  for (auto& v : t.data()) v = static_cast<float>(v);
}

GradientBuffer::GradientBuffer(const ParameterStore& store) {
  grads_.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    grads_.emplace_back(store[i].value.shape());
  }
}

void GradientBuffer::zero() {
  for (auto& g : grads_) g.fill(0);
}

void GradientBuffer::accumulate(const Graph& graph,
                                const ParameterStore& store) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Tensor* g = graph.param_grad(store[i]);
    if (!g) continue;
    auto dst = grads_[i].data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += (*g)[k];
  }
}

void GradientBuffer::scale(Real factor) {
  for (auto& g : grads_) {
    for (auto& v : g.data()) v *= factor;
  }
}

Adam::Adam(const ParameterStore& store, AdamOptions options)
    : options_(options) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    m_.emplace_back(store[i].value.shape());
    v_.emplace_back(store[i].value.shape());
  }
}

Real grad_sq_norm(const GradientBuffer& grads) {
  Real sq = 0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    for (auto g : grads[i].data()) sq += g * g;
  }
  return sq;
}

Real clip_scale(Real sq_norm, Real clip_norm) {
  if (clip_norm <= 0) return 1;
  const Real norm = std::sqrt(sq_norm);
  return norm > clip_norm ? clip_norm / norm : 1;
}

void Adam::step(ParameterStore& store, const GradientBuffer& grads) {
  step_scaled(store, grads, clip_scale(grad_sq_norm(grads), options_.clip_norm));
}

void Adam::step_scaled(ParameterStore& store, const GradientBuffer& grads,
                       Real grad_scale) {
  if (grads.size() != store.size() || m_.size() != store.size()) {
    throw ContractError("Adam::step: gradient buffer does not match store");
  }
  ++steps_;
  const Real b1 = options_.beta1;
  const Real b2 = options_.beta2;
  const Real c1 = 1 - std::pow(b1, static_cast<Real>(steps_));
  const Real c2 = 1 - std::pow(b2, static_cast<Real>(steps_));
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto w = store[i].value.data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    auto g = grads[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const Real gk = g[k] * grad_scale;
      m[k] = static_cast<float>(b1 * m[k] + (1 - b1) * gk);
      v[k] = static_cast<float>(b2 * v[k] + (1 - b2) * gk * gk);
      const Real mhat = m[k] / c1;
      const Real vhat = v[k] / c2;
      w[k] = static_cast<float>(
          w[k] - options_.learning_rate * mhat / (std::sqrt(vhat) + options_.epsilon));
    }
  }
}

}  // namespace libs
