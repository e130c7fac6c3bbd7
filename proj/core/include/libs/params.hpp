#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "libs/tensor.hpp"

namespace libs {

// Ordered, named collection of parameters with stable addresses: moving the
// store keeps every Parameter* handed out earlier valid.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter& add(std::string name, Tensor init);
  Parameter* find(std::string_view name);
  const Parameter* find(std::string_view name) const;
  const Parameter& at(std::string_view name) const;

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  // Copies values from another store with identical names and shapes.
  void assign_from(const ParameterStore& other);
  std::size_t scalar_count() const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

// Uniform(-bound, bound) initialisation from a seeded engine.
Tensor uniform_init(Shape shape, Real bound, std::mt19937_64& rng);

// Uniform real in [0, 1) from the top 53 bits; identical on every platform.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Standard normal via Box-Muller on uniform01.
double normal01(std::mt19937_64& rng);

// SplitMix64 finaliser, used to derive independent child seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

// Rounds every value to the nearest f32.
void round_to_f32(Tensor& t);

// Per-step gradient sums keyed by parameter index of one store.
class GradientBuffer {
 public:
  explicit GradientBuffer(const ParameterStore& store);
  void zero();
  // Adds the graph's gradient for every parameter of the store it saw.
  void accumulate(const Graph& graph, const ParameterStore& store);
  Tensor& operator[](std::size_t i) { return grads_[i]; }
  const Tensor& operator[](std::size_t i) const { return grads_[i]; }
  std::size_t size() const { return grads_.size(); }
  void scale(Real factor);

 private:
  std::vector<Tensor> grads_;
};

// Sum of squared gradient entries.
Real grad_sq_norm(const GradientBuffer& grads);
// Factor that brings a gradient of norm sqrt(sq_norm) within clip_norm.
Real clip_scale(Real sq_norm, Real clip_norm);

struct AdamOptions {
  Real learning_rate = 1e-3;
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real epsilon = 1e-8;
  Real clip_norm = 5.0;  // global gradient-norm clip; <= 0 disables
};

// Adam over one ParameterStore. Moments and updated parameters are rounded
// to f32 after every step so a checkpoint captures the exact state.
class Adam {
 public:
  Adam(const ParameterStore& store, AdamOptions options);

  void step(ParameterStore& store, const GradientBuffer& grads);
  // Step with an externally computed gradient scale (clipping shared across
  // several stores); the options' clip_norm is ignored.
  void step_scaled(ParameterStore& store, const GradientBuffer& grads,
                   Real grad_scale);
  const AdamOptions& options() const { return options_; }

  Real learning_rate() const { return options_.learning_rate; }
  void set_learning_rate(Real lr) { options_.learning_rate = lr; }
  std::uint64_t steps() const { return steps_; }

  // Moment tensors, exposed for checkpointing.
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  void set_steps(std::uint64_t steps) { steps_ = steps; }

 private:
  AdamOptions options_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::uint64_t steps_ = 0;
};

}  // namespace libs
