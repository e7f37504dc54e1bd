#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>

#include "aatn/autodiff.hpp"
#include "aatn/tensor.hpp"

namespace aatn {

/// Named parameter tensors, ordered by name.
template <typename T>
using ParamMap = std::map<std::string, Tensor<T>>;

template <typename U, typename T>
ParamMap<U> cast_params(const ParamMap<T>& params) {
  ParamMap<U> out;
  for (const auto& [name, t] : params) out.emplace(name, t.template cast<U>());
  return out;
}

/// Parameters placed on a tape for one forward pass.
template <typename T>
class BoundParams {
 public:
  /// `trainable` false binds everything as constants (no gradient tracking).
  BoundParams(Tape<T>& tape, const ParamMap<T>& params, bool trainable);

  Var<T> operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  Tape<T>& tape() const { return *tape_; }

  /// Gradients after tape.backward(); zero tensors for unreached parameters.
  ParamMap<T> grads() const;

 private:
  Tape<T>* tape_;
  std::map<std::string, Var<T>> vars_;
};

/// Glorot/Xavier uniform, limit sqrt(6 / (fan_in + fan_out)).
Tensor<float> glorot_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.98f;
  float eps = 1e-8f;
};

struct AdamState {
  AdamConfig config;
  ParamMap<float> first_moment;
  ParamMap<float> second_moment;
  std::uint64_t step_count = 0;
  /// Learning-rate overrides keyed by parameter-name prefix.
  std::map<std::string, float> lr_overrides;

  float lr_for(const std::string& name) const;
};

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Throws NumericError naming the parameter if a gradient is not finite.
void adam_step(ParamMap<float>& params, const ParamMap<float>& grads, AdamState& state);

/// Global L2 norm over all gradient tensors.
double global_norm(const ParamMap<float>& grads);
/// Rescales gradients in place so the global norm is at most `max_norm`.
void clip_global_norm(ParamMap<float>& grads, double max_norm);

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary checkpoint: "AATN", u32 version, then per tensor
/// (u32 name length, name bytes, u32 rank, u32 dims..., f32 payload), all little-endian.
void save_checkpoint(const std::filesystem::path& path, const ParamMap<float>& params);
ParamMap<float> load_checkpoint(const std::filesystem::path& path);

extern template class BoundParams<float>;
extern template class BoundParams<double>;

}  // namespace aatn
