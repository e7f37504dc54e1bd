#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "aatn/autodiff.hpp"
#include "aatn/params.hpp"

namespace aatn::test {

using Rng = std::mt19937_64;

inline std::vector<double> normals(Rng& rng, std::size_t n, double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

inline std::vector<double> uniforms(Rng& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

// Values bounded away from zero, for ops with a kink there.
inline std::vector<double> off_zero(Rng& rng, std::size_t n, double gap = 0.05) {
  auto v = uniforms(rng, n, gap, 2.0);
  std::bernoulli_distribution neg(0.5);
  for (auto& x : v) x = neg(rng) ? -x : x;
  return v;
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

template <typename T>
Tensor<T> tensor(Shape shape, const std::vector<double>& values) {
  return Tensor<T>(std::move(shape), std::vector<T>(values.begin(), values.end()));
}

// Scalar-valued function of named double tensors, built on a fresh tape.
using ScalarFn = std::function<Var<double>(const BoundParams<double>&)>;

// max over tensors of |a - n|_2 / max(|a|_2, |n|_2, 1e-8) between the tape
// gradient and central differences with half step h.
inline double fd_rel_error(const ParamMap<double>& inputs, const ScalarFn& f, double h = 1e-3) {
  ParamMap<double> grads;
  {
    Tape<double> tape;
    BoundParams<double> b(tape, inputs, true);
    tape.backward(f(b));
    grads = b.grads();
  }
  auto value = [&](const ParamMap<double>& p) {
    Tape<double> tape;
    BoundParams<double> b(tape, p, false);
    return f(b).value().item();
  };
  double worst = 0.0;
  ParamMap<double> probe = inputs;
  for (auto& [name, t] : probe) {
    double diff = 0.0, an = 0.0, nu = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + h;
      const double up = value(probe);
      t[i] = orig - h;
      const double down = value(probe);
      t[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = grads.at(name)[i];
      diff += (analytic - numeric) * (analytic - numeric);
      an += analytic * analytic;
      nu += numeric * numeric;
    }
    worst = std::max(worst, std::sqrt(diff) / std::max({std::sqrt(an), std::sqrt(nu), 1e-8}));
  }
  return worst;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
std::vector<double> as_doubles(const Tensor<T>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

}  // namespace aatn::test
