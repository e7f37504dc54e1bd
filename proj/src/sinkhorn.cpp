#include "aatn/sinkhorn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "aatn/tensor.hpp"

namespace aatn {

namespace {

// -eps * log sum_k exp(z_k / eps), shifted by the max for stability.
double soft_min(std::span<const double> z, double eps) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : z) mx = std::max(mx, v / eps);
  double s = 0.0;
  for (double v : z) s += std::exp(v / eps - mx);
  return -eps * (mx + std::log(s));
}

// Largest deviation of a row or column sum of the plan from its marginal.
double marginal_error(const std::vector<double>& plan, std::size_t rows, std::size_t cols) {
  const double a = 1.0 / static_cast<double>(rows);
  const double b = 1.0 / static_cast<double>(cols);
  double err = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += plan[i * cols + j];
    err = std::max(err, std::abs(s - a));
  }
  for (std::size_t j = 0; j < cols; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < rows; ++i) s += plan[i * cols + j];
    err = std::max(err, std::abs(s - b));
  }
  return err;
}

// Row minima, then column minima of the row-reduced cost: every row and
// column of exp((f_i + g_j - C_ij) / eps) then has an entry equal to one.
void initial_potentials(std::span<const double> cost, std::size_t rows, std::size_t cols, std::vector<double>& f,
                        std::vector<double>& g) {
  std::fill(f.begin(), f.end(), std::numeric_limits<double>::infinity());
  std::fill(g.begin(), g.end(), std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) f[i] = std::min(f[i], cost[i * cols + j]);
  }
  for (std::size_t j = 0; j < cols; ++j) {
    for (std::size_t i = 0; i < rows; ++i) g[j] = std::min(g[j], cost[i * cols + j] - f[i]);
  }
}

void validate(std::span<const double> cost, std::size_t rows, std::size_t cols, const SinkhornOptions& options) {
  if (rows == 0 || cols == 0 || cost.size() != rows * cols) {
    throw DimensionError("sinkhorn cost of " + std::to_string(cost.size()) + " entries for " + std::to_string(rows) +
                         " x " + std::to_string(cols));
  }
  if (!(options.epsilon > 0.0)) throw ConfigError("sinkhorn epsilon must be positive");
  if (options.max_iters < 1) throw ConfigError("sinkhorn needs at least one iteration");
  for (double c : cost) {
    if (!std::isfinite(c)) throw NumericError("sinkhorn cost matrix contains NaN or Inf");
  }
}

}  // namespace

SinkhornResult sinkhorn_log_domain(std::span<const double> cost, std::size_t rows, std::size_t cols,
                                   const SinkhornOptions& options) {
  validate(cost, rows, cols, options);
  const double eps = options.epsilon;
  const double log_a = -std::log(static_cast<double>(rows));
  const double log_b = -std::log(static_cast<double>(cols));
  const double b = 1.0 / static_cast<double>(cols);

  // Plan entries are exp((f_i + g_j - C_ij) / eps).
  std::vector<double> f(rows), g(cols), col_min(cols), z(std::max(rows, cols));
  initial_potentials(cost, rows, cols, f, g);
  SinkhornResult res;
  res.plan.resize(rows * cols);
  auto build_plan = [&] {
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) res.plan[i * cols + j] = std::exp((f[i] + g[j] - cost[i * cols + j]) / eps);
    }
    res.marginal_error = marginal_error(res.plan, rows, cols);
  };
  for (int it = 1; it <= options.max_iters; ++it) {
    res.iterations = it;
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) z[j] = g[j] - cost[i * cols + j];
      f[i] = eps * log_a + soft_min({z.data(), cols}, eps);
    }
    // Rows match exactly now; the column sums measure the remaining error.
    double err = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      for (std::size_t i = 0; i < rows; ++i) z[i] = f[i] - cost[i * cols + j];
      col_min[j] = soft_min({z.data(), rows}, eps);
      err = std::max(err, std::abs(std::exp((g[j] - col_min[j]) / eps) - b));
    }
    // The assembled plan has the final say; rounding can put it just above tol.
    if (err < options.tol) {
      build_plan();
      if (res.marginal_error < options.tol) {
        res.converged = true;
        return res;
      }
    }
    for (std::size_t j = 0; j < cols; ++j) g[j] = eps * log_b + col_min[j];
  }
  build_plan();
  return res;
}

namespace {

// Scaling iterations u = a / (K v), v = b / (K^T u) on a kernel K that keeps
// log potentials (f, g) absorbed, so entries stay in range. Returns nullopt
// if a row or column of the kernel underflows entirely.
std::optional<SinkhornResult> sinkhorn_stabilized(std::span<const double> cost, std::size_t rows, std::size_t cols,
                                                  const SinkhornOptions& options) {
  constexpr double kAbsorb = 1e50;
  const double eps = options.epsilon;
  const double a = 1.0 / static_cast<double>(rows);
  const double b = 1.0 / static_cast<double>(cols);

  std::vector<double> f(rows), g(cols);
  initial_potentials(cost, rows, cols, f, g);
  // K and its transpose, so both products are sums of contiguous axpys.
  std::vector<double> K(rows * cols), Kt(cols * rows), u(rows, 1.0), v(cols, 1.0), s(rows), t(cols);
  auto build_kernel = [&] {
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) {
        const double k = std::exp((f[i] + g[j] - cost[i * cols + j]) / eps);
        K[i * cols + j] = k;
        Kt[j * rows + i] = k;
      }
    }
  };
  auto absorb = [&] {
    for (std::size_t i = 0; i < rows; ++i) f[i] += eps * std::log(u[i]);
    for (std::size_t j = 0; j < cols; ++j) g[j] += eps * std::log(v[j]);
    std::fill(u.begin(), u.end(), 1.0);
    std::fill(v.begin(), v.end(), 1.0);
    build_kernel();
  };
  build_kernel();

  // y = M x for M stored column by column in `cols_of`.
  auto product = [](const std::vector<double>& cols_of, const std::vector<double>& x, std::vector<double>& y) {
    const std::size_t n = y.size();
    std::fill(y.begin(), y.end(), 0.0);
    for (std::size_t c = 0; c < x.size(); ++c) {
      const double xc = x[c];
      const double* col = cols_of.data() + c * n;
      for (std::size_t r = 0; r < n; ++r) y[r] += xc * col[r];
    }
  };
  constexpr double kInf = std::numeric_limits<double>::infinity();

  SinkhornResult res;
  res.plan.resize(rows * cols);
  auto build_plan = [&] {
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) res.plan[i * cols + j] = u[i] * K[i * cols + j] * v[j];
    }
    for (double p : res.plan) {
      if (!std::isfinite(p)) return false;
    }
    res.marginal_error = marginal_error(res.plan, rows, cols);
    return true;
  };
  for (int it = 1; it <= options.max_iters; ++it) {
    res.iterations = it;
    product(Kt, v, s);
    bool usable = true, in_range = true;
    for (std::size_t i = 0; i < rows; ++i) {
      usable &= s[i] > 0.0 && s[i] < kInf;
      u[i] = a / s[i];
      in_range &= u[i] > 1.0 / kAbsorb && u[i] < kAbsorb;
    }
    if (!usable) return std::nullopt;
    product(K, u, t);
    // Rows match exactly now; the column sums measure the remaining error.
    double err = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      usable &= t[j] > 0.0 && t[j] < kInf;
      err = std::max(err, std::abs(v[j] * t[j] - b));
    }
    if (!usable) return std::nullopt;
    if (err < options.tol) {
      if (!build_plan()) return std::nullopt;
      if (res.marginal_error < options.tol) {
        res.converged = true;
        return res;
      }
    }
    for (std::size_t j = 0; j < cols; ++j) {
      v[j] = b / t[j];
      in_range &= v[j] > 1.0 / kAbsorb && v[j] < kAbsorb;
    }
    if (!in_range) absorb();
  }

  if (!build_plan()) return std::nullopt;
  return res;
}

}  // namespace

SinkhornResult sinkhorn(std::span<const double> cost, std::size_t rows, std::size_t cols,
                        const SinkhornOptions& options) {
  validate(cost, rows, cols, options);
  if (auto res = sinkhorn_stabilized(cost, rows, cols, options)) return *std::move(res);
  return sinkhorn_log_domain(cost, rows, cols, options);
}

}  // namespace aatn
