#include "aatn/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

namespace aatn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T, typename F>
void accumulate(Tape<T>& tape, std::size_t id, F&& f) {
  if (tape.requires_grad(id)) f(tape.grad_buffer(id).data());
}

template <typename T>
void check_same_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
}

// Broadcast layout: out shape plus per-axis strides of each operand (0 on
// broadcast axes), right-aligned as in numpy.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa, sb;
  bool same = false;
};

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t k = s.size(); k-- > 1;) st[k - 1] = st[k] * s[k];
  return st;
}

Broadcast broadcast_layout(const Shape& a, const Shape& b) {
  Broadcast br;
  if (a == b) {
    br.out = a;
    br.same = true;
    return br;
  }
  const std::size_t r = std::max(a.size(), b.size());
  br.out.assign(r, 1);
  br.sa.assign(r, 0);
  br.sb.assign(r, 0);
  const auto st_a = strides_of(a);
  const auto st_b = strides_of(b);
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t ka = k + a.size() >= r ? k + a.size() - r : SIZE_MAX;
    const std::size_t kb = k + b.size() >= r ? k + b.size() - r : SIZE_MAX;
    const std::size_t da = ka == SIZE_MAX ? 1 : a[ka];
    const std::size_t db = kb == SIZE_MAX ? 1 : b[kb];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("shapes " + to_string(a) + " and " + to_string(b) +
                           " are not broadcast-compatible");
    }
    br.out[k] = std::max(da, db);
    if (da != 1) br.sa[k] = st_a[ka];
    if (db != 1) br.sb[k] = st_b[kb];
  }
  return br;
}

template <typename F>
void for_each_broadcast(const Broadcast& br, F&& f) {
  const std::size_t n = numel(br.out);
  if (br.same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  // Innermost axis runs as a plain loop; the odometer advances the rest.
  const std::size_t r = br.out.size();
  const std::size_t inner = br.out[r - 1], sa_in = br.sa[r - 1], sb_in = br.sb[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; i += inner) {
    for (std::size_t t = 0; t < inner; ++t) f(i + t, ia + t * sa_in, ib + t * sb_in);
    for (std::size_t k = r - 1; k-- > 0;) {
      ++idx[k];
      ia += br.sa[k];
      ib += br.sb[k];
      if (idx[k] < br.out[k]) break;
      ia -= br.sa[k] * br.out[k];
      ib -= br.sb[k] * br.out[k];
      idx[k] = 0;
    }
  }
}

// Splits a shape around `axis` into (outer, n, inner).
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit sp;
  for (std::size_t k = 0; k < axis; ++k) sp.outer *= s[k];
  sp.n = s[axis];
  for (std::size_t k = axis + 1; k < s.size(); ++k) sp.inner *= s[k];
  return sp;
}

enum class BinaryKind { add, sub, mul, div };

template <typename T>
Var<T> binary(BinaryKind kind, const Var<T>& a, const Var<T>& b) {
  check_same_tape(a, b);
  const auto br = broadcast_layout(a.shape(), b.shape());
  const auto& av = a.value().data();
  const auto& bv = b.value().data();
  Tensor<T> out(br.out);
  auto o = out.data();
  switch (kind) {
    case BinaryKind::add:
      for_each_broadcast(br, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = av[ia] + bv[ib]; });
      break;
    case BinaryKind::sub:
      for_each_broadcast(br, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = av[ia] - bv[ib]; });
      break;
    case BinaryKind::mul:
      for_each_broadcast(br, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = av[ia] * bv[ib]; });
      break;
    case BinaryKind::div:
      for_each_broadcast(br, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = av[ia] / bv[ib]; });
      break;
  }
  const std::size_t ida = a.id(), idb = b.id();
  return a.tape().record(std::move(out), {a, b}, [kind, br, ida, idb](Tape<T>& t, const Tensor<T>& g) {
    const auto gd = g.data();
    const auto av = t.value(ida).data();
    const auto bv = t.value(idb).data();
    accumulate(t, ida, [&](std::span<T> ga) {
      switch (kind) {
        case BinaryKind::add:
        case BinaryKind::sub:
          for_each_broadcast(br, [&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += gd[i]; });
          break;
        case BinaryKind::mul:
          for_each_broadcast(br, [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += gd[i] * bv[ib]; });
          break;
        case BinaryKind::div:
          for_each_broadcast(br, [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += gd[i] / bv[ib]; });
          break;
      }
    });
    accumulate(t, idb, [&](std::span<T> gb) {
      switch (kind) {
        case BinaryKind::add:
          for_each_broadcast(br, [&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] += gd[i]; });
          break;
        case BinaryKind::sub:
          for_each_broadcast(br, [&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] -= gd[i]; });
          break;
        case BinaryKind::mul:
          for_each_broadcast(br, [&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += gd[i] * av[ia]; });
          break;
        case BinaryKind::div:
          for_each_broadcast(br, [&](std::size_t i, std::size_t ia, std::size_t ib) {
            gb[ib] -= gd[i] * av[ia] / (bv[ib] * bv[ib]);
          });
          break;
      }
    });
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, {}});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, true, false, {}});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
  bool rg = false;
  for (const auto& in : inputs) {
    if (&in.tape() != this) throw ContractError("input recorded on a different tape");
    rg = rg || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, rg, false, rg ? std::move(fn) : BackwardFn{}});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(std::size_t id) {
  auto& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor<T>(n.value.shape(), T{0});
    n.has_grad = true;
  }
  return n.grad;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (&loss.tape() != this) throw ContractError("loss is not on this tape");
  if (loss.value().size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor<T>();
  }
  if (!nodes_[loss.id()].requires_grad) return;
  grad_buffer(loss.id())[0] = T{1};
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    auto& n = nodes_[id];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

template <typename T>
Tensor<T> Tape<T>::grad(const Var<T>& v) const {
  const auto& n = nodes_[v.id()];
  if (n.has_grad) return n.grad;
  return Tensor<T>(n.value.shape(), T{0});
}

// ---------------------------------------------------------------------------
// Linear algebra and shape ops

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  check_same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2 || sa[sa.size() - 1] != sb[sb.size() - 2]) {
    throw DimensionError("matmul shape mismatch: " + to_string(sa) + " x " + to_string(sb));
  }
  const std::size_t p = sa[sa.size() - 2], q = sa.back(), r = sb.back();
  const Shape batch_a(sa.begin(), sa.end() - 2);
  const Shape batch_b(sb.begin(), sb.end() - 2);
  Broadcast bb;
  try {
    bb = broadcast_layout(batch_a, batch_b);
  } catch (const DimensionError&) {
    throw DimensionError("matmul batch mismatch: " + to_string(sa) + " x " + to_string(sb));
  }
  Shape out_shape = bb.out;
  out_shape.push_back(p);
  out_shape.push_back(r);
  Tensor<T> out(out_shape);

  // Batch offsets of each operand for every output batch entry, in units of
  // whole matrices.
  const std::size_t nb = numel(bb.out);
  std::vector<std::size_t> off_a(nb), off_b(nb);
  for_each_broadcast(bb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    off_a[i] = ia;
    off_b[i] = ib;
  });
  const bool fold = batch_b.empty();  // [N.., p, q] x [q, r] is one GEMM

  const T* ad = a.value().data().data();
  const T* bd = b.value().data().data();
  T* od = out.data().data();
  if (fold) {
    const std::size_t rows = numel(batch_a) * p;
    MatMap<T>(od, rows, r).noalias() = ConstMatMap<T>(ad, rows, q) * ConstMatMap<T>(bd, q, r);
  } else {
    for (std::size_t i = 0; i < nb; ++i) {
      MatMap<T>(od + i * p * r, p, r).noalias() =
          ConstMatMap<T>(ad + off_a[i] * p * q, p, q) * ConstMatMap<T>(bd + off_b[i] * q * r, q, r);
    }
  }

  const std::size_t ida = a.id(), idb = b.id();
  const std::size_t rows_a = numel(batch_a) * p;
  return a.tape().record(std::move(out), {a, b},
                         [=, off_a = std::move(off_a), off_b = std::move(off_b)](Tape<T>& t, const Tensor<T>& g) {
                           const T* gd = g.data().data();
                           const T* ad = t.value(ida).data().data();
                           const T* bd = t.value(idb).data().data();
                           accumulate(t, ida, [&](std::span<T> ga) {
                             if (fold) {
                               MatMap<T>(ga.data(), rows_a, q).noalias() +=
                                   ConstMatMap<T>(gd, rows_a, r) * ConstMatMap<T>(bd, q, r).transpose();
                               return;
                             }
                             for (std::size_t i = 0; i < nb; ++i) {
                               MatMap<T>(ga.data() + off_a[i] * p * q, p, q).noalias() +=
                                   ConstMatMap<T>(gd + i * p * r, p, r) *
                                   ConstMatMap<T>(bd + off_b[i] * q * r, q, r).transpose();
                             }
                           });
                           accumulate(t, idb, [&](std::span<T> gb) {
                             if (fold) {
                               MatMap<T>(gb.data(), q, r).noalias() +=
                                   ConstMatMap<T>(ad, rows_a, q).transpose() * ConstMatMap<T>(gd, rows_a, r);
                               return;
                             }
                             for (std::size_t i = 0; i < nb; ++i) {
                               MatMap<T>(gb.data() + off_b[i] * q * r, q, r).noalias() +=
                                   ConstMatMap<T>(ad + off_a[i] * p * q, p, q).transpose() *
                                   ConstMatMap<T>(gd + i * p * r, p, r);
                             }
                           });
                         });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  if (numel(shape) != x.value().size()) {
    throw DimensionError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  const std::size_t id = x.id();
  return x.tape().record(x.value().reshaped(std::move(shape)), {x}, [id](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, id, [&](std::span<T> gx) {
      const auto gd = g.data();
      for (std::size_t i = 0; i < gd.size(); ++i) gx[i] += gd[i];
    });
  });
}

template <typename T>
Var<T> permute(const Var<T>& x, std::vector<std::size_t> axes) {
  const Shape& s = x.shape();
  if (axes.size() != s.size()) {
    throw DimensionError("permutation of rank " + std::to_string(axes.size()) + " for shape " + to_string(s));
  }
  std::vector<bool> seen(s.size(), false);
  for (auto a : axes) {
    if (a >= s.size() || seen[a]) throw DimensionError("invalid permutation for shape " + to_string(s));
    seen[a] = true;
  }
  const auto in_strides = strides_of(s);
  Shape out_shape(s.size());
  std::vector<std::size_t> src_stride(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) {
    out_shape[k] = s[axes[k]];
    src_stride[k] = in_strides[axes[k]];
  }
  // Output position -> input position, computed once and reused by backward.
  const std::size_t n = numel(s);
  std::vector<std::size_t> src(n);
  {
    std::vector<std::size_t> idx(s.size(), 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) {
      src[i] = off;
      for (std::size_t k = s.size(); k-- > 0;) {
        ++idx[k];
        off += src_stride[k];
        if (idx[k] < out_shape[k]) break;
        off -= src_stride[k] * out_shape[k];
        idx[k] = 0;
      }
    }
  }
  Tensor<T> out(out_shape);
  const auto xd = x.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < n; ++i) od[i] = xd[src[i]];
  const std::size_t id = x.id();
  return x.tape().record(std::move(out), {x}, [id, src = std::move(src)](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, id, [&](std::span<T> gx) {
      const auto gd = g.data();
      for (std::size_t i = 0; i < gd.size(); ++i) gx[src[i]] += gd[i];
    });
  });
}

template <typename T>
Var<T> transpose(const Var<T>& x) {
  const std::size_t r = x.shape().size();
  if (r < 2) throw DimensionError("transpose needs rank >= 2, got " + to_string(x.shape()));
  std::vector<std::size_t> axes(r);
  for (std::size_t k = 0; k < r; ++k) axes[k] = k;
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(x, std::move(axes));
}

template <typename T>
Var<T> select(const Var<T>& x, std::size_t index) {
  const Shape& s = x.shape();
  if (s.empty() || index >= s[0]) {
    throw DimensionError("select index " + std::to_string(index) + " out of range for " + to_string(s));
  }
  Shape out_shape(s.begin() + 1, s.end());
  const std::size_t block = numel(out_shape);
  const auto xd = x.value().data();
  std::vector<T> buf(xd.begin() + index * block, xd.begin() + (index + 1) * block);
  const std::size_t id = x.id();
  return x.tape().record(Tensor<T>(std::move(out_shape), std::move(buf)), {x},
                         [id, index, block](Tape<T>& t, const Tensor<T>& g) {
                           accumulate(t, id, [&](std::span<T> gx) {
                             const auto gd = g.data();
                             for (std::size_t i = 0; i < block; ++i) gx[index * block + i] += gd[i];
                           });
                         });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary(BinaryKind::add, a, b);
}
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary(BinaryKind::sub, a, b);
}
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary(BinaryKind::mul, a, b);
}
template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  return binary(BinaryKind::div, a, b);
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v *= factor;
  const std::size_t id = x.id();
  return x.tape().record(std::move(out), {x}, [id, factor](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, id, [&](std::span<T> gx) {
      const auto gd = g.data();
      for (std::size_t i = 0; i < gd.size(); ++i) gx[i] += gd[i] * factor;
    });
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T offset) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v += offset;
  const std::size_t id = x.id();
  return x.tape().record(std::move(out), {x}, [id](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, id, [&](std::span<T> gx) {
      const auto gd = g.data();
      for (std::size_t i = 0; i < gd.size(); ++i) gx[i] += gd[i];
    });
  });
}

template <typename T>
Var<T> apply_unary(UnaryKind kind, const Var<T>& x) {
  const auto xd = x.value().data();
  Tensor<T> out(x.shape());
  auto od = out.data();
  const T slope = static_cast<T>(kLeakyReluSlope);
  for (std::size_t i = 0; i < xd.size(); ++i) {
    const T v = xd[i];
    if (!std::isfinite(v)) throw NumericError("non-finite input to unary op at index " + std::to_string(i));
    switch (kind) {
      case UnaryKind::relu:
        od[i] = v > T{0} ? v : T{0};
        break;
      case UnaryKind::leaky_relu:
        od[i] = v > T{0} ? v : slope * v;
        break;
      case UnaryKind::sigmoid:
        od[i] = v >= T{0} ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v));
        break;
      case UnaryKind::exp:
        od[i] = std::exp(v);
        break;
      case UnaryKind::log:
        if (v <= T{0}) throw NumericError("log of non-positive value " + std::to_string(v) + " at index " + std::to_string(i));
        od[i] = std::log(v);
        break;
      case UnaryKind::neg:
        od[i] = -v;
        break;
      case UnaryKind::sqrt:
        if (v < T{0}) throw NumericError("sqrt of negative value at index " + std::to_string(i));
        od[i] = std::sqrt(v);
        break;
      case UnaryKind::square:
        od[i] = v * v;
        break;
    }
  }
  if (kind == UnaryKind::relu || kind == UnaryKind::leaky_relu) {
    double m = std::numeric_limits<double>::infinity();
    for (T v : xd) m = std::min(m, std::abs(static_cast<double>(v)));
    x.tape().note_kink_distance(m);
  }
  const std::size_t id = x.id();
  const std::size_t oid = x.tape().size();  // id the output will receive
  return x.tape().record(std::move(out), {x}, [kind, id, oid, slope](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, id, [&](std::span<T> gx) {
      const auto gd = g.data();
      const auto xv = t.value(id).data();
      const auto yv = t.value(oid).data();
      for (std::size_t i = 0; i < gd.size(); ++i) {
        switch (kind) {
          case UnaryKind::relu:
            gx[i] += xv[i] > T{0} ? gd[i] : T{0};
            break;
          case UnaryKind::leaky_relu:
            gx[i] += xv[i] > T{0} ? gd[i] : slope * gd[i];
            break;
          case UnaryKind::sigmoid:
            gx[i] += gd[i] * yv[i] * (T{1} - yv[i]);
            break;
          case UnaryKind::exp:
            gx[i] += gd[i] * yv[i];
            break;
          case UnaryKind::log:
            gx[i] += gd[i] / xv[i];
            break;
          case UnaryKind::neg:
            gx[i] -= gd[i];
            break;
          case UnaryKind::sqrt:
            gx[i] += gd[i] / (T{2} * yv[i]);
            break;
          case UnaryKind::square:
            gx[i] += T{2} * gd[i] * xv[i];
            break;
        }
      }
    });
  });
}

template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  Tensor<T> out = x.value();
  double m = std::numeric_limits<double>::infinity();
  for (auto& v : out.data()) {
    m = std::min({m, std::abs(static_cast<double>(v - lo)), std::abs(static_cast<double>(v - hi))});
    v = std::clamp(v, lo, hi);
  }
  x.tape().note_kink_distance(m);
  const std::size_t id = x.id();
  return x.tape().record(std::move(out), {x}, [id, lo, hi](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, id, [&](std::span<T> gx) {
      const auto gd = g.data();
      const auto xv = t.value(id).data();
      for (std::size_t i = 0; i < gd.size(); ++i) {
        if (xv[i] >= lo && xv[i] <= hi) gx[i] += gd[i];
      }
    });
  });
}

template <typename T>
Var<T> gradient_reversal(const Var<T>& x) {
  const std::size_t id = x.id();
  return x.tape().record(x.value(), {x}, [id](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, id, [&](std::span<T> gx) {
      const auto gd = g.data();
      for (std::size_t i = 0; i < gd.size(); ++i) gx[i] -= gd[i];
    });
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s{0};
  for (T v : x.value().data()) s += v;
  const std::size_t id = x.id();
  return x.tape().record(Tensor<T>::scalar(s), {x}, [id](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, id, [&](std::span<T> gx) {
      const T gv = g[0];
      for (auto& v : gx) v += gv;
    });
  });
}

template <typename T>
Var<T> sum(const Var<T>& x, int axis_in, bool keepdim) {
  const Shape& s = x.shape();
  const std::size_t axis = normalize_axis(axis_in, s.size());
  const auto sp = split_at(s, axis);
  Shape out_shape;
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (k != axis) {
      out_shape.push_back(s[k]);
    } else if (keepdim) {
      out_shape.push_back(1);
    }
  }
  Tensor<T> out(out_shape);
  const auto xd = x.value().data();
  auto od = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < sp.n; ++j) {
      const T* row = xd.data() + (o * sp.n + j) * sp.inner;
      T* dst = od.data() + o * sp.inner;
      for (std::size_t k = 0; k < sp.inner; ++k) dst[k] += row[k];
    }
  }
  const std::size_t id = x.id();
  return x.tape().record(std::move(out), {x}, [id, sp](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, id, [&](std::span<T> gx) {
      const auto gd = g.data();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t j = 0; j < sp.n; ++j) {
          T* dst = gx.data() + (o * sp.n + j) * sp.inner;
          const T* src = gd.data() + o * sp.inner;
          for (std::size_t k = 0; k < sp.inner; ++k) dst[k] += src[k];
        }
      }
    });
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

// ---------------------------------------------------------------------------
// Building blocks

template <typename T>
Var<T> softmax(const Var<T>& x, int axis_in) {
  const Shape& s = x.shape();
  const std::size_t axis = normalize_axis(axis_in, s.size());
  const auto sp = split_at(s, axis);
  const auto xd = x.value().data();
  if (!x.value().all_finite()) throw NumericError("softmax input contains NaN or Inf");
  Tensor<T> out(s);
  auto od = out.data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t k = 0; k < sp.inner; ++k) {
      const std::size_t base = o * sp.n * sp.inner + k;
      T mx = xd[base];
      for (std::size_t j = 1; j < sp.n; ++j) mx = std::max(mx, xd[base + j * sp.inner]);
      T z{0};
      for (std::size_t j = 0; j < sp.n; ++j) {
        const T e = std::exp(xd[base + j * sp.inner] - mx);
        od[base + j * sp.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < sp.n; ++j) od[base + j * sp.inner] /= z;
    }
  }
  const std::size_t id = x.id();
  const std::size_t oid = x.tape().size();
  return x.tape().record(std::move(out), {x}, [id, oid, sp](Tape<T>& t, const Tensor<T>& g) {
    accumulate(t, id, [&](std::span<T> gx) {
      const auto gd = g.data();
      const auto y = t.value(oid).data();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t k = 0; k < sp.inner; ++k) {
          const std::size_t base = o * sp.n * sp.inner + k;
          T dot{0};
          for (std::size_t j = 0; j < sp.n; ++j) dot += gd[base + j * sp.inner] * y[base + j * sp.inner];
          for (std::size_t j = 0; j < sp.n; ++j) {
            const std::size_t i = base + j * sp.inner;
            gx[i] += y[i] * (gd[i] - dot);
          }
        }
      }
    });
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps) {
  const std::size_t n = x.shape().back();
  if (gain.shape() != Shape{n} || bias.shape() != Shape{n}) {
    throw DimensionError("layer_norm gain/bias " + to_string(gain.shape()) + "/" + to_string(bias.shape()) +
                         " do not match feature width of " + to_string(x.shape()));
  }
  const std::size_t rows = x.value().size() / n;
  const auto xd = x.value().data();
  const auto gd = gain.value().data();
  const auto bd = bias.value().data();
  Tensor<T> out(x.shape());
  auto od = out.data();
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * n;
    T mu{0};
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<T>(n);
    T var{0};
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(n);
    rstd[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) od[r * n + j] = (row[j] - mu) * rstd[r] * gd[j] + bd[j];
  }
  const std::size_t idx = x.id(), idg = gain.id(), idb = bias.id();
  return x.tape().record(
      std::move(out), {x, gain, bias}, [=, rstd = std::move(rstd)](Tape<T>& t, const Tensor<T>& g) {
        const auto go = g.data();
        const auto xv = t.value(idx).data();
        const auto gv = t.value(idg).data();
        std::vector<T> xhat(n), gh(n);
        const bool need_x = t.requires_grad(idx);
        const bool need_g = t.requires_grad(idg);
        const bool need_b = t.requires_grad(idb);
        auto* gx = need_x ? t.grad_buffer(idx).data().data() : nullptr;
        auto* gg = need_g ? t.grad_buffer(idg).data().data() : nullptr;
        auto* gb = need_b ? t.grad_buffer(idb).data().data() : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* row = xv.data() + r * n;
          const T* grow = go.data() + r * n;
          T mu{0};
          for (std::size_t j = 0; j < n; ++j) mu += row[j];
          mu /= static_cast<T>(n);
          T sum_gh{0}, sum_ghx{0};
          for (std::size_t j = 0; j < n; ++j) {
            xhat[j] = (row[j] - mu) * rstd[r];
            gh[j] = grow[j] * gv[j];
            sum_gh += gh[j];
            sum_ghx += gh[j] * xhat[j];
            if (gg) gg[j] += grow[j] * xhat[j];
            if (gb) gb[j] += grow[j];
          }
          if (gx) {
            const T inv_n = T{1} / static_cast<T>(n);
            for (std::size_t j = 0; j < n; ++j) {
              gx[r * n + j] += rstd[r] * (gh[j] - inv_n * sum_gh - xhat[j] * inv_n * sum_ghx);
            }
          }
        }
      });
}

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids, const Shape& ids_shape) {
  if (table.shape().size() != 2) throw DimensionError("embedding table must be rank 2, got " + to_string(table.shape()));
  if (numel(ids_shape) != ids.size()) throw DimensionError("id count does not match " + to_string(ids_shape));
  const std::size_t vocab = table.shape()[0], width = table.shape()[1];
  Shape out_shape = ids_shape;
  out_shape.push_back(width);
  Tensor<T> out(out_shape);
  const auto td = table.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw InputError("token id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                       " is outside vocabulary of size " + std::to_string(vocab));
    }
    std::copy_n(td.data() + ids[i] * width, width, od.data() + i * width);
  }
  const std::size_t id = table.id();
  return table.tape().record(std::move(out), {table},
                             [id, width, ids = std::vector<std::int32_t>(ids.begin(), ids.end())](
                                 Tape<T>& t, const Tensor<T>& g) {
                               accumulate(t, id, [&](std::span<T> gt) {
                                 const auto gd = g.data();
                                 for (std::size_t i = 0; i < ids.size(); ++i) {
                                   T* dst = gt.data() + ids[i] * width;
                                   for (std::size_t k = 0; k < width; ++k) dst[k] += gd[i * width + k];
                                 }
                               });
                             });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int32_t> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size()) {
    throw DimensionError("cross_entropy expects [B, C] logits matching " + std::to_string(labels.size()) +
                         " labels, got " + to_string(s));
  }
  const std::size_t rows = s[0], classes = s[1];
  const auto ld = logits.value().data();
  std::vector<T> probs(rows * classes);
  T total{0};
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes) {
      throw InputError("label " + std::to_string(labels[r]) + " at row " + std::to_string(r) + " out of range");
    }
    const T* row = ld.data() + r * classes;
    T mx = *std::max_element(row, row + classes);
    T z{0};
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] = std::exp(row[c] - lse);
    total += lse - row[labels[r]];
  }
  const std::size_t id = logits.id();
  return logits.tape().record(
      Tensor<T>::scalar(total / static_cast<T>(rows)), {logits},
      [id, rows, classes, probs = std::move(probs), labels = std::vector<std::int32_t>(labels.begin(), labels.end())](
          Tape<T>& t, const Tensor<T>& g) {
        accumulate(t, id, [&](std::span<T> gl) {
          const T coef = g[0] / static_cast<T>(rows);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < classes; ++c) {
              const T onehot = static_cast<std::size_t>(labels[r]) == c ? T{1} : T{0};
              gl[r * classes + c] += coef * (probs[r * classes + c] - onehot);
            }
          }
        });
      });
}

// ---------------------------------------------------------------------------
// Instantiations

template class Tape<float>;
template class Tape<double>;

#define AATN_INSTANTIATE_OPS(T)                                                                         \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                                 \
  template Var<T> reshape(const Var<T>&, Shape);                                                        \
  template Var<T> permute(const Var<T>&, std::vector<std::size_t>);                                     \
  template Var<T> transpose(const Var<T>&);                                                             \
  template Var<T> select(const Var<T>&, std::size_t);                                                   \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> div(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> scale(const Var<T>&, T);                                                              \
  template Var<T> add_scalar(const Var<T>&, T);                                                         \
  template Var<T> apply_unary(UnaryKind, const Var<T>&);                                                \
  template Var<T> clamp(const Var<T>&, T, T);                                                           \
  template Var<T> gradient_reversal(const Var<T>&);                                                     \
  template Var<T> sum(const Var<T>&);                                                                   \
  template Var<T> sum(const Var<T>&, int, bool);                                                        \
  template Var<T> mean(const Var<T>&);                                                                  \
  template Var<T> softmax(const Var<T>&, int);                                                          \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                           \
  template Var<T> embedding(const Var<T>&, std::span<const std::int32_t>, const Shape&);                \
  template Var<T> cross_entropy(const Var<T>&, std::span<const std::int32_t>);

AATN_INSTANTIATE_OPS(float)
AATN_INSTANTIATE_OPS(double)

}  // namespace aatn
