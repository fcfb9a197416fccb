#include "bimot/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace bimot {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::current() == nullptr) return false;
  for (const auto* x : inputs) {
    if (x->requires_grad()) return true;
  }
  return false;
}

template <typename T, typename F>
Tensor<T> attach(Tensor<T> out, F&& fn) {
  out.node().requires_grad = true;
  out.node().backward_fn = std::forward<F>(fn);
  Tape<T>::current()->record(out.node_ptr());
  return out;
}

template <typename T>
void require_matrix(const Tensor<T>& x, const char* op) {
  if (x.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(x.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <typename T>
MatMap<T> grad_map(TensorNode<T>& n, std::size_t r, std::size_t c) {
  return MatMap<T>(n.grad_storage().data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

template <typename T>
ConstMatMap<T> value_map(const TensorNode<T>& n, std::size_t r, std::size_t c) {
  return ConstMatMap<T>(n.value.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

template <typename T>
ConstMatMap<T> out_grad_map(const TensorNode<T>& n, std::size_t r, std::size_t c) {
  return ConstMatMap<T>(n.grad.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  std::vector<T> y(x.numel());
  auto xs = x.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(xs[i]);
  Tensor<T> out(x.shape(), std::move(y));
  if (!recording<T>({&x})) return out;
  NodePtr<T> xn = x.node_ptr();
  return attach(out, [xn, deriv](TensorNode<T>& o) {
    auto& g = xn->grad_storage();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * deriv(xn->value[i], o.value[i]);
  });
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor<T> out(Shape{m, n});
  MatMap<T>(out.values().data(), m, n).noalias() =
      value_map(a.node(), m, k) * value_map(b.node(), k, n);
  if (!recording<T>({&a, &b})) return out;
  NodePtr<T> an = a.node_ptr(), bn = b.node_ptr();
  return attach(out, [an, bn, m, k, n](TensorNode<T>& o) {
    auto g = out_grad_map(o, m, n);
    if (an->requires_grad) grad_map(*an, m, k).noalias() += g * value_map(*bn, k, n).transpose();
    if (bn->requires_grad) grad_map(*bn, k, n).noalias() += value_map(*an, m, k).transpose() * g;
  });
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt: inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()) + "^T");
  }
  Tensor<T> out(Shape{m, n});
  MatMap<T>(out.values().data(), m, n).noalias() =
      value_map(a.node(), m, k) * value_map(b.node(), n, k).transpose();
  if (!recording<T>({&a, &b})) return out;
  NodePtr<T> an = a.node_ptr(), bn = b.node_ptr();
  return attach(out, [an, bn, m, k, n](TensorNode<T>& o) {
    auto g = out_grad_map(o, m, n);
    if (an->requires_grad) grad_map(*an, m, k).noalias() += g * value_map(*bn, n, k);
    if (bn->requires_grad) grad_map(*bn, n, k).noalias() += g.transpose() * value_map(*an, m, k);
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<T> out(Shape{n, m});
  MatMap<T>(out.values().data(), n, m) = value_map(a.node(), m, n).transpose();
  if (!recording<T>({&a})) return out;
  NodePtr<T> an = a.node_ptr();
  return attach(out, [an, m, n](TensorNode<T>& o) {
    grad_map(*an, m, n) += out_grad_map(o, n, m).transpose();
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> y(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  Tensor<T> out(a.shape(), std::move(y));
  if (!recording<T>({&a, &b})) return out;
  NodePtr<T> an = a.node_ptr(), bn = b.node_ptr();
  return attach(out, [an, bn](TensorNode<T>& o) {
    for (const auto& n : {an, bn}) {
      if (!n->requires_grad) continue;
      auto& g = n->grad_storage();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> y(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] - bv[i];
  Tensor<T> out(a.shape(), std::move(y));
  if (!recording<T>({&a, &b})) return out;
  NodePtr<T> an = a.node_ptr(), bn = b.node_ptr();
  return attach(out, [an, bn](TensorNode<T>& o) {
    if (an->requires_grad) {
      auto& g = an->grad_storage();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->grad_storage();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> y(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  Tensor<T> out(a.shape(), std::move(y));
  if (!recording<T>({&a, &b})) return out;
  NodePtr<T> an = a.node_ptr(), bn = b.node_ptr();
  return attach(out, [an, bn](TensorNode<T>& o) {
    if (an->requires_grad) {
      auto& g = an->grad_storage();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->grad_storage();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * an->value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary(a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  return unary(a, [offset](T x) { return x + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& v) {
  const std::size_t r = x.rows(), c = x.cols();
  if (v.numel() != c) {
    throw ShapeError("add_row: row vector " + shape_str(v.shape()) + " does not match " +
                     shape_str(x.shape()));
  }
  std::vector<T> y(x.numel());
  auto xv = x.values(), vv = v.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = xv[i * c + j] + vv[j];
  Tensor<T> out(x.shape(), std::move(y));
  if (!recording<T>({&x, &v})) return out;
  NodePtr<T> xn = x.node_ptr(), vn = v.node_ptr();
  return attach(out, [xn, vn, r, c](TensorNode<T>& o) {
    if (xn->requires_grad) {
      auto& g = xn->grad_storage();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (vn->requires_grad) {
      auto& g = vn->grad_storage();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j];
    }
  });
}

template <typename T>
Tensor<T> mul_row(const Tensor<T>& x, const Tensor<T>& v) {
  const std::size_t r = x.rows(), c = x.cols();
  if (v.numel() != c) {
    throw ShapeError("mul_row: row vector " + shape_str(v.shape()) + " does not match " +
                     shape_str(x.shape()));
  }
  std::vector<T> y(x.numel());
  auto xv = x.values(), vv = v.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = xv[i * c + j] * vv[j];
  Tensor<T> out(x.shape(), std::move(y));
  if (!recording<T>({&x, &v})) return out;
  NodePtr<T> xn = x.node_ptr(), vn = v.node_ptr();
  return attach(out, [xn, vn, r, c](TensorNode<T>& o) {
    if (xn->requires_grad) {
      auto& g = xn->grad_storage();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[i * c + j] * vn->value[j];
    }
    if (vn->requires_grad) {
      auto& g = vn->grad_storage();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += o.grad[i * c + j] * xn->value[i * c + j];
    }
  });
}

template <typename T>
Tensor<T> mul_col(const Tensor<T>& x, const Tensor<T>& s) {
  const std::size_t r = x.rows(), c = x.cols();
  if (s.numel() != r) {
    throw ShapeError("mul_col: column " + shape_str(s.shape()) + " does not match " +
                     shape_str(x.shape()));
  }
  std::vector<T> y(x.numel());
  auto xv = x.values(), sv = s.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = xv[i * c + j] * sv[i];
  Tensor<T> out(x.shape(), std::move(y));
  if (!recording<T>({&x, &s})) return out;
  NodePtr<T> xn = x.node_ptr(), sn = s.node_ptr();
  return attach(out, [xn, sn, r, c](TensorNode<T>& o) {
    if (xn->requires_grad) {
      auto& g = xn->grad_storage();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[i * c + j] * sn->value[i];
    }
    if (sn->requires_grad) {
      auto& g = sn->grad_storage();
      for (std::size_t i = 0; i < r; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < c; ++j) acc += o.grad[i * c + j] * xn->value[i * c + j];
        g[i] += acc;
      }
    }
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T k0 = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k1 = T(0.044715);
  return unary(
      x,
      [](T v) { return T(0.5) * v * (T(1) + std::tanh(k0 * (v + k1 * v * v * v))); },
      [](T v, T) {
        const T th = std::tanh(k0 * (v + k1 * v * v * v));
        return T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * k0 * (T(1) + T(3) * k1 * v * v);
      });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return unary(
      x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int rank = static_cast<int>(x.rank());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < rank; ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  std::vector<T> y(x.numel());
  auto xv = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        y[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) y[base + j * inner] /= total;
    }
  }
  Tensor<T> out(x.shape(), std::move(y));
  if (!recording<T>({&x})) return out;
  NodePtr<T> xn = x.node_ptr();
  return attach(out, [xn, outer, inner, n](TensorNode<T>& o) {
    auto& g = xn->grad_storage();
    for (std::size_t a = 0; a < outer; ++a) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = a * n * inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += o.grad[base + j * inner] * o.value[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          g[idx] += o.value[idx] * (o.grad[idx] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps) {
  const std::size_t r = x.rows(), d = x.cols();
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layer_norm: affine parameters " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " do not match " + shape_str(x.shape()));
  }
  std::vector<T> y(x.numel()), xhat(x.numel()), rstd(r);
  auto xv = x.values(), gv = gain.values(), bv = bias.values();
  for (std::size_t i = 0; i < r; ++i) {
    const T* row = xv.data() + i * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= T(d);
    const T rs = T(1) / std::sqrt(var + T(eps));
    rstd[i] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * rs;
      xhat[i * d + j] = h;
      y[i * d + j] = h * gv[j] + bv[j];
    }
  }
  Tensor<T> out(x.shape(), std::move(y));
  if (!recording<T>({&x, &gain, &bias})) return out;
  NodePtr<T> xn = x.node_ptr(), gn = gain.node_ptr(), bn = bias.node_ptr();
  return attach(out, [xn, gn, bn, r, d, xhat = std::move(xhat), rstd = std::move(rstd)](TensorNode<T>& o) {
    if (gn->requires_grad) {
      auto& g = gn->grad_storage();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[i * d + j] * xhat[i * d + j];
    }
    if (bn->requires_grad) {
      auto& g = bn->grad_storage();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[i * d + j];
    }
    if (xn->requires_grad) {
      auto& g = xn->grad_storage();
      for (std::size_t i = 0; i < r; ++i) {
        T mean_dh = 0, mean_dh_h = 0;
        for (std::size_t j = 0; j < d; ++j) {
          const T dh = o.grad[i * d + j] * gn->value[j];
          mean_dh += dh;
          mean_dh_h += dh * xhat[i * d + j];
        }
        mean_dh /= T(d);
        mean_dh_h /= T(d);
        for (std::size_t j = 0; j < d; ++j) {
          const T dh = o.grad[i * d + j] * gn->value[j];
          g[i * d + j] += rstd[i] * (dh - mean_dh - xhat[i * d + j] * mean_dh_h);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> ids) {
  require_matrix(table, "embedding_lookup");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw ShapeError("embedding_lookup: no ids");
  std::vector<T> y(ids.size() * d);
  auto tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("embedding_lookup: id " + std::to_string(ids[i]) + " outside [0," +
                       std::to_string(vocab) + ")");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, y.data() + i * d);
  }
  Tensor<T> out(Shape{ids.size(), d}, std::move(y));
  if (!recording<T>({&table})) return out;
  NodePtr<T> tn = table.node_ptr();
  return attach(out, [tn, d, id_copy = std::vector<int>(ids.begin(), ids.end())](TensorNode<T>& o) {
    auto& g = tn->grad_storage();
    for (std::size_t i = 0; i < id_copy.size(); ++i) {
      T* dst = g.data() + static_cast<std::size_t>(id_copy[i]) * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += o.grad[i * d + j];
    }
  });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  const std::size_t c = parts.front().cols();
  std::size_t r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) {
      throw ShapeError("concat_rows: column mismatch " + shape_str(parts.front().shape()) + " vs " +
                       shape_str(p.shape()));
    }
    r += p.rows();
  }
  std::vector<T> y;
  y.reserve(r * c);
  bool grad = false;
  for (const auto& p : parts) {
    y.insert(y.end(), p.values().begin(), p.values().end());
    grad = grad || recording<T>({&p});
  }
  Tensor<T> out(Shape{r, c}, std::move(y));
  if (!grad) return out;
  std::vector<NodePtr<T>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node_ptr());
  return attach(out, [nodes](TensorNode<T>& o) {
    std::size_t offset = 0;
    for (const auto& n : nodes) {
      const std::size_t len = n->value.size();
      if (n->requires_grad) {
        auto& g = n->grad_storage();
        for (std::size_t i = 0; i < len; ++i) g[i] += o.grad[offset + i];
      }
      offset += len;
    }
  });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  const std::size_t r = parts.front().rows();
  std::size_t c = 0;
  bool grad = false;
  for (const auto& p : parts) {
    if (p.rows() != r) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(parts.front().shape()) + " vs " +
                       shape_str(p.shape()));
    }
    c += p.cols();
    grad = grad || recording<T>({&p});
  }
  std::vector<T> y(r * c);
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    auto pv = p.values();
    for (std::size_t i = 0; i < r; ++i) std::copy_n(pv.data() + i * pc, pc, y.data() + i * c + col);
    col += pc;
  }
  Tensor<T> out(Shape{r, c}, std::move(y));
  if (!grad) return out;
  std::vector<NodePtr<T>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node_ptr());
  return attach(out, [nodes, r, c](TensorNode<T>& o) {
    std::size_t col0 = 0;
    for (const auto& n : nodes) {
      const std::size_t pc = n->shape.back();
      if (n->requires_grad) {
        auto& g = n->grad_storage();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < pc; ++j) g[i * pc + j] += o.grad[i * c + col0 + j];
      }
      col0 += pc;
    }
  });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  const std::size_t r = x.rows(), c = x.cols();
  if (begin >= end || end > c) {
    throw ShapeError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t w = end - begin;
  std::vector<T> y(r * w);
  auto xv = x.values();
  for (std::size_t i = 0; i < r; ++i) std::copy_n(xv.data() + i * c + begin, w, y.data() + i * w);
  Tensor<T> out(Shape{r, w}, std::move(y));
  if (!recording<T>({&x})) return out;
  NodePtr<T> xn = x.node_ptr();
  return attach(out, [xn, r, c, w, begin](TensorNode<T>& o) {
    auto& g = xn->grad_storage();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * c + begin + j] += o.grad[i * w + j];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(x.values().begin(), x.values().end()));
  if (!recording<T>({&x})) return out;
  NodePtr<T> xn = x.node_ptr();
  return attach(out, [xn](TensorNode<T>& o) {
    auto& g = xn->grad_storage();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> index_select(const Tensor<T>& x, std::span<const std::size_t> rows) {
  const std::size_t r = x.rows(), c = x.cols();
  if (rows.empty()) throw ShapeError("index_select: no rows requested");
  std::vector<T> y(rows.size() * c);
  auto xv = x.values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= r) {
      throw IndexError("index_select: row " + std::to_string(rows[i]) + " outside " + shape_str(x.shape()));
    }
    std::copy_n(xv.data() + rows[i] * c, c, y.data() + i * c);
  }
  Tensor<T> out(Shape{rows.size(), c}, std::move(y));
  if (!recording<T>({&x})) return out;
  NodePtr<T> xn = x.node_ptr();
  return attach(out, [xn, c, idx = std::vector<std::size_t>(rows.begin(), rows.end())](TensorNode<T>& o) {
    auto& g = xn->grad_storage();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += o.grad[i * c + j];
  });
}

template <typename T>
Tensor<T> scatter_by_index(const Tensor<T>& dest, const Tensor<T>& src,
                           std::span<const std::size_t> positions) {
  const std::size_t r = dest.rows(), c = dest.cols();
  if (src.cols() != c || src.rows() != positions.size()) {
    throw ShapeError("scatter_by_index: source " + shape_str(src.shape()) + " with " +
                     std::to_string(positions.size()) + " positions into " + shape_str(dest.shape()));
  }
  std::vector<std::uint8_t> written(r, 0);
  for (auto p : positions) {
    if (p >= r) throw IndexError("scatter_by_index: position " + std::to_string(p) + " outside " +
                                 shape_str(dest.shape()));
    if (written[p]) throw IndexError("scatter_by_index: position " + std::to_string(p) + " repeated");
    written[p] = 1;
  }
  std::vector<T> y(dest.values().begin(), dest.values().end());
  auto sv = src.values();
  for (std::size_t i = 0; i < positions.size(); ++i) std::copy_n(sv.data() + i * c, c, y.data() + positions[i] * c);
  Tensor<T> out(dest.shape(), std::move(y));
  if (!recording<T>({&dest, &src})) return out;
  NodePtr<T> dn = dest.node_ptr(), sn = src.node_ptr();
  return attach(out, [dn, sn, c, written = std::move(written),
                      pos = std::vector<std::size_t>(positions.begin(), positions.end())](TensorNode<T>& o) {
    if (dn->requires_grad) {
      auto& g = dn->grad_storage();
      for (std::size_t i = 0; i < written.size(); ++i) {
        if (written[i]) continue;
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[i * c + j];
      }
    }
    if (sn->requires_grad) {
      auto& g = sn->grad_storage();
      for (std::size_t i = 0; i < pos.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[pos[i] * c + j];
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.values()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  if (!recording<T>({&x})) return out;
  NodePtr<T> xn = x.node_ptr();
  return attach(out, [xn](TensorNode<T>& o) {
    auto& g = xn->grad_storage();
    for (auto& gi : g) gi += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.numel()));
}

template <typename T>
Tensor<T> row_sum_squares(const Tensor<T>& x) {
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<T> y(r, T(0));
  auto xv = x.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i] += xv[i * c + j] * xv[i * c + j];
  Tensor<T> out(Shape{r}, std::move(y));
  if (!recording<T>({&x})) return out;
  NodePtr<T> xn = x.node_ptr();
  return attach(out, [xn, r, c](TensorNode<T>& o) {
    auto& g = xn->grad_storage();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += T(2) * xn->value[i * c + j] * o.grad[i];
  });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.numel() != b.numel()) {
    throw ShapeError("mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.numel();
  auto av = a.values(), bv = b.values();
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) total += (av[i] - bv[i]) * (av[i] - bv[i]);
  Tensor<T> out = Tensor<T>::scalar(total / T(n));
  if (!recording<T>({&a, &b})) return out;
  NodePtr<T> an = a.node_ptr(), bn = b.node_ptr();
  return attach(out, [an, bn, n](TensorNode<T>& o) {
    const T k = T(2) * o.grad[0] / T(n);
    if (an->requires_grad) {
      auto& g = an->grad_storage();
      for (std::size_t i = 0; i < n; ++i) g[i] += k * (an->value[i] - bn->value[i]);
    }
    if (bn->requires_grad) {
      auto& g = bn->grad_storage();
      for (std::size_t i = 0; i < n; ++i) g[i] -= k * (an->value[i] - bn->value[i]);
    }
  });
}

template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.numel() != b.numel()) {
    throw ShapeError("smooth_l1: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.numel();
  auto av = a.values(), bv = b.values();
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = av[i] - bv[i];
    total += std::abs(d) < T(1) ? T(0.5) * d * d : std::abs(d) - T(0.5);
  }
  Tensor<T> out = Tensor<T>::scalar(total / T(n));
  if (!recording<T>({&a, &b})) return out;
  NodePtr<T> an = a.node_ptr(), bn = b.node_ptr();
  return attach(out, [an, bn, n](TensorNode<T>& o) {
    const T k = o.grad[0] / T(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T d = an->value[i] - bn->value[i];
      const T dd = std::abs(d) < T(1) ? d : (d > 0 ? T(1) : T(-1));
      if (an->requires_grad) an->grad_storage()[i] += k * dd;
      if (bn->requires_grad) bn->grad_storage()[i] -= k * dd;
    }
  });
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
  const std::size_t r = x.rows(), c = x.cols();
  // y = x / (|x| + eps); norms holds |x|, the backward uses the exact Jacobian of that form.
  std::vector<T> y(x.numel()), norms(r);
  auto xv = x.values();
  constexpr T eps = T(1e-12);
  for (std::size_t i = 0; i < r; ++i) {
    T ss = 0;
    for (std::size_t j = 0; j < c; ++j) ss += xv[i * c + j] * xv[i * c + j];
    norms[i] = std::sqrt(ss);
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = xv[i * c + j] / (norms[i] + eps);
  }
  Tensor<T> out(x.shape(), std::move(y));
  if (!recording<T>({&x})) return out;
  NodePtr<T> xn = x.node_ptr();
  return attach(out, [xn, r, c, norms = std::move(norms)](TensorNode<T>& o) {
    auto& g = xn->grad_storage();
    for (std::size_t i = 0; i < r; ++i) {
      const T n = norms[i], s = n + eps;
      T dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += o.grad[i * c + j] * xn->value[i * c + j];
      const T k = n > T(0) ? dot / (n * s * s) : T(0);
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[i * c + j] / s - xn->value[i * c + j] * k;
    }
  });
}

template <typename T>
Tensor<T> segment_mean(const Tensor<T>& x, std::span<const RowSegment> segments) {
  const std::size_t r = x.rows(), c = x.cols();
  if (segments.empty()) throw ShapeError("segment_mean: no segments");
  std::vector<T> y(segments.size() * c, T(0));
  auto xv = x.values();
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto [b, len] = segments[s];
    if (len == 0 || b + len > r) throw IndexError("segment_mean: segment outside " + shape_str(x.shape()));
    for (std::size_t i = b; i < b + len; ++i)
      for (std::size_t j = 0; j < c; ++j) y[s * c + j] += xv[i * c + j];
    for (std::size_t j = 0; j < c; ++j) y[s * c + j] /= T(len);
  }
  Tensor<T> out(Shape{segments.size(), c}, std::move(y));
  if (!recording<T>({&x})) return out;
  NodePtr<T> xn = x.node_ptr();
  return attach(out, [xn, c, segs = std::vector<RowSegment>(segments.begin(), segments.end())](TensorNode<T>& o) {
    auto& g = xn->grad_storage();
    for (std::size_t s = 0; s < segs.size(); ++s) {
      const auto [b, len] = segs[s];
      for (std::size_t i = b; i < b + len; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[s * c + j] / T(len);
    }
  });
}

template <typename T>
Tensor<T> cross_entropy_masked(const Tensor<T>& logits, std::span<const int> targets,
                               std::span<const std::uint8_t> mask) {
  const std::size_t k = logits.rows(), vocab = logits.cols();
  if (targets.size() != k || mask.size() != k) {
    throw ShapeError("cross_entropy_masked: " + std::to_string(targets.size()) + " targets / " +
                     std::to_string(mask.size()) + " mask entries for logits " + shape_str(logits.shape()));
  }
  std::size_t count = 0;
  for (std::size_t i = 0; i < k; ++i) {
    if (!mask[i]) continue;
    ++count;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab) {
      throw IndexError("cross_entropy_masked: target " + std::to_string(targets[i]) + " outside [0," +
                       std::to_string(vocab) + ")");
    }
  }
  if (count == 0) throw EmptyLossError("cross_entropy_masked: every position is masked out");
  auto lv = logits.values();
  std::vector<T> probs(k * vocab, T(0));
  T total = 0;
  for (std::size_t i = 0; i < k; ++i) {
    if (!mask[i]) continue;
    const T* row = lv.data() + i * vocab;
    const T mx = *std::max_element(row, row + vocab);
    T z = 0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
    const T lse = mx + std::log(z);
    total += lse - row[targets[i]];
    for (std::size_t j = 0; j < vocab; ++j) probs[i * vocab + j] = std::exp(row[j] - lse);
  }
  Tensor<T> out = Tensor<T>::scalar(total / T(count));
  if (!recording<T>({&logits})) return out;
  NodePtr<T> ln = logits.node_ptr();
  return attach(out, [ln, k, vocab, count, probs = std::move(probs),
                      tgt = std::vector<int>(targets.begin(), targets.end()),
                      msk = std::vector<std::uint8_t>(mask.begin(), mask.end())](TensorNode<T>& o) {
    auto& g = ln->grad_storage();
    const T w = o.grad[0] / T(count);
    for (std::size_t i = 0; i < k; ++i) {
      if (!msk[i]) continue;
      for (std::size_t j = 0; j < vocab; ++j) g[i * vocab + j] += w * probs[i * vocab + j];
      g[i * vocab + static_cast<std::size_t>(tgt[i])] -= w;
    }
  });
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    const AttentionLayout& layout) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require_matrix(v, "attention");
  const std::size_t d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d || k.dim(0) != v.dim(0)) {
    throw ShapeError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                     shape_str(v.shape()) + " are inconsistent");
  }
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible into " +
                     std::to_string(heads) + " heads");
  }
  for (const auto& s : layout.segments) {
    if (s.q_begin + s.q_length > q.dim(0) || s.kv_begin + s.kv_length > k.dim(0) || s.q_length == 0 ||
        s.kv_length == 0) {
      throw IndexError("attention: segment outside the query/key rows");
    }
    if (layout.causal && s.q_length != s.kv_length) {
      throw ContractError("attention: causal segments need equal query and key lengths");
    }
    if (!layout.stream.empty() &&
        (s.q_begin + s.q_length > layout.stream.size() || s.kv_begin + s.kv_length > layout.stream.size())) {
      throw IndexError("attention: stream ids do not cover the segment");
    }
  }
  const std::size_t dh = d / heads;
  const T scale_factor = T(1) / std::sqrt(T(dh));
  const std::size_t nseg = layout.segments.size();
  auto probs = std::make_shared<std::vector<RowMat<T>>>(nseg * heads);
  Tensor<T> out(Shape{q.dim(0), d});
  T* ov = out.values().data();
  const T* qv = q.values().data();
  const T* kv = k.values().data();
  const T* vv = v.values().data();
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
  const bool has_stream = !layout.stream.empty();
  for (std::size_t s = 0; s < nseg; ++s) {
    const auto& seg = layout.segments[s];
    const auto ql = static_cast<Eigen::Index>(seg.q_length), kl = static_cast<Eigen::Index>(seg.kv_length);
    for (std::size_t h = 0; h < heads; ++h) {
      ConstStridedMap<T> qh(qv + seg.q_begin * d + h * dh, ql, dh, stride);
      ConstStridedMap<T> kh(kv + seg.kv_begin * d + h * dh, kl, dh, stride);
      ConstStridedMap<T> vh(vv + seg.kv_begin * d + h * dh, kl, dh, stride);
      RowMat<T>& p = (*probs)[s * heads + h];
      p.noalias() = (qh * kh.transpose()) * scale_factor;
      for (Eigen::Index i = 0; i < ql; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index j = 0; j < kl; ++j) {
          const bool visible =
              (!layout.causal || j <= i) &&
              (!has_stream || layout.stream[seg.q_begin + i] == layout.stream[seg.kv_begin + j]);
          if (!visible) p(i, j) = -std::numeric_limits<T>::infinity();
          mx = std::max(mx, p(i, j));
        }
        if (mx == -std::numeric_limits<T>::infinity()) {
          p.row(i).setZero();
          continue;
        }
        T total = 0;
        for (Eigen::Index j = 0; j < kl; ++j) {
          const T e = std::exp(p(i, j) - mx);
          p(i, j) = e;
          total += e;
        }
        p.row(i) /= total;
      }
      StridedMap<T> oh(ov + seg.q_begin * d + h * dh, ql, dh, stride);
      oh.noalias() = p * vh;
    }
  }
  if (!recording<T>({&q, &k, &v})) return out;
  NodePtr<T> qn = q.node_ptr(), kn = k.node_ptr(), vn = v.node_ptr();
  return attach(out, [qn, kn, vn, probs, segments = layout.segments, heads, d, dh, scale_factor](TensorNode<T>& o) {
    const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
    T* gq = qn->requires_grad ? qn->grad_storage().data() : nullptr;
    T* gk = kn->requires_grad ? kn->grad_storage().data() : nullptr;
    T* gv = vn->requires_grad ? vn->grad_storage().data() : nullptr;
    RowMat<T> dp, ds;
    for (std::size_t s = 0; s < segments.size(); ++s) {
      const auto& seg = segments[s];
      const auto ql = static_cast<Eigen::Index>(seg.q_length), kl = static_cast<Eigen::Index>(seg.kv_length);
      for (std::size_t h = 0; h < heads; ++h) {
        const RowMat<T>& p = (*probs)[s * heads + h];
        ConstStridedMap<T> doh(o.grad.data() + seg.q_begin * d + h * dh, ql, dh, stride);
        ConstStridedMap<T> qh(qn->value.data() + seg.q_begin * d + h * dh, ql, dh, stride);
        ConstStridedMap<T> kh(kn->value.data() + seg.kv_begin * d + h * dh, kl, dh, stride);
        ConstStridedMap<T> vh(vn->value.data() + seg.kv_begin * d + h * dh, kl, dh, stride);
        if (gv) {
          StridedMap<T> gvh(gv + seg.kv_begin * d + h * dh, kl, dh, stride);
          gvh.noalias() += p.transpose() * doh;
        }
        if (!gq && !gk) continue;
        dp.noalias() = doh * vh.transpose();
        ds = p.cwiseProduct(dp);
        const Eigen::Matrix<T, Eigen::Dynamic, 1> row_dot = ds.rowwise().sum();
        ds -= p.cwiseProduct(row_dot.replicate(1, kl));
        ds *= scale_factor;
        if (gq) {
          StridedMap<T> gqh(gq + seg.q_begin * d + h * dh, ql, dh, stride);
          gqh.noalias() += ds * kh;
        }
        if (gk) {
          StridedMap<T> gkh(gk + seg.kv_begin * d + h * dh, kl, dh, stride);
          gkh.noalias() += ds.transpose() * qh;
        }
      }
    }
  });
}

#define BIMOT_INSTANTIATE_OPS(T)                                                                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> transpose(const Tensor<T>&);                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> scale(const Tensor<T>&, T);                                                   \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                              \
  template Tensor<T> add_row(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul_row(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul_col(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> gelu(const Tensor<T>&);                                                       \
  template Tensor<T> silu(const Tensor<T>&);                                                       \
  template Tensor<T> exp(const Tensor<T>&);                                                        \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                                                \
  template Tensor<T> softmax(const Tensor<T>&, int);                                               \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);     \
  template Tensor<T> embedding_lookup(const Tensor<T>&, std::span<const int>);                     \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                                   \
  template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                                   \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                       \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                             \
  template Tensor<T> index_select(const Tensor<T>&, std::span<const std::size_t>);                 \
  template Tensor<T> scatter_by_index(const Tensor<T>&, const Tensor<T>&,                          \
                                      std::span<const std::size_t>);                               \
  template Tensor<T> sum(const Tensor<T>&);                                                        \
  template Tensor<T> mean(const Tensor<T>&);                                                       \
  template Tensor<T> row_sum_squares(const Tensor<T>&);                                            \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> smooth_l1(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> l2_normalize_rows(const Tensor<T>&);                                          \
  template Tensor<T> segment_mean(const Tensor<T>&, std::span<const RowSegment>);                  \
  template Tensor<T> cross_entropy_masked(const Tensor<T>&, std::span<const int>,                  \
                                          std::span<const std::uint8_t>);                          \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,  \
                               const AttentionLayout&);

BIMOT_INSTANTIATE_OPS(float)
BIMOT_INSTANTIATE_OPS(double)

}  // namespace bimot
