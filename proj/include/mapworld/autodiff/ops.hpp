#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "mapworld/autodiff/tape.hpp"
#include "mapworld/errors.hpp"

// Differentiable operations over 2-D row-major matrices. Each op evaluates
// eagerly and, when the tape is recording and an input needs a gradient,
// records a closure that maps the output gradient back to its inputs.

namespace mapworld::ad {

namespace detail {

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) + " vs " +
                     shape_str(b.rows(), b.cols()));
  }
}

}  // namespace detail

template <typename T>
Var<T> detach(Var<T> a) {
  return a.tape()->constant(a.value());
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + detail::shape_str(a.rows(), a.cols()) + " x " + detail::shape_str(b.rows(), b.cols()));
  }
  Matrix<T> out = a.value() * b.value();
  return a.tape()->push(std::move(out), a.requires_grad() || b.requires_grad(),
                        [ia = a.id(), ib = b.id()](Tape<T>& t, const Matrix<T>& g) {
                          if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
                          if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
                        });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "add");
  Matrix<T> out = a.value() + b.value();
  return a.tape()->push(std::move(out), a.requires_grad() || b.requires_grad(),
                        [ia = a.id(), ib = b.id()](Tape<T>& t, const Matrix<T>& g) {
                          t.accumulate(ia, g);
                          t.accumulate(ib, g);
                        });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "sub");
  Matrix<T> out = a.value() - b.value();
  return a.tape()->push(std::move(out), a.requires_grad() || b.requires_grad(),
                        [ia = a.id(), ib = b.id()](Tape<T>& t, const Matrix<T>& g) {
                          t.accumulate(ia, g);
                          t.accumulate(ib, -g);
                        });
}

/// Element-wise product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "mul");
  Matrix<T> out = a.value().cwiseProduct(b.value());
  return a.tape()->push(std::move(out), a.requires_grad() || b.requires_grad(),
                        [ia = a.id(), ib = b.id()](Tape<T>& t, const Matrix<T>& g) {
                          if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                          if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                        });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Matrix<T> out = a.value() * s;
  return a.tape()->push(std::move(out), a.requires_grad(),
                        [ia = a.id(), s](Tape<T>& t, const Matrix<T>& g) { t.accumulate(ia, g * s); });
}

/// Adds a [1 x n] row to every row of `a`.
template <typename T>
Var<T> add_row(Var<T> a, Var<T> row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: " + detail::shape_str(a.rows(), a.cols()) + " + " +
                     detail::shape_str(row.rows(), row.cols()));
  }
  Matrix<T> out = a.value().rowwise() + row.value().row(0);
  return a.tape()->push(std::move(out), a.requires_grad() || row.requires_grad(),
                        [ia = a.id(), ir = row.id()](Tape<T>& t, const Matrix<T>& g) {
                          t.accumulate(ia, g);
                          if (t.requires_grad(ir)) t.accumulate(ir, g.colwise().sum());
                        });
}

/// tanh-approximated GELU.
template <typename T>
Var<T> gelu(Var<T> a) {
  const T k = T(0.7978845608028654);  // sqrt(2 / pi)
  const T c = T(0.044715);
  const Matrix<T>& x = a.value();
  Matrix<T> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const T v = x.data()[i];
    out.data()[i] = T(0.5) * v * (T(1) + std::tanh(k * (v + c * v * v * v)));
  }
  return a.tape()->push(std::move(out), a.requires_grad(), [ia = a.id(), k, c](Tape<T>& t, const Matrix<T>& g) {
    const Matrix<T>& x = t.value(ia);
    Matrix<T> dx(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const T v = x.data()[i];
      const T th = std::tanh(k * (v + c * v * v * v));
      const T d = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * k * (T(1) + T(3) * c * v * v);
      dx.data()[i] = g.data()[i] * d;
    }
    t.accumulate(ia, dx);
  });
}

/// Row-wise layer normalization with affine [1 x n] gamma and beta.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  const Matrix<T>& xv = x.value();
  const Eigen::Index n = xv.cols();
  if (gamma.cols() != n || beta.cols() != n) throw ShapeError("layer_norm: affine width mismatch");
  auto xhat = std::make_shared<Matrix<T>>(xv.rows(), n);
  auto inv_std = std::make_shared<Eigen::Matrix<T, Eigen::Dynamic, 1>>(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const T mu = xv.row(r).mean();
    const T var = (xv.row(r).array() - mu).square().mean();
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)(r) = is;
    xhat->row(r) = (xv.row(r).array() - mu) * is;
  }
  Matrix<T> out = (xhat->array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  return x.tape()->push(std::move(out), rg,
                        [ix = x.id(), ig = gamma.id(), ib = beta.id(), xhat, inv_std](Tape<T>& t, const Matrix<T>& g) {
                          if (t.requires_grad(ig)) t.accumulate(ig, g.cwiseProduct(*xhat).colwise().sum());
                          if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
                          if (!t.requires_grad(ix)) return;
                          const Matrix<T> dxhat = g.array().rowwise() * t.value(ig).row(0).array();
                          Matrix<T> dx(g.rows(), g.cols());
                          for (Eigen::Index r = 0; r < g.rows(); ++r) {
                            const T m1 = dxhat.row(r).mean();
                            const T m2 = dxhat.row(r).cwiseProduct(xhat->row(r)).mean();
                            dx.row(r) = (*inv_std)(r) * (dxhat.row(r).array() - m1 - xhat->row(r).array() * m2);
                          }
                          t.accumulate(ix, dx);
                        });
}

template <typename T>
Matrix<T> softmax_rows_value(const Matrix<T>& x) {
  Matrix<T> p(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T m = x.row(r).maxCoeff();
    p.row(r) = (x.row(r).array() - m).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

template <typename T>
Var<T> softmax_rows(Var<T> a) {
  auto p = std::make_shared<Matrix<T>>(softmax_rows_value(a.value()));
  Matrix<T> out = *p;
  return a.tape()->push(std::move(out), a.requires_grad(), [ia = a.id(), p](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T> gp = g.cwiseProduct(*p);
    const Eigen::Matrix<T, Eigen::Dynamic, 1> s = gp.rowwise().sum();
    gp -= (p->array().colwise() * s.array()).matrix();
    t.accumulate(ia, gp);
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  bool rg = false;
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  for (const Var<T>& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    offsets.push_back(rows);
    rows += p.rows();
    rg = rg || p.requires_grad();
    ids.push_back(p.id());
  }
  Matrix<T> out(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i) out.middleRows(offsets[i], parts[i].rows()) = parts[i].value();
  return parts[0].tape()->push(std::move(out), rg, [ids, offsets](Tape<T>& t, const Matrix<T>& g) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.requires_grad(ids[i])) t.accumulate(ids[i], g.middleRows(offsets[i], t.value(ids[i]).rows()));
    }
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows: out of range");
  Matrix<T> out = a.value().middleRows(start, count);
  return a.tape()->push(std::move(out), a.requires_grad(), [ia = a.id(), start, count](Tape<T>& t, const Matrix<T>& g) {
    t.grad_buffer(ia).middleRows(start, count) += g;
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: out of range");
  Matrix<T> out = a.value().middleCols(start, count);
  return a.tape()->push(std::move(out), a.requires_grad(), [ia = a.id(), start, count](Tape<T>& t, const Matrix<T>& g) {
    t.grad_buffer(ia).middleCols(start, count) += g;
  });
}

/// Reinterprets the row-major buffer with a new shape.
template <typename T>
Var<T> reshape(Var<T> a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) throw ShapeError("reshape: element count mismatch");
  Matrix<T> out = Eigen::Map<const Matrix<T>>(a.value().data(), rows, cols);
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  return a.tape()->push(std::move(out), a.requires_grad(), [ia = a.id(), r0, c0](Tape<T>& t, const Matrix<T>& g) {
    t.accumulate(ia, Eigen::Map<const Matrix<T>>(g.data(), r0, c0));
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  Matrix<T> out = a.value().transpose();
  return a.tape()->push(std::move(out), a.requires_grad(),
                        [ia = a.id()](Tape<T>& t, const Matrix<T>& g) { t.accumulate(ia, g.transpose()); });
}

/// out.flat[i] = a.flat[index[i]] for an output of shape rows x cols.
template <typename T>
Var<T> gather(Var<T> a, std::shared_ptr<const std::vector<int>> index, Eigen::Index rows, Eigen::Index cols) {
  if (static_cast<Eigen::Index>(index->size()) != rows * cols) throw ShapeError("gather: index size mismatch");
  Matrix<T> out(rows, cols);
  const T* src = a.value().data();
  const Eigen::Index n = a.value().size();
  for (Eigen::Index i = 0; i < rows * cols; ++i) {
    const int j = (*index)[static_cast<std::size_t>(i)];
    if (j < 0 || j >= n) throw ShapeError("gather: index out of range");
    out.data()[i] = src[j];
  }
  return a.tape()->push(std::move(out), a.requires_grad(), [ia = a.id(), index](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T>& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < index->size(); ++i) ga.data()[(*index)[i]] += g.data()[i];
  });
}

/// Stacks `times` copies of `a` vertically.
template <typename T>
Var<T> tile_rows(Var<T> a, Eigen::Index times) {
  const Eigen::Index r = a.rows();
  Matrix<T> out = a.value().replicate(times, 1);
  return a.tape()->push(std::move(out), a.requires_grad(), [ia = a.id(), r, times](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T> acc = g.topRows(r);
    for (Eigen::Index k = 1; k < times; ++k) acc += g.middleRows(k * r, r);
    t.accumulate(ia, acc);
  });
}

/// Column means, [1 x n].
template <typename T>
Var<T> mean_rows(Var<T> a) {
  const Eigen::Index r = a.rows();
  Matrix<T> out = a.value().colwise().mean();
  return a.tape()->push(std::move(out), a.requires_grad(), [ia = a.id(), r](Tape<T>& t, const Matrix<T>& g) {
    t.accumulate(ia, (g / T(r)).replicate(r, 1));
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  const Eigen::Index r = a.rows(), c = a.cols();
  return a.tape()->push(std::move(out), a.requires_grad(), [ia = a.id(), r, c](Tape<T>& t, const Matrix<T>& g) {
    t.accumulate(ia, Matrix<T>::Constant(r, c, g(0, 0)));
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

/// Single element as a 1x1 node.
template <typename T>
Var<T> pick(Var<T> a, Eigen::Index r, Eigen::Index c) {
  Matrix<T> out(1, 1);
  out(0, 0) = a.value()(r, c);
  return a.tape()->push(std::move(out), a.requires_grad(), [ia = a.id(), r, c](Tape<T>& t, const Matrix<T>& g) {
    t.grad_buffer(ia)(r, c) += g(0, 0);
  });
}

/// Per-row mean absolute value, [rows x 1].
template <typename T>
Var<T> mean_abs_rows(Var<T> a) {
  const Eigen::Index c = a.cols();
  Matrix<T> out = a.value().cwiseAbs().rowwise().mean();
  return a.tape()->push(std::move(out), a.requires_grad(), [ia = a.id(), c](Tape<T>& t, const Matrix<T>& g) {
    const Matrix<T>& x = t.value(ia);
    Matrix<T> dx = x.unaryExpr([](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
    dx = (dx.array().colwise() * (g.col(0).array() / T(c))).matrix();
    t.accumulate(ia, dx);
  });
}

/// Mean |a| over rows with row_weight 1, divided by (#selected rows x cols).
/// Returns a constant 0 when no row is selected.
template <typename T>
Var<T> masked_mean_abs(Var<T> a, const std::vector<T>& row_weight) {
  if (static_cast<Eigen::Index>(row_weight.size()) != a.rows()) throw ShapeError("masked_mean_abs: mask size");
  const T count = std::accumulate(row_weight.begin(), row_weight.end(), T(0));
  Matrix<T> out(1, 1);
  if (count <= T(0)) {
    out(0, 0) = T(0);
    return a.tape()->constant(std::move(out));
  }
  const T denom = count * static_cast<T>(a.cols());
  T total = 0;
  for (Eigen::Index r = 0; r < a.rows(); ++r) total += row_weight[static_cast<std::size_t>(r)] * a.value().row(r).cwiseAbs().sum();
  out(0, 0) = total / denom;
  return a.tape()->push(std::move(out), a.requires_grad(), [ia = a.id(), row_weight, denom](Tape<T>& t, const Matrix<T>& g) {
    const Matrix<T>& x = t.value(ia);
    Matrix<T> dx(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      for (Eigen::Index c = 0; c < x.cols(); ++c) {
        const T v = x(r, c);
        const T sgn = v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
        dx(r, c) = g(0, 0) * row_weight[static_cast<std::size_t>(r)] * sgn / denom;
      }
    }
    t.accumulate(ia, dx);
  });
}

/// Mean cross-entropy per group. `logits` is [groups * n x C]; `targets` holds
/// n class ids shared by every group, or groups * n ids. Returns [groups x 1].
template <typename T>
Var<T> cross_entropy_groups(Var<T> logits, const std::vector<int>& targets, Eigen::Index groups) {
  const Eigen::Index rows = logits.rows();
  const Eigen::Index classes = logits.cols();
  if (groups <= 0 || rows % groups != 0) throw ShapeError("cross_entropy_groups: rows not divisible by groups");
  const Eigen::Index n = rows / groups;
  const auto nt = static_cast<Eigen::Index>(targets.size());
  if (nt != n && nt != rows) throw ShapeError("cross_entropy_groups: target count mismatch");
  for (int c : targets) {
    if (c < 0 || c >= classes) throw DataError("cross_entropy: target class id " + std::to_string(c) + " out of range");
  }
  auto probs = std::make_shared<Matrix<T>>(rows, classes);
  Matrix<T> out = Matrix<T>::Zero(groups, 1);
  const Matrix<T>& x = logits.value();
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T m = x.row(r).maxCoeff();
    probs->row(r) = (x.row(r).array() - m).exp();
    const T z = probs->row(r).sum();
    probs->row(r) /= z;
    const int target = targets[static_cast<std::size_t>(nt == n ? r % n : r)];
    out(r / n, 0) += (m + std::log(z) - x(r, target)) / T(n);
  }
  auto tgt = std::make_shared<std::vector<int>>(targets);
  return logits.tape()->push(std::move(out), logits.requires_grad(),
                             [il = logits.id(), probs, tgt, n, nt](Tape<T>& t, const Matrix<T>& g) {
                               Matrix<T> dx = *probs;
                               for (Eigen::Index r = 0; r < dx.rows(); ++r) {
                                 const int target = (*tgt)[static_cast<std::size_t>(nt == n ? r % n : r)];
                                 dx(r, target) -= T(1);
                                 dx.row(r) *= g(r / n, 0) / T(n);
                               }
                               t.accumulate(il, dx);
                             });
}

/// Softmax focal loss against a single target index over a vector of K logits:
/// -alpha * (1 - p_t)^gamma * log p_t.
template <typename T>
Var<T> focal_loss(Var<T> logits, int target, T gamma, T alpha) {
  const Eigen::Index k = logits.value().size();
  if (target < 0 || target >= k) throw ShapeError("focal_loss: target out of range");
  const T* z = logits.value().data();
  T m = -std::numeric_limits<T>::infinity();
  for (Eigen::Index i = 0; i < k; ++i) m = std::max(m, z[i]);
  T s = 0;
  for (Eigen::Index i = 0; i < k; ++i) s += std::exp(z[i] - m);
  auto p = std::make_shared<std::vector<T>>(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < k; ++i) (*p)[static_cast<std::size_t>(i)] = std::exp(z[i] - m) / s;
  const T log_pt = z[target] - m - std::log(s);
  const T pt = (*p)[static_cast<std::size_t>(target)];
  const T one_minus = std::max(T(1) - pt, T(0));
  Matrix<T> out(1, 1);
  out(0, 0) = -alpha * std::pow(one_minus, gamma) * log_pt;
  return logits.tape()->push(
      std::move(out), logits.requires_grad(),
      [il = logits.id(), p, target, gamma, alpha, log_pt, pt, one_minus](Tape<T>& t, const Matrix<T>& g) {
        // d/dp_t of -alpha (1-p)^gamma log p, then chain through softmax.
        const T first = gamma == T(0) ? T(0) : gamma * std::pow(one_minus, gamma - T(1)) * log_pt;
        const T df_dpt = alpha * (first - std::pow(one_minus, gamma) / pt);
        const Matrix<T>& z = t.value(il);
        Matrix<T> dz(z.rows(), z.cols());
        for (Eigen::Index i = 0; i < z.size(); ++i) {
          const T delta = i == target ? T(1) : T(0);
          dz.data()[i] = g(0, 0) * df_dpt * pt * (delta - (*p)[static_cast<std::size_t>(i)]);
        }
        t.accumulate(il, dz);
      });
}

/// Mean binary cross-entropy with logits over all elements.
template <typename T>
Var<T> bce_with_logits(Var<T> logits, const std::vector<T>& targets) {
  const Eigen::Index n = logits.value().size();
  if (static_cast<Eigen::Index>(targets.size()) != n) throw ShapeError("bce_with_logits: target count mismatch");
  T total = 0;
  const T* x = logits.value().data();
  for (Eigen::Index i = 0; i < n; ++i) {
    const T v = x[i];
    total += std::max(v, T(0)) - v * targets[static_cast<std::size_t>(i)] + std::log1p(std::exp(-std::abs(v)));
  }
  Matrix<T> out(1, 1);
  out(0, 0) = total / T(n);
  return logits.tape()->push(std::move(out), logits.requires_grad(),
                             [il = logits.id(), targets, n](Tape<T>& t, const Matrix<T>& g) {
                               const Matrix<T>& x = t.value(il);
                               Matrix<T> dx(x.rows(), x.cols());
                               for (Eigen::Index i = 0; i < n; ++i) {
                                 const T sig = T(1) / (T(1) + std::exp(-x.data()[i]));
                                 dx.data()[i] = g(0, 0) * (sig - targets[static_cast<std::size_t>(i)]) / T(n);
                               }
                               t.accumulate(il, dx);
                             });
}

/// Describes which keys each query row may attend to.
///
/// Query rows are split into `groups` equal consecutive blocks. The first
/// `shared_keys` key rows are visible to every group (subject to `key_mask`); the
/// remaining key rows are split evenly into per-group segments. With
/// shared_keys = -1 every key is shared.
struct AttentionLayout {
  int heads = 1;
  int groups = 1;
  int shared_keys = -1;
  std::vector<std::uint8_t> key_mask;  // over shared keys; empty = all visible
};

/// Multi-head scaled dot-product attention over already-projected q, k, v.
/// If `capture` is given it receives the attention probabilities, one
/// [queries_per_group x visible_keys] matrix per (group, head), group-major.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const AttentionLayout& layout,
                 std::vector<Matrix<T>>* capture = nullptr) {
  const Eigen::Index d = q.cols();
  const int heads = layout.heads;
  const int groups = layout.groups;
  if (heads <= 0 || d % heads != 0) throw ShapeError("attention: model width not divisible by heads");
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) throw ShapeError("attention: key/value shape mismatch");
  if (groups <= 0 || q.rows() % groups != 0) throw ShapeError("attention: query rows not divisible by groups");
  const Eigen::Index nk_total = k.rows();
  const Eigen::Index shared = layout.shared_keys < 0 ? nk_total : layout.shared_keys;
  if (shared > nk_total || (nk_total - shared) % groups != 0) throw ShapeError("attention: bad key layout");
  if (!layout.key_mask.empty() && static_cast<Eigen::Index>(layout.key_mask.size()) != shared) {
    throw ShapeError("attention: key mask size mismatch");
  }
  const Eigen::Index per_group_keys = (nk_total - shared) / groups;
  const Eigen::Index nq = q.rows() / groups;
  const Eigen::Index dh = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));

  auto key_index = std::make_shared<std::vector<std::vector<int>>>(static_cast<std::size_t>(groups));
  std::vector<int> shared_visible;
  for (Eigen::Index j = 0; j < shared; ++j) {
    if (layout.key_mask.empty() || layout.key_mask[static_cast<std::size_t>(j)]) shared_visible.push_back(static_cast<int>(j));
  }
  for (int g = 0; g < groups; ++g) {
    auto& idx = (*key_index)[static_cast<std::size_t>(g)];
    idx = shared_visible;
    for (Eigen::Index j = 0; j < per_group_keys; ++j) idx.push_back(static_cast<int>(shared + g * per_group_keys + j));
    if (idx.empty()) throw ShapeError("attention: a query group has no visible keys");
  }

  auto probs = std::make_shared<std::vector<Matrix<T>>>(static_cast<std::size_t>(groups * heads));
  Matrix<T> out(q.rows(), d);
  const Matrix<T>& qv = q.value();
  const Matrix<T>& kv = k.value();
  const Matrix<T>& vv = v.value();
  for (int g = 0; g < groups; ++g) {
    const auto& idx = (*key_index)[static_cast<std::size_t>(g)];
    const Matrix<T> kg = kv(idx, Eigen::all);
    const Matrix<T> vg = vv(idx, Eigen::all);
    for (int h = 0; h < heads; ++h) {
      const auto qgh = qv.block(g * nq, h * dh, nq, dh);
      Matrix<T> s = (qgh * kg.middleCols(h * dh, dh).transpose()) * inv_sqrt;
      Matrix<T> p = softmax_rows_value(s);
      out.block(g * nq, h * dh, nq, dh).noalias() = p * vg.middleCols(h * dh, dh);
      (*probs)[static_cast<std::size_t>(g * heads + h)] = std::move(p);
    }
  }
  if (capture != nullptr) *capture = *probs;

  const bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
  return q.tape()->push(
      std::move(out), rg,
      [iq = q.id(), ik = k.id(), iv = v.id(), key_index, probs, groups, heads, nq, dh, inv_sqrt](Tape<T>& t,
                                                                                                const Matrix<T>& grad) {
        const Matrix<T>& qv = t.value(iq);
        const Matrix<T>& kv = t.value(ik);
        const Matrix<T>& vv = t.value(iv);
        const bool gq = t.requires_grad(iq), gk = t.requires_grad(ik), gv = t.requires_grad(iv);
        Matrix<T> dq, dk, dv;
        if (gq) dq.setZero(qv.rows(), qv.cols());
        if (gk) dk.setZero(kv.rows(), kv.cols());
        if (gv) dv.setZero(vv.rows(), vv.cols());
        for (int g = 0; g < groups; ++g) {
          const auto& idx = (*key_index)[static_cast<std::size_t>(g)];
          const Matrix<T> kg = kv(idx, Eigen::all);
          const Matrix<T> vg = vv(idx, Eigen::all);
          Matrix<T> dkg, dvg;
          if (gk) dkg.setZero(kg.rows(), kg.cols());
          if (gv) dvg.setZero(vg.rows(), vg.cols());
          for (int h = 0; h < heads; ++h) {
            const Matrix<T>& p = (*probs)[static_cast<std::size_t>(g * heads + h)];
            const auto dout = grad.block(g * nq, h * dh, nq, dh);
            if (gv) dvg.middleCols(h * dh, dh).noalias() += p.transpose() * dout;
            Matrix<T> dp = dout * vg.middleCols(h * dh, dh).transpose();
            const Eigen::Matrix<T, Eigen::Dynamic, 1> row_dot = dp.cwiseProduct(p).rowwise().sum();
            Matrix<T> ds = p.cwiseProduct((dp.colwise() - row_dot).matrix()) * inv_sqrt;
            if (gq) dq.block(g * nq, h * dh, nq, dh).noalias() += ds * kg.middleCols(h * dh, dh);
            if (gk) dkg.middleCols(h * dh, dh).noalias() += ds.transpose() * qv.block(g * nq, h * dh, nq, dh);
          }
          for (std::size_t j = 0; j < idx.size(); ++j) {
            if (gk) dk.row(idx[j]) += dkg.row(static_cast<Eigen::Index>(j));
            if (gv) dv.row(idx[j]) += dvg.row(static_cast<Eigen::Index>(j));
          }
        }
        if (gq) t.accumulate(iq, dq);
        if (gk) t.accumulate(ik, dk);
        if (gv) t.accumulate(iv, dv);
      });
}

}  // namespace mapworld::ad
