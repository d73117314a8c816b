// Copyright (C) 2026 The vitdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "vitdiff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace vitdiff {

namespace {

template <typename S>
void accumulate(Tensor<S>* target, const Tensor<S>& delta) {
  if (target) target->array() += delta.array();
}

template <typename S>
const Tensor<S>& parent_value(const Node<S>& self, std::size_t i) {
  return self.parents[i]->value;
}

Index normalize_axis(int axis, int rank) {
  int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return a;
}

Shape strides_of(const Shape& shape) {
  Shape strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) strides[i] = strides[i + 1] * shape[i + 1];
  return strides;
}

template <typename S>
Tensor<S> permute_tensor(const Tensor<S>& x, const std::vector<int>& perm) {
  const int rank = x.rank();
  Shape out_shape(rank);
  for (int i = 0; i < rank; ++i) out_shape[i] = x.dim(perm[i]);
  Tensor<S> out(out_shape);
  if (out.size() == 0) return out;
  const Shape in_strides = strides_of(x.shape());
  Shape src_stride(rank);
  for (int i = 0; i < rank; ++i) src_stride[i] = in_strides[perm[i]];
  std::vector<Index> idx(rank, 0);
  const Index inner = rank ? out_shape[rank - 1] : 1;
  const Index inner_stride = rank ? src_stride[rank - 1] : 1;
  const S* src = x.data();
  S* dst = out.data();
  Index offset = 0;
  for (Index o = 0; o < out.size(); o += inner) {
    const S* s = src + offset;
    for (Index j = 0; j < inner; ++j) dst[o + j] = s[j * inner_stride];
    // advance odometer over all but the innermost axis
    for (int a = rank - 2; a >= 0; --a) {
      offset += src_stride[a];
      if (++idx[a] < out_shape[a]) break;
      offset -= src_stride[a] * out_shape[a];
      idx[a] = 0;
    }
  }
  return out;
}

template <typename S>
Tensor<S> roll_tensor(const Tensor<S>& x, Index sh, Index sw) {
  const Index B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  Tensor<S> out(x.shape());
  for (Index b = 0; b < B; ++b)
    for (Index h = 0; h < H; ++h) {
      const Index hd = ((h + sh) % H + H) % H;
      for (Index w = 0; w < W; ++w) {
        const Index wd = ((w + sw) % W + W) % W;
        std::copy_n(x.data() + ((b * H + h) * W + w) * C, C, out.data() + ((b * H + hd) * W + wd) * C);
      }
    }
  return out;
}

// Column buffer for output pixels [p0, p0 + np) of one image.
template <typename S>
void im2col(const S* x, Index C, Index H, Index W, Index k, Index stride, Index pad, Index Wo, Index p0,
            Index np, S* col) {
  for (Index c = 0; c < C; ++c)
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        S* row = col + ((c * k + ky) * k + kx) * np;
        const S* plane = x + c * H * W;
        Index oy = p0 / Wo, ox = p0 % Wo;
        for (Index j = 0; j < np; ++j) {
          const Index iy = oy * stride - pad + ky;
          const Index ix = ox * stride - pad + kx;
          row[j] = (iy >= 0 && iy < H && ix >= 0 && ix < W) ? plane[iy * W + ix] : S(0);
          if (++ox == Wo) {
            ox = 0;
            ++oy;
          }
        }
      }
}

template <typename S>
void col2im(const S* col, Index C, Index H, Index W, Index k, Index stride, Index pad, Index Wo, Index p0,
            Index np, S* x) {
  for (Index c = 0; c < C; ++c)
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        const S* row = col + ((c * k + ky) * k + kx) * np;
        S* plane = x + c * H * W;
        Index oy = p0 / Wo, ox = p0 % Wo;
        for (Index j = 0; j < np; ++j) {
          const Index iy = oy * stride - pad + ky;
          const Index ix = ox * stride - pad + kx;
          if (iy >= 0 && iy < H && ix >= 0 && ix < W) plane[iy * W + ix] += row[j];
          if (++ox == Wo) {
            ox = 0;
            ++oy;
          }
        }
      }
}

constexpr Index kColumnBudget = Index(1) << 23;  // elements per im2col chunk

template <typename S>
using StridedMap = Eigen::Map<RowMatrix<S>, 0, Eigen::OuterStride<>>;
template <typename S>
using ConstStridedMap = Eigen::Map<const RowMatrix<S>, 0, Eigen::OuterStride<>>;

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<S> out(a.shape());
  out.array() = a.value().array() + b.value().array();
  return make_result<S>(std::move(out), {a, b}, [](Node<S>& self) {
    accumulate(parent_grad(self, 0), self.grad);
    accumulate(parent_grad(self, 1), self.grad);
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<S> out(a.shape());
  out.array() = a.value().array() - b.value().array();
  return make_result<S>(std::move(out), {a, b}, [](Node<S>& self) {
    accumulate(parent_grad(self, 0), self.grad);
    if (auto* g = parent_grad(self, 1)) g->array() -= self.grad.array();
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<S> out(a.shape());
  out.array() = a.value().array() * b.value().array();
  return make_result<S>(std::move(out), {a, b}, [](Node<S>& self) {
    if (auto* g = parent_grad(self, 0)) g->array() += self.grad.array() * parent_value(self, 1).array();
    if (auto* g = parent_grad(self, 1)) g->array() += self.grad.array() * parent_value(self, 0).array();
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S factor) {
  Tensor<S> out(a.shape());
  out.array() = a.value().array() * factor;
  return make_result<S>(std::move(out), {a}, [factor](Node<S>& self) {
    if (auto* g = parent_grad(self, 0)) g->array() += self.grad.array() * factor;
  });
}

template <typename S>
Var<S> silu(const Var<S>& x) {
  Tensor<S> out(x.shape());
  const auto xv = x.value().array();
  out.array() = xv / (S(1) + (-xv).exp());
  return make_result<S>(std::move(out), {x}, [](Node<S>& self) {
    if (auto* g = parent_grad(self, 0)) {
      const auto xv = parent_value(self, 0).array();
      const auto sig = S(1) / (S(1) + (-xv).exp());
      g->array() += self.grad.array() * (sig * (S(1) + xv * (S(1) - sig)));
    }
  });
}

template <typename S>
Var<S> gelu(const Var<S>& x) {
  Tensor<S> out(x.shape());
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  const S* xs = x.value().data();
  S* o = out.data();
  for (Index i = 0; i < out.size(); ++i) o[i] = S(0.5) * xs[i] * (S(1) + std::erf(xs[i] * inv_sqrt2));
  return make_result<S>(std::move(out), {x}, [inv_sqrt2](Node<S>& self) {
    if (auto* g = parent_grad(self, 0)) {
      const S inv_sqrt2pi = S(1) / std::sqrt(S(2) * S(M_PI));
      const S* xs = parent_value(self, 0).data();
      const S* go = self.grad.data();
      S* gi = g->data();
      for (Index i = 0; i < g->size(); ++i) {
        const S cdf = S(0.5) * (S(1) + std::erf(xs[i] * inv_sqrt2));
        const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * xs[i] * xs[i]);
        gi[i] += go[i] * (cdf + xs[i] * pdf);
      }
    }
  });
}

template <typename S>
Var<S> add_broadcast(const Var<S>& x, const Var<S>& b) {
  const Index n = b.size();
  const Shape& xs = x.shape();
  const Shape& bs = b.shape();
  if (bs.size() > xs.size() || !std::equal(bs.rbegin(), bs.rend(), xs.rbegin())) {
    throw ShapeError("add_broadcast: " + shape_string(bs) + " is not a trailing shape of " + shape_string(xs));
  }
  const Index outer = n ? x.size() / n : 0;
  Tensor<S> out = x.value();
  out.matrix(outer, n).rowwise() += b.value().matrix(1, n).row(0);
  return make_result<S>(std::move(out), {x, b}, [outer, n](Node<S>& self) {
    accumulate(parent_grad(self, 0), self.grad);
    if (auto* g = parent_grad(self, 1)) g->matrix(1, n).row(0) += self.grad.matrix(outer, n).colwise().sum();
  });
}

template <typename S>
Var<S> sum(const Var<S>& x) {
  Tensor<S> out = Tensor<S>::scalar(x.value().array().sum());
  return make_result<S>(std::move(out), {x}, [](Node<S>& self) {
    if (auto* g = parent_grad(self, 0)) g->array() += self.grad[0];
  });
}

template <typename S>
Var<S> mean(const Var<S>& x) {
  if (x.size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), S(1) / static_cast<S>(x.size()));
}

template <typename S>
Var<S> mse(const Var<S>& prediction, const Var<S>& target) {
  require_same_shape(prediction.value(), target.value(), "mse");
  if (prediction.size() == 0) throw ShapeError("mse of empty tensors");
  const S inv_n = S(1) / static_cast<S>(prediction.size());
  // Accumulate in double so the float path does not drift on large tensors.
  double acc = 0.0;
  const S* a = prediction.value().data();
  const S* b = target.value().data();
  for (Index i = 0; i < prediction.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc / static_cast<double>(prediction.size())));
  return make_result<S>(std::move(out), {prediction, target}, [inv_n](Node<S>& self) {
    const S go = self.grad[0];
    const auto diff = parent_value(self, 0).array() - parent_value(self, 1).array();
    if (auto* g = parent_grad(self, 0)) g->array() += (S(2) * inv_n * go) * diff;
    if (auto* g = parent_grad(self, 1)) g->array() -= (S(2) * inv_n * go) * diff;
  });
}

// ---------------------------------------------------------------- layout

template <typename S>
Var<S> reshape(const Var<S>& x, Shape shape) {
  Tensor<S> out = x.value().reshaped(std::move(shape));
  return make_result<S>(std::move(out), {x}, [](Node<S>& self) {
    if (auto* g = parent_grad(self, 0)) g->array() += self.grad.array();
  });
}

template <typename S>
Var<S> permute(const Var<S>& x, const std::vector<int>& perm) {
  if (static_cast<int>(perm.size()) != x.rank()) throw ShapeError("permute: rank mismatch");
  std::vector<int> check = perm;
  std::sort(check.begin(), check.end());
  for (int i = 0; i < x.rank(); ++i)
    if (check[i] != i) throw ShapeError("permute: not a permutation");
  std::vector<int> inverse(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = static_cast<int>(i);
  return make_result<S>(permute_tensor(x.value(), perm), {x}, [inverse](Node<S>& self) {
    if (auto* g = parent_grad(self, 0)) g->array() += permute_tensor(self.grad, inverse).array();
  });
}

template <typename S>
Var<S> concat(const std::vector<Var<S>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const int rank = parts[0].rank();
  const Index ax = normalize_axis(axis, rank);
  Shape shape = parts[0].shape();
  shape[ax] = 0;
  std::vector<Index> widths;
  for (const auto& p : parts) {
    Shape other = p.shape();
    if (other.size() != shape.size()) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < rank; ++i)
      if (i != ax && other[i] != shape[i])
        throw ShapeError("concat: incompatible shapes " + shape_string(parts[0].shape()) + " and " +
                         shape_string(other));
    shape[ax] += other[ax];
  }
  Index outer = 1, inner = 1;
  for (Index i = 0; i < ax; ++i) outer *= shape[i];
  for (Index i = ax + 1; i < rank; ++i) inner *= shape[i];
  for (const auto& p : parts) widths.push_back(p.dim(static_cast<int>(ax)) * inner);
  const Index row = shape[ax] * inner;
  Tensor<S> out(shape);
  Index col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const S* src = parts[k].value().data();
    for (Index o = 0; o < outer; ++o) std::copy_n(src + o * widths[k], widths[k], out.data() + o * row + col);
    col += widths[k];
  }
  std::vector<Var<S>> inputs(parts.begin(), parts.end());
  return make_result<S>(std::move(out), std::move(inputs), [outer, row, widths](Node<S>& self) {
    Index col = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (auto* g = parent_grad(self, k)) {
        for (Index o = 0; o < outer; ++o) {
          const S* src = self.grad.data() + o * row + col;
          S* dst = g->data() + o * widths[k];
          for (Index j = 0; j < widths[k]; ++j) dst[j] += src[j];
        }
      }
      col += widths[k];
    }
  });
}

template <typename S>
Var<S> slice(const Var<S>& x, int axis, Index start, Index length) {
  const Index ax = normalize_axis(axis, x.rank());
  if (start < 0 || length < 0 || start + length > x.dim(static_cast<int>(ax))) {
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") out of range on axis " +
                     std::to_string(ax) + " of " + shape_string(x.shape()));
  }
  Shape shape = x.shape();
  Index outer = 1, inner = 1;
  for (Index i = 0; i < ax; ++i) outer *= shape[i];
  for (Index i = ax + 1; i < x.rank(); ++i) inner *= shape[i];
  const Index in_row = shape[ax] * inner;
  const Index out_row = length * inner;
  const Index offset = start * inner;
  shape[ax] = length;
  Tensor<S> out(shape);
  for (Index o = 0; o < outer; ++o)
    std::copy_n(x.value().data() + o * in_row + offset, out_row, out.data() + o * out_row);
  return make_result<S>(std::move(out), {x}, [outer, in_row, out_row, offset](Node<S>& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (Index o = 0; o < outer; ++o) {
        const S* src = self.grad.data() + o * out_row;
        S* dst = g->data() + o * in_row + offset;
        for (Index j = 0; j < out_row; ++j) dst[j] += src[j];
      }
    }
  });
}

template <typename S>
Var<S> roll2d(const Var<S>& x, Index shift_h, Index shift_w) {
  if (x.rank() != 4) throw ShapeError("roll2d expects [B, H, W, C], got " + shape_string(x.shape()));
  return make_result<S>(roll_tensor(x.value(), shift_h, shift_w), {x}, [shift_h, shift_w](Node<S>& self) {
    if (auto* g = parent_grad(self, 0)) g->array() += roll_tensor(self.grad, -shift_h, -shift_w).array();
  });
}

template <typename S>
Var<S> upsample_nearest2x(const Var<S>& x) {
  if (x.rank() != 4) throw ShapeError("upsample expects NCHW, got " + shape_string(x.shape()));
  const Index planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<S> out({x.dim(0), x.dim(1), 2 * H, 2 * W});
  const S* src = x.value().data();
  S* dst = out.data();
  for (Index p = 0; p < planes; ++p)
    for (Index y = 0; y < 2 * H; ++y)
      for (Index xx = 0; xx < 2 * W; ++xx) dst[(p * 2 * H + y) * 2 * W + xx] = src[(p * H + y / 2) * W + xx / 2];
  return make_result<S>(std::move(out), {x}, [planes, H, W](Node<S>& self) {
    if (auto* g = parent_grad(self, 0)) {
      const S* go = self.grad.data();
      S* gi = g->data();
      for (Index p = 0; p < planes; ++p)
        for (Index y = 0; y < 2 * H; ++y)
          for (Index xx = 0; xx < 2 * W; ++xx) gi[(p * H + y / 2) * W + xx / 2] += go[(p * 2 * H + y) * 2 * W + xx];
    }
  });
}

// ---------------------------------------------------------------- layers

template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
  if (weight.rank() != 2) throw ShapeError("linear weight must be [out, in]");
  const Index out_f = weight.dim(0), in_f = weight.dim(1);
  if (x.rank() < 1 || x.dim(-1) != in_f) {
    throw ShapeError("linear: input " + shape_string(x.shape()) + " does not end in " + std::to_string(in_f));
  }
  if (bias.defined() && bias.size() != out_f) throw ShapeError("linear: bias size mismatch");
  const Index rows = x.size() / std::max<Index>(in_f, 1);
  Shape shape = x.shape();
  shape.back() = out_f;
  Tensor<S> out(shape);
  auto y = out.matrix(rows, out_f);
  y.noalias() = x.value().matrix(rows, in_f) * weight.value().matrix(out_f, in_f).transpose();
  if (bias.defined()) y.rowwise() += bias.value().matrix(1, out_f).row(0);
  std::vector<Var<S>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<S>(std::move(out), std::move(inputs), [rows, in_f, out_f](Node<S>& self) {
    const auto gy = self.grad.matrix(rows, out_f);
    if (auto* g = parent_grad(self, 0)) g->matrix(rows, in_f).noalias() += gy * parent_value(self, 1).matrix(out_f, in_f);
    if (auto* g = parent_grad(self, 1)) g->matrix(out_f, in_f).noalias() += gy.transpose() * parent_value(self, 0).matrix(rows, in_f);
    if (self.parents.size() > 2)
      if (auto* g = parent_grad(self, 2)) g->matrix(1, out_f).row(0) += gy.colwise().sum();
  });
}

template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps) {
  const Index C = x.dim(-1);
  const Index rows = x.size() / std::max<Index>(C, 1);
  if (gamma.defined() && gamma.size() != C) throw ShapeError("layer_norm: gamma size mismatch");
  if (beta.defined() && beta.size() != C) throw ShapeError("layer_norm: beta size mismatch");
  Tensor<S> normed(x.shape());
  Tensor<S> inv_std({rows});
  const auto xm = x.value().matrix(rows, C);
  auto nm = normed.matrix(rows, C);
  for (Index r = 0; r < rows; ++r) {
    const S mu = xm.row(r).mean();
    const S var = (xm.row(r).array() - mu).square().mean();
    inv_std[r] = S(1) / std::sqrt(var + eps);
    nm.row(r) = (xm.row(r).array() - mu) * inv_std[r];
  }
  Tensor<S> out = normed;
  auto om = out.matrix(rows, C);
  if (gamma.defined()) om.array().rowwise() *= gamma.value().matrix(1, C).row(0).array();
  if (beta.defined()) om.rowwise() += beta.value().matrix(1, C).row(0);
  std::vector<Var<S>> inputs{x};
  const int gi = gamma.defined() ? static_cast<int>(inputs.size()) : -1;
  if (gamma.defined()) inputs.push_back(gamma);
  const int bi = beta.defined() ? static_cast<int>(inputs.size()) : -1;
  if (beta.defined()) inputs.push_back(beta);
  return make_result<S>(std::move(out), std::move(inputs),
                        [rows, C, gi, bi, normed = std::move(normed), inv_std = std::move(inv_std)](Node<S>& self) {
                          const auto gy = self.grad.matrix(rows, C);
                          const auto nm = normed.matrix(rows, C);
                          if (bi >= 0)
                            if (auto* g = parent_grad(self, bi)) g->matrix(1, C).row(0) += gy.colwise().sum();
                          if (gi >= 0)
                            if (auto* g = parent_grad(self, gi))
                              g->matrix(1, C).row(0) += (gy.array() * nm.array()).colwise().sum().matrix();
                          if (auto* g = parent_grad(self, 0)) {
                            RowMatrix<S> gn = gy;
                            if (gi >= 0) gn.array().rowwise() *= parent_value(self, gi).matrix(1, C).row(0).array();
                            auto gx = g->matrix(rows, C);
                            for (Index r = 0; r < rows; ++r) {
                              const S m1 = gn.row(r).mean();
                              const S m2 = (gn.row(r).array() * nm.row(r).array()).mean();
                              gx.row(r).array() += inv_std[r] * (gn.row(r).array() - m1 - nm.row(r).array() * m2);
                            }
                          }
                        });
}

template <typename S>
Var<S> group_norm(const Var<S>& x, Index groups, const Var<S>& gamma, const Var<S>& beta, S eps) {
  if (x.rank() != 4) throw ShapeError("group_norm expects NCHW, got " + shape_string(x.shape()));
  const Index B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (groups <= 0 || C % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(C) + " channels not divisible into " + std::to_string(groups) + " groups");
  }
  if (gamma.size() != C || beta.size() != C) throw ShapeError("group_norm: affine size mismatch");
  const Index rows = B * groups;
  const Index len = (C / groups) * HW;
  Tensor<S> normed(x.shape());
  Tensor<S> inv_std({rows});
  const auto xm = x.value().matrix(rows, len);
  auto nm = normed.matrix(rows, len);
  for (Index r = 0; r < rows; ++r) {
    const S mu = xm.row(r).mean();
    const S var = (xm.row(r).array() - mu).square().mean();
    inv_std[r] = S(1) / std::sqrt(var + eps);
    nm.row(r) = (xm.row(r).array() - mu) * inv_std[r];
  }
  Tensor<S> out(x.shape());
  const S* gmv = gamma.value().data();
  const S* btv = beta.value().data();
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c) {
      const Index base = (b * C + c) * HW;
      for (Index i = 0; i < HW; ++i) out[base + i] = normed[base + i] * gmv[c] + btv[c];
    }
  return make_result<S>(
      std::move(out), {x, gamma, beta},
      [B, C, HW, rows, len, normed = std::move(normed), inv_std = std::move(inv_std)](Node<S>& self) {
        const S* gy = self.grad.data();
        if (auto* g = parent_grad(self, 2))
          for (Index b = 0; b < B; ++b)
            for (Index c = 0; c < C; ++c) {
              S acc = 0;
              for (Index i = 0; i < HW; ++i) acc += gy[(b * C + c) * HW + i];
              (*g)[c] += acc;
            }
        if (auto* g = parent_grad(self, 1))
          for (Index b = 0; b < B; ++b)
            for (Index c = 0; c < C; ++c) {
              S acc = 0;
              const Index base = (b * C + c) * HW;
              for (Index i = 0; i < HW; ++i) acc += gy[base + i] * normed[base + i];
              (*g)[c] += acc;
            }
        if (auto* g = parent_grad(self, 0)) {
          const S* gmv = parent_value(self, 1).data();
          Tensor<S> gn(self.grad.shape());
          for (Index b = 0; b < B; ++b)
            for (Index c = 0; c < C; ++c) {
              const Index base = (b * C + c) * HW;
              for (Index i = 0; i < HW; ++i) gn[base + i] = gy[base + i] * gmv[c];
            }
          const auto gnm = gn.matrix(rows, len);
          const auto nm = normed.matrix(rows, len);
          auto gx = g->matrix(rows, len);
          for (Index r = 0; r < rows; ++r) {
            const S m1 = gnm.row(r).mean();
            const S m2 = (gnm.row(r).array() * nm.row(r).array()).mean();
            gx.row(r).array() += inv_std[r] * (gnm.row(r).array() - m1 - nm.row(r).array() * m2);
          }
        }
      });
}

template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, Index stride, Index padding) {
  if (x.rank() != 4 || weight.rank() != 4) throw ShapeError("conv2d expects NCHW input and [Cout, Cin, k, k] weight");
  const Index B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index Cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != Cin || weight.dim(3) != k) {
    throw ShapeError("conv2d: weight " + shape_string(weight.shape()) + " incompatible with input " + shape_string(x.shape()));
  }
  if (bias.defined() && bias.size() != Cout) throw ShapeError("conv2d: bias size mismatch");
  if (stride < 1) throw ShapeError("conv2d: stride must be positive");
  const Index Ho = (H + 2 * padding - k) / stride + 1;
  const Index Wo = (W + 2 * padding - k) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: empty output for input " + shape_string(x.shape()));
  const Index P = Ho * Wo;
  const Index K = Cin * k * k;
  const bool pointwise = (k == 1 && stride == 1 && padding == 0);
  const Index chunk = pointwise ? P : std::max<Index>(1, std::min<Index>(P, kColumnBudget / std::max<Index>(K, 1)));

  Tensor<S> out({B, Cout, Ho, Wo});
  const auto wm = weight.value().matrix(Cout, K);
  std::vector<S> col(pointwise ? 0 : static_cast<std::size_t>(K * chunk));
  for (Index b = 0; b < B; ++b) {
    const S* xb = x.value().data() + b * Cin * H * W;
    S* yb = out.data() + b * Cout * P;
    if (pointwise) {
      MatrixMap<S>(yb, Cout, P).noalias() = wm * ConstMatrixMap<S>(xb, Cin, P);
    } else {
      for (Index p0 = 0; p0 < P; p0 += chunk) {
        const Index np = std::min(chunk, P - p0);
        im2col(xb, Cin, H, W, k, stride, padding, Wo, p0, np, col.data());
        StridedMap<S>(yb + p0, Cout, np, Eigen::OuterStride<>(P)).noalias() = wm * ConstMatrixMap<S>(col.data(), K, np);
      }
    }
    if (bias.defined())
      for (Index c = 0; c < Cout; ++c) ArrayMap<S>(yb + c * P, P) += bias.value()[c];
  }

  std::vector<Var<S>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<S>(std::move(out), std::move(inputs),
                        [=](Node<S>& self) {
                          const Tensor<S>& xv = parent_value(self, 0);
                          const auto wm = parent_value(self, 1).matrix(Cout, K);
                          Tensor<S>* gx = parent_grad(self, 0);
                          Tensor<S>* gw = parent_grad(self, 1);
                          Tensor<S>* gb = self.parents.size() > 2 ? parent_grad(self, 2) : nullptr;
                          std::vector<S> colbuf(pointwise ? 0 : static_cast<std::size_t>(K * chunk));
                          std::vector<S> dcol(pointwise ? 0 : static_cast<std::size_t>(K * chunk));
                          for (Index b = 0; b < B; ++b) {
                            const S* xb = xv.data() + b * Cin * H * W;
                            const S* gyb = self.grad.data() + b * Cout * P;
                            if (gb)
                              for (Index c = 0; c < Cout; ++c) (*gb)[c] += ConstArrayMap<S>(gyb + c * P, P).sum();
                            if (pointwise) {
                              const ConstMatrixMap<S> gy(gyb, Cout, P);
                              if (gw) gw->matrix(Cout, K).noalias() += gy * ConstMatrixMap<S>(xb, Cin, P).transpose();
                              if (gx) MatrixMap<S>(gx->data() + b * Cin * H * W, Cin, P).noalias() += wm.transpose() * gy;
                              continue;
                            }
                            for (Index p0 = 0; p0 < P; p0 += chunk) {
                              const Index np = std::min(chunk, P - p0);
                              const ConstStridedMap<S> gy(gyb + p0, Cout, np, Eigen::OuterStride<>(P));
                              if (gw) {
                                im2col(xb, Cin, H, W, k, stride, padding, Wo, p0, np, colbuf.data());
                                gw->matrix(Cout, K).noalias() += gy * ConstMatrixMap<S>(colbuf.data(), K, np).transpose();
                              }
                              if (gx) {
                                MatrixMap<S>(dcol.data(), K, np).noalias() = wm.transpose() * gy;
                                col2im(dcol.data(), Cin, H, W, k, stride, padding, Wo, p0, np,
                                       gx->data() + b * Cin * H * W);
                              }
                            }
                          }
                        });
}

template <typename S>
Var<S> depthwise_conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, Index padding) {
  if (x.rank() != 4 || weight.rank() != 3) throw ShapeError("depthwise_conv2d expects NCHW input and [C, k, k] weight");
  const Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), k = weight.dim(1);
  if (weight.dim(0) != C || weight.dim(2) != k) throw ShapeError("depthwise_conv2d: weight/channel mismatch");
  if (bias.defined() && bias.size() != C) throw ShapeError("depthwise_conv2d: bias size mismatch");
  const Index Ho = H + 2 * padding - k + 1, Wo = W + 2 * padding - k + 1;
  Tensor<S> out({B, C, Ho, Wo});
  const S* xv = x.value().data();
  const S* wv = weight.value().data();
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c) {
      const S* plane = xv + (b * C + c) * H * W;
      const S* ker = wv + c * k * k;
      S* o = out.data() + (b * C + c) * Ho * Wo;
      const S b0 = bias.defined() ? bias.value()[c] : S(0);
      for (Index oy = 0; oy < Ho; ++oy)
        for (Index ox = 0; ox < Wo; ++ox) {
          S acc = b0;
          for (Index ky = 0; ky < k; ++ky) {
            const Index iy = oy - padding + ky;
            if (iy < 0 || iy >= H) continue;
            for (Index kx = 0; kx < k; ++kx) {
              const Index ix = ox - padding + kx;
              if (ix >= 0 && ix < W) acc += ker[ky * k + kx] * plane[iy * W + ix];
            }
          }
          o[oy * Wo + ox] = acc;
        }
    }
  std::vector<Var<S>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<S>(std::move(out), std::move(inputs), [=](Node<S>& self) {
    const S* xv = parent_value(self, 0).data();
    const S* wv = parent_value(self, 1).data();
    Tensor<S>* gx = parent_grad(self, 0);
    Tensor<S>* gw = parent_grad(self, 1);
    Tensor<S>* gb = self.parents.size() > 2 ? parent_grad(self, 2) : nullptr;
    for (Index b = 0; b < B; ++b)
      for (Index c = 0; c < C; ++c) {
        const S* plane = xv + (b * C + c) * H * W;
        const S* go = self.grad.data() + (b * C + c) * Ho * Wo;
        for (Index oy = 0; oy < Ho; ++oy)
          for (Index ox = 0; ox < Wo; ++ox) {
            const S g = go[oy * Wo + ox];
            if (gb) (*gb)[c] += g;
            for (Index ky = 0; ky < k; ++ky) {
              const Index iy = oy - padding + ky;
              if (iy < 0 || iy >= H) continue;
              for (Index kx = 0; kx < k; ++kx) {
                const Index ix = ox - padding + kx;
                if (ix < 0 || ix >= W) continue;
                if (gw) (*gw)[c * k * k + ky * k + kx] += g * plane[iy * W + ix];
                if (gx) (*gx)[(b * C + c) * H * W + iy * W + ix] += g * wv[c * k * k + ky * k + kx];
              }
            }
          }
      }
  });
}

template <typename S>
Var<S> modulate(const Var<S>& x, const Var<S>& scale_v, const Var<S>& shift, ChannelAxis axis) {
  const Index B = x.dim(0);
  const Index C = axis == ChannelAxis::First ? x.dim(1) : x.dim(-1);
  if (scale_v.shape() != Shape{B, C} || shift.shape() != Shape{B, C}) {
    throw ShapeError("modulate: scale/shift must be [" + std::to_string(B) + ", " + std::to_string(C) + "]");
  }
  const Index positions = x.size() / (B * C);
  // element (b, c, p): index = first ? (b*C + c)*positions + p : (b*positions + p)*C + c
  auto index = [axis, C, positions](Index b, Index c, Index p) {
    return axis == ChannelAxis::First ? (b * C + c) * positions + p : (b * positions + p) * C + c;
  };
  Tensor<S> out(x.shape());
  const S* xv = x.value().data();
  const S* sv = scale_v.value().data();
  const S* hv = shift.value().data();
  for (Index b = 0; b < B; ++b)
    for (Index p = 0; p < positions; ++p)
      for (Index c = 0; c < C; ++c) {
        const Index i = index(b, c, p);
        out[i] = xv[i] * (S(1) + sv[b * C + c]) + hv[b * C + c];
      }
  return make_result<S>(std::move(out), {x, scale_v, shift}, [=](Node<S>& self) {
    const S* xv = parent_value(self, 0).data();
    const S* sv = parent_value(self, 1).data();
    const S* go = self.grad.data();
    Tensor<S>* gx = parent_grad(self, 0);
    Tensor<S>* gs = parent_grad(self, 1);
    Tensor<S>* gh = parent_grad(self, 2);
    for (Index b = 0; b < B; ++b)
      for (Index p = 0; p < positions; ++p)
        for (Index c = 0; c < C; ++c) {
          const Index i = index(b, c, p);
          if (gx) (*gx)[i] += go[i] * (S(1) + sv[b * C + c]);
          if (gs) (*gs)[b * C + c] += go[i] * xv[i];
          if (gh) (*gh)[b * C + c] += go[i];
        }
  });
}

template <typename S>
Var<S> gather_rows(const Var<S>& table, const std::vector<Index>& indices) {
  if (table.rank() != 2) throw ShapeError("gather_rows expects a [R, C] table");
  const Index R = table.dim(0), C = table.dim(1);
  Tensor<S> out({static_cast<Index>(indices.size()), C});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= R) {
      throw ShapeError("gather_rows: index " + std::to_string(indices[i]) + " outside [0, " + std::to_string(R) + ")");
    }
    std::copy_n(table.value().data() + indices[i] * C, C, out.data() + static_cast<Index>(i) * C);
  }
  return make_result<S>(std::move(out), {table}, [indices, C](Node<S>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < indices.size(); ++i) {
        const S* src = self.grad.data() + static_cast<Index>(i) * C;
        S* dst = g->data() + indices[i] * C;
        for (Index c = 0; c < C; ++c) dst[c] += src[c];
      }
  });
}

template <typename S>
Var<S> dropout(const Var<S>& x, S p, Rng& rng) {
  if (p < S(0) || p >= S(1)) throw std::invalid_argument("dropout probability must be in [0, 1)");
  if (p == S(0)) return x;
  Tensor<S> mask(x.shape());
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  const S inv = S(1) / (S(1) - p);
  for (Index i = 0; i < mask.size(); ++i) mask[i] = keep(rng) ? inv : S(0);
  Tensor<S> out(x.shape());
  out.array() = x.value().array() * mask.array();
  return make_result<S>(std::move(out), {x}, [mask = std::move(mask)](Node<S>& self) {
    if (auto* g = parent_grad(self, 0)) g->array() += self.grad.array() * mask.array();
  });
}

template <typename S>
Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, const AttentionOptions<S>& options) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) throw ShapeError("attention expects rank-3 q, k, v");
  const Index G = q.dim(0), Nq = q.dim(1), d = q.dim(2), Nk = k.dim(1), dv = v.dim(2);
  const Index heads = options.heads;
  if (k.dim(0) != G || v.dim(0) != G || k.dim(2) != d || v.dim(1) != Nk) {
    throw ShapeError("attention: incompatible q " + shape_string(q.shape()) + ", k " + shape_string(k.shape()) + ", v " +
                     shape_string(v.shape()));
  }
  if (heads < 1 || G % heads != 0) throw ShapeError("attention: group count not divisible by heads");
  const bool has_bias = options.bias.defined();
  if (has_bias && options.bias.shape() != Shape{heads, Nq, Nk}) {
    throw ShapeError("attention: bias must be [heads, Nq, Nk], got " + shape_string(options.bias.shape()));
  }
  const Tensor<S>* amask = options.additive_mask;
  const Index M = amask ? amask->dim(0) : 1;
  if (amask && (amask->rank() != 3 || amask->dim(1) != Nq || amask->dim(2) != Nk)) {
    throw ShapeError("attention: additive mask must be [M, Nq, Nk]");
  }
  const auto* kmask = options.key_mask;
  if (kmask && static_cast<Index>(kmask->size()) != (G / heads) * Nk) {
    throw ShapeError("attention: key mask must have (G / heads) * Nk entries");
  }
  const S scale_f = options.scale;
  constexpr S neg_inf = -std::numeric_limits<S>::infinity();

  Tensor<S> probs({G, Nq, Nk});
  Tensor<S> out({G, Nq, dv});
  RowMatrix<S> logits(Nq, Nk);
  for (Index g = 0; g < G; ++g) {
    const Index row_group = g / heads;
    const ConstMatrixMap<S> qg(q.value().data() + g * Nq * d, Nq, d);
    const ConstMatrixMap<S> kg(k.value().data() + g * Nk * d, Nk, d);
    const ConstMatrixMap<S> vg(v.value().data() + g * Nk * dv, Nk, dv);
    logits.noalias() = scale_f * (qg * kg.transpose());
    if (has_bias) logits += ConstMatrixMap<S>(options.bias.value().data() + (g % heads) * Nq * Nk, Nq, Nk);
    if (amask) logits += ConstMatrixMap<S>(amask->data() + (row_group % M) * Nq * Nk, Nq, Nk);
    if (kmask)
      for (Index j = 0; j < Nk; ++j)
        if (!(*kmask)[row_group * Nk + j]) logits.col(j).setConstant(neg_inf);
    MatrixMap<S> pg(probs.data() + g * Nq * Nk, Nq, Nk);
    for (Index i = 0; i < Nq; ++i) {
      const S m = logits.row(i).maxCoeff();
      if (m == neg_inf) {
        pg.row(i).setZero();
        continue;
      }
      // Eigen's vectorized exp clamps its argument, so masked logits are zeroed explicitly.
      pg.row(i) = (logits.row(i).array() == neg_inf).select(S(0), (logits.row(i).array() - m).exp()).matrix();
      pg.row(i) /= pg.row(i).sum();
    }
    MatrixMap<S>(out.data() + g * Nq * dv, Nq, dv).noalias() = pg * vg;
  }
  if (options.probabilities) *options.probabilities = probs;

  std::vector<Var<S>> inputs{q, k, v};
  if (has_bias) inputs.push_back(options.bias);
  return make_result<S>(std::move(out), std::move(inputs),
                        [=, probs = std::move(probs)](Node<S>& self) {
                          Tensor<S>* gq = parent_grad(self, 0);
                          Tensor<S>* gk = parent_grad(self, 1);
                          Tensor<S>* gv = parent_grad(self, 2);
                          Tensor<S>* gb = has_bias ? parent_grad(self, 3) : nullptr;
                          const Tensor<S>& qv = parent_value(self, 0);
                          const Tensor<S>& kv = parent_value(self, 1);
                          const Tensor<S>& vv = parent_value(self, 2);
                          RowMatrix<S> dp(Nq, Nk);
                          for (Index g = 0; g < G; ++g) {
                            const ConstMatrixMap<S> pg(probs.data() + g * Nq * Nk, Nq, Nk);
                            const ConstMatrixMap<S> go(self.grad.data() + g * Nq * dv, Nq, dv);
                            if (gv) MatrixMap<S>(gv->data() + g * Nk * dv, Nk, dv).noalias() += pg.transpose() * go;
                            if (!gq && !gk && !gb) continue;
                            dp.noalias() = go * ConstMatrixMap<S>(vv.data() + g * Nk * dv, Nk, dv).transpose();
                            // dS = P * (dP - rowsum(dP * P))
                            const Eigen::Matrix<S, Eigen::Dynamic, 1> rs = (dp.array() * pg.array()).rowwise().sum();
                            dp = (pg.array() * (dp.array().colwise() - rs.array())).matrix();
                            if (gb) MatrixMap<S>(gb->data() + (g % heads) * Nq * Nk, Nq, Nk) += dp;
                            if (gq)
                              MatrixMap<S>(gq->data() + g * Nq * d, Nq, d).noalias() +=
                                  scale_f * (dp * ConstMatrixMap<S>(kv.data() + g * Nk * d, Nk, d));
                            if (gk)
                              MatrixMap<S>(gk->data() + g * Nk * d, Nk, d).noalias() +=
                                  scale_f * (dp.transpose() * ConstMatrixMap<S>(qv.data() + g * Nq * d, Nq, d));
                          }
                        });
}

#define VITDIFF_INSTANTIATE_OPS(S)                                                            \
  template Var<S> add(const Var<S>&, const Var<S>&);                                         \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                         \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                         \
  template Var<S> scale(const Var<S>&, S);                                                   \
  template Var<S> silu(const Var<S>&);                                                       \
  template Var<S> gelu(const Var<S>&);                                                       \
  template Var<S> add_broadcast(const Var<S>&, const Var<S>&);                               \
  template Var<S> sum(const Var<S>&);                                                        \
  template Var<S> mean(const Var<S>&);                                                       \
  template Var<S> mse(const Var<S>&, const Var<S>&);                                         \
  template Var<S> reshape(const Var<S>&, Shape);                                             \
  template Var<S> permute(const Var<S>&, const std::vector<int>&);                           \
  template Var<S> concat(const std::vector<Var<S>>&, int);                                   \
  template Var<S> slice(const Var<S>&, int, Index, Index);                                   \
  template Var<S> roll2d(const Var<S>&, Index, Index);                                       \
  template Var<S> upsample_nearest2x(const Var<S>&);                                         \
  template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                       \
  template Var<S> layer_norm(const Var<S>&, const Var<S>&, const Var<S>&, S);                \
  template Var<S> group_norm(const Var<S>&, Index, const Var<S>&, const Var<S>&, S);         \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const Var<S>&, Index, Index);         \
  template Var<S> depthwise_conv2d(const Var<S>&, const Var<S>&, const Var<S>&, Index);      \
  template Var<S> modulate(const Var<S>&, const Var<S>&, const Var<S>&, ChannelAxis);        \
  template Var<S> gather_rows(const Var<S>&, const std::vector<Index>&);                     \
  template Var<S> dropout(const Var<S>&, S, Rng&);                                           \
  template Var<S> attention(const Var<S>&, const Var<S>&, const Var<S>&, const AttentionOptions<S>&);

VITDIFF_INSTANTIATE_OPS(float)
VITDIFF_INSTANTIATE_OPS(double)

}  // namespace vitdiff
