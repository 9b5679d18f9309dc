#pragma once

// Differentiable tensor operations. Every op checks shapes, computes its value
// eagerly and, when recording, attaches a closure that pushes the node's
// gradient into its parents.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "metairnet/autograd.hpp"

namespace metairnet {

namespace detail {

template <typename S, typename Expr>
void accumulate(Node<S>& parent, const Expr& g) {
    if (parent.requires_grad) parent.grad_buffer() += g;
}

template <typename S>
void require_rank(const Var<S>& x, int rank, const char* op) {
    if (x.value().rank() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         to_string(x.shape()));
}

/// Unfold a C x H x W image into a (C*k*k) x (Ho*Wo) column matrix.
template <typename S>
void im2col(const S* img, Index C, Index H, Index W, Index k, Index pad, S* col) {
    const Index Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
    for (Index c = 0; c < C; ++c)
        for (Index ky = 0; ky < k; ++ky)
            for (Index kx = 0; kx < k; ++kx) {
                S* dst = col + ((c * k + ky) * k + kx) * Ho * Wo;
                for (Index y = 0; y < Ho; ++y) {
                    const Index iy = y + ky - pad;
                    S* row = dst + y * Wo;
                    if (iy < 0 || iy >= H) {
                        std::fill(row, row + Wo, S(0));
                        continue;
                    }
                    const S* src = img + (c * H + iy) * W;
                    for (Index x = 0; x < Wo; ++x) {
                        const Index ix = x + kx - pad;
                        row[x] = (ix >= 0 && ix < W) ? src[ix] : S(0);
                    }
                }
            }
}

template <typename S>
void col2im(const S* col, Index C, Index H, Index W, Index k, Index pad, S* img) {
    const Index Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
    for (Index c = 0; c < C; ++c)
        for (Index ky = 0; ky < k; ++ky)
            for (Index kx = 0; kx < k; ++kx) {
                const S* src = col + ((c * k + ky) * k + kx) * Ho * Wo;
                for (Index y = 0; y < Ho; ++y) {
                    const Index iy = y + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    S* dst = img + (c * H + iy) * W;
                    for (Index x = 0; x < Wo; ++x) {
                        const Index ix = x + kx - pad;
                        if (ix >= 0 && ix < W) dst[ix] += src[y * Wo + x];
                    }
                }
            }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename S>
Var<S> operator+(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor<S> out(a.shape(), a.value().data + b.value().data);
    return make_result<S>(std::move(out), {a, b}, [](detail::Node<S>& self) {
        detail::accumulate(self.parent(0), self.grad.data);
        detail::accumulate(self.parent(1), self.grad.data);
    });
}

template <typename S>
Var<S> operator-(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a.value(), b.value(), "sub");
    Tensor<S> out(a.shape(), a.value().data - b.value().data);
    return make_result<S>(std::move(out), {a, b}, [](detail::Node<S>& self) {
        detail::accumulate(self.parent(0), self.grad.data);
        detail::accumulate(self.parent(1), -self.grad.data);
    });
}

/// Elementwise product.
template <typename S>
Var<S> operator*(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor<S> out(a.shape(), a.value().data * b.value().data);
    return make_result<S>(std::move(out), {a, b}, [](detail::Node<S>& self) {
        detail::accumulate(self.parent(0), self.grad.data * self.parent(1).value.data);
        detail::accumulate(self.parent(1), self.grad.data * self.parent(0).value.data);
    });
}

template <typename S>
Var<S> operator*(S c, const Var<S>& a) {
    Tensor<S> out(a.shape(), a.value().data * c);
    return make_result<S>(std::move(out), {a},
                          [c](detail::Node<S>& self) { detail::accumulate(self.parent(0), self.grad.data * c); });
}

template <typename S>
Var<S> operator-(const Var<S>& a) {
    return S(-1) * a;
}

template <typename S>
Var<S> relu(const Var<S>& x) {
    Tensor<S> out(x.shape(), x.value().data.max(S(0)));
    return make_result<S>(std::move(out), {x}, [](detail::Node<S>& self) {
        detail::accumulate(self.parent(0), (self.parent(0).value.data > S(0)).select(self.grad.data, S(0)));
    });
}

template <typename S>
Var<S> leaky_relu(const Var<S>& x, S slope) {
    const auto& v = x.value().data;
    Tensor<S> out(x.shape(), (v > S(0)).select(v, v * slope));
    return make_result<S>(std::move(out), {x}, [slope](detail::Node<S>& self) {
        detail::accumulate(self.parent(0),
                           (self.parent(0).value.data > S(0)).select(self.grad.data, self.grad.data * slope));
    });
}

template <typename S>
Var<S> tanh(const Var<S>& x) {
    Tensor<S> out(x.shape(), x.value().data.tanh());
    return make_result<S>(std::move(out), {x}, [](detail::Node<S>& self) {
        const auto& y = self.value.data;
        detail::accumulate(self.parent(0), self.grad.data * (S(1) - y * y));
    });
}

template <typename S>
Var<S> sigmoid(const Var<S>& x) {
    Tensor<S> out(x.shape(), S(1) / (S(1) + (-x.value().data).exp()));
    return make_result<S>(std::move(out), {x}, [](detail::Node<S>& self) {
        const auto& y = self.value.data;
        detail::accumulate(self.parent(0), self.grad.data * y * (S(1) - y));
    });
}

template <typename S>
Var<S> sum(const Var<S>& x) {
    Tensor<S> out({1});
    out.data[0] = x.value().data.sum();
    return make_result<S>(std::move(out), {x}, [](detail::Node<S>& self) {
        if (self.parent(0).requires_grad) self.parent(0).grad_buffer() += self.grad.data[0];
    });
}

template <typename S>
Var<S> mean(const Var<S>& x) {
    return (S(1) / static_cast<S>(x.size())) * sum(x);
}

template <typename S>
Var<S> reshape(const Var<S>& x, Shape shape) {
    if (numel(shape) != x.size())
        throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
    Tensor<S> out(std::move(shape), x.value().data);
    return make_result<S>(std::move(out), {x},
                          [](detail::Node<S>& self) { detail::accumulate(self.parent(0), self.grad.data); });
}

// ---------------------------------------------------------------------------
// Dense layers

/// y = x W^T + b for x [N, in], W [out, in], b [out].
template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
    detail::require_rank(x, 2, "linear");
    detail::require_rank(w, 2, "linear weight");
    const Index n = x.dim(0), in = x.dim(1), outd = w.dim(0);
    if (w.dim(1) != in || b.size() != outd)
        throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                         to_string(w.shape()));
    Tensor<S> out({n, outd});
    auto y = out.matrix();
    y.noalias() = x.value().matrix() * w.value().matrix().transpose();
    y.rowwise() += b.value().data.matrix().transpose();
    return make_result<S>(std::move(out), {x, w, b}, [n, in, outd](detail::Node<S>& self) {
        Eigen::Map<const RowMatrix<S>> g(self.grad.ptr(), n, outd);
        auto& px = self.parent(0);
        auto& pw = self.parent(1);
        auto& pb = self.parent(2);
        if (px.requires_grad) {
            Eigen::Map<RowMatrix<S>> dx(px.grad_buffer().data(), n, in);
            dx.noalias() += g * pw.value.matrix();
        }
        if (pw.requires_grad) {
            Eigen::Map<RowMatrix<S>> dw(pw.grad_buffer().data(), outd, in);
            dw.noalias() += g.transpose() * px.value.matrix();
        }
        if (pb.requires_grad) pb.grad_buffer() += g.colwise().sum().transpose().array();
    });
}

/// Matrix product of rank-2 tensors.
template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw ShapeError("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    Tensor<S> out({m, n});
    out.matrix().noalias() = a.value().matrix() * b.value().matrix();
    return make_result<S>(std::move(out), {a, b}, [m, k, n](detail::Node<S>& self) {
        Eigen::Map<const RowMatrix<S>> g(self.grad.ptr(), m, n);
        auto& pa = self.parent(0);
        auto& pb = self.parent(1);
        if (pa.requires_grad) {
            Eigen::Map<RowMatrix<S>> da(pa.grad_buffer().data(), m, k);
            da.noalias() += g * pb.value.matrix().transpose();
        }
        if (pb.requires_grad) {
            Eigen::Map<RowMatrix<S>> db(pb.grad_buffer().data(), k, n);
            db.noalias() += pa.value.matrix().transpose() * g;
        }
    });
}

/// Stride-1 convolution, x [N, C, H, W], w [O, C, k, k], b [O], zero padding.
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b, Index pad) {
    detail::require_rank(x, 4, "conv2d");
    detail::require_rank(w, 4, "conv2d weight");
    const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const Index O = w.dim(0), k = w.dim(2);
    if (w.dim(1) != C || w.dim(3) != k || b.size() != O)
        throw ShapeError("conv2d: input " + to_string(x.shape()) + " incompatible with weight " +
                         to_string(w.shape()));
    const Index Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
    if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: input too small " + to_string(x.shape()));
    const Index ckk = C * k * k, hw = Ho * Wo;

    Tensor<S> out({N, O, Ho, Wo});
    Eigen::Map<const RowMatrix<S>> wm(w.value().ptr(), O, ckk);
    Eigen::Map<const Vector<S>> bias(b.value().ptr(), O);
    RowMatrix<S> col(ckk, hw);
    for (Index n = 0; n < N; ++n) {
        detail::im2col(x.value().ptr() + n * C * H * W, C, H, W, k, pad, col.data());
        Eigen::Map<RowMatrix<S>> o(out.ptr() + n * O * hw, O, hw);
        o.noalias() = wm * col;
        o.colwise() += bias;
    }
    return make_result<S>(std::move(out), {x, w, b}, [=](detail::Node<S>& self) {
        auto& px = self.parent(0);
        auto& pw = self.parent(1);
        auto& pb = self.parent(2);
        Eigen::Map<const RowMatrix<S>> wmat(pw.value.ptr(), O, ckk);
        RowMatrix<S> colbuf(ckk, hw);
        for (Index n = 0; n < N; ++n) {
            Eigen::Map<const RowMatrix<S>> g(self.grad.ptr() + n * O * hw, O, hw);
            if (px.requires_grad) {
                colbuf.noalias() = wmat.transpose() * g;
                detail::col2im(colbuf.data(), C, H, W, k, pad, px.grad_buffer().data() + n * C * H * W);
            }
            if (pw.requires_grad) {
                detail::im2col(px.value.ptr() + n * C * H * W, C, H, W, k, pad, colbuf.data());
                Eigen::Map<RowMatrix<S>> dw(pw.grad_buffer().data(), O, ckk);
                dw.noalias() += g * colbuf.transpose();
            }
            if (pb.requires_grad) pb.grad_buffer() += g.rowwise().sum().array();
        }
    });
}

/// Running statistics of a batch-normalization layer. Not learnable.
template <typename S>
struct BatchNormStats {
    Tensor<S> mean;
    Tensor<S> var;
};

namespace detail {

/// Normalize x per channel (axis 1) with the given mean and inverse std, then
/// scale and shift. `batch_stats` selects the backward rule: with batch
/// statistics the mean and variance depend on x.
template <typename S>
Var<S> batch_norm_apply(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta,
                        const Eigen::Array<S, Eigen::Dynamic, 1>& mu,
                        const Eigen::Array<S, Eigen::Dynamic, 1>& invstd, bool batch_stats) {
    const Index N = x.dim(0), C = x.dim(1), sp = x.size() / (N * C), M = N * sp;
    const auto& xv = x.value().data;
    Tensor<S> xhat(x.shape());
    Tensor<S> out(x.shape());
    const auto& g = gamma.value().data;
    const auto& bt = beta.value().data;
    for (Index n = 0; n < N; ++n)
        for (Index c = 0; c < C; ++c) {
            const Index off = (n * C + c) * sp;
            xhat.data.segment(off, sp) = (xv.segment(off, sp) - mu[c]) * invstd[c];
            out.data.segment(off, sp) = xhat.data.segment(off, sp) * g[c] + bt[c];
        }

    return make_result<S>(std::move(out), {x, gamma, beta},
                          [xhat = std::move(xhat), invstd, batch_stats, N, C, sp, M](Node<S>& self) {
                              auto& px = self.parent(0);
                              auto& pg = self.parent(1);
                              auto& pb = self.parent(2);
                              const auto& gr = self.grad.data;
                              const auto& gam = pg.value.data;
                              for (Index c = 0; c < C; ++c) {
                                  S sum_g = 0, sum_gx = 0;
                                  for (Index n = 0; n < N; ++n) {
                                      const Index off = (n * C + c) * sp;
                                      sum_g += gr.segment(off, sp).sum();
                                      sum_gx += (gr.segment(off, sp) * xhat.data.segment(off, sp)).sum();
                                  }
                                  if (pg.requires_grad) pg.grad_buffer()[c] += sum_gx;
                                  if (pb.requires_grad) pb.grad_buffer()[c] += sum_g;
                                  if (!px.requires_grad) continue;
                                  auto& dx = px.grad_buffer();
                                  const S scale = gam[c] * invstd[c];
                                  const S m = static_cast<S>(M);
                                  for (Index n = 0; n < N; ++n) {
                                      const Index off = (n * C + c) * sp;
                                      if (batch_stats)
                                          dx.segment(off, sp) += scale / m *
                                                                 (m * gr.segment(off, sp) - sum_g -
                                                                  xhat.data.segment(off, sp) * sum_gx);
                                      else
                                          dx.segment(off, sp) += scale * gr.segment(off, sp);
                                  }
                              }
                          });
}

template <typename S>
void check_batch_norm_shapes(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta,
                             const BatchNormStats<S>& stats) {
    if (x.value().rank() < 2) throw ShapeError("batch_norm: rank < 2 input " + to_string(x.shape()));
    const Index C = x.dim(1);
    if (gamma.size() != C || beta.size() != C || stats.mean.size() != C || stats.var.size() != C)
        throw ShapeError("batch_norm: " + std::to_string(C) + " channels but parameters of size " +
                         std::to_string(gamma.size()));
}

}  // namespace detail

/// Batch normalization with batch statistics over every axis except axis 1.
/// Updates the running statistics in `running`.
template <typename S>
Var<S> batch_norm_train(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, BatchNormStats<S>& running,
                        S momentum = S(0.1), S eps = S(1e-5)) {
    detail::check_batch_norm_shapes(x, gamma, beta, running);
    const Index N = x.dim(0), C = x.dim(1), sp = x.size() / (N * C), M = N * sp;
    if (M < 2) throw ShapeError("batch_norm: batch statistics need more than one value per channel");
    const auto& xv = x.value().data;
    Eigen::Array<S, Eigen::Dynamic, 1> mu(C), invstd(C);
    for (Index c = 0; c < C; ++c) {
        S s = 0, ss = 0;
        for (Index n = 0; n < N; ++n) s += xv.segment((n * C + c) * sp, sp).sum();
        const S m = s / static_cast<S>(M);
        for (Index n = 0; n < N; ++n) ss += (xv.segment((n * C + c) * sp, sp) - m).square().sum();
        const S v = ss / static_cast<S>(M);
        mu[c] = m;
        invstd[c] = S(1) / std::sqrt(v + eps);
        running.mean.data[c] = (S(1) - momentum) * running.mean.data[c] + momentum * m;
        running.var.data[c] =
            (S(1) - momentum) * running.var.data[c] + momentum * v * static_cast<S>(M) / static_cast<S>(M - 1);
    }
    return detail::batch_norm_apply(x, gamma, beta, mu, invstd, true);
}

/// Batch normalization with fixed running statistics.
template <typename S>
Var<S> batch_norm_infer(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, const BatchNormStats<S>& running,
                        S eps = S(1e-5)) {
    detail::check_batch_norm_shapes(x, gamma, beta, running);
    const Eigen::Array<S, Eigen::Dynamic, 1> invstd = (running.var.data + eps).rsqrt();
    return detail::batch_norm_apply(x, gamma, beta, running.mean.data, invstd, false);
}

// ---------------------------------------------------------------------------
// Spatial

/// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
template <typename S>
Var<S> max_pool2(const Var<S>& x) {
    detail::require_rank(x, 4, "max_pool2");
    const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const Index Ho = H / 2, Wo = W / 2;
    if (Ho == 0 || Wo == 0) throw ShapeError("max_pool2: input too small " + to_string(x.shape()));
    Tensor<S> out({N, C, Ho, Wo});
    std::vector<Index> argmax(static_cast<std::size_t>(out.size()));
    const S* in = x.value().ptr();
    Index o = 0;
    for (Index nc = 0; nc < N * C; ++nc)
        for (Index y = 0; y < Ho; ++y)
            for (Index xx = 0; xx < Wo; ++xx, ++o) {
                Index best = (nc * H + 2 * y) * W + 2 * xx;
                for (Index dy = 0; dy < 2; ++dy)
                    for (Index dx = 0; dx < 2; ++dx) {
                        const Index idx = (nc * H + 2 * y + dy) * W + 2 * xx + dx;
                        if (in[idx] > in[best]) best = idx;
                    }
                argmax[static_cast<std::size_t>(o)] = best;
                out.data[o] = in[best];
            }
    return make_result<S>(std::move(out), {x}, [argmax = std::move(argmax)](detail::Node<S>& self) {
        auto& px = self.parent(0);
        if (!px.requires_grad) return;
        auto& dx = px.grad_buffer();
        for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += self.grad.data[static_cast<Index>(i)];
    });
}

/// [N, C, H, W] -> [N, C] spatial mean.
template <typename S>
Var<S> global_avg_pool(const Var<S>& x) {
    detail::require_rank(x, 4, "global_avg_pool");
    const Index N = x.dim(0), C = x.dim(1), sp = x.dim(2) * x.dim(3);
    Tensor<S> out({N, C});
    for (Index i = 0; i < N * C; ++i) out.data[i] = x.value().data.segment(i * sp, sp).mean();
    return make_result<S>(std::move(out), {x}, [N, C, sp](detail::Node<S>& self) {
        auto& px = self.parent(0);
        if (!px.requires_grad) return;
        auto& dx = px.grad_buffer();
        for (Index i = 0; i < N * C; ++i) dx.segment(i * sp, sp) += self.grad.data[i] / static_cast<S>(sp);
    });
}

/// Nearest-neighbour 2x upsampling.
template <typename S>
Var<S> upsample2x(const Var<S>& x) {
    detail::require_rank(x, 4, "upsample2x");
    const Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<S> out({N, C, 2 * H, 2 * W});
    const S* in = x.value().ptr();
    for (Index nc = 0; nc < N * C; ++nc)
        for (Index y = 0; y < 2 * H; ++y)
            for (Index xx = 0; xx < 2 * W; ++xx)
                out.data[(nc * 2 * H + y) * 2 * W + xx] = in[(nc * H + y / 2) * W + xx / 2];
    return make_result<S>(std::move(out), {x}, [N, C, H, W](detail::Node<S>& self) {
        auto& px = self.parent(0);
        if (!px.requires_grad) return;
        auto& dx = px.grad_buffer();
        for (Index nc = 0; nc < N * C; ++nc)
            for (Index y = 0; y < 2 * H; ++y)
                for (Index xx = 0; xx < 2 * W; ++xx)
                    dx[(nc * H + y / 2) * W + xx / 2] += self.grad.data[(nc * 2 * H + y) * 2 * W + xx];
    });
}

/// Mirror the last axis.
template <typename S>
Var<S> flip_horizontal(const Var<S>& x) {
    const Index W = x.shape().back(), rows = x.size() / W;
    Tensor<S> out(x.shape());
    for (Index r = 0; r < rows; ++r) out.data.segment(r * W, W) = x.value().data.segment(r * W, W).reverse();
    return make_result<S>(std::move(out), {x}, [W, rows](detail::Node<S>& self) {
        auto& px = self.parent(0);
        if (!px.requires_grad) return;
        auto& dx = px.grad_buffer();
        for (Index r = 0; r < rows; ++r) dx.segment(r * W, W) += self.grad.data.segment(r * W, W).reverse();
    });
}

// ---------------------------------------------------------------------------
// Concatenation and slicing

/// [N, A] ++ [N, B] -> [N, A + B].
template <typename S>
Var<S> concat_cols(const Var<S>& a, const Var<S>& b) {
    detail::require_rank(a, 2, "concat_cols");
    detail::require_rank(b, 2, "concat_cols");
    const Index N = a.dim(0), A = a.dim(1), B = b.dim(1);
    if (b.dim(0) != N) throw ShapeError("concat_cols: row mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    Tensor<S> out({N, A + B});
    out.matrix().leftCols(A) = a.value().matrix();
    out.matrix().rightCols(B) = b.value().matrix();
    return make_result<S>(std::move(out), {a, b}, [N, A, B](detail::Node<S>& self) {
        Eigen::Map<const RowMatrix<S>> g(self.grad.ptr(), N, A + B);
        auto& pa = self.parent(0);
        auto& pb = self.parent(1);
        if (pa.requires_grad) Eigen::Map<RowMatrix<S>>(pa.grad_buffer().data(), N, A) += g.leftCols(A);
        if (pb.requires_grad) Eigen::Map<RowMatrix<S>>(pb.grad_buffer().data(), N, B) += g.rightCols(B);
    });
}

/// Stack along axis 0. All trailing dimensions must agree.
template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    Index rows = 0;
    for (const auto& p : parts) {
        if (Shape(p.shape().begin() + 1, p.shape().end()) != tail)
            throw ShapeError("concat_rows: trailing shape mismatch " + to_string(p.shape()));
        rows += p.dim(0);
    }
    Shape shape{rows};
    shape.insert(shape.end(), tail.begin(), tail.end());
    Tensor<S> out(shape);
    std::vector<Index> offsets;
    Index off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        out.data.segment(off, p.size()) = p.value().data;
        off += p.size();
    }
    return make_result<S>(std::move(out), parts, [offsets = std::move(offsets)](detail::Node<S>& self) {
        for (std::size_t i = 0; i < offsets.size(); ++i) {
            auto& p = self.parent(i);
            if (p.requires_grad) p.grad_buffer() += self.grad.data.segment(offsets[i], p.value.size());
        }
    });
}

/// Rows [begin, begin + count) along axis 0.
template <typename S>
Var<S> slice_rows(const Var<S>& x, Index begin, Index count) {
    if (begin < 0 || count < 0 || begin + count > x.dim(0))
        throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of " + to_string(x.shape()));
    const Index stride = x.size() / x.dim(0);
    Shape shape = x.shape();
    shape[0] = count;
    Tensor<S> out(shape, x.value().data.segment(begin * stride, count * stride));
    return make_result<S>(std::move(out), {x}, [begin, count, stride](detail::Node<S>& self) {
        auto& px = self.parent(0);
        if (px.requires_grad) px.grad_buffer().segment(begin * stride, count * stride) += self.grad.data;
    });
}

/// Rows x[indices[i]] of a rank-2 tensor; gradients scatter-add back.
template <typename S>
Var<S> gather_rows(const Var<S>& x, const std::vector<Index>& indices) {
    detail::require_rank(x, 2, "gather_rows");
    const Index R = x.dim(0), D = x.dim(1), K = static_cast<Index>(indices.size());
    Tensor<S> out({K, D});
    for (Index i = 0; i < K; ++i) {
        const Index r = indices[static_cast<std::size_t>(i)];
        if (r < 0 || r >= R) throw ShapeError("gather_rows: index " + std::to_string(r) + " out of " + std::to_string(R));
        out.matrix().row(i) = x.value().matrix().row(r);
    }
    return make_result<S>(std::move(out), {x}, [indices, D](detail::Node<S>& self) {
        auto& px = self.parent(0);
        if (!px.requires_grad) return;
        auto& dx = px.grad_buffer();
        for (std::size_t i = 0; i < indices.size(); ++i)
            dx.segment(indices[i] * D, D) += self.grad.data.segment(static_cast<Index>(i) * D, D);
    });
}

// ---------------------------------------------------------------------------
// Losses and distances

/// mean |a - b|.
template <typename S>
Var<S> mean_abs_diff(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a.value(), b.value(), "mean_abs_diff");
    const S n = static_cast<S>(a.size());
    Tensor<S> out({1});
    out.data[0] = (a.value().data - b.value().data).abs().sum() / n;
    return make_result<S>(std::move(out), {a, b}, [n](detail::Node<S>& self) {
        const auto diff = self.parent(0).value.data - self.parent(1).value.data;
        const Eigen::Array<S, Eigen::Dynamic, 1> g = diff.sign() * (self.grad.data[0] / n);
        detail::accumulate(self.parent(0), g);
        detail::accumulate(self.parent(1), -g);
    });
}

/// mean (a - b)^2.
template <typename S>
Var<S> mean_sq_diff(const Var<S>& a, const Var<S>& b) {
    require_same_shape(a.value(), b.value(), "mean_sq_diff");
    const S n = static_cast<S>(a.size());
    Tensor<S> out({1});
    out.data[0] = (a.value().data - b.value().data).square().sum() / n;
    return make_result<S>(std::move(out), {a, b}, [n](detail::Node<S>& self) {
        const Eigen::Array<S, Eigen::Dynamic, 1> g =
            (self.parent(0).value.data - self.parent(1).value.data) * (S(2) * self.grad.data[0] / n);
        detail::accumulate(self.parent(0), g);
        detail::accumulate(self.parent(1), -g);
    });
}

/// Exact 1-D earth mover's distance between two equal-size samples with
/// uniform mass: mean |sort(z)_i - sort(r)_i|. `r` is treated as constant.
template <typename S>
Var<S> em_distance_1d(const Var<S>& z, const Tensor<S>& r) {
    if (z.size() != r.size())
        throw ShapeError("em_distance_1d: sample sizes " + std::to_string(z.size()) + " and " +
                         std::to_string(r.size()) + " differ");
    const Index d = z.size();
    if (d == 0) throw ShapeError("em_distance_1d: empty sample");
    std::vector<Index> order(static_cast<std::size_t>(d));
    std::iota(order.begin(), order.end(), Index{0});
    const auto& zv = z.value().data;
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return zv[a] < zv[b]; });
    Eigen::Array<S, Eigen::Dynamic, 1> rs = r.data;
    std::sort(rs.data(), rs.data() + d);

    Eigen::Array<S, Eigen::Dynamic, 1> sign(d);
    S total = 0;
    for (Index i = 0; i < d; ++i) {
        const S diff = zv[order[static_cast<std::size_t>(i)]] - rs[i];
        total += std::abs(diff);
        sign[order[static_cast<std::size_t>(i)]] = diff > 0 ? S(1) : (diff < 0 ? S(-1) : S(0));
    }
    Tensor<S> out({1});
    out.data[0] = total / static_cast<S>(d);
    return make_result<S>(std::move(out), {z}, [sign = std::move(sign), d](detail::Node<S>& self) {
        detail::accumulate(self.parent(0), sign * (self.grad.data[0] / static_cast<S>(d)));
    });
}

/// Euclidean (or squared Euclidean) distances between rows: x [Q, D], p [K, D] -> [Q, K].
template <typename S>
Var<S> pairwise_distance(const Var<S>& x, const Var<S>& p, bool squared) {
    detail::require_rank(x, 2, "pairwise_distance");
    detail::require_rank(p, 2, "pairwise_distance");
    const Index Q = x.dim(0), K = p.dim(0), D = x.dim(1);
    if (p.dim(1) != D) throw ShapeError("pairwise_distance: dims " + to_string(x.shape()) + " vs " + to_string(p.shape()));
    Tensor<S> out({Q, K});
    auto xm = x.value().matrix();
    auto pm = p.value().matrix();
    for (Index i = 0; i < Q; ++i)
        for (Index k = 0; k < K; ++k) {
            const S sq = (xm.row(i) - pm.row(k)).squaredNorm();
            out.data[i * K + k] = squared ? sq : std::sqrt(sq);
        }
    return make_result<S>(std::move(out), {x, p}, [Q, K, D, squared](detail::Node<S>& self) {
        auto& px = self.parent(0);
        auto& pp = self.parent(1);
        auto xv = px.value.matrix();
        auto pv = pp.value.matrix();
        for (Index i = 0; i < Q; ++i)
            for (Index k = 0; k < K; ++k) {
                const S d = self.value.data[i * K + k];
                S coef;
                if (squared) {
                    coef = S(2) * self.grad.data[i * K + k];
                } else {
                    if (d == S(0)) continue;  // subgradient 0 at coincident points
                    coef = self.grad.data[i * K + k] / d;
                }
                const Vector<S> diff = (xv.row(i) - pv.row(k)).transpose() * coef;
                if (px.requires_grad) px.grad_buffer().segment(i * D, D) += diff.array();
                if (pp.requires_grad) pp.grad_buffer().segment(k * D, D) -= diff.array();
            }
    });
}

/// Row-wise softmax of a [Q, K] matrix.
template <typename S>
RowMatrix<S> softmax_rows(const Eigen::Ref<const RowMatrix<S>>& logits) {
    RowMatrix<S> p(logits.rows(), logits.cols());
    for (Index i = 0; i < logits.rows(); ++i) {
        const S mx = logits.row(i).maxCoeff();
        p.row(i) = (logits.row(i).array() - mx).exp().matrix();
        p.row(i) /= p.row(i).sum();
    }
    return p;
}

/// Mean negative log-likelihood of `labels` under softmax(logits).
template <typename S>
Var<S> cross_entropy(const Var<S>& logits, const std::vector<int>& labels) {
    detail::require_rank(logits, 2, "cross_entropy");
    const Index Q = logits.dim(0), K = logits.dim(1);
    if (static_cast<Index>(labels.size()) != Q)
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(Q) + " rows");
    RowMatrix<S> p = softmax_rows<S>(logits.value().matrix());
    S loss = 0;
    for (Index i = 0; i < Q; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= K) throw ShapeError("cross_entropy: label out of range");
        const auto row = logits.value().matrix().row(i);
        const S mx = row.maxCoeff();
        loss -= row(y) - mx - std::log((row.array() - mx).exp().sum());
    }
    Tensor<S> out({1});
    out.data[0] = loss / static_cast<S>(Q);
    return make_result<S>(std::move(out), {logits}, [p = std::move(p), labels, Q, K](detail::Node<S>& self) {
        auto& pl = self.parent(0);
        if (!pl.requires_grad) return;
        RowMatrix<S> g = p;
        for (Index i = 0; i < Q; ++i) g(i, labels[static_cast<std::size_t>(i)]) -= S(1);
        g *= self.grad.data[0] / static_cast<S>(Q);
        pl.grad_buffer() += Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(g.data(), Q * K);
    });
}

// ---------------------------------------------------------------------------
// Grid fusion

/// Bounds of `g` near-equal blocks over `length`; the remainder goes to the
/// last block. Returns g + 1 edges.
inline std::vector<Index> block_edges(Index length, Index g) {
    std::vector<Index> edges(static_cast<std::size_t>(g + 1));
    const Index base = length / g;
    for (Index i = 0; i < g; ++i) edges[static_cast<std::size_t>(i)] = i * base;
    edges[static_cast<std::size_t>(g)] = length;
    return edges;
}

/// Expand per-sample g x g cell weights w [N, g*g] into a blockwise constant
/// map [N, 1, H, W].
template <typename S>
Var<S> grid_upsample(const Var<S>& w, Index H, Index W, Index g = 3) {
    detail::require_rank(w, 2, "grid_upsample");
    if (w.dim(1) != g * g) throw ShapeError("grid_upsample: expected " + std::to_string(g * g) + " cells");
    if (H < g || W < g) throw ShapeError("grid_upsample: map smaller than grid");
    const Index N = w.dim(0);
    const auto ey = block_edges(H, g), ex = block_edges(W, g);
    std::vector<Index> cell_of_row(static_cast<std::size_t>(H)), cell_of_col(static_cast<std::size_t>(W));
    for (Index i = 0; i < g; ++i) {
        for (Index y = ey[i]; y < ey[i + 1]; ++y) cell_of_row[static_cast<std::size_t>(y)] = i;
        for (Index x = ex[i]; x < ex[i + 1]; ++x) cell_of_col[static_cast<std::size_t>(x)] = i;
    }
    Tensor<S> out({N, 1, H, W});
    for (Index n = 0; n < N; ++n)
        for (Index y = 0; y < H; ++y)
            for (Index x = 0; x < W; ++x)
                out.data[(n * H + y) * W + x] =
                    w.value().data[n * g * g + cell_of_row[static_cast<std::size_t>(y)] * g +
                                   cell_of_col[static_cast<std::size_t>(x)]];
    return make_result<S>(std::move(out), {w}, [=](detail::Node<S>& self) {
        auto& pw = self.parent(0);
        if (!pw.requires_grad) return;
        auto& dw = pw.grad_buffer();
        for (Index n = 0; n < N; ++n)
            for (Index y = 0; y < H; ++y)
                for (Index x = 0; x < W; ++x)
                    dw[n * g * g + cell_of_row[static_cast<std::size_t>(y)] * g +
                       cell_of_col[static_cast<std::size_t>(x)]] += self.grad.data[(n * H + y) * W + x];
    });
}

/// wmap * a + (1 - wmap) * b with a, b [N, C, H, W] and wmap [N, 1, H, W]
/// broadcast over channels.
template <typename S>
Var<S> blend(const Var<S>& a, const Var<S>& b, const Var<S>& wmap) {
    require_same_shape(a.value(), b.value(), "blend");
    detail::require_rank(a, 4, "blend");
    const Index N = a.dim(0), C = a.dim(1), hw = a.dim(2) * a.dim(3);
    if (wmap.value().shape != Shape{N, 1, a.dim(2), a.dim(3)})
        throw ShapeError("blend: weight map " + to_string(wmap.shape()) + " does not match images " + to_string(a.shape()));
    Tensor<S> out(a.shape());
    for (Index n = 0; n < N; ++n) {
        const auto w = wmap.value().data.segment(n * hw, hw);
        for (Index c = 0; c < C; ++c) {
            const Index off = (n * C + c) * hw;
            out.data.segment(off, hw) =
                w * a.value().data.segment(off, hw) + (S(1) - w) * b.value().data.segment(off, hw);
        }
    }
    return make_result<S>(std::move(out), {a, b, wmap}, [N, C, hw](detail::Node<S>& self) {
        auto& pa = self.parent(0);
        auto& pb = self.parent(1);
        auto& pw = self.parent(2);
        for (Index n = 0; n < N; ++n) {
            const auto w = pw.value.data.segment(n * hw, hw);
            for (Index c = 0; c < C; ++c) {
                const Index off = (n * C + c) * hw;
                const auto g = self.grad.data.segment(off, hw);
                if (pa.requires_grad) pa.grad_buffer().segment(off, hw) += g * w;
                if (pb.requires_grad) pb.grad_buffer().segment(off, hw) += g * (S(1) - w);
                if (pw.requires_grad)
                    pw.grad_buffer().segment(n * hw, hw) +=
                        g * (pa.value.data.segment(off, hw) - pb.value.data.segment(off, hw));
            }
        }
    });
}

}  // namespace metairnet
