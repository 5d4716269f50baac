#pragma once

// Differentiable operations used by the backbone, the heads and the losses.
// Feature maps are NCHW. Convolutions lower to im2col + GEMM (Eigen).

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "bmlab/errors.hpp"
#include "bmlab/tensor.hpp"

namespace bmlab {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

struct ConvGeom {
  std::size_t channels, height, width, kernel, stride, pad, out_h, out_w;
  std::size_t rows() const { return channels * kernel * kernel; }
  std::size_t cols() const { return out_h * out_w; }
};

// col is (C*K*K) x (Ho*Wo), row-major.
inline void im2col(const double* x, const ConvGeom& g, double* col) {
  const auto H = static_cast<std::ptrdiff_t>(g.height);
  const auto W = static_cast<std::ptrdiff_t>(g.width);
  const auto P = static_cast<std::ptrdiff_t>(g.pad);
  const auto S = static_cast<std::ptrdiff_t>(g.stride);
  std::size_t r = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double* xc = x + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj, ++r) {
        double* dst = col + r * g.cols();
        for (std::size_t oi = 0; oi < g.out_h; ++oi) {
          const auto ii = static_cast<std::ptrdiff_t>(oi) * S - P + static_cast<std::ptrdiff_t>(ki);
          if (ii < 0 || ii >= H) {
            std::fill(dst + oi * g.out_w, dst + (oi + 1) * g.out_w, 0.0);
            continue;
          }
          const double* row = xc + ii * W;
          for (std::size_t oj = 0; oj < g.out_w; ++oj) {
            const auto jj = static_cast<std::ptrdiff_t>(oj) * S - P + static_cast<std::ptrdiff_t>(kj);
            dst[oi * g.out_w + oj] = (jj < 0 || jj >= W) ? 0.0 : row[jj];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add col back into x.
inline void col2im(const double* col, const ConvGeom& g, double* x) {
  const auto H = static_cast<std::ptrdiff_t>(g.height);
  const auto W = static_cast<std::ptrdiff_t>(g.width);
  const auto P = static_cast<std::ptrdiff_t>(g.pad);
  const auto S = static_cast<std::ptrdiff_t>(g.stride);
  std::size_t r = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    double* xc = x + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj, ++r) {
        const double* src = col + r * g.cols();
        for (std::size_t oi = 0; oi < g.out_h; ++oi) {
          const auto ii = static_cast<std::ptrdiff_t>(oi) * S - P + static_cast<std::ptrdiff_t>(ki);
          if (ii < 0 || ii >= H) continue;
          double* row = xc + ii * W;
          for (std::size_t oj = 0; oj < g.out_w; ++oj) {
            const auto jj = static_cast<std::ptrdiff_t>(oj) * S - P + static_cast<std::ptrdiff_t>(kj);
            if (jj >= 0 && jj < W) row[jj] += src[oi * g.out_w + oj];
          }
        }
      }
    }
  }
}

}  // namespace detail

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                   std::size_t pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// x: N x I x H x W, w: O x I x K x K, b: O (may be undefined).
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                     std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw ShapeError("conv2d: expected 4-d input and weight, got " + shape_str(x.shape()) +
                     " and " + shape_str(w.shape()));
  }
  const std::size_t N = x.dim(0), I = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), K = w.dim(2);
  if (w.dim(1) != I) {
    throw ShapeError("conv2d: input has " + std::to_string(I) + " channels but weight " +
                     shape_str(w.shape()) + " expects " + std::to_string(w.dim(1)));
  }
  if (w.dim(3) != K || K % 2 == 0) {
    throw ShapeError("conv2d: kernel must be square with odd size, got " + shape_str(w.shape()));
  }
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (H + 2 * pad < K || W + 2 * pad < K) {
    throw ShapeError("conv2d: kernel " + std::to_string(K) + " larger than padded input " +
                     shape_str(x.shape()));
  }
  if (b.defined() && (b.numel() != O)) {
    throw ShapeError("conv2d: bias " + shape_str(b.shape()) + " does not match " +
                     std::to_string(O) + " output channels");
  }
  const detail::ConvGeom g{I, H, W, K, stride, pad, conv_out_extent(H, K, stride, pad),
                           conv_out_extent(W, K, stride, pad)};
  const bool direct = (K == 1 && stride == 1 && pad == 0);
  const std::size_t in_sz = I * H * W, out_sz = O * g.cols();

  Buffer out(N * out_sz);
  // Columns are kept for the backward pass only when a graph will be built.
  const bool keep = grad_enabled() && (x.requires_grad() || w.requires_grad() ||
                                       (b.defined() && b.requires_grad()));
  auto cols = std::make_shared<Buffer>();
  Buffer scratch;
  if (!direct) {
    if (keep) {
      cols->resize(N * g.rows() * g.cols());
    } else {
      scratch.resize(g.rows() * g.cols());
    }
  }
  detail::ConstMatMap wm(w.data().data(), static_cast<Eigen::Index>(O),
                         static_cast<Eigen::Index>(g.rows()));
  for (std::size_t n = 0; n < N; ++n) {
    const double* colp;
    if (direct) {
      colp = x.data().data() + n * in_sz;
    } else {
      double* dst = keep ? cols->data() + n * g.rows() * g.cols() : scratch.data();
      detail::im2col(x.data().data() + n * in_sz, g, dst);
      colp = dst;
    }
    detail::ConstMatMap cm(colp, static_cast<Eigen::Index>(g.rows()),
                           static_cast<Eigen::Index>(g.cols()));
    detail::MatMap om(out.data() + n * out_sz, static_cast<Eigen::Index>(O),
                      static_cast<Eigen::Index>(g.cols()));
    om.noalias() = wm * cm;
    if (b.defined()) {
      for (std::size_t o = 0; o < O; ++o) om.row(static_cast<Eigen::Index>(o)).array() += b[o];
    }
  }

  Shape out_shape{N, O, g.out_h, g.out_w};
  return Tensor::make_result(
      std::move(out_shape), std::move(out), {x, w, b},
      [x, w, b, g, cols, direct, N, O, in_sz, out_sz](detail::Node& self) {
        const auto rows = static_cast<Eigen::Index>(g.rows());
        const auto ncol = static_cast<Eigen::Index>(g.cols());
        detail::ConstMatMap wm(w.node()->data.data(), static_cast<Eigen::Index>(O), rows);
        Buffer dcol(direct ? 0 : g.rows() * g.cols());
        for (std::size_t n = 0; n < N; ++n) {
          detail::ConstMatMap dy(self.grad.data() + n * out_sz, static_cast<Eigen::Index>(O), ncol);
          const double* colp = direct ? x.node()->data.data() + n * in_sz
                                      : cols->data() + n * g.rows() * g.cols();
          detail::ConstMatMap cm(colp, rows, ncol);
          if (w.requires_grad()) {
            w.node()->ensure_grad();
            detail::MatMap dw(w.node()->grad.data(), static_cast<Eigen::Index>(O), rows);
            dw.noalias() += dy * cm.transpose();
          }
          if (b.defined() && b.requires_grad()) {
            b.node()->ensure_grad();
            for (std::size_t o = 0; o < O; ++o) {
              const double* r = self.grad.data() + n * out_sz + o * g.cols();
              b.node()->grad[o] += std::accumulate(r, r + g.cols(), 0.0);
            }
          }
          if (x.requires_grad()) {
            x.node()->ensure_grad();
            double* dx = x.node()->grad.data() + n * in_sz;
            if (direct) {
              detail::MatMap dxm(dx, rows, ncol);
              dxm.noalias() += wm.transpose() * dy;
            } else {
              detail::MatMap dcm(dcol.data(), rows, ncol);
              dcm.noalias() = wm.transpose() * dy;
              detail::col2im(dcol.data(), g, dx);
            }
          }
        }
      });
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  return conv2d(x, w, Tensor(), stride, pad);
}

// 2x2 / stride-2 transposed convolution. x: N x I x H x W, w: I x O x 2 x 2,
// b: O (may be undefined). Output N x O x 2H x 2W.
inline Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b,
                               std::size_t stride = 2) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw ShapeError("conv_transpose2d: expected 4-d input and weight, got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  if (w.dim(2) != 2 || w.dim(3) != 2 || stride != 2) {
    throw ConfigError("conv_transpose2d: only kernel 2x2 with stride 2 is supported, got kernel " +
                      shape_str(w.shape()) + " stride " + std::to_string(stride));
  }
  const std::size_t N = x.dim(0), I = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (w.dim(0) != I) {
    throw ShapeError("conv_transpose2d: input has " + std::to_string(I) +
                     " channels but weight " + shape_str(w.shape()) + " expects " +
                     std::to_string(w.dim(0)));
  }
  const std::size_t O = w.dim(1);
  if (b.defined() && b.numel() != O) {
    throw ShapeError("conv_transpose2d: bias " + shape_str(b.shape()) + " does not match " +
                     std::to_string(O) + " output channels");
  }
  const std::size_t HW = H * W, OH = 2 * H, OW = 2 * W;
  const auto eO4 = static_cast<Eigen::Index>(O * 4);
  const auto eI = static_cast<Eigen::Index>(I);
  const auto eHW = static_cast<Eigen::Index>(HW);

  Buffer out(N * O * OH * OW);
  detail::RowMat tmp(eO4, eHW);
  detail::ConstMatMap wm(w.data().data(), eI, eO4);  // I x (O*4)
  for (std::size_t n = 0; n < N; ++n) {
    detail::ConstMatMap xm(x.data().data() + n * I * HW, eI, eHW);
    tmp.noalias() = wm.transpose() * xm;
    double* on = out.data() + n * O * OH * OW;
    for (std::size_t o = 0; o < O; ++o) {
      const double bias = b.defined() ? b[o] : 0.0;
      for (std::size_t d = 0; d < 4; ++d) {
        const std::size_t dy = d / 2, dx = d % 2;
        const double* t = tmp.data() + (o * 4 + d) * HW;
        for (std::size_t i = 0; i < H; ++i) {
          double* orow = on + (o * OH + 2 * i + dy) * OW + dx;
          for (std::size_t j = 0; j < W; ++j) orow[2 * j] = t[i * W + j] + bias;
        }
      }
    }
  }
  return Tensor::make_result(
      Shape{N, O, OH, OW}, std::move(out), {x, w, b},
      [x, w, b, N, I, O, H, W, HW, OH, OW, eO4, eI, eHW](detail::Node& self) {
        detail::RowMat dtmp(eO4, eHW);
        detail::ConstMatMap wm(w.node()->data.data(), eI, eO4);
        for (std::size_t n = 0; n < N; ++n) {
          const double* gn = self.grad.data() + n * O * OH * OW;
          for (std::size_t o = 0; o < O; ++o) {
            for (std::size_t d = 0; d < 4; ++d) {
              const std::size_t dy = d / 2, dx = d % 2;
              double* t = dtmp.data() + (o * 4 + d) * HW;
              for (std::size_t i = 0; i < H; ++i) {
                const double* grow = gn + (o * OH + 2 * i + dy) * OW + dx;
                for (std::size_t j = 0; j < W; ++j) t[i * W + j] = grow[2 * j];
              }
            }
          }
          if (b.defined() && b.requires_grad()) {
            b.node()->ensure_grad();
            for (std::size_t o = 0; o < O; ++o) {
              const double* r = dtmp.data() + o * 4 * HW;
              b.node()->grad[o] += std::accumulate(r, r + 4 * HW, 0.0);
            }
          }
          detail::ConstMatMap xm(x.node()->data.data() + n * I * HW, eI, eHW);
          if (w.requires_grad()) {
            w.node()->ensure_grad();
            detail::MatMap dw(w.node()->grad.data(), eI, eO4);
            dw.noalias() += xm * dtmp.transpose();
          }
          if (x.requires_grad()) {
            x.node()->ensure_grad();
            detail::MatMap dxm(x.node()->grad.data() + n * I * HW, eI, eHW);
            dxm.noalias() += wm * dtmp;
          }
        }
      });
}

inline Tensor conv_transpose2d(const Tensor& x, const Tensor& w, std::size_t stride = 2) {
  return conv_transpose2d(x, w, Tensor(), stride);
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return Tensor::make_result(x.shape(), std::move(out), {x}, [x](detail::Node& self) {
    auto* in = x.node();
    in->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (in->data[i] > 0.0) in->grad[i] += self.grad[i];
    }
  });
}

inline double sigmoid_scalar(double v) {
  // Split by sign so exp never overflows.
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(x[i]);
  auto vals = std::make_shared<std::vector<double>>(out);
  return Tensor::make_result(x.shape(), std::move(out), {x}, [x, vals](detail::Node& self) {
    auto* in = x.node();
    in->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double s = (*vals)[i];
      in->grad[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [a, b](detail::Node& self) {
    for (const Tensor* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto* in = t->node();
      in->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [a, b](detail::Node& self) {
    if (a.requires_grad()) {
      a.node()->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) a.node()->grad[i] += self.grad[i] * b[i];
    }
    if (b.requires_grad()) {
      b.node()->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) b.node()->grad[i] += self.grad[i] * a[i];
    }
  });
}

inline Tensor scale(const Tensor& x, double s) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  return Tensor::make_result(x.shape(), std::move(out), {x}, [x, s](detail::Node& self) {
    x.node()->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) x.node()->grad[i] += self.grad[i] * s;
  });
}

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return Tensor::make_result(Shape{1}, Buffer{acc}, {x}, [x](detail::Node& self) {
    x.node()->ensure_grad();
    for (auto& g : x.node()->grad) g += self.grad[0];
  });
}

// Nearest-neighbour 2x upsampling of an NCHW map.
inline Tensor upsample_nearest2x(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("upsample_nearest2x: expected NCHW, got " + shape_str(x.shape()));
  const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<double> out(NC * 4 * H * W);
  for (std::size_t p = 0; p < NC; ++p) {
    for (std::size_t i = 0; i < 2 * H; ++i) {
      for (std::size_t j = 0; j < 2 * W; ++j) {
        out[(p * 2 * H + i) * 2 * W + j] = x[(p * H + i / 2) * W + j / 2];
      }
    }
  }
  return Tensor::make_result(
      Shape{x.dim(0), x.dim(1), 2 * H, 2 * W}, std::move(out), {x}, [x, NC, H, W](detail::Node& self) {
        x.node()->ensure_grad();
        auto& g = x.node()->grad;
        for (std::size_t p = 0; p < NC; ++p) {
          for (std::size_t i = 0; i < 2 * H; ++i) {
            for (std::size_t j = 0; j < 2 * W; ++j) {
              g[(p * H + i / 2) * W + j / 2] += self.grad[(p * 2 * H + i) * 2 * W + j];
            }
          }
        }
      });
}

// Picks one channel per batch item: x is N x K x H x W, out is N x 1 x H x W.
inline Tensor select_channels(const Tensor& x, std::span<const std::size_t> channel) {
  if (x.rank() != 4 || channel.size() != x.dim(0)) {
    throw ShapeError("select_channels: need one channel index per item of " + shape_str(x.shape()));
  }
  const std::size_t N = x.dim(0), K = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<std::size_t> idx(channel.begin(), channel.end());
  for (std::size_t c : idx) {
    if (c >= K) {
      throw ShapeError("select_channels: channel " + std::to_string(c) + " out of range for " +
                       shape_str(x.shape()));
    }
  }
  std::vector<double> out(N * HW);
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>((n * K + idx[n]) * HW), HW,
                out.begin() + static_cast<std::ptrdiff_t>(n * HW));
  }
  return Tensor::make_result(Shape{N, 1, x.dim(2), x.dim(3)}, std::move(out), {x},
                             [x, idx, K, HW](detail::Node& self) {
                               x.node()->ensure_grad();
                               for (std::size_t n = 0; n < idx.size(); ++n) {
                                 double* g = x.node()->grad.data() + (n * K + idx[n]) * HW;
                                 for (std::size_t i = 0; i < HW; ++i) g[i] += self.grad[n * HW + i];
                               }
                             });
}

}  // namespace bmlab
