#pragma once

// Non-learned image and mask utilities: boundary targets, Sobel features,
// rasterization, resampling and mask IoU.
//
// Continuous image coordinates put pixel (i, j) over [j, j+1) x [i, i+1);
// its center is (j + 0.5, i + 0.5).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "bmlab/errors.hpp"
#include "bmlab/ops.hpp"
#include "bmlab/tensor.hpp"

namespace bmlab {

class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(std::size_t height, std::size_t width) : h_(height), w_(width), bits_(height * width, 0) {
    if (height == 0 || width == 0) throw ShapeError("BinaryMask: dimensions must be positive");
  }
  BinaryMask(std::size_t height, std::size_t width, std::vector<std::uint8_t> bits)
      : h_(height), w_(width), bits_(std::move(bits)) {
    if (height == 0 || width == 0) throw ShapeError("BinaryMask: dimensions must be positive");
    if (bits_.size() != h_ * w_) throw ShapeError("BinaryMask: bit count does not match dimensions");
    for (auto& b : bits_) {
      if (b > 1) throw ShapeError("BinaryMask: values must be 0 or 1");
    }
  }

  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }
  std::size_t size() const { return bits_.size(); }

  std::uint8_t operator()(std::size_t i, std::size_t j) const { return bits_[i * w_ + j]; }
  void set(std::size_t i, std::size_t j, bool v) { bits_[i * w_ + j] = v ? 1 : 0; }

  const std::vector<std::uint8_t>& bits() const { return bits_; }

  std::size_t area() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
  }
  bool empty() const { return area() == 0; }

  std::vector<double> as_doubles() const { return {bits_.begin(), bits_.end()}; }

  bool operator==(const BinaryMask&) const = default;

 private:
  std::size_t h_ = 0, w_ = 0;
  std::vector<std::uint8_t> bits_;
};

struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  bool valid() const { return x0 < x1 && y0 < y1; }
  bool operator==(const Box&) const = default;
};

// Tight box in continuous coordinates: [min_col, max_col + 1) x [min_row, max_row + 1).
inline Box tight_box(const BinaryMask& m) {
  std::size_t r0 = m.height(), r1 = 0, c0 = m.width(), c1 = 0;
  for (std::size_t i = 0; i < m.height(); ++i) {
    for (std::size_t j = 0; j < m.width(); ++j) {
      if (m(i, j)) {
        r0 = std::min(r0, i);
        r1 = std::max(r1, i);
        c0 = std::min(c0, j);
        c1 = std::max(c1, j);
      }
    }
  }
  if (r0 > r1) throw ContractError("tight_box: mask is empty");
  return Box{static_cast<double>(c0), static_cast<double>(r0), static_cast<double>(c1 + 1),
             static_cast<double>(r1 + 1)};
}

// Thresholded 8-neighbour Laplacian, kernel [[-1,-1,-1],[-1,8,-1],[-1,-1,-1]]
// with zero padding. Positive responses only occur on mask pixels that touch
// background (or the border), so the result is the inner width-1 contour.
inline BinaryMask extract_boundary(const BinaryMask& m) {
  const auto H = static_cast<std::ptrdiff_t>(m.height());
  const auto W = static_cast<std::ptrdiff_t>(m.width());
  BinaryMask out(m.height(), m.width());
  for (std::ptrdiff_t i = 0; i < H; ++i) {
    for (std::ptrdiff_t j = 0; j < W; ++j) {
      int response = 8 * m(i, j);
      for (std::ptrdiff_t di = -1; di <= 1; ++di) {
        for (std::ptrdiff_t dj = -1; dj <= 1; ++dj) {
          if (di == 0 && dj == 0) continue;
          const auto ii = i + di, jj = j + dj;
          if (ii >= 0 && ii < H && jj >= 0 && jj < W) response -= m(ii, jj);
        }
      }
      if (response > 0) out.set(i, j, true);
    }
  }
  return out;
}

// Fixed Sobel kernels as a 2 x 1 x 3 x 3 conv weight: channel 0 responds to
// horizontal change (x), channel 1 to vertical change (y).
inline Tensor sobel_kernels() {
  return Tensor(Shape{2, 1, 3, 3}, {-1, 0, 1, -2, 0, 2, -1, 0, 1,  //
                                    -1, -2, -1, 0, 0, 0, 1, 2, 1});
}

// N x 1 x H x W -> N x 2 x H x W, zero padded. Differentiable w.r.t. the input.
inline Tensor sobel_xy(const Tensor& prob) {
  if (prob.rank() != 4 || prob.dim(1) != 1) {
    throw ShapeError("sobel_xy: expected N x 1 x H x W, got " + shape_str(prob.shape()));
  }
  return conv2d(prob, sobel_kernels(), 1, 1);
}

// Plain-map convenience: H x W values -> 2 x H x W (row-major, channel-major).
inline std::vector<double> sobel_xy(std::span<const double> map, std::size_t height, std::size_t width) {
  if (map.size() != height * width) throw ShapeError("sobel_xy: map size does not match H x W");
  NoGradGuard ng;
  Tensor t(Shape{1, 1, height, width}, std::vector<double>(map.begin(), map.end()));
  auto out = sobel_xy(t);
  return {out.data().begin(), out.data().end()};
}

namespace detail {

// Bilinear read of pixel-centred samples at continuous point (x, y). Points
// outside the image rectangle read 0; inside, neighbours clamp to the edge.
inline double sample_clamped(const std::vector<double>& img, std::size_t H, std::size_t W, double x,
                             double y) {
  if (x < 0.0 || y < 0.0 || x > static_cast<double>(W) || y > static_cast<double>(H)) return 0.0;
  const double u = std::clamp(x - 0.5, 0.0, static_cast<double>(W - 1));
  const double v = std::clamp(y - 0.5, 0.0, static_cast<double>(H - 1));
  const auto j0 = static_cast<std::size_t>(u), i0 = static_cast<std::size_t>(v);
  const std::size_t j1 = std::min(j0 + 1, W - 1), i1 = std::min(i0 + 1, H - 1);
  const double fx = u - static_cast<double>(j0), fy = v - static_cast<double>(i0);
  const double top = img[i0 * W + j0] * (1 - fx) + img[i0 * W + j1] * fx;
  const double bot = img[i1 * W + j0] * (1 - fx) + img[i1 * W + j1] * fx;
  return top * (1 - fy) + bot * fy;
}

}  // namespace detail

// Resamples the part of `m` under `b` to out x out (bilinear, threshold 0.5
// with ties to 1).
inline BinaryMask crop_resize_mask(const BinaryMask& m, const Box& b, std::size_t out) {
  const double cx0 = std::max(b.x0, 0.0), cy0 = std::max(b.y0, 0.0);
  const double cx1 = std::min(b.x1, static_cast<double>(m.width()));
  const double cy1 = std::min(b.y1, static_cast<double>(m.height()));
  if (!(cx0 < cx1 && cy0 < cy1) || out == 0) {
    throw ShapeError("crop_resize_mask: box has zero area inside the image");
  }
  const auto img = m.as_doubles();
  BinaryMask res(out, out);
  const double sx = b.width() / static_cast<double>(out), sy = b.height() / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double y = b.y0 + (static_cast<double>(i) + 0.5) * sy;
    for (std::size_t j = 0; j < out; ++j) {
      const double x = b.x0 + (static_cast<double>(j) + 0.5) * sx;
      res.set(i, j, detail::sample_clamped(img, m.height(), m.width(), x, y) >= 0.5);
    }
  }
  return res;
}

// Inverse of crop_resize_mask: an out x out grid of values laid over box `b`
// is bilinearly resampled at the centres of the image pixels inside the box.
// Pixels outside the box are 0.
inline std::vector<double> paste_values(std::span<const double> grid, std::size_t grid_size, const Box& b,
                                        std::size_t height, std::size_t width) {
  if (grid.size() != grid_size * grid_size) throw ShapeError("paste: grid is not square");
  if (!b.valid()) throw ShapeError("paste: degenerate box");
  std::vector<double> g(grid.begin(), grid.end());
  std::vector<double> res(height * width, 0.0);
  const double gx = static_cast<double>(grid_size) / b.width();
  const double gy = static_cast<double>(grid_size) / b.height();
  const auto i_lo = static_cast<std::size_t>(std::max(0.0, std::floor(b.y0)));
  const auto j_lo = static_cast<std::size_t>(std::max(0.0, std::floor(b.x0)));
  for (std::size_t i = i_lo; i < height; ++i) {
    const double cy = static_cast<double>(i) + 0.5;
    if (cy >= b.y1) break;
    if (cy < b.y0) continue;
    for (std::size_t j = j_lo; j < width; ++j) {
      const double cx = static_cast<double>(j) + 0.5;
      if (cx >= b.x1) break;
      if (cx < b.x0) continue;
      res[i * width + j] = detail::sample_clamped(g, grid_size, grid_size, (cx - b.x0) * gx, (cy - b.y0) * gy);
    }
  }
  return res;
}

// paste_values thresholded at 0.5 (ties to 1).
inline BinaryMask paste_mask(std::span<const double> grid, std::size_t grid_size, const Box& b,
                             std::size_t height, std::size_t width) {
  const std::vector<double> v = paste_values(grid, grid_size, b, height, width);
  BinaryMask res(height, width);
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) res.set(i, j, v[i * width + j] >= 0.5);
  }
  return res;
}

// |a & b| / |a | b|; two empty masks count as identical.
inline double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw ShapeError("mask_iou: dimension mismatch " + std::to_string(a.height()) + "x" +
                     std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                     std::to_string(b.width()));
  }
  std::size_t inter = 0, uni = 0;
  const auto& ab = a.bits();
  const auto& bb = b.bits();
  for (std::size_t i = 0; i < ab.size(); ++i) {
    inter += ab[i] & bb[i];
    uni += ab[i] | bb[i];
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// Analytic shapes.

enum class ShapeKind { Ellipse, Rectangle, Triangle };

inline std::string_view to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::Ellipse: return "ellipse";
    case ShapeKind::Rectangle: return "rectangle";
    case ShapeKind::Triangle: return "triangle";
  }
  throw ConfigError("unknown shape kind");
}

inline ShapeKind shape_kind_from_string(std::string_view s) {
  if (s == "ellipse") return ShapeKind::Ellipse;
  if (s == "rectangle") return ShapeKind::Rectangle;
  if (s == "triangle") return ShapeKind::Triangle;
  throw ConfigError("unknown shape kind '" + std::string(s) + "'");
}

// Parameter layout by kind:
//   Ellipse:   cx, cy, rx, ry, angle (radians)
//   Rectangle: x0, y0, x1, y1, angle (rotation about the centre); x in [x0, x1)
//   Triangle:  ax, ay, bx, by, cx, cy (closed; edges count as inside)
struct ShapeDesc {
  ShapeKind kind = ShapeKind::Ellipse;
  std::array<double, 6> p{};

  static ShapeDesc ellipse(double cx, double cy, double rx, double ry, double angle = 0.0) {
    return {ShapeKind::Ellipse, {cx, cy, rx, ry, angle, 0.0}};
  }
  static ShapeDesc rectangle(double x0, double y0, double x1, double y1, double angle = 0.0) {
    return {ShapeKind::Rectangle, {x0, y0, x1, y1, angle, 0.0}};
  }
  static ShapeDesc triangle(double ax, double ay, double bx, double by, double cx, double cy) {
    return {ShapeKind::Triangle, {ax, ay, bx, by, cx, cy}};
  }

  double analytic_area() const {
    switch (kind) {
      case ShapeKind::Ellipse: return M_PI * p[2] * p[3];
      case ShapeKind::Rectangle: return (p[2] - p[0]) * (p[3] - p[1]);
      case ShapeKind::Triangle:
        return 0.5 * std::abs((p[2] - p[0]) * (p[5] - p[1]) - (p[4] - p[0]) * (p[3] - p[1]));
    }
    return 0.0;
  }

  double perimeter() const {
    switch (kind) {
      case ShapeKind::Ellipse: {
        // Ramanujan's approximation.
        const double a = p[2], b = p[3];
        return M_PI * (3 * (a + b) - std::sqrt((3 * a + b) * (a + 3 * b)));
      }
      case ShapeKind::Rectangle: return 2 * ((p[2] - p[0]) + (p[3] - p[1]));
      case ShapeKind::Triangle:
        return std::hypot(p[2] - p[0], p[3] - p[1]) + std::hypot(p[4] - p[2], p[5] - p[3]) +
               std::hypot(p[0] - p[4], p[1] - p[5]);
    }
    return 0.0;
  }

  bool contains(double x, double y) const {
    switch (kind) {
      case ShapeKind::Ellipse: {
        const double dx = x - p[0], dy = y - p[1];
        const double c = std::cos(p[4]), s = std::sin(p[4]);
        const double u = (c * dx + s * dy) / p[2];
        const double v = (-s * dx + c * dy) / p[3];
        return u * u + v * v <= 1.0;
      }
      case ShapeKind::Rectangle: {
        if (p[4] != 0.0) {
          const double mx = 0.5 * (p[0] + p[2]), my = 0.5 * (p[1] + p[3]);
          const double c = std::cos(p[4]), s = std::sin(p[4]);
          const double dx = x - mx, dy = y - my;
          x = mx + c * dx + s * dy;
          y = my - s * dx + c * dy;
        }
        return x >= p[0] && x < p[2] && y >= p[1] && y < p[3];
      }
      case ShapeKind::Triangle: {
        auto edge = [&](double ax, double ay, double bx, double by) {
          return (bx - ax) * (y - ay) - (by - ay) * (x - ax);
        };
        const double e0 = edge(p[0], p[1], p[2], p[3]);
        const double e1 = edge(p[2], p[3], p[4], p[5]);
        const double e2 = edge(p[4], p[5], p[0], p[1]);
        return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
      }
    }
    return false;
  }
};

// Pixel (i, j) is set iff its centre lies inside the shape.
inline BinaryMask rasterize_shape(const ShapeDesc& s, std::size_t height, std::size_t width) {
  switch (s.kind) {
    case ShapeKind::Ellipse:
      if (!(s.p[2] > 0 && s.p[3] > 0)) throw ConfigError("rasterize_shape: ellipse radii must be positive");
      break;
    case ShapeKind::Rectangle:
      if (!(s.p[0] < s.p[2] && s.p[1] < s.p[3])) throw ConfigError("rasterize_shape: empty rectangle");
      break;
    case ShapeKind::Triangle:
      if (!(s.analytic_area() > 0)) throw ConfigError("rasterize_shape: degenerate triangle");
      break;
    default:
      throw ConfigError("rasterize_shape: unknown shape kind " +
                        std::to_string(static_cast<int>(s.kind)));
  }
  BinaryMask m(height, width);
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      if (s.contains(static_cast<double>(j) + 0.5, static_cast<double>(i) + 0.5)) m.set(i, j, true);
    }
  }
  return m;
}

}  // namespace bmlab
