#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "stmesh/tensor.hpp"

namespace stmesh {

enum class KernelReading {
  // k = k_l + (sqrt(2) W / d_bb)^2 k_r: larger people get narrower kernels.
  Printed,
  // k = k_l + (d_bb / (sqrt(2) W))^2 k_r: larger people get wider kernels.
  Inverse,
};

struct KernelParams {
  double k_l = 2.0;
  double k_r = 6.0;
  KernelReading reading = KernelReading::Printed;
};

inline double kernel_size(double d_bb, double width, const KernelParams& p = {}) {
  if (!(d_bb > 0)) throw DomainError("kernel_size: bounding-box diagonal must be positive, got " + std::to_string(d_bb));
  const double full = std::sqrt(2.0) * width;
  const double ratio = p.reading == KernelReading::Printed ? full / d_bb : d_bb / full;
  return std::clamp(p.k_l + ratio * ratio * p.k_r, p.k_l, p.k_l + p.k_r);
}

struct CenterSpec {
  std::size_t t = 0;
  double x = 0;  // heatmap column
  double y = 0;  // heatmap row
  double d_bb = 1;
};

struct Detection {
  std::size_t t = 0;
  std::size_t x = 0;
  std::size_t y = 0;
  double score = 0;

  bool operator==(const Detection&) const = default;
};

// T x 1 x H x W map with one unnormalized Gaussian (sigma = k / 3) per
// center, combined across people by elementwise max.
template <class T = double>
Tensor<T> render_centers(const std::vector<CenterSpec>& centers, std::size_t frames, std::size_t height, std::size_t width,
                         const KernelParams& p = {}) {
  Tensor<T> map({frames, 1, height, width});
  auto vals = map.data();
  for (const CenterSpec& c : centers) {
    if (c.t >= frames || !(c.x >= 0) || c.x > double(width - 1) || !(c.y >= 0) || c.y > double(height - 1)) {
      throw DomainError("render_centers: center (t=" + std::to_string(c.t) + ", x=" + std::to_string(c.x) +
                        ", y=" + std::to_string(c.y) + ") outside the " + std::to_string(frames) + "x" +
                        std::to_string(height) + "x" + std::to_string(width) + " grid");
    }
    const double sigma = kernel_size(c.d_bb, static_cast<double>(width), p) / 3.0;
    const double inv = 1.0 / (2.0 * sigma * sigma);
    T* frame = vals.data() + c.t * height * width;
    for (std::size_t v = 0; v < height; ++v) {
      const double dy = double(v) - c.y;
      for (std::size_t u = 0; u < width; ++u) {
        const double dx = double(u) - c.x;
        const T g = static_cast<T>(std::exp(-(dx * dx + dy * dy) * inv));
        T& cell = frame[v * width + u];
        cell = std::max(cell, g);
      }
    }
  }
  return map;
}

// Strict 3x3 local maxima at or above `threshold`. Equal neighbours are
// resolved in favour of the smaller row-major index. Per frame, at most
// `max_people` detections are kept; the result is sorted by descending score
// (ties by frame, then row-major position).
template <class T>
std::vector<Detection> parse_centers(const Tensor<T>& map, double threshold = 0.25, std::size_t max_people = 8) {
  if (map.rank() != 4 || map.size(1) != 1) throw DimensionError("parse_centers expects [T, 1, H, W], got " + shape_str(map.shape()));
  const std::size_t frames = map.size(0), H = map.size(2), W = map.size(3);
  const auto vals = map.data();
  std::vector<Detection> out;
  for (std::size_t t = 0; t < frames; ++t) {
    const T* f = vals.data() + t * H * W;
    std::vector<Detection> found;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const T v = f[y * W + x];
        if (!(static_cast<double>(v) >= threshold)) continue;
        bool peak = true;
        for (std::size_t ny = y > 0 ? y - 1 : 0; peak && ny <= std::min(y + 1, H - 1); ++ny) {
          for (std::size_t nx = x > 0 ? x - 1 : 0; nx <= std::min(x + 1, W - 1); ++nx) {
            if (ny == y && nx == x) continue;
            const T n = f[ny * W + nx];
            if (n > v || (n == v && ny * W + nx < y * W + x)) {
              peak = false;
              break;
            }
          }
        }
        if (peak) found.push_back({t, x, y, static_cast<double>(v)});
      }
    }
    std::stable_sort(found.begin(), found.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    if (found.size() > max_people) found.resize(max_people);
    out.insert(out.end(), found.begin(), found.end());
  }
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return out;
}

struct FocalParams {
  double alpha = 2.0;
  double beta = 4.0;
};

// Penalty-reduced pixelwise focal loss, normalized by the number of gt == 1
// pixels (by 1 when there are none). Differentiable in `pred`.
template <class T>
Tensor<T> focal_loss(const Tensor<T>& pred, const Tensor<T>& gt, const FocalParams& fp = {}) {
  if (pred.shape() != gt.shape()) {
    throw DimensionError("focal_loss: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(gt.shape()));
  }
  const auto p = pred.data();
  const auto g = gt.data();
  std::size_t positives = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] > T(0) && p[i] < T(1))) {
      throw DomainError("focal_loss: prediction " + std::to_string(double(p[i])) + " at index " + std::to_string(i) +
                        " is outside (0, 1)");
    }
    if (g[i] == T(1)) ++positives;
  }
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(positives, 1));
  const double a = fp.alpha, b = fp.beta;
  double total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = p[i], gi = g[i];
    total += gi == 1.0 ? -std::pow(1 - pi, a) * std::log(pi) : -std::pow(1 - gi, b) * std::pow(pi, a) * std::log(1 - pi);
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total * norm));
  if (auto* tape = detail::tape_for(pred)) {
    detail::mark_output(out);
    tape->record("focal_loss", out.node(), [pn = pred.node(), gn = gt.node(), on = out.node(), norm, a, b] {
      if (!pn->requires_grad) return;
      const double go = on->grad[0] * norm;
      for (std::size_t i = 0; i < pn->data.size(); ++i) {
        const double pi = pn->data[i], gi = gn->data[i];
        double d;
        if (gi == 1.0) {
          d = a * std::pow(1 - pi, a - 1) * std::log(pi) - std::pow(1 - pi, a) / pi;
        } else {
          d = -std::pow(1 - gi, b) * (a * std::pow(pi, a - 1) * std::log(1 - pi) - std::pow(pi, a) / (1 - pi));
        }
        pn->grad[i] += static_cast<T>(go * d);
      }
    });
  }
  return out;
}

}  // namespace stmesh
