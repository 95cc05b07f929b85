#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "stmesh/body_model.hpp"
#include "stmesh/heatmap.hpp"
#include "stmesh/nn.hpp"

namespace stmesh {

// Mesh parameter map channel layout.
inline constexpr std::size_t kCameraOffset = 0;  // xi (raw), tx, ty
inline constexpr std::size_t kThetaOffset = 3;
inline constexpr std::size_t kBetaOffset = kThetaOffset + kNumJoints * 6;
inline constexpr std::size_t kParamChannels = kBetaOffset + kNumBetas;
static_assert(kParamChannels == 145);

// Key tokens built from the centermap have width 4: (value, x, y, t).
inline constexpr std::size_t kKeyWidth = 4;

inline double linspace_at(std::size_t i, std::size_t n) {
  return n <= 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1);
}

// [T, C, H, W] -> [T, C + 2, H, W]; channel C holds x, channel C + 1 holds y.
template <class T>
Tensor<T> add_coord_channels(const Tensor<T>& f) {
  if (f.rank() != 4) throw DimensionError("add_coord_channels expects [T, C, H, W], got " + shape_str(f.shape()));
  const std::size_t frames = f.size(0), H = f.size(2), W = f.size(3);
  Tensor<T> planes({frames, 2, H, W});
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        planes[((t * 2 + 0) * H + y) * W + x] = static_cast<T>(linspace_at(x, W));
        planes[((t * 2 + 1) * H + y) * W + x] = static_cast<T>(linspace_at(y, H));
      }
  return concat(std::vector<Tensor<T>>{f, planes}, 1);
}

// Hadamard product of the centermap with every feature channel.
template <class T>
Tensor<T> bca_focus(const Tensor<T>& centermap, const Tensor<T>& features) {
  if (centermap.rank() != 4 || features.rank() != 4 || centermap.size(1) != 1 || centermap.size(0) != features.size(0) ||
      centermap.size(2) != features.size(2) || centermap.size(3) != features.size(3)) {
    throw DimensionError("bca_focus: centermap " + shape_str(centermap.shape()) + " does not match features " +
                         shape_str(features.shape()));
  }
  return mul(centermap, features);
}

// One key token per pixel, [T, H*W, 4] in (t, y, x) order with embedding
// (value, x, y, t). `transposed` swaps the x and y components, which is the
// token-aligned equivalent of encoding the transposed centermap.
template <class T>
Tensor<T> coord_encode_centermap(const Tensor<T>& centermap, bool transposed = false, bool zero_coords = false) {
  if (centermap.rank() != 4 || centermap.size(1) != 1) {
    throw DimensionError("coord_encode_centermap expects [T, 1, H, W], got " + shape_str(centermap.shape()));
  }
  const std::size_t frames = centermap.size(0), H = centermap.size(2), W = centermap.size(3);
  Tensor<T> coords({frames, H * W, 3});
  if (!zero_coords) {
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const std::size_t i = (t * H * W + y * W + x) * 3;
          const double xn = linspace_at(x, W), yn = linspace_at(y, H);
          coords[i + 0] = static_cast<T>(transposed ? yn : xn);
          coords[i + 1] = static_cast<T>(transposed ? xn : yn);
          coords[i + 2] = static_cast<T>(linspace_at(t, frames));
        }
  }
  return concat(std::vector<Tensor<T>>{reshape(centermap, {frames, H * W, 1}), coords}, -1);
}

// Feature tokens [T, H*W, C + 2]: the channel vector of each pixel followed by
// its normalized x and t coordinates.
template <class T>
Tensor<T> pixel_tokens(const Tensor<T>& features, bool zero_coords = false) {
  if (features.rank() != 4) throw DimensionError("pixel_tokens expects [T, C, H, W], got " + shape_str(features.shape()));
  const std::size_t frames = features.size(0), C = features.size(1), H = features.size(2), W = features.size(3);
  const Tensor<T> channels = reshape(permute(features, {0, 2, 3, 1}), {frames, H * W, C});
  Tensor<T> coords({frames, H * W, 2});
  if (!zero_coords) {
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t p = 0; p < H * W; ++p) {
        coords[(t * H * W + p) * 2 + 0] = static_cast<T>(linspace_at(p % W, W));
        coords[(t * H * W + p) * 2 + 1] = static_cast<T>(linspace_at(t, frames));
      }
  }
  return concat(std::vector<Tensor<T>>{channels, coords}, -1);
}

// [T, N, E] tokens back to a [T, E, H, W] map.
template <class T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, std::size_t height, std::size_t width) {
  const std::size_t frames = tokens.size(0), E = tokens.size(2);
  return permute(reshape(tokens, {frames, height, width, E}), {0, 3, 1, 2});
}

template <class T>
struct CaaParams {
  Linear<T> f_q, f_k, f_v;

  CaaParams() = default;
  CaaParams(ParamSet<T>& params, const std::string& name, std::size_t width, std::size_t key_width, std::mt19937_64& rng)
      : f_q(params, name + ".f_q", width, width, rng),
        f_k(params, name + ".f_k", key_width, width, rng, false),
        f_v(params, name + ".f_v", width, width, rng) {}
};

// Multi-head coordinate-aware attention. Queries and values come from the
// feature tokens x: [G, N, E], keys from the centermap tokens: [G, N, 4].
// Each head attends with softmax(Q K^T / sqrt(d)) over its d = D / heads
// slice; head outputs are concatenated. Optionally returns the attention
// weights [G, heads, N, N].
template <class T>
Tensor<T> caa(const Tensor<T>& key_tokens, const Tensor<T>& x, const CaaParams<T>& p, std::size_t heads,
              Tensor<T>* attention = nullptr) {
  if (x.rank() != 3 || key_tokens.rank() != 3 || key_tokens.size(0) != x.size(0) || key_tokens.size(1) != x.size(1)) {
    throw DimensionError("caa: key tokens " + shape_str(key_tokens.shape()) + " not aligned with feature tokens " +
                         shape_str(x.shape()));
  }
  const std::size_t G = x.size(0), N = x.size(1), D = p.f_q.out_features();
  if (heads == 0 || D % heads != 0) throw DimensionError("caa: width " + std::to_string(D) + " not divisible by heads");
  const std::size_t d = D / heads;
  auto split = [&](const Tensor<T>& t) { return permute(reshape(t, {G, N, heads, d}), {0, 2, 1, 3}); };
  const Tensor<T> q = split(p.f_q(x));
  const Tensor<T> k = split(p.f_k(key_tokens));
  const Tensor<T> v = split(p.f_v(x));
  const auto s = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  return reshape(permute(attend(q, k, v, s, attention), {0, 2, 1, 3}), {G, N, D});
}

template <class T>
struct CelParams {
  CaaParams<T> attn;
  LayerNorm<T> ln1, ln2;
  Linear<T> ff1, ff2;
  std::size_t heads = 1;

  CelParams() = default;
  CelParams(ParamSet<T>& params, const std::string& name, std::size_t width, std::size_t heads_, std::mt19937_64& rng)
      : attn(params, name + ".caa", width, kKeyWidth, rng),
        ln1(params, name + ".ln1", width),
        ln2(params, name + ".ln2", width),
        ff1(params, name + ".ff1", width, 4 * width, rng),
        ff2(params, name + ".ff2", 4 * width, width, rng),
        heads(heads_) {}
};

template <class T>
Tensor<T> cel(const Tensor<T>& key_tokens, const Tensor<T>& x, const CelParams<T>& p, Tensor<T>* attention = nullptr) {
  const Tensor<T> f1 = p.ln1(add(x, caa(key_tokens, x, p.attn, p.heads, attention)));
  return p.ln2(add(f1, p.ff2(gelu(p.ff1(f1)))));
}

// Per-layer record of what the decoder fed into each CEL.
template <class T>
struct DecoderTrace {
  struct Layer {
    std::string stage;  // "spatial" or "temporal"
    std::size_t index = 0;  // 1-based within the stage
    bool transposed = false;
    std::size_t groups = 0;
    std::size_t tokens_per_group = 0;
    Tensor<T> key_tokens;
    Tensor<T> attention;  // filled when keep_attention is set
    double seconds = 0;   // wall time of the layer's forward pass
  };
  bool keep_attention = false;
  std::vector<Layer> layers;

  // Attention-matrix entries, G * N^2, summed over the layers of a stage.
  std::size_t attention_entries(const std::string& stage) const {
    std::size_t n = 0;
    for (const auto& l : layers)
      if (l.stage == stage) n += l.groups * l.tokens_per_group * l.tokens_per_group;
    return n;
  }
};

// Attention-matrix entries of one layer over T frames of P pixels each.
inline std::size_t spatial_attention_cost(std::size_t frames, std::size_t pixels) { return frames * pixels * pixels; }
inline std::size_t temporal_attention_cost(std::size_t frames, std::size_t pixels) {
  return (frames * pixels) * (frames * pixels);
}

struct DecoderConfig {
  std::size_t channels = 32;  // C of the focused features
  std::size_t width = 32;     // E
  std::size_t heads = 4;
  std::size_t half_depth = 1;  // L: each transformer has 2L layers
  bool zero_coords = false;
};

template <class T>
struct StDecoder {
  DecoderConfig cfg;
  Linear<T> embed;     // C + 2 -> E
  Linear<T> residual;  // C -> E, only when C != E
  std::vector<CelParams<T>> spatial, temporal;

  StDecoder() = default;
  StDecoder(ParamSet<T>& params, const std::string& name, const DecoderConfig& c, std::mt19937_64& rng) : cfg(c) {
    embed = Linear<T>(params, name + ".embed", c.channels + 2, c.width, rng);
    if (c.channels != c.width) residual = Linear<T>(params, name + ".residual", c.channels, c.width, rng);
    for (std::size_t l = 0; l < 2 * c.half_depth; ++l)
      spatial.emplace_back(params, name + ".spatial" + std::to_string(l + 1), c.width, c.heads, rng);
    for (std::size_t l = 0; l < 2 * c.half_depth; ++l)
      temporal.emplace_back(params, name + ".temporal" + std::to_string(l + 1), c.width, c.heads, rng);
  }
};

// Even 1-based layers of each transformer see the transposed centermap.
inline bool layer_uses_transpose(std::size_t one_based_index) { return one_based_index % 2 == 0; }

// centermap: [T, 1, H, W]; focus: [T, C, H, W] -> [T, E, H, W].
template <class T>
Tensor<T> st_decoder(const Tensor<T>& centermap, const Tensor<T>& focus, const StDecoder<T>& dec,
                     DecoderTrace<T>* trace = nullptr) {
  if (focus.rank() != 4 || focus.size(1) != dec.cfg.channels) {
    throw DimensionError("st_decoder: expected " + std::to_string(dec.cfg.channels) + " focused channels, got " +
                         shape_str(focus.shape()));
  }
  if (centermap.rank() != 4 || centermap.size(0) != focus.size(0) || centermap.size(2) != focus.size(2) ||
      centermap.size(3) != focus.size(3)) {
    throw DimensionError("st_decoder: centermap " + shape_str(centermap.shape()) + " vs features " + shape_str(focus.shape()));
  }
  const std::size_t frames = focus.size(0), H = focus.size(2), W = focus.size(3), N = H * W, E = dec.cfg.width;
  const bool zc = dec.cfg.zero_coords;
  const Tensor<T> keys[2] = {coord_encode_centermap(centermap, false, zc), coord_encode_centermap(centermap, true, zc)};

  auto run = [&](const std::vector<CelParams<T>>& layers, const std::string& stage, Tensor<T> x, std::size_t groups) {
    const std::size_t per = frames * N / groups;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const bool tr = layer_uses_transpose(l + 1);
      const Tensor<T> k = reshape(keys[tr ? 1 : 0], {groups, per, kKeyWidth});
      Tensor<T> attn;
      const auto start = std::chrono::steady_clock::now();
      x = cel(k, x, layers[l], trace && trace->keep_attention ? &attn : nullptr);
      const std::chrono::duration<double> took = std::chrono::steady_clock::now() - start;
      if (trace) trace->layers.push_back({stage, l + 1, tr, groups, per, k.detach(), attn, took.count()});
    }
    return x;
  };

  Tensor<T> x = dec.embed(pixel_tokens(focus, zc));  // [T, N, E]
  x = run(dec.spatial, "spatial", x, frames);
  x = run(dec.temporal, "temporal", reshape(x, {1, frames * N, E}), 1);
  const Tensor<T> skip_in = reshape(permute(focus, {0, 2, 3, 1}), {frames, N, dec.cfg.channels});
  const Tensor<T> skip = dec.residual.weight.defined() ? dec.residual(skip_in) : skip_in;
  return tokens_to_map(add(reshape(x, {frames, N, E}), skip), H, W);
}

template <class T>
struct MeshHead {
  Conv2d<T> conv;

  MeshHead() = default;
  // Pose bias starts at the identity rotation so that an untrained head
  // decodes to a valid rest pose.
  MeshHead(ParamSet<T>& params, const std::string& name, std::size_t width, std::mt19937_64& rng)
      : conv(params, name, width, kParamChannels, 1, 1, 0, rng) {
    auto b = conv.bias.data();
    const auto six = PoseVector::identity_theta();
    for (std::size_t i = 0; i < six.size(); ++i) b[kThetaOffset + i] = static_cast<T>(six[i]);
  }

  Tensor<T> operator()(const Tensor<T>& decoded) const { return conv(decoded); }
};

struct PixelIndex {
  std::size_t t = 0, y = 0, x = 0;
};

// Differentiable gather of parameter columns: [T, 145, H, W] -> [N, 145].
template <class T>
Tensor<T> gather_columns(const Tensor<T>& param_map, const std::vector<PixelIndex>& at) {
  if (param_map.rank() != 4) throw DimensionError("gather_columns expects [T, K, H, W], got " + shape_str(param_map.shape()));
  const std::size_t frames = param_map.size(0), K = param_map.size(1), H = param_map.size(2), W = param_map.size(3);
  std::vector<std::size_t> rows;
  for (const PixelIndex& p : at) {
    if (p.t >= frames || p.y >= H || p.x >= W) {
      throw DomainError("sample position (t=" + std::to_string(p.t) + ", y=" + std::to_string(p.y) + ", x=" +
                        std::to_string(p.x) + ") outside map " + shape_str(param_map.shape()));
    }
    rows.push_back((p.t * H + p.y) * W + p.x);
  }
  return index_select(reshape(permute(param_map, {0, 2, 3, 1}), {frames * H * W, K}), 0, rows);
}

// Sampled columns [N, 145] split per the channel layout.
template <class T>
struct ParamBatch {
  Tensor<T> xi;           // [N, 1, 1], exp of the raw channel
  Tensor<T> translation;  // [N, 1, 2]
  Tensor<T> theta;        // [N, J, 6]
  Tensor<T> beta;         // [N, 10]
};

template <class T>
ParamBatch<T> split_params(const Tensor<T>& columns) {
  if (columns.rank() != 2 || columns.size(1) != kParamChannels) {
    throw DimensionError("split_params expects [N, 145], got " + shape_str(columns.shape()));
  }
  const std::size_t n = columns.size(0);
  return {reshape(exp(slice(columns, 1, kCameraOffset, kCameraOffset + 1)), {n, 1, 1}),
          reshape(slice(columns, 1, kCameraOffset + 1, kCameraOffset + 3), {n, 1, 2}),
          reshape(slice(columns, 1, kThetaOffset, kBetaOffset), {n, kNumJoints, 6}),
          slice(columns, 1, kBetaOffset, kParamChannels)};
}

struct PersonParams {
  PoseVector pose;
  ShapeVector shape;
  CameraParams camera;
};

template <class T>
std::vector<PersonParams> sample_params(const Tensor<T>& param_map, const std::vector<Detection>& dets) {
  if (param_map.rank() != 4 || param_map.size(1) != kParamChannels) {
    throw DimensionError("sample_params expects [T, 145, H, W], got " + shape_str(param_map.shape()));
  }
  std::vector<PixelIndex> at;
  for (const Detection& d : dets) at.push_back({d.t, d.y, d.x});
  const Tensor<T> cols = gather_columns(param_map.detach(), at);
  std::vector<PersonParams> out(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const T* c = cols.data().data() + i * kParamChannels;
    out[i].camera = {std::exp(static_cast<double>(c[kCameraOffset])), static_cast<double>(c[kCameraOffset + 1]),
                     static_cast<double>(c[kCameraOffset + 2])};
    for (std::size_t k = 0; k < kNumJoints * 6; ++k) out[i].pose.theta[k] = static_cast<double>(c[kThetaOffset + k]);
    for (std::size_t k = 0; k < kNumBetas; ++k) out[i].shape.beta[k] = static_cast<double>(c[kBetaOffset + k]);
  }
  return out;
}

}  // namespace stmesh
