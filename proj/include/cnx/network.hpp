#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cnx/autodiff.hpp"
#include "cnx/errors.hpp"
#include "cnx/matrix.hpp"
#include "cnx/rng.hpp"

namespace cnx {

enum class Activation : std::uint8_t { Identity = 0, Relu = 1, Sigmoid = 2 };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::Relu: return "relu";
    case Activation::Sigmoid: return "sigmoid";
  }
  return "?";
}

inline double activate(Activation a, double z) {
  switch (a) {
    case Activation::Relu: return z > 0 ? z : 0.0;
    case Activation::Sigmoid: return ad::detail::sigmoid(z);
    case Activation::Identity: break;
  }
  return z;
}

/// Learnable per-node factors multiplying the activations of node layer `after_layer + 1`.
///
/// `after_layer` indexes weight layers (0-based), so a scaling layer with
/// after_layer = k sits between W[k] and W[k+1]. Only hidden node layers may be scaled.
struct ScalingLayer {
  std::size_t after_layer = 0;
  Matrix delta;  // n x 1

  friend bool operator==(const ScalingLayer&, const ScalingLayer&) = default;
};

/// Binary keep (1) / drop (0) pattern aligned with the network parameters.
struct PruneMask {
  std::vector<Matrix> weights;  // aligned with LayeredNetwork::weights
  std::vector<Matrix> scaling;  // aligned with LayeredNetwork::scaling

  std::size_t kept() const {
    std::size_t n = 0;
    for (const auto& m : weights) n += m.count_nonzero();
    for (const auto& m : scaling) n += m.count_nonzero();
    return n;
  }

  friend bool operator==(const PruneMask&, const PruneMask&) = default;
};

/// Layered feed-forward network (W, b) with optional scaling layers and a stored mask.
///
/// Node layers are 0..K-1 with widths sizes[k]. Weight layer k maps node layer k
/// to k+1 and has shape sizes[k+1] x sizes[k]. activations[k] applies to node layer k+1.
struct LayeredNetwork {
  std::vector<std::size_t> sizes;
  std::vector<Matrix> weights;
  std::vector<Matrix> biases;  // n x 1 each
  std::vector<Activation> activations;
  std::vector<ScalingLayer> scaling;  // sorted by after_layer
  std::optional<PruneMask> mask;

  std::size_t depth() const noexcept { return sizes.size(); }
  std::size_t weight_layers() const noexcept { return weights.size(); }
  std::size_t input_width() const { return sizes.front(); }
  std::size_t output_width() const { return sizes.back(); }

  /// Scaling layer attached after weight layer k, if any.
  const ScalingLayer* scaling_after(std::size_t k) const {
    for (const auto& s : scaling)
      if (s.after_layer == k) return &s;
    return nullptr;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& w : weights) n += w.size();
    return n;
  }

  friend bool operator==(const LayeredNetwork&, const LayeredNetwork&) = default;
};

/// Throws DimensionError / NumericError if the network breaks a structural invariant.
inline void validate(const LayeredNetwork& net) {
  const std::size_t K = net.sizes.size();
  if (K < 2) throw DimensionError("network needs at least 2 node layers, got " + std::to_string(K));
  for (std::size_t s : net.sizes)
    if (s == 0) throw DimensionError("layer width must be >= 1");
  if (net.weights.size() != K - 1 || net.biases.size() != K - 1 || net.activations.size() != K - 1)
    throw DimensionError("expected " + std::to_string(K - 1) + " weight/bias/activation entries");
  for (std::size_t k = 0; k + 1 < K; ++k) {
    const Matrix& w = net.weights[k];
    if (w.rows() != net.sizes[k + 1] || w.cols() != net.sizes[k])
      throw DimensionError("weight layer " + std::to_string(k) + " is " + w.shape_str() + ", expected " +
                           std::to_string(net.sizes[k + 1]) + "x" + std::to_string(net.sizes[k]));
    if (net.biases[k].rows() != net.sizes[k + 1] || net.biases[k].cols() != 1)
      throw DimensionError("bias " + std::to_string(k) + " is " + net.biases[k].shape_str());
    if (!w.all_finite() || !net.biases[k].all_finite())
      throw NumericError("non-finite parameter in layer " + std::to_string(k));
  }
  for (std::size_t i = 0; i < net.scaling.size(); ++i) {
    const auto& s = net.scaling[i];
    if (s.after_layer + 2 >= K)
      throw DimensionError("scaling layer after weight layer " + std::to_string(s.after_layer) +
                           " would scale the output layer");
    if (i > 0 && net.scaling[i - 1].after_layer >= s.after_layer)
      throw DimensionError("scaling layers must be unique and sorted by layer index");
    if (s.delta.rows() != net.sizes[s.after_layer + 1] || s.delta.cols() != 1)
      throw DimensionError("scaling vector after layer " + std::to_string(s.after_layer) + " is " +
                           s.delta.shape_str() + ", expected " + std::to_string(net.sizes[s.after_layer + 1]) + "x1");
    if (!s.delta.all_finite()) throw NumericError("non-finite scaling factor");
  }
  if (net.mask) {
    if (net.mask->weights.size() != net.weights.size() || net.mask->scaling.size() != net.scaling.size())
      throw DimensionError("mask layer count does not match network");
    for (std::size_t k = 0; k < net.weights.size(); ++k)
      if (!net.mask->weights[k].same_shape(net.weights[k]))
        throw DimensionError("mask for weight layer " + std::to_string(k) + " has wrong shape");
    for (std::size_t i = 0; i < net.scaling.size(); ++i)
      if (!net.mask->scaling[i].same_shape(net.scaling[i].delta))
        throw DimensionError("mask for scaling layer " + std::to_string(i) + " has wrong shape");
  }
}

/// Glorot-uniform weights, zero biases, unit scaling factors.
///
/// Hidden layers use ReLU; the output activation is a parameter (sigmoid for
/// binary tasks). `scaled_layers` lists the weight layers whose outputs get a
/// scaling vector.
inline LayeredNetwork init_random(std::span<const std::size_t> sizes, std::uint64_t seed,
                                  Activation output = Activation::Sigmoid,
                                  std::span<const std::size_t> scaled_layers = {}) {
  LayeredNetwork net;
  net.sizes.assign(sizes.begin(), sizes.end());
  if (net.sizes.size() < 2) throw DimensionError("network needs at least 2 node layers");
  Rng rng(seed);
  for (std::size_t k = 0; k + 1 < net.sizes.size(); ++k) {
    const std::size_t fan_in = net.sizes[k], fan_out = net.sizes[k + 1];
    if (fan_in == 0 || fan_out == 0) throw DimensionError("layer width must be >= 1");
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Matrix w(fan_out, fan_in);
    for (double& v : w.values()) v = rng.uniform(-bound, bound);
    net.weights.push_back(std::move(w));
    net.biases.emplace_back(fan_out, 1, 0.0);
    net.activations.push_back(k + 2 == net.sizes.size() ? output : Activation::Relu);
  }
  std::vector<std::size_t> layers(scaled_layers.begin(), scaled_layers.end());
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  for (std::size_t k : layers) net.scaling.push_back({k, Matrix(net.sizes.at(k + 1), 1, 1.0)});
  validate(net);
  return net;
}

inline LayeredNetwork init_random(std::initializer_list<std::size_t> sizes, std::uint64_t seed,
                                  Activation output = Activation::Sigmoid) {
  std::vector<std::size_t> s(sizes);
  return init_random(std::span<const std::size_t>(s), seed, output);
}

/// Forward prediction. `x` is batch x |V_1|; returns batch x |V_K|.
inline Matrix predict(const LayeredNetwork& net, const Matrix& x) {
  if (x.cols() != net.input_width())
    throw DimensionError("predict: input has " + std::to_string(x.cols()) + " features, network expects " +
                         std::to_string(net.input_width()));
  Matrix h = x;
  for (std::size_t k = 0; k < net.weight_layers(); ++k) {
    const Matrix& w = net.weights[k];
    const Matrix& b = net.biases[k];
    const ScalingLayer* s = net.scaling_after(k);
    Matrix next(h.rows(), w.rows());
    for (std::size_t n = 0; n < h.rows(); ++n)
      for (std::size_t j = 0; j < w.rows(); ++j) {
        double z = b[j];
        for (std::size_t i = 0; i < w.cols(); ++i) z += w(j, i) * h(n, i);
        double a = activate(net.activations[k], z);
        if (s) a *= s->delta[j];
        next(n, j) = a;
      }
    h = std::move(next);
  }
  return h;
}

inline PruneMask full_mask(const LayeredNetwork& net) {
  PruneMask m;
  for (const auto& w : net.weights) m.weights.emplace_back(w.rows(), w.cols(), 1.0);
  for (const auto& s : net.scaling) m.scaling.emplace_back(s.delta.rows(), 1, 1.0);
  return m;
}

/// Zeroes masked parameters in place. Idempotent.
inline void enforce_mask(LayeredNetwork& net) {
  if (!net.mask) return;
  for (std::size_t k = 0; k < net.weights.size(); ++k)
    for (std::size_t i = 0; i < net.weights[k].size(); ++i)
      if (net.mask->weights[k][i] == 0.0) net.weights[k][i] = 0.0;
  for (std::size_t s = 0; s < net.scaling.size(); ++s)
    for (std::size_t i = 0; i < net.scaling[s].delta.size(); ++i)
      if (net.mask->scaling[s][i] == 0.0) net.scaling[s].delta[i] = 0.0;
}

/// Returns a copy of `net` with masked entries set to exactly 0 and the mask
/// stored (combined with any mask already present).
inline LayeredNetwork apply_mask(const LayeredNetwork& net, const PruneMask& mask) {
  LayeredNetwork out = net;
  if (mask.weights.size() != net.weights.size() || mask.scaling.size() != net.scaling.size())
    throw DimensionError("apply_mask: mask has " + std::to_string(mask.weights.size()) + " weight / " +
                         std::to_string(mask.scaling.size()) + " scaling layers, network has " +
                         std::to_string(net.weights.size()) + " / " + std::to_string(net.scaling.size()));
  PruneMask combined = net.mask ? *net.mask : full_mask(net);
  for (std::size_t k = 0; k < mask.weights.size(); ++k) {
    if (!mask.weights[k].same_shape(net.weights[k]))
      throw DimensionError("apply_mask: weight layer " + std::to_string(k) + " mask " + mask.weights[k].shape_str() +
                           " vs " + net.weights[k].shape_str());
    for (std::size_t i = 0; i < mask.weights[k].size(); ++i)
      combined.weights[k][i] = (mask.weights[k][i] != 0.0 && combined.weights[k][i] != 0.0) ? 1.0 : 0.0;
  }
  for (std::size_t s = 0; s < mask.scaling.size(); ++s) {
    if (!mask.scaling[s].same_shape(net.scaling[s].delta))
      throw DimensionError("apply_mask: scaling layer " + std::to_string(s) + " mask has wrong shape");
    for (std::size_t i = 0; i < mask.scaling[s].size(); ++i)
      combined.scaling[s][i] = (mask.scaling[s][i] != 0.0 && combined.scaling[s][i] != 0.0) ? 1.0 : 0.0;
  }
  out.mask = std::move(combined);
  enforce_mask(out);
  return out;
}

// ---------------------------------------------------------------------------
// Model file format, version 1. All integers and floats little-endian.
//
//   magic        8 bytes  "CNXMODEL"
//   version      u32      1
//   K            u32      number of node layers (>= 2)
//   sizes        u32 x K
//   activations  u8 x (K-1)      0 identity, 1 relu, 2 sigmoid
//   n_scaling    u32
//   scaling      n_scaling x u32 after_layer
//   has_mask     u8       0 / 1
//   weights      f64 arrays, row-major, weight layer order
//   biases       f64 arrays
//   deltas       f64 arrays, scaling order
//   mask         (if has_mask) u8 per weight entry, then per scaling entry
// ---------------------------------------------------------------------------

inline constexpr std::string_view kModelMagic = "CNXMODEL";
inline constexpr std::uint32_t kModelVersion = 1;

namespace detail {

class Writer {
 public:
  void bytes(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double d) {
    const auto v = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void matrix(const Matrix& m) {
    for (double v : m.values()) f64(v);
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  std::size_t offset() const noexcept { return pos_; }

  void need(std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) throw ParseError(std::string("truncated payload while reading ") + what, pos_);
  }
  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(in_[pos_++]);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  void matrix(Matrix& m, const char* what) {
    need(m.size() * 8, what);
    for (double& v : m.values()) v = f64(what);
  }
  bool done() const noexcept { return pos_ == in_.size(); }

 private:
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const LayeredNetwork& net) {
  validate(net);
  detail::Writer w;
  w.bytes(kModelMagic);
  w.u32(kModelVersion);
  w.u32(static_cast<std::uint32_t>(net.sizes.size()));
  for (std::size_t s : net.sizes) w.u32(static_cast<std::uint32_t>(s));
  for (Activation a : net.activations) w.u8(static_cast<std::uint8_t>(a));
  w.u32(static_cast<std::uint32_t>(net.scaling.size()));
  for (const auto& s : net.scaling) w.u32(static_cast<std::uint32_t>(s.after_layer));
  w.u8(net.mask ? 1 : 0);
  for (const auto& m : net.weights) w.matrix(m);
  for (const auto& b : net.biases) w.matrix(b);
  for (const auto& s : net.scaling) w.matrix(s.delta);
  if (net.mask) {
    for (const auto& m : net.mask->weights)
      for (double v : m.values()) w.u8(v != 0.0 ? 1 : 0);
    for (const auto& m : net.mask->scaling)
      for (double v : m.values()) w.u8(v != 0.0 ? 1 : 0);
  }
  return w.take();
}

inline LayeredNetwork deserialize(std::string_view payload) {
  detail::Reader r(payload);
  if (r.bytes(kModelMagic.size(), "magic") != kModelMagic) throw ParseError("bad magic", 0);
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kModelVersion) throw ParseError("unsupported model version " + std::to_string(version), version_at);

  LayeredNetwork net;
  const std::size_t k_at = r.offset();
  const std::uint32_t K = r.u32("layer count");
  if (K < 2 || K > 4096) throw ParseError("implausible layer count " + std::to_string(K), k_at);
  for (std::uint32_t k = 0; k < K; ++k) {
    const std::size_t at = r.offset();
    const std::uint32_t s = r.u32("layer size");
    if (s == 0 || s > (1u << 20)) throw ParseError("implausible layer size " + std::to_string(s), at);
    net.sizes.push_back(s);
  }
  for (std::uint32_t k = 0; k + 1 < K; ++k) {
    const std::size_t at = r.offset();
    const std::uint8_t a = r.u8("activation");
    if (a > 2) throw ParseError("unknown activation code " + std::to_string(a), at);
    net.activations.push_back(static_cast<Activation>(a));
  }
  const std::size_t ns_at = r.offset();
  const std::uint32_t n_scaling = r.u32("scaling count");
  if (n_scaling > K) throw ParseError("implausible scaling layer count", ns_at);
  for (std::uint32_t i = 0; i < n_scaling; ++i) {
    const std::size_t at = r.offset();
    const std::uint32_t after = r.u32("scaling index");
    if (after + 2 >= K) throw ParseError("scaling index out of range", at);
    net.scaling.push_back({after, Matrix(net.sizes[after + 1], 1)});
  }
  const std::size_t mask_at = r.offset();
  const std::uint8_t has_mask = r.u8("mask flag");
  if (has_mask > 1) throw ParseError("bad mask flag", mask_at);

  for (std::uint32_t k = 0; k + 1 < K; ++k) {
    net.weights.emplace_back(net.sizes[k + 1], net.sizes[k]);
    r.matrix(net.weights.back(), "weights");
  }
  for (std::uint32_t k = 0; k + 1 < K; ++k) {
    net.biases.emplace_back(net.sizes[k + 1], 1);
    r.matrix(net.biases.back(), "biases");
  }
  for (auto& s : net.scaling) r.matrix(s.delta, "scaling factors");
  if (has_mask) {
    PruneMask m = full_mask(net);
    for (auto& mw : m.weights)
      for (double& v : mw.values()) {
        const std::size_t at = r.offset();
        const std::uint8_t b = r.u8("mask");
        if (b > 1) throw ParseError("bad mask byte", at);
        v = b;
      }
    for (auto& ms : m.scaling)
      for (double& v : ms.values()) {
        const std::size_t at = r.offset();
        const std::uint8_t b = r.u8("mask");
        if (b > 1) throw ParseError("bad mask byte", at);
        v = b;
      }
    net.mask = std::move(m);
  }
  if (!r.done()) throw ParseError("trailing bytes after model", r.offset());
  try {
    validate(net);
  } catch (const std::exception& e) {
    throw ParseError(std::string("decoded model is invalid: ") + e.what(), r.offset());
  }
  return net;
}

}  // namespace cnx
