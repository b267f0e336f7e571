#pragma once

// Gaussian feature field: Fourier-encoded normalized position and color fed
// through a ReLU perceptron, with a hand-written reverse pass.

#include <numbers>
#include <span>

#include "common.hpp"
#include "scene.hpp"

namespace gaff {

struct FourierEncoder {
  int n_freq = 6;

  int output_dim() const { return 3 + 6 * n_freq; }

  // [p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(F-1) pi p), cos(2^(F-1) pi p)],
  // each sin/cos block covering the three axes.
  template <typename S>
  void encode(const S* p, S* out) const {
    for (int a = 0; a < 3; ++a) out[a] = p[a];
    S* o = out + 3;
    for (int f = 0; f < n_freq; ++f) {
      const S w = std::ldexp(S(std::numbers::pi), f);
      for (int a = 0; a < 3; ++a) *o++ = std::sin(w * p[a]);
      for (int a = 0; a < 3; ++a) *o++ = std::cos(w * p[a]);
    }
  }

  template <typename S>
  Vec<S> encode(const Eigen::Matrix<S, 3, 1>& p) const {
    Vec<S> out(output_dim());
    encode(p.data(), out.data());
    return out;
  }
};

// Axis-aligned scene box; positions are mapped to [-1, 1]^3 before encoding.
struct SceneBounds {
  Eigen::Vector3f lo = Eigen::Vector3f::Constant(-1.0f);
  Eigen::Vector3f hi = Eigen::Vector3f::Constant(1.0f);

  static SceneBounds of(std::span<const GaussianSplat> splats) {
    SceneBounds b;
    if (splats.empty()) return b;
    b.lo = b.hi = splats.front().mu;
    for (const auto& s : splats) {
      b.lo = b.lo.cwiseMin(s.mu);
      b.hi = b.hi.cwiseMax(s.mu);
    }
    return b;
  }

  template <typename S>
  Eigen::Matrix<S, 3, 1> normalize(const Eigen::Vector3f& p) const {
    Eigen::Matrix<S, 3, 1> out;
    for (int a = 0; a < 3; ++a) {
      const S extent = std::max(S(hi[a]) - S(lo[a]), S(1e-6));
      out[a] = S(2) * (S(p[a]) - S(lo[a])) / extent - S(1);
    }
    return out;
  }
};

template <typename S>
struct DenseLayer {
  Mat<S> weight;  // out x in
  Vec<S> bias;    // out
};

// Three affine layers with ReLU between them.
template <typename S>
struct FeatureFieldMLP {
  std::array<DenseLayer<S>, 3> layers;

  int input_dim() const { return static_cast<int>(layers[0].weight.cols()); }
  int output_dim() const { return static_cast<int>(layers[2].weight.rows()); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  template <typename T>
  FeatureFieldMLP<T> cast() const {
    FeatureFieldMLP<T> out;
    for (int i = 0; i < 3; ++i) {
      out.layers[i].weight = layers[i].weight.template cast<T>();
      out.layers[i].bias = layers[i].bias.template cast<T>();
    }
    return out;
  }

  bool all_finite() const {
    return std::all_of(layers.begin(), layers.end(),
                       [](const auto& l) { return l.weight.allFinite() && l.bias.allFinite(); });
  }
};

// Xavier-uniform weights, zero biases.
template <typename S = float>
FeatureFieldMLP<S> init_mlp(std::uint64_t seed, int in, int hidden, int out) {
  require(in > 0 && hidden > 0 && out > 0, "init_mlp: layer sizes must be positive");
  Rng rng(derive_seed(seed, "field/init"));
  FeatureFieldMLP<S> mlp;
  const std::array<std::pair<int, int>, 3> shapes{{{hidden, in}, {hidden, hidden}, {out, hidden}}};
  for (int l = 0; l < 3; ++l) {
    const auto [rows, cols] = shapes[l];
    const double a = std::sqrt(6.0 / (rows + cols));
    auto& layer = mlp.layers[l];
    layer.weight.resize(rows, cols);
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = S(rng.uniform(-a, a));
    layer.bias = Vec<S>::Zero(rows);
  }
  return mlp;
}

// Per-splat network inputs: [encode(normalize(mu)); color].
template <typename S>
Mat<S> field_inputs(std::span<const GaussianSplat> splats, const FourierEncoder& enc, const SceneBounds& bounds) {
  const int enc_dim = enc.output_dim();
  Mat<S> x(static_cast<Eigen::Index>(splats.size()), enc_dim + 3);
  for (std::size_t i = 0; i < splats.size(); ++i) {
    const auto p = bounds.normalize<S>(splats[i].mu);
    S* row = x.row(static_cast<Eigen::Index>(i)).data();
    enc.encode(p.data(), row);
    for (int c = 0; c < 3; ++c) row[enc_dim + c] = S(splats[i].color[c]);
  }
  return x;
}

template <typename S>
struct FieldCache {
  Mat<S> input;
  Mat<S> hidden1;  // post-ReLU
  Mat<S> hidden2;  // post-ReLU
};

template <typename S>
Mat<S> mlp_forward(const FeatureFieldMLP<S>& mlp, const Mat<S>& x, FieldCache<S>* cache = nullptr) {
  require(x.cols() == mlp.input_dim(), "field_forward: input width " + std::to_string(x.cols()) +
                                           " does not match the network (" + std::to_string(mlp.input_dim()) + ")");
  Mat<S> h1 = ((x * mlp.layers[0].weight.transpose()).rowwise() + mlp.layers[0].bias.transpose()).cwiseMax(S(0));
  Mat<S> h2 = ((h1 * mlp.layers[1].weight.transpose()).rowwise() + mlp.layers[1].bias.transpose()).cwiseMax(S(0));
  Mat<S> out = (h2 * mlp.layers[2].weight.transpose()).rowwise() + mlp.layers[2].bias.transpose();
  if (cache) {
    cache->input = x;
    cache->hidden1 = std::move(h1);
    cache->hidden2 = std::move(h2);
  }
  return out;
}

// m_i = F(phi(mu_i), c_i) for every splat.
template <typename S>
Mat<S> field_forward(const FeatureFieldMLP<S>& mlp, const FourierEncoder& enc, const SceneBounds& bounds,
                     std::span<const GaussianSplat> splats, FieldCache<S>* cache = nullptr) {
  return mlp_forward(mlp, field_inputs<S>(splats, enc, bounds), cache);
}

template <typename S>
struct FieldGrads {
  FeatureFieldMLP<S> params;  // same shapes as the network
  Mat<S> colors;              // N x 3, only when requested
};

// Reverse pass; gradients are summed over splats.
template <typename S>
FieldGrads<S> field_backward(const FeatureFieldMLP<S>& mlp, const FieldCache<S>& cache, const Mat<S>& grad_m,
                             bool want_color_grad = false) {
  if (cache.input.rows() == 0 && grad_m.rows() > 0) throw ValidationError("field_backward: forward cache missing");
  require(grad_m.rows() == cache.input.rows() && grad_m.cols() == mlp.output_dim(),
          "field_backward: gradient shape mismatch");
  FieldGrads<S> g;
  auto& gl = g.params.layers;

  gl[2].weight = grad_m.transpose() * cache.hidden2;
  gl[2].bias = grad_m.colwise().sum().transpose();

  Mat<S> d2 = (grad_m * mlp.layers[2].weight).cwiseProduct((cache.hidden2.array() > S(0)).matrix().template cast<S>());
  gl[1].weight = d2.transpose() * cache.hidden1;
  gl[1].bias = d2.colwise().sum().transpose();

  Mat<S> d1 = (d2 * mlp.layers[1].weight).cwiseProduct((cache.hidden1.array() > S(0)).matrix().template cast<S>());
  gl[0].weight = d1.transpose() * cache.input;
  gl[0].bias = d1.colwise().sum().transpose();

  if (want_color_grad) {
    const Mat<S> dx = d1 * mlp.layers[0].weight;
    g.colors = dx.rightCols(3);
  }
  return g;
}

}  // namespace gaff
