#pragma once

// Tile-based differentiable splatting.
//
// Gaussians are projected with the EWA approximation, binned into 16x16 tiles
// in depth order, and alpha-composited front to back. The same compositor
// renders colors (appearance opacity) and LD features (semantic opacity).
// Pixel (row, col) has its center at image coordinates (col, row).

#include <optional>
#include <span>
#include <vector>

#include "common.hpp"
#include "scene.hpp"

namespace gaff {

inline constexpr double kNearPlane = 0.01;
inline constexpr double kCovDilation = 0.3;
inline constexpr double kMaxAlpha = 0.99;
inline constexpr double kStopTransmittance = 1e-4;
inline constexpr double kCutoffMahalanobis2 = 9.0;  // 3 sigma ellipse
inline constexpr int kTileSize = 16;

template <typename S>
struct Projected2D {
  std::uint32_t index = 0;  // splat index in the scene
  Eigen::Matrix<S, 2, 1> mean;
  Eigen::Matrix<S, 2, 2> cov;
  Eigen::Matrix<S, 2, 2> inv_cov;
  S depth = 0;
  S radius = 0;
};

template <typename S>
struct Contribution {
  std::uint32_t index = 0;  // splat index
  S alpha = 0;              // effective alpha after the clamp
  S weight = 0;             // alpha * transmittance in front
  bool clamped = false;
};

template <typename S>
struct RenderOutput {
  int height = 0;
  int width = 0;
  Mat<S> image;                         // (H*W) x P
  std::vector<S> accum_weight;          // H*W
  std::vector<S> transmittance;         // H*W, final transmittance
  std::vector<std::uint32_t> offsets;   // H*W + 1, CSR into contribs
  std::vector<Contribution<S>> contribs;
  std::vector<Projected2D<S>> projected;  // depth-sorted input, kept for backward

  std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }

  std::span<const Contribution<S>> pixel(std::size_t p) const {
    return std::span<const Contribution<S>>(contribs.data() + offsets[p], offsets[p + 1] - offsets[p]);
  }
};

// ---------------------------------------------------------------------------
// Projection

template <typename S>
std::optional<Projected2D<S>> project_gaussian(const GaussianSplat& g, const Camera& cam, std::uint32_t index = 0) {
  using M3 = Eigen::Matrix<S, 3, 3>;
  using V3 = Eigen::Matrix<S, 3, 1>;
  const M3 rot = cam.rotation.cast<S>();
  const V3 t = rot * g.mu.cast<S>() + cam.translation.cast<S>();
  if (t.z() <= S(kNearPlane)) return std::nullopt;

  const S fx = S(cam.fx), fy = S(cam.fy);
  const S inv_z = S(1) / t.z();
  Eigen::Matrix<S, 2, 3> jac;
  jac << fx * inv_z, S(0), -fx * t.x() * inv_z * inv_z,
         S(0), fy * inv_z, -fy * t.y() * inv_z * inv_z;
  const Eigen::Matrix<S, 2, 3> jw = jac * rot;
  const M3 sigma = g.covariance().cast<S>();

  Projected2D<S> p;
  p.index = index;
  p.cov = jw * sigma * jw.transpose();
  p.cov(0, 0) += S(kCovDilation);
  p.cov(1, 1) += S(kCovDilation);
  p.cov(0, 1) = p.cov(1, 0) = S(0.5) * (p.cov(0, 1) + p.cov(1, 0));
  const S det = p.cov(0, 0) * p.cov(1, 1) - p.cov(0, 1) * p.cov(0, 1);
  if (!(det > S(0))) return std::nullopt;
  p.inv_cov << p.cov(1, 1) / det, -p.cov(0, 1) / det, -p.cov(0, 1) / det, p.cov(0, 0) / det;

  const S mid = S(0.5) * (p.cov(0, 0) + p.cov(1, 1));
  const S lambda_max = mid + std::sqrt(std::max(mid * mid - det, S(0)));
  p.radius = S(3) * std::sqrt(lambda_max);
  p.mean << fx * t.x() * inv_z + S(cam.cx), fy * t.y() * inv_z + S(cam.cy);
  p.depth = t.z();

  if (p.mean.x() + p.radius < S(0) || p.mean.x() - p.radius > S(cam.width - 1) ||
      p.mean.y() + p.radius < S(0) || p.mean.y() - p.radius > S(cam.height - 1))
    return std::nullopt;
  return p;
}

template <typename S>
bool depth_less(const Projected2D<S>& a, const Projected2D<S>& b) {
  return a.depth < b.depth || (a.depth == b.depth && a.index < b.index);
}

// Projects every splat (or the selected subset) and sorts by depth.
template <typename S = float>
std::vector<Projected2D<S>> project_splats(std::span<const GaussianSplat> splats, const Camera& cam,
                                           const std::vector<bool>* selection = nullptr) {
  std::vector<Projected2D<S>> out;
  out.reserve(splats.size());
  for (std::size_t i = 0; i < splats.size(); ++i) {
    if (selection && !(*selection)[i]) continue;
    if (auto p = project_gaussian<S>(splats[i], cam, static_cast<std::uint32_t>(i))) out.push_back(*p);
  }
  std::sort(out.begin(), out.end(), depth_less<S>);
  return out;
}

// Gaussian falloff of a projected splat at a pixel center; nullopt outside
// the 3-sigma ellipse.
template <typename S>
std::optional<S> splat_falloff(const Projected2D<S>& p, S px, S py) {
  const S dx = px - p.mean.x();
  const S dy = py - p.mean.y();
  const S power = p.inv_cov(0, 0) * dx * dx + S(2) * p.inv_cov(0, 1) * dx * dy + p.inv_cov(1, 1) * dy * dy;
  if (power > S(kCutoffMahalanobis2)) return std::nullopt;
  return std::exp(S(-0.5) * power);
}

// ---------------------------------------------------------------------------
// Forward compositing

// `sorted` must be ascending in depth. `payloads` and `opacities` are indexed
// by splat index (Projected2D::index); opacities are probabilities in (0,1).
template <typename S>
RenderOutput<S> composite(std::span<const Projected2D<S>> sorted, const Mat<S>& payloads,
                          std::span<const S> opacities, int height, int width) {
  require(height > 0 && width > 0, "composite: empty image");
  for (std::size_t i = 1; i < sorted.size(); ++i)
    if (depth_less(sorted[i], sorted[i - 1]))
      throw ValidationError("composite: projected splats are not sorted by depth");
  for (const auto& p : sorted)
    require(p.index < payloads.rows() && p.index < opacities.size(), "composite: splat index out of range");

  const int channels = static_cast<int>(payloads.cols());
  const std::size_t n_pix = static_cast<std::size_t>(height) * width;
  RenderOutput<S> out;
  out.height = height;
  out.width = width;
  out.image = Mat<S>::Zero(static_cast<Eigen::Index>(n_pix), channels);
  out.accum_weight.assign(n_pix, S(0));
  out.transmittance.assign(n_pix, S(1));
  out.projected.assign(sorted.begin(), sorted.end());

  const int tiles_x = (width + kTileSize - 1) / kTileSize;
  const int tiles_y = (height + kTileSize - 1) / kTileSize;
  const std::size_t n_tiles = static_cast<std::size_t>(tiles_x) * tiles_y;

  // Depth-ordered bins: iterating the sorted list keeps every bin sorted.
  std::vector<std::vector<std::uint32_t>> bins(n_tiles);
  for (std::uint32_t slot = 0; slot < sorted.size(); ++slot) {
    const auto& p = sorted[slot];
    const int x0 = std::max(0, static_cast<int>(std::floor((p.mean.x() - p.radius) / kTileSize)));
    const int x1 = std::min(tiles_x - 1, static_cast<int>(std::floor((p.mean.x() + p.radius) / kTileSize)));
    const int y0 = std::max(0, static_cast<int>(std::floor((p.mean.y() - p.radius) / kTileSize)));
    const int y1 = std::min(tiles_y - 1, static_cast<int>(std::floor((p.mean.y() + p.radius) / kTileSize)));
    for (int ty = y0; ty <= y1; ++ty)
      for (int tx = x0; tx <= x1; ++tx) bins[static_cast<std::size_t>(ty) * tiles_x + tx].push_back(slot);
  }

  std::vector<std::vector<Contribution<S>>> tile_contribs(n_tiles);
  std::vector<std::uint32_t> counts(n_pix, 0);

  parallel_for(n_tiles, [&](std::size_t tile) {
    const int tx = static_cast<int>(tile % tiles_x);
    const int ty = static_cast<int>(tile / tiles_x);
    const auto& bin = bins[tile];
    auto& local = tile_contribs[tile];
    for (int row = ty * kTileSize; row < std::min(height, (ty + 1) * kTileSize); ++row) {
      for (int col = tx * kTileSize; col < std::min(width, (tx + 1) * kTileSize); ++col) {
        const std::size_t pix = static_cast<std::size_t>(row) * width + col;
        S trans = S(1);
        S accum = S(0);
        std::uint32_t n = 0;
        auto out_row = out.image.row(static_cast<Eigen::Index>(pix));
        for (std::uint32_t slot : bin) {
          const auto& p = sorted[slot];
          const auto g = splat_falloff(p, S(col), S(row));
          if (!g) continue;
          const S raw = opacities[p.index] * *g;
          const bool clamped = raw > S(kMaxAlpha);
          const S alpha = clamped ? S(kMaxAlpha) : raw;
          const S w = alpha * trans;
          out_row += w * payloads.row(p.index);
          accum += w;
          trans *= (S(1) - alpha);
          local.push_back({p.index, alpha, w, clamped});
          ++n;
          if (trans < S(kStopTransmittance)) break;
        }
        out.accum_weight[pix] = accum;
        out.transmittance[pix] = trans;
        counts[pix] = n;
      }
    }
  });

  out.offsets.assign(n_pix + 1, 0);
  for (std::size_t p = 0; p < n_pix; ++p) out.offsets[p + 1] = out.offsets[p] + counts[p];
  out.contribs.resize(out.offsets[n_pix]);
  for (std::size_t tile = 0; tile < n_tiles; ++tile) {
    const int tx = static_cast<int>(tile % tiles_x);
    const int ty = static_cast<int>(tile / tiles_x);
    std::size_t k = 0;
    const auto& local = tile_contribs[tile];
    for (int row = ty * kTileSize; row < std::min(height, (ty + 1) * kTileSize); ++row)
      for (int col = tx * kTileSize; col < std::min(width, (tx + 1) * kTileSize); ++col) {
        const std::size_t pix = static_cast<std::size_t>(row) * width + col;
        std::copy_n(local.begin() + static_cast<std::ptrdiff_t>(k), counts[pix],
                    out.contribs.begin() + out.offsets[pix]);
        k += counts[pix];
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward

template <typename S>
struct CompositeGrads {
  Mat<S> payloads;               // N x P
  std::vector<S> opacity_logits;  // N, through the sigmoid
  Mat<S> means2d;                // N x 2, only with geometry gradients
};

// Exact adjoint of `composite` for the payloads and the opacity logits
// (optionally the projected means). Splats whose alpha hit the clamp receive
// no opacity/geometry gradient, matching the flat forward.
template <typename S>
CompositeGrads<S> composite_backward(const RenderOutput<S>& out, const Mat<S>& payloads, std::span<const S> opacities,
                                     const Mat<S>& upstream, bool geometry_grads = false) {
  const std::size_t n_pix = out.pixel_count();
  if (out.offsets.size() != n_pix + 1) throw ValidationError("composite_backward: missing contribution cache");
  require(upstream.rows() == static_cast<Eigen::Index>(n_pix) && upstream.cols() == payloads.cols(),
          "composite_backward: upstream gradient shape mismatch");

  const auto n = payloads.rows();
  CompositeGrads<S> grads;
  grads.payloads = Mat<S>::Zero(n, payloads.cols());
  grads.opacity_logits.assign(static_cast<std::size_t>(n), S(0));

  std::vector<std::int64_t> slot_of;
  if (geometry_grads) {
    grads.means2d = Mat<S>::Zero(n, 2);
    slot_of.assign(static_cast<std::size_t>(n), -1);
    for (std::size_t s = 0; s < out.projected.size(); ++s) slot_of[out.projected[s].index] = static_cast<std::int64_t>(s);
  }

  std::vector<S> trans_before;
  std::vector<S> dots;
  for (std::size_t pix = 0; pix < n_pix; ++pix) {
    const auto list = out.pixel(pix);
    if (list.empty()) continue;
    const auto g = upstream.row(static_cast<Eigen::Index>(pix));
    if (g.isZero(0)) continue;

    trans_before.resize(list.size());
    dots.resize(list.size());
    S trans = S(1);
    for (std::size_t k = 0; k < list.size(); ++k) {
      trans_before[k] = trans;
      trans *= (S(1) - list[k].alpha);
      dots[k] = g.dot(payloads.row(list[k].index));
    }

    const int row = static_cast<int>(pix / out.width);
    const int col = static_cast<int>(pix % out.width);
    S behind = S(0);  // sum over later contributions of w_j * (g . p_j)
    for (std::size_t k = list.size(); k-- > 0;) {
      const auto& c = list[k];
      grads.payloads.row(c.index) += c.weight * g;
      const S d_alpha = trans_before[k] * dots[k] - behind / (S(1) - c.alpha);
      behind += c.weight * dots[k];
      if (c.clamped) continue;
      const S o = opacities[c.index];
      grads.opacity_logits[c.index] += d_alpha * c.alpha * (S(1) - o);
      if (geometry_grads) {
        const auto& p = out.projected[static_cast<std::size_t>(slot_of[c.index])];
        const Eigen::Matrix<S, 2, 1> delta(S(col) - p.mean.x(), S(row) - p.mean.y());
        grads.means2d.row(c.index) += (d_alpha * c.alpha * (p.inv_cov * delta)).transpose();
      }
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Scene-level renders

enum class OpacityKind { Appearance, Semantic };

template <typename S = float>
std::vector<S> splat_opacities(std::span<const GaussianSplat> splats, OpacityKind kind) {
  std::vector<S> o(splats.size());
  for (std::size_t i = 0; i < splats.size(); ++i)
    o[i] = sigmoid(S(kind == OpacityKind::Appearance ? splats[i].alpha_logit : splats[i].sem_alpha_logit));
  return o;
}

template <typename S = float>
Mat<S> splat_colors(std::span<const GaussianSplat> splats) {
  Mat<S> c(static_cast<Eigen::Index>(splats.size()), 3);
  for (std::size_t i = 0; i < splats.size(); ++i) c.row(static_cast<Eigen::Index>(i)) = splats[i].color.cast<S>().transpose();
  return c;
}

template <typename S = float>
RenderOutput<S> render_color(std::span<const GaussianSplat> splats, const Camera& cam) {
  const auto projected = project_splats<S>(splats, cam);
  const auto opacities = splat_opacities<S>(splats, OpacityKind::Appearance);
  return composite<S>(projected, splat_colors<S>(splats), opacities, cam.height, cam.width);
}

template <typename S = float>
RenderOutput<S> render_color(const SceneModel& scene, const Camera& cam) {
  return render_color<S>(std::span<const GaussianSplat>(scene.splats), cam);
}

// Composites per-splat features with the semantic opacity (or the appearance
// opacity when `kind` says so, for the coupled-opacity ablation).
template <typename S = float>
RenderOutput<S> render_features(std::span<const GaussianSplat> splats, const Camera& cam, const Mat<S>& features,
                                OpacityKind kind = OpacityKind::Semantic) {
  if (features.rows() != static_cast<Eigen::Index>(splats.size()))
    throw ValidationError("render_features: expected " + std::to_string(splats.size()) + " features, got " +
                          std::to_string(features.rows()));
  const auto projected = project_splats<S>(splats, cam);
  const auto opacities = splat_opacities<S>(splats, kind);
  return composite<S>(projected, features, opacities, cam.height, cam.width);
}

struct SelectedRender {
  RenderOutput<float> output;
  std::vector<std::uint8_t> coverage;  // accum_weight >= 0.5
};

inline SelectedRender render_selected(std::span<const GaussianSplat> splats, const Camera& cam,
                                      const std::vector<bool>& selection) {
  require(selection.size() == splats.size(), "render_selected: selection size mismatch");
  const auto projected = project_splats<float>(splats, cam, &selection);
  const auto opacities = splat_opacities<float>(splats, OpacityKind::Appearance);
  SelectedRender r{composite<float>(projected, splat_colors<float>(splats), opacities, cam.height, cam.width), {}};
  r.coverage.resize(r.output.pixel_count());
  for (std::size_t i = 0; i < r.coverage.size(); ++i) r.coverage[i] = r.output.accum_weight[i] >= 0.5f ? 1 : 0;
  return r;
}

// H x W x 3 image from a color render, clamped to [0,1].
inline Image to_image(const RenderOutput<float>& r) {
  require(r.image.cols() == 3, "to_image: render has " + std::to_string(r.image.cols()) + " channels");
  Image img(r.height, r.width);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = std::clamp(r.image.data()[i], 0.0f, 1.0f);
  return img;
}

// Debug dump of a render as tensor files.
inline void dump_render(const RenderOutput<float>& r, const fs::path& dir, const std::string& prefix) {
  const auto h = static_cast<std::uint64_t>(r.height), w = static_cast<std::uint64_t>(r.width);
  write_tensor(dir / (prefix + "_payload.gaft"), {h, w, static_cast<std::uint64_t>(r.image.cols())},
               std::span<const float>(r.image.data(), static_cast<std::size_t>(r.image.size())));
  write_tensor(dir / (prefix + "_accum.gaft"), {h, w}, r.accum_weight);
}

}  // namespace gaff
