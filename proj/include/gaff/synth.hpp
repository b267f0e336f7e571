#pragma once

// Synthetic scenes with known classes, standing in for segmentation masks and
// vision-language features extracted from real images.

#include <numbers>

#include "raster.hpp"
#include "scene.hpp"

namespace gaff {

struct SynthOptions {
  std::uint64_t seed = 0;
  int n_classes = 8;
  int splats_per_class = 250;
  int n_cameras = 16;
  int height = 64;
  int width = 64;
  int dim = 32;                  // language embedding size D
  double feature_noise = 0.0;    // expected norm of per-mask feature noise
  double max_pair_cosine = 0.3;  // embedding separation bound
};

struct SyntheticScene {
  SceneModel scene;
  std::vector<ViewSupervision> views;
};

// Unit vectors with pairwise cosine <= max_cos, by per-vector rejection.
inline std::vector<std::vector<float>> sample_separated_embeddings(Rng& rng, int count, int dim, double max_cos,
                                                                   int max_resamples = 1000) {
  std::vector<Eigen::VectorXd> accepted;
  int resamples = 0;
  while (static_cast<int>(accepted.size()) < count) {
    Eigen::VectorXd v(dim);
    for (int k = 0; k < dim; ++k) v[k] = rng.normal();
    v.normalize();
    const bool ok = std::all_of(accepted.begin(), accepted.end(), [&](const auto& u) { return u.dot(v) <= max_cos; });
    if (ok) {
      accepted.push_back(v);
    } else if (++resamples > max_resamples) {
      throw ValidationError("cannot separate " + std::to_string(count) + " embeddings to cosine <= " +
                            std::to_string(max_cos) + " in dimension " + std::to_string(dim) +
                            "; use a larger embedding dimension");
    }
  }
  std::vector<std::vector<float>> out;
  for (const auto& v : accepted) {
    std::vector<float> f(static_cast<std::size_t>(dim));
    // Renormalize in float so stored embeddings are unit norm at float precision.
    const Eigen::VectorXf vf = v.cast<float>().normalized();
    std::copy(vf.data(), vf.data() + dim, f.begin());
    out.push_back(std::move(f));
  }
  return out;
}

inline Eigen::Vector3f hue_color(double hue) {
  const double h = 6.0 * (hue - std::floor(hue));
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double v = 0.9, s = 0.8;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {float(v), float(t), float(p)};
    case 1: return {float(q), float(v), float(p)};
    case 2: return {float(p), float(v), float(t)};
    case 3: return {float(p), float(q), float(v)};
    case 4: return {float(t), float(p), float(v)};
    default: return {float(v), float(p), float(q)};
  }
}

// Renders the supervision a foundation-model preprocessor would have produced
// for one camera: the color image, one mask per visible class (pixel owner =
// class of the largest-weight splat in the semantic pass, -1 where the total
// semantic weight is below 0.5) and the class embeddings as mask features.
inline ViewSupervision render_supervision(const SceneModel& scene, const Camera& cam, const MatF& class_embeddings,
                                          double feature_noise = 0.0, Rng* rng = nullptr) {
  ViewSupervision v;
  v.height = cam.height;
  v.width = cam.width;
  const auto color = render_color<float>(scene, cam);
  v.color.assign(color.image.data(), color.image.data() + color.image.size());

  const std::span<const GaussianSplat> splats(scene.splats);
  const Mat<float> zeros = Mat<float>::Zero(static_cast<Eigen::Index>(splats.size()), 1);
  const auto sem = render_features<float>(splats, cam, zeros, OpacityKind::Semantic);

  const std::size_t n_pix = v.pixel_count();
  v.class_map.assign(n_pix, -1);
  std::vector<bool> visible(static_cast<std::size_t>(class_embeddings.rows()), false);
  for (std::size_t p = 0; p < n_pix; ++p) {
    if (sem.accum_weight[p] < 0.5f) continue;
    float best = -1.0f;
    std::int32_t cls = -1;
    for (const auto& c : sem.pixel(p)) {
      if (c.weight > best) {
        best = c.weight;
        cls = scene.splats[c.index].class_id.value_or(-1);
      }
    }
    if (cls >= 0 && cls < class_embeddings.rows()) {
      v.class_map[p] = cls;
      visible[static_cast<std::size_t>(cls)] = true;
    } else {
      v.class_map[p] = -1;
    }
  }

  std::vector<std::int32_t> mask_of_class(visible.size(), -1);
  std::int32_t k = 0;
  for (std::size_t c = 0; c < visible.size(); ++c)
    if (visible[c]) mask_of_class[c] = k++;
  v.mask_features = MatF::Zero(k, class_embeddings.cols());
  for (std::size_t c = 0; c < visible.size(); ++c) {
    if (!visible[c]) continue;
    Eigen::VectorXf f = class_embeddings.row(static_cast<Eigen::Index>(c)).transpose();
    if (feature_noise > 0.0 && rng) {
      const double per_dim = feature_noise / std::sqrt(static_cast<double>(f.size()));
      for (Eigen::Index j = 0; j < f.size(); ++j) f[j] += static_cast<float>(per_dim * rng->normal());
      f.normalize();
    }
    v.mask_features.row(mask_of_class[c]) = f.transpose();
  }
  v.masks.resize(n_pix);
  for (std::size_t p = 0; p < n_pix; ++p)
    v.masks[p] = v.class_map[p] >= 0 ? mask_of_class[static_cast<std::size_t>(v.class_map[p])] : -1;
  return v;
}

inline MatF vocab_matrix(const SceneModel& scene) {
  MatF m(static_cast<Eigen::Index>(scene.vocab.size()), static_cast<Eigen::Index>(scene.embedding_dim()));
  for (std::size_t i = 0; i < scene.vocab.size(); ++i)
    for (std::size_t j = 0; j < scene.embedding_dim(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = scene.vocab[i].embedding[j];
  return m;
}

// Orbit of cameras around `center`, alternating between two elevations.
inline std::vector<Camera> orbit_cameras(int count, const Eigen::Vector3f& center, float distance, float focal,
                                         int width, int height) {
  std::vector<Camera> cams;
  for (int i = 0; i < count; ++i) {
    const double az = 2.0 * std::numbers::pi * i / count;
    const double el = (i % 2 == 0 ? 35.0 : 50.0) * std::numbers::pi / 180.0;
    const Eigen::Vector3f eye = center + distance * Eigen::Vector3f(float(std::cos(el) * std::cos(az)),
                                                                    float(std::cos(el) * std::sin(az)),
                                                                    float(std::sin(el)));
    cams.push_back(Camera::look_at(eye, center, Eigen::Vector3f::UnitZ(), focal, width, height));
  }
  return cams;
}

inline GaussianSplat random_splat(Rng& rng, const Eigen::Vector3f& center, float spread, float scale,
                                  const Eigen::Vector3f& base_color) {
  GaussianSplat s;
  for (int k = 0; k < 3; ++k) {
    const double offset = std::clamp(rng.normal(), -2.5, 2.5);
    s.mu[k] = center[k] + static_cast<float>(spread * offset);
    s.log_scale[k] = static_cast<float>(std::log(scale * rng.uniform(0.8, 1.25)));
    s.color[k] = std::clamp(base_color[k] + static_cast<float>(0.03 * rng.normal()), 0.0f, 1.0f);
  }
  Eigen::Vector4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  s.rot = q.normalized().cast<float>();
  s.rot.normalize();
  s.alpha_logit = logit(static_cast<float>(rng.uniform(0.7, 0.95)));
  s.sem_alpha_logit = s.alpha_logit;
  return s;
}

// Compact class clusters on a ring viewed by an elevated orbit of cameras.
inline SyntheticScene generate_synthetic_scene(const SynthOptions& opt) {
  require(opt.n_classes >= 2, "synthetic scene needs at least 2 classes");
  require(opt.splats_per_class >= 1 && opt.n_cameras >= 1, "synthetic scene needs splats and cameras");
  require(opt.height > 0 && opt.width > 0 && opt.dim > 0, "synthetic scene needs a positive resolution and dim");

  Rng rng(derive_seed(opt.seed, "synth/scene"));
  Rng embed_rng(derive_seed(opt.seed, "synth/embeddings"));
  Rng noise_rng(derive_seed(opt.seed, "synth/feature-noise"));

  SyntheticScene out;
  const auto embeddings = sample_separated_embeddings(embed_rng, opt.n_classes, opt.dim, opt.max_pair_cosine);
  for (int c = 0; c < opt.n_classes; ++c) out.scene.vocab.push_back({"class_" + std::to_string(c), embeddings[c]});

  const float ring = std::max(0.8f, 0.9f * opt.n_classes / static_cast<float>(2.0 * std::numbers::pi));
  for (int c = 0; c < opt.n_classes; ++c) {
    const double az = 2.0 * std::numbers::pi * c / opt.n_classes;
    const Eigen::Vector3f center(ring * float(std::cos(az)), ring * float(std::sin(az)), 0.0f);
    const Eigen::Vector3f base = hue_color(static_cast<double>(c) / opt.n_classes);
    for (int i = 0; i < opt.splats_per_class; ++i) {
      GaussianSplat s = random_splat(rng, center, 0.12f, 0.05f, base);
      s.class_id = c;
      out.scene.splats.push_back(s);
    }
  }

  const float distance = 2.5f * ring + 2.5f;
  const float focal = 0.45f * static_cast<float>(std::min(opt.width, opt.height)) * distance / (ring + 0.45f);
  out.scene.cameras = orbit_cameras(opt.n_cameras, Eigen::Vector3f::Zero(), distance, focal, opt.width, opt.height);
  validate_scene(out.scene);

  const MatF classes = vocab_matrix(out.scene);
  for (const auto& cam : out.scene.cameras)
    out.views.push_back(render_supervision(out.scene, cam, classes, opt.feature_noise, &noise_rng));
  return out;
}

}  // namespace gaff
