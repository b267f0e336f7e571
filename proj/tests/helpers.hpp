#pragma once

#include <atomic>
#include <filesystem>
#include <unistd.h>

#include "gaff/gaff.hpp"

namespace gaff::test {

// Scratch directory removed on destruction.
struct TempDir {
  fs::path path;

  TempDir() {
    static std::atomic<int> counter{0};
    path = fs::temp_directory_path() /
           ("gaff_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline Camera front_camera(int width = 32, int height = 32, float distance = 4.0f) {
  return Camera::look_at({0.0f, 0.0f, -distance}, {0.0f, 0.0f, 0.0f}, {0.0f, -1.0f, 0.0f},
                         0.9f * static_cast<float>(width), width, height);
}

inline GaussianSplat make_splat(Eigen::Vector3f mu, float scale, float alpha, Eigen::Vector3f color = {0.5f, 0.5f, 0.5f}) {
  GaussianSplat s;
  s.mu = mu;
  s.rot = Eigen::Vector4f(1, 0, 0, 0);
  s.log_scale = Eigen::Vector3f::Constant(std::log(scale));
  s.alpha_logit = logit(alpha);
  s.sem_alpha_logit = logit(alpha);
  s.color = color;
  return s;
}

// Random splats in front of `front_camera`, with random rotations and
// anisotropic scales.
inline std::vector<GaussianSplat> random_splats(Rng& rng, int n, double spread = 1.0) {
  std::vector<GaussianSplat> out;
  for (int i = 0; i < n; ++i) {
    GaussianSplat s;
    s.mu = Eigen::Vector3f(float(rng.uniform(-spread, spread)), float(rng.uniform(-spread, spread)),
                           float(rng.uniform(-spread, spread)));
    Eigen::Vector4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    q.normalize();
    s.rot = q.cast<float>();
    s.rot /= s.rot.norm();
    for (int a = 0; a < 3; ++a) s.log_scale[a] = float(std::log(rng.uniform(0.03, 0.3)));
    s.alpha_logit = float(rng.uniform(-2.0, 3.0));
    s.sem_alpha_logit = float(rng.uniform(-2.0, 3.0));
    s.color = Eigen::Vector3f(float(rng.uniform()), float(rng.uniform()), float(rng.uniform()));
    out.push_back(s);
  }
  return out;
}

inline MatF random_features(Rng& rng, Eigen::Index n, Eigen::Index d) {
  MatF m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = float(rng.uniform(-1.0, 1.0));
  return m;
}

// Per-pixel compositor with no tiling: every projected splat is tested
// against every pixel in depth order. Independent of the tile binning and of
// the CSR bookkeeping in `composite`.
template <typename S>
struct NaiveRender {
  Mat<S> image;
  std::vector<S> accum;
  std::vector<S> transmittance;
};

template <typename S>
NaiveRender<S> naive_composite(const std::vector<Projected2D<S>>& sorted, const Mat<S>& payloads,
                               const std::vector<S>& opacities, int h, int w) {
  NaiveRender<S> r;
  r.image = Mat<S>::Zero(static_cast<Eigen::Index>(h) * w, payloads.cols());
  r.accum.assign(static_cast<std::size_t>(h) * w, S(0));
  r.transmittance.assign(static_cast<std::size_t>(h) * w, S(1));
  for (int row = 0; row < h; ++row)
    for (int col = 0; col < w; ++col) {
      const std::size_t p = static_cast<std::size_t>(row) * w + col;
      S t = S(1);
      for (const auto& s : sorted) {
        const S dx = S(col) - s.mean.x(), dy = S(row) - s.mean.y();
        const Eigen::Matrix<S, 2, 1> d(dx, dy);
        const S m2 = d.dot(s.cov.inverse() * d);
        if (m2 > S(9)) continue;
        const S a = std::min(opacities[s.index] * std::exp(S(-0.5) * m2), S(0.99));
        r.image.row(static_cast<Eigen::Index>(p)) += a * t * payloads.row(s.index);
        r.accum[p] += a * t;
        t *= S(1) - a;
        if (t < S(1e-4)) break;
      }
      r.transmittance[p] = t;
    }
  return r;
}

// Default synthetic scene run through preprocessing; shared by the slower
// pipeline tests.
struct PreparedScene {
  SyntheticScene synth;
  PreprocessResult prep;
};

inline PreparedScene prepare_scene(const SynthOptions& opt, int ld_dim = 8, std::uint64_t seed = 0) {
  PreparedScene p;
  p.synth = generate_synthetic_scene(opt);
  p.prep = preprocess_views(p.synth.views, ld_dim, 2, 0, seed);
  return p;
}

inline double mean_row_cosine(const MatF& a, const MatF& b) {
  double sum = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double den = a.row(i).cast<double>().norm() * b.row(i).cast<double>().norm() + 1e-12;
    sum += a.row(i).cast<double>().dot(b.row(i).cast<double>()) / den;
  }
  return a.rows() ? sum / double(a.rows()) : 0.0;
}

}  // namespace gaff::test
