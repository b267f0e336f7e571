#pragma once

// Training losses with their gradients with respect to the prediction.

#include <array>

#include "common.hpp"

namespace gaff {

inline constexpr double kCosineEps = 1e-8;

// mean_i (1 - cos(t_i, p_i)) + mean_i ||t_i - p_i||_1 over the rows.
// Used for both LD distillation and language supervision.
template <typename S>
S cosine_l1_loss(const Mat<S>& target, const Mat<S>& pred, Mat<S>* grad = nullptr) {
  require(target.rows() == pred.rows() && target.cols() == pred.cols(), "cosine_l1_loss: shape mismatch");
  const Eigen::Index n = pred.rows();
  if (grad) *grad = Mat<S>::Zero(pred.rows(), pred.cols());
  if (n == 0) return S(0);
  const S inv_n = S(1) / S(n);
  S total = S(0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto t = target.row(i);
    const auto p = pred.row(i);
    const S tn = t.norm(), pn = p.norm();
    const S dot = t.dot(p);
    const S den = tn * pn + S(kCosineEps);
    total += (S(1) - dot / den) + (t - p).cwiseAbs().sum();
    if (grad) {
      auto g = grad->row(i);
      g = -t / den;
      if (pn > S(0)) g += (dot * tn / (den * den * pn)) * p;
      for (Eigen::Index j = 0; j < p.size(); ++j) {
        const S diff = p[j] - t[j];
        g[j] += diff > S(0) ? S(1) : (diff < S(0) ? S(-1) : S(0));
      }
      g *= inv_n;
    }
  }
  return total * inv_n;
}

template <typename S>
S ld_loss(const Mat<S>& target, const Mat<S>& pred, Mat<S>* grad = nullptr) {
  return cosine_l1_loss(target, pred, grad);
}

template <typename S>
S lang_loss(const Mat<S>& target, const Mat<S>& pred, Mat<S>* grad = nullptr) {
  return cosine_l1_loss(target, pred, grad);
}

// ---------------------------------------------------------------------------
// SSIM with an 11x11 Gaussian window (sigma 1.5). Near the border the window
// is renormalized over the pixels inside the image, so constant images have
// zero local variance everywhere.

namespace detail {

inline constexpr int kSsimRadius = 5;

inline const std::array<double, 2 * kSsimRadius + 1>& ssim_kernel() {
  static const auto k = [] {
    std::array<double, 2 * kSsimRadius + 1> w{};
    double sum = 0.0;
    for (int i = -kSsimRadius; i <= kSsimRadius; ++i) sum += w[i + kSsimRadius] = std::exp(-(i * i) / (2.0 * 1.5 * 1.5));
    for (auto& x : w) x /= sum;
    return w;
  }();
  return k;
}

// Window mass inside [0, n) for each position.
template <typename S>
std::vector<S> window_mass(int n) {
  const auto& k = ssim_kernel();
  std::vector<S> z(static_cast<std::size_t>(n), S(0));
  for (int i = 0; i < n; ++i)
    for (int o = -kSsimRadius; o <= kSsimRadius; ++o)
      if (i + o >= 0 && i + o < n) z[i] += S(k[o + kSsimRadius]);
  return z;
}

// Zero-padded separable Gaussian blur of an h x w plane.
template <typename S>
std::vector<S> blur(const std::vector<S>& x, int h, int w) {
  const auto& k = ssim_kernel();
  std::vector<S> tmp(x.size(), S(0)), out(x.size(), S(0));
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      S acc = S(0);
      for (int o = -kSsimRadius; o <= kSsimRadius; ++o)
        if (c + o >= 0 && c + o < w) acc += S(k[o + kSsimRadius]) * x[static_cast<std::size_t>(r) * w + c + o];
      tmp[static_cast<std::size_t>(r) * w + c] = acc;
    }
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      S acc = S(0);
      for (int o = -kSsimRadius; o <= kSsimRadius; ++o)
        if (r + o >= 0 && r + o < h) acc += S(k[o + kSsimRadius]) * tmp[static_cast<std::size_t>(r + o) * w + c];
      out[static_cast<std::size_t>(r) * w + c] = acc;
    }
  return out;
}

template <typename S>
struct WindowFilter {
  int h, w;
  std::vector<S> inv_mass;  // per pixel 1 / (mass_row * mass_col)

  WindowFilter(int h_, int w_) : h(h_), w(w_), inv_mass(static_cast<std::size_t>(h_) * w_) {
    const auto zr = window_mass<S>(h), zc = window_mass<S>(w);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) inv_mass[static_cast<std::size_t>(r) * w + c] = S(1) / (zr[r] * zc[c]);
  }

  std::vector<S> apply(const std::vector<S>& x) const {
    auto y = blur(x, h, w);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= inv_mass[i];
    return y;
  }

  std::vector<S> apply_transpose(std::vector<S> g) const {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= inv_mass[i];
    return blur(g, h, w);
  }
};

}  // namespace detail

inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

// Mean SSIM over pixels and channels of two (H*W) x C images; optional
// gradient with respect to `b`.
template <typename S>
S ssim(const Mat<S>& a, const Mat<S>& b, int height, int width, Mat<S>* grad_b = nullptr) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "ssim: shape mismatch");
  require(a.rows() == static_cast<Eigen::Index>(height) * width, "ssim: image size mismatch");
  const detail::WindowFilter<S> filter(height, width);
  const std::size_t n_pix = static_cast<std::size_t>(height) * width;
  const S c1 = S(kSsimC1), c2 = S(kSsimC2);
  const S inv_count = S(1) / S(static_cast<double>(n_pix) * a.cols());
  if (grad_b) *grad_b = Mat<S>::Zero(b.rows(), b.cols());

  S total = S(0);
  std::vector<S> pa(n_pix), pb(n_pix), paa(n_pix), pbb(n_pix), pab(n_pix);
  for (Eigen::Index ch = 0; ch < a.cols(); ++ch) {
    for (std::size_t i = 0; i < n_pix; ++i) {
      const S x = a(static_cast<Eigen::Index>(i), ch), y = b(static_cast<Eigen::Index>(i), ch);
      pa[i] = x;
      pb[i] = y;
      paa[i] = x * x;
      pbb[i] = y * y;
      pab[i] = x * y;
    }
    const auto mu_a = filter.apply(pa), mu_b = filter.apply(pb);
    const auto e_aa = filter.apply(paa), e_bb = filter.apply(pbb), e_ab = filter.apply(pab);

    std::vector<S> g_mu(n_pix), g_ab(n_pix), g_bb(n_pix);
    for (std::size_t i = 0; i < n_pix; ++i) {
      const S var_a = e_aa[i] - mu_a[i] * mu_a[i];
      const S var_b = e_bb[i] - mu_b[i] * mu_b[i];
      const S cov = e_ab[i] - mu_a[i] * mu_b[i];
      const S n1 = S(2) * mu_a[i] * mu_b[i] + c1, n2 = S(2) * cov + c2;
      const S d1 = mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1, d2 = var_a + var_b + c2;
      const S s = (n1 * n2) / (d1 * d2);
      total += s;
      if (grad_b) {
        g_mu[i] = inv_count * s *
                  (S(2) * mu_a[i] / n1 - S(2) * mu_b[i] / d1 - S(2) * mu_a[i] / n2 + S(2) * mu_b[i] / d2);
        g_ab[i] = inv_count * s * S(2) / n2;
        g_bb[i] = -inv_count * s / d2;
      }
    }
    if (grad_b) {
      const auto t_mu = filter.apply_transpose(std::move(g_mu));
      const auto t_ab = filter.apply_transpose(std::move(g_ab));
      const auto t_bb = filter.apply_transpose(std::move(g_bb));
      for (std::size_t i = 0; i < n_pix; ++i)
        (*grad_b)(static_cast<Eigen::Index>(i), ch) = t_mu[i] + pa[i] * t_ab[i] + S(2) * pb[i] * t_bb[i];
    }
  }
  return total * inv_count;
}

// 0.8 * mean |C - Chat| + 0.2 * (1 - SSIM(C, Chat)).
template <typename S>
S photometric_loss(const Mat<S>& target, const Mat<S>& pred, int height, int width, Mat<S>* grad = nullptr) {
  require(target.rows() == pred.rows() && target.cols() == pred.cols(), "photometric_loss: dimension mismatch");
  const S inv_count = S(1) / S(static_cast<double>(pred.size()));
  const S l1 = (target - pred).cwiseAbs().sum() * inv_count;
  Mat<S> grad_ssim;
  const S s = ssim(target, pred, height, width, grad ? &grad_ssim : nullptr);
  if (grad) {
    *grad = Mat<S>(pred.rows(), pred.cols());
    for (Eigen::Index i = 0; i < pred.size(); ++i) {
      const S diff = pred.data()[i] - target.data()[i];
      const S sign = diff > S(0) ? S(1) : (diff < S(0) ? S(-1) : S(0));
      grad->data()[i] = S(0.8) * sign * inv_count - S(0.2) * grad_ssim.data()[i];
    }
  }
  return S(0.8) * l1 + S(0.2) * (S(1) - s);
}

}  // namespace gaff
