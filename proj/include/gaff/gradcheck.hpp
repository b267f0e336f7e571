#pragma once

// Central finite-difference checks of every hand-written adjoint, in double
// precision, over seeded random configurations.

#include <chrono>
#include <functional>
#include <limits>
#include <map>

#include "attention.hpp"
#include "field.hpp"
#include "losses.hpp"
#include "raster.hpp"

namespace gaff {

struct GradcheckOptions {
  std::uint64_t seed = 0;
  int configurations = 10;
  double step = 1e-5;
  double tolerance = 1e-4;
  // Scales the analytic gradient of this component by 1.01 (self-test of the
  // harness).
  std::string fault_component;
};

struct ComponentReport {
  std::string name;
  double max_rel_error = 0.0;
  std::string worst;  // parameter block with the largest error
  std::size_t checks = 0;
  bool passed = true;
};

struct GradcheckReport {
  std::vector<ComponentReport> components;
  double seconds = 0.0;

  bool passed() const {
    return std::all_of(components.begin(), components.end(), [](const auto& c) { return c.passed; });
  }

  std::vector<std::string> failing() const {
    std::vector<std::string> out;
    for (const auto& c : components)
      if (!c.passed) out.push_back(c.name);
    return out;
  }

  std::string to_text() const {
    std::string out;
    char line[256];
    for (const auto& c : components) {
      std::snprintf(line, sizeof(line), "%-10s %s  max_rel_error=%.3e  checks=%zu  worst=%s\n", c.name.c_str(),
                    c.passed ? "PASS" : "FAIL", c.max_rel_error, c.checks, c.worst.c_str());
      out += line;
    }
    std::snprintf(line, sizeof(line), "overall    %s  (%.2f s)\n", passed() ? "PASS" : "FAIL", seconds);
    return out + line;
  }
};

namespace detail {

// Relative error with the denominator floored at 1e-3 of the block's largest
// numeric entry and at 1e5 times the rounding error of the central
// difference, so entries that are zero up to rounding (the key bias gradient
// is exactly zero) do not dominate.
struct BlockChecker {
  ComponentReport& report;
  double h;
  double tolerance;
  bool fault;

  // `analytic` holds dL/dx for the parameters stored at `params`;
  // `loss` re-evaluates with the current parameter values.
  void check(const std::string& block, double* params, std::size_t n, const double* analytic,
             const std::function<double()>& loss) {
    const double base = std::abs(loss());
    std::vector<double> numeric(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double keep = params[i];
      params[i] = keep + h;
      const double up = loss();
      params[i] = keep - h;
      const double down = loss();
      params[i] = keep;
      numeric[i] = (up - down) / (2.0 * h);
    }
    double scale = 0.0;
    for (double v : numeric) scale = std::max(scale, std::abs(v));
    const double rounding = std::numeric_limits<double>::epsilon() * (base + 1.0) / h;
    const double floor = std::max(1e-3 * scale, 1e5 * rounding);
    for (std::size_t i = 0; i < n; ++i) {
      const double a = fault ? analytic[i] * 1.01 : analytic[i];
      const double err = std::abs(a - numeric[i]) / std::max({std::abs(a), std::abs(numeric[i]), floor});
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst = block;
      }
      ++report.checks;
    }
    report.passed = report.max_rel_error < tolerance;
  }

  template <typename Derived>
  void check(const std::string& block, Eigen::PlainObjectBase<Derived>& params,
             const Eigen::PlainObjectBase<Derived>& analytic, const std::function<double()>& loss) {
    require(params.size() == analytic.size(), "gradcheck: analytic gradient shape mismatch for " + block);
    check(block, params.data(), static_cast<std::size_t>(params.size()), analytic.data(), loss);
  }
};

inline MatD random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double lo = -1.0, double hi = 1.0) {
  MatD m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

inline double frobenius_dot(const MatD& a, const MatD& b) { return a.cwiseProduct(b).sum(); }

// Random 2D splats composited directly (no 3D projection).
inline void check_compositor(Rng& rng, BlockChecker& bc) {
  const int h = 10 + static_cast<int>(rng.index(12)), w = 10 + static_cast<int>(rng.index(12));
  const auto n = static_cast<Eigen::Index>(3 + rng.index(8));
  const auto channels = static_cast<Eigen::Index>(1 + rng.index(4));
  std::vector<Projected2D<double>> proj;
  for (Eigen::Index i = 0; i < n; ++i) {
    Projected2D<double> p;
    p.index = static_cast<std::uint32_t>(i);
    p.mean << rng.uniform(0.0, w - 1.0), rng.uniform(0.0, h - 1.0);
    const double sx = rng.uniform(1.0, 3.5), sy = rng.uniform(1.0, 3.5), rho = rng.uniform(-0.6, 0.6);
    p.cov << sx * sx, rho * sx * sy, rho * sx * sy, sy * sy;
    p.inv_cov = p.cov.inverse();
    p.depth = rng.uniform(1.0, 5.0);
    p.radius = 3.0 * std::max(sx, sy) * 1.5;
    proj.push_back(p);
  }
  std::sort(proj.begin(), proj.end(), depth_less<double>);
  MatD payloads = random_matrix(rng, n, channels);
  MatD logits = random_matrix(rng, n, 1, -2.0, 1.5);
  MatD means(n, 2);
  for (const auto& p : proj) means.row(p.index) = p.mean.transpose();
  const MatD upstream = random_matrix(rng, static_cast<Eigen::Index>(h) * w, channels);

  auto forward = [&]() {
    auto sorted = proj;
    for (auto& p : sorted) p.mean = means.row(p.index).transpose();
    std::vector<double> o(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) o[static_cast<std::size_t>(i)] = sigmoid(logits(i, 0));
    return std::make_pair(composite<double>(sorted, payloads, o, h, w), o);
  };
  auto loss = [&]() { return frobenius_dot(forward().first.image, upstream); };

  const auto [out, o] = forward();
  const auto g = composite_backward<double>(out, payloads, o, upstream, true);
  MatD g_logits(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) g_logits(i, 0) = g.opacity_logits[static_cast<std::size_t>(i)];
  bc.check("payloads", payloads, g.payloads, loss);
  bc.check("opacity_logits", logits, g_logits, loss);
  MatD g_means = g.means2d;
  bc.check("means2d", means, g_means, loss);
}

inline void check_field(Rng& rng, BlockChecker& bc) {
  const int n_freq = 1 + static_cast<int>(rng.index(3));
  const FourierEncoder enc{n_freq};
  const int hidden = 4 + static_cast<int>(rng.index(8));
  const int out_dim = 2 + static_cast<int>(rng.index(6));
  const auto n = static_cast<Eigen::Index>(4 + rng.index(8));
  FeatureFieldMLP<double> mlp = init_mlp<double>(rng.next_u64(), enc.output_dim() + 3, hidden, out_dim);
  for (auto& l : mlp.layers) l.bias = random_matrix(rng, l.bias.size(), 1, -0.3, 0.3);
  MatD x(n, enc.output_dim() + 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector3d p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    x.row(i).head(enc.output_dim()) = enc.encode(p).transpose();
    for (int c = 0; c < 3; ++c) x(i, enc.output_dim() + c) = rng.uniform(0, 1);
  }
  const MatD upstream = random_matrix(rng, n, out_dim);
  auto loss = [&]() { return frobenius_dot(mlp_forward(mlp, x), upstream); };

  FieldCache<double> cache;
  mlp_forward(mlp, x, &cache);
  const auto g = field_backward<double>(mlp, cache, upstream, true);
  for (int l = 0; l < 3; ++l) {
    const std::string name = "layer" + std::to_string(l);
    bc.check(name + ".weight", mlp.layers[l].weight, g.params.layers[l].weight, loss);
    Vec<double>& b = mlp.layers[l].bias;
    bc.check(name + ".bias", b.data(), static_cast<std::size_t>(b.size()), g.params.layers[l].bias.data(), loss);
  }
  MatD colors = x.rightCols(3);
  auto color_loss = [&]() {
    x.rightCols(3) = colors;
    return loss();
  };
  bc.check("colors", colors, g.colors, color_loss);
  x.rightCols(3) = colors;
}

inline void check_attention(Rng& rng, BlockChecker& bc) {
  const int d = 2 + static_cast<int>(rng.index(5));
  const int dh = 2 + static_cast<int>(rng.index(7));
  const int big_d = 3 + static_cast<int>(rng.index(8));
  const auto nc = static_cast<Eigen::Index>(2 + rng.index(6));
  const auto n = static_cast<Eigen::Index>(3 + rng.index(10));
  const double lambda = rng.uniform(0.0, 0.5);
  AttentionHead<double> head = init_attention<double>(rng.next_u64(), d, dh, random_matrix(rng, nc, big_d));
  head.bq = random_matrix(rng, dh, 1, -0.5, 0.5);
  head.bk = random_matrix(rng, dh, 1, -0.5, 0.5);
  head.wq *= 2.0;
  head.wk *= 2.0;
  MatD queries = random_matrix(rng, n, d);
  const MatD upstream = random_matrix(rng, n, big_d);
  auto loss = [&]() {
    const auto out = attention_forward(head, queries);
    return frobenius_dot(out.lhat, upstream) + lambda * entropy_loss(out.weights);
  };
  const auto out = attention_forward(head, queries);
  const auto g = attention_backward(head, out, upstream, lambda, true);
  bc.check("wq", head.wq, g.wq, loss);
  bc.check("bq", head.bq, g.bq, loss);
  bc.check("wk", head.wk, g.wk, loss);
  bc.check("bk", head.bk, g.bk, loss);
  bc.check("queries", queries, g.queries, loss);
  bc.check("codebook", head.codebook, g.codebook, loss);
}

inline void check_losses(Rng& rng, BlockChecker& bc) {
  {
    const auto n = static_cast<Eigen::Index>(2 + rng.index(10));
    const auto dim = static_cast<Eigen::Index>(2 + rng.index(8));
    const MatD target = random_matrix(rng, n, dim);
    MatD pred = random_matrix(rng, n, dim);
    MatD g;
    cosine_l1_loss(target, pred, &g);
    bc.check("cosine_l1", pred, g, [&] { return cosine_l1_loss<double>(target, pred); });
  }
  const int h = 6 + static_cast<int>(rng.index(10)), w = 6 + static_cast<int>(rng.index(10));
  const auto n_pix = static_cast<Eigen::Index>(h) * w;
  const MatD target = random_matrix(rng, n_pix, 3, 0.0, 1.0);
  MatD pred = random_matrix(rng, n_pix, 3, 0.0, 1.0);
  MatD g;
  ssim(target, pred, h, w, &g);
  bc.check("ssim", pred, g, [&] { return ssim<double>(target, pred, h, w); });
  photometric_loss(target, pred, h, w, &g);
  bc.check("photometric", pred, g, [&] { return photometric_loss<double>(target, pred, h, w); });
}

}  // namespace detail

inline const std::vector<std::string>& gradcheck_components() {
  static const std::vector<std::string> names{"compositor", "field", "attention", "losses"};
  return names;
}

inline GradcheckReport run_gradcheck(const GradcheckOptions& opt = {}) {
  require(opt.configurations >= 1, "gradcheck: need at least one configuration");
  require(opt.step > 0.0 && opt.tolerance > 0.0, "gradcheck: step and tolerance must be positive");
  if (!opt.fault_component.empty()) {
    const auto& names = gradcheck_components();
    if (std::find(names.begin(), names.end(), opt.fault_component) == names.end())
      throw ValidationError("gradcheck: unknown component '" + opt.fault_component + "'");
  }
  const auto start = std::chrono::steady_clock::now();
  using Suite = void (*)(Rng&, detail::BlockChecker&);
  const std::map<std::string, Suite> suites{{"compositor", detail::check_compositor},
                                            {"field", detail::check_field},
                                            {"attention", detail::check_attention},
                                            {"losses", detail::check_losses}};
  GradcheckReport report;
  for (const auto& name : gradcheck_components()) {
    ComponentReport comp;
    comp.name = name;
    detail::BlockChecker bc{comp, opt.step, opt.tolerance, opt.fault_component == name};
    for (int c = 0; c < opt.configurations; ++c) {
      Rng rng(derive_seed(opt.seed + static_cast<std::uint64_t>(c), "gradcheck/" + name));
      suites.at(name)(rng, bc);
    }
    report.components.push_back(comp);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace gaff
