#include <gtest/gtest.h>

#include "helpers.hpp"

using namespace gaff;

namespace {

// Central differences of a scalar function over every entry of `x`.
template <typename F>
Mat<double> numeric_grad(Mat<double>& x, F&& f, double h = 1e-5) {
  Mat<double> g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = f();
    x.data()[i] = keep - h;
    const double down = f();
    x.data()[i] = keep;
    g.data()[i] = (up - down) / (2 * h);
  }
  return g;
}

template <typename F>
Vec<double> numeric_grad(Vec<double>& x, F&& f, double h = 1e-5) {
  Mat<double> m = x.transpose();
  Mat<double> g = numeric_grad(m, [&] {
    x = m.transpose();
    return f();
  }, h);
  x = m.transpose();
  return g.transpose();
}

double max_rel_error(const Mat<double>& a, const Mat<double>& n, double floor = 1e-6) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double den = std::max({std::abs(a.data()[i]), std::abs(n.data()[i]), floor});
    worst = std::max(worst, std::abs(a.data()[i] - n.data()[i]) / den);
  }
  return worst;
}

Mat<double> random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Fourier encoding

TEST(FourierEncoder, OriginGivesZeroSinesAndUnitCosines) {
  const FourierEncoder enc;
  ASSERT_EQ(enc.output_dim(), 39);
  const Vec<double> e = enc.encode(Eigen::Vector3d::Zero().eval());
  ASSERT_EQ(e.size(), 39);
  for (int a = 0; a < 3; ++a) EXPECT_EQ(e[a], 0.0);
  for (int f = 0; f < 6; ++f)
    for (int a = 0; a < 3; ++a) {
      EXPECT_EQ(e[3 + 6 * f + a], 0.0);
      EXPECT_EQ(e[3 + 6 * f + 3 + a], 1.0);
    }
}

TEST(FourierEncoder, ParityUnderNegation) {
  const FourierEncoder enc{4};
  const Eigen::Vector3d p(0.3, -0.7, 0.11);
  const Vec<double> a = enc.encode(p), b = enc.encode(Eigen::Vector3d(-p));
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(b[i], -a[i]);
  for (int f = 0; f < 4; ++f)
    for (int k = 0; k < 3; ++k) {
      EXPECT_NEAR(b[3 + 6 * f + k], -a[3 + 6 * f + k], 1e-15);
      EXPECT_NEAR(b[3 + 6 * f + 3 + k], a[3 + 6 * f + 3 + k], 1e-15);
    }
}

TEST(FourierEncoder, FrequenciesArePowersOfTwoTimesPi) {
  const FourierEncoder enc{3};
  const Eigen::Vector3d p(0.1, 0.2, 0.3);
  const Vec<double> e = enc.encode(p);
  for (int f = 0; f < 3; ++f)
    for (int a = 0; a < 3; ++a) {
      const double w = std::pow(2.0, f) * std::numbers::pi;
      EXPECT_NEAR(e[3 + 6 * f + a], std::sin(w * p[a]), 1e-14);
      EXPECT_NEAR(e[3 + 6 * f + 3 + a], std::cos(w * p[a]), 1e-14);
    }
}

TEST(SceneBoundsTest, MapsBoxToUnitCube) {
  std::vector<GaussianSplat> s(2);
  s[0].mu = {-2, 0, 1};
  s[1].mu = {2, 4, 1};
  const auto b = SceneBounds::of(s);
  EXPECT_TRUE(b.normalize<double>(s[0].mu).isApprox(Eigen::Vector3d(-1, -1, -1)));
  EXPECT_TRUE(b.normalize<double>(s[1].mu).isApprox(Eigen::Vector3d(1, 1, -1)));
}

// ---------------------------------------------------------------------------
// Feature field

TEST(FeatureField, InitIsXavierWithZeroBias) {
  const auto a = init_mlp(3, 42, 128, 8), b = init_mlp(3, 42, 128, 8);
  const std::array<std::pair<int, int>, 3> shapes{{{128, 42}, {128, 128}, {8, 128}}};
  for (int l = 0; l < 3; ++l) {
    EXPECT_EQ(a.layers[l].weight, b.layers[l].weight);
    EXPECT_EQ(a.layers[l].weight.rows(), shapes[l].first);
    EXPECT_EQ(a.layers[l].weight.cols(), shapes[l].second);
    EXPECT_EQ(a.layers[l].bias.cwiseAbs().maxCoeff(), 0.0f);
    const double bound = std::sqrt(6.0 / (shapes[l].first + shapes[l].second));
    EXPECT_LE(a.layers[l].weight.cwiseAbs().maxCoeff(), bound);
  }
  EXPECT_NE(init_mlp(4, 42, 128, 8).layers[0].weight, a.layers[0].weight);
}

TEST(FeatureField, ZeroWeightsGiveOutputBias) {
  auto mlp = init_mlp(0, 42, 16, 5);
  for (auto& l : mlp.layers) l.weight.setZero();
  mlp.layers[2].bias << 1, 2, 3, 4, 5;
  Rng rng(1);
  const auto splats = gaff::test::random_splats(rng, 7);
  const FourierEncoder enc;
  const MatF m = field_forward(mlp, enc, SceneBounds::of(splats), std::span<const GaussianSplat>(splats));
  for (Eigen::Index i = 0; i < 7; ++i) EXPECT_EQ(m.row(i), mlp.layers[2].bias.transpose());
}

TEST(FeatureField, DependsOnlyOnPositionAndColor) {
  Rng rng(2);
  auto splats = gaff::test::random_splats(rng, 4);
  splats[1].mu = splats[0].mu;
  splats[1].color = splats[0].color;
  splats[1].log_scale = Eigen::Vector3f::Constant(-4.0f);
  splats[1].alpha_logit = -3.0f;
  splats[1].sem_alpha_logit = 2.0f;
  const FourierEncoder enc;
  const auto mlp = init_mlp(1, enc.output_dim() + 3, 32, 6);
  const auto bounds = SceneBounds::of(splats);
  const MatF m = field_forward(mlp, enc, bounds, std::span<const GaussianSplat>(splats));
  EXPECT_EQ(m.row(0), m.row(1));

  auto changed = splats;
  changed[2].color += Eigen::Vector3f(0.1f, 0.0f, 0.0f);
  const MatF m2 = field_forward(mlp, enc, bounds, std::span<const GaussianSplat>(changed));
  EXPECT_NE(m2.row(2), m.row(2));
  for (Eigen::Index i : {0, 1, 3}) EXPECT_EQ(m2.row(i), m.row(i));
}

TEST(FeatureField, BackwardZeroAndLinearity) {
  Rng rng(3);
  const auto mlp = init_mlp<double>(5, 12, 16, 4);
  const Mat<double> x = random_matrix(rng, 10, 12);
  FieldCache<double> cache;
  mlp_forward(mlp, x, &cache);
  const auto zero = field_backward(mlp, cache, Mat<double>(Mat<double>::Zero(10, 4)), true);
  for (const auto& l : zero.params.layers) {
    EXPECT_EQ(l.weight.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(l.bias.cwiseAbs().maxCoeff(), 0.0);
  }
  EXPECT_EQ(zero.colors.cwiseAbs().maxCoeff(), 0.0);
  const Mat<double> g = random_matrix(rng, 10, 4);
  const auto once = field_backward(mlp, cache, g);
  const auto twice = field_backward(mlp, cache, Mat<double>(2.0 * g));
  for (int l = 0; l < 3; ++l) {
    EXPECT_LT((twice.params.layers[l].weight - 2.0 * once.params.layers[l].weight).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((twice.params.layers[l].bias - 2.0 * once.params.layers[l].bias).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(FeatureField, BackwardMissingCacheRejected) {
  const auto mlp = init_mlp<double>(5, 12, 16, 4);
  FieldCache<double> empty;
  EXPECT_THROW(field_backward(mlp, empty, Mat<double>(Mat<double>::Ones(3, 4))), ValidationError);
}

TEST(FeatureField, FiniteDifferencesOnTenSplats) {
  Rng rng(4);
  auto mlp = init_mlp<double>(9, 12, 16, 4);
  for (auto& l : mlp.layers) l.bias = Vec<double>::Constant(l.bias.size(), 0.05);
  Mat<double> x = random_matrix(rng, 10, 12);
  const Mat<double> up = random_matrix(rng, 10, 4);
  auto loss = [&] { return (mlp_forward(mlp, x).array() * up.array()).sum(); };
  FieldCache<double> cache;
  mlp_forward(mlp, x, &cache);
  const auto g = field_backward(mlp, cache, up, true);
  for (int l = 0; l < 3; ++l) {
    EXPECT_LT(max_rel_error(g.params.layers[l].weight, numeric_grad(mlp.layers[l].weight, loss)), 1e-4);
    Mat<double> ga = g.params.layers[l].bias.transpose();
    Mat<double> gn = numeric_grad(mlp.layers[l].bias, loss).transpose();
    EXPECT_LT(max_rel_error(ga, gn), 1e-4);
  }
  const Mat<double> gx = numeric_grad(x, loss);
  EXPECT_LT(max_rel_error(g.colors, gx.rightCols(3)), 1e-4);
}

TEST(FeatureFieldProperty, LocallyLipschitzAndSmooth) {
  Rng rng(6);
  const FourierEncoder enc;
  const auto mlp = init_mlp<double>(2, enc.output_dim() + 3, 128, 8);
  double k_max = 0.0;
  for (int probe = 0; probe < 50; ++probe) {
    Eigen::Vector3d p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    const Eigen::Vector3d dir = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()).normalized();
    auto eval = [&](const Eigen::Vector3d& q) {
      Mat<double> x(1, enc.output_dim() + 3);
      x.leftCols(enc.output_dim()) = enc.encode(q).transpose();
      x.rightCols(3).setConstant(0.5);
      return Vec<double>(mlp_forward(mlp, x).transpose());
    };
    const Vec<double> base = eval(p);
    double cos = 0.0;
    for (double eps : {1e-2, 1e-3, 1e-4}) {
      const Vec<double> moved = eval(p + eps * dir);
      k_max = std::max(k_max, (moved - base).norm() / eps);
      cos = moved.dot(base) / (moved.norm() * base.norm());
    }
    EXPECT_GT(cos, 0.9999);
  }
  // Bound from spectral norms times the encoder Jacobian bound.
  double bound = 1.0;
  for (const auto& l : mlp.layers) bound *= Eigen::JacobiSVD<Eigen::MatrixXd>(l.weight).singularValues()[0];
  double enc_bound = 1.0;
  for (int f = 0; f < enc.n_freq; ++f) enc_bound += std::pow(std::pow(2.0, f) * std::numbers::pi, 2);
  bound *= std::sqrt(enc_bound);
  EXPECT_LE(k_max, bound);
}

// ---------------------------------------------------------------------------
// Attention

namespace {

AttentionHead<double> random_head(Rng& rng, int d, int dh, int nc, int big_d) {
  AttentionHead<double> h;
  h.wq = random_matrix(rng, dh, d, 0.5);
  h.bq = random_matrix(rng, dh, 1, 0.1);
  h.wk = random_matrix(rng, dh, big_d, 0.5);
  h.bk = random_matrix(rng, dh, 1, 0.1);
  h.codebook = random_matrix(rng, nc, big_d);
  return h;
}

}  // namespace

TEST(Attention, ZeroProjectionsGiveUniformWeights) {
  Rng rng(1);
  AttentionHead<double> h = random_head(rng, 3, 5, 4, 6);
  h.wq.setZero();
  h.wk.setZero();
  h.bq.setZero();
  h.bk.setZero();
  const auto out = attention_forward(h, random_matrix(rng, 7, 3));
  EXPECT_LT((out.weights.array() - 0.25).abs().maxCoeff(), 1e-15);
  const Eigen::RowVectorXd mean = h.codebook.rowwise().normalized().colwise().mean();
  for (Eigen::Index i = 0; i < 7; ++i) EXPECT_LT((out.lhat.row(i) - mean).norm(), 1e-12);
  EXPECT_NEAR(entropy_loss(out.weights), std::log(4.0), 1e-12);
}

TEST(Attention, SaturatedLogitGivesOneHot) {
  // d_h = 1, bq = 1, keys pick entry 2 with a logit 20 higher than the rest.
  AttentionHead<double> h;
  h.wq = Mat<double>::Zero(1, 2);
  h.bq = Vec<double>::Ones(1);
  h.codebook = Mat<double>::Identity(3, 3) * 2.0;
  h.wk = Mat<double>(1, 3);
  h.wk << 0.0, 0.0, 10.0;
  h.bk = Vec<double>::Zero(1);
  const auto out = attention_forward(h, Mat<double>(Mat<double>::Ones(2, 2)));
  EXPECT_GT(out.weights(0, 2), 1.0 - 1e-8);
  const Eigen::RowVector3d e(0, 0, 1);
  EXPECT_GT(out.lhat.row(0).dot(e) / out.lhat.row(0).norm(), 0.999);
}

TEST(AttentionProperty, RowStochasticConvexAndShiftInvariant) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const AttentionHead<double> h = random_head(rng, 4, 8, 5, 10);
    const auto out = attention_forward(h, random_matrix(rng, 30, 4, 2.0));
    for (Eigen::Index i = 0; i < 30; ++i) {
      EXPECT_NEAR(out.weights.row(i).sum(), 1.0, 1e-12);
      EXPECT_LE(out.lhat.row(i).norm(), 1.0 + 1e-12);
    }
    EXPECT_GT(out.weights.minCoeff(), 0.0);
    const double ent = entropy_loss(out.weights);
    EXPECT_GE(ent, 0.0);
    EXPECT_LE(ent, std::log(5.0) + 1e-12);

    Mat<double> logits = out.q * out.k.transpose();
    Mat<double> moved = logits;
    moved.colwise() += Vec<double>::LinSpaced(30, -3.0, 3.0);
    softmax_rows(logits);
    softmax_rows(moved);
    EXPECT_LT((logits - moved).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Attention, EntropyOfOneHotRowsIsZero) {
  Mat<double> a = Mat<double>::Zero(3, 4);
  a(0, 1) = a(1, 3) = a(2, 0) = 1.0;
  EXPECT_EQ(entropy_loss(a), 0.0);
}

TEST(Attention, DimensionChecks) {
  Rng rng(3);
  AttentionHead<double> h = random_head(rng, 4, 8, 5, 10);
  EXPECT_THROW(attention_forward(h, random_matrix(rng, 3, 5)), ValidationError);
  h.codebook.resize(0, 10);
  EXPECT_THROW(attention_forward(h, random_matrix(rng, 3, 4)), ValidationError);
}

TEST(AttentionBackward, ZeroUpstreamGivesZeroGradients) {
  Rng rng(4);
  const auto h = random_head(rng, 4, 8, 5, 10);
  const auto out = attention_forward(h, random_matrix(rng, 6, 4));
  const auto g = attention_backward(h, out, Mat<double>(Mat<double>::Zero(6, 10)), 0.0);
  EXPECT_EQ(g.wq.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.wk.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.bq.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.bk.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.queries.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.codebook.cwiseAbs().maxCoeff(), 0.0);
}

TEST(AttentionBackward, MissingCacheRejected) {
  Rng rng(4);
  const auto h = random_head(rng, 4, 8, 5, 10);
  AttentionOutput<double> empty;
  EXPECT_THROW(attention_backward(h, empty, Mat<double>(0, 10), 0.0), ValidationError);
}

TEST(AttentionBackward, UniformWeightsAndIdenticalEntriesGiveNoQueryGradient) {
  Rng rng(5);
  AttentionHead<double> h = random_head(rng, 4, 8, 3, 6);
  h.wk.setZero();
  h.bk.setZero();
  const Eigen::RowVectorXd row = random_matrix(rng, 1, 6);
  h.codebook = row.replicate(3, 1);
  const auto out = attention_forward(h, random_matrix(rng, 5, 4));
  const auto g = attention_backward(h, out, random_matrix(rng, 5, 6), 0.0);
  EXPECT_LT(g.queries.cwiseAbs().maxCoeff(), 1e-15);
}

TEST(AttentionBackward, FiniteDifferencesAllGroups) {
  Rng rng(6);
  for (double lambda : {0.0, 0.01}) {
    AttentionHead<double> h = random_head(rng, 8, 12, 4, 16);
    Mat<double> q = random_matrix(rng, 16, 8);
    const Mat<double> target = random_matrix(rng, 16, 16);
    auto loss = [&] {
      const auto o = attention_forward(h, q);
      return lang_loss(target, o.lhat) + lambda * entropy_loss(o.weights);
    };
    const auto out = attention_forward(h, q);
    Mat<double> up;
    lang_loss(target, out.lhat, &up);
    const auto g = attention_backward(h, out, up, lambda);
    // bk only shifts each logit row by a constant: its exact gradient is zero.
    EXPECT_LT(g.bk.cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT(max_rel_error(g.wq, numeric_grad(h.wq, loss)), 1e-4);
    EXPECT_LT(max_rel_error(g.wk, numeric_grad(h.wk, loss)), 1e-4);
    EXPECT_LT(max_rel_error(g.bq, numeric_grad(h.bq, loss)), 1e-4);
    EXPECT_LT(max_rel_error(g.queries, numeric_grad(q, loss)), 1e-4);
    EXPECT_LT(max_rel_error(g.codebook, numeric_grad(h.codebook, loss)), 1e-4);
  }
}

TEST(AttentionBackward, FrozenCodebookHasZeroGradient) {
  Rng rng(7);
  const auto h = random_head(rng, 4, 8, 5, 10);
  const auto out = attention_forward(h, random_matrix(rng, 6, 4));
  const auto g = attention_backward(h, out, random_matrix(rng, 6, 10), 0.0, false);
  EXPECT_EQ(g.codebook.cwiseAbs().maxCoeff(), 0.0);
}

TEST(PerGaussianLanguage, SameFunctionAsPixelPath) {
  Rng rng(8);
  const auto h = random_head(rng, 4, 8, 5, 10);
  const Mat<double> feats = random_matrix(rng, 9, 4);
  const Mat<double> per = per_gaussian_language(h, feats);
  const auto pix = attention_forward(h, Mat<double>(feats.row(3)));
  EXPECT_LT((per.row(3) - pix.lhat.row(0)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(per_gaussian_language(h, Mat<double>(0, 4)).rows(), 0);
}

TEST(PerGaussianLanguage, CommutesWithRenderingOnSingleContributorPixels) {
  // Isolated splats, so the pixel nearest each center has one contributor.
  // The alpha clamp keeps its weight below 1; normalizing by the accumulated
  // weight recovers the splat feature exactly.
  Rng rng(9);
  Camera cam = gaff::test::front_camera(32, 32);
  cam.cx = cam.cy = 16.0f;
  std::vector<GaussianSplat> splats;
  for (int i = 0; i < 3; ++i) {
    auto s = gaff::test::make_splat({-0.8f + 0.8f * i, 0.0f, 0.0f}, 0.02f, 0.5f);
    s.sem_alpha_logit = 30.0f;
    splats.push_back(s);
  }
  const MatF feats = gaff::test::random_features(rng, 3, 4);
  const auto out = render_features<float>(std::span<const GaussianSplat>(splats), cam, feats);
  AttentionHead<float> h = random_head(rng, 4, 8, 5, 10).cast<float>();
  for (int i = 0; i < 3; ++i) {
    const auto p = project_gaussian<float>(splats[i], cam);
    ASSERT_TRUE(p);
    const std::size_t pix = static_cast<std::size_t>(std::lround(p->mean.y())) * 32 + std::lround(p->mean.x());
    ASSERT_EQ(out.pixel(pix).size(), 1u);
    const float w = out.accum_weight[pix];
    const MatF rendered = out.image.row(static_cast<Eigen::Index>(pix)) / w;
    const MatF a = attention_forward(h, rendered).lhat;
    const MatF b = per_gaussian_language(h, MatF(feats.row(i)));
    EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-5f);
  }
}

// ---------------------------------------------------------------------------
// Losses

TEST(CosineL1, IdentityAntipodalAndNonnegative) {
  Rng rng(1);
  Mat<double> m = random_matrix(rng, 5, 4);
  m = m.rowwise().normalized();
  EXPECT_NEAR(ld_loss(m, m), 0.0, 1e-7);
  const double l1 = m.cwiseAbs().rowwise().sum().mean();
  EXPECT_NEAR(ld_loss(m, Mat<double>(-m)), 2.0 + 2.0 * l1, 1e-7);
  for (int t = 0; t < 20; ++t)
    EXPECT_GE(lang_loss(random_matrix(rng, 6, 3), random_matrix(rng, 6, 3)), 0.0);
}

TEST(CosineL1, ZeroPredictionIsGuarded) {
  Mat<double> t(1, 2), p = Mat<double>::Zero(1, 2);
  t << 1.0, 0.0;
  Mat<double> g;
  const double l = lang_loss(t, p, &g);
  EXPECT_NEAR(l, 2.0, 1e-12);
  EXPECT_TRUE(g.allFinite());
}

TEST(CosineL1, GradientMatchesFiniteDifferences) {
  Rng rng(2);
  const Mat<double> t = random_matrix(rng, 7, 5);
  Mat<double> p = random_matrix(rng, 7, 5);
  Mat<double> g;
  lang_loss(t, p, &g);
  EXPECT_LT(max_rel_error(g, numeric_grad(p, [&] { return lang_loss(t, p); })), 1e-4);
}

TEST(Ssim, ConstantShiftMatchesClosedForm) {
  const int h = 12, w = 14;
  const double c = 0.4;
  const Mat<double> a = Mat<double>::Constant(h * w, 3, c);
  const Mat<double> b = Mat<double>::Constant(h * w, 3, c + 0.1);
  const double mu_a = c, mu_b = c + 0.1;
  const double want = (2 * mu_a * mu_b + kSsimC1) / (mu_a * mu_a + mu_b * mu_b + kSsimC1);
  EXPECT_NEAR(ssim(a, b, h, w), want, 1e-12);
  EXPECT_NEAR(photometric_loss(a, b, h, w), 0.8 * 0.1 + 0.2 * (1.0 - want), 1e-12);
}

TEST(Ssim, IdenticalImagesGiveZeroPhotometricLoss) {
  Rng rng(3);
  Mat<double> a(16 * 16, 3);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.uniform();
  EXPECT_NEAR(ssim(a, a, 16, 16), 1.0, 1e-12);
  EXPECT_NEAR(photometric_loss(a, a, 16, 16), 0.0, 1e-12);
  for (int t = 0; t < 5; ++t) {
    Mat<double> b(16 * 16, 3);
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = rng.uniform();
    EXPECT_GE(photometric_loss(a, b, 16, 16), 0.0);
  }
}

TEST(Ssim, MatchesDirectWindowSum) {
  // Oracle: explicit 11x11 Gaussian window, renormalized over in-image pixels.
  Rng rng(4);
  const int h = 9, w = 13;
  Mat<double> a(h * w, 1), b(h * w, 1);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    a.data()[i] = rng.uniform();
    b.data()[i] = rng.uniform();
  }
  double total = 0.0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double z = 0, ma = 0, mb = 0, aa = 0, bb = 0, ab = 0;
      for (int dr = -5; dr <= 5; ++dr)
        for (int dc = -5; dc <= 5; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
          const double k = std::exp(-(dr * dr + dc * dc) / (2 * 1.5 * 1.5));
          const double x = a(rr * w + cc, 0), y = b(rr * w + cc, 0);
          z += k;
          ma += k * x;
          mb += k * y;
          aa += k * x * x;
          bb += k * y * y;
          ab += k * x * y;
        }
      ma /= z;
      mb /= z;
      const double va = aa / z - ma * ma, vb = bb / z - mb * mb, cov = ab / z - ma * mb;
      total += (2 * ma * mb + kSsimC1) * (2 * cov + kSsimC2) / ((ma * ma + mb * mb + kSsimC1) * (va + vb + kSsimC2));
    }
  EXPECT_NEAR(ssim(a, b, h, w), total / (h * w), 1e-12);
}

TEST(Ssim, PhotometricGradientMatchesFiniteDifferences) {
  Rng rng(5);
  const int h = 7, w = 8;
  Mat<double> t(h * w, 3), p(h * w, 3);
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    t.data()[i] = rng.uniform();
    p.data()[i] = rng.uniform();
  }
  Mat<double> g;
  photometric_loss(t, p, h, w, &g);
  EXPECT_LT(max_rel_error(g, numeric_grad(p, [&] { return photometric_loss(t, p, h, w); }), 1e-6), 1e-4);
}

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, FirstStepMovesByLearningRate) {
  AdamState st;
  std::vector<double> p{1.0, -2.0, 0.5};
  const std::vector<double> g{1.0, -3.0, 0.0};
  adam_step<double>(st, p, g, 0.01);
  EXPECT_NEAR(p[0], 1.0 - 0.01 / (1.0 + 1e-8), 1e-12);
  EXPECT_NEAR(p[1], -2.0 + 0.01, 1e-9);
  EXPECT_EQ(p[2], 0.5);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  AdamState st;
  std::vector<float> p{0.3f, 0.7f};
  const std::vector<float> g{0.0f, 0.0f};
  for (int i = 0; i < 10; ++i) adam_step<float>(st, p, g, 0.1);
  EXPECT_EQ(p, (std::vector<float>{0.3f, 0.7f}));
  EXPECT_EQ(st.step, 10u);
}

TEST(Adam, MatchesTextbookRecurrence) {
  Rng rng(6);
  AdamState st;
  std::vector<double> p(4, 0.0), ref(4, 0.0), m(4, 0.0), v(4, 0.0);
  for (int t = 1; t <= 25; ++t) {
    std::vector<double> g(4);
    for (auto& x : g) x = rng.normal();
    adam_step<double>(st, p, g, 0.05);
    for (int i = 0; i < 4; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      ref[i] -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(p[i], ref[i], 1e-12);
}

TEST(Adam, ShapeMismatchRejected) {
  AdamState st;
  std::vector<double> p(3, 0.0);
  const std::vector<double> g(2, 0.0);
  EXPECT_THROW(adam_step<double>(st, p, g, 0.1), ValidationError);
}
