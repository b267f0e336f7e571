#include <gtest/gtest.h>

#include "helpers.hpp"

#include <set>

using namespace gaff;

namespace {

MatF gaussian_cloud(Rng& rng, Eigen::Index n, Eigen::Index d, double scale = 1.0) {
  MatF m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = float(scale * rng.normal());
  return m;
}

// Tight clusters around the given unit directions.
MatF clustered(Rng& rng, const MatF& centers, int per, double noise) {
  MatF out(centers.rows() * per, centers.cols());
  for (Eigen::Index c = 0; c < centers.rows(); ++c)
    for (int i = 0; i < per; ++i) {
      auto row = out.row(c * per + i);
      row = centers.row(c);
      for (Eigen::Index k = 0; k < row.size(); ++k) row[k] += float(noise * rng.normal());
    }
  return out;
}

double reconstruction_error(const PCAProjection& pca, const MatF& x) {
  return double((pca_lift(pca, pca_project(pca, x)) - x).squaredNorm());
}

// Same partition up to label permutation.
bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
  std::map<int, int> ab, ba;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (auto [it, fresh] = ab.emplace(a[i], b[i]); !fresh && it->second != b[i]) return false;
    if (auto [it, fresh] = ba.emplace(b[i], a[i]); !fresh && it->second != a[i]) return false;
  }
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Language maps

TEST(LanguageMap, TwoHalfImageMasks) {
  std::vector<std::int32_t> masks{0, 0, 1, 1, 0, 0, 1, 1};  // 2 x 4, left/right halves
  MatF f(2, 3);
  f << 1, 2, 3, -1, -2, -3;
  const auto m = assemble_language_map(masks, f);
  for (std::size_t p = 0; p < masks.size(); ++p) {
    EXPECT_EQ(m.values.row(static_cast<Eigen::Index>(p)), f.row(masks[p]));
    EXPECT_EQ(m.supervised[p], 1);
  }
}

TEST(LanguageMap, UnsupervisedPixelsFlagged) {
  std::vector<std::int32_t> masks{-1, 0, -1};
  const auto m = assemble_language_map(masks, MatF::Ones(1, 2));
  EXPECT_EQ(m.supervised, (std::vector<std::uint8_t>{0, 1, 0}));
  EXPECT_EQ(m.values.row(0).cwiseAbs().sum(), 0.0f);
  std::vector<std::int32_t> bad{2};
  EXPECT_THROW(assemble_language_map(bad, MatF::Ones(2, 2)), ValidationError);
}

// ---------------------------------------------------------------------------
// PCA

TEST(Pca, PointsOnALineNeedOneComponent) {
  Rng rng(1);
  const Eigen::RowVector3f dir = Eigen::RowVector3f(1, 2, -2) / 3.0f;
  MatF x(50, 3);
  for (Eigen::Index i = 0; i < 50; ++i) x.row(i) = float(rng.normal()) * dir;
  const auto pca = fit_pca(x, 1);
  EXPECT_LT(reconstruction_error(pca, x), 1e-8);
  EXPECT_NEAR(std::abs(pca.basis.col(0).dot(dir.transpose())), 1.0f, 1e-6f);
}

TEST(Pca, MatchesDenseEigensolver) {
  Rng rng(2);
  MatF x = gaussian_cloud(rng, 400, 6);
  x.col(1) *= 3.0f;
  x.col(4) += 0.5f * x.col(1);
  const auto pca = fit_pca(x, 6);
  const Eigen::MatrixXd xd = x.cast<double>();
  const Eigen::MatrixXd c = xd.rowwise() - xd.colwise().mean();
  const Eigen::MatrixXd cov = c.transpose() * c / double(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  for (int j = 0; j < 6; ++j) {
    EXPECT_NEAR(pca.explained_variance[j], es.eigenvalues()[5 - j], 1e-4 * es.eigenvalues()[5]);
    EXPECT_NEAR(std::abs(pca.basis.col(j).cast<double>().dot(es.eigenvectors().col(5 - j))), 1.0, 1e-5);
  }
}

TEST(Pca, IsotropicCloudHasUnitVariances) {
  Rng rng(3);
  const MatF x = gaussian_cloud(rng, 20000, 4);
  const auto pca = fit_pca(x, 4);
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(pca.explained_variance[j], 1.0f, 0.06f);
}

TEST(Pca, FullBasisRoundTrip) {
  Rng rng(4);
  const MatF x = gaussian_cloud(rng, 60, 5);
  const auto pca = fit_pca(x, 5);
  EXPECT_LT((pca_lift(pca, pca_project(pca, x)) - x).cwiseAbs().maxCoeff(), 1e-5f);
}

TEST(Pca, ProjectLiftIdentitiesAndSigns) {
  Rng rng(5);
  const MatF x = gaussian_cloud(rng, 80, 7);
  const auto pca = fit_pca(x, 3);
  EXPECT_LT((pca.basis.transpose() * pca.basis - Eigen::Matrix3f::Identity()).cwiseAbs().maxCoeff(), 1e-5f);
  for (int j = 0; j < 3; ++j) {
    Eigen::Index arg;
    pca.basis.col(j).cwiseAbs().maxCoeff(&arg);
    EXPECT_GT(pca.basis(arg, j), 0.0f);
    if (j > 0) EXPECT_GE(pca.explained_variance[j - 1], pca.explained_variance[j]);
    EXPECT_GE(pca.explained_variance[j], 0.0f);
  }
  EXPECT_LT(pca_project(pca, MatF(pca.mean.transpose())).cwiseAbs().maxCoeff(), 1e-6f);
  const MatF y = gaussian_cloud(rng, 10, 3);
  EXPECT_LT((pca_project(pca, pca_lift(pca, y)) - y).cwiseAbs().maxCoeff(), 1e-5f);
  EXPECT_THROW(pca_project(pca, MatF::Ones(2, 6)), ValidationError);
  EXPECT_THROW(pca_lift(pca, MatF::Ones(2, 4)), ValidationError);
}

TEST(Pca, ReconstructionErrorNonIncreasingInDimension) {
  SynthOptions opt;
  opt.n_classes = 10;
  opt.splats_per_class = 40;
  opt.n_cameras = 4;
  opt.height = opt.width = 32;
  opt.dim = 32;
  opt.feature_noise = 0.2;
  const auto s = generate_synthetic_scene(opt);
  const MatF x = pooled_pixel_features(s.views);
  double last = std::numeric_limits<double>::infinity();
  for (int d : {2, 4, 8, 16}) {
    const double err = reconstruction_error(fit_pca(x, d), x);
    EXPECT_LE(err, last * (1.0 + 1e-6));
    last = err;
  }
}

TEST(Pca, RejectsDegenerateInput) {
  EXPECT_THROW(fit_pca(MatF::Ones(3, 4), 3), ValidationError);     // N <= d
  EXPECT_THROW(fit_pca(MatF::Ones(10, 4), 2), ValidationError);    // zero variance
  EXPECT_THROW(fit_pca(MatF::Random(10, 4), 5), ValidationError);  // d > D
}

// ---------------------------------------------------------------------------
// Cosine k-means

TEST(KMeans, AntipodalClustersSeparate) {
  Rng rng(6);
  MatF centers(2, 4);
  centers << 1, 0, 0, 0, -1, 0, 0, 0;
  const MatF x = clustered(rng, centers, 20, 0.05);
  const auto r = cosine_kmeans(x, 2, 0);
  std::vector<int> truth(40);
  for (int i = 0; i < 40; ++i) truth[i] = i / 20;
  EXPECT_TRUE(same_partition(r.assignments, truth));
}

TEST(KMeans, OneClusterPerPointHasZeroObjective) {
  Rng rng(7);
  const MatF x = gaussian_cloud(rng, 6, 3);
  const auto r = cosine_kmeans(x, 6, 1);
  EXPECT_EQ(std::set<int>(r.assignments.begin(), r.assignments.end()).size(), 6u);
  EXPECT_NEAR(r.objective_trace.back(), 0.0, 1e-12);
  EXPECT_THROW(cosine_kmeans(x, 7, 1), ValidationError);
}

TEST(KMeans, FourPlanarVectorsMatchBruteForce) {
  MatF x(4, 2);
  const double deg = std::numbers::pi / 180.0;
  const std::array<double, 4> angles{0.0, 5.0, 180.0, 185.0};
  for (int i = 0; i < 4; ++i) x.row(i) << float(std::cos(angles[i] * deg)), float(std::sin(angles[i] * deg));

  // Oracle: every 2-partition, scored by distortion to the normalized means.
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> best_labels;
  for (int mask = 1; mask < 15; ++mask) {
    std::vector<int> labels(4);
    for (int i = 0; i < 4; ++i) labels[i] = (mask >> i) & 1;
    double cost = 0.0;
    for (int c = 0; c < 2; ++c) {
      Eigen::RowVector2d m = Eigen::RowVector2d::Zero();
      for (int i = 0; i < 4; ++i)
        if (labels[i] == c) m += x.row(i).cast<double>();
      if (m.norm() == 0.0) continue;
      m.normalize();
      for (int i = 0; i < 4; ++i)
        if (labels[i] == c) cost += 1.0 - x.row(i).cast<double>().dot(m);
    }
    if (cost < best - 1e-12) {
      best = cost;
      best_labels = labels;
    }
  }
  const auto r = cosine_kmeans(x, 2, 3);
  EXPECT_TRUE(same_partition(r.assignments, best_labels));
  EXPECT_TRUE(same_partition(r.assignments, {0, 0, 1, 1}));
  for (int c = 0; c < 2; ++c) {
    const int a = r.assignments[0] == c ? 0 : 2;
    EXPECT_LT((r.centroids.row(c) - 0.5f * (x.row(a) + x.row(a + 1))).norm(), 1e-6f);
  }
}

TEST(KMeansProperty, ObjectiveMonotoneAndAssignmentsOptimal) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const MatF x = gaussian_cloud(rng, 120, 6);
    const int k = 2 + trial % 5;
    const auto r = cosine_kmeans(x, k, trial);
    for (std::size_t t = 1; t < r.objective_trace.size(); ++t)
      EXPECT_LE(r.objective_trace[t], r.objective_trace[t - 1] + 1e-9);
    // At convergence each point's direction centroid (normalized mean of the
    // unit members) maximizes cosine among all of them.
    MatF cn = MatF::Zero(k, x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) cn.row(r.assignments[i]) += x.row(i).normalized();
    cn.rowwise().normalize();
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const Eigen::RowVectorXf xi = x.row(i).normalized();
      const float own = xi.dot(cn.row(r.assignments[i]));
      for (int j = 0; j < k; ++j) EXPECT_LE(xi.dot(cn.row(j)), own + 1e-5f);
    }
  }
}

TEST(KMeansProperty, ScaleInvariantAssignmentsAndHomogeneousCentroids) {
  Rng rng(9);
  const MatF x = gaussian_cloud(rng, 90, 5);
  const auto a = cosine_kmeans(x, 4, 11);
  const auto b = cosine_kmeans(MatF(2.0f * x), 4, 11);
  EXPECT_EQ(a.assignments, b.assignments);
  EXPECT_LT((b.centroids - 2.0f * a.centroids).cwiseAbs().maxCoeff(), 1e-5f);
  const auto c = cosine_kmeans(x, 4, 11);
  EXPECT_EQ(a.assignments, c.assignments);
  EXPECT_EQ(a.centroids, c.centroids);
}

// ---------------------------------------------------------------------------
// Silhouette

TEST(Silhouette, FarSeparatedClustersScoreHigh) {
  Rng rng(10);
  MatF centers(2, 3);
  centers << 1, 0, 0, 0, 1, 0;
  const MatF x = clustered(rng, centers, 30, 0.01);
  std::vector<int> labels(60);
  for (int i = 0; i < 60; ++i) labels[i] = i / 30;
  EXPECT_GT(silhouette_score(x, labels), 0.9);
}

TEST(Silhouette, IdenticalPointsScoreZero) {
  const MatF x = MatF::Ones(6, 3);
  const std::vector<int> labels{0, 0, 0, 1, 1, 1};
  EXPECT_EQ(silhouette_score(x, labels), 0.0);
  EXPECT_THROW(silhouette_score(x, std::vector<int>(6, 0)), ValidationError);
}

TEST(Silhouette, MatchesDirectComputation) {
  Rng rng(11);
  const MatF x = gaussian_cloud(rng, 25, 4);
  std::vector<int> labels(25);
  for (auto& l : labels) l = int(rng.index(3));
  labels[0] = 0;
  labels[1] = 1;
  labels[2] = 2;
  double total = 0.0;
  for (int i = 0; i < 25; ++i) {
    std::array<double, 3> sum{}, cnt{};
    for (int j = 0; j < 25; ++j) {
      if (i == j) continue;
      const double c = x.row(i).cast<double>().normalized().dot(x.row(j).cast<double>().normalized());
      sum[labels[j]] += 1.0 - c;
      cnt[labels[j]] += 1.0;
    }
    if (cnt[labels[i]] == 0) continue;
    const double a = sum[labels[i]] / cnt[labels[i]];
    double b = std::numeric_limits<double>::infinity();
    for (int l = 0; l < 3; ++l)
      if (l != labels[i] && cnt[l] > 0) b = std::min(b, sum[l] / cnt[l]);
    total += (b - a) / std::max(a, b);
  }
  EXPECT_NEAR(silhouette_score(x, labels), total / 25.0, 1e-6);
}

TEST(SilhouetteProperty, BoundedAndScaleInvariant) {
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const MatF x = gaussian_cloud(rng, 40, 3);
    std::vector<int> labels(40);
    for (auto& l : labels) l = int(rng.index(4));
    labels[0] = 0;
    labels[1] = 1;
    const double s = silhouette_score(x, labels);
    EXPECT_GE(s, -1.0);
    EXPECT_LE(s, 1.0);
    EXPECT_NEAR(silhouette_score(MatF(3.0f * x), labels), s, 1e-6);
  }
}

// ---------------------------------------------------------------------------
// Codebook size selection

TEST(CodebookSize, DegenerateRangeAndTwoClasses) {
  Rng rng(13);
  const MatF x = gaussian_cloud(rng, 30, 4);
  EXPECT_EQ(select_codebook_size(x, 5, 5, 0), 5);
  MatF centers(2, 4);
  centers << 1, 0, 0, 0, 0, 0, 1, 0;
  EXPECT_EQ(select_codebook_size(clustered(rng, centers, 15, 0.05), 2, 8, 0), 2);
  EXPECT_THROW(select_codebook_size(x, 1, 4, 0), ValidationError);
  EXPECT_THROW(select_codebook_size(x, 2, 31, 0), ValidationError);
}

TEST(CodebookSize, EightSeparatedClassesFromGenerator) {
  SynthOptions opt;
  opt.n_classes = 8;
  opt.splats_per_class = 60;
  opt.n_cameras = 8;
  opt.height = opt.width = 32;
  opt.dim = 32;
  opt.feature_noise = 0.1;
  auto s = generate_synthetic_scene(opt);
  const MatF feats = pooled_mask_features(s.views);
  const auto sel = select_codebook_size_detailed(feats, 2, 16, 0);
  EXPECT_EQ(sel.n_clusters, 8);
  // Entries line up with the class embeddings.
  const Codebook cb = init_codebook(feats, 2, 16, 0);
  ASSERT_EQ(cb.size(), 8);
  const MatF vocab = vocab_matrix(s.scene);
  for (Eigen::Index c = 0; c < vocab.rows(); ++c) {
    float best = -1.0f;
    for (Eigen::Index j = 0; j < cb.entries.rows(); ++j)
      best = std::max(best, vocab.row(c).dot(cb.entries.row(j).normalized()));
    EXPECT_GE(best, 0.99f) << "class " << c;
  }
}

TEST(CodebookInit, DeterministicForFixedSeed) {
  Rng rng(14);
  const MatF x = gaussian_cloud(rng, 50, 6);
  const auto a = init_codebook(x, 2, 6, 3), b = init_codebook(x, 2, 6, 3);
  EXPECT_EQ(a.entries, b.entries);
}

// ---------------------------------------------------------------------------
// Whole-scene preprocessing

TEST(PreprocessViews, LdMapsAreProjectedLanguageMaps) {
  SynthOptions opt;
  opt.n_classes = 4;
  opt.splats_per_class = 60;
  opt.n_cameras = 3;
  opt.height = opt.width = 24;
  opt.dim = 16;
  auto s = generate_synthetic_scene(opt);
  const auto res = preprocess_views(s.views, 4, 2, 0, 0);
  EXPECT_EQ(res.pca.output_dim(), 4);
  EXPECT_EQ(res.codebook.size(), 4);
  for (const auto& v : s.views) {
    ASSERT_EQ(v.ld_map.rows(), static_cast<Eigen::Index>(v.pixel_count()));
    const auto lang = assemble_language_map(v.masks, v.mask_features);
    const MatF want = pca_project(res.pca, lang.values);
    for (std::size_t p = 0; p < v.pixel_count(); ++p) {
      const auto i = static_cast<Eigen::Index>(p);
      if (v.masks[p] < 0)
        EXPECT_EQ(v.ld_map.row(i).cwiseAbs().sum(), 0.0f);
      else
        EXPECT_EQ(v.ld_map.row(i), want.row(i));
    }
  }
}
