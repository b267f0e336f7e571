#pragma once

// Language-map assembly, PCA to the low-dimensional (LD) feature space, and
// codebook initialization by cosine k-means with a silhouette-selected size.

#include <map>
#include <numeric>
#include <span>

#include "common.hpp"
#include "scene.hpp"

namespace gaff {

// ---------------------------------------------------------------------------
// Per-view language maps

struct LanguageMap {
  MatF values;                        // (H*W) x D; zero rows where unsupervised
  std::vector<std::uint8_t> supervised;  // H*W
};

inline LanguageMap assemble_language_map(std::span<const std::int32_t> masks, const MatF& features) {
  LanguageMap map;
  map.values = MatF::Zero(static_cast<Eigen::Index>(masks.size()), features.cols());
  map.supervised.assign(masks.size(), 0);
  for (std::size_t p = 0; p < masks.size(); ++p) {
    const std::int32_t id = masks[p];
    if (id < 0) continue;
    if (id >= features.rows())
      throw ValidationError("mask id " + std::to_string(id) + " out of range for " +
                            std::to_string(features.rows()) + " features");
    map.values.row(static_cast<Eigen::Index>(p)) = features.row(id);
    map.supervised[p] = 1;
  }
  return map;
}

// ---------------------------------------------------------------------------
// PCA

struct PCAProjection {
  VecF mean;                // D
  MatF basis;               // D x d, orthonormal columns
  VecF explained_variance;  // d, descending

  int input_dim() const { return static_cast<int>(basis.rows()); }
  int output_dim() const { return static_cast<int>(basis.cols()); }
};

struct SymmetricEigen {
  Eigen::VectorXd values;   // descending
  Eigen::MatrixXd vectors;  // columns
};

// Cyclic Jacobi rotations on a symmetric matrix. Handles repeated and zero
// eigenvalues, which deflated power iteration does not.
inline SymmetricEigen jacobi_eigen(Eigen::MatrixXd a, int max_sweeps = 64) {
  const Eigen::Index n = a.rows();
  require(a.cols() == n, "jacobi_eigen: matrix must be square");
  Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n);
  const double scale = std::max(a.norm(), 1e-300);

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(off) <= 1e-15 * scale) break;

    for (Eigen::Index p = 0; p < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {  // A <- A J
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {  // A <- J^T A
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return a(i, i) > a(j, j); });
  SymmetricEigen out{Eigen::VectorXd(n), Eigen::MatrixXd(n, n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    out.values[i] = a(order[i], order[i]);
    out.vectors.col(i) = v.col(order[i]);
  }
  return out;
}

// Sample covariance of the rows (N - 1 normalization) and the column mean.
inline std::pair<Eigen::VectorXd, Eigen::MatrixXd> covariance(const MatF& x) {
  const Eigen::MatrixXd xd = x.cast<double>();
  const Eigen::VectorXd mean = xd.colwise().mean().transpose();
  const Eigen::MatrixXd centered = xd.rowwise() - mean.transpose();
  Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(x.rows() - 1);
  return {mean, cov};
}

// Top-d principal directions of the rows of `features`. Each basis column has
// its largest-magnitude component positive.
inline PCAProjection fit_pca(const MatF& features, int d) {
  require(d >= 1, "fit_pca: target dimension must be >= 1");
  require(d <= features.cols(), "fit_pca: target dimension exceeds the feature dimension");
  require(features.rows() > d, "fit_pca: need more samples (" + std::to_string(features.rows()) +
                                   ") than target dimensions (" + std::to_string(d) + ")");
  require(features.allFinite(), "fit_pca: non-finite features");
  const auto [mean, cov] = covariance(features);
  require(cov.trace() > 0.0, "fit_pca: features have zero variance");

  const SymmetricEigen eig = jacobi_eigen(cov);
  PCAProjection pca;
  pca.mean = mean.cast<float>();
  pca.basis.resize(features.cols(), d);
  pca.explained_variance.resize(d);
  for (int j = 0; j < d; ++j) {
    Eigen::VectorXd col = eig.vectors.col(j);
    Eigen::Index arg = 0;
    col.cwiseAbs().maxCoeff(&arg);
    if (col[arg] < 0) col = -col;
    pca.basis.col(j) = col.cast<float>();
    pca.explained_variance[j] = static_cast<float>(std::max(eig.values[j], 0.0));
  }
  return pca;
}

// Rows of x (N x D) -> N x d.
inline MatF pca_project(const PCAProjection& pca, const MatF& x) {
  require(x.cols() == pca.input_dim(), "pca_project: expected " + std::to_string(pca.input_dim()) + " columns");
  return (x.rowwise() - pca.mean.transpose()) * pca.basis;
}

// Rows of y (N x d) -> N x D.
inline MatF pca_lift(const PCAProjection& pca, const MatF& y) {
  require(y.cols() == pca.output_dim(), "pca_lift: expected " + std::to_string(pca.output_dim()) + " columns");
  return (y * pca.basis.transpose()).rowwise() + pca.mean.transpose();
}

// ---------------------------------------------------------------------------
// Cosine k-means

struct KMeansResult {
  std::vector<int> assignments;
  MatF centroids;                       // k x D arithmetic means of the raw members
  std::vector<double> objective_trace;  // sum of (1 - cos) after each assignment step
  int iterations = 0;

  double objective() const { return objective_trace.empty() ? 0.0 : objective_trace.back(); }
};

namespace detail {

inline Eigen::MatrixXd normalized_rows(const MatF& x) {
  Eigen::MatrixXd out = x.cast<double>();
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    require(n > 0.0, "cosine k-means: zero feature vector at row " + std::to_string(i));
    out.row(i) /= n;
  }
  return out;
}

// k-means++ seeding on cosine distance.
inline Eigen::MatrixXd seed_centers(const Eigen::MatrixXd& xn, int k, Rng& rng) {
  const Eigen::Index n = xn.rows();
  std::vector<Eigen::Index> chosen{static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n)))};
  std::vector<double> dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  std::vector<bool> taken(static_cast<std::size_t>(n), false);
  taken[chosen[0]] = true;
  while (static_cast<int>(chosen.size()) < k) {
    const auto last = xn.row(chosen.back());
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      dist[i] = std::min(dist[i], std::max(0.0, 1.0 - xn.row(i).dot(last)));
      if (!taken[i]) total += dist[i] * dist[i];
    }
    Eigen::Index pick = -1;
    if (total > 0.0) {
      double r = rng.uniform() * total;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (taken[i]) continue;
        r -= dist[i] * dist[i];
        pick = i;
        if (r < 0.0 && dist[i] > 0.0) break;
      }
    } else {
      std::vector<Eigen::Index> free;
      for (Eigen::Index i = 0; i < n; ++i)
        if (!taken[i]) free.push_back(i);
      pick = free[rng.index(free.size())];
    }
    taken[pick] = true;
    chosen.push_back(pick);
  }
  Eigen::MatrixXd centers(k, xn.cols());
  for (int j = 0; j < k; ++j) centers.row(j) = xn.row(chosen[j]);
  return centers;
}

}  // namespace detail

inline KMeansResult cosine_kmeans(const MatF& features, int k, std::uint64_t seed, int max_iter = 100) {
  const Eigen::Index n = features.rows();
  require(k >= 1, "cosine k-means: k must be >= 1");
  require(k <= n, "cosine k-means: k = " + std::to_string(k) + " exceeds the number of points " + std::to_string(n));
  require(features.allFinite(), "cosine k-means: non-finite features");
  const Eigen::MatrixXd xn = detail::normalized_rows(features);
  Rng rng(derive_seed(seed, "kmeans/seed"));
  Eigen::MatrixXd centers = detail::seed_centers(xn, k, rng);

  KMeansResult res;
  res.assignments.assign(static_cast<std::size_t>(n), -1);
  std::vector<double> best_cos(static_cast<std::size_t>(n), 0.0);

  // Empty clusters take the member farthest from its own center.
  auto fill_empty = [&](Eigen::MatrixXd& c) {
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (int a : res.assignments) ++counts[a];
    std::vector<bool> moved(static_cast<std::size_t>(n), false);
    for (int j = 0; j < k; ++j) {
      if (counts[j] > 0) continue;
      Eigen::Index far = -1;
      double worst = std::numeric_limits<double>::infinity();
      for (Eigen::Index i = 0; i < n; ++i) {
        if (moved[i] || counts[res.assignments[i]] <= 1) continue;
        const double cs = xn.row(i).dot(c.row(res.assignments[i]));
        if (cs < worst) {
          worst = cs;
          far = i;
        }
      }
      if (far < 0) continue;
      --counts[res.assignments[far]];
      res.assignments[far] = j;
      counts[j] = 1;
      moved[far] = true;
      c.row(j) = xn.row(far);
      best_cos[far] = 1.0;
    }
  };

  std::vector<int> previous;
  for (int iter = 0; iter < max_iter; ++iter) {
    const Eigen::MatrixXd sims = xn * centers.transpose();
    double objective = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      for (int j = 1; j < k; ++j)
        if (sims(i, j) > sims(i, best)) best = j;
      res.assignments[i] = best;
      best_cos[i] = sims(i, best);
      objective += 1.0 - sims(i, best);
    }
    res.objective_trace.push_back(objective);
    res.iterations = iter + 1;
    if (res.assignments == previous) break;

    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, xn.cols());
    for (Eigen::Index i = 0; i < n; ++i) sums.row(res.assignments[i]) += xn.row(i);
    for (int j = 0; j < k; ++j) {
      const double norm = sums.row(j).norm();
      if (norm > 0.0) centers.row(j) = sums.row(j) / norm;
    }
    fill_empty(centers);
    previous = res.assignments;
  }
  fill_empty(centers);

  res.centroids = MatF::Zero(k, features.cols());
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  Eigen::MatrixXd raw = Eigen::MatrixXd::Zero(k, features.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    raw.row(res.assignments[i]) += features.row(i).cast<double>();
    ++counts[res.assignments[i]];
  }
  for (int j = 0; j < k; ++j)
    if (counts[j] > 0) res.centroids.row(j) = (raw.row(j) / counts[j]).cast<float>();
  return res;
}

// Mean silhouette with cosine distance. Singleton members score 0, as does
// the 0/0 case. Above `max_points` a seeded subsample is scored.
inline double silhouette_score(const MatF& features, std::span<const int> assignments, std::size_t max_points = 2000,
                               std::uint64_t seed = 0) {
  require(assignments.size() == static_cast<std::size_t>(features.rows()), "silhouette: assignment count mismatch");
  std::map<int, int> label_index;
  for (int a : assignments) label_index.emplace(a, 0);
  require(label_index.size() >= 2, "silhouette: need at least 2 clusters");

  std::vector<std::size_t> sample(assignments.size());
  std::iota(sample.begin(), sample.end(), std::size_t{0});
  if (sample.size() > max_points) {
    Rng rng(derive_seed(seed, "silhouette/subsample"));
    rng.shuffle(sample);
    sample.resize(max_points);
    std::sort(sample.begin(), sample.end());
  }
  int next = 0;
  for (auto& [label, idx] : label_index) idx = next++;
  const int n_labels = next;

  MatF subset(static_cast<Eigen::Index>(sample.size()), features.cols());
  std::vector<int> label(sample.size());
  for (std::size_t i = 0; i < sample.size(); ++i) {
    subset.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(sample[i]));
    label[i] = label_index[assignments[sample[i]]];
  }
  const Eigen::MatrixXd xn = detail::normalized_rows(subset);
  std::vector<int> counts(static_cast<std::size_t>(n_labels), 0);
  for (int l : label) ++counts[l];

  double total = 0.0;
  std::vector<double> sums(static_cast<std::size_t>(n_labels));
  for (std::size_t i = 0; i < sample.size(); ++i) {
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t j = 0; j < sample.size(); ++j) {
      if (i == j) continue;
      double dist = 1.0 - xn.row(static_cast<Eigen::Index>(i)).dot(xn.row(static_cast<Eigen::Index>(j)));
      if (dist < 1e-12) dist = 0.0;
      sums[label[j]] += dist;
    }
    const int own = label[i];
    if (counts[own] <= 1) continue;
    const double a = sums[own] / (counts[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int l = 0; l < n_labels; ++l)
      if (l != own && counts[l] > 0) b = std::min(b, sums[l] / counts[l]);
    if (!std::isfinite(b)) continue;
    const double denom = std::max(a, b);
    if (denom > 0.0) total += (b - a) / denom;
  }
  return total / static_cast<double>(sample.size());
}

struct CodebookSelection {
  int n_clusters = 0;
  std::vector<std::pair<int, double>> scores;  // (k, silhouette)
  KMeansResult clustering;
};

// argmax_k silhouette over [k_min, k_max]; ties go to the smaller k.
inline CodebookSelection select_codebook_size_detailed(const MatF& features, int k_min, int k_max,
                                                       std::uint64_t seed) {
  require(k_min >= 2, "codebook size search: k_min must be >= 2");
  require(k_max >= k_min, "codebook size search: k_max must be >= k_min");
  require(k_max <= features.rows(), "codebook size search: k_max exceeds the number of features");
  CodebookSelection sel;
  double best = -std::numeric_limits<double>::infinity();
  for (int k = k_min; k <= k_max; ++k) {
    KMeansResult km = cosine_kmeans(features, k, seed);
    const double s = silhouette_score(features, km.assignments, 2000, seed);
    sel.scores.emplace_back(k, s);
    if (s > best) {
      best = s;
      sel.n_clusters = k;
      sel.clustering = std::move(km);
    }
  }
  return sel;
}

inline int select_codebook_size(const MatF& features, int k_min, int k_max, std::uint64_t seed) {
  return select_codebook_size_detailed(features, k_min, k_max, seed).n_clusters;
}

struct Codebook {
  MatF entries;  // N_c x D
  int k_min = 2;
  int k_max = 2;
  std::uint64_t seed = 0;

  int size() const { return static_cast<int>(entries.rows()); }
};

inline int default_k_max(Eigen::Index n_features) {
  return static_cast<int>(std::min<Eigen::Index>(32, n_features - 1));
}

inline Codebook init_codebook(const MatF& features, int k_min, int k_max, std::uint64_t seed) {
  const CodebookSelection sel = select_codebook_size_detailed(features, k_min, k_max, seed);
  Codebook cb;
  cb.entries = sel.clustering.centroids;
  cb.k_min = k_min;
  cb.k_max = k_max;
  cb.seed = seed;
  return cb;
}

// ---------------------------------------------------------------------------
// Whole-scene preprocessing

struct PreprocessResult {
  PCAProjection pca;
  Codebook codebook;
  std::vector<std::pair<int, double>> silhouette;
};

// Per-pixel language features of every supervised pixel, pooled over views.
inline MatF pooled_pixel_features(std::span<const ViewSupervision> views) {
  std::size_t n = 0;
  for (const auto& v : views) n += v.supervised_count();
  const Eigen::Index dim = views.empty() ? 0 : views.front().mask_features.cols();
  MatF out(static_cast<Eigen::Index>(n), dim);
  Eigen::Index row = 0;
  for (const auto& v : views) {
    require(v.mask_features.cols() == dim, "views disagree on the feature dimension");
    for (auto id : v.masks)
      if (id >= 0) out.row(row++) = v.mask_features.row(id);
  }
  return out;
}

// One feature per (view, mask) that covers at least one pixel.
inline MatF pooled_mask_features(std::span<const ViewSupervision> views) {
  std::vector<Eigen::VectorXf> rows;
  for (const auto& v : views) {
    std::vector<bool> used(static_cast<std::size_t>(v.mask_features.rows()), false);
    for (auto id : v.masks)
      if (id >= 0) used[static_cast<std::size_t>(id)] = true;
    for (Eigen::Index k = 0; k < v.mask_features.rows(); ++k)
      if (used[static_cast<std::size_t>(k)]) rows.push_back(v.mask_features.row(k).transpose());
  }
  MatF out(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return out;
}

// Fits PCA on pooled pixel features, fills every view's LD map and builds the
// codebook from the per-mask features. k_max <= 0 selects the default range.
inline PreprocessResult preprocess_views(std::vector<ViewSupervision>& views, int d, int k_min, int k_max,
                                         std::uint64_t seed) {
  require(!views.empty(), "preprocess: no views");
  for (const auto& v : views) validate_supervision(v);
  PreprocessResult res;
  res.pca = fit_pca(pooled_pixel_features(views), d);

  for (auto& v : views) {
    const LanguageMap lang = assemble_language_map(v.masks, v.mask_features);
    MatF ld = pca_project(res.pca, lang.values);
    for (std::size_t p = 0; p < lang.supervised.size(); ++p)
      if (!lang.supervised[p]) ld.row(static_cast<Eigen::Index>(p)).setZero();
    v.ld_map = std::move(ld);
  }

  const MatF mask_features = pooled_mask_features(views);
  require(mask_features.rows() >= 3, "preprocess: need at least 3 mask features to build a codebook");
  if (k_max <= 0) k_max = default_k_max(mask_features.rows());
  k_max = std::min<int>(k_max, static_cast<int>(mask_features.rows()) - 1);
  const CodebookSelection sel = select_codebook_size_detailed(mask_features, k_min, k_max, seed);
  res.codebook.entries = sel.clustering.centroids;
  res.codebook.k_min = k_min;
  res.codebook.k_max = k_max;
  res.codebook.seed = seed;
  res.silhouette = sel.scores;
  return res;
}

}  // namespace gaff
