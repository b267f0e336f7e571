#pragma once

// Open-vocabulary queries against a trained checkpoint, segmentation metrics
// and per-entry attention heatmaps.

#include "train.hpp"

namespace gaff {

struct TextQuery {
  std::string name;
  VecF embedding;  // unit norm
};

inline TextQuery vocab_query(const VocabEntry& v) {
  return {v.name, Eigen::Map<const VecF>(v.embedding.data(), static_cast<Eigen::Index>(v.embedding.size()))};
}

inline TextQuery query_from_vocab(const SceneModel& scene, const std::string& name) {
  for (const auto& v : scene.vocab)
    if (v.name == name) return vocab_query(v);
  std::string known;
  for (const auto& v : scene.vocab) known += (known.empty() ? "" : ", ") + v.name;
  throw ValidationError("unknown query '" + name + "'; vocabulary: " + (known.empty() ? "(empty)" : known));
}

// Raw embeddings are normalized; zero or non-finite vectors are rejected.
inline TextQuery query_from_embedding(std::string name, const VecF& embedding, int expected_dim) {
  if (embedding.size() != expected_dim)
    throw ValidationError("query embedding has dimension " + std::to_string(embedding.size()) + ", expected " +
                          std::to_string(expected_dim));
  require(embedding.allFinite(), "query embedding contains non-finite values");
  const double n = embedding.cast<double>().norm();
  require(n > 0.0, "query embedding is zero");
  return {std::move(name), (embedding.cast<double>() / n).cast<float>()};
}

inline TextQuery load_query_embedding(const fs::path& path, int expected_dim) {
  const Tensor t = read_tensor(path);
  return query_from_embedding(path.stem().string(), Eigen::Map<const VecF>(t.data.data(), static_cast<Eigen::Index>(t.numel())),
                              expected_dim);
}

inline float cosine(const VecF& a, const VecF& b) {
  const double den = a.cast<double>().norm() * b.cast<double>().norm() + kCosineEps;
  return static_cast<float>(a.cast<double>().dot(b.cast<double>()) / den);
}

// ---------------------------------------------------------------------------
// Per-camera evaluation cache

// Everything a 2D query needs from one camera: the rendered LD map, the
// attention output per pixel and the covered pixels.
struct CameraLanguage {
  int height = 0;
  int width = 0;
  MatF weights;                       // H*W x N_c
  MatF lhat;                          // H*W x D
  std::vector<std::uint8_t> covered;  // semantic accumulated weight >= 0.5
};

inline const AttentionHead<float>& require_head(const Checkpoint& ck) {
  if (ck.stage != Stage::Stage2 || !ck.head) throw ValidationError("querying requires a stage-2 checkpoint");
  return *ck.head;
}

inline CameraLanguage camera_language(const Checkpoint& ck, const Camera& cam, const MatF& ld_features) {
  const auto& head = require_head(ck);
  const auto out = render_features<float>(ck.scene.splats, cam, ld_features, ck.semantic_opacity_kind());
  CameraLanguage c;
  c.height = cam.height;
  c.width = cam.width;
  const auto att = attention_forward(head, out.image);
  c.weights = att.weights;
  c.lhat = att.lhat;
  c.covered.resize(out.pixel_count());
  for (std::size_t p = 0; p < c.covered.size(); ++p) c.covered[p] = out.accum_weight[p] >= 0.5f ? 1 : 0;
  return c;
}

inline CameraLanguage camera_language(const Checkpoint& ck, const Camera& cam) {
  return camera_language(ck, cam, ck.ld_features());
}

// ---------------------------------------------------------------------------
// 2D

inline constexpr double kDefaultRelativeThreshold = 0.6;

struct QueryResult2D {
  int height = 0;
  int width = 0;
  std::vector<float> scores;        // cosine; -1 where not covered
  std::vector<std::uint8_t> mask;
  int argmax_row = 0;
  int argmax_col = 0;

  std::size_t argmax_index() const { return static_cast<std::size_t>(argmax_row) * width + argmax_col; }
};

inline QueryResult2D query_2d(const CameraLanguage& lang, const TextQuery& query,
                              double tau_rel = kDefaultRelativeThreshold) {
  require(lang.lhat.cols() == query.embedding.size(), "query_2d: embedding dimension mismatch");
  require(tau_rel >= 0.0 && tau_rel <= 1.0, "query_2d: relative threshold must lie in [0, 1]");
  QueryResult2D r;
  r.height = lang.height;
  r.width = lang.width;
  const std::size_t n = lang.covered.size();
  r.scores.assign(n, -1.0f);
  r.mask.assign(n, 0);
  std::optional<std::size_t> best;
  for (std::size_t p = 0; p < n; ++p) {
    if (!lang.covered[p]) continue;
    r.scores[p] = cosine(lang.lhat.row(static_cast<Eigen::Index>(p)).transpose(), query.embedding);
    if (!best || r.scores[p] > r.scores[*best]) best = p;
  }
  if (!best) throw ValidationError("query_2d: no covered pixels in this view");
  const float max_score = r.scores[*best];
  const float threshold = static_cast<float>(tau_rel) * max_score;
  for (std::size_t p = 0; p < n; ++p) r.mask[p] = lang.covered[p] && r.scores[p] >= threshold ? 1 : 0;
  r.argmax_row = static_cast<int>(*best / static_cast<std::size_t>(lang.width));
  r.argmax_col = static_cast<int>(*best % static_cast<std::size_t>(lang.width));
  return r;
}

inline QueryResult2D query_2d(const Checkpoint& ck, const Camera& cam, const TextQuery& query,
                              double tau_rel = kDefaultRelativeThreshold) {
  return query_2d(camera_language(ck, cam), query, tau_rel);
}

// ---------------------------------------------------------------------------
// 3D

inline constexpr double kDefaultKappa = 1.0;
inline constexpr double kDefaultScoreFloor = 0.2;

struct QueryResult3D {
  std::vector<float> scores;  // per splat
  std::vector<bool> selection;
  std::vector<std::vector<std::uint8_t>> coverage;  // per camera, empty when not rendered

  std::size_t selected_count() const { return static_cast<std::size_t>(std::count(selection.begin(), selection.end(), true)); }
};

// Selection from per-splat language features: score >= mean + kappa * std
// and score >= floor.
inline QueryResult3D select_splats(const MatF& splat_language, const TextQuery& query, double kappa = kDefaultKappa,
                                   double floor = kDefaultScoreFloor) {
  require(splat_language.cols() == query.embedding.size(), "query_3d: embedding dimension mismatch");
  QueryResult3D r;
  const auto n = static_cast<std::size_t>(splat_language.rows());
  r.scores.resize(n);
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    r.scores[i] = cosine(splat_language.row(static_cast<Eigen::Index>(i)).transpose(), query.embedding);
    sum += r.scores[i];
  }
  const double mean = n ? sum / static_cast<double>(n) : 0.0;
  for (float s : r.scores) sum_sq += (s - mean) * (s - mean);
  const double sd = n ? std::sqrt(sum_sq / static_cast<double>(n)) : 0.0;
  const double cut = std::max(mean + kappa * sd, floor);
  r.selection.resize(n);
  for (std::size_t i = 0; i < n; ++i) r.selection[i] = r.scores[i] >= cut;
  return r;
}

inline MatF splat_language(const Checkpoint& ck) { return per_gaussian_language(require_head(ck), ck.ld_features()); }

// Renders the selection into every camera listed in `cameras` (all when empty).
inline void render_selection(const Checkpoint& ck, QueryResult3D& r, const std::vector<std::size_t>& cameras = {}) {
  r.coverage.assign(ck.scene.cameras.size(), {});
  auto render_one = [&](std::size_t c) {
    r.coverage[c] = render_selected(ck.scene.splats, ck.scene.cameras[c], r.selection).coverage;
  };
  if (cameras.empty()) {
    for (std::size_t c = 0; c < ck.scene.cameras.size(); ++c) render_one(c);
  } else {
    for (std::size_t c : cameras) {
      require(c < ck.scene.cameras.size(), "query_3d: camera index out of range");
      render_one(c);
    }
  }
}

inline QueryResult3D query_3d(const Checkpoint& ck, const TextQuery& query, double kappa = kDefaultKappa,
                              double floor = kDefaultScoreFloor, const std::vector<std::size_t>& cameras = {}) {
  QueryResult3D r = select_splats(splat_language(ck), query, kappa, floor);
  render_selection(ck, r, cameras);
  return r;
}

// ---------------------------------------------------------------------------
// Metrics

inline double miou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  require(pred.size() == gt.size(), "miou: mask size mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += (pred[i] && gt[i]) ? 1 : 0;
    uni += (pred[i] || gt[i]) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double localization_acc(std::span<const QueryResult2D> results,
                               std::span<const std::vector<std::uint8_t>> gt_masks) {
  require(results.size() == gt_masks.size(), "localization_acc: one ground-truth mask per query required");
  if (results.empty()) throw ValidationError("localization_acc: empty query set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    require(gt_masks[i].size() == results[i].scores.size(), "localization_acc: mask size mismatch");
    hits += gt_masks[i][results[i].argmax_index()] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

inline double acc_at_025(std::span<const double> ious) {
  if (ious.empty()) throw ValidationError("acc_at_025: empty query set");
  const auto hits = std::count_if(ious.begin(), ious.end(), [](double v) { return v >= 0.25; });
  return static_cast<double>(hits) / static_cast<double>(ious.size());
}

inline std::vector<std::uint8_t> class_mask(const ViewSupervision& v, int class_id) {
  require(!v.class_map.empty(), "ground-truth class map missing");
  std::vector<std::uint8_t> m(v.class_map.size());
  for (std::size_t p = 0; p < m.size(); ++p) m[p] = v.class_map[p] == class_id ? 1 : 0;
  return m;
}

// ---------------------------------------------------------------------------
// Evaluation over the whole vocabulary

struct EvalOptions {
  double tau_rel = kDefaultRelativeThreshold;
  double kappa = kDefaultKappa;
  double floor = kDefaultScoreFloor;
};

struct EvalRow {
  std::string query;
  std::string mode;  // "2d" or "3d"
  int camera = -1;   // -1 for the per-query 3D summary row
  double iou = 0.0;
  int hit = 0;       // 2D: argmax inside GT; 3D: IoU >= 0.25
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double miou_2d = 0.0;
  double acc_2d = 0.0;
  double miou_3d = 0.0;
  double acc025_3d = 0.0;

  std::string to_csv() const {
    std::string out = "query,mode,camera,iou,hit\n";
    for (const auto& r : rows)
      out += r.query + "," + r.mode + "," + std::to_string(r.camera) + "," + format_double(r.iou) + "," +
             std::to_string(r.hit) + "\n";
    out += "mean,2d,-1," + format_double(miou_2d) + "," + format_double(acc_2d) + "\n";
    out += "mean,3d,-1," + format_double(miou_3d) + "," + format_double(acc025_3d) + "\n";
    return out;
  }
};

// Vocabulary entry c is the query for ground-truth class c. A 2D item is a
// (query, view) pair whose GT mask is nonempty; the 3D IoU of a query is its
// mean over those views.
inline EvalReport evaluate(const Checkpoint& ck, std::span<const ViewSupervision> views, const EvalOptions& opt = {}) {
  require(views.size() == ck.scene.cameras.size(), "evaluate: need one supervision view per camera");
  require(!ck.scene.vocab.empty(), "evaluate: the scene has no vocabulary");
  const MatF ld = ck.ld_features();
  std::vector<CameraLanguage> langs;
  for (const auto& cam : ck.scene.cameras) langs.push_back(camera_language(ck, cam, ld));
  const MatF splat_lang = per_gaussian_language(require_head(ck), ld);

  EvalReport rep;
  std::vector<QueryResult2D> results_2d;
  std::vector<std::vector<std::uint8_t>> gts_2d;
  std::vector<double> ious_2d, ious_3d;
  for (std::size_t c = 0; c < ck.scene.vocab.size(); ++c) {
    const TextQuery q = vocab_query(ck.scene.vocab[c]);
    QueryResult3D r3 = select_splats(splat_lang, q, opt.kappa, opt.floor);
    std::vector<std::size_t> cams;
    for (std::size_t v = 0; v < views.size(); ++v) {
      auto gt = class_mask(views[v], static_cast<int>(c));
      if (std::none_of(gt.begin(), gt.end(), [](auto x) { return x != 0; })) continue;
      cams.push_back(v);
      auto r2 = query_2d(langs[v], q, opt.tau_rel);
      const double iou = miou(r2.mask, gt);
      const int hit = gt[r2.argmax_index()] ? 1 : 0;
      rep.rows.push_back({q.name, "2d", static_cast<int>(v), iou, hit});
      ious_2d.push_back(iou);
      results_2d.push_back(std::move(r2));
      gts_2d.push_back(std::move(gt));
    }
    if (cams.empty()) continue;
    render_selection(ck, r3, cams);
    double sum = 0.0;
    for (std::size_t v : cams) {
      const double iou = miou(r3.coverage[v], class_mask(views[v], static_cast<int>(c)));
      rep.rows.push_back({q.name, "3d", static_cast<int>(v), iou, iou >= 0.25 ? 1 : 0});
      sum += iou;
    }
    const double mean = sum / static_cast<double>(cams.size());
    rep.rows.push_back({q.name, "3d", -1, mean, mean >= 0.25 ? 1 : 0});
    ious_3d.push_back(mean);
  }
  require(!ious_2d.empty(), "evaluate: no query has a nonempty ground-truth mask");
  rep.miou_2d = std::accumulate(ious_2d.begin(), ious_2d.end(), 0.0) / static_cast<double>(ious_2d.size());
  rep.acc_2d = localization_acc(results_2d, gts_2d);
  rep.miou_3d = std::accumulate(ious_3d.begin(), ious_3d.end(), 0.0) / static_cast<double>(ious_3d.size());
  rep.acc025_3d = acc_at_025(ious_3d);
  return rep;
}

// ---------------------------------------------------------------------------
// Per-entry heatmaps

// Column j of the attention over covered pixels, min-max normalized; zero
// elsewhere.
inline std::vector<float> entry_heatmap(const CameraLanguage& lang, Eigen::Index entry) {
  require(entry >= 0 && entry < lang.weights.cols(), "entry_heatmap: entry out of range");
  const std::size_t n = lang.covered.size();
  float lo = std::numeric_limits<float>::infinity(), hi = -lo;
  for (std::size_t p = 0; p < n; ++p)
    if (lang.covered[p]) {
      lo = std::min(lo, lang.weights(static_cast<Eigen::Index>(p), entry));
      hi = std::max(hi, lang.weights(static_cast<Eigen::Index>(p), entry));
    }
  std::vector<float> out(n, 0.0f);
  if (!(hi > lo)) {
    // Constant column: saturated if the entry carries weight, blank otherwise.
    if (hi > 0.0f)
      for (std::size_t p = 0; p < n; ++p) out[p] = lang.covered[p] ? 1.0f : 0.0f;
    return out;
  }
  for (std::size_t p = 0; p < n; ++p)
    if (lang.covered[p]) out[p] = (lang.weights(static_cast<Eigen::Index>(p), entry) - lo) / (hi - lo);
  return out;
}

// Covered pixels where A[:, j] >= 0.5 * max over covered pixels.
inline std::vector<std::uint8_t> entry_region(const CameraLanguage& lang, Eigen::Index entry, float max_weight = -1.0f) {
  const std::size_t n = lang.covered.size();
  if (max_weight < 0.0f) {
    max_weight = 0.0f;
    for (std::size_t p = 0; p < n; ++p)
      if (lang.covered[p]) max_weight = std::max(max_weight, lang.weights(static_cast<Eigen::Index>(p), entry));
  }
  std::vector<std::uint8_t> out(n, 0);
  for (std::size_t p = 0; p < n; ++p)
    out[p] = lang.covered[p] && max_weight > 0.0f && lang.weights(static_cast<Eigen::Index>(p), entry) >= 0.5f * max_weight;
  return out;
}

// entry_<j>_heatmap.ppm and entry_<j>_masked.ppm for every codebook entry.
inline void add_entry_heatmaps(FileSet& files, const Checkpoint& ck, const Camera& cam, const fs::path& out_dir) {
  const CameraLanguage lang = camera_language(ck, cam);
  const Image rgb = to_image(render_color<float>(ck.scene, cam));
  char name[64];
  for (Eigen::Index j = 0; j < lang.weights.cols(); ++j) {
    std::snprintf(name, sizeof(name), "entry_%02d_heatmap.ppm", static_cast<int>(j));
    files.add(out_dir / name, encode_ppm(heatmap_to_image(cam.height, cam.width, entry_heatmap(lang, j))));
    const auto region = entry_region(lang, j);
    Image masked = rgb;
    for (std::size_t p = 0; p < region.size(); ++p)
      if (!region[p])
        for (int k = 0; k < 3; ++k) masked.rgb[p * 3 + k] = 0.0f;
    std::snprintf(name, sizeof(name), "entry_%02d_masked.ppm", static_cast<int>(j));
    files.add(out_dir / name, encode_ppm(masked));
  }
}

inline std::vector<fs::path> export_entry_heatmaps(const Checkpoint& ck, const Camera& cam, const fs::path& out_dir) {
  FileSet files;
  add_entry_heatmaps(files, ck, cam, out_dir);
  files.commit(true);
  std::vector<fs::path> written;
  for (const auto& f : files.files()) written.push_back(f.first);
  return written;
}

}  // namespace gaff
