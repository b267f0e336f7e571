#pragma once

// Two-stage optimization.
//
// Stage 1 fits splat appearance photometrically, then distills the LD
// feature maps into the feature field (or free per-splat features) and the
// semantic opacities. Stage 2 freezes everything upstream of the attention
// head and trains the query/key projections and the codebook on sampled
// supervised pixels.

#include <fstream>
#include <functional>
#include <optional>

#include "adam.hpp"
#include "attention.hpp"
#include "field.hpp"
#include "keyvalue.hpp"
#include "losses.hpp"
#include "preprocess.hpp"
#include "raster.hpp"
#include "scene.hpp"

namespace gaff {

enum class FeatureMode { Field, PerGaussian };

struct TrainConfig {
  std::uint64_t seed = 0;
  int stage1_iters = 2000;
  int stage2_iters = 1000;
  int warmup_iters = 500;
  double lambda_ld = 0.01;
  double lambda_entropy = 0.001;
  double photometric_weight = 1.0;
  int pixels_per_iter = 4096;

  double lr_color = 1e-2;
  double lr_opacity = 1e-2;
  double lr_sem_opacity = 1e-2;
  double lr_field = 1e-3;
  double lr_features = 1e-2;
  double lr_attention = 1e-3;
  double lr_codebook = 1e-3;

  int ld_dim = 8;          // d
  int attention_dim = 128;  // d_h
  int field_hidden = 128;
  int n_freq = 6;
  int k_min = 2;
  int k_max = 0;  // 0: min(32, N - 1)

  FeatureMode feature_mode = FeatureMode::Field;
  bool coupled_opacity = false;   // render features with the appearance opacity
  bool freeze_codebook = false;
  bool semantic_color_grad = false;
  bool init_appearance = true;    // reset colors/opacities before stage 1
  double init_opacity = 0.1;
  double init_sem_opacity = 0.1;
};

struct ConfigField {
  std::string_view key;
  std::string_view doc;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, std::string_view)> set;
};

namespace detail {

template <typename T>
ConfigField config_field(std::string_view key, std::string_view doc, T TrainConfig::*member) {
  ConfigField f{key, doc, {}, {}};
  if constexpr (std::is_same_v<T, double>) {
    f.get = [member](const TrainConfig& c) { return format_double(c.*member); };
    f.set = [member, key](TrainConfig& c, std::string_view v) { c.*member = parse_double(v, key); };
  } else if constexpr (std::is_same_v<T, bool>) {
    f.get = [member](const TrainConfig& c) { return std::string(c.*member ? "true" : "false"); };
    f.set = [member, key](TrainConfig& c, std::string_view v) { c.*member = parse_bool(v, key); };
  } else {
    f.get = [member](const TrainConfig& c) { return std::to_string(c.*member); };
    f.set = [member, key](TrainConfig& c, std::string_view v) { c.*member = parse_integer<T>(v, key); };
  }
  return f;
}

}  // namespace detail

inline const std::vector<ConfigField>& train_config_fields() {
  using detail::config_field;
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f{
        config_field("seed", "master seed for every random stream", &TrainConfig::seed),
        config_field("stage1_iters", "stage-1 iterations", &TrainConfig::stage1_iters),
        config_field("stage2_iters", "stage-2 iterations", &TrainConfig::stage2_iters),
        config_field("warmup_iters", "appearance-only iterations at the start of stage 1", &TrainConfig::warmup_iters),
        config_field("lambda_ld", "weight of the LD distillation loss", &TrainConfig::lambda_ld),
        config_field("lambda_entropy", "weight of the attention entropy loss", &TrainConfig::lambda_entropy),
        config_field("photometric_weight", "weight of the photometric loss", &TrainConfig::photometric_weight),
        config_field("pixels_per_iter", "supervised pixels sampled per stage-2 iteration", &TrainConfig::pixels_per_iter),
        config_field("lr_color", "learning rate of splat colors", &TrainConfig::lr_color),
        config_field("lr_opacity", "learning rate of appearance opacity logits", &TrainConfig::lr_opacity),
        config_field("lr_sem_opacity", "learning rate of semantic opacity logits", &TrainConfig::lr_sem_opacity),
        config_field("lr_field", "learning rate of the feature field", &TrainConfig::lr_field),
        config_field("lr_features", "learning rate of free per-splat features", &TrainConfig::lr_features),
        config_field("lr_attention", "learning rate of the query/key projections", &TrainConfig::lr_attention),
        config_field("lr_codebook", "learning rate of the codebook rows", &TrainConfig::lr_codebook),
        config_field("ld_dim", "LD feature dimension d", &TrainConfig::ld_dim),
        config_field("attention_dim", "attention hidden dimension d_h", &TrainConfig::attention_dim),
        config_field("field_hidden", "hidden width of the feature field", &TrainConfig::field_hidden),
        config_field("n_freq", "Fourier frequencies of the position encoding", &TrainConfig::n_freq),
        config_field("k_min", "smallest codebook size searched", &TrainConfig::k_min),
        config_field("k_max", "largest codebook size searched (0 = min(32, N-1))", &TrainConfig::k_max),
        config_field("coupled_opacity", "render features with the appearance opacity (ablation)",
                     &TrainConfig::coupled_opacity),
        config_field("freeze_codebook", "keep codebook rows at their initialization", &TrainConfig::freeze_codebook),
        config_field("semantic_color_grad", "route LD gradients into splat colors", &TrainConfig::semantic_color_grad),
        config_field("init_appearance", "reset colors and opacities before stage 1", &TrainConfig::init_appearance),
        config_field("init_opacity", "initial appearance opacity", &TrainConfig::init_opacity),
        config_field("init_sem_opacity", "initial semantic opacity", &TrainConfig::init_sem_opacity),
    };
    f.push_back({"feature_mode", "'field' (feature field) or 'per_gaussian' (free features, ablation)",
                 [](const TrainConfig& c) {
                   return std::string(c.feature_mode == FeatureMode::Field ? "field" : "per_gaussian");
                 },
                 [](TrainConfig& c, std::string_view v) {
                   if (v == "field") c.feature_mode = FeatureMode::Field;
                   else if (v == "per_gaussian") c.feature_mode = FeatureMode::PerGaussian;
                   else throw ValidationError("'feature_mode': expected field or per_gaussian, got '" + std::string(v) + "'");
                 }});
    return f;
  }();
  return fields;
}

inline void validate_config(const TrainConfig& c) {
  require(c.stage1_iters >= 0 && c.stage2_iters >= 0 && c.warmup_iters >= 0, "iteration counts must be >= 0");
  require(c.lambda_ld >= 0 && c.lambda_entropy >= 0 && c.photometric_weight >= 0, "loss weights must be >= 0");
  require(c.pixels_per_iter > 0, "pixels_per_iter must be positive");
  for (double lr : {c.lr_color, c.lr_opacity, c.lr_sem_opacity, c.lr_field, c.lr_features, c.lr_attention, c.lr_codebook})
    require(lr > 0, "learning rates must be positive");
  require(c.ld_dim > 0 && c.attention_dim > 0 && c.field_hidden > 0 && c.n_freq >= 0, "dimensions must be positive");
  require(c.k_min >= 2 && (c.k_max == 0 || c.k_max >= c.k_min), "codebook range must satisfy 2 <= k_min <= k_max");
  require(c.init_opacity > 0 && c.init_opacity < 1 && c.init_sem_opacity > 0 && c.init_sem_opacity < 1,
          "initial opacities must lie in (0, 1)");
}

inline void set_config_value(TrainConfig& c, std::string_view key, std::string_view value) {
  for (const auto& f : train_config_fields())
    if (f.key == key) return f.set(c, value);
  throw ValidationError("unknown config key '" + std::string(key) + "'");
}

inline KeyValues config_to_key_values(const TrainConfig& c) {
  KeyValues kv;
  for (const auto& f : train_config_fields()) kv.emplace_back(std::string(f.key), f.get(c));
  return kv;
}

inline std::string config_to_text(const TrainConfig& c) { return format_key_values(config_to_key_values(c)); }

// All-or-nothing: on error `base` is untouched.
inline TrainConfig apply_key_values(const TrainConfig& base, const KeyValues& kv) {
  TrainConfig c = base;
  for (const auto& [k, v] : kv) set_config_value(c, k, v);
  validate_config(c);
  return c;
}

inline TrainConfig config_from_text(std::string_view text) {
  return apply_key_values(TrainConfig{}, parse_key_values(text));
}

// ---------------------------------------------------------------------------
// Checkpoint

enum class Stage : std::uint8_t { Stage1 = 1, Stage2 = 2 };

struct Checkpoint {
  TrainConfig config;
  Stage stage = Stage::Stage1;
  std::uint64_t iteration = 0;
  SceneModel scene;
  FourierEncoder encoder;
  SceneBounds bounds;
  FeatureFieldMLP<float> field;
  MatF splat_features;  // per-gaussian mode only
  PCAProjection pca;
  Codebook codebook;
  std::optional<AttentionHead<float>> head;

  // LD feature m_i of every splat.
  MatF ld_features() const {
    if (config.feature_mode == FeatureMode::PerGaussian) return splat_features;
    return field_forward<float>(field, encoder, bounds, scene.splats);
  }

  OpacityKind semantic_opacity_kind() const {
    return config.coupled_opacity ? OpacityKind::Appearance : OpacityKind::Semantic;
  }
};

inline constexpr std::array<char, 4> kCheckpointMagic{'G', 'A', 'F', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename Derived>
void put_matrix(ByteWriter& w, const Eigen::PlainObjectBase<Derived>& m) {
  w.u64(static_cast<std::uint64_t>(m.rows()));
  w.u64(static_cast<std::uint64_t>(m.cols()));
  w.f32s(std::span<const float>(m.data(), static_cast<std::size_t>(m.size())));
}

inline MatF get_matrix(ByteReader& r) {
  const std::uint64_t rows = r.u64(), cols = r.u64();
  if (cols != 0 && rows > r.remaining() / 4 / cols) r.fail("truncated matrix");
  MatF m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  r.f32s(std::span<float>(m.data(), static_cast<std::size_t>(m.size())));
  return m;
}

inline VecF get_vector(ByteReader& r) {
  MatF m = get_matrix(r);
  if (m.cols() != 1 && m.size() != 0) r.fail("expected a column vector");
  return Eigen::Map<VecF>(m.data(), m.size());
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  ByteWriter w;
  w.raw(kCheckpointMagic.data(), 4);
  w.u32(kCheckpointVersion);
  w.u8(static_cast<std::uint8_t>(ck.stage));
  w.u64(ck.iteration);
  w.str(config_to_text(ck.config));
  ByteWriter scene;
  encode_scene(scene, ck.scene);
  w.bytes(scene.data());
  w.u32(static_cast<std::uint32_t>(ck.encoder.n_freq));
  w.f32s(std::span<const float>(ck.bounds.lo.data(), 3));
  w.f32s(std::span<const float>(ck.bounds.hi.data(), 3));
  for (const auto& l : ck.field.layers) {
    detail::put_matrix(w, l.weight);
    detail::put_matrix(w, l.bias);
  }
  detail::put_matrix(w, ck.splat_features);
  detail::put_matrix(w, ck.pca.mean);
  detail::put_matrix(w, ck.pca.basis);
  detail::put_matrix(w, ck.pca.explained_variance);
  detail::put_matrix(w, ck.codebook.entries);
  w.u32(static_cast<std::uint32_t>(ck.codebook.k_min));
  w.u32(static_cast<std::uint32_t>(ck.codebook.k_max));
  w.u64(ck.codebook.seed);
  w.u8(ck.head ? 1 : 0);
  if (ck.head) {
    detail::put_matrix(w, ck.head->wq);
    detail::put_matrix(w, ck.head->bq);
    detail::put_matrix(w, ck.head->wk);
    detail::put_matrix(w, ck.head->bk);
    detail::put_matrix(w, ck.head->codebook);
  }
  return w.take();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& context = "checkpoint") {
  ByteReader r(bytes, context);
  std::array<char, 4> magic{};
  r.raw(magic.data(), 4);
  if (magic != kCheckpointMagic) r.fail("bad magic, expected GAFC");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const std::uint8_t stage = r.u8();
  if (stage != 1 && stage != 2) r.fail("invalid stage tag " + std::to_string(stage));
  ck.stage = static_cast<Stage>(stage);
  ck.iteration = r.u64();
  ck.config = config_from_text(r.str());
  const auto scene_bytes = r.bytes();
  ByteReader sr(scene_bytes, context + " (scene)");
  ck.scene = decode_scene(sr);
  ck.encoder.n_freq = static_cast<int>(r.u32());
  r.f32s(std::span<float>(ck.bounds.lo.data(), 3));
  r.f32s(std::span<float>(ck.bounds.hi.data(), 3));
  for (auto& l : ck.field.layers) {
    l.weight = detail::get_matrix(r);
    l.bias = detail::get_vector(r);
  }
  ck.splat_features = detail::get_matrix(r);
  ck.pca.mean = detail::get_vector(r);
  ck.pca.basis = detail::get_matrix(r);
  ck.pca.explained_variance = detail::get_vector(r);
  ck.codebook.entries = detail::get_matrix(r);
  ck.codebook.k_min = static_cast<int>(r.u32());
  ck.codebook.k_max = static_cast<int>(r.u32());
  ck.codebook.seed = r.u64();
  if (r.u8() != 0) {
    AttentionHead<float> h;
    h.wq = detail::get_matrix(r);
    h.bq = detail::get_vector(r);
    h.wk = detail::get_matrix(r);
    h.bk = detail::get_vector(r);
    h.codebook = detail::get_matrix(r);
    ck.head = std::move(h);
  }
  if (!r.at_end()) r.fail("trailing bytes");
  if (ck.stage == Stage::Stage2 && !ck.head) r.fail("stage-2 checkpoint without an attention head");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const fs::path& path) {
  write_file_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  return decode_checkpoint(read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Loss trace

struct LossRecord {
  int stage = 1;
  int iteration = 0;
  int camera = 0;
  double photometric = 0;
  double ld = 0;
  double lang = 0;
  double entropy = 0;
  double total = 0;
};

struct TrainLog {
  std::vector<LossRecord> records;
  std::function<void(const LossRecord&)> on_record;

  void add(const LossRecord& r) {
    records.push_back(r);
    if (on_record) on_record(r);
  }

  std::string to_csv() const {
    std::string out = "stage,iteration,camera,photometric,ld,lang,entropy,total\n";
    for (const auto& r : records)
      out += std::to_string(r.stage) + "," + std::to_string(r.iteration) + "," + std::to_string(r.camera) + "," +
             format_double(r.photometric) + "," + format_double(r.ld) + "," + format_double(r.lang) + "," +
             format_double(r.entropy) + "," + format_double(r.total) + "\n";
    return out;
  }
};

// ---------------------------------------------------------------------------
// Stage 1

namespace detail {

inline Mat<float> gather_rows(const Mat<float>& m, std::span<const std::uint32_t> rows) {
  Mat<float> out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

inline std::vector<std::uint32_t> supervised_pixels(const ViewSupervision& v) {
  std::vector<std::uint32_t> out;
  for (std::size_t p = 0; p < v.masks.size(); ++p)
    if (v.masks[p] >= 0) out.push_back(static_cast<std::uint32_t>(p));
  return out;
}

inline Mat<float> color_matrix(const ViewSupervision& v) {
  return Eigen::Map<const Mat<float>>(v.color.data(), static_cast<Eigen::Index>(v.pixel_count()), 3);
}

// Flattens the field parameters in a fixed order for the optimizer.
struct FieldOptim {
  std::array<AdamState, 6> states;

  void step(FeatureFieldMLP<float>& mlp, const FeatureFieldMLP<float>& grads, double lr) {
    for (int l = 0; l < 3; ++l) {
      adam_step(states[2 * l], mlp.layers[l].weight, grads.layers[l].weight, lr);
      adam_step(states[2 * l + 1], mlp.layers[l].bias, grads.layers[l].bias, lr);
    }
  }
};

}  // namespace detail

// Resets appearance parameters to the configured starting point.
inline void init_appearance(SceneModel& scene, const TrainConfig& cfg) {
  for (auto& s : scene.splats) {
    s.color.setConstant(0.5f);
    s.alpha_logit = logit(static_cast<float>(cfg.init_opacity));
    s.sem_alpha_logit = logit(static_cast<float>(cfg.init_sem_opacity));
  }
}

inline Checkpoint train_stage1(const SceneModel& scene, std::span<const ViewSupervision> views,
                               const PCAProjection& pca, const Codebook& codebook, const TrainConfig& cfg,
                               TrainLog* log = nullptr) {
  validate_config(cfg);
  validate_scene(scene);
  require(!views.empty() && views.size() == scene.cameras.size(), "stage 1: need one supervision view per camera");
  const int d = pca.output_dim();
  require(d == cfg.ld_dim, "stage 1: PCA dimension " + std::to_string(d) + " does not match ld_dim " +
                               std::to_string(cfg.ld_dim));
  for (std::size_t v = 0; v < views.size(); ++v) {
    if (views[v].ld_map.rows() != static_cast<Eigen::Index>(views[v].pixel_count()) || views[v].ld_map.cols() != d)
      throw ValidationError("stage 1: view " + std::to_string(v) + " has no LD map; run preprocessing first");
    require(views[v].height == scene.cameras[v].height && views[v].width == scene.cameras[v].width,
            "stage 1: view " + std::to_string(v) + " resolution differs from its camera");
  }

  Checkpoint ck;
  ck.config = cfg;
  ck.scene = scene;
  ck.pca = pca;
  ck.codebook = codebook;
  ck.encoder.n_freq = cfg.n_freq;
  ck.bounds = SceneBounds::of(scene.splats);
  if (cfg.init_appearance) init_appearance(ck.scene, cfg);

  auto& splats = ck.scene.splats;
  const auto n = static_cast<Eigen::Index>(splats.size());
  const bool use_field = cfg.feature_mode == FeatureMode::Field;
  if (use_field) {
    ck.field = init_mlp<float>(cfg.seed, ck.encoder.output_dim() + 3, cfg.field_hidden, d);
  } else {
    Rng rng(derive_seed(cfg.seed, "features/init"));
    ck.splat_features.resize(n, d);
    for (Eigen::Index i = 0; i < ck.splat_features.size(); ++i)
      ck.splat_features.data()[i] = static_cast<float>(rng.uniform(-0.1, 0.1));
  }

  AdamState adam_color, adam_alpha, adam_sem, adam_features;
  detail::FieldOptim adam_field;
  Rng order_rng(derive_seed(cfg.seed, "train/camera-order"));
  std::vector<std::size_t> order;
  std::size_t order_pos = 0;

  std::vector<std::vector<std::uint32_t>> supervised(views.size());
  std::vector<Mat<float>> ld_targets(views.size());
  std::vector<Mat<float>> color_targets(views.size());
  for (std::size_t v = 0; v < views.size(); ++v) {
    supervised[v] = detail::supervised_pixels(views[v]);
    ld_targets[v] = detail::gather_rows(views[v].ld_map, supervised[v]);
    color_targets[v] = detail::color_matrix(views[v]);
  }

  Mat<float> colors(n, 3);
  std::vector<float> alpha(static_cast<std::size_t>(n)), sem(static_cast<std::size_t>(n));

  for (int it = 0; it < cfg.stage1_iters; ++it) {
    if (order_pos == order.size()) {
      order.resize(views.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      order_rng.shuffle(order);
      order_pos = 0;
    }
    const std::size_t v = order[order_pos++];
    const Camera& cam = ck.scene.cameras[v];

    LossRecord rec;
    rec.stage = 1;
    rec.iteration = it;
    rec.camera = static_cast<int>(v);

    for (Eigen::Index i = 0; i < n; ++i) {
      colors.row(i) = splats[i].color.transpose();
      alpha[i] = splats[i].alpha_logit;
      sem[i] = splats[i].sem_alpha_logit;
    }
    Mat<float> grad_color = Mat<float>::Zero(n, 3);
    std::vector<float> grad_alpha(static_cast<std::size_t>(n), 0.0f), grad_sem(static_cast<std::size_t>(n), 0.0f);
    bool appearance_step = false, semantic_step = false;

    if (cfg.photometric_weight > 0.0) {
      const auto out = render_color<float>(splats, cam);
      Mat<float> g;
      rec.photometric = photometric_loss<float>(color_targets[v], out.image, cam.height, cam.width, &g);
      g *= static_cast<float>(cfg.photometric_weight);
      const auto opac = splat_opacities<float>(splats, OpacityKind::Appearance);
      const auto grads = composite_backward<float>(out, colors, opac, g);
      grad_color += grads.payloads;
      for (std::size_t i = 0; i < grad_alpha.size(); ++i) grad_alpha[i] += grads.opacity_logits[i];
      appearance_step = true;
    }

    FieldCache<float> cache;
    FieldGrads<float> field_grads;
    Mat<float> feature_grads;
    if (it >= cfg.warmup_iters && cfg.lambda_ld > 0.0 && !supervised[v].empty()) {
      const Mat<float> m =
          use_field ? field_forward<float>(ck.field, ck.encoder, ck.bounds, splats, &cache) : ck.splat_features;
      const OpacityKind kind = ck.semantic_opacity_kind();
      const auto out = render_features<float>(splats, cam, m, kind);
      const Mat<float> pred = detail::gather_rows(out.image, supervised[v]);
      Mat<float> g_sel;
      rec.ld = ld_loss<float>(ld_targets[v], pred, &g_sel);
      Mat<float> upstream = Mat<float>::Zero(out.image.rows(), d);
      const float lam = static_cast<float>(cfg.lambda_ld);
      for (std::size_t k = 0; k < supervised[v].size(); ++k)
        upstream.row(supervised[v][k]) = lam * g_sel.row(static_cast<Eigen::Index>(k));
      const auto opac = splat_opacities<float>(splats, kind);
      const auto grads = composite_backward<float>(out, m, opac, upstream);
      auto& target = kind == OpacityKind::Semantic ? grad_sem : grad_alpha;
      for (std::size_t i = 0; i < target.size(); ++i) target[i] += grads.opacity_logits[i];
      if (use_field) {
        field_grads = field_backward<float>(ck.field, cache, grads.payloads, cfg.semantic_color_grad);
        if (cfg.semantic_color_grad) grad_color += field_grads.colors;
      } else {
        feature_grads = grads.payloads;
      }
      semantic_step = true;
      if (kind == OpacityKind::Appearance) appearance_step = true;
    }
    rec.total = cfg.photometric_weight * rec.photometric + cfg.lambda_ld * rec.ld;

    if (appearance_step) {
      adam_step(adam_color, colors, grad_color, cfg.lr_color);
      adam_step<float>(adam_alpha, alpha, grad_alpha, cfg.lr_opacity);
      for (Eigen::Index i = 0; i < n; ++i) {
        splats[i].color = colors.row(i).transpose().cwiseMax(0.0f).cwiseMin(1.0f);
        splats[i].alpha_logit = alpha[i];
      }
    } else if (cfg.semantic_color_grad && semantic_step) {
      adam_step(adam_color, colors, grad_color, cfg.lr_color);
      for (Eigen::Index i = 0; i < n; ++i) splats[i].color = colors.row(i).transpose().cwiseMax(0.0f).cwiseMin(1.0f);
    }
    if (semantic_step) {
      if (ck.semantic_opacity_kind() == OpacityKind::Semantic) {
        adam_step<float>(adam_sem, sem, grad_sem, cfg.lr_sem_opacity);
        for (Eigen::Index i = 0; i < n; ++i) splats[i].sem_alpha_logit = sem[i];
      }
      if (use_field) adam_field.step(ck.field, field_grads.params, cfg.lr_field);
      else adam_step(adam_features, ck.splat_features, feature_grads, cfg.lr_features);
    }
    if (log) log->add(rec);
  }

  ck.stage = Stage::Stage1;
  ck.iteration = static_cast<std::uint64_t>(cfg.stage1_iters);
  return ck;
}

// Pipeline overload: the preprocessing result carries PCA and codebook.
inline Checkpoint train_stage1(const SceneModel& scene, std::span<const ViewSupervision> views,
                               const PreprocessResult& prep, const TrainConfig& cfg, TrainLog* log = nullptr) {
  return train_stage1(scene, views, prep.pca, prep.codebook, cfg, log);
}

// ---------------------------------------------------------------------------
// Stage 2

// Rendered LD map (H*W x d) for every camera.
inline std::vector<Mat<float>> render_ld_maps(const Checkpoint& ck) {
  const MatF m = ck.ld_features();
  std::vector<Mat<float>> maps;
  for (const auto& cam : ck.scene.cameras)
    maps.push_back(render_features<float>(ck.scene.splats, cam, m, ck.semantic_opacity_kind()).image);
  return maps;
}

inline Checkpoint train_stage2(const Checkpoint& stage1, std::span<const ViewSupervision> views,
                               const TrainConfig& cfg, TrainLog* log = nullptr) {
  validate_config(cfg);
  if (stage1.stage != Stage::Stage1)
    throw ValidationError("stage 2 must start from a stage-1 checkpoint");
  if (stage1.codebook.entries.rows() == 0) throw ValidationError("stage 2: checkpoint has no codebook");
  require(views.size() == stage1.scene.cameras.size(), "stage 2: need one supervision view per camera");
  const int d = stage1.pca.output_dim();

  Checkpoint ck = stage1;
  ck.config.stage2_iters = cfg.stage2_iters;
  ck.config.lambda_entropy = cfg.lambda_entropy;
  ck.config.pixels_per_iter = cfg.pixels_per_iter;
  ck.config.lr_attention = cfg.lr_attention;
  ck.config.lr_codebook = cfg.lr_codebook;
  ck.config.attention_dim = cfg.attention_dim;
  ck.config.freeze_codebook = cfg.freeze_codebook;
  AttentionHead<float> head = init_attention<float>(cfg.seed, d, cfg.attention_dim, stage1.codebook.entries);
  require(head.language_dim() == views.front().mask_features.cols(),
          "stage 2: codebook width does not match the language features");

  // Splats and field are frozen, so each camera's LD map is rendered once.
  const std::vector<Mat<float>> maps = render_ld_maps(stage1);
  std::vector<std::vector<std::uint32_t>> supervised(views.size());
  std::vector<std::size_t> usable;
  for (std::size_t v = 0; v < views.size(); ++v) {
    supervised[v] = detail::supervised_pixels(views[v]);
    if (!supervised[v].empty()) usable.push_back(v);
  }
  require(!usable.empty() || cfg.stage2_iters == 0, "stage 2: no supervised pixels");

  Rng camera_rng(derive_seed(cfg.seed, "train/stage2-camera"));
  Rng pixel_rng(derive_seed(cfg.seed, "train/pixels"));
  AdamState s_wq, s_bq, s_wk, s_bk, s_cb;
  const auto n_sample = static_cast<std::size_t>(cfg.pixels_per_iter);
  std::vector<std::uint32_t> pool;

  for (int it = 0; it < cfg.stage2_iters; ++it) {
    const std::size_t v = usable[camera_rng.index(usable.size())];
    pool = supervised[v];
    if (pool.size() > n_sample) {  // partial Fisher-Yates
      for (std::size_t i = 0; i < n_sample; ++i) std::swap(pool[i], pool[i + pixel_rng.index(pool.size() - i)]);
      pool.resize(n_sample);
    }
    Mat<float> queries(static_cast<Eigen::Index>(pool.size()), d);
    Mat<float> targets(static_cast<Eigen::Index>(pool.size()), views[v].mask_features.cols());
    for (std::size_t k = 0; k < pool.size(); ++k) {
      queries.row(static_cast<Eigen::Index>(k)) = maps[v].row(pool[k]);
      targets.row(static_cast<Eigen::Index>(k)) = views[v].mask_features.row(views[v].masks[pool[k]]);
    }

    const auto out = attention_forward(head, queries);
    Mat<float> g;
    LossRecord rec;
    rec.stage = 2;
    rec.iteration = it;
    rec.camera = static_cast<int>(v);
    rec.lang = lang_loss<float>(targets, out.lhat, &g);
    rec.entropy = entropy_loss(out.weights);
    rec.total = rec.lang + cfg.lambda_entropy * rec.entropy;
    const auto grads =
        attention_backward(head, out, g, static_cast<float>(cfg.lambda_entropy), !cfg.freeze_codebook);

    adam_step(s_wq, head.wq, grads.wq, cfg.lr_attention);
    adam_step(s_bq, head.bq, grads.bq, cfg.lr_attention);
    adam_step(s_wk, head.wk, grads.wk, cfg.lr_attention);
    adam_step(s_bk, head.bk, grads.bk, cfg.lr_attention);
    if (!cfg.freeze_codebook) adam_step(s_cb, head.codebook, grads.codebook, cfg.lr_codebook);
    if (log) log->add(rec);
  }

  ck.head = std::move(head);
  ck.stage = Stage::Stage2;
  ck.iteration = stage1.iteration + static_cast<std::uint64_t>(cfg.stage2_iters);
  return ck;
}

}  // namespace gaff
