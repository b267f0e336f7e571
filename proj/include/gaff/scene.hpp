#pragma once

// Gaussian scene model, cameras, per-view supervision and their containers.

#include <optional>
#include <string>
#include <vector>

#include "common.hpp"
#include "tensorio.hpp"

namespace gaff {

struct GaussianSplat {
  Eigen::Vector3f mu = Eigen::Vector3f::Zero();
  Eigen::Vector4f rot{1.0f, 0.0f, 0.0f, 0.0f};  // (w, x, y, z), unit norm
  Eigen::Vector3f log_scale = Eigen::Vector3f::Zero();
  float alpha_logit = 0.0f;      // appearance opacity
  float sem_alpha_logit = 0.0f;  // semantic opacity
  Eigen::Vector3f color = Eigen::Vector3f::Constant(0.5f);
  // Ground truth only. Training code never reads it.
  std::optional<std::int32_t> class_id;

  float opacity() const { return sigmoid(alpha_logit); }
  float sem_opacity() const { return sigmoid(sem_alpha_logit); }

  Eigen::Matrix3d rotation() const {
    const Eigen::Vector4d q = rot.cast<double>().normalized();
    return Eigen::Quaterniond(q[0], q[1], q[2], q[3]).toRotationMatrix();
  }

  // Sigma = R S S^T R^T
  Eigen::Matrix3d covariance() const {
    const Eigen::Matrix3d r = rotation();
    const Eigen::Vector3d s = log_scale.cast<double>().array().exp();
    const Eigen::Matrix3d rs = r * s.asDiagonal();
    return rs * rs.transpose();
  }
};

struct Camera {
  float fx = 1.0f, fy = 1.0f, cx = 0.0f, cy = 0.0f;
  Eigen::Matrix3f rotation = Eigen::Matrix3f::Identity();  // world -> camera
  Eigen::Vector3f translation = Eigen::Vector3f::Zero();
  int width = 0;
  int height = 0;

  int pixel_count() const { return width * height; }

  // Camera at `eye` looking at `target`; camera +z is the viewing direction,
  // +y points down in the image.
  static Camera look_at(const Eigen::Vector3f& eye, const Eigen::Vector3f& target, const Eigen::Vector3f& up,
                        float focal, int width, int height) {
    const Eigen::Vector3f z = (target - eye).normalized();
    Eigen::Vector3f x = z.cross(up);
    if (x.norm() < 1e-6f) x = z.cross(Eigen::Vector3f::UnitX());
    x.normalize();
    const Eigen::Vector3f y = z.cross(x);
    Camera cam;
    cam.rotation.row(0) = x.transpose();
    cam.rotation.row(1) = y.transpose();
    cam.rotation.row(2) = z.transpose();
    cam.translation = -cam.rotation * eye;
    cam.fx = cam.fy = focal;
    cam.cx = 0.5f * static_cast<float>(width);
    cam.cy = 0.5f * static_cast<float>(height);
    cam.width = width;
    cam.height = height;
    return cam;
  }
};

struct VocabEntry {
  std::string name;
  std::vector<float> embedding;  // unit norm
};

struct SceneModel {
  std::vector<GaussianSplat> splats;
  std::vector<Camera> cameras;
  std::vector<VocabEntry> vocab;

  std::size_t size() const { return splats.size(); }
  std::size_t embedding_dim() const { return vocab.empty() ? 0 : vocab.front().embedding.size(); }
};

inline void validate_splat(const GaussianSplat& s, std::size_t i) {
  const std::string where = "splat " + std::to_string(i) + ": ";
  for (int k = 0; k < 3; ++k) {
    require(std::isfinite(s.mu[k]) && std::isfinite(s.log_scale[k]) && std::isfinite(s.color[k]),
            where + "non-finite parameter");
    require(std::exp(s.log_scale[k]) > 0.0f, where + "scale underflows to zero");
  }
  require(std::isfinite(s.alpha_logit) && std::isfinite(s.sem_alpha_logit), where + "non-finite opacity");
  const double qn = s.rot.cast<double>().norm();
  require(std::abs(qn - 1.0) <= 1e-6, where + "quaternion norm " + std::to_string(qn) + " is not 1");
}

inline void validate_camera(const Camera& c, std::size_t i) {
  const std::string where = "camera " + std::to_string(i) + ": ";
  require(c.fx > 0.0f && c.fy > 0.0f, where + "focal lengths must be positive");
  require(c.width > 0 && c.height > 0, where + "resolution must be positive");
  const Eigen::Matrix3d r = c.rotation.cast<double>();
  const double ortho = (r * r.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  require(ortho <= 1e-5, where + "rotation is not orthonormal");
  require(std::abs(r.determinant() - 1.0) <= 1e-5, where + "rotation determinant is not +1");
}

inline void validate_scene(const SceneModel& scene) {
  require(!scene.splats.empty(), "scene has no splats");
  for (std::size_t i = 0; i < scene.splats.size(); ++i) validate_splat(scene.splats[i], i);
  for (std::size_t i = 0; i < scene.cameras.size(); ++i) validate_camera(scene.cameras[i], i);
  const std::size_t dim = scene.embedding_dim();
  for (const auto& v : scene.vocab) {
    require(v.embedding.size() == dim && dim > 0, "vocab '" + v.name + "': inconsistent embedding size");
    double n2 = 0.0;
    for (float x : v.embedding) n2 += double(x) * x;
    require(std::abs(std::sqrt(n2) - 1.0) <= 1e-5, "vocab '" + v.name + "': embedding is not unit norm");
  }
}

// ---------------------------------------------------------------------------
// "GAFS" container

inline constexpr std::array<char, 4> kSceneMagic{'G', 'A', 'F', 'S'};
inline constexpr std::uint32_t kSceneVersion = 1;

inline void encode_scene(ByteWriter& w, const SceneModel& scene) {
  validate_scene(scene);
  w.raw(kSceneMagic.data(), 4);
  w.u32(kSceneVersion);
  w.u64(scene.splats.size());
  for (const auto& s : scene.splats) {
    w.f32s(std::span<const float>(s.mu.data(), 3));
    w.f32s(std::span<const float>(s.rot.data(), 4));
    w.f32s(std::span<const float>(s.log_scale.data(), 3));
    w.f32(s.alpha_logit);
    w.f32(s.sem_alpha_logit);
    w.f32s(std::span<const float>(s.color.data(), 3));
    w.u8(s.class_id ? 1 : 0);
    w.i32(s.class_id.value_or(-1));
  }
  w.u64(scene.cameras.size());
  for (const auto& c : scene.cameras) {
    w.f32(c.fx);
    w.f32(c.fy);
    w.f32(c.cx);
    w.f32(c.cy);
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < 3; ++k) w.f32(c.rotation(r, k));
    w.f32s(std::span<const float>(c.translation.data(), 3));
    w.u32(static_cast<std::uint32_t>(c.width));
    w.u32(static_cast<std::uint32_t>(c.height));
  }
  w.u64(scene.vocab.size());
  w.u64(scene.embedding_dim());
  for (const auto& v : scene.vocab) {
    w.str(v.name);
    w.f32s(v.embedding);
  }
}

inline SceneModel decode_scene(ByteReader& r) {
  std::array<char, 4> magic{};
  r.raw(magic.data(), 4);
  if (magic != kSceneMagic) r.fail("bad magic, expected GAFS");
  const std::uint32_t version = r.u32();
  if (version != kSceneVersion) r.fail("unsupported scene version " + std::to_string(version));

  SceneModel scene;
  const std::uint64_t n_splats = r.u64();
  if (n_splats > r.remaining() / 65) r.fail("truncated splat table");
  scene.splats.resize(n_splats);
  for (auto& s : scene.splats) {
    r.f32s(std::span<float>(s.mu.data(), 3));
    r.f32s(std::span<float>(s.rot.data(), 4));
    r.f32s(std::span<float>(s.log_scale.data(), 3));
    s.alpha_logit = r.f32();
    s.sem_alpha_logit = r.f32();
    r.f32s(std::span<float>(s.color.data(), 3));
    const bool has_class = r.u8() != 0;
    const std::int32_t cls = r.i32();
    if (has_class) s.class_id = cls;
  }
  const std::uint64_t n_cams = r.u64();
  if (n_cams > r.remaining() / 72) r.fail("truncated camera table");
  scene.cameras.resize(n_cams);
  for (auto& c : scene.cameras) {
    c.fx = r.f32();
    c.fy = r.f32();
    c.cx = r.f32();
    c.cy = r.f32();
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 3; ++k) c.rotation(i, k) = r.f32();
    r.f32s(std::span<float>(c.translation.data(), 3));
    c.width = static_cast<int>(r.u32());
    c.height = static_cast<int>(r.u32());
  }
  const std::uint64_t n_vocab = r.u64();
  const std::uint64_t dim = r.u64();
  if (n_vocab > r.remaining() / 8 || (n_vocab > 0 && dim > r.remaining() / 4)) r.fail("truncated vocab table");
  scene.vocab.resize(n_vocab);
  for (auto& v : scene.vocab) {
    v.name = r.str();
    v.embedding.resize(dim);
    r.f32s(v.embedding);
  }
  validate_scene(scene);
  return scene;
}

inline std::vector<std::uint8_t> scene_bytes(const SceneModel& scene) {
  ByteWriter w;
  encode_scene(w, scene);
  return w.take();
}

inline void save_scene(const SceneModel& scene, const fs::path& path) { write_file_atomic(path, scene_bytes(scene)); }

inline SceneModel load_scene(const fs::path& path) {
  const auto bytes = read_file(path);
  ByteReader r(bytes, path.string());
  SceneModel scene = decode_scene(r);
  if (!r.at_end()) r.fail("trailing bytes");
  return scene;
}

// ---------------------------------------------------------------------------
// Per-view supervision

struct ViewSupervision {
  int height = 0;
  int width = 0;
  std::vector<float> color;          // H*W*3, ground-truth image
  std::vector<std::int32_t> masks;   // H*W mask ids, -1 = unsupervised
  MatF mask_features;                // K x D, row k = feature of mask k
  MatF ld_map;                       // H*W x d, filled by preprocessing
  std::vector<std::int32_t> class_map;  // H*W ground-truth class ids (metrics only), may be empty

  std::size_t pixel_count() const { return static_cast<std::size_t>(height) * width; }

  std::size_t supervised_count() const {
    return static_cast<std::size_t>(std::count_if(masks.begin(), masks.end(), [](auto m) { return m >= 0; }));
  }
};

inline void validate_supervision(const ViewSupervision& v) {
  const std::size_t n = v.pixel_count();
  require(n > 0, "supervision has empty resolution");
  require(v.color.size() == n * 3, "color image does not match resolution");
  require(v.masks.size() == n, "mask map does not match resolution");
  for (float c : v.color) require(std::isfinite(c), "non-finite color value");
  const auto k = v.mask_features.rows();
  for (auto m : v.masks) {
    require(m >= -1, "mask id below -1");
    require(m < k, "mask id " + std::to_string(m) + " out of range for " + std::to_string(k) + " features");
  }
  require(v.mask_features.allFinite(), "non-finite mask feature");
  require(v.class_map.empty() || v.class_map.size() == n, "class map does not match resolution");
}

namespace detail {

inline std::int32_t exact_id(float v, const std::string& what) {
  if (!std::isfinite(v) || v != std::floor(v) || v < -1.0f || v > 2147483647.0f)
    throw ValidationError(what + ": mask values must be integers >= -1, got " + std::to_string(v));
  return static_cast<std::int32_t>(v);
}

}  // namespace detail

// Assembles a view from three tensor files (color HxWx3, masks HxW, features KxD).
// When a camera is given, the resolution must match it.
inline ViewSupervision ingest_supervision(const fs::path& color_path, const fs::path& mask_path,
                                          const fs::path& features_path, const Camera* camera = nullptr) {
  const Tensor color = read_tensor(color_path);
  const Tensor masks = read_tensor(mask_path);
  const Tensor feats = read_tensor(features_path);
  if (color.dims.size() != 3 || color.dims[2] != 3) throw ValidationError("color tensor must be H x W x 3");
  if (masks.dims.size() != 2) throw ValidationError("mask tensor must be H x W");
  if (feats.dims.size() != 2) throw ValidationError("feature tensor must be K x D");
  if (masks.dims[0] != color.dims[0] || masks.dims[1] != color.dims[1])
    throw ValidationError("mask and color resolutions differ");
  if (camera && (color.dims[0] != static_cast<std::uint64_t>(camera->height) ||
                 color.dims[1] != static_cast<std::uint64_t>(camera->width)))
    throw ValidationError("supervision resolution does not match the camera");

  ViewSupervision v;
  v.height = static_cast<int>(color.dims[0]);
  v.width = static_cast<int>(color.dims[1]);
  v.color = color.data;
  v.masks.resize(masks.data.size());
  for (std::size_t i = 0; i < masks.data.size(); ++i) v.masks[i] = detail::exact_id(masks.data[i], mask_path.string());
  v.mask_features = tensor_to_matrix(feats, features_path.string());
  validate_supervision(v);
  return v;
}

inline std::string view_file(std::size_t view, std::string_view kind) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "view_%03zu_%.*s.gaft", view, static_cast<int>(kind.size()), kind.data());
  return buf;
}

inline std::vector<float> ids_to_floats(const std::vector<std::int32_t>& ids) {
  return std::vector<float>(ids.begin(), ids.end());
}

inline std::vector<std::uint8_t> ld_map_bytes(const ViewSupervision& v) {
  return tensor_bytes({static_cast<std::uint64_t>(v.height), static_cast<std::uint64_t>(v.width),
                       static_cast<std::uint64_t>(v.ld_map.cols())},
                      std::span<const float>(v.ld_map.data(), static_cast<std::size_t>(v.ld_map.size())));
}

// Color/masks/features (+ ground-truth class map and LD map when present).
inline void add_supervision(FileSet& files, const fs::path& dir, std::size_t index, const ViewSupervision& v) {
  const auto h = static_cast<std::uint64_t>(v.height), w = static_cast<std::uint64_t>(v.width);
  files.add(dir / view_file(index, "color"), tensor_bytes({h, w, 3}, v.color));
  files.add(dir / view_file(index, "masks"), tensor_bytes({h, w}, ids_to_floats(v.masks)));
  files.add(dir / view_file(index, "features"), matrix_bytes(v.mask_features));
  if (!v.class_map.empty()) files.add(dir / view_file(index, "classes"), tensor_bytes({h, w}, ids_to_floats(v.class_map)));
  if (v.ld_map.size() > 0) files.add(dir / view_file(index, "ld"), ld_map_bytes(v));
}

inline void write_supervision(const fs::path& dir, std::size_t index, const ViewSupervision& v) {
  FileSet files;
  add_supervision(files, dir, index, v);
  files.commit(true);
}

inline ViewSupervision read_supervision(const fs::path& dir, std::size_t index, const Camera* camera = nullptr) {
  ViewSupervision v = ingest_supervision(dir / view_file(index, "color"), dir / view_file(index, "masks"),
                                         dir / view_file(index, "features"), camera);
  const fs::path classes = dir / view_file(index, "classes");
  if (fs::exists(classes)) {
    const Tensor t = read_tensor(classes);
    if (t.data.size() != v.pixel_count()) throw FormatError(classes.string() + ": class map size mismatch");
    v.class_map.resize(t.data.size());
    for (std::size_t i = 0; i < t.data.size(); ++i) v.class_map[i] = detail::exact_id(t.data[i], classes.string());
  }
  const fs::path ld = dir / view_file(index, "ld");
  if (fs::exists(ld)) {
    const Tensor t = read_tensor(ld);
    if (t.dims.size() != 3 || t.dims[0] * t.dims[1] != v.pixel_count())
      throw FormatError(ld.string() + ": LD map must be H x W x d");
    v.ld_map.resize(static_cast<Eigen::Index>(v.pixel_count()), static_cast<Eigen::Index>(t.dims[2]));
    std::copy(t.data.begin(), t.data.end(), v.ld_map.data());
  }
  return v;
}

}  // namespace gaff
