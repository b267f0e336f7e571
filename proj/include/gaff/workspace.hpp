#pragma once

// On-disk layout of a scene directory:
//
//   scene.gafs                      splats, cameras, vocabulary
//   view_NNN_{color,masks,features,classes,ld}.gaft
//   pca_mean.gaft pca_basis.gaft pca_variance.gaft codebook.gaft preprocess.txt
//   stage1.gafc stage2.gafc         checkpoints
//   stage1_loss.csv stage2_loss.csv metrics.csv

#include "keyvalue.hpp"
#include "preprocess.hpp"
#include "scene.hpp"
#include "synth.hpp"

namespace gaff::workspace {

inline const char* kScene = "scene.gafs";
inline const char* kStage1 = "stage1.gafc";
inline const char* kStage2 = "stage2.gafc";
inline const char* kPreprocessMeta = "preprocess.txt";

inline std::vector<ViewSupervision> load_views(const fs::path& dir, const SceneModel& scene) {
  std::vector<ViewSupervision> views;
  for (std::size_t i = 0; i < scene.cameras.size(); ++i) {
    if (!fs::exists(dir / view_file(i, "color")))
      throw IoError("missing supervision for camera " + std::to_string(i) + " in " + dir.string());
    views.push_back(read_supervision(dir, i, &scene.cameras[i]));
  }
  return views;
}

inline void add_synthetic(FileSet& files, const fs::path& dir, const SyntheticScene& s) {
  files.add(dir / kScene, scene_bytes(s.scene));
  for (std::size_t i = 0; i < s.views.size(); ++i) add_supervision(files, dir, i, s.views[i]);
}

inline void add_preprocess(FileSet& files, const fs::path& dir, const PreprocessResult& res,
                           const std::vector<ViewSupervision>& views) {
  const MatF mean = res.pca.mean.transpose();
  files.add(dir / "pca_mean.gaft", matrix_bytes(mean));
  files.add(dir / "pca_basis.gaft", matrix_bytes(res.pca.basis));
  const MatF var = res.pca.explained_variance.transpose();
  files.add(dir / "pca_variance.gaft", matrix_bytes(var));
  files.add(dir / "codebook.gaft", matrix_bytes(res.codebook.entries));
  for (std::size_t i = 0; i < views.size(); ++i) files.add(dir / view_file(i, "ld"), ld_map_bytes(views[i]));

  KeyValues meta{{"ld_dim", std::to_string(res.pca.output_dim())},
                 {"language_dim", std::to_string(res.pca.input_dim())},
                 {"codebook_size", std::to_string(res.codebook.size())},
                 {"k_min", std::to_string(res.codebook.k_min)},
                 {"k_max", std::to_string(res.codebook.k_max)},
                 {"seed", std::to_string(res.codebook.seed)}};
  for (const auto& [k, s] : res.silhouette) meta.emplace_back("silhouette_k" + std::to_string(k), format_double(s));
  files.add_text(dir / kPreprocessMeta, format_key_values(meta));
}

inline PreprocessResult load_preprocess(const fs::path& dir) {
  if (!fs::exists(dir / kPreprocessMeta))
    throw IoError("no preprocessing output in " + dir.string() + "; run 'gaff preprocess' first");
  PreprocessResult res;
  auto load = [&](const char* name) { return tensor_to_matrix(read_tensor(dir / name), (dir / name).string()); };
  const MatF mean = load("pca_mean.gaft");
  res.pca.basis = load("pca_basis.gaft");
  const MatF var = load("pca_variance.gaft");
  res.pca.mean = mean.row(0).transpose();
  res.pca.explained_variance = var.row(0).transpose();
  if (res.pca.mean.size() != res.pca.basis.rows() || res.pca.explained_variance.size() != res.pca.basis.cols())
    throw FormatError(dir.string() + ": inconsistent PCA files");
  res.codebook.entries = load("codebook.gaft");
  if (res.codebook.entries.cols() != res.pca.basis.rows())
    throw FormatError(dir.string() + ": codebook width does not match the PCA input dimension");
  const std::string text = [&] {
    const auto bytes = read_file(dir / kPreprocessMeta);
    return std::string(bytes.begin(), bytes.end());
  }();
  for (const auto& [k, v] : parse_key_values(text, (dir / kPreprocessMeta).string())) {
    if (k == "k_min") res.codebook.k_min = parse_integer<int>(v, k);
    else if (k == "k_max") res.codebook.k_max = parse_integer<int>(v, k);
    else if (k == "seed") res.codebook.seed = parse_integer<std::uint64_t>(v, k);
    else if (k.starts_with("silhouette_k"))
      res.silhouette.emplace_back(parse_integer<int>(std::string_view(k).substr(12), k), parse_double(v, k));
  }
  return res;
}

}  // namespace gaff::workspace
