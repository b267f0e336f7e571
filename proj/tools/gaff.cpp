// gaff command-line front end. See docs/cli.md.

#include <iostream>

#include <CLI11.hpp>

#include "gaff/gaff.hpp"

namespace {

using namespace gaff;

enum ExitCode { kOk = 0, kValidation = 1, kIo = 2 };

std::string read_text(const fs::path& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

// Training options shared by the commands that build a TrainConfig.
struct ConfigArgs {
  std::string file;
  std::vector<std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", file, "key = value file with training options");
    cmd->add_option("--set", overrides, "override one option, KEY=VALUE (repeatable)");
  }

  // File values first, then --set, then the command's own flags.
  TrainConfig resolve(TrainConfig base, const KeyValues& flags = {}) const {
    KeyValues kv;
    if (!file.empty()) kv = parse_key_values(read_text(file), file);
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw ValidationError("--set expects KEY=VALUE, got '" + o + "'");
      kv.emplace_back(std::string(trim(o.substr(0, eq))), std::string(trim(o.substr(eq + 1))));
    }
    kv.insert(kv.end(), flags.begin(), flags.end());
    return apply_key_values(base, kv);
  }
};

std::vector<std::size_t> parse_cameras(const std::string& spec, std::size_t count) {
  std::vector<std::size_t> out;
  if (spec == "all") {
    for (std::size_t i = 0; i < count; ++i) out.push_back(i);
    return out;
  }
  const auto k = parse_integer<std::size_t>(spec, "--camera");
  if (k >= count) throw ValidationError("--camera " + spec + " out of range (scene has " + std::to_string(count) + ")");
  return {k};
}

Checkpoint load_stage(const fs::path& path, Stage want) {
  if (!fs::exists(path)) {
    if (want == Stage::Stage1) throw IoError("missing stage-1 checkpoint " + path.string() + "; run 'gaff train1' first");
    throw IoError("missing stage-2 checkpoint " + path.string() + "; run 'gaff train2' first");
  }
  Checkpoint ck = load_checkpoint(path);
  if (ck.stage != want)
    throw ValidationError(path.string() + " is a stage-" + std::to_string(static_cast<int>(ck.stage)) +
                          " checkpoint, expected stage " + std::to_string(static_cast<int>(want)));
  return ck;
}

std::string safe_name(std::string s) {
  for (char& c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') c = '_';
  return s;
}

std::vector<std::uint8_t> text_bytes(const std::string& s) { return {s.begin(), s.end()}; }

Image mask_image(int h, int w, std::span<const std::uint8_t> mask) {
  Image img(h, w);
  for (std::size_t p = 0; p < mask.size(); ++p)
    for (int k = 0; k < 3; ++k) img.rgb[p * 3 + k] = mask[p] ? 1.0f : 0.0f;
  return img;
}

void print_loss(const LossRecord& r) {
  if (r.iteration % 100 != 0) return;
  if (r.stage == 1)
    std::printf("stage1 iter %5d  photometric %.5f  ld %.5f  total %.5f\n", r.iteration, r.photometric, r.ld, r.total);
  else
    std::printf("stage2 iter %5d  lang %.5f  entropy %.5f  total %.5f\n", r.iteration, r.lang, r.entropy, r.total);
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gaussian feature fields with codebook attention: synthesis, training, querying and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "gaff 1.0.0");

  bool force = false;
  auto add_force = [&](CLI::App* cmd) { cmd->add_flag("--force", force, "overwrite existing outputs"); };

  // synth
  SynthOptions synth;
  std::string synth_out;
  auto* c_synth = app.add_subcommand("synth", "generate a synthetic scene with supervision");
  c_synth->add_option("--out", synth_out, "output scene directory")->required();
  c_synth->add_option("--seed", synth.seed, "random seed")->capture_default_str();
  c_synth->add_option("--classes", synth.n_classes, "number of object classes")->capture_default_str();
  c_synth->add_option("--splats-per-class", synth.splats_per_class, "Gaussians per class")->capture_default_str();
  c_synth->add_option("--cameras", synth.n_cameras, "number of orbit cameras")->capture_default_str();
  c_synth->add_option("--height", synth.height, "image height")->capture_default_str();
  c_synth->add_option("--width", synth.width, "image width")->capture_default_str();
  c_synth->add_option("--dim", synth.dim, "language embedding dimension D")->capture_default_str();
  c_synth->add_option("--noise", synth.feature_noise, "per-mask feature noise norm")->capture_default_str();
  c_synth->add_option("--max-cosine", synth.max_pair_cosine, "pairwise class-embedding cosine bound")
      ->capture_default_str();
  add_force(c_synth);

  // preprocess
  std::string dir;
  ConfigArgs cfg_args;
  std::optional<int> ld_dim, k_min, k_max;
  std::optional<std::uint64_t> seed;
  auto* c_pre = app.add_subcommand("preprocess", "PCA to LD maps and codebook initialization");
  c_pre->add_option("--dir", dir, "scene directory")->required();
  cfg_args.attach(c_pre);
  c_pre->add_option("--ld-dim", ld_dim, "LD dimension d");
  c_pre->add_option("--k-min", k_min, "smallest codebook size searched");
  c_pre->add_option("--k-max", k_max, "largest codebook size searched (0 = automatic)");
  c_pre->add_option("--seed", seed, "random seed");
  add_force(c_pre);

  // train1 / train2
  std::optional<int> iters;
  bool quiet = false;
  auto* c_t1 = app.add_subcommand("train1", "stage 1: appearance and LD feature distillation");
  auto* c_t2 = app.add_subcommand("train2", "stage 2: attention head and codebook");
  for (auto* c : {c_t1, c_t2}) {
    c->add_option("--dir", dir, "scene directory")->required();
    cfg_args.attach(c);
    c->add_option("--iters", iters, "iterations of this stage");
    c->add_option("--seed", seed, "random seed");
    c->add_flag("--quiet", quiet, "do not print the loss trace");
    add_force(c);
  }

  // query
  std::string checkpoint, text, embedding_file, mode = "2d", camera = "0", out_dir;
  double tau = kDefaultRelativeThreshold, kappa = kDefaultKappa, score_floor = kDefaultScoreFloor;
  auto* c_query = app.add_subcommand("query", "open-vocabulary query in 2D or 3D");
  c_query->add_option("--dir", dir, "scene directory")->required();
  c_query->add_option("--checkpoint", checkpoint, "stage-2 checkpoint (default DIR/stage2.gafc)");
  auto* o_text = c_query->add_option("--text", text, "vocabulary entry to query");
  auto* o_emb = c_query->add_option("--embedding", embedding_file, "tensor file holding a D-dim query embedding");
  o_text->excludes(o_emb);
  c_query->add_option("--mode", mode, "2d or 3d")->check(CLI::IsMember({"2d", "3d"}))->capture_default_str();
  c_query->add_option("--camera", camera, "camera index or 'all'")->capture_default_str();
  c_query->add_option("--out", out_dir, "output directory (default DIR/queries)");
  c_query->add_option("--tau", tau, "relative 2D threshold")->capture_default_str();
  c_query->add_option("--kappa", kappa, "3D selection: standard deviations above the mean")->capture_default_str();
  c_query->add_option("--floor", score_floor, "3D selection: absolute score floor")->capture_default_str();
  add_force(c_query);

  // eval
  std::string csv_out;
  auto* c_eval = app.add_subcommand("eval", "evaluate every vocabulary query in 2D and 3D");
  c_eval->add_option("--dir", dir, "scene directory")->required();
  c_eval->add_option("--checkpoint", checkpoint, "stage-2 checkpoint (default DIR/stage2.gafc)");
  c_eval->add_option("--out", csv_out, "metrics CSV (default DIR/metrics.csv)");
  c_eval->add_option("--tau", tau, "relative 2D threshold")->capture_default_str();
  c_eval->add_option("--kappa", kappa, "3D selection: standard deviations above the mean")->capture_default_str();
  c_eval->add_option("--floor", score_floor, "3D selection: absolute score floor")->capture_default_str();
  add_force(c_eval);

  // render
  bool entries = false;
  auto* c_render = app.add_subcommand("render", "render color images (and per-entry heatmaps)");
  c_render->add_option("--dir", dir, "scene directory")->required();
  c_render->add_option("--checkpoint", checkpoint, "checkpoint to render (default: the scene file)");
  c_render->add_option("--camera", camera, "camera index or 'all'")->capture_default_str();
  c_render->add_option("--out", out_dir, "output directory (default DIR/renders)");
  c_render->add_flag("--entries", entries, "also write per-entry attention heatmaps (stage-2 checkpoint)");
  add_force(c_render);

  // gradcheck
  GradcheckOptions gc;
  auto* c_gc = app.add_subcommand("gradcheck", "finite-difference check of every adjoint");
  c_gc->add_option("--seed", gc.seed, "random seed")->capture_default_str();
  c_gc->add_option("--configs", gc.configurations, "random configurations per component")->capture_default_str();
  c_gc->add_option("--fault", gc.fault_component, "perturb one component's adjoint (harness self-test)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (c_synth->parsed()) {
      const SyntheticScene s = generate_synthetic_scene(synth);
      FileSet files;
      workspace::add_synthetic(files, synth_out, s);
      files.commit(force);
      std::printf("wrote %zu splats, %zu cameras, %zu classes to %s\n", s.scene.splats.size(),
                  s.scene.cameras.size(), s.scene.vocab.size(), synth_out.c_str());
      return kOk;
    }

    if (c_gc->parsed()) {
      const GradcheckReport r = run_gradcheck(gc);
      std::printf("%s", r.to_text().c_str());
      if (!r.passed()) {
        std::string names;
        for (const auto& n : r.failing()) names += (names.empty() ? "" : ", ") + n;
        std::fprintf(stderr, "gradcheck failed: %s\n", names.c_str());
        return kValidation;
      }
      return kOk;
    }

    const fs::path root = dir;
    const SceneModel scene = load_scene(root / workspace::kScene);

    if (c_pre->parsed()) {
      KeyValues flags;
      if (ld_dim) flags.emplace_back("ld_dim", std::to_string(*ld_dim));
      if (k_min) flags.emplace_back("k_min", std::to_string(*k_min));
      if (k_max) flags.emplace_back("k_max", std::to_string(*k_max));
      if (seed) flags.emplace_back("seed", std::to_string(*seed));
      const TrainConfig cfg = cfg_args.resolve(TrainConfig{}, flags);
      auto views = workspace::load_views(root, scene);
      const PreprocessResult res = preprocess_views(views, cfg.ld_dim, cfg.k_min, cfg.k_max, cfg.seed);
      FileSet files;
      workspace::add_preprocess(files, root, res, views);
      files.commit(force);
      std::printf("PCA %d -> %d (explained variance %.4f), codebook size %d\n", res.pca.input_dim(),
                  res.pca.output_dim(), static_cast<double>(res.pca.explained_variance.sum()), res.codebook.size());
      for (const auto& [k, s] : res.silhouette) std::printf("  silhouette k=%d: %.4f\n", k, s);
      return kOk;
    }

    if (c_t1->parsed() || c_t2->parsed()) {
      const bool first = c_t1->parsed();
      KeyValues flags;
      if (iters) flags.emplace_back(first ? "stage1_iters" : "stage2_iters", std::to_string(*iters));
      if (seed) flags.emplace_back("seed", std::to_string(*seed));
      TrainLog log;
      if (!quiet) log.on_record = print_loss;
      Checkpoint ck;
      if (first) {
        const TrainConfig cfg = cfg_args.resolve(TrainConfig{}, flags);
        const PreprocessResult prep = workspace::load_preprocess(root);
        const auto views = workspace::load_views(root, scene);
        ck = train_stage1(scene, views, prep, cfg, &log);
      } else {
        const Checkpoint s1 = load_stage(root / workspace::kStage1, Stage::Stage1);
        const TrainConfig cfg = cfg_args.resolve(s1.config, flags);
        const auto views = workspace::load_views(root, scene);
        ck = train_stage2(s1, views, cfg, &log);
      }
      FileSet files;
      files.add(root / (first ? workspace::kStage1 : workspace::kStage2), encode_checkpoint(ck));
      files.add_text(root / (first ? "stage1_loss.csv" : "stage2_loss.csv"), log.to_csv());
      files.commit(force);
      if (!log.records.empty()) {
        const LossRecord& r = log.records.back();
        std::printf("final total loss %.5f after %zu iterations\n", r.total, log.records.size());
      }
      std::printf("wrote %s\n", (root / (first ? workspace::kStage1 : workspace::kStage2)).c_str());
      return kOk;
    }

    if (c_eval->parsed()) {
      const Checkpoint ck = load_stage(checkpoint.empty() ? root / workspace::kStage2 : fs::path(checkpoint), Stage::Stage2);
      const auto views = workspace::load_views(root, ck.scene);
      const EvalReport rep = evaluate(ck, views, {tau, kappa, score_floor});
      FileSet files;
      files.add_text(csv_out.empty() ? root / "metrics.csv" : fs::path(csv_out), rep.to_csv());
      files.commit(force);
      std::printf("metric,value\n2d_miou,%.4f\n2d_acc,%.4f\n3d_miou,%.4f\n3d_acc@0.25,%.4f\n", rep.miou_2d, rep.acc_2d,
                  rep.miou_3d, rep.acc025_3d);
      return kOk;
    }

    if (c_query->parsed()) {
      const Checkpoint ck = load_stage(checkpoint.empty() ? root / workspace::kStage2 : fs::path(checkpoint), Stage::Stage2);
      const int dim = ck.head->language_dim();
      if (text.empty() && embedding_file.empty()) throw ValidationError("query needs --text or --embedding");
      const TextQuery q = text.empty() ? load_query_embedding(embedding_file, dim) : query_from_vocab(ck.scene, text);
      // Ground truth is available when the query names a vocabulary class.
      int class_id = -1;
      for (std::size_t c = 0; c < ck.scene.vocab.size(); ++c)
        if (ck.scene.vocab[c].name == q.name) class_id = static_cast<int>(c);
      const auto cams = parse_cameras(camera, ck.scene.cameras.size());
      std::vector<ViewSupervision> views;
      if (class_id >= 0) views = workspace::load_views(root, ck.scene);
      const fs::path out = out_dir.empty() ? root / "queries" : fs::path(out_dir);
      const std::string stem = safe_name(q.name) + "_" + mode;

      FileSet files;
      std::string csv = "query,mode,camera,iou,hit\n";
      std::optional<QueryResult3D> r3;
      if (mode == "3d") r3 = query_3d(ck, q, kappa, score_floor, cams);
      for (std::size_t c : cams) {
        const Camera& cam = ck.scene.cameras[c];
        const std::string base = stem + "_cam" + std::to_string(c);
        std::vector<std::uint8_t> mask;
        int hit = -1;
        if (mode == "2d") {
          const QueryResult2D r = query_2d(ck, cam, q, tau);
          std::vector<float> heat(r.scores.size());
          for (std::size_t p = 0; p < heat.size(); ++p) heat[p] = std::clamp(0.5f * (r.scores[p] + 1.0f), 0.0f, 1.0f);
          files.add(out / (base + "_score.ppm"), encode_ppm(heatmap_to_image(cam.height, cam.width, heat)));
          mask = r.mask;
          if (class_id >= 0) hit = class_mask(views[c], class_id)[r.argmax_index()];
          std::printf("camera %zu: argmax (%d, %d) score %.4f\n", c, r.argmax_row, r.argmax_col,
                      static_cast<double>(r.scores[r.argmax_index()]));
        } else {
          mask = r3->coverage[c];
          std::vector<bool> sel = r3->selection;
          files.add(out / (base + "_selection.ppm"), encode_ppm(to_image(render_selected(ck.scene.splats, cam, sel).output)));
        }
        files.add(out / (base + "_mask.ppm"), encode_ppm(mask_image(cam.height, cam.width, mask)));
        std::string iou_text;
        if (class_id >= 0) {
          const double iou = miou(mask, class_mask(views[c], class_id));
          if (mode == "3d") hit = iou >= 0.25 ? 1 : 0;
          iou_text = format_double(iou);
          std::printf("camera %zu: IoU %.4f\n", c, iou);
        }
        csv += q.name + "," + mode + "," + std::to_string(c) + "," + iou_text + "," +
               (hit >= 0 ? std::to_string(hit) : std::string()) + "\n";
      }
      if (r3) std::printf("selected %zu of %zu Gaussians\n", r3->selected_count(), r3->selection.size());
      files.add(out / (stem + ".csv"), text_bytes(csv));
      files.commit(force);
      return kOk;
    }

    if (c_render->parsed()) {
      std::optional<Checkpoint> ck;
      if (!checkpoint.empty()) ck = load_checkpoint(checkpoint);
      const SceneModel& model = ck ? ck->scene : scene;
      const auto cams = parse_cameras(camera, model.cameras.size());
      const fs::path out = out_dir.empty() ? root / "renders" : fs::path(out_dir);
      if (entries && (!ck || ck->stage != Stage::Stage2)) throw ValidationError("--entries needs a stage-2 --checkpoint");
      FileSet files;
      for (std::size_t c : cams) {
        const std::string base = "cam" + std::to_string(c);
        files.add(out / (base + "_color.ppm"), encode_ppm(to_image(render_color<float>(model, model.cameras[c]))));
        if (entries) add_entry_heatmaps(files, *ck, model.cameras[c], out / (base + "_entries"));
      }
      files.commit(force);
      std::printf("wrote renders to %s\n", out.c_str());
      return kOk;
    }
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIo;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIo;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kValidation;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIo;
  }
  return kOk;
}
