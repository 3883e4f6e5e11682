// Copyright 2026 The berrypose Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// berrypose command line: gen, train, pretrain2d, eval, infer, viz.

#include <CLI11.hpp>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "berrypose/evalkit.hpp"
#include "berrypose/synthgen.hpp"
#include "berrypose/train.hpp"
#include "berrypose/viz.hpp"

namespace fs = std::filesystem;
using namespace berrypose;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  std::string out;
  int threads = 1;
};

std::vector<int> parse_int_list(const std::string& s, const std::string& what) {
  std::vector<int> v;
  if (s == "none") return v;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      v.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(what + ": '" + s + "' is not a comma separated integer list");
    }
  }
  return v;
}

fs::path require_out(const Globals& g) {
  if (g.out.empty()) throw ConfigError("--out is required");
  return g.out;
}

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
  int n = 0;
  SceneConfig scene;
  double train_fraction = 0.8;
};

void add_gen(CLI::App& app, GenArgs& a) {
  SceneConfig& s = a.scene;
  app.add_option("--n", a.n, "number of samples")->required()->check(CLI::Range(1, 10000000));
  app.add_option("--width", s.width, "image width")->capture_default_str();
  app.add_option("--height", s.height, "image height")->capture_default_str();
  app.add_option("--hfov", s.hfov_deg, "horizontal field of view, degrees")->capture_default_str();
  app.add_option("--count-min", s.count_min, "berries per image, lower bound")->capture_default_str();
  app.add_option("--count-max", s.count_max, "berries per image, upper bound")->capture_default_str();
  app.add_option("--h-min", s.h_min, "berry height range, meters")->capture_default_str();
  app.add_option("--h-max", s.h_max)->capture_default_str();
  app.add_option("--w-min", s.w_min, "berry width range, meters")->capture_default_str();
  app.add_option("--w-max", s.w_max)->capture_default_str();
  app.add_option("--wl-jitter", s.wl_jitter, "relative spread of l around w")->capture_default_str();
  app.add_option("--distance-min", s.distance_min, "camera distance range, meters")->capture_default_str();
  app.add_option("--distance-max", s.distance_max)->capture_default_str();
  app.add_option("--hanging-bias", s.hanging_bias, "share of tip-down berries")->capture_default_str();
  app.add_option("--hanging-tilt", s.hanging_tilt_deg, "max tilt of hanging berries, degrees")
      ->capture_default_str();
  app.add_option("--camera-cone", s.camera_cone_deg, "camera direction spread, degrees")->capture_default_str();
  app.add_option("--leaves-min", s.leaves_min, "leaves per image")->capture_default_str();
  app.add_option("--leaves-max", s.leaves_max)->capture_default_str();
  app.add_option("--leaf-min", s.leaf_min, "leaf size range, meters")->capture_default_str();
  app.add_option("--leaf-max", s.leaf_max)->capture_default_str();
  app.add_option("--leaf-occlusion-bias", s.leaf_occlusion_bias, "share of leaves placed over a berry")
      ->capture_default_str();
  app.add_option("--light-min", s.light_min, "light intensity range")->capture_default_str();
  app.add_option("--light-max", s.light_max)->capture_default_str();
  app.add_option("--ambient-min", s.ambient_min, "ambient light range")->capture_default_str();
  app.add_option("--ambient-max", s.ambient_max)->capture_default_str();
  app.add_option("--train-fraction", a.train_fraction, "share of samples in the train split")
      ->capture_default_str();
}

int run_gen(const GenArgs& a, const Globals& g) {
  const fs::path out = require_out(g);
  GenerationStats st;
  const Manifest m = generate_dataset(a.n, out, a.scene, g.seed, a.train_fraction, g.threads, &st);
  std::printf("wrote %s\n", (out / "manifest.json").string().c_str());
  std::printf("samples %d (train %d, test %d), instances %d\n", m.count, m.split_count("train"),
              m.split_count("test"), st.instances);
  std::printf("mean size h %.4f w %.4f l %.4f m\n", m.mean_size.h, m.mean_size.w, m.mean_size.l);
  std::printf("visible fraction histogram\n");
  for (int b = 0; b < 5; ++b)
    std::printf("  [%.1f, %.1f%c %d\n", 0.2 * b, 0.2 * (b + 1), b == 4 ? ']' : ')', st.visibility_histogram[b]);
  return 0;
}

// ---------------------------------------------------------------------------
// train / pretrain2d

struct TrainArgs {
  std::string data;
  TrainConfig cfg;
  ModelConfig model;
  CodecConfig codec;
  std::string decay_epochs = "120,240";
  std::string channels;
  std::string resume;
  std::string init_backbone;
  bool quiet = false;
};

void add_model_options(CLI::App& app, TrainArgs& a) {
  ModelConfig& m = a.model;
  app.add_option("--backbone", m.backbone, "tiny or darknet19")->capture_default_str();
  app.add_option("--input-width", m.input_width, "network input width")->capture_default_str();
  app.add_option("--input-height", m.input_height, "network input height")->capture_default_str();
  app.add_option("--anchors", m.anchors, "anchors per cell")->capture_default_str();
  app.add_option("--stride", m.stride, "grid stride (tiny backbone)")->capture_default_str();
  app.add_option("--channels", a.channels, "comma separated block widths");
  app.add_option("--head-conf-bias", m.head_conf_bias, "initial confidence logit")->capture_default_str();
}

void add_train_options(CLI::App& app, TrainArgs& a, bool pose) {
  TrainConfig& c = a.cfg;
  app.add_option("--data", a.data, "dataset directory")->required();
  app.add_option("--epochs", c.epochs)->capture_default_str();
  app.add_option("--batch-size", c.batch_size)->capture_default_str();
  app.add_option("--lr", c.lr, "initial learning rate")->capture_default_str();
  app.add_option("--momentum", c.momentum)->capture_default_str();
  app.add_option("--weight-decay", c.weight_decay)->capture_default_str();
  app.add_option("--decay-epochs", a.decay_epochs, "comma separated epochs at which lr drops, or none")
      ->capture_default_str();
  app.add_option("--decay-factor", c.decay_factor)->capture_default_str();
  app.add_flag("--augment,!--no-augment", c.augment, "random flip/scale/crop/color")->capture_default_str();
  app.add_flag("--flip,!--no-flip", c.aug.flip)->capture_default_str();
  app.add_flag("--scale,!--no-scale", c.aug.scale)->capture_default_str();
  app.add_flag("--crop,!--no-crop", c.aug.crop)->capture_default_str();
  app.add_flag("--color,!--no-color", c.aug.color)->capture_default_str();
  app.add_option("--scale-min", c.aug.scale_min)->capture_default_str();
  app.add_option("--scale-max", c.aug.scale_max)->capture_default_str();
  app.add_option("--hue", c.aug.hue, "hue jitter, fraction of a turn")->capture_default_str();
  app.add_option("--saturation", c.aug.saturation)->capture_default_str();
  app.add_option("--brightness", c.aug.brightness)->capture_default_str();
  app.add_option("--w-coord", c.weights.coord, "loss weight")->capture_default_str();
  app.add_option("--w-dim", c.weights.dim)->capture_default_str();
  app.add_option("--w-conf", c.weights.conf)->capture_default_str();
  app.add_option("--w-conf-no", c.weights.conf_no)->capture_default_str();
  app.add_option("--checkpoint-every", c.checkpoint_every, "0 disables periodic checkpoints")
      ->capture_default_str();
  app.add_option("--workers", c.workers, "data loading threads (default: --threads)");
  app.add_option("--split", c.split)->capture_default_str();
  app.add_option("--limit", c.limit, "use the first N samples of the split")->capture_default_str();
  app.add_flag("--quiet", a.quiet, "no per-epoch lines");
  add_model_options(app, a);
  app.add_option("--alpha", a.codec.alpha, "confidence sharpness")->capture_default_str();
  app.add_option("--distance-threshold", a.codec.distance_threshold, "confidence cutoff, pixels")
      ->capture_default_str();
  app.add_option("--conf-threshold", a.codec.conf_threshold)->capture_default_str();
  app.add_option("--nms-iou", a.codec.nms_iou)->capture_default_str();
  if (pose) {
    app.add_option("--schedule", c.schedule, "single or two-stage")->capture_default_str();
    app.add_option("--freeze-epoch", c.freeze_epoch, "two-stage: backbone frozen from here")
        ->capture_default_str();
    app.add_option("--orbit-n", c.orbit_n, "symmetry orbit size in the loss")->capture_default_str();
    app.add_option("--resume", a.resume, "continue from a checkpoint");
    app.add_option("--init-backbone", a.init_backbone, "backbone.bpk from pretrain2d");
  }
}

void finish_train_args(TrainArgs& a, const Globals& g, const CLI::App& app) {
  a.cfg.seed = g.seed;
  if (app.count("--workers") == 0) a.cfg.workers = std::max(1, g.threads);
  a.cfg.decay_epochs = parse_int_list(a.decay_epochs, "--decay-epochs");
  if (!a.channels.empty()) a.model.channels = parse_int_list(a.channels, "--channels");
  else if (a.model.backbone == "darknet19") a.model.channels = ModelConfig::darknet19().channels;
  a.model.validate();
}

std::function<void(const EpochLog&)> epoch_printer(const TrainArgs& a) {
  if (a.quiet) return {};
  const int total = a.cfg.epochs;
  return [total](const EpochLog& e) {
    std::printf("epoch %4d/%d  lr %.3g  loss %.4f (coord %.4f dim %.4f conf %.4f conf_no %.4f)%s  %.1fs\n", e.epoch,
                total, e.lr, e.loss.total, e.loss.coord, e.loss.dim, e.loss.conf, e.loss.conf_no,
                e.frozen ? "  [backbone frozen]" : "", e.seconds);
    std::fflush(stdout);
  };
}

int run_train(TrainArgs& a, const Globals& g, const CLI::App& app) {
  finish_train_args(a, g, app);
  const fs::path out = require_out(g);
  const Dataset d = load_dataset(a.data);
  TrainHooks hooks;
  hooks.on_epoch = epoch_printer(a);
  if (!a.resume.empty()) hooks.resume = load_checkpoint(a.resume);
  if (!a.init_backbone.empty()) hooks.backbone = load_checkpoint(a.init_backbone);
  const Checkpoint c = train(a.cfg, a.model, d, out, a.codec, hooks);
  std::printf("wrote %s (epoch %d)\n", (out / "final.bpk").string().c_str(), c.epoch);
  return 0;
}

int run_pretrain(TrainArgs& a, const Globals& g, const CLI::App& app) {
  finish_train_args(a, g, app);
  const fs::path out = require_out(g);
  const Dataset d = load_dataset(a.data);
  const Pretrain2DResult r = pretrain_2d(a.cfg, a.model, d, out, epoch_printer(a));
  std::printf("2D loss %.4f -> %.4f\n", r.first_epoch.total, r.last_epoch.total);
  std::printf("wrote %s and %s\n", (out / "detect2d.bpk").string().c_str(), (out / "backbone.bpk").string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string data;
  std::string checkpoint;
  std::string detections;
  EvalOptions opt;
  std::string json;
  std::optional<double> conf_threshold;
  std::optional<double> nms_iou;
};

void add_eval(CLI::App& app, EvalArgs& a) {
  app.add_option("--data", a.data, "dataset directory")->required();
  auto* ck = app.add_option("--checkpoint", a.checkpoint, "pose checkpoint to run");
  auto* det = app.add_option("--detections", a.detections, "directory of <sample id>.json detection files");
  ck->excludes(det);
  app.add_option("--split", a.opt.split, "train, test or all")->capture_default_str();
  app.add_option("--limit", a.opt.limit, "first N samples of the split")->capture_default_str();
  app.add_option("--warmup", a.opt.warmup, "untimed runs before timing")->capture_default_str();
  app.add_option("--json", a.json, "report path (default: <out>/eval.json when --out is set)");
  app.add_option("--conf-threshold", a.conf_threshold, "override the checkpoint's value");
  app.add_option("--nms-iou", a.nms_iou, "override the checkpoint's value");
}

// Detections read from disk. Poses missing from the file are solved here.
std::vector<Detection> read_detections(const fs::path& file) {
  if (!fs::exists(file)) throw IoError(file.string(), "no such detection file");
  DetectionFile f;
  try {
    f = detections_from_json(read_json_file(file));
  } catch (const ValidationError& e) {
    throw ValidationError(file.string() + ": " + e.field(), e.reason());
  }
  for (Detection& d : f.detections) {
    if (d.pose || d.pose_failed) continue;
    try {
      d.pose = solve_pnp(d.keypoints, d.size, f.intrinsics);
    } catch (const PnPError&) {
      d.pose_failed = true;
    }
  }
  return f.detections;
}

int run_eval(EvalArgs& a, const Globals& g) {
  if (a.checkpoint.empty() == a.detections.empty()) throw ConfigError("eval: give --checkpoint or --detections");
  a.opt.threads = std::max(1, g.threads);
  const Dataset d = load_dataset(a.data);
  EvalReport r;
  if (!a.checkpoint.empty()) {
    Predictor p(load_checkpoint(a.checkpoint));
    if (a.conf_threshold) p.codec().conf_threshold = *a.conf_threshold;
    if (a.nms_iou) p.codec().nms_iou = *a.nms_iou;
    r = evaluate(p, d, a.opt);
  } else {
    std::vector<std::size_t> ids = d.split(a.opt.split);
    if (a.opt.limit > 0 && static_cast<std::size_t>(a.opt.limit) < ids.size()) ids.resize(a.opt.limit);
    std::vector<std::vector<Detection>> dets;
    std::vector<std::vector<OrientedBox3D>> gts;
    for (std::size_t i : ids) {
      dets.push_back(read_detections(fs::path(a.detections) / (d.sample(i).id + ".json")));
      std::vector<OrientedBox3D> b;
      for (const Annotation& x : d.annotation(i).instances) b.push_back(x.box);
      gts.push_back(std::move(b));
    }
    r = evaluate_detections(dets, gts, a.opt.threads);
  }
  std::fputs(format_report(r).c_str(), stdout);
  fs::path json = a.json;
  if (json.empty() && !g.out.empty()) json = fs::path(g.out) / "eval.json";
  if (!json.empty()) {
    if (json.has_parent_path()) fs::create_directories(json.parent_path());
    Json j = to_json(r);
    j["split"] = a.opt.split;
    j["source"] = a.checkpoint.empty() ? "detections" : "checkpoint";
    write_json_file(json, j);
    std::printf("wrote %s\n", json.string().c_str());
  }
  return 0;
}

// ---------------------------------------------------------------------------
// infer

struct InferArgs {
  std::string checkpoint;
  std::vector<std::string> images;
  std::string data;
  std::string split = "all";
  std::string ann;
  double hfov = 60.0;
  std::optional<double> conf_threshold;
  std::optional<double> nms_iou;
};

void add_infer(CLI::App& app, InferArgs& a) {
  app.add_option("--checkpoint", a.checkpoint, "pose checkpoint")->required();
  auto* im = app.add_option("--image", a.images, "rgb image(s)");
  auto* da = app.add_option("--data", a.data, "run on every sample of a dataset");
  im->excludes(da);
  app.add_option("--split", a.split, "with --data: train, test or all")->capture_default_str();
  app.add_option("--ann", a.ann, "ann.json with the camera of --image");
  app.add_option("--hfov", a.hfov, "camera field of view when no ann.json is known, degrees")
      ->capture_default_str();
  app.add_option("--conf-threshold", a.conf_threshold, "override the checkpoint's value");
  app.add_option("--nms-iou", a.nms_iou, "override the checkpoint's value");
}

CameraIntrinsics camera_for(const fs::path& image, const RgbImage& img, const InferArgs& a) {
  fs::path ann = a.ann;
  if (ann.empty() && fs::exists(image.parent_path() / "ann.json")) ann = image.parent_path() / "ann.json";
  if (!ann.empty()) {
    const AnnotationFile f = annotation_from_json(read_json_file(ann));
    if (f.width != img.width || f.height != img.height)
      throw ValidationError(ann.string(), "camera size differs from " + image.string());
    return f.intrinsics;
  }
  SceneConfig s;
  s.width = img.width;
  s.height = img.height;
  s.hfov_deg = a.hfov;
  return s.intrinsics();
}

int run_infer(const InferArgs& a, const Globals& g) {
  if (a.images.empty() == a.data.empty()) throw ConfigError("infer: give --image or --data");
  const fs::path out = require_out(g);
  fs::create_directories(out);
  Predictor p(load_checkpoint(a.checkpoint));
  if (a.conf_threshold) p.codec().conf_threshold = *a.conf_threshold;
  if (a.nms_iou) p.codec().nms_iou = *a.nms_iou;

  auto run = [&](const fs::path& image, const RgbImage& img, const CameraIntrinsics& k, const std::string& stem) {
    PredictTiming t;
    DetectionFile f;
    f.image = image.string();
    f.width = img.width;
    f.height = img.height;
    f.intrinsics = k;
    f.detections = p.predict(img, k, &t);
    Json j = to_json(f);
    j["latency_ms"] = t.total_ms();
    const fs::path file = out / (stem + ".json");
    write_json_file(file, j);
    std::printf("%s: %zu detections -> %s\n", image.string().c_str(), f.detections.size(), file.string().c_str());
  };
  if (!a.data.empty()) {
    const Dataset d = load_dataset(a.data);
    for (std::size_t i : d.split(a.split)) {
      const LoadedSample s = d.load(i);
      run(d.sample_dir(i) / "rgb.png", s.rgb, s.ann.intrinsics, s.id);
    }
  } else {
    for (const std::string& path : a.images) {
      const RgbImage img = read_rgb_png(path);
      fs::path stem = fs::path(path).stem();
      // rgb.png inside a sample directory is named after the directory
      if (stem == "rgb" && fs::path(path).has_parent_path()) stem = fs::absolute(path).parent_path().filename();
      run(path, img, camera_for(path, img, a), stem.string());
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// viz

struct VizArgs {
  std::string image;
  std::string detections;
  std::string gt;
};

void add_viz(CLI::App& app, VizArgs& a) {
  app.add_option("--image", a.image, "rgb image")->required();
  app.add_option("--detections", a.detections, "detection JSON from infer");
  app.add_option("--gt", a.gt, "ann.json with ground truth boxes");
}

int run_viz(const VizArgs& a, const Globals& g) {
  if (a.detections.empty() && a.gt.empty()) throw ConfigError("viz: give --detections and/or --gt");
  const fs::path out = require_out(g);
  RgbImage img = read_rgb_png(a.image);
  std::vector<Keypoints2D> pred, truth;
  if (!a.detections.empty()) {
    if (!fs::exists(a.detections)) throw IoError(a.detections, "no such detection file");
    for (const Detection& d : detections_from_json(read_json_file(a.detections)).detections)
      pred.push_back(d.keypoints);
  }
  if (!a.gt.empty()) {
    const AnnotationFile f = annotation_from_json(read_json_file(a.gt));
    for (const Annotation& x : f.instances) truth.push_back(project_keypoints(x.box, f.intrinsics));
  }
  const OverlayStats s = draw_overlay(img, pred, truth);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_png(out, img);
  std::printf("predictions %d (%d edges), ground truth %d (%d edges) -> %s\n", s.predictions, s.prediction_edges,
              s.truths, s.truth_edges, out.string().c_str());
  return 0;
}

std::string env_name(const std::string& long_name) {
  std::string s = "BERRYPOSE_";
  for (char c : long_name) s += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

// BERRYPOSE_<FLAG> for every long option, e.g. --batch-size -> BERRYPOSE_BATCH_SIZE.
void attach_env(CLI::App& app) {
  for (CLI::Option* o : app.get_options()) {
    const auto& names = o->get_lnames();
    if (names.empty() || names[0] == "help" || names[0] == "config" || names[0] == "version") continue;
    o->envname(env_name(names[0]));
  }
  for (CLI::App* sub : app.get_subcommands({})) attach_env(*sub);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"berrypose: synthetic strawberry data, 6DoF pose training and evaluation"};
  app.set_version_flag("--version", "berrypose 0.1.0");
  app.set_config("--config", "", "TOML config file; [section] per subcommand");
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "random seed")->capture_default_str();
  app.add_option("--out", g.out, "output directory (viz: output image)");
  app.add_option("--threads", g.threads, "worker threads")->capture_default_str()->check(CLI::Range(1, 256));

  GenArgs gen;
  TrainArgs tr, pre;
  EvalArgs ev;
  InferArgs inf;
  VizArgs viz;
  pre.cfg.epochs = 30;
  pre.decay_epochs = "none";
  CLI::App* c_gen = app.add_subcommand("gen", "render a synthetic dataset");
  add_gen(*c_gen, gen);
  CLI::App* c_train = app.add_subcommand("train", "train the pose network");
  add_train_options(*c_train, tr, true);
  CLI::App* c_pre = app.add_subcommand("pretrain2d", "pretrain the backbone with a 2D box head");
  add_train_options(*c_pre, pre, false);
  CLI::App* c_eval = app.add_subcommand("eval", "AP report for a checkpoint or detection files");
  add_eval(*c_eval, ev);
  CLI::App* c_infer = app.add_subcommand("infer", "detect and pose berries in images");
  add_infer(*c_infer, inf);
  CLI::App* c_viz = app.add_subcommand("viz", "draw predicted and ground truth boxes");
  add_viz(*c_viz, viz);
  attach_env(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    if (*c_gen) return run_gen(gen, g);
    if (*c_train) return run_train(tr, g, *c_train);
    if (*c_pre) return run_pretrain(pre, g, *c_pre);
    if (*c_eval) return run_eval(ev, g);
    if (*c_infer) return run_infer(inf, g);
    if (*c_viz) return run_viz(viz, g);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
