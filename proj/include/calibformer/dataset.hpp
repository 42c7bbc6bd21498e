// Dataset manifests (manifest.json) and a frame cache that turns manifest
// entries into CalibrationSamples.
//
// Schema (version 1):
//   {
//     "format": "calibformer-dataset", "version": 1,
//     "kind": "synthetic" | "kitti", "split": "<name>",
//     "deviation": {"max_translation_m": 0.5, "max_rotation_deg": 5.0},
//     "resolution": {"target": [512, 256], "padded": [1280, 384]},
//     "n_points": 20000,                         // synthetic only
//     "frames": [{"id": "000000", "seed": 7,
//                 "image": "...png", "cloud": "...bin", "calib": "...txt"}]
//   }
// Relative frame paths resolve against the manifest's directory.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "json.hpp"

#include "calibformer/dataio.hpp"
#include "calibformer/synth.hpp"

namespace calibformer {

inline constexpr const char* kManifestName = "manifest.json";

struct FrameRef {
  std::string id;
  std::uint64_t seed = 0;
  std::string image;
  std::string cloud;
  std::string calib;
};

struct DatasetManifest {
  int version = 1;
  std::string kind = "synthetic";
  std::string split = "train";
  DeviationRange deviation{0.5, 5.0};
  PreprocessConfig preprocess;
  int n_points = 0;
  std::vector<FrameRef> frames;
  fs::path base_dir;  // directory holding manifest.json; not serialized

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }

  /// Throws if a referenced file is missing.
  void validate() const {
    for (const auto& f : frames) {
      for (const auto* p : {&f.image, &f.cloud, &f.calib}) {
        if (!fs::exists(resolve(*p))) {
          throw Error(ErrorCode::kIo, "dataset file missing: " + resolve(*p).string());
        }
      }
    }
  }

  Frame load_frame(std::size_t i) const {
    const FrameRef& f = frames.at(i);
    return calibformer::load_frame(resolve(f.image), resolve(f.cloud), resolve(f.calib));
  }
};

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : m.frames) {
    frames.push_back({{"id", f.id}, {"seed", f.seed}, {"image", f.image}, {"cloud", f.cloud}, {"calib", f.calib}});
  }
  return {{"format", "calibformer-dataset"},
          {"version", m.version},
          {"kind", m.kind},
          {"split", m.split},
          {"deviation", {{"max_translation_m", m.deviation.max_translation}, {"max_rotation_deg", m.deviation.max_rotation_deg}}},
          {"resolution",
           {{"target", {m.preprocess.target.width, m.preprocess.target.height}},
            {"padded", {m.preprocess.padded.width, m.preprocess.padded.height}}}},
          {"n_points", m.n_points},
          {"frames", frames}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  if (j.value("format", std::string()) != "calibformer-dataset") {
    throw Error(ErrorCode::kMalformedFile, "not a calibformer dataset manifest");
  }
  m.version = j.at("version").get<int>();
  if (m.version != 1) throw Error(ErrorCode::kMalformedFile, "unsupported manifest version " + std::to_string(m.version));
  m.kind = j.at("kind").get<std::string>();
  m.split = j.value("split", std::string("train"));
  const auto& dev = j.at("deviation");
  m.deviation = {dev.at("max_translation_m").get<double>(), dev.at("max_rotation_deg").get<double>()};
  const auto& res = j.at("resolution");
  const auto t = res.at("target").get<std::array<int, 2>>();
  const auto p = res.at("padded").get<std::array<int, 2>>();
  m.preprocess = {{t[0], t[1]}, {p[0], p[1]}};
  m.n_points = j.value("n_points", 0);
  for (const auto& f : j.at("frames")) {
    m.frames.push_back({f.at("id").get<std::string>(), f.value("seed", std::uint64_t{0}), f.at("image").get<std::string>(),
                        f.at("cloud").get<std::string>(), f.at("calib").get<std::string>()});
  }
  return m;
}

/// Accepts either the manifest file or the directory containing it.
inline DatasetManifest load_manifest(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / kManifestName : path;
  std::ifstream in(file);
  if (!in) throw Error(ErrorCode::kIo, "cannot open dataset manifest " + file.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kMalformedFile, file.string() + ": " + e.what());
  }
  DatasetManifest m;
  try {
    m = manifest_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kMalformedFile, file.string() + ": " + e.what());
  }
  m.base_dir = file.parent_path();
  return m;
}

inline void save_manifest(const fs::path& file, const DatasetManifest& m) {
  std::ofstream out(file);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + file.string());
  out << manifest_to_json(m).dump(2) << '\n';
}

/// Manifest over every velodyne scan of the split's sequences (every
/// `stride`-th frame). Frames are referenced by absolute-or-root-relative paths.
inline DatasetManifest make_kitti_manifest(const fs::path& root, const std::string& split, int stride,
                                           const DeviationRange& range, const PreprocessConfig& pp) {
  DatasetManifest m;
  m.kind = "kitti";
  m.split = split;
  m.deviation = range;
  m.preprocess = pp;
  m.base_dir = root;
  for (int seq : kitti_split_sequences(split)) {
    const fs::path velo = kitti_frame_paths(root, seq, 0).cloud.parent_path();
    if (!fs::exists(velo)) continue;
    std::vector<int> ids;
    for (const auto& e : fs::directory_iterator(velo)) {
      if (e.path().extension() == ".bin") ids.push_back(std::stoi(e.path().stem().string()));
    }
    std::sort(ids.begin(), ids.end());
    for (std::size_t i = 0; i < ids.size(); i += static_cast<std::size_t>(std::max(1, stride))) {
      const auto paths = kitti_frame_paths(root, seq, ids[i]);
      char id[32];
      std::snprintf(id, sizeof(id), "%02d_%06d", seq, ids[i]);
      m.frames.push_back({id, 0, fs::relative(paths.image, root).string(), fs::relative(paths.cloud, root).string(),
                          fs::relative(paths.calib, root).string()});
    }
  }
  return m;
}

/// Generates `n_scenes` synthetic scenes under `out` and writes the manifest.
/// Scene i uses seed derive_seed(seed, i).
inline DatasetManifest write_synthetic_dataset(const fs::path& out, int n_scenes, int n_points, std::uint64_t seed,
                                               const DeviationRange& range, const PreprocessConfig& pp,
                                               const SynthConfig& cfg = {}, const std::string& split = "train") {
  if (n_scenes < 0) throw Error(ErrorCode::kUsage, "n_scenes must be >= 0");
  std::error_code ec;
  fs::create_directories(out / "scenes", ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + (out / "scenes").string() + ": " + ec.message());
  DatasetManifest m;
  m.kind = "synthetic";
  m.split = split;
  m.deviation = range;
  m.preprocess = pp;
  m.n_points = n_points;
  m.base_dir = out;
  for (int i = 0; i < n_scenes; ++i) {
    char id[16];
    std::snprintf(id, sizeof(id), "%06d", i);
    const std::uint64_t scene_seed = derive_seed(seed, static_cast<std::uint64_t>(i));
    const Frame f = synth_scene(scene_seed, n_points, cfg);
    const fs::path dir = out / "scenes" / id;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());
    write_png(dir / "image.png", f.image);
    save_kitti_cloud(dir / "cloud.bin", f.cloud);
    save_kitti_calib(dir / "calib.txt", f.intrinsics, f.lidar_to_camera);
    const std::string rel = std::string("scenes/") + id + "/";
    m.frames.push_back({id, scene_seed, rel + "image.png", rel + "cloud.bin", rel + "calib.txt"});
  }
  save_manifest(out / kManifestName, m);
  return m;
}

/// Loads frames lazily, preprocesses each once, and renders samples on demand.
class Dataset {
 public:
  Dataset(DatasetManifest manifest, PreprocessConfig pp) : manifest_(std::move(manifest)), pp_(pp) {
    manifest_.validate();
  }

  std::size_t size() const { return manifest_.frames.size(); }
  const DatasetManifest& manifest() const { return manifest_; }
  const PreprocessConfig& preprocess() const { return pp_; }

  const PreparedFrame& frame(std::size_t i) {
    std::lock_guard lock(mutex_);
    auto it = cache_.find(i);
    if (it == cache_.end()) it = cache_.emplace(i, prepare_frame(manifest_.load_frame(i), pp_)).first;
    return it->second;
  }

  CalibrationSample sample(std::size_t i, const DeviationRange& range, std::uint64_t seed) {
    return make_sample(frame(i), range, seed);
  }

 private:
  DatasetManifest manifest_;
  PreprocessConfig pp_;
  std::mutex mutex_;
  std::map<std::size_t, PreparedFrame> cache_;
};

}  // namespace calibformer
