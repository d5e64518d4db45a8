#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "datr/erpgeo.hpp"
#include "datr/image_io.hpp"
#include "datr/numkit/rng.hpp"

// Procedural paired datasets: a cylindrical street-like world (sky cap,
// ground plane, wall panels, spheres) is ray-cast once per pixel into both a
// pinhole view and a full equirectangular panorama of the same scene. The
// two renders use different per-class color statistics and noise levels, so
// adapting from the pinhole domain to the panoramic one has to bridge both a
// style gap and the latitude stretching of ERP.
namespace datr::synth {

namespace nk = datr::numkit;
namespace eg = datr::erpgeo;

inline constexpr int kSky = 0;
inline constexpr int kGround = 1;

struct SceneObject {
  enum Kind { kPanel, kBall } kind = kPanel;
  int cls = 2;
  // panel on the cylinder wall: longitude span, height span, radius
  double lon0 = 0, lon1 = 0, y0 = 0, y1 = 0, radius = 0;
  // ball: center (x, y, z) and radius
  double cx = 0, cy = 0, cz = 0, r = 0;
  double depth() const { return kind == kPanel ? radius : std::sqrt(cx * cx + cy * cy + cz * cz); }
};

struct SceneSpec {
  std::uint64_t seed = 0;
  int classes = 5;
  double camera_height = 1.6;  // ground plane sits this far below the camera
  bool has_ground = false;     // a default-constructed scene is all sky
  std::vector<SceneObject> objects;  // kept sorted by depth
};

struct Style {
  std::vector<std::array<float, 3>> palette;  // base RGB per class
  double noise = 0.02;
  double brightness = 1.0;
  std::uint64_t salt = 0;  // distinguishes the two domains' noise streams
};

inline Style source_style(int k) {
  Style s;
  s.palette = {{{0.55f, 0.70f, 0.92f},   // sky
                {0.35f, 0.32f, 0.28f},   // ground
                {0.58f, 0.58f, 0.62f},   // building
                {0.75f, 0.62f, 0.20f},   // pole
                {0.70f, 0.15f, 0.15f}}};  // vehicle
  while (static_cast<int>(s.palette.size()) < k) {
    const int i = static_cast<int>(s.palette.size());
    s.palette.push_back({0.2f + 0.13f * (i % 5), 0.5f - 0.07f * (i % 4), 0.3f + 0.11f * (i % 3)});
  }
  s.palette.resize(k);
  s.noise = 0.02;
  s.brightness = 1.0;
  s.salt = 0x5eed5;
  return s;
}

inline Style target_style(int k) {
  Style s = source_style(k);
  s.palette[kSky] = {0.66f, 0.62f, 0.80f};
  s.palette[kGround] = {0.29f, 0.36f, 0.24f};
  if (k > 2) s.palette[2] = {0.52f, 0.48f, 0.45f};
  if (k > 3) s.palette[3] = {0.64f, 0.58f, 0.29f};
  if (k > 4) s.palette[4] = {0.58f, 0.12f, 0.26f};
  s.noise = 0.045;
  s.brightness = 0.87;
  s.salt = 0x7a96e7;
  return s;
}

// Nearest object (smallest ray depth) along the direction, or sky/ground.
inline int scene_class(const SceneSpec& scene, const eg::SphereDir& dir, double* depth_out = nullptr) {
  const double sy = std::sin(dir.latitude);
  const double horiz = std::cos(dir.latitude);
  const double sx = horiz * std::sin(dir.longitude);
  const double sz = horiz * std::cos(dir.longitude);

  double best_t = std::numeric_limits<double>::infinity();
  int best_cls = -1;
  for (const auto& obj : scene.objects) {
    if (obj.kind == SceneObject::kPanel) {
      if (horiz <= 1e-9) continue;
      const double t = obj.radius / horiz;
      if (t >= best_t) continue;
      const double y = t * sy;
      if (y < obj.y0 || y > obj.y1) continue;
      double d = dir.longitude - obj.lon0;
      d -= 2 * eg::kPi * std::floor(d / (2 * eg::kPi));  // wrap into [0, 2pi)
      double span = obj.lon1 - obj.lon0;
      span -= 2 * eg::kPi * std::floor(span / (2 * eg::kPi));
      if (d > span) continue;
      best_t = t;
      best_cls = obj.cls;
    } else {
      const double tc = sx * obj.cx + sy * obj.cy + sz * obj.cz;
      if (tc <= 0 || tc >= best_t) continue;
      const double mx = obj.cx - tc * sx, my = obj.cy - tc * sy, mz = obj.cz - tc * sz;
      if (mx * mx + my * my + mz * mz > obj.r * obj.r) continue;
      best_t = tc;
      best_cls = obj.cls;
    }
  }
  if (best_cls >= 0) {
    if (depth_out) *depth_out = best_t;
    return best_cls;
  }
  if (scene.has_ground && sy < 0) {
    if (depth_out) *depth_out = scene.camera_height / -sy;
    return kGround;
  }
  if (depth_out) *depth_out = std::numeric_limits<double>::infinity();
  return kSky;
}

// Random street scene; rejection keeps every class present. Classes beyond
// sky/ground cycle through building panels, poles and vehicle balls.
inline SceneSpec sample_scene(nk::Rng rng, int k) {
  if (k < 2) throw std::invalid_argument("sample_scene: need at least sky and ground (K >= 2)");
  SceneSpec scene;
  scene.seed = rng.seed();
  scene.classes = k;
  scene.has_ground = true;
  for (int cls = 2; cls < k; ++cls) {
    const int kind = (cls - 2) % 3;
    const int count = 2 + static_cast<int>(rng.next_below(3));
    for (int i = 0; i < count; ++i) {
      SceneObject obj;
      obj.cls = cls;
      if (kind == 0) {  // building wall
        obj.kind = SceneObject::kPanel;
        obj.radius = rng.uniform(6.0, 12.0);
        obj.lon0 = rng.uniform(-eg::kPi, eg::kPi);
        obj.lon1 = obj.lon0 + rng.uniform(0.5, 1.2);
        obj.y0 = -scene.camera_height;
        obj.y1 = rng.uniform(2.0, 6.0);
      } else if (kind == 1) {  // pole
        obj.kind = SceneObject::kPanel;
        obj.radius = rng.uniform(2.5, 5.0);
        obj.lon0 = rng.uniform(-eg::kPi, eg::kPi);
        obj.lon1 = obj.lon0 + rng.uniform(0.07, 0.12);
        obj.y0 = -scene.camera_height;
        obj.y1 = rng.uniform(1.2, 3.0);
      } else {  // vehicle
        obj.kind = SceneObject::kBall;
        obj.r = rng.uniform(0.7, 1.1);
        const double dist = rng.uniform(2.5, 6.0);
        const double lon = rng.uniform(-eg::kPi, eg::kPi);
        obj.cx = dist * std::sin(lon);
        obj.cz = dist * std::cos(lon);
        obj.cy = -scene.camera_height + obj.r;
      }
      scene.objects.push_back(obj);
    }
  }
  std::sort(scene.objects.begin(), scene.objects.end(),
            [](const SceneObject& a, const SceneObject& b) { return a.depth() < b.depth(); });
  return scene;
}

struct Render {
  int h = 0, w = 0;
  std::vector<float> image;  // h*w*3 in [0,1]
  std::vector<int> labels;   // h*w class ids
};

namespace detail {

inline void shade_pixel(float* px, int cls, double depth, const Style& style, nk::Rng& noise) {
  const auto& base = style.palette[cls];
  double fade = 1.0;
  if (std::isfinite(depth)) fade = 0.75 + 0.25 * std::exp(-depth / 15.0);
  for (int c = 0; c < 3; ++c) {
    double v = base[c] * style.brightness * fade + style.noise * noise.normal();
    px[c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
}

}  // namespace detail

inline Render render_pinhole(const SceneSpec& scene, int w_px, int h_px, double hfov,
                             const Style& style) {
  Render out;
  out.h = h_px;
  out.w = w_px;
  out.image.resize(static_cast<std::size_t>(h_px) * w_px * 3);
  out.labels.resize(static_cast<std::size_t>(h_px) * w_px);
  nk::Rng noise = nk::Rng(scene.seed).derive(style.salt ^ 0x1);
  for (int v = 0; v < h_px; ++v)
    for (int u = 0; u < w_px; ++u) {
      const auto dir = eg::pinhole_to_dir(u, v, w_px, h_px, hfov);
      double depth = 0;
      const int cls = scene_class(scene, dir, &depth);
      const std::size_t p = static_cast<std::size_t>(v) * w_px + u;
      out.labels[p] = cls;
      detail::shade_pixel(out.image.data() + p * 3, cls, depth, style, noise);
    }
  return out;
}

inline Render render_erp(const SceneSpec& scene, int w_px, int h_px, const Style& style) {
  if (w_px != 2 * h_px)
    throw std::invalid_argument("render_erp: ERP must have 2:1 aspect, got " +
                                std::to_string(w_px) + "x" + std::to_string(h_px));
  Render out;
  out.h = h_px;
  out.w = w_px;
  out.image.resize(static_cast<std::size_t>(h_px) * w_px * 3);
  out.labels.resize(static_cast<std::size_t>(h_px) * w_px);
  nk::Rng noise = nk::Rng(scene.seed).derive(style.salt ^ 0x2);
  for (int v = 0; v < h_px; ++v)
    for (int u = 0; u < w_px; ++u) {
      const auto dir = eg::erp_to_dir(u, v, w_px, h_px);
      double depth = 0;
      const int cls = scene_class(scene, dir, &depth);
      const std::size_t p = static_cast<std::size_t>(v) * w_px + u;
      out.labels[p] = cls;
      detail::shade_pixel(out.image.data() + p * 3, cls, depth, style, noise);
    }
  return out;
}

struct SamplePair {
  Render pinhole;  // source domain, with labels
  Render erp;      // target domain; labels kept in memory, written only for eval splits
};

struct DatasetParams {
  int classes = 5;
  int pinhole_size = 128;
  int erp_height = 128;
  double hfov_deg = 90.0;
  std::uint64_t seed = 1;
};

inline SamplePair make_pair(const DatasetParams& params, std::uint64_t index) {
  nk::Rng root(params.seed);
  SceneSpec scene = sample_scene(root.derive(index), params.classes);
  const double hfov = params.hfov_deg * eg::kPi / 180.0;
  SamplePair pair;
  pair.pinhole = render_pinhole(scene, params.pinhole_size, params.pinhole_size, hfov,
                                source_style(params.classes));
  pair.erp = render_erp(scene, 2 * params.erp_height, params.erp_height,
                        target_style(params.classes));
  return pair;
}

namespace detail {

inline std::string stem_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d", index);
  return buf;
}

inline void write_render(const std::filesystem::path& dir, const std::string& stem,
                         const Render& r, bool with_labels) {
  std::vector<std::uint8_t> rgb(r.image.size());
  for (std::size_t i = 0; i < r.image.size(); ++i)
    rgb[i] = static_cast<std::uint8_t>(std::lround(std::clamp(r.image[i], 0.f, 1.f) * 255.f));
  std::filesystem::create_directories(dir / "images");
  io::write_pnm((dir / "images" / (stem + ".ppm")).string(), r.h, r.w, 3, rgb);
  if (with_labels) {
    std::vector<std::uint8_t> lab(r.labels.size());
    for (std::size_t i = 0; i < r.labels.size(); ++i)
      lab[i] = static_cast<std::uint8_t>(r.labels[i]);
    std::filesystem::create_directories(dir / "labels");
    io::write_pnm((dir / "labels" / (stem + ".pgm")).string(), r.h, r.w, 1, lab);
  }
}

}  // namespace detail

// Writes <dir>/<split>/{source,target}/{images,labels}/NNNN.{ppm,pgm} plus a
// per-split index.txt; target labels only for non-train splits.
inline std::vector<std::string> write_split(const std::string& dir, const std::string& split,
                                            const DatasetParams& params, int count,
                                            std::uint64_t index_offset) {
  const std::filesystem::path root = std::filesystem::path(dir) / split;
  std::filesystem::create_directories(root);
  const bool target_labels = split != "train";
  std::vector<std::string> stems;
  for (int i = 0; i < count; ++i) {
    const auto pair = make_pair(params, index_offset + i);
    const std::string stem = detail::stem_name(i);
    detail::write_render(root / "source", stem, pair.pinhole, true);
    detail::write_render(root / "target", stem, pair.erp, target_labels);
    stems.push_back(stem);
  }
  std::ofstream index(root / "index.txt");
  if (!index) throw io::IoError("cannot write " + (root / "index.txt").string());
  for (const auto& s : stems) index << s << "\n";
  return stems;
}

inline void write_meta(const std::string& dir, const DatasetParams& params,
                       const std::vector<std::pair<std::string, int>>& splits) {
  nlohmann::json meta;
  meta["classes"] = params.classes;
  meta["pinhole_size"] = params.pinhole_size;
  meta["erp_size"] = {2 * params.erp_height, params.erp_height};
  meta["hfov_deg"] = params.hfov_deg;
  meta["seed"] = params.seed;
  for (const auto& [name, count] : splits) meta["splits"][name] = count;
  std::ofstream out(std::filesystem::path(dir) / "meta.json");
  if (!out) throw io::IoError("cannot write meta.json under " + dir);
  out << meta.dump(2) << "\n";
}

// Full dataset: train split (no target labels) plus eval split with them.
inline void write_dataset(const std::string& dir, const DatasetParams& params, int n_train,
                          int n_val) {
  write_split(dir, "train", params, n_train, 0);
  write_split(dir, "val", params, n_val, 1000000);  // disjoint scene stream
  write_meta(dir, params, {{"train", n_train}, {"val", n_val}});
}

}  // namespace datr::synth
