#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "datr/image_io.hpp"
#include "datr/numkit/tensor.hpp"

// On-disk dataset access for the layout written by synthdata.
namespace datr::data {

struct Meta {
  int classes = 0;
  int pinhole_size = 0;
  int erp_w = 0, erp_h = 0;
  double hfov_deg = 90.0;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, int>> splits;
};

inline Meta read_meta(const std::string& dir) {
  std::ifstream in(std::filesystem::path(dir) / "meta.json");
  if (!in) throw io::IoError("cannot read meta.json under " + dir);
  nlohmann::json j;
  in >> j;
  Meta meta;
  meta.classes = j.at("classes").get<int>();
  meta.pinhole_size = j.at("pinhole_size").get<int>();
  meta.erp_w = j.at("erp_size")[0].get<int>();
  meta.erp_h = j.at("erp_size")[1].get<int>();
  meta.hfov_deg = j.at("hfov_deg").get<double>();
  meta.seed = j.at("seed").get<std::uint64_t>();
  for (auto& [name, count] : j.at("splits").items())
    meta.splits.emplace_back(name, count.get<int>());
  return meta;
}

struct Image {
  int h = 0, w = 0;
  std::vector<float> rgb;  // h*w*3 in [0,1]
};

struct Sample {
  Image source;                       // pinhole render
  std::vector<int> source_labels;     // always present
  Image target;                       // ERP render
  std::optional<std::vector<int>> target_labels;  // eval splits only
};

inline Image load_image(const std::string& path) {
  int h, w, c;
  auto bytes = io::read_pnm(path, h, w, c);
  if (c != 3) throw io::IoError("expected 3-channel image at " + path);
  Image img;
  img.h = h;
  img.w = w;
  img.rgb.resize(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) img.rgb[i] = bytes[i] / 255.f;
  return img;
}

inline std::vector<int> load_labels(const std::string& path) {
  int h, w, c;
  auto bytes = io::read_pnm(path, h, w, c);
  if (c != 1) throw io::IoError("expected 1-channel labels at " + path);
  return std::vector<int>(bytes.begin(), bytes.end());
}

struct Split {
  Meta meta;
  std::string dir, name;
  std::vector<std::string> stems;
  std::vector<Sample> samples;
};

inline Split load_split(const std::string& dir, const std::string& name,
                        bool need_target_labels = false) {
  Split split;
  split.meta = read_meta(dir);
  split.dir = dir;
  split.name = name;
  const auto root = std::filesystem::path(dir) / name;
  std::ifstream index(root / "index.txt");
  if (!index) throw io::IoError("cannot read " + (root / "index.txt").string());
  std::string stem;
  while (std::getline(index, stem))
    if (!stem.empty()) split.stems.push_back(stem);
  for (const auto& s : split.stems) {
    Sample sample;
    sample.source = load_image((root / "source" / "images" / (s + ".ppm")).string());
    sample.source_labels = load_labels((root / "source" / "labels" / (s + ".pgm")).string());
    sample.target = load_image((root / "target" / "images" / (s + ".ppm")).string());
    const auto tl = root / "target" / "labels" / (s + ".pgm");
    if (std::filesystem::exists(tl))
      sample.target_labels = load_labels(tl.string());
    else if (need_target_labels)
      throw io::IoError("split '" + name + "' has no target labels: " + tl.string());
    split.samples.push_back(std::move(sample));
  }
  return split;
}

template <typename T>
numkit::Tensor<T> image_tensor(const Image& img) {
  std::vector<T> data(img.rgb.begin(), img.rgb.end());
  return numkit::Tensor<T>::from({img.h, img.w, 3}, std::move(data));
}

}  // namespace datr::data
