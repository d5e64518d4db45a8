#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "datr/config.hpp"
#include "datr/model.hpp"
#include "datr/uda.hpp"

// DTRC checkpoint container: "DTRC" magic, little-endian u32 version and u64
// header length, a standalone JSON header (run config, epoch/phase/step,
// tensor table, center bank flags, rng state), then raw little-endian tensor
// bytes at strictly increasing offsets. Round trips are bit-exact.
namespace datr::ckpt {

namespace nk = datr::numkit;
namespace at = datr::attention;

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}
inline std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}
inline std::uint64_t unhex64(const std::string& s) {
  return std::stoull(s, nullptr, 16);
}

template <typename T>
const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

}  // namespace detail

template <typename T>
struct TrainerState {
  config::RunConfig cfg;
  int classes = 0;
  int epoch = 0;            // completed epochs
  std::string phase = "source";
  long step = 0;            // optimizer steps taken
  model::Model<T> model;
  uda::ClassCenterBank<T> bank;
  nk::Rng rng{1};
  // optimizer moments in named_params order
  std::vector<std::vector<T>> moment1, moment2;
};

template <typename T>
void save(const std::string& path, const TrainerState<T>& st) {
  auto params = model::named_params(st.model);

  struct Entry {
    std::string name;
    const std::vector<T>* data;
    std::vector<int> shape;
  };
  std::vector<Entry> entries;
  for (auto& [name, t] : params) entries.push_back({name, &t.val(), t.shape()});
  if (st.moment1.size() == params.size()) {
    for (std::size_t i = 0; i < params.size(); ++i)
      entries.push_back({"opt.m." + params[i].first, &st.moment1[i], params[i].second.shape()});
    for (std::size_t i = 0; i < params.size(); ++i)
      entries.push_back({"opt.v." + params[i].first, &st.moment2[i], params[i].second.shape()});
  }
  entries.push_back({"bank.source", &st.bank.source, {st.bank.k, st.bank.dim}});
  entries.push_back({"bank.target", &st.bank.target, {st.bank.k, st.bank.dim}});

  nlohmann::json header;
  header["config"] = st.cfg.to_json();
  header["config"]["classes"] = st.classes;
  header["epoch"] = st.epoch;
  header["phase"] = st.phase;
  header["step"] = st.step;
  nlohmann::json table = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    const std::uint64_t nbytes = e.data->size() * sizeof(T);
    table[e.name] = {{"dtype", detail::dtype_name<T>()},
                     {"shape", e.shape},
                     {"offset", offset},
                     {"nbytes", nbytes}};
    offset += nbytes;
  }
  header["tensors"] = table;
  header["bank"] = {{"k", st.bank.k},
                    {"dim", st.bank.dim},
                    {"epoch", st.bank.epoch},
                    {"valid_source", st.bank.valid_source},
                    {"valid_target", st.bank.valid_target}};
  const auto& rs = st.rng.state();
  header["rng"] = {{"seed", detail::hex64(st.rng.seed())},
                   {"state", {detail::hex64(rs[0]), detail::hex64(rs[1]), detail::hex64(rs[2]),
                              detail::hex64(rs[3])}},
                   {"has_spare", st.rng.has_spare()},
                   {"spare", st.rng.spare()}};

  const std::string header_str = header.dump();
  std::string head = "DTRC";
  detail::put_u32(head, kVersion);
  detail::put_u64(head, header_str.size());

  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path + " for writing");
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& e : entries)
    out.write(reinterpret_cast<const char*>(e.data->data()),
              static_cast<std::streamsize>(e.data->size() * sizeof(T)));
  if (!out) throw CheckpointError("write failed for " + path);
}

template <typename T>
TrainerState<T> load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  std::array<char, 16> head{};
  in.read(head.data(), head.size());
  if (in.gcount() != 16 || std::memcmp(head.data(), "DTRC", 4) != 0)
    throw CheckpointError(path + ": not a DTRC checkpoint");
  const std::uint32_t version = detail::get_u32(head.data() + 4);
  if (version != kVersion)
    throw CheckpointError(path + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t header_len = detail::get_u64(head.data() + 8);
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  if (in.gcount() != static_cast<std::streamsize>(header_len))
    throw CheckpointError(path + ": truncated header");
  nlohmann::json header = nlohmann::json::parse(header_str);

  TrainerState<T> st;
  st.cfg = config::RunConfig::from_json(header.at("config"));
  st.classes = header.at("config").at("classes").get<int>();
  st.epoch = header.at("epoch").get<int>();
  st.phase = header.at("phase").get<std::string>();
  st.step = header.at("step").get<long>();

  at::DaConfig da;
  da.window_h = da.window_w = st.cfg.neighborhood;
  da.pe_mode = at::pe_mode_from_string(st.cfg.pe);
  da.wrap_horizontal = st.cfg.wrap_horizontal;
  nk::Rng scratch(0);
  st.model = model::build_model<T>(
      model::make_config(st.cfg.variant[0], st.classes, da, st.cfg.structure), scratch);

  const std::uint64_t payload_start = 16 + header_len;
  auto read_tensor = [&](const std::string& name, std::vector<T>& dst, bool required) {
    const auto& table = header.at("tensors");
    if (!table.contains(name)) {
      if (required) throw CheckpointError(path + ": tensor '" + name + "' missing");
      return false;
    }
    const auto& meta = table.at(name);
    if (meta.at("dtype").get<std::string>() != detail::dtype_name<T>())
      throw CheckpointError(path + ": tensor '" + name + "' has dtype " +
                            meta.at("dtype").get<std::string>() + ", expected " +
                            detail::dtype_name<T>());
    const std::uint64_t offset = meta.at("offset").get<std::uint64_t>();
    const std::uint64_t nbytes = meta.at("nbytes").get<std::uint64_t>();
    if (nbytes % sizeof(T)) throw CheckpointError(path + ": tensor '" + name + "' odd byte count");
    dst.resize(nbytes / sizeof(T));
    in.clear();
    in.seekg(static_cast<std::streamoff>(payload_start + offset));
    in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(nbytes));
    if (in.gcount() != static_cast<std::streamsize>(nbytes))
      throw CheckpointError(path + ": truncated payload while reading tensor '" + name + "'");
    return true;
  };

  auto params = model::named_params(st.model);
  for (auto& [name, t] : params) {
    std::vector<T> data;
    read_tensor(name, data, true);
    if (data.size() != t.val().size())
      throw CheckpointError(path + ": tensor '" + name + "' has " + std::to_string(data.size()) +
                            " values, model expects " + std::to_string(t.val().size()));
    t.val() = std::move(data);
  }
  st.moment1.resize(params.size());
  st.moment2.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!read_tensor("opt.m." + params[i].first, st.moment1[i], false))
      st.moment1[i].assign(params[i].second.numel(), T(0));
    if (!read_tensor("opt.v." + params[i].first, st.moment2[i], false))
      st.moment2[i].assign(params[i].second.numel(), T(0));
  }

  const auto& bj = header.at("bank");
  st.bank = uda::ClassCenterBank<T>::make(bj.at("k").get<int>(), bj.at("dim").get<int>());
  st.bank.epoch = bj.at("epoch").get<int>();
  st.bank.valid_source = bj.at("valid_source").get<std::vector<unsigned char>>();
  st.bank.valid_target = bj.at("valid_target").get<std::vector<unsigned char>>();
  read_tensor("bank.source", st.bank.source, true);
  read_tensor("bank.target", st.bank.target, true);

  const auto& rj = header.at("rng");
  st.rng = nk::Rng(detail::unhex64(rj.at("seed").get<std::string>()));
  std::array<std::uint64_t, 4> state{};
  for (int i = 0; i < 4; ++i) state[i] = detail::unhex64(rj.at("state")[i].get<std::string>());
  st.rng.restore(state, rj.at("has_spare").get<bool>(), rj.at("spare").get<double>());
  return st;
}

}  // namespace datr::ckpt
