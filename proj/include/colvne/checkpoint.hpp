#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <zlib.h>

#include "json.hpp"

#include "colvne/model.hpp"
#include "colvne/tensor.hpp"

namespace colvne {

inline constexpr char kCheckpointMagic[4] = {'C', 'V', 'N', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointError : IoError {
  using IoError::IoError;
};

inline std::uint32_t crc32_of(const unsigned char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int k = 0; k < 4; ++k) bytes_.push_back(static_cast<unsigned char>(v >> (8 * k)));
  }
  void u64(std::uint64_t v) {
    for (int k = 0; k < 8; ++k) bytes_.push_back(static_cast<unsigned char>(v >> (8 * k)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  void tensor(const Tensor& t) {
    for (double v : t.data()) f64(v);
  }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(p_[pos_ + k]) << (8 * k);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(p_[pos_ + k]) << (8 * k);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), n);
    pos_ += n;
    return s;
  }
  void tensor(Tensor& t) {
    for (auto& v : t.data()) v = f64();
  }
  std::size_t remaining() const { return n_ - pos_; }

 private:
  void need(std::size_t k) const {
    if (n_ - pos_ < k) throw CheckpointError("checkpoint: unexpected end of payload");
  }
  const unsigned char* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// Layout: magic, u32 version, u32 descriptor length, descriptor JSON, f64
// parameters in registry order, BN running mean/var pairs, momentum buffers,
// u32 CRC32 of everything before it. All integers and floats little-endian.
inline std::vector<unsigned char> encode_checkpoint(const ModelState& st, const nlohmann::json& extra = nullptr) {
  nlohmann::json desc;
  desc["architecture"] = to_json(st.arch);
  desc["epochs_completed"] = st.epochs_completed;
  desc["steps"] = st.steps;
  desc["params"] = nlohmann::json::array();
  for (const auto& p : st.params) desc["params"].push_back({{"name", p.name}, {"shape", p.value.shape()}});
  desc["batch_norm"] = nlohmann::json::array();
  for (const auto& b : st.bn) desc["batch_norm"].push_back({{"name", b.name}, {"channels", b.stats.running_mean.size()}});
  if (!extra.is_null()) desc["run"] = extra;
  const std::string text = desc.dump();

  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.raw(text.data(), text.size());
  for (const auto& p : st.params) w.tensor(p.value);
  for (const auto& b : st.bn) {
    w.tensor(b.stats.running_mean);
    w.tensor(b.stats.running_var);
  }
  for (const auto& m : st.momentum) w.tensor(m);
  const std::uint32_t crc = crc32_of(w.bytes().data(), w.bytes().size());
  w.u32(crc);
  return std::move(w.bytes());
}

struct LoadedCheckpoint {
  ModelState state;
  nlohmann::json run;  // null when absent
};

inline LoadedCheckpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 16) throw CheckpointError("checkpoint: file too short (" + std::to_string(bytes.size()) + " bytes)");
  const std::size_t body = bytes.size() - 4;
  detail::ByteReader tail(bytes.data() + body, 4);
  const std::uint32_t stored = tail.u32();
  const std::uint32_t actual = crc32_of(bytes.data(), body);
  if (stored != actual) throw CheckpointError("checkpoint: CRC mismatch (file truncated or corrupted)");

  detail::ByteReader r(bytes.data(), body);
  if (r.str(4) != std::string(kCheckpointMagic, 4)) throw CheckpointError("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  const std::uint32_t len = r.u32();
  nlohmann::json desc;
  try {
    desc = nlohmann::json::parse(r.str(len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: descriptor: ") + e.what());
  }

  LoadedCheckpoint out;
  try {
    out.state = init_model(architecture_from_json(desc.at("architecture")), 0);
    out.state.epochs_completed = desc.at("epochs_completed").get<std::uint64_t>();
    out.state.steps = desc.at("steps").get<std::uint64_t>();
    const auto& params = desc.at("params");
    if (params.size() != out.state.params.size()) throw CheckpointError("checkpoint: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].at("name").get<std::string>() != out.state.params[i].name ||
          params[i].at("shape").get<Shape>() != out.state.params[i].value.shape())
        throw CheckpointError("checkpoint: parameter " + std::to_string(i) + " does not match the architecture");
    }
    if (desc.contains("run")) out.run = desc["run"];
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: descriptor: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  for (auto& p : out.state.params) r.tensor(p.value);
  for (auto& b : out.state.bn) {
    r.tensor(b.stats.running_mean);
    r.tensor(b.stats.running_var);
  }
  for (auto& m : out.state.momentum) r.tensor(m);
  if (r.remaining() != 0) throw CheckpointError("checkpoint: trailing bytes after payload");
  return out;
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Written to a sibling temporary and renamed, so a crash leaves the previous
// checkpoint intact.
inline void checkpoint_save(const ModelState& st, const std::filesystem::path& path,
                            const nlohmann::json& extra = nullptr) {
  const auto bytes = encode_checkpoint(st, extra);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp.string());
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline LoadedCheckpoint checkpoint_load_full(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

inline ModelState checkpoint_load(const std::filesystem::path& path) { return checkpoint_load_full(path).state; }

}  // namespace colvne
