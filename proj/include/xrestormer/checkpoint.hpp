#pragma once

// Checkpoint file, little-endian:
//
//   char[8] "XRSTCKPT"
//   u32     version (1)
//   string  canonical config text          (u64 length + bytes)
//   u64     step
//   u64     parameter count, then per parameter: string name, tensor record
//   u8      1 if optimizer moments follow
//   u64     optimizer step, then m and v tensor records in parameter order
//
// Files are written to "<path>.tmp" and renamed into place.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include "xrestormer/config.hpp"
#include "xrestormer/serialize.hpp"

namespace xrestormer {

inline constexpr char kCheckpointMagic[8] = {'X', 'R', 'S', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
struct Checkpoint {
  RunConfig config;
  ModelState<T> model;
  std::optional<OptimizerState<T>> optimizer;
};

template <class T>
void save_checkpoint(const std::string& path, const RunConfig& config, const ModelState<T>& model,
                     const OptimizerState<T>* optimizer = nullptr) {
  if (!(config.model == model.config)) throw ContractError("save_checkpoint: config does not match the model");
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write checkpoint " + tmp);
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    io::write_pod<std::uint32_t>(os, kCheckpointVersion);
    io::write_string(os, canonical_text(config));
    io::write_pod<std::uint64_t>(os, model.step);
    const auto& entries = model.params.entries();
    io::write_pod<std::uint64_t>(os, entries.size());
    for (const auto& [name, t] : entries) {
      io::write_string(os, name);
      write_tensor(os, t);
    }
    io::write_pod<std::uint8_t>(os, optimizer ? 1 : 0);
    if (optimizer) {
      io::write_pod<std::uint64_t>(os, optimizer->step);
      for (const auto& t : optimizer->m) write_tensor(os, t);
      for (const auto& t : optimizer->v) write_tensor(os, t);
    }
    os.flush();
    if (!os) throw IoError("failed writing checkpoint " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp + " to " + path + ": " + ec.message());
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  try {
    char magic[8];
    if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
      throw IoError("not a checkpoint (bad magic)");
    }
    const auto version = io::read_pod<std::uint32_t>(is);
    if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint<T> ck;
    ck.config = parse_config(io::read_string(is), path + " header");
    ck.model = build_model<T>(ck.config.model, Initializer<T>::shapes_only());
    ck.model.step = io::read_pod<std::uint64_t>(is);
    const auto& entries = ck.model.params.entries();
    const auto count = io::read_pod<std::uint64_t>(is);
    if (count != entries.size()) {
      throw IoError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                    std::to_string(entries.size()));
    }
    for (const auto& [name, dst] : entries) {
      const std::string stored = io::read_string(is, 4096);
      if (stored != name) throw IoError("expected tensor " + name + ", found " + stored);
      const Tensor<T> src = read_tensor<T>(is);
      if (src.shape() != dst.shape()) {
        throw IoError(name + ": stored shape " + shape_str(src.shape()) + ", model expects " + shape_str(dst.shape()));
      }
      auto from = src.data();
      auto handle = dst;
      std::copy(from.begin(), from.end(), handle.data().begin());
    }
    if (io::read_pod<std::uint8_t>(is)) {
      OptimizerState<T> opt;
      opt.step = io::read_pod<std::uint64_t>(is);
      for (auto* moments : {&opt.m, &opt.v}) {
        for (const auto& [name, p] : entries) {
          Tensor<T> t = read_tensor<T>(is);
          if (t.shape() != p.shape()) throw IoError(name + ": optimizer moment shape mismatch");
          moments->push_back(t);
        }
      }
      ck.optimizer = std::move(opt);
    }
    if (is.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes after checkpoint");
    return ck;
  } catch (const Error& e) {
    throw IoError(path + ": " + e.what());
  }
}

/// Identifies a checkpoint by the hash of its bytes.
inline std::string checkpoint_id(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return fnv1a_hex(ss.str());
}

}  // namespace xrestormer
