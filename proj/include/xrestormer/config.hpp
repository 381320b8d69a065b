#pragma once

// Run configuration as flat INI text:
//
//   [model]
//   preset = full           ; or tiny, applied before the other keys
//   channels = 48,96,192,384
//   ...
//   [train]
//   lr0 = 0.0003
//   total_iters = 2000      ; cosine_periods rescale unless given explicitly
//
// Every key is optional and defaults to the full-size setting. canonical_text()
// writes every key, so parse(canonical_text(c)) == c.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "xrestormer/model.hpp"
#include "xrestormer/trainer.hpp"

namespace xrestormer {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  bool operator==(const RunConfig& o) const {
    const TrainConfig &a = train, &b = o.train;
    return model == o.model && a.lr0 == b.lr0 && a.beta1 == b.beta1 && a.beta2 == b.beta2 && a.eps == b.eps &&
           a.weight_decay == b.weight_decay && a.cosine_periods == b.cosine_periods && a.lr_min == b.lr_min &&
           a.total_iters == b.total_iters && a.patch == b.patch && a.batch == b.batch && a.flips == b.flips &&
           a.noise_sigma == b.noise_sigma && a.seed == b.seed && a.log_every == b.log_every &&
           a.checkpoint_every == b.checkpoint_every;
  }
};

namespace detail {

inline std::string format_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

/// Line (1-based) of `key` inside `[section]`, 0 when absent.
inline std::size_t line_of(const std::string& text, const std::string& section, const std::string& key) {
  std::istringstream in(text);
  std::string line, current;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const std::string t = trim(line);
    if (t.size() > 1 && t.front() == '[' && t.back() == ']') {
      current = t.substr(1, t.size() - 2);
    } else if (current == section && trim(t.substr(0, t.find('='))) == key) {
      return n;
    }
  }
  return 0;
}

class ConfigReader {
 public:
  ConfigReader(std::string text, std::string source) : text_(std::move(text)), source_(std::move(source)) {}

  [[noreturn]] void fail(const std::string& section, const std::string& key, const std::string& what) const {
    const std::size_t line = line_of(text_, section, key);
    throw ConfigError(source_ + (line ? ":" + std::to_string(line) : "") + ": [" + section + "] " + key + ": " +
                      what);
  }

  double to_double(const std::string& section, const std::string& key, const std::string& value) const {
    double v = 0;
    auto res = std::from_chars(value.data(), value.data() + value.size(), v);
    if (res.ec != std::errc() || res.ptr != value.data() + value.size()) fail(section, key, "not a number: " + value);
    return v;
  }

  std::uint64_t to_uint(const std::string& section, const std::string& key, const std::string& value) const {
    std::uint64_t v = 0;
    auto res = std::from_chars(value.data(), value.data() + value.size(), v);
    if (res.ec != std::errc() || res.ptr != value.data() + value.size()) {
      fail(section, key, "not a non-negative integer: " + value);
    }
    return v;
  }

  std::vector<std::size_t> to_list(const std::string& section, const std::string& key,
                                   const std::string& value) const {
    std::vector<std::size_t> out;
    std::istringstream in(value);
    for (std::string item; std::getline(in, item, ',');) out.push_back(to_uint(section, key, trim(item)));
    if (out.empty()) fail(section, key, "empty list");
    return out;
  }

  bool to_bool(const std::string& section, const std::string& key, const std::string& value) const {
    if (value == "true") return true;
    if (value == "false") return false;
    fail(section, key, "expected true or false, got " + value);
  }

 private:
  std::string text_, source_;
};

}  // namespace detail

inline std::string canonical_text(const RunConfig& c) {
  const ModelConfig& m = c.model;
  const TrainConfig& t = c.train;
  std::ostringstream os;
  os << "[model]\n"
     << "channels = " << detail::format_list(m.channels) << "\n"
     << "blocks = " << detail::format_list(m.blocks_per_level) << "\n"
     << "refinement = " << m.refinement_pairs << "\n"
     << "heads = " << detail::format_list(m.heads) << "\n"
     << "window = " << m.window << "\n"
     << "overlap = " << detail::format_double(m.overlap) << "\n"
     << "ffn_expansion = " << detail::format_double(m.ffn_expansion) << "\n"
     << "oca_head_dim = " << m.oca_head_dim << "\n"
     << "ssab = " << (m.ssab_enabled ? "true" : "false") << "\n"
     << "task = " << to_string(m.task_mode) << "\n"
     << "\n[train]\n"
     << "lr0 = " << detail::format_double(t.lr0) << "\n"
     << "beta1 = " << detail::format_double(t.beta1) << "\n"
     << "beta2 = " << detail::format_double(t.beta2) << "\n"
     << "eps = " << detail::format_double(t.eps) << "\n"
     << "weight_decay = " << detail::format_double(t.weight_decay) << "\n"
     << "cosine_periods = " << detail::format_list(t.cosine_periods) << "\n"
     << "lr_min = " << detail::format_double(t.lr_min) << "\n"
     << "total_iters = " << t.total_iters << "\n"
     << "patch = " << t.patch << "\n"
     << "batch = " << t.batch << "\n"
     << "flips = " << (t.flips ? "true" : "false") << "\n"
     << "noise_sigma = " << detail::format_double(t.noise_sigma) << "\n"
     << "seed = " << t.seed << "\n"
     << "log_every = " << t.log_every << "\n"
     << "checkpoint_every = " << t.checkpoint_every << "\n";
  return os.str();
}

/// 64-bit FNV-1a as 16 hex digits.
inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string config_hash(const RunConfig& c) { return fnv1a_hex(canonical_text(c)); }

/// Parses INI text over the full-size defaults. `source` names the text in errors.
inline RunConfig parse_config(const std::string& text, const std::string& source = "<config>") {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(source + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  detail::ConfigReader r(text, source);
  RunConfig c;
  bool periods_given = false;
  for (const auto& [section, body] : tree) {
    if (section != "model" && section != "train") {
      if (body.empty()) r.fail("", section, "key outside a [model] or [train] section");
      throw ConfigError(source + ": unknown section [" + section + "]");
    }
  }
  if (auto model = tree.get_child_optional("model")) {
    if (auto preset = model->get_optional<std::string>("preset")) {
      if (*preset == "tiny") {
        c.model = ModelConfig::tiny();
      } else if (*preset != "full") {
        r.fail("model", "preset", "expected full or tiny, got " + *preset);
      }
    }
    for (const auto& [key, node] : *model) {
      const std::string v = node.data();
      ModelConfig& m = c.model;
      if (key == "preset") continue;
      if (key == "channels") m.channels = r.to_list("model", key, v);
      else if (key == "blocks") m.blocks_per_level = r.to_list("model", key, v);
      else if (key == "refinement") m.refinement_pairs = r.to_uint("model", key, v);
      else if (key == "heads") m.heads = r.to_list("model", key, v);
      else if (key == "window") m.window = r.to_uint("model", key, v);
      else if (key == "overlap") m.overlap = r.to_double("model", key, v);
      else if (key == "ffn_expansion") m.ffn_expansion = r.to_double("model", key, v);
      else if (key == "oca_head_dim") m.oca_head_dim = r.to_uint("model", key, v);
      else if (key == "ssab") m.ssab_enabled = r.to_bool("model", key, v);
      else if (key == "task") {
        try {
          m.task_mode = parse_task_mode(v);
        } catch (const ConfigError& e) {
          r.fail("model", key, e.what());
        }
      } else {
        r.fail("model", key, "unknown key");
      }
    }
  }
  if (auto train = tree.get_child_optional("train")) {
    for (const auto& [key, node] : *train) {
      const std::string v = node.data();
      TrainConfig& t = c.train;
      if (key == "lr0") t.lr0 = r.to_double("train", key, v);
      else if (key == "beta1") t.beta1 = r.to_double("train", key, v);
      else if (key == "beta2") t.beta2 = r.to_double("train", key, v);
      else if (key == "eps") t.eps = r.to_double("train", key, v);
      else if (key == "weight_decay") t.weight_decay = r.to_double("train", key, v);
      else if (key == "cosine_periods") t.cosine_periods = r.to_list("train", key, v), periods_given = true;
      else if (key == "lr_min") t.lr_min = r.to_double("train", key, v);
      else if (key == "total_iters") t.total_iters = r.to_uint("train", key, v);
      else if (key == "patch") t.patch = r.to_uint("train", key, v);
      else if (key == "batch") t.batch = r.to_uint("train", key, v);
      else if (key == "flips") t.flips = r.to_bool("train", key, v);
      else if (key == "noise_sigma") t.noise_sigma = r.to_double("train", key, v);
      else if (key == "seed") t.seed = r.to_uint("train", key, v);
      else if (key == "log_every") t.log_every = r.to_uint("train", key, v);
      else if (key == "checkpoint_every") t.checkpoint_every = r.to_uint("train", key, v);
      else r.fail("train", key, "unknown key");
    }
  }
  if (!periods_given && c.train.total_iters != TrainConfig{}.total_iters) {
    const std::size_t iters = c.train.total_iters;
    c.train.total_iters = TrainConfig{}.total_iters;
    c.train = c.train.compressed(iters);
  }
  try {
    c.model.validate();
    c.train.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

}  // namespace xrestormer
