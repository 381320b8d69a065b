#pragma once

// Dataset manifests, batch degradation, evaluation and reports.
//
// Manifest text, one record per line, tab separated, '#' starts a comment:
//
//   name    <dataset name>
//   task    <task mode, e.g. denoise or sr4>
//   image   <clean path>  <degraded path or ->  <degradation spec or ->
//
// Paths are relative to the manifest's directory. An entry without a stored
// degraded image is degraded on the fly from its spec.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "xrestormer/config.hpp"
#include "xrestormer/degradation.hpp"
#include "xrestormer/metrics.hpp"
#include "xrestormer/model.hpp"
#include "xrestormer/png_io.hpp"

namespace xrestormer {

namespace fs = std::filesystem;

struct ManifestEntry {
  std::string clean;
  std::string degraded;  // empty: apply `spec`
  std::optional<DegradationSpec> spec;

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::string name;
  TaskMode task{};
  std::vector<ManifestEntry> entries;

  bool operator==(const DatasetManifest&) const = default;
};

inline TaskMode task_mode_of(const DegradationSpec& spec) {
  static constexpr Task tasks[] = {Task::sr, Task::denoise, Task::deblur, Task::derain, Task::dehaze};
  TaskMode mode{tasks[spec.index()]};
  if (const auto* sr = std::get_if<SrSpec>(&spec)) mode.sr_scale = sr->scale;
  return mode;
}

inline std::string manifest_text(const DatasetManifest& m) {
  std::string out = "name\t" + m.name + "\ntask\t" + to_string(m.task) + "\n";
  for (const auto& e : m.entries) {
    out += "image\t" + e.clean + "\t" + (e.degraded.empty() ? "-" : e.degraded) + "\t" +
           (e.spec ? to_text(*e.spec) : "-") + "\n";
  }
  return out;
}

inline DatasetManifest parse_manifest(const std::string& text, const std::string& source = "<manifest>") {
  DatasetManifest m;
  bool have_name = false, have_task = false;
  std::istringstream in(text);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    auto fail = [&](const std::string& what) -> ConfigError {
      return ConfigError(source + ":" + std::to_string(n) + ": " + what);
    };
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    std::istringstream fields(line);
    for (std::string s; std::getline(fields, s, '\t');) f.push_back(s);
    if (f[0] == "name" && f.size() == 2) {
      m.name = f[1];
      have_name = true;
    } else if (f[0] == "task" && f.size() == 2) {
      try {
        m.task = parse_task_mode(f[1]);
      } catch (const ConfigError& e) {
        throw fail(e.what());
      }
      have_task = true;
    } else if (f[0] == "image" && f.size() == 4) {
      ManifestEntry e{f[1], f[2] == "-" ? "" : f[2], std::nullopt};
      if (f[3] != "-") {
        try {
          e.spec = parse_spec(f[3]);
        } catch (const Error& err) {
          throw fail(err.what());
        }
        if (m.task.task != Task::all_in_one && !(task_mode_of(*e.spec) == m.task)) {
          throw fail("spec '" + f[3] + "' does not match task " + to_string(m.task));
        }
      }
      if (e.clean.empty()) throw fail("empty clean path");
      if (e.degraded.empty() && !e.spec) throw fail("entry needs a degraded path or a spec");
      if (e.degraded.empty() && m.task.task == Task::all_in_one && !e.spec) throw fail("entry has no task");
      m.entries.push_back(std::move(e));
    } else {
      throw fail("expected 'name', 'task' or 'image' record, got '" + line + "'");
    }
  }
  if (!have_name || !have_task) throw ConfigError(source + ": manifest needs name and task records");
  if (m.task.task == Task::all_in_one) {
    for (const auto& e : m.entries) {
      if (!e.spec) throw ConfigError(source + ": all-in-one entries must carry a spec (" + e.clean + ")");
    }
  }
  return m;
}

/// Reads a manifest and checks that every referenced file exists.
inline DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  DatasetManifest m = parse_manifest(ss.str(), path.string());
  const fs::path dir = path.parent_path();
  for (const auto& e : m.entries) {
    for (const auto& rel : {e.clean, e.degraded}) {
      if (!rel.empty() && !fs::exists(dir / rel)) {
        throw IoError(path.string() + ": missing file " + (dir / rel).string());
      }
    }
  }
  return m;
}

inline void save_manifest(const fs::path& path, const DatasetManifest& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << manifest_text(m);
  if (!out) throw IoError("failed writing manifest " + path.string());
}

/// Seed for one image, independent of directory traversal order.
inline std::uint64_t image_seed(std::uint64_t root_seed, const std::string& relative_path) {
  return std::stoull(fnv1a_hex(std::to_string(root_seed) + ":" + relative_path), nullptr, 16);
}

inline DegradationSpec with_seed(DegradationSpec spec, std::uint64_t seed) {
  std::visit(
      [seed](auto& s) {
        if constexpr (requires { s.seed; }) s.seed = seed;
      },
      spec);
  return spec;
}

// ---------------------------------------------------------------------------
// Batch degradation

struct DegradeResult {
  DatasetManifest manifest;
  std::vector<std::string> errors;  // one line per skipped file
};

inline std::vector<std::string> list_pngs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::string> files;
  for (const auto& it : fs::recursive_directory_iterator(dir)) {
    if (!it.is_regular_file()) continue;
    std::string ext = it.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") files.push_back(fs::relative(it.path(), dir).generic_string());
  }
  std::sort(files.begin(), files.end());
  return files;
}

/// Degrades every PNG under `input_dir` into `output_dir/degraded/`, writes
/// `output_dir/manifest.txt` and returns the manifest. Unreadable or
/// incompatible images are skipped and reported.
inline DegradeResult degrade_directory(const fs::path& input_dir, const fs::path& output_dir,
                                       const DegradationSpec& spec, std::uint64_t root_seed,
                                       const std::string& name = "") {
  const auto files = list_pngs(input_dir);
  if (files.empty()) throw IoError("no PNG images under " + input_dir.string());
  DegradeResult result;
  result.manifest.name = name;
  if (name.empty()) {
    const fs::path norm = fs::absolute(input_dir).lexically_normal();
    result.manifest.name = (norm.has_filename() ? norm : norm.parent_path()).filename().string();
  }
  result.manifest.task = task_mode_of(spec);
  fs::create_directories(output_dir / "degraded");
  const fs::path clean_root = fs::relative(fs::absolute(input_dir), fs::absolute(output_dir));
  for (const auto& rel : files) {
    try {
      const Image clean = read_png((input_dir / rel).string());
      const DegradationSpec s = with_seed(spec, image_seed(root_seed, rel));
      const Image degraded = degrade(clean, s);
      const fs::path out_rel = fs::path("degraded") / rel;
      fs::create_directories((output_dir / out_rel).parent_path());
      write_png((output_dir / out_rel).string(), degraded);
      result.manifest.entries.push_back({(clean_root / rel).generic_string(), out_rel.generic_string(), s});
    } catch (const Error& e) {
      result.errors.push_back(rel + ": " + e.what());
    }
  }
  save_manifest(output_dir / "manifest.txt", result.manifest);
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Luma for super-resolution and deraining, with an s-pixel border for SR.
inline MetricConfig metric_config_for(TaskMode mode) {
  MetricConfig c;
  if (mode.task == Task::sr) {
    c.use_y_channel = true;
    c.crop_border = mode.sr_scale;
  } else if (mode.task == Task::derain) {
    c.use_y_channel = true;
  }
  return c;
}

inline std::string describe(const MetricConfig& c) {
  return std::string(c.use_y_channel ? "Y" : "RGB") + ", crop " + std::to_string(c.crop_border);
}

/// Runs the model on one degraded image of the given task. SR inputs are
/// bilinearly upsampled first.
template <class T>
Image restore_image(const ModelState<T>& model, const Image& input, TaskMode task) {
  const TaskMode& mode = model.config.task_mode;
  if (mode.task != Task::all_in_one && !(mode == task)) {
    throw ContractError("model trained for " + to_string(mode) + " cannot restore " + to_string(task));
  }
  NoGradGuard no_grad;
  Tensor<T> x = to_tensor<T>(input);
  if (task.task == Task::sr) x = bilinear_resize(x, x.dim(2) * task.sr_scale, x.dim(3) * task.sr_scale);
  return to_image(forward(model, x));
}

struct ImageResult {
  std::string clean;
  double psnr = 0, ssim = 0;
  std::string error;  // non-empty: excluded from the means
};

struct DatasetResult {
  std::string dataset;
  std::string task;
  MetricConfig metric;
  std::size_t count = 0;          // images that produced metrics
  std::size_t infinite_psnr = 0;  // of those, identical to the clean image
  double psnr_mean = 0;           // over finite PSNR values; NaN when none
  double ssim_mean = 0;
  std::vector<ImageResult> images;  // sorted by clean path
};

struct BenchmarkReport {
  std::string checkpoint_id;
  std::string config_hash;
  std::vector<DatasetResult> datasets;
};

inline void summarize(DatasetResult& r) {
  std::sort(r.images.begin(), r.images.end(), [](const auto& a, const auto& b) { return a.clean < b.clean; });
  double psnr_sum = 0, ssim_sum = 0;
  std::size_t finite = 0;
  r.count = r.infinite_psnr = 0;
  for (const auto& im : r.images) {
    if (!im.error.empty()) continue;
    ++r.count;
    ssim_sum += im.ssim;
    if (std::isinf(im.psnr)) {
      ++r.infinite_psnr;
    } else {
      psnr_sum += im.psnr;
      ++finite;
    }
  }
  r.psnr_mean = finite ? psnr_sum / static_cast<double>(finite) : std::nan("");
  r.ssim_mean = r.count ? ssim_sum / static_cast<double>(r.count) : std::nan("");
}

/// Restores and scores every manifest entry. Images are processed by up to
/// `threads` workers; results do not depend on the thread count.
template <class T>
DatasetResult evaluate_dataset(const ModelState<T>& model, const DatasetManifest& manifest, const fs::path& root,
                               unsigned threads = 1) {
  DatasetResult r;
  r.dataset = manifest.name;
  r.task = to_string(manifest.task);
  r.metric = metric_config_for(manifest.task);
  r.images.resize(manifest.entries.size());
  auto run = [&](std::size_t i) {
    const ManifestEntry& e = manifest.entries[i];
    ImageResult& out = r.images[i];
    out.clean = e.clean;
    try {
      const Image clean = read_png((root / e.clean).string());
      const Image input = e.degraded.empty() ? degrade(clean, *e.spec) : read_png((root / e.degraded).string());
      const TaskMode task = e.spec ? task_mode_of(*e.spec) : manifest.task;
      const MetricConfig metric = metric_config_for(task);
      const Image restored = restore_image(model, input, task);
      out.psnr = psnr(restored, clean, metric);
      out.ssim = ssim(restored, clean, metric);
    } catch (const Error& err) {
      out.error = err.what();
    }
  };
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < manifest.entries.size();) run(i);
  };
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < std::max(1u, threads); ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  summarize(r);
  return r;
}

// ---------------------------------------------------------------------------
// Reports

namespace detail {

inline std::string fixed(double v, int decimals) {
  if (std::isnan(v)) return "n/a";
  if (std::isinf(v)) return "inf";
  std::ostringstream os;
  os << std::fixed << std::setprecision(decimals) << v;
  return os.str();
}

inline nlohmann::json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

}  // namespace detail

inline std::string report_markdown(const BenchmarkReport& report) {
  std::ostringstream os;
  os << "# Benchmark report\n\n"
     << "checkpoint `" << report.checkpoint_id << "`, config `" << report.config_hash << "`\n\n"
     << "| Task | Dataset | PSNR (dB) | SSIM | Images | Identical | Excluded | Metric |\n"
     << "|---|---|---:|---:|---:|---:|---:|---|\n";
  for (const auto& d : report.datasets) {
    const double shown = std::isnan(d.psnr_mean) && d.infinite_psnr ? kPsnrIdentical : d.psnr_mean;
    os << "| " << d.task << " | " << d.dataset << " | " << detail::fixed(shown, 2) << " | "
       << detail::fixed(d.ssim_mean, 4) << " | " << d.count << " | " << d.infinite_psnr << " | "
       << d.images.size() - d.count << " | " << describe(d.metric) << " |\n";
  }
  for (const auto& d : report.datasets) {
    for (const auto& im : d.images) {
      if (!im.error.empty()) os << "\n- excluded " << d.dataset << "/" << im.clean << ": " << im.error;
    }
  }
  os << "\n";
  return os.str();
}

inline nlohmann::json report_json(const BenchmarkReport& report) {
  nlohmann::json j;
  j["checkpoint_id"] = report.checkpoint_id;
  j["config_hash"] = report.config_hash;
  j["datasets"] = nlohmann::json::array();
  for (const auto& d : report.datasets) {
    nlohmann::json dj;
    dj["dataset"] = d.dataset;
    dj["task"] = d.task;
    dj["metric"] = {{"y_channel", d.metric.use_y_channel},
                    {"crop_border", d.metric.crop_border},
                    {"data_range", d.metric.data_range}};
    dj["count"] = d.count;
    dj["infinite_psnr"] = d.infinite_psnr;
    dj["psnr_mean"] = detail::number_or_null(d.psnr_mean);
    dj["ssim_mean"] = detail::number_or_null(d.ssim_mean);
    dj["images"] = nlohmann::json::array();
    for (const auto& im : d.images) {
      nlohmann::json ij{{"clean", im.clean}};
      if (im.error.empty()) {
        // Infinite PSNR (identical images) is stored as null.
        ij["psnr"] = detail::number_or_null(im.psnr);
        ij["ssim"] = im.ssim;
      } else {
        ij["error"] = im.error;
      }
      dj["images"].push_back(std::move(ij));
    }
    j["datasets"].push_back(std::move(dj));
  }
  return j;
}

inline BenchmarkReport report_from_json(const nlohmann::json& j) {
  try {
    BenchmarkReport r;
    r.checkpoint_id = j.at("checkpoint_id").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& dj : j.at("datasets")) {
      DatasetResult d;
      d.dataset = dj.at("dataset").get<std::string>();
      d.task = dj.at("task").get<std::string>();
      const auto& mj = dj.at("metric");
      d.metric = {mj.at("y_channel").get<bool>(), mj.at("crop_border").get<std::size_t>(),
                  mj.at("data_range").get<double>()};
      for (const auto& ij : dj.at("images")) {
        ImageResult im;
        im.clean = ij.at("clean").get<std::string>();
        if (ij.contains("error")) {
          im.error = ij.at("error").get<std::string>();
        } else {
          im.psnr = ij.at("psnr").is_null() ? kPsnrIdentical : ij.at("psnr").get<double>();
          im.ssim = ij.at("ssim").get<double>();
        }
        d.images.push_back(std::move(im));
      }
      summarize(d);
      r.datasets.push_back(std::move(d));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed report: ") + e.what());
  }
}

}  // namespace xrestormer
