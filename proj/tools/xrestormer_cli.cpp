// xrestormer command line: degrade, train, eval, param-audit, report.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 numeric failure.

#include <chrono>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "xrestormer/bench.hpp"
#include "xrestormer/checkpoint.hpp"

namespace xr = xrestormer;
namespace fs = std::filesystem;

namespace {

volatile std::sig_atomic_t g_interrupted = 0;

struct ModelFlags {
  std::string config;
  bool tiny = false;
  std::string task;
  std::optional<std::uint64_t> seed;
};

void add_model_flags(CLI::App* cmd, ModelFlags& f) {
  cmd->add_option("--config", f.config, "INI run configuration")->check(CLI::ExistingFile);
  cmd->add_flag("--tiny", f.tiny, "use the small channels/blocks profile");
  cmd->add_option("--task", f.task, "task mode: sr2, sr4, denoise, deblur, derain, dehaze, all-in-one");
  cmd->add_option("--seed", f.seed, "training seed");
}

xr::RunConfig resolve_config(const ModelFlags& f) {
  xr::RunConfig c = f.config.empty() ? xr::parse_config("") : xr::load_config(f.config);
  if (f.tiny) {
    const xr::TaskMode task = c.model.task_mode;
    c.model = xr::ModelConfig::tiny();
    c.model.task_mode = task;
  }
  if (!f.task.empty()) c.model.task_mode = xr::parse_task_mode(f.task);
  if (f.seed) c.train.seed = *f.seed;
  c.model.validate();
  return c;
}

int run_degrade(const std::string& input, const std::string& output, const std::string& spec_text,
                std::uint64_t seed, const std::string& name) {
  const xr::DegradationSpec spec = xr::parse_spec(spec_text);
  const auto result = xr::degrade_directory(input, output, spec, seed, name);
  for (const auto& e : result.errors) std::cerr << "skipped " << e << "\n";
  std::cout << "wrote " << result.manifest.entries.size() << " images and " << (fs::path(output) / "manifest.txt").string()
            << " (" << result.errors.size() << " skipped)\n";
  return result.manifest.entries.empty() ? 2 : 0;
}

xr::Dataset load_training_set(const fs::path& manifest_path) {
  const xr::DatasetManifest m = xr::load_manifest(manifest_path);
  const fs::path root = manifest_path.parent_path();
  xr::Dataset data{m.task, {}, {}};
  bool stored = !m.entries.empty();
  for (const auto& e : m.entries) stored = stored && !e.degraded.empty();
  for (const auto& e : m.entries) {
    data.clean.push_back(xr::read_png((root / e.clean).string()));
    if (stored) data.degraded.push_back(xr::read_png((root / e.degraded).string()));
  }
  if (data.clean.empty()) throw xr::IoError(manifest_path.string() + ": no images");
  return data;
}

int run_train(const ModelFlags& flags, const std::string& manifest, const std::string& out, const std::string& trace,
              bool resume, std::size_t steps) {
  xr::RunConfig cfg = resolve_config(flags);
  cfg.train.validate();
  const xr::Dataset data = load_training_set(manifest);

  xr::ModelState<float> model;
  xr::OptimizerState<float> opt;
  if (resume && fs::exists(out)) {
    auto ck = xr::load_checkpoint<float>(out);
    if (!(ck.config == cfg)) {
      throw xr::ConfigError(out + " was written with a different configuration (hash " +
                            xr::config_hash(ck.config) + ", now " + xr::config_hash(cfg) + ")");
    }
    model = std::move(ck.model);
    opt = ck.optimizer ? std::move(*ck.optimizer) : xr::OptimizerState<float>::zeros_like(model.params);
    std::cerr << "resuming " << out << " at iteration " << model.step << "\n";
  } else {
    model = xr::build_model<float>(cfg.model, cfg.train.seed);
    opt = xr::OptimizerState<float>::zeros_like(model.params);
  }

  const std::string trace_path = trace.empty() ? out + ".loss.csv" : trace;
  const bool fresh = !(resume && fs::exists(trace_path)) || model.step == 0;
  std::ofstream csv(trace_path, fresh ? std::ios::trunc : std::ios::app);
  if (!csv) throw xr::IoError("cannot write loss trace " + trace_path);
  if (fresh) csv << "iter,lr,loss\n";

  std::signal(SIGINT, [](int) { g_interrupted = 1; });
  xr::TrainCallbacks<float> cb;
  cb.on_log = [&](const xr::LossRecord& r) {
    char line[128];
    std::snprintf(line, sizeof line, "%zu,%.9g,%.9g", r.iter, r.lr, r.loss);
    csv << line << "\n" << std::flush;
    std::cerr << "iter " << r.iter << " lr " << r.lr << " loss " << r.loss << "\n";
  };
  cb.on_checkpoint = [&](const xr::ModelState<float>& m, const xr::OptimizerState<float>& o) {
    xr::save_checkpoint(out, cfg, m, &o);
  };
  const std::size_t start = model.step;
  cb.keep_going = [&](std::size_t done, double) { return g_interrupted == 0 && (!steps || done < start + steps); };
  xr::train(model, opt, data, cfg.train, cb);
  if (g_interrupted) {
    std::cerr << "interrupted at iteration " << model.step << ", checkpoint " << out << "\n";
    return 130;
  }
  if (model.step == cfg.train.total_iters && !fs::exists(out)) xr::save_checkpoint(out, cfg, model, &opt);
  std::cout << "trained to iteration " << model.step << ": " << out << "\n";
  return 0;
}

int run_eval(const std::string& checkpoint, const std::vector<std::string>& manifests, const std::string& md_out,
             const std::string& json_out, unsigned threads) {
  const auto ck = xr::load_checkpoint<float>(checkpoint);
  xr::BenchmarkReport report;
  report.checkpoint_id = xr::checkpoint_id(checkpoint);
  report.config_hash = xr::config_hash(ck.config);
  for (const auto& path : manifests) {
    const auto m = xr::load_manifest(path);
    report.datasets.push_back(xr::evaluate_dataset(ck.model, m, fs::path(path).parent_path(), threads));
  }
  const std::string md = xr::report_markdown(report);
  std::cout << md;
  if (!md_out.empty()) std::ofstream(md_out) << md;
  if (!json_out.empty()) {
    std::ofstream out(json_out);
    if (!out) throw xr::IoError("cannot write " + json_out);
    out << xr::report_json(report).dump(2) << "\n";
  }
  return 0;
}

int run_param_audit(const ModelFlags& flags, bool ablation) {
  xr::RunConfig cfg = resolve_config(flags);
  if (ablation) cfg.model.ssab_enabled = false;
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t closed = xr::count_parameters(cfg.model);
  const auto named = xr::enumerate_parameters(cfg.model);
  std::size_t enumerated = 0;
  std::map<std::string, std::size_t> groups;
  for (const auto& [name, shape] : named) {
    enumerated += xr::numel(shape);
    groups[name.substr(0, name.find('.'))] += xr::numel(shape);
  }
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  for (const auto& [group, n] : groups) std::printf("%-14s %12zu\n", group.c_str(), n);
  std::printf("tensors        %12zu\nclosed form    %12zu\nenumerated     %12zu\nagree          %12s\n"
              "millions       %12.3f\ntime (ms)      %12.1f\n",
              named.size(), closed, enumerated, closed == enumerated ? "yes" : "NO", closed / 1e6, ms);
  return closed == enumerated ? 0 : 3;
}

int run_report(const std::string& json_in, const std::string& md_out) {
  std::ifstream in(json_in);
  if (!in) throw xr::IoError("cannot open " + json_in);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw xr::IoError(json_in + ": " + e.what());
  }
  const std::string md = xr::report_markdown(xr::report_from_json(j));
  std::cout << md;
  if (!md_out.empty()) std::ofstream(md_out) << md;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"X-Restormer image restoration"};
  app.require_subcommand(1);

  auto* degrade = app.add_subcommand("degrade", "degrade a directory of PNG images and write a manifest");
  std::string d_input, d_output, d_spec, d_name;
  std::uint64_t d_seed = 0;
  degrade->add_option("--input", d_input, "directory of clean PNG images")->required();
  degrade->add_option("--output", d_output, "output directory")->required();
  degrade->add_option("--spec", d_spec, "degradation spec, e.g. \"noise sigma=50 seed=0\"")->required();
  degrade->add_option("--seed", d_seed, "root seed for per-image seeds");
  degrade->add_option("--name", d_name, "dataset name (default: input directory name)");

  auto* train = app.add_subcommand("train", "train a model on a manifest");
  ModelFlags t_flags;
  std::string t_manifest, t_out, t_trace;
  bool t_resume = false;
  std::size_t t_steps = 0;
  add_model_flags(train, t_flags);
  train->add_option("--manifest", t_manifest, "training manifest")->required()->check(CLI::ExistingFile);
  train->add_option("--out", t_out, "checkpoint path")->required();
  train->add_option("--trace", t_trace, "loss trace CSV (default: <out>.loss.csv)");
  train->add_flag("--resume", t_resume, "continue from --out if it exists");
  train->add_option("--steps", t_steps, "stop after this many iterations (0: run to total_iters)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on manifests");
  std::string e_ckpt, e_md, e_json;
  std::vector<std::string> e_manifests;
  unsigned e_threads = std::max(1u, std::thread::hardware_concurrency());
  eval->add_option("--checkpoint", e_ckpt, "checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--manifest", e_manifests, "one or more manifests")->required()->check(CLI::ExistingFile);
  eval->add_option("--markdown", e_md, "write the markdown table here");
  eval->add_option("--json", e_json, "write the machine-readable report here");
  eval->add_option("--threads", e_threads, "worker threads")->check(CLI::PositiveNumber);

  auto* audit = app.add_subcommand("param-audit", "count parameters of a configuration");
  ModelFlags a_flags;
  bool a_ablation = false;
  add_model_flags(audit, a_flags);
  audit->add_flag("--ablation", a_ablation, "replace every SSAB with a TSAB");

  auto* report = app.add_subcommand("report", "render a JSON report as markdown");
  std::string r_json, r_md;
  report->add_option("--json", r_json, "report from eval --json")->required()->check(CLI::ExistingFile);
  report->add_option("--markdown", r_md, "write the markdown table here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*degrade) return run_degrade(d_input, d_output, d_spec, d_seed, d_name);
    if (*train) return run_train(t_flags, t_manifest, t_out, t_trace, t_resume, t_steps);
    if (*eval) return run_eval(e_ckpt, e_manifests, e_md, e_json, e_threads);
    if (*audit) return run_param_audit(a_flags, a_ablation);
    if (*report) return run_report(r_json, r_md);
  } catch (const xr::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const xr::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const xr::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
