#include "snaplab/run.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>

#include "json.hpp"
#include "snaplab/error.hpp"
#include "snaplab/npy.hpp"

#ifndef SNAPLAB_VERSION
#define SNAPLAB_VERSION "unknown"
#endif

namespace snaplab {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

std::string code_version() { return SNAPLAB_VERSION; }

fs::path runs_root() {
  if (const char* env = std::getenv("SNAPLAB_RUNS_DIR"); env && *env) return env;
  return fs::path("runs");
}

struct RunDir::Impl {
  json manifest;
  std::chrono::steady_clock::time_point start;
  bool finalized = false;
};

RunDir::RunDir(const std::string& command, const ExperimentConfig& config, const fs::path& explicit_dir)
    : impl_(std::make_unique<Impl>()) {
  if (!explicit_dir.empty()) {
    root_ = explicit_dir;
  } else {
    const fs::path base = runs_root() / (timestamp() + "-" + config.name);
    root_ = base;
    for (int i = 1; fs::exists(root_); ++i) root_ = base.string() + "-" + std::to_string(i);
  }
  fs::create_directories(checkpoints());
  fs::create_directories(plots());
  impl_->start = std::chrono::steady_clock::now();
  impl_->manifest = {{"command", command},
                     {"config", json::parse(config.to_text())},
                     {"config_hash", config.hash()},
                     {"seeds",
                      {{"experiment", config.seed},
                       {"train", config.train.seed},
                       {"distill", config.distill.seed},
                       {"data", config.data.seed},
                       {"sample", config.sample.seed},
                       {"curve", config.curve.seed}}},
                     {"code_version", code_version()},
                     {"schedule", config.schedule},
                     {"genome", json::parse(config.genome.to_text())},
                     {"artifacts", json::object()},
                     {"status", "running"}};
  write_manifest();
}

RunDir::~RunDir() {
  // A run that never reached finalize() is left marked as failed.
  if (!impl_ || impl_->finalized) return;
  try {
    impl_->manifest["status"] = "failed";
    write_manifest();
  } catch (...) {
  }
}
RunDir::RunDir(RunDir&&) noexcept = default;
RunDir& RunDir::operator=(RunDir&&) noexcept = default;

void RunDir::add_artifact(const std::string& role, const fs::path& path) {
  const fs::path rel = path.is_absolute() ? fs::relative(path, root_) : path;
  impl_->manifest["artifacts"][role] = rel.generic_string();
}

void RunDir::set(const std::string& key, const std::string& json_text) { impl_->manifest[key] = json::parse(json_text); }
void RunDir::set_string(const std::string& key, const std::string& value) { impl_->manifest[key] = value; }
void RunDir::set_number(const std::string& key, double value) { impl_->manifest[key] = value; }

void RunDir::finalize(const std::string& status) {
  std::string final_status = status;
  for (const auto& [role, rel] : impl_->manifest["artifacts"].items()) {
    if (!fs::exists(root_ / rel.get<std::string>())) {
      final_status = "error: missing artifact " + role;
      break;
    }
  }
  impl_->manifest["status"] = final_status;
  impl_->manifest["wallclock_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - impl_->start).count();
  write_manifest();
  impl_->finalized = true;
  if (final_status != status) throw Error("run " + root_.string() + ": " + final_status);
}

void RunDir::write_manifest() const { write_file_atomic(root_ / "manifest.json", impl_->manifest.dump(2) + "\n"); }

void write_file_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << text;
    if (!out.flush()) throw Error("cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_metrics_csv(const fs::path& path, std::span<const MetricRecord> log, std::uint64_t seed,
                       const std::string& config_hash) {
  std::string out = "step,loss,seed,config_hash\n";
  for (const MetricRecord& r : log)
    out += std::to_string(r.step) + "," + num(r.loss) + "," + std::to_string(seed) + "," + config_hash + "\n";
  write_file_atomic(path, out);
}

void write_timing_csv(const fs::path& path, std::span<const MetricRecord> log) {
  std::string out = "step,wallclock\n";
  for (const MetricRecord& r : log) out += std::to_string(r.step) + "," + num(r.wallclock) + "\n";
  write_file_atomic(path, out);
}

void write_distill_metrics_csv(const fs::path& path, std::span<const DistillStage> stages, std::uint64_t seed,
                               const std::string& config_hash) {
  std::string out = "stage,teacher_steps,student_steps,step,loss_total,loss_dstl,loss_ori,used_cfg,seed,config_hash\n";
  for (std::size_t s = 0; s < stages.size(); ++s)
    for (const DistillRecord& r : stages[s].log)
      out += std::to_string(s) + "," + std::to_string(stages[s].teacher_steps) + "," +
             std::to_string(stages[s].student_steps) + "," + std::to_string(r.step) + "," + num(r.loss_total) + "," +
             num(r.loss_dstl) + "," + num(r.loss_ori) + "," + (r.used_cfg ? "1" : "0") + "," + std::to_string(seed) +
             "," + config_hash + "\n";
  write_file_atomic(path, out);
}

void write_samples(const fs::path& dir, const Tensor& samples, std::span<const int> labels) {
  write_npy(dir / "samples.npy", samples);
  std::string out = "index,label";
  for (Eigen::Index c = 0; c < samples.cols(); ++c) out += ",x" + std::to_string(c);
  out += "\n";
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    out += std::to_string(i) + "," + std::to_string(labels[static_cast<std::size_t>(i)]);
    for (Eigen::Index c = 0; c < samples.cols(); ++c) out += "," + num(samples(i, c));
    out += "\n";
  }
  write_file_atomic(dir / "samples.csv", out);
}

}  // namespace snaplab
