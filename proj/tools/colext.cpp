// Experimenter CLI: launch-job, get-metrics, status, profiles list.
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <unistd.h>

#include <cstdio>
#include <filesystem>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "colext/error.hpp"
#include "colext/orchestrator.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kFailed = 2;

fs::path self_dir() {
  std::error_code ec;
  auto exe = fs::read_symlink("/proc/self/exe", ec);
  return ec ? fs::current_path() : exe.parent_path();
}

int launch(const colext::MetricStore& store, const std::string& config_path, fs::path bin_dir, double timeout_s,
           bool detach) {
  const auto cfg = colext::parse_config(config_path);
  colext::LaunchOptions opts;
  opts.bin_dir = bin_dir.empty() ? self_dir() : std::move(bin_dir);
  if (timeout_s > 0) {
    opts.timeout = std::chrono::milliseconds(static_cast<long long>(timeout_s * 1000));
  }
  const auto job_id = colext::prepare_job(cfg, store);
  fmt::print("{}\n", job_id);
  std::fflush(stdout);

  if (detach) {
    const pid_t pid = ::fork();
    if (pid < 0) throw colext::Error("fork failed");
    if (pid > 0) return kOk;
    ::setsid();
    if (std::freopen("/dev/null", "w", stdout) == nullptr || std::freopen("/dev/null", "w", stderr) == nullptr) {
      ::_exit(kFailed);
    }
    try {
      auto job = colext::launch_prepared(job_id, cfg, store, opts);
      job.wait();
    } catch (const std::exception&) {
    }
    std::_Exit(0);
  }

  auto job = colext::launch_prepared(job_id, cfg, store, opts);
  const auto state = job.wait();
  fmt::print("{}: {}\n", job_id, colext::to_string(state));
  if (state != colext::JobState::finished) {
    fmt::print(stderr, "job failed: {}\n", job.info().error);
    return kFailed;
  }
  return kOk;
}

int status(const colext::MetricStore& store, const std::string& job_id) {
  const auto info = colext::job_status(store, job_id);
  fmt::print("job {} {}\n", info.job_id, colext::to_string(info.state));
  if (!info.error.empty()) fmt::print("error: {}\n", info.error);
  for (const auto& p : info.processes) {
    const std::string who = p.client_id ? fmt::format("client {} ({})", *p.client_id, p.dev_type) : p.role;
    const std::string what = p.alive ? "running"
                             : p.exit_code ? fmt::format("exited {}", *p.exit_code)
                                           : std::string("gone");
    fmt::print("  {:<32} pid {:<8} {}\n", who, p.pid, what);
  }
  return kOk;
}

int metrics(const colext::MetricStore& store, const std::string& job_id, fs::path out) {
  if (out.empty()) out = fs::path("colext-metrics") / job_id;
  const auto ex = colext::get_metrics(store, job_id, out);
  fmt::print("{} ({} rows)\n", ex.csv.samples.string(), ex.csv.sample_rows);
  fmt::print("{} ({} rows)\n", ex.csv.stage_events.string(), ex.csv.event_rows);
  fmt::print("{} ({} rows)\n", ex.csv.rounds.string(), ex.csv.round_rows);
  fmt::print("{}\n", ex.summary_csv.string());
  fmt::print("{}\n", ex.summary_json.string());
  for (const auto& w : ex.summary.warnings) fmt::print(stderr, "warning: {}\n", w);
  return kOk;
}

int list_profiles(const std::string& file) {
  const auto table = file.empty() ? colext::default_profiles() : colext::load_profiles(file);
  fmt::print("{:<20} {:>10} {:>8} {:>8} {:>12} {:>12} {:>7}\n", "dev_type", "samples/s", "idle_w", "delta_w",
             "up_bps", "down_bps", "sigma_w");
  for (const auto& [name, p] : table) {
    fmt::print("{:<20} {:>10g} {:>8g} {:>8g} {:>12g} {:>12g} {:>7g}\n", name, p.samples_per_second, p.idle_power_w,
               p.active_power_delta_w, p.uplink_bps, p.downlink_bps, p.power_noise_sigma_w);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"colext: single-machine federated learning testbed"};
  app.require_subcommand(1);
  std::string store_root = "colext-store";
  app.add_option("--store", store_root, "metric store directory")->capture_default_str();

  auto* launch_cmd = app.add_subcommand("launch-job", "launch an experiment and supervise it");
  std::string config;
  std::string bin_dir;
  double timeout_s = 0;
  bool detach = false;
  launch_cmd->add_option("--config", config, "experiment config file")->required();
  launch_cmd->add_option("--bin-dir", bin_dir, "directory with colext_client/colext_server");
  launch_cmd->add_option("--timeout", timeout_s, "fail the job after this many seconds");
  launch_cmd->add_flag("--detach", detach, "return after printing the job id");

  auto* metrics_cmd = app.add_subcommand("get-metrics", "export CSVs and the summary of a finished job");
  std::string job_id;
  std::string out_dir;
  metrics_cmd->add_option("--job-id,--job_id", job_id, "job id")->required();
  metrics_cmd->add_option("--out", out_dir, "output directory (default colext-metrics/<job-id>)");

  auto* status_cmd = app.add_subcommand("status", "show job state and processes");
  status_cmd->add_option("--job-id,--job_id", job_id, "job id")->required();

  auto* profiles_cmd = app.add_subcommand("profiles", "device profiles");
  profiles_cmd->require_subcommand(1);
  auto* list_cmd = profiles_cmd->add_subcommand("list", "list device profiles");
  std::string profiles_file;
  list_cmd->add_option("--profiles-file", profiles_file, "profiles YAML (default: built-in)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kInvalid;
  }

  try {
    if (*list_cmd) return list_profiles(profiles_file);
    const colext::MetricStore store(store_root);
    if (*launch_cmd) return launch(store, config, bin_dir, timeout_s, detach);
    if (*status_cmd) return status(store, job_id);
    if (*metrics_cmd) return metrics(store, job_id, out_dir);
  } catch (const colext::ConfigError& e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return kInvalid;
  } catch (const colext::StoreError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kInvalid;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kFailed;
  }
  return kInvalid;
}
