#pragma once

#include <sys/types.h>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "colext/analysis.hpp"
#include "colext/emulator.hpp"
#include "colext/metrics.hpp"
#include "colext/model.hpp"
#include "colext/partition.hpp"
#include "colext/strategy.hpp"

namespace colext {

inline constexpr const char* kEnvServerAddress = "COLEXT_SERVER_ADDRESS";
inline constexpr const char* kEnvNClients = "COLEXT_N_CLIENTS";
inline constexpr const char* kEnvClientId = "COLEXT_CLIENT_ID";
inline constexpr const char* kEnvClientDevType = "COLEXT_CLIENT_DEV_TYPE";

// Names resolving to the binaries built alongside the CLI.
inline constexpr const char* kBuiltinClient = "colext_client";
inline constexpr const char* kBuiltinServer = "colext_server";

struct Entrypoint {
  std::string entrypoint;
  std::vector<std::string> args;
};

struct DeviceGroup {
  std::string dev_type;
  std::uint32_t count = 0;
};

struct DataConfig {
  std::uint32_t num_classes = 3;
  std::uint32_t dim = 16;
  std::uint32_t per_class = 200;
  std::uint64_t seed = 0;
  BlobOptions blobs{3.0, 1.0};
  std::optional<double> alpha = 1.0;  // nullopt: IID
  double val_fraction = 0.2;
};

struct ExperimentConfig {
  std::filesystem::path source;  // config file, empty when parsed from text
  std::filesystem::path base_dir;
  std::string document;  // raw YAML text

  Entrypoint client;
  Entrypoint server;
  std::vector<DeviceGroup> devices;
  double scrape_interval_s = 0.3;
  double push_interval_s = 10.0;

  // Profiles of the listed dev types, resolved at parse time.
  ProfileTable profiles;
  double time_scale = 1.0;

  DataConfig data;
  std::string model_name = "softmax";
  ModelSpec model;  // full-width; input/output dims follow the data section
  StrategyConfig strategy;
  std::uint32_t local_epochs = 1;
  std::uint32_t batch_size = 32;
  double learning_rate = 0.1;
  std::map<std::string, WidthRatio> width_ratios;
  ActiveStages energy_mode = ActiveStages::fit_and_eval;

  std::uint32_t num_clients() const;
  // dev_type of every client id, in devices-list order.
  std::vector<std::string> roster() const;
};

// Unknown keys, missing required keys, bad types, unknown dev types and
// out-of-range values throw ConfigError with a file:line:col location.
// `profiles` overrides the document's profiles_file / built-in table.
ExperimentConfig parse_config_text(const std::string& yaml_text, const std::string& source_name,
                                   const std::filesystem::path& base_dir,
                                   const ProfileTable* profiles = nullptr);
ExperimentConfig parse_config(const std::filesystem::path& path);

// Replaces every ${NAME} from env; throws ConfigError naming unresolved ones.
std::string substitute_env(const std::string& arg, const std::map<std::string, std::string>& env);
std::vector<std::string> substitute_env(const std::vector<std::string>& args,
                                        const std::map<std::string, std::string>& env);

// Env contract of one spawned process (server: address and client count).
std::map<std::string, std::string> server_env(const std::string& address, std::uint32_t n_clients);
std::map<std::string, std::string> client_env(const std::string& address, std::uint32_t n_clients,
                                              std::uint32_t client_id, const std::string& dev_type);

// "job-YYYYMMDD-HHMMSS-xxxxxx"
std::string generate_job_id();

enum class JobState : std::uint8_t { running, finished, failed };
const char* to_string(JobState s) noexcept;
JobState parse_job_state(const std::string& s);

struct ProcessInfo {
  std::string role;  // "server" or "client"
  std::optional<std::uint32_t> client_id;
  std::string dev_type;
  pid_t pid = -1;
  std::optional<int> exit_code;  // 128 + signal when killed
  bool alive = false;            // filled in by job_status
  std::string log;               // relative to the job dir
};

struct JobInfo {
  std::string job_id;
  std::string created_at;
  JobState state = JobState::running;
  pid_t supervisor_pid = -1;
  pid_t process_group = -1;
  std::string server_address;
  std::vector<ProcessInfo> processes;
  std::string error;
};

struct LaunchOptions {
  // Directory holding colext_client / colext_server.
  std::filesystem::path bin_dir;
  // Whole-job wall-clock limit; the job fails when exceeded.
  std::optional<std::chrono::milliseconds> timeout;
  std::string host = "127.0.0.1";
};

// A launched job supervised by the current process.
class Job {
 public:
  Job(Job&&) noexcept;
  Job& operator=(Job&&) = delete;
  ~Job();

  const std::string& id() const noexcept { return info_.job_id; }
  const JobInfo& info() const noexcept { return info_; }
  std::filesystem::path dir() const { return store_.job_dir(info_.job_id); }

  // Blocks until every process exited. The first non-zero exit, or the
  // timeout, kills the whole process group and marks the job failed.
  JobState wait();

 private:
  friend Job launch_job(const ExperimentConfig&, const MetricStore&, const LaunchOptions&);
  friend Job launch_prepared(const std::string&, const ExperimentConfig&, const MetricStore&, const LaunchOptions&);
  Job(const MetricStore& store, JobInfo info, std::optional<std::chrono::steady_clock::time_point> deadline);
  void kill_all() noexcept;
  void persist() const;

  MetricStore store_;
  JobInfo info_;
  std::optional<std::chrono::steady_clock::time_point> deadline_;
  bool done_ = false;
};

// Creates the job directory and writes config copies and data shards.
std::string prepare_job(const ExperimentConfig& cfg, const MetricStore& store);

// Spawns 1 server + N clients for a prepared job. On a spawn failure every
// started process is killed and the job is recorded as failed (then throws).
Job launch_prepared(const std::string& job_id, const ExperimentConfig& cfg, const MetricStore& store,
                    const LaunchOptions& opts);

Job launch_job(const ExperimentConfig& cfg, const MetricStore& store, const LaunchOptions& opts);

// Recorded outcome plus liveness of the recorded pids. A job still marked
// running whose processes and supervisor are all gone reads as failed.
JobInfo job_status(const MetricStore& store, const std::string& job_id);

// Reloads the config copy written by prepare_job.
ExperimentConfig load_job_config(const std::filesystem::path& job_dir);

struct MetricsExport {
  ExportedFiles csv;
  std::filesystem::path summary_csv;
  std::filesystem::path summary_json;
  SummaryRow summary;
};

// samples/stage_events/rounds/summary CSVs plus summary.json. Throws for an
// unknown or still-running job.
MetricsExport get_metrics(const MetricStore& store, const std::string& job_id, const std::filesystem::path& out_dir);

// Paths inside a job directory.
std::filesystem::path shard_path(const std::filesystem::path& job_dir, std::uint32_t client_id, bool train);
inline constexpr const char* kJobConfigFile = "experiment.yaml";
inline constexpr const char* kJobProfilesFile = "profiles.yaml";
inline constexpr const char* kJobInfoFile = "job.json";
inline constexpr const char* kFinalParamsFile = "final_params.bin";

// Store root and job id of a job directory (root/jobs/<id>).
std::pair<std::filesystem::path, std::string> split_job_dir(const std::filesystem::path& job_dir);

}  // namespace colext
