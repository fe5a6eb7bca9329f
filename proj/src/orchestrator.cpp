#include "colext/orchestrator.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <ctime>
#include <fstream>
#include <random>
#include <thread>

#include <fmt/format.h>
#include <yaml-cpp/yaml.h>

#include "colext/error.hpp"
#include "colext/file_util.hpp"
#include "colext/net.hpp"
#include "json.hpp"

extern char** environ;

namespace colext {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(JobState s) noexcept {
  switch (s) {
    case JobState::running: return "running";
    case JobState::finished: return "finished";
    case JobState::failed: return "failed";
  }
  return "?";
}

JobState parse_job_state(const std::string& s) {
  if (s == "running") return JobState::running;
  if (s == "finished") return JobState::finished;
  if (s == "failed") return JobState::failed;
  throw StoreError("unknown job state '" + s + "'");
}

std::string generate_job_id() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  ::gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  std::random_device rd;
  return fmt::format("job-{}-{:06x}", stamp, rd() & 0xFFFFFFu);
}

fs::path shard_path(const fs::path& job_dir, std::uint32_t client_id, bool train) {
  return job_dir / "data" / fmt::format("client-{}-{}.bin", client_id, train ? "train" : "val");
}

std::pair<fs::path, std::string> split_job_dir(const fs::path& job_dir) {
  const auto abs = fs::weakly_canonical(fs::absolute(job_dir));
  const auto jobs = abs.parent_path();
  if (jobs.filename() != "jobs") throw StoreError("not a job directory: " + abs.string());
  return {jobs.parent_path(), abs.filename().string()};
}

namespace {

std::string iso_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  ::gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json to_json(const JobInfo& info) {
  json procs = json::array();
  for (const auto& p : info.processes) {
    procs.push_back(json{{"role", p.role},
                         {"client_id", p.client_id ? json(*p.client_id) : json(nullptr)},
                         {"dev_type", p.dev_type},
                         {"pid", p.pid},
                         {"exit_code", p.exit_code ? json(*p.exit_code) : json(nullptr)},
                         {"log", p.log}});
  }
  return json{{"job_id", info.job_id},
              {"created_at", info.created_at},
              {"state", to_string(info.state)},
              {"supervisor_pid", info.supervisor_pid},
              {"process_group", info.process_group},
              {"server_address", info.server_address},
              {"processes", procs},
              {"error", info.error}};
}

JobInfo job_info_from_json(const json& j) {
  JobInfo info;
  info.job_id = j.at("job_id").get<std::string>();
  info.created_at = j.at("created_at").get<std::string>();
  info.state = parse_job_state(j.at("state").get<std::string>());
  info.supervisor_pid = j.at("supervisor_pid").get<pid_t>();
  info.process_group = j.at("process_group").get<pid_t>();
  info.server_address = j.at("server_address").get<std::string>();
  info.error = j.at("error").get<std::string>();
  for (const auto& p : j.at("processes")) {
    ProcessInfo pi;
    pi.role = p.at("role").get<std::string>();
    if (!p.at("client_id").is_null()) pi.client_id = p.at("client_id").get<std::uint32_t>();
    pi.dev_type = p.at("dev_type").get<std::string>();
    pi.pid = p.at("pid").get<pid_t>();
    if (!p.at("exit_code").is_null()) pi.exit_code = p.at("exit_code").get<int>();
    pi.log = p.at("log").get<std::string>();
    info.processes.push_back(std::move(pi));
  }
  return info;
}

void write_job_info(const fs::path& job_dir, const JobInfo& info) {
  write_file_atomic(job_dir / kJobInfoFile, to_json(info).dump(2) + "\n");
}

JobInfo read_job_info(const fs::path& job_dir) {
  try {
    return job_info_from_json(json::parse(read_file_text(job_dir / kJobInfoFile)));
  } catch (const json::exception& e) {
    throw StoreError("corrupt job metadata in " + job_dir.string() + ": " + e.what());
  }
}

// Zombies count as gone: they no longer run, only wait to be reaped.
bool pid_alive(pid_t pid) {
  if (pid <= 0 || ::kill(pid, 0) != 0) return false;
  std::ifstream stat("/proc/" + std::to_string(pid) + "/stat");
  std::string text;
  if (!std::getline(stat, text)) return true;
  const auto close = text.rfind(')');
  return close == std::string::npos || close + 2 >= text.size() || text[close + 2] != 'Z';
}

std::string profiles_yaml(const ProfileTable& table) {
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << YAML::BeginMap;
  for (const auto& [name, p] : table) {
    out << YAML::Key << name << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "samples_per_second" << YAML::Value << p.samples_per_second;
    out << YAML::Key << "idle_power_w" << YAML::Value << p.idle_power_w;
    out << YAML::Key << "active_power_delta_w" << YAML::Value << p.active_power_delta_w;
    out << YAML::Key << "uplink_bps" << YAML::Value << p.uplink_bps;
    out << YAML::Key << "downlink_bps" << YAML::Value << p.downlink_bps;
    out << YAML::Key << "power_noise_sigma_w" << YAML::Value << p.power_noise_sigma_w;
    out << YAML::Key << "time_scale" << YAML::Value << p.time_scale;
    out << YAML::EndMap;
  }
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

struct Spawn {
  std::vector<std::string> argv;
  std::map<std::string, std::string> env;
  fs::path log;
};

std::vector<std::string> command_for(const Entrypoint& e, const ExperimentConfig& cfg, const LaunchOptions& opts,
                                     const std::map<std::string, std::string>& env) {
  std::vector<std::string> argv;
  if (e.entrypoint == kBuiltinClient || e.entrypoint == kBuiltinServer) {
    argv.push_back((opts.bin_dir / e.entrypoint).string());
  } else {
    fs::path p = e.entrypoint;
    if (p.is_relative() && p.has_parent_path()) p = cfg.base_dir / p;
    else if (p.is_relative() && fs::exists(cfg.base_dir / p)) p = cfg.base_dir / p;
    if (p.extension() == ".py") {
      argv = {"python3", p.string()};
    } else if (p.extension() == ".sh") {
      argv = {"/bin/sh", p.string()};
    } else {
      argv.push_back(p.string());
    }
  }
  for (auto& a : substitute_env(e.args, env)) argv.push_back(std::move(a));
  return argv;
}

// Inherited COLEXT_* variables are dropped so each child sees exactly the
// variables of its role.
std::vector<std::string> child_environment(const std::map<std::string, std::string>& extra) {
  std::vector<std::string> out;
  for (char** e = environ; e != nullptr && *e != nullptr; ++e) {
    if (std::strncmp(*e, "COLEXT_", 7) != 0) out.emplace_back(*e);
  }
  for (const auto& [k, v] : extra) out.push_back(k + "=" + v);
  return out;
}

// Forks and execs into process group `pgid` (0: become a new group leader).
// Exec failures are reported back through a close-on-exec pipe.
pid_t spawn(const Spawn& s, const fs::path& cwd, pid_t pgid) {
  std::vector<std::string> envs = child_environment(s.env);
  std::vector<char*> argv, envp;
  for (const auto& a : s.argv) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);
  for (const auto& e : envs) envp.push_back(const_cast<char*>(e.c_str()));
  envp.push_back(nullptr);

  int pipefd[2];
  if (::pipe2(pipefd, O_CLOEXEC) != 0) throw Error(std::string("pipe: ") + std::strerror(errno));
  const pid_t pid = ::fork();
  if (pid < 0) {
    ::close(pipefd[0]);
    ::close(pipefd[1]);
    throw Error(std::string("fork: ") + std::strerror(errno));
  }
  if (pid == 0) {
    ::close(pipefd[0]);
    ::setpgid(0, pgid);
    int err = 0;
    if (::chdir(cwd.c_str()) != 0) err = errno;
    const int log = err ? -1 : ::open(s.log.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    if (!err && log < 0) err = errno;
    const int devnull = ::open("/dev/null", O_RDONLY);
    if (!err) {
      ::dup2(devnull, 0);
      ::dup2(log, 1);
      ::dup2(log, 2);
      ::execvpe(argv[0], argv.data(), envp.data());
      err = errno;
    }
    [[maybe_unused]] auto n = ::write(pipefd[1], &err, sizeof err);
    ::_exit(127);
  }
  ::setpgid(pid, pgid == 0 ? pid : pgid);
  ::close(pipefd[1]);
  int err = 0;
  ssize_t n;
  do {
    n = ::read(pipefd[0], &err, sizeof err);
  } while (n < 0 && errno == EINTR);
  ::close(pipefd[0]);
  if (n > 0) {
    ::waitpid(pid, nullptr, 0);
    throw Error(fmt::format("cannot start '{}': {}", s.argv.front(), std::strerror(err)));
  }
  return pid;
}

int decode_status(int status) {
  if (WIFEXITED(status)) return WEXITSTATUS(status);
  if (WIFSIGNALED(status)) return 128 + WTERMSIG(status);
  return 255;
}

std::string describe(const ProcessInfo& p) {
  return p.client_id ? fmt::format("client {}", *p.client_id) : p.role;
}

}  // namespace

std::string prepare_job(const ExperimentConfig& cfg, const MetricStore& store) {
  std::string job_id;
  for (int attempt = 0;; ++attempt) {
    job_id = generate_job_id();
    try {
      store.create_job(job_id);
      break;
    } catch (const StoreError&) {
      if (attempt >= 8) throw;
    }
  }
  const auto dir = store.job_dir(job_id);
  JobInfo info;
  info.job_id = job_id;
  info.created_at = iso_now();
  info.supervisor_pid = ::getpid();
  write_job_info(dir, info);

  try {
    write_file_atomic(dir / kJobConfigFile, cfg.document);
    write_file_atomic(dir / kJobProfilesFile, profiles_yaml(cfg.profiles));

    const auto& d = cfg.data;
    const auto data = synth_dataset(d.num_classes, d.dim, d.per_class, d.seed, d.blobs);
    PartitionPlan plan;
    plan.num_clients = cfg.num_clients();
    plan.alpha = d.alpha;
    plan.seed = d.seed;
    plan.val_fraction = d.val_fraction;
    const auto shards = dirichlet_partition(data, plan);
    fs::create_directories(dir / "data");
    for (std::uint32_t k = 0; k < shards.size(); ++k) {
      const auto split = train_val_split(shards[k], d.val_fraction, round_seed(d.seed, k));
      write_dataset_file(shard_path(dir, k, true), split.train);
      write_dataset_file(shard_path(dir, k, false), split.val);
    }
  } catch (const std::exception& e) {
    info.state = JobState::failed;
    info.error = std::string("preparing job data failed: ") + e.what();
    write_job_info(dir, info);
    throw;
  }
  return job_id;
}

Job::Job(const MetricStore& store, JobInfo info, std::optional<std::chrono::steady_clock::time_point> deadline)
    : store_(store), info_(std::move(info)), deadline_(deadline) {}

Job::Job(Job&& o) noexcept
    : store_(o.store_), info_(std::move(o.info_)), deadline_(o.deadline_), done_(o.done_) {
  o.done_ = true;
}

Job::~Job() {
  if (done_) return;
  kill_all();
  info_.state = JobState::failed;
  if (info_.error.empty()) info_.error = "supervisor abandoned the job";
  try {
    persist();
  } catch (const std::exception&) {
  }
}

void Job::persist() const { write_job_info(store_.job_dir(info_.job_id), info_); }

void Job::kill_all() noexcept {
  if (info_.process_group > 0) ::killpg(info_.process_group, SIGKILL);
  for (auto& p : info_.processes) {
    if (p.exit_code || p.pid <= 0) continue;
    ::kill(p.pid, SIGKILL);
    int status = 0;
    while (::waitpid(p.pid, &status, 0) < 0 && errno == EINTR) {
    }
    p.exit_code = decode_status(status);
  }
}

JobState Job::wait() {
  if (done_) return info_.state;
  using namespace std::chrono_literals;
  for (;;) {
    bool running = false;
    const ProcessInfo* culprit = nullptr;
    for (auto& p : info_.processes) {
      if (p.exit_code) continue;
      int status = 0;
      const pid_t r = ::waitpid(p.pid, &status, WNOHANG);
      if (r == 0) {
        running = true;
        continue;
      }
      p.exit_code = r == p.pid ? decode_status(status) : 255;
      // a process killed by a signal is the root cause over peers that
      // merely noticed it
      if (*p.exit_code != 0 && (culprit == nullptr || (*p.exit_code > 128 && *culprit->exit_code <= 128))) {
        culprit = &p;
      }
    }
    if (culprit != nullptr && info_.error.empty()) {
      info_.error = fmt::format("{} exited with code {}", describe(*culprit), *culprit->exit_code);
    }
    if (!info_.error.empty()) {
      kill_all();
      info_.state = JobState::failed;
      break;
    }
    if (!running) {
      info_.state = JobState::finished;
      break;
    }
    if (deadline_ && std::chrono::steady_clock::now() > *deadline_) {
      info_.error = "job timed out";
      kill_all();
      info_.state = JobState::failed;
      break;
    }
    std::this_thread::sleep_for(10ms);
  }
  // anything the entrypoints left behind in the group goes too
  if (info_.process_group > 0) ::killpg(info_.process_group, SIGKILL);
  done_ = true;
  persist();
  return info_.state;
}

Job launch_prepared(const std::string& job_id, const ExperimentConfig& cfg, const MetricStore& store,
                    const LaunchOptions& opts) {
  const auto dir = store.job_dir(job_id);
  JobInfo info = read_job_info(dir);
  info.supervisor_pid = ::getpid();
  info.state = JobState::running;
  std::optional<std::chrono::steady_clock::time_point> deadline;
  if (opts.timeout) deadline = std::chrono::steady_clock::now() + *opts.timeout;
  Job job(store, std::move(info), deadline);

  const auto n = cfg.num_clients();
  const auto address = net::Address{opts.host, net::pick_free_port(opts.host)}.to_string();
  job.info_.server_address = address;
  fs::create_directories(dir / "logs");
  try {
    Spawn server;
    server.env = server_env(address, n);
    server.argv = command_for(cfg.server, cfg, opts, server.env);
    server.log = dir / "logs" / "server.log";
    ProcessInfo sp;
    sp.role = "server";
    sp.log = "logs/server.log";
    sp.pid = spawn(server, dir, 0);
    job.info_.process_group = sp.pid;
    job.info_.processes.push_back(sp);

    const auto roster = cfg.roster();
    for (std::uint32_t k = 0; k < n; ++k) {
      Spawn c;
      c.env = client_env(address, n, k, roster[k]);
      c.argv = command_for(cfg.client, cfg, opts, c.env);
      ProcessInfo cp;
      cp.role = "client";
      cp.client_id = k;
      cp.dev_type = roster[k];
      cp.log = fmt::format("logs/client-{}.log", k);
      c.log = dir / cp.log;
      cp.pid = spawn(c, dir, job.info_.process_group);
      job.info_.processes.push_back(cp);
    }
    job.persist();
  } catch (const std::exception& e) {
    job.info_.error = std::string("spawn failed: ") + e.what();
    job.kill_all();
    job.info_.state = JobState::failed;
    job.done_ = true;
    job.persist();
    throw Error(job.info_.error);
  }
  return job;
}

Job launch_job(const ExperimentConfig& cfg, const MetricStore& store, const LaunchOptions& opts) {
  return launch_prepared(prepare_job(cfg, store), cfg, store, opts);
}

JobInfo job_status(const MetricStore& store, const std::string& job_id) {
  if (!store.has_job(job_id)) throw StoreError("unknown job id '" + job_id + "'");
  auto info = read_job_info(store.job_dir(job_id));
  bool any_alive = false;
  for (auto& p : info.processes) {
    p.alive = !p.exit_code && pid_alive(p.pid);
    any_alive = any_alive || p.alive;
  }
  if (info.state == JobState::running && !any_alive && !pid_alive(info.supervisor_pid)) {
    info.state = JobState::failed;
    if (info.error.empty()) info.error = "supervisor exited before the job finished";
  }
  return info;
}

ExperimentConfig load_job_config(const fs::path& job_dir) {
  const auto profiles = load_profiles(job_dir / kJobProfilesFile);
  const auto path = job_dir / kJobConfigFile;
  auto cfg = parse_config_text(read_file_text(path), path.string(), job_dir, &profiles);
  cfg.source = path;
  return cfg;
}

MetricsExport get_metrics(const MetricStore& store, const std::string& job_id, const fs::path& out_dir) {
  const auto info = job_status(store, job_id);
  if (info.state == JobState::running) throw Error("job '" + job_id + "' is still running");
  const auto cfg = load_job_config(store.job_dir(job_id));

  MetricsExport out;
  out.csv = export_csv(store, job_id, out_dir);

  JobData data;
  data.job_id = job_id;
  data.algorithm = to_string(cfg.strategy.algorithm);
  data.model = cfg.model_name;
  data.fraction_fit = cfg.strategy.fraction_fit;
  data.target_accuracy = cfg.strategy.target_accuracy;
  data.rounds = store.read_rounds(job_id);
  data.samples = store.read_samples(job_id);
  data.events = store.read_events(job_id);
  data.mode = cfg.energy_mode;
  const auto roster = cfg.roster();
  for (std::uint32_t k = 0; k < roster.size(); ++k) data.idle_power_w[k] = cfg.profiles.at(roster[k]).idle_power_w;
  out.summary = summarize_job(data);

  const std::vector<SummaryRow> rows{out.summary};
  out.summary_csv = out_dir / "summary.csv";
  out.summary_json = out_dir / "summary.json";
  write_file_atomic(out.summary_csv, summary_csv(rows));
  write_file_atomic(out.summary_json, summary_json(rows));
  return out;
}

}  // namespace colext
