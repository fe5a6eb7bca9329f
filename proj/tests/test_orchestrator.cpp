#include <signal.h>

#include <cerrno>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>
#include <gtest/gtest.h>

#include "colext/error.hpp"
#include "colext/orchestrator.hpp"
#include "support.hpp"

using namespace colext;
namespace t = colext::testing;
namespace fs = std::filesystem;

namespace {

const char* kReferenceConfig = R"(code:
  client:
    entrypoint: "client.py"
    args:
        - "--server_addr=${COLEXT_SERVER_ADDRESS}"
        - "--client_id=${COLEXT_CLIENT_ID}"
  server:
    entrypoint: "server.py"
    args: "--n_clients=${COLEXT_N_CLIENTS} --n_rounds=3"
devices:
  - { dev_type: LattePandaDelta3, count: 4 }
  - { dev_type: OrangePi5B,  count: 2 }
  - { dev_type: JetsonOrinNano, count: 4 }
monitoring:
  scrapping_interval: 0.3 # in seconds
  push_to_db_interval: 10 # in seconds
)";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

ExperimentConfig parse(const std::string& text) { return parse_config_text(text, "exp.yaml", "."); }

std::string config_error_location(const std::string& text) {
  try {
    parse(text);
  } catch (const ConfigError& e) {
    return e.location();
  }
  return "<no error>";
}

// Small job on the built-in binaries.
std::string builtin_config(std::uint32_t rounds, double time_scale, std::uint32_t clients = 2,
                           const std::string& target = "0.5") {
  return fmt::format(R"(devices:
  - {{ dev_type: JetsonOrinNano, count: {} }}
monitoring:
  scrapping_interval: 0.3
  push_to_db_interval: 10
emulation:
  time_scale: {}
data:
  num_classes: 3
  dim: 4
  per_class: 30
  seed: 3
strategy:
  num_rounds: {}
{}
)",
                     clients, time_scale, rounds, target.empty() ? "" : "  target_accuracy: " + target);
}

LaunchOptions launch_options() {
  LaunchOptions o;
  o.bin_dir = COLEXT_BIN_DIR;
  o.timeout = std::chrono::seconds(120);
  return o;
}

bool group_gone(pid_t pgid) { return ::killpg(pgid, 0) == -1 && errno == ESRCH; }

}  // namespace

TEST(Config, ReferenceExample) {
  const auto cfg = parse(kReferenceConfig);
  EXPECT_EQ(cfg.num_clients(), 10u);
  EXPECT_EQ(cfg.profiles.size(), 3u);
  EXPECT_DOUBLE_EQ(cfg.scrape_interval_s, 0.3);
  EXPECT_DOUBLE_EQ(cfg.push_interval_s, 10.0);
  EXPECT_EQ(cfg.client.entrypoint, "client.py");
  EXPECT_EQ(cfg.server.args, (std::vector<std::string>{"--n_clients=${COLEXT_N_CLIENTS}", "--n_rounds=3"}));
  const auto roster = cfg.roster();
  ASSERT_EQ(roster.size(), 10u);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(roster[i], "LattePandaDelta3");
  EXPECT_EQ(roster[4], "OrangePi5B");
  EXPECT_EQ(roster[9], "JetsonOrinNano");
  EXPECT_EQ(parse(kReferenceConfig).roster(), roster);
}

TEST(Config, DefaultsToBuiltinEntrypoints) {
  const auto cfg = parse("devices:\n  - {dev_type: JetsonNano, count: 2}\n");
  EXPECT_EQ(cfg.client.entrypoint, kBuiltinClient);
  EXPECT_EQ(cfg.server.entrypoint, kBuiltinServer);
  EXPECT_EQ(cfg.strategy.num_rounds, 3u);
  EXPECT_EQ(cfg.model.layer_widths, (std::vector<std::uint32_t>{16, 3}));
}

TEST(Config, ErrorsCarryLocations) {
  EXPECT_EQ(config_error_location("devices: []\n").rfind("exp.yaml:", 0), 0u);
  EXPECT_EQ(config_error_location("devices:\n  - {dev_type: JetsonNano, count: 0}\n").rfind("exp.yaml:2:", 0), 0u);
  EXPECT_EQ(config_error_location("devices:\n  - {dev_type: Toaster, count: 1}\n").rfind("exp.yaml:2:", 0), 0u);
  EXPECT_EQ(config_error_location("devices:\n  - {dev_type: JetsonNano, count: 1}\nmonitoring:\n  scrape: 1\n")
                .rfind("exp.yaml:4:", 0),
            0u);
  EXPECT_EQ(config_error_location("devices:\n  - {dev_type: JetsonNano, count: 1}\nmonitoring:\n"
                                  "  scrapping_interval: -1\n")
                .rfind("exp.yaml:4:", 0),
            0u);
  EXPECT_EQ(config_error_location("devices:\n  - {dev_type: JetsonNano, count: 1}\nstrategy:\n  num_rounds: many\n")
                .rfind("exp.yaml:4:", 0),
            0u);
  EXPECT_NE(config_error_location("monitoring: {}\n"), "<no error>");
  EXPECT_NE(config_error_location("devices:\n  - {dev_type: JetsonNano, count: 1}\ncode:\n  server:\n"
                                  "    entrypoint: s.sh\n    args: [\"${COLEXT_CLIENT_ID}\"]\n"),
            "<no error>");
}

TEST(Config, TooLittleDataForClients) {
  EXPECT_THROW(parse("devices:\n  - {dev_type: JetsonNano, count: 4}\ndata: {num_classes: 2, per_class: 5}\n"),
               ConfigError);
}

TEST(Env, Substitution) {
  const std::map<std::string, std::string> env{{"COLEXT_CLIENT_ID", "3"}, {"COLEXT_SERVER_ADDRESS", "h:1"}};
  EXPECT_EQ(substitute_env("--client_id=${COLEXT_CLIENT_ID}", env), "--client_id=3");
  EXPECT_EQ(substitute_env("plain", env), "plain");
  EXPECT_EQ(substitute_env("${COLEXT_SERVER_ADDRESS}/${COLEXT_CLIENT_ID}", env), "h:1/3");
  try {
    substitute_env("${UNKNOWN_VAR}", env);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("UNKNOWN_VAR"), std::string::npos);
  }
}

TEST(Env, Contract) {
  EXPECT_EQ(client_env("127.0.0.1:9", 10, 3, "OrangePi5B"),
            (std::map<std::string, std::string>{{"COLEXT_SERVER_ADDRESS", "127.0.0.1:9"},
                                                {"COLEXT_N_CLIENTS", "10"},
                                                {"COLEXT_CLIENT_ID", "3"},
                                                {"COLEXT_CLIENT_DEV_TYPE", "OrangePi5B"}}));
  EXPECT_EQ(server_env("127.0.0.1:9", 10),
            (std::map<std::string, std::string>{{"COLEXT_SERVER_ADDRESS", "127.0.0.1:9"}, {"COLEXT_N_CLIENTS", "10"}}));
}

TEST(JobId, UniqueAndShaped) {
  std::set<std::string> ids;
  for (int i = 0; i < 100; ++i) ids.insert(generate_job_id());
  EXPECT_EQ(ids.size(), 100u);
  EXPECT_EQ(ids.begin()->rfind("job-", 0), 0u);
  EXPECT_EQ(ids.begin()->size(), std::string("job-YYYYMMDD-HHMMSS-xxxxxx").size());
}

TEST(Launch, ExternalEntrypointsSeeTheirEnv) {
  t::TempDir dir;
  write(dir / "client.sh", "env | grep ^COLEXT_ | sort > \"env-client-$COLEXT_CLIENT_ID.txt\"\necho \"$@\" > \"args-$COLEXT_CLIENT_ID.txt\"\n");
  write(dir / "server.sh", "env | grep ^COLEXT_ | sort > env-server.txt\n");
  write(dir / "exp.yaml", std::string(R"(code:
  client:
    entrypoint: client.sh
    args: ["--client_id=${COLEXT_CLIENT_ID}"]
  server:
    entrypoint: server.sh
devices:
  - { dev_type: LattePandaDelta3, count: 2 }
  - { dev_type: OrangePi5B, count: 1 }
)"));
  const auto cfg = parse_config(dir / "exp.yaml");
  MetricStore store(dir / "store");
  ::setenv("COLEXT_STRAY", "leak", 1);
  auto job = launch_job(cfg, store, launch_options());
  ::unsetenv("COLEXT_STRAY");
  EXPECT_EQ(job.wait(), JobState::finished) << job.info().error;
  ASSERT_EQ(job.info().processes.size(), 4u);

  const auto addr = job.info().server_address;
  EXPECT_EQ(slurp(job.dir() / "env-server.txt"),
            "COLEXT_N_CLIENTS=3\nCOLEXT_SERVER_ADDRESS=" + addr + "\n");
  const char* types[] = {"LattePandaDelta3", "LattePandaDelta3", "OrangePi5B"};
  for (int k = 0; k < 3; ++k) {
    EXPECT_EQ(slurp(job.dir() / fmt::format("env-client-{}.txt", k)),
              fmt::format("COLEXT_CLIENT_DEV_TYPE={}\nCOLEXT_CLIENT_ID={}\nCOLEXT_N_CLIENTS=3\nCOLEXT_SERVER_ADDRESS={}\n",
                          types[k], k, addr));
    EXPECT_EQ(slurp(job.dir() / fmt::format("args-{}.txt", k)), fmt::format("--client_id={}\n", k));
  }
  EXPECT_TRUE(group_gone(job.info().process_group));
  EXPECT_EQ(job_status(store, job.id()).state, JobState::finished);
}

TEST(Launch, SpawnFailureFailsTheJob) {
  t::TempDir dir;
  auto cfg = parse("devices:\n  - {dev_type: JetsonNano, count: 2}\ncode:\n  client: {entrypoint: /nonexistent/bin}\n");
  MetricStore store(dir / "store");
  EXPECT_THROW(launch_job(cfg, store, launch_options()), Error);
  const auto jobs = store.list_jobs();
  ASSERT_EQ(jobs.size(), 1u);
  const auto info = job_status(store, jobs[0]);
  EXPECT_EQ(info.state, JobState::failed);
  EXPECT_TRUE(group_gone(info.process_group));
}

TEST(Launch, BuiltinSmokeRunAndMetrics) {
  t::TempDir dir;
  const auto cfg = parse(builtin_config(1, 50.0));
  MetricStore store(dir / "store");
  auto job = launch_job(cfg, store, launch_options());
  EXPECT_EQ(job.wait(), JobState::finished) << job.info().error;
  for (const auto& p : job.info().processes) EXPECT_EQ(p.exit_code, 0) << p.role << " " << slurp(job.dir() / p.log);
  EXPECT_TRUE(fs::exists(job.dir() / kFinalParamsFile));
  for (std::uint32_t k = 0; k < 2; ++k) {
    EXPECT_TRUE(fs::exists(shard_path(job.dir(), k, true)));
    EXPECT_TRUE(fs::exists(shard_path(job.dir(), k, false)));
  }

  const auto a = get_metrics(store, job.id(), dir / "a");
  const auto b = get_metrics(store, job.id(), dir / "b");
  for (const auto* name : {"samples.csv", "stage_events.csv", "rounds.csv", "summary.csv"}) {
    EXPECT_TRUE(fs::exists(dir / "a" / name)) << name;
    EXPECT_EQ(slurp(dir / "a" / name), slurp(dir / "b" / name)) << name;
  }
  EXPECT_EQ(a.csv.round_rows, 1u);
  EXPECT_EQ(a.csv.event_rows, 2u * 4);
  EXPECT_EQ(a.csv.sample_rows, store.read_samples(job.id()).size());
  EXPECT_GT(a.csv.sample_rows, 0u);
  EXPECT_EQ(b.summary.job_id, job.id());
  EXPECT_EQ(split_job_dir(job.dir()), std::make_pair(store.root(), job.id()));
  EXPECT_EQ(load_job_config(job.dir()).roster(), cfg.roster());
}

TEST(Launch, UnknownJob) {
  t::TempDir dir;
  MetricStore store(dir / "store");
  EXPECT_THROW(job_status(store, "job-nope"), StoreError);
  EXPECT_THROW(get_metrics(store, "job-nope", dir / "out"), StoreError);
}

TEST(Launch, KilledClientFailsJobWithoutOrphans) {
  t::TempDir dir;
  const auto cfg = parse(builtin_config(200, 2.0, 3, ""));
  MetricStore store(dir / "store");
  auto job = launch_job(cfg, store, launch_options());
  const auto id = job.id();

  std::this_thread::sleep_for(std::chrono::milliseconds(1500));
  const auto live = job_status(store, id);
  EXPECT_EQ(live.state, JobState::running);
  EXPECT_THROW(get_metrics(store, id, dir / "out"), Error);
  ASSERT_EQ(live.processes.size(), 4u);
  for (const auto& p : live.processes) EXPECT_TRUE(p.alive) << p.role;

  ::kill(live.processes[2].pid, SIGKILL);
  EXPECT_EQ(job.wait(), JobState::failed);
  EXPECT_NE(job.info().error.find("client 1"), std::string::npos) << job.info().error;
  EXPECT_TRUE(group_gone(job.info().process_group));
  for (const auto& p : job.info().processes) EXPECT_TRUE(p.exit_code.has_value());
  EXPECT_EQ(job_status(store, id).state, JobState::failed);
  EXPECT_NO_THROW(get_metrics(store, id, dir / "out"));
}
