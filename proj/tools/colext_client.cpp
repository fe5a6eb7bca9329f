// Built-in FL client entrypoint: loads its data shard and device profile
// from the job directory, then serves the server until Shutdown.

#include <cstdlib>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "colext/client.hpp"
#include "colext/error.hpp"
#include "colext/orchestrator.hpp"

namespace {

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v != nullptr ? v : fallback;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"colext FL client"};
  std::string server = env_or(colext::kEnvServerAddress, "");
  std::string dev_type = env_or(colext::kEnvClientDevType, "");
  std::optional<std::uint32_t> client_id;
  if (const char* id = std::getenv(colext::kEnvClientId)) client_id = static_cast<std::uint32_t>(std::stoul(id));
  std::string job_dir = ".";
  app.add_option("--server_addr,--server-addr", server, "server host:port");
  app.add_option("--client_id,--client-id", client_id, "client id in [0, n_clients)");
  app.add_option("--dev_type,--dev-type", dev_type, "device profile name");
  app.add_option("--job-dir", job_dir, "job directory");
  CLI11_PARSE(app, argc, argv);

  if (!client_id || server.empty() || dev_type.empty()) {
    fmt::print(stderr, "client needs a server address, a client id and a dev type\n");
    return 1;
  }

  try {
    const auto [store_root, job_id] = colext::split_job_dir(job_dir);
    const colext::MetricStore store(store_root);
    const auto dir = store.job_dir(job_id);
    const auto cfg = colext::load_job_config(dir);
    auto profile = cfg.profiles.find(dev_type);
    if (profile == cfg.profiles.end()) {
      fmt::print(stderr, "dev type '{}' is not part of this job\n", dev_type);
      return 1;
    }

    colext::StoreSink sink(store, job_id, *client_id);
    colext::ClientOptions opts;
    opts.server = colext::net::parse_address(server);
    opts.client_id = *client_id;
    opts.profile = profile->second;
    opts.train = colext::read_dataset_file(colext::shard_path(dir, *client_id, true));
    opts.val = colext::read_dataset_file(colext::shard_path(dir, *client_id, false));
    opts.model = cfg.model;
    opts.scraper = colext::ScraperConfig{cfg.scrape_interval_s, cfg.push_interval_s};
    opts.sink = &sink;
    opts.power_seed = colext::round_seed(cfg.strategy.seed ^ 0x9D5EEDULL, *client_id);

    const auto result = colext::client_run(opts);
    if (result.scraper_stats) {
      fmt::print("fits={} evals={} samples={} pushed={} dropped={}\n", result.fits, result.evals,
                 result.scraper_stats->samples_scraped, result.scraper_stats->samples_pushed,
                 result.scraper_stats->samples_dropped);
    }
    if (result.exit_code != 0) fmt::print(stderr, "client {} failed: {}\n", *client_id, result.error);
    return result.exit_code;
  } catch (const colext::ConfigError& e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    fmt::print(stderr, "client failed: {}\n", e.what());
    return 2;
  }
}
