// Built-in FL server entrypoint. Runs inside a job directory created by
// `colext launch-job` and records every round into the job's metric store.

#include <cstdlib>
#include <iostream>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "colext/error.hpp"
#include "colext/file_util.hpp"
#include "colext/orchestrator.hpp"
#include "colext/server.hpp"

namespace {

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v != nullptr ? v : fallback;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"colext FL server"};
  std::string listen = env_or(colext::kEnvServerAddress, "");
  std::uint32_t n_clients = 0;
  std::uint32_t n_rounds = 0;
  std::string job_dir = ".";
  app.add_option("--server_addr,--server-addr", listen, "host:port to listen on");
  app.add_option("--n_clients,--n-clients", n_clients, "number of clients to wait for")->required();
  app.add_option("--n_rounds,--n-rounds", n_rounds, "override strategy.num_rounds");
  app.add_option("--job-dir", job_dir, "job directory");
  CLI11_PARSE(app, argc, argv);

  try {
    const auto [store_root, job_id] = colext::split_job_dir(job_dir);
    const colext::MetricStore store(store_root);
    const auto cfg = colext::load_job_config(store.job_dir(job_id));
    if (n_clients != cfg.num_clients()) {
      fmt::print(stderr, "--n_clients={} but the config lists {} clients\n", n_clients, cfg.num_clients());
      return 1;
    }
    if (listen.empty()) {
      fmt::print(stderr, "no listen address: set {} or --server_addr\n", colext::kEnvServerAddress);
      return 1;
    }

    colext::ServerOptions opts;
    opts.strategy = cfg.strategy;
    if (n_rounds > 0) opts.strategy.num_rounds = n_rounds;
    opts.model = cfg.model;
    opts.n_clients = n_clients;
    opts.listen = colext::net::parse_address(listen);
    opts.local_epochs = cfg.local_epochs;
    opts.batch_size = cfg.batch_size;
    opts.learning_rate = cfg.learning_rate;
    opts.width_ratios = cfg.width_ratios;
    opts.time_scale = cfg.time_scale;
    opts.on_listening = [](std::uint16_t port) { fmt::print("listening on port {}\n", port); };
    opts.on_round = [&](const colext::RoundRecord& r) {
      store.append_round(job_id, r);
      fmt::print("round {} end={:.3f}s acc={:.4f} sampled={}\n", r.round, r.round_end, r.mean_val_accuracy,
                 r.sampled_clients.size());
      std::fflush(stdout);
    };

    const auto result = colext::server_run(opts);
    colext::write_file_atomic(store.job_dir(job_id) / colext::kFinalParamsFile,
                              colext::encode_params(result.final_params));
    fmt::print("done after {} rounds\n", result.history.size());
    return 0;
  } catch (const colext::ConfigError& e) {
    fmt::print(stderr, "config error: {}\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    fmt::print(stderr, "server failed: {}\n", e.what());
    return 2;
  }
}
