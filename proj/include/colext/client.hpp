#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "colext/emulator.hpp"
#include "colext/metrics.hpp"
#include "colext/model.hpp"
#include "colext/net.hpp"

namespace colext {

struct ClientOptions {
  net::Address server;
  std::uint32_t client_id = 0;
  DeviceProfile profile;
  Dataset train;
  Dataset val;
  ModelSpec model;  // full-width model; the server picks the width per request
  net::RetryPolicy retry;

  // Telemetry: when set, a scraper runs for the lifetime of the session.
  std::optional<ScraperConfig> scraper;
  MetricSink* sink = nullptr;
  std::uint64_t power_seed = 0;
  // Extra observer of stage events (called on the network thread).
  std::function<void(const StageEvent&)> on_stage_event;
};

struct ClientResult {
  int exit_code = 0;  // 0 after Shutdown, 2 on any failure
  std::uint64_t fits = 0;
  std::uint64_t evals = 0;
  std::string error;
  std::optional<ScraperStats> scraper_stats;
};

// Registers with the server and serves Fit/Eval requests until Shutdown.
ClientResult client_run(const ClientOptions& opts);

}  // namespace colext
