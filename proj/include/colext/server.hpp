#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "colext/model.hpp"
#include "colext/net.hpp"
#include "colext/strategy.hpp"

namespace colext {

struct ServerOptions {
  StrategyConfig strategy;
  ModelSpec model;  // full-width model
  std::uint32_t n_clients = 1;
  net::Address listen{"127.0.0.1", 0};
  // Local training settings pushed to clients inside every FitRequest.
  std::uint32_t local_epochs = 1;
  std::uint32_t batch_size = 32;
  double learning_rate = 0.1;
  // HeteroFL: dev_type -> width ratio; unlisted types train the full model.
  std::map<std::string, WidthRatio> width_ratios;
  double time_scale = 1.0;
  // Wall-clock bound on any single wait for client messages.
  std::chrono::milliseconds io_timeout{std::chrono::minutes(10)};

  std::function<void(std::uint16_t port)> on_listening;
  std::function<void(const RoundRecord&)> on_round;
};

struct ServerResult {
  ParamVector final_params;
  std::vector<RoundRecord> history;
};

// Synchronous FL server. Blocks until all n_clients said Hello, then runs
// rounds until should_stop, and finally broadcasts Shutdown.
//
// Round timing is an emulated timeline: the fit phase lasts as long as the
// slowest sampled client's downlink + fit + uplink (or the deadline, when
// updates were dropped), the eval phase as long as the slowest evaluation.
// Throws Error when a client disconnects or misbehaves mid-job; the
// remaining clients receive an Error message first.
ServerResult server_run(const ServerOptions& opts);

// Seed a client uses for its local shuffle in a given round.
std::uint64_t client_train_seed(std::uint64_t strategy_seed, std::uint32_t round, std::uint32_t client_id) noexcept;

}  // namespace colext
