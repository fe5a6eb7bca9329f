#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "colext/model.hpp"

namespace colext {

enum class Algorithm : std::uint8_t { fedavg, fedprox, heterofl };

Algorithm parse_algorithm(const std::string& name);
const char* to_string(Algorithm a) noexcept;

struct StrategyConfig {
  Algorithm algorithm = Algorithm::fedavg;
  double fraction_fit = 1.0;
  std::uint32_t num_rounds = 1;
  std::optional<double> target_accuracy;
  // Emulated seconds a sampled client has to deliver its update.
  std::optional<double> round_deadline_s;
  double mu = 0.0;
  std::uint64_t seed = 0;

  void validate(std::uint32_t num_clients) const;
};

// ceil(fraction * num_clients), immune to binary rounding of the fraction.
std::uint32_t clients_per_round(std::uint32_t num_clients, double fraction);

struct ClientUpdate {
  std::uint32_t client_id = 0;
  ParamVector params;
  std::uint64_t num_examples = 0;
  WidthRatio width_ratio;
  double train_loss = 0.0;
  std::optional<double> val_accuracy;
};

// What one client did during one round, in emulated seconds.
struct ClientRoundStats {
  std::uint32_t client_id = 0;
  bool sampled = false;
  bool aggregated = false;
  double downlink_s = 0.0;
  double fit_s = 0.0;
  double uplink_s = 0.0;
  double eval_s = 0.0;
  std::uint64_t num_examples = 0;
  std::uint64_t num_batches = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct RoundRecord {
  std::uint32_t round = 0;
  std::vector<std::uint32_t> sampled_clients;
  double round_start = 0.0;  // emulated seconds since job start
  double round_end = 0.0;
  double mean_val_accuracy = 0.0;
  std::vector<ClientRoundStats> clients;
  // Real time the server spent on the round; not part of the exported schema.
  double wall_duration_s = 0.0;

  double duration() const noexcept { return round_end - round_start; }
};

// Seed used for sampling in `round`, derived from the strategy seed.
std::uint64_t round_seed(std::uint64_t strategy_seed, std::uint32_t round) noexcept;

// Uniform sample without replacement of clients_per_round(|ids|, fraction)
// ids, returned in ascending order.
std::vector<std::uint32_t> sample_clients(std::span<const std::uint32_t> all_ids, double fraction,
                                          std::uint64_t seed);

// Coordinate-wise sum(n_k w_k) / sum(n_k), summed in ascending client id.
ParamVector aggregate_fedavg(std::span<const ClientUpdate> updates);

// Leading ceil(ratio * width) units of every hidden layer.
ParamVector heterofl_extract(const ParamVector& global, const ModelSpec& spec, WidthRatio ratio);

// Every global coordinate held by at least one update becomes the n_k-weighted
// mean over its holders; coordinates nobody trained keep previous_global.
ParamVector heterofl_aggregate(std::span<const ClientUpdate> updates, const ParamVector& previous_global,
                               const ModelSpec& spec);

// Unweighted mean of the updates' validation accuracies.
double aggregate_round_metrics(std::span<const ClientUpdate> updates);
double mean_accuracy(std::span<const double> accuracies);
double weighted_mean_accuracy(std::span<const double> accuracies, std::span<const std::uint64_t> weights);

bool should_stop(std::span<const RoundRecord> history, const StrategyConfig& cfg);

}  // namespace colext
