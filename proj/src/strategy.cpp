#include "colext/strategy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "colext/error.hpp"

namespace colext {

Algorithm parse_algorithm(const std::string& name) {
  if (name == "fedavg") return Algorithm::fedavg;
  if (name == "fedprox") return Algorithm::fedprox;
  if (name == "heterofl") return Algorithm::heterofl;
  throw InvalidArgument("unknown algorithm '" + name + "'");
}

const char* to_string(Algorithm a) noexcept {
  switch (a) {
    case Algorithm::fedavg: return "fedavg";
    case Algorithm::fedprox: return "fedprox";
    case Algorithm::heterofl: return "heterofl";
  }
  return "?";
}

std::uint32_t clients_per_round(std::uint32_t num_clients, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidArgument("fraction_fit must lie in (0, 1]");
  const double exact = fraction * static_cast<double>(num_clients);
  auto m = static_cast<std::uint32_t>(std::ceil(exact - 1e-9 * std::max(1.0, exact)));
  return std::clamp<std::uint32_t>(m, num_clients == 0 ? 0 : 1, num_clients);
}

void StrategyConfig::validate(std::uint32_t num_clients) const {
  if (num_clients == 0) throw InvalidArgument("strategy needs at least one client");
  if (!(fraction_fit > 0.0 && fraction_fit <= 1.0)) throw InvalidArgument("fraction_fit must lie in (0, 1]");
  if (clients_per_round(num_clients, fraction_fit) < 1) throw InvalidArgument("fraction_fit samples no client");
  if (num_rounds == 0) throw InvalidArgument("num_rounds must be positive");
  if (target_accuracy && !(*target_accuracy > 0.0 && *target_accuracy <= 1.0)) {
    throw InvalidArgument("target_accuracy must lie in (0, 1]");
  }
  if (round_deadline_s && !(*round_deadline_s > 0.0)) throw InvalidArgument("round_deadline_s must be positive");
  if (!(mu >= 0.0) || !std::isfinite(mu)) throw InvalidArgument("mu must be finite and non-negative");
}

std::uint64_t round_seed(std::uint64_t strategy_seed, std::uint32_t round) noexcept {
  // splitmix64 finalizer over (seed, round)
  std::uint64_t z = strategy_seed + 0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(round) + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::vector<std::uint32_t> sample_clients(std::span<const std::uint32_t> all_ids, double fraction,
                                          std::uint64_t seed) {
  if (all_ids.empty()) throw InvalidArgument("cannot sample from an empty client list");
  const auto m = clients_per_round(static_cast<std::uint32_t>(all_ids.size()), fraction);
  std::vector<std::uint32_t> ids(all_ids.begin(), all_ids.end());
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw InvalidArgument("duplicate client ids");
  std::mt19937_64 rng(seed);
  // partial Fisher-Yates: the first m slots end up a uniform m-subset
  for (std::uint32_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, ids.size() - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(m);
  std::sort(ids.begin(), ids.end());
  return ids;
}

namespace {

std::vector<const ClientUpdate*> ordered_by_id(std::span<const ClientUpdate> updates) {
  if (updates.empty()) throw InvalidArgument("no updates to aggregate");
  std::vector<const ClientUpdate*> out;
  out.reserve(updates.size());
  for (const auto& u : updates) out.push_back(&u);
  std::sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->client_id < b->client_id; });
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i]->client_id == out[i - 1]->client_id) {
      throw InvalidArgument("duplicate update from client " + std::to_string(out[i]->client_id));
    }
  }
  for (auto* u : out) {
    if (u->num_examples == 0) throw InvalidArgument("update with zero examples");
    u->params.validate();
  }
  return out;
}

}  // namespace

ParamVector aggregate_fedavg(std::span<const ClientUpdate> updates) {
  const auto ordered = ordered_by_id(updates);
  const auto& shapes = ordered.front()->params.shapes;
  for (auto* u : ordered) {
    if (u->params.shapes != shapes) throw ShapeMismatch("FedAvg updates have different shapes");
  }
  std::vector<double> acc(ordered.front()->params.values.size(), 0.0);
  double total = 0.0;
  for (auto* u : ordered) {
    const auto n = static_cast<double>(u->num_examples);
    total += n;
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += n * static_cast<double>(u->params.values[i]);
  }
  ParamVector out;
  out.shapes = shapes;
  out.values.resize(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out.values[i] = static_cast<float>(acc[i] / total);
  return out;
}

namespace {

// Calls fn(global_index, sub_index) for every coordinate of the sub-model.
template <class Fn>
void for_each_sub_coordinate(std::span<const LayerShape> full, std::span<const LayerShape> sub, Fn&& fn) {
  std::size_t full_at = 0, sub_at = 0;
  for (std::size_t l = 0; l < full.size(); ++l) {
    const auto& f = full[l];
    const auto& s = sub[l];
    for (std::size_t i = 0; i < s.rows; ++i) {
      for (std::size_t j = 0; j < s.cols; ++j) fn(full_at + i * f.cols + j, sub_at + i * s.cols + j);
    }
    const std::size_t fb = full_at + static_cast<std::size_t>(f.rows) * f.cols;
    const std::size_t sb = sub_at + static_cast<std::size_t>(s.rows) * s.cols;
    for (std::size_t j = 0; j < s.bias_len; ++j) fn(fb + j, sb + j);
    full_at += f.size();
    sub_at += s.size();
  }
}

std::vector<LayerShape> full_shapes(const ModelSpec& spec) { return spec.with_ratio(WidthRatio{}).shapes(); }

}  // namespace

ParamVector heterofl_extract(const ParamVector& global, const ModelSpec& spec, WidthRatio ratio) {
  const auto full = full_shapes(spec);
  if (global.shapes != full || global.values.size() != global.expected_size()) {
    throw ShapeMismatch("global parameters do not match the full-width model");
  }
  auto out = ParamVector::zeros(spec.with_ratio(ratio).shapes());
  for_each_sub_coordinate(full, out.shapes, [&](std::size_t g, std::size_t s) { out.values[s] = global.values[g]; });
  return out;
}

ParamVector heterofl_aggregate(std::span<const ClientUpdate> updates, const ParamVector& previous_global,
                               const ModelSpec& spec) {
  const auto ordered = ordered_by_id(updates);
  const auto full = full_shapes(spec);
  if (previous_global.shapes != full || previous_global.values.size() != previous_global.expected_size()) {
    throw ShapeMismatch("previous global does not match the full-width model");
  }
  std::vector<double> acc(previous_global.values.size(), 0.0);
  std::vector<double> weight(previous_global.values.size(), 0.0);
  for (auto* u : ordered) {
    const auto expected = spec.with_ratio(u->width_ratio).shapes();
    if (u->params.shapes != expected) {
      throw ShapeMismatch("update from client " + std::to_string(u->client_id) +
                          " does not match the sub-model for ratio " + u->width_ratio.to_string());
    }
    const auto n = static_cast<double>(u->num_examples);
    for_each_sub_coordinate(full, expected, [&](std::size_t g, std::size_t s) {
      acc[g] += n * static_cast<double>(u->params.values[s]);
      weight[g] += n;
    });
  }
  ParamVector out = previous_global;
  for (std::size_t i = 0; i < acc.size(); ++i) {
    if (weight[i] > 0.0) out.values[i] = static_cast<float>(acc[i] / weight[i]);
  }
  return out;
}

double mean_accuracy(std::span<const double> accuracies) {
  if (accuracies.empty()) throw InvalidArgument("no accuracies to average");
  double sum = 0.0;
  for (double a : accuracies) sum += a;
  return sum / static_cast<double>(accuracies.size());
}

double weighted_mean_accuracy(std::span<const double> accuracies, std::span<const std::uint64_t> weights) {
  if (accuracies.empty() || accuracies.size() != weights.size()) {
    throw InvalidArgument("weighted mean needs one weight per accuracy");
  }
  double sum = 0.0, total = 0.0;
  for (std::size_t i = 0; i < accuracies.size(); ++i) {
    sum += accuracies[i] * static_cast<double>(weights[i]);
    total += static_cast<double>(weights[i]);
  }
  if (total <= 0.0) throw InvalidArgument("weights sum to zero");
  return sum / total;
}

double aggregate_round_metrics(std::span<const ClientUpdate> updates) {
  std::vector<double> acc;
  acc.reserve(updates.size());
  for (const auto& u : updates) {
    if (!u.val_accuracy) throw InvalidArgument("client " + std::to_string(u.client_id) + " reported no accuracy");
    acc.push_back(*u.val_accuracy);
  }
  return mean_accuracy(acc);
}

bool should_stop(std::span<const RoundRecord> history, const StrategyConfig& cfg) {
  if (history.empty()) return false;
  if (cfg.target_accuracy && history.back().mean_val_accuracy >= *cfg.target_accuracy) return true;
  return history.size() >= cfg.num_rounds;
}

}  // namespace colext
