#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "colext/metrics.hpp"
#include "colext/strategy.hpp"

namespace colext {

// Which stage windows count as active time.
enum class ActiveStages : std::uint8_t { fit_and_eval, fit_only };

ActiveStages parse_active_stages(const std::string& name);
const char* to_string(ActiveStages m) noexcept;

struct EnergyReport {
  std::uint32_t client_id = 0;
  double idle_power_w = 0.0;
  double mean_active_power_w = 0.0;  // mean stage power minus idle
  double active_time_s = 0.0;
  double energy_j = 0.0;
  std::size_t active_samples = 0;
  // Mean stage power was below idle and got clamped to zero.
  bool clamped = false;
};

// Active power/energy from an already-measured mean stage power.
EnergyReport energy_from_mean_power(std::uint32_t client_id, double mean_stage_power_w, double idle_power_w,
                                    double active_time_s);

// Per client (ascending id): mean power of samples inside active windows
// minus that client's idle power, times the summed active window time.
// Throws InvalidArgument for a client with active time but no active samples,
// or with no idle power entry.
std::vector<EnergyReport> compute_energy(std::span<const MetricSample> samples, const Association& assoc,
                                         const std::map<std::uint32_t, double>& idle_power_w,
                                         ActiveStages mode = ActiveStages::fit_and_eval);

// Idle power measured as the mean of each client's idle-tagged samples.
std::map<std::uint32_t, double> measured_idle_power(std::span<const MetricSample> samples, const Association& assoc);

// Index into `rounds` of the first round reaching the target, if any.
std::optional<std::size_t> target_round_index(std::span<const RoundRecord> rounds, double target_accuracy);

// End of the first round whose mean accuracy reaches the target, measured
// from the job start (the first round's start).
std::optional<double> compute_tta(std::span<const RoundRecord> rounds, double target_accuracy);

// Sum over clients of mean active power x active time in windows of rounds
// up to and including the target round.
std::optional<double> compute_eta(std::span<const EnergyReport> reports, std::span<const StageWindow> windows,
                                  std::span<const RoundRecord> rounds, double target_accuracy,
                                  ActiveStages mode = ActiveStages::fit_and_eval);

double compute_edp(double time_s, double energy_j);

struct BatchStats {
  double time_per_batch_s = 0.0;
  double energy_per_batch_j = 0.0;
};

BatchStats per_batch_stats(double fit_time_s, double fit_energy_j, std::uint64_t num_batches);
// Fit window of one client/round at the client's mean active power.
BatchStats per_batch_stats(const StageWindow& fit_window, double mean_active_power_w, std::uint64_t num_batches);

struct SummaryRow {
  std::string job_id;
  std::string algorithm;
  std::string model;
  double fraction_fit = 0.0;
  std::optional<double> max_val_acc;
  std::optional<double> tta_s;
  std::optional<double> eta_j;
  std::optional<double> edp_js;
  std::vector<std::string> warnings;
};

struct JobData {
  std::string job_id;
  std::string algorithm;
  std::string model;
  double fraction_fit = 0.0;
  std::optional<double> target_accuracy;
  std::vector<RoundRecord> rounds;
  std::vector<MetricSample> samples;
  std::vector<StageEvent> events;
  std::map<std::uint32_t, double> idle_power_w;
  ActiveStages mode = ActiveStages::fit_and_eval;
};

// Never throws for missing data; gaps become empty cells plus a warning.
SummaryRow summarize_job(const JobData& job);

// Rows sorted by job id.
std::vector<SummaryRow> summary_table(std::vector<SummaryRow> rows);

inline constexpr const char* kSummaryCsvHeader = "job_id,algorithm,model,fraction_fit,max_val_acc,tta_s,eta_j,edp_js";

std::string summary_csv(std::span<const SummaryRow> rows);
std::string summary_json(std::span<const SummaryRow> rows);

}  // namespace colext
