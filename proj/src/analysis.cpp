#include "colext/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <fmt/format.h>

#include "colext/error.hpp"
#include "json.hpp"

namespace colext {

using nlohmann::json;

ActiveStages parse_active_stages(const std::string& name) {
  if (name == "fit_and_eval") return ActiveStages::fit_and_eval;
  if (name == "fit_only") return ActiveStages::fit_only;
  throw InvalidArgument("unknown energy mode '" + name + "' (expected fit_and_eval or fit_only)");
}

const char* to_string(ActiveStages m) noexcept {
  return m == ActiveStages::fit_only ? "fit_only" : "fit_and_eval";
}

namespace {

bool counts(const StageWindow& w, ActiveStages mode) {
  return mode == ActiveStages::fit_and_eval || w.kind == StageKind::fit;
}

}  // namespace

EnergyReport energy_from_mean_power(std::uint32_t client_id, double mean_stage_power_w, double idle_power_w,
                                    double active_time_s) {
  if (!(idle_power_w >= 0.0)) throw InvalidArgument("idle power must be non-negative");
  if (!(active_time_s >= 0.0)) throw InvalidArgument("active time must be non-negative");
  EnergyReport r;
  r.client_id = client_id;
  r.idle_power_w = idle_power_w;
  r.mean_active_power_w = mean_stage_power_w - idle_power_w;
  if (r.mean_active_power_w < 0.0) {
    r.mean_active_power_w = 0.0;
    r.clamped = true;
  }
  r.active_time_s = active_time_s;
  r.energy_j = r.mean_active_power_w * active_time_s;
  return r;
}

std::vector<EnergyReport> compute_energy(std::span<const MetricSample> samples, const Association& assoc,
                                         const std::map<std::uint32_t, double>& idle_power_w, ActiveStages mode) {
  struct Acc {
    double power_sum = 0.0;
    std::size_t n = 0;
    double time = 0.0;
  };
  std::map<std::uint32_t, Acc> acc;
  for (const auto& s : samples) acc.try_emplace(s.client_id);
  for (std::size_t w = 0; w < assoc.windows.size(); ++w) {
    const auto& win = assoc.windows[w];
    auto& a = acc[win.client_id];
    if (!counts(win, mode)) continue;
    a.time += win.duration();
    for (auto idx : assoc.window_samples[w]) {
      a.power_sum += samples[idx].power_w;
      ++a.n;
    }
  }

  std::vector<EnergyReport> out;
  for (const auto& [client, a] : acc) {
    auto idle = idle_power_w.find(client);
    if (idle == idle_power_w.end()) throw InvalidArgument(fmt::format("no idle power known for client {}", client));
    if (a.n == 0) {
      if (a.time > 0.0) throw InvalidArgument(fmt::format("client {} has active stages but no active samples", client));
      out.push_back(energy_from_mean_power(client, idle->second, idle->second, 0.0));
      continue;
    }
    auto r = energy_from_mean_power(client, a.power_sum / static_cast<double>(a.n), idle->second, a.time);
    r.active_samples = a.n;
    out.push_back(r);
  }
  return out;
}

std::map<std::uint32_t, double> measured_idle_power(std::span<const MetricSample> samples, const Association& assoc) {
  std::map<std::uint32_t, std::pair<double, std::size_t>> acc;
  for (auto idx : assoc.idle_samples) {
    auto& a = acc[samples[idx].client_id];
    a.first += samples[idx].power_w;
    ++a.second;
  }
  std::map<std::uint32_t, double> out;
  for (const auto& s : samples) {
    auto it = acc.find(s.client_id);
    if (it == acc.end()) throw InvalidArgument(fmt::format("client {} has no idle samples", s.client_id));
    out[s.client_id] = it->second.first / static_cast<double>(it->second.second);
  }
  return out;
}

std::optional<std::size_t> target_round_index(std::span<const RoundRecord> rounds, double target_accuracy) {
  for (std::size_t i = 0; i < rounds.size(); ++i) {
    if (rounds[i].mean_val_accuracy >= target_accuracy) return i;
  }
  return std::nullopt;
}

std::optional<double> compute_tta(std::span<const RoundRecord> rounds, double target_accuracy) {
  auto idx = target_round_index(rounds, target_accuracy);
  if (!idx) return std::nullopt;
  return rounds[*idx].round_end - rounds.front().round_start;
}

std::optional<double> compute_eta(std::span<const EnergyReport> reports, std::span<const StageWindow> windows,
                                  std::span<const RoundRecord> rounds, double target_accuracy, ActiveStages mode) {
  auto idx = target_round_index(rounds, target_accuracy);
  if (!idx) return std::nullopt;
  const auto last_round = rounds[*idx].round;
  std::map<std::uint32_t, double> power;
  for (const auto& r : reports) power[r.client_id] = r.mean_active_power_w;

  std::map<std::uint32_t, double> time;
  for (const auto& w : windows) {
    if (w.round <= last_round && counts(w, mode)) time[w.client_id] += w.duration();
  }
  double total = 0.0;
  for (const auto& [client, t] : time) {
    auto it = power.find(client);
    if (it == power.end()) throw InvalidArgument(fmt::format("no energy report for client {}", client));
    total += it->second * t;
  }
  return total;
}

double compute_edp(double time_s, double energy_j) {
  if (!(time_s >= 0.0) || !(energy_j >= 0.0)) throw InvalidArgument("EDP inputs must be non-negative");
  return time_s * energy_j;
}

BatchStats per_batch_stats(double fit_time_s, double fit_energy_j, std::uint64_t num_batches) {
  if (num_batches == 0) throw InvalidArgument("per-batch stats need at least one batch");
  const auto n = static_cast<double>(num_batches);
  return {fit_time_s / n, fit_energy_j / n};
}

BatchStats per_batch_stats(const StageWindow& fit_window, double mean_active_power_w, std::uint64_t num_batches) {
  if (fit_window.kind != StageKind::fit) throw InvalidArgument("per-batch stats need a fit window");
  return per_batch_stats(fit_window.duration(), mean_active_power_w * fit_window.duration(), num_batches);
}

SummaryRow summarize_job(const JobData& job) {
  SummaryRow row;
  row.job_id = job.job_id;
  row.algorithm = job.algorithm;
  row.model = job.model;
  row.fraction_fit = job.fraction_fit;
  if (job.rounds.empty()) {
    row.warnings.push_back("no round records");
    return row;
  }
  double best = 0.0;
  for (const auto& r : job.rounds) best = std::max(best, r.mean_val_accuracy);
  row.max_val_acc = best;
  if (!job.target_accuracy) {
    row.warnings.push_back("no target accuracy configured");
    return row;
  }
  row.tta_s = compute_tta(job.rounds, *job.target_accuracy);
  if (!row.tta_s) {
    row.warnings.push_back(fmt::format("target accuracy {} never reached", *job.target_accuracy));
    return row;
  }
  try {
    const auto assoc = associate_rounds(job.samples, job.events, job.rounds);
    const auto reports = compute_energy(job.samples, assoc, job.idle_power_w, job.mode);
    row.eta_j = compute_eta(reports, assoc.windows, job.rounds, *job.target_accuracy, job.mode);
    for (const auto& r : reports) {
      if (r.clamped) row.warnings.push_back(fmt::format("client {} active power clamped to zero", r.client_id));
    }
  } catch (const Error& e) {
    row.warnings.push_back(std::string("energy unavailable: ") + e.what());
  }
  if (row.eta_j) row.edp_js = compute_edp(*row.tta_s, *row.eta_j);
  return row;
}

std::vector<SummaryRow> summary_table(std::vector<SummaryRow> rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.job_id < b.job_id; });
  return rows;
}

namespace {

std::string cell(const std::optional<double>& v, int precision) {
  return v ? fmt::format("{:.{}f}", *v, precision) : std::string();
}

// Values with commas or quotes are quoted per RFC 4180.
std::string csv_text(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

std::string summary_csv(std::span<const SummaryRow> rows) {
  std::string out = std::string(kSummaryCsvHeader) + "\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{},{},{},{},{}\n", csv_text(r.job_id), csv_text(r.algorithm), csv_text(r.model),
                       r.fraction_fit, cell(r.max_val_acc, 6), cell(r.tta_s, 3), cell(r.eta_j, 6),
                       cell(r.edp_js, 6));
  }
  return out;
}

std::string summary_json(std::span<const SummaryRow> rows) {
  json arr = json::array();
  for (const auto& r : rows) {
    arr.push_back(json{{"job_id", r.job_id},
                       {"algorithm", r.algorithm},
                       {"model", r.model},
                       {"fraction_fit", r.fraction_fit},
                       {"max_val_acc", opt(r.max_val_acc)},
                       {"tta_s", opt(r.tta_s)},
                       {"eta_j", opt(r.eta_j)},
                       {"edp_js", opt(r.edp_js)},
                       {"warnings", r.warnings}});
  }
  return arr.dump(2) + "\n";
}

}  // namespace colext
