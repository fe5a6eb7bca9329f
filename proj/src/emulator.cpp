#include "colext/emulator.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "colext/error.hpp"
#include "colext/file_util.hpp"
#include "yaml_util.hpp"

namespace colext {

namespace {

void require_positive_finite(double v, const std::string& profile, const char* field) {
  if (!(v > 0.0) || !std::isfinite(v)) {
    throw InvalidArgument("profile '" + profile + "': " + field + " must be positive and finite");
  }
}

void require_non_negative_finite(double v, const std::string& profile, const char* field) {
  if (!(v >= 0.0) || !std::isfinite(v)) {
    throw InvalidArgument("profile '" + profile + "': " + field + " must be non-negative and finite");
  }
}

}  // namespace

void DeviceProfile::validate() const {
  if (name.empty()) throw InvalidArgument("profile without a name");
  require_positive_finite(samples_per_second, name, "samples_per_second");
  require_non_negative_finite(idle_power_w, name, "idle_power_w");
  require_non_negative_finite(active_power_delta_w, name, "active_power_delta_w");
  require_positive_finite(uplink_bps, name, "uplink_bps");
  require_positive_finite(downlink_bps, name, "downlink_bps");
  require_non_negative_finite(power_noise_sigma_w, name, "power_noise_sigma_w");
  require_positive_finite(time_scale, name, "time_scale");
}

const char* to_string(Stage s) noexcept {
  switch (s) {
    case Stage::idle: return "idle";
    case Stage::fit: return "fit";
    case Stage::eval: return "eval";
  }
  return "?";
}

double emulated_fit_duration(const DeviceProfile& p, std::uint64_t num_samples, std::uint32_t epochs,
                             double work_fraction) {
  return static_cast<double>(epochs) * static_cast<double>(num_samples) * work_fraction / p.samples_per_second;
}

double emulated_eval_duration(const DeviceProfile& p, std::uint64_t num_samples, double work_fraction) {
  return static_cast<double>(num_samples) * work_fraction / (p.samples_per_second * kEvalSpeedup);
}

double emulated_tx_duration(const DeviceProfile& p, std::uint64_t payload_bytes, Direction dir) {
  const double bps = dir == Direction::uplink ? p.uplink_bps : p.downlink_bps;
  return 8.0 * static_cast<double>(payload_bytes) / bps;
}

double throttle_sleep_s(double real_elapsed_s, double emulated_s, double time_scale) {
  return std::max(0.0, emulated_s / time_scale - real_elapsed_s);
}

double throttle(double real_elapsed_s, double emulated_s, double time_scale) {
  const double s = throttle_sleep_s(real_elapsed_s, emulated_s, time_scale);
  if (s > 0.0) std::this_thread::sleep_for(std::chrono::duration<double>(s));
  return s;
}

double power_sample(const DeviceProfile& p, Stage stage, std::mt19937_64& rng) {
  double mean = p.idle_power_w;
  if (stage != Stage::idle) mean += p.active_power_delta_w;
  if (p.power_noise_sigma_w <= 0.0) return mean;
  std::normal_distribution<double> noise(0.0, p.power_noise_sigma_w);
  return std::max(0.0, mean + noise(rng));
}

ProfileTable parse_profiles(const std::string& yaml_text, const std::string& source) {
  const auto root = yaml::load(yaml_text, source);
  ProfileTable out;
  if (!root || root.IsNull()) return out;
  yaml::require_map(source, root, "profiles document");
  for (const auto& kv : root) {
    const auto name = kv.first.as<std::string>();
    const auto& node = kv.second;
    const std::string section = "profile " + name;
    yaml::require_map(source, node, section);
    yaml::reject_unknown(source, node, section,
                         {"samples_per_second", "idle_power_w", "active_power_delta_w", "uplink_bps",
                          "downlink_bps", "power_noise_sigma_w", "time_scale"});
    DeviceProfile p;
    p.name = name;
    p.samples_per_second = yaml::require<double>(source, node, "samples_per_second", section);
    p.idle_power_w = yaml::require<double>(source, node, "idle_power_w", section);
    p.active_power_delta_w = yaml::require<double>(source, node, "active_power_delta_w", section);
    p.uplink_bps = yaml::require<double>(source, node, "uplink_bps", section);
    p.downlink_bps = yaml::require<double>(source, node, "downlink_bps", section);
    p.power_noise_sigma_w = yaml::optional<double>(source, node, "power_noise_sigma_w", section, 0.0);
    p.time_scale = yaml::optional<double>(source, node, "time_scale", section, 1.0);
    try {
      p.validate();
    } catch (const InvalidArgument& e) {
      throw ConfigError(e.what(), yaml::location(source, node));
    }
    out.emplace(name, std::move(p));
  }
  return out;
}

ProfileTable load_profiles(const std::filesystem::path& path) {
  return parse_profiles(read_file_text(path), path.string());
}

const std::string& default_profiles_yaml() {
  static const std::string text =
#include "default_profiles.inc"
      ;
  return text;
}

ProfileTable default_profiles() { return parse_profiles(default_profiles_yaml(), "<built-in profiles>"); }

}  // namespace colext
