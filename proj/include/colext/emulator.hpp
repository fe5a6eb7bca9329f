#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>

namespace colext {

// Emulated characterization of one hardware type. Rates are in samples/s
// and bits/s, power in watts.
struct DeviceProfile {
  std::string name;
  double samples_per_second = 1.0;
  double idle_power_w = 0.0;
  double active_power_delta_w = 0.0;
  double uplink_bps = 1.0;
  double downlink_bps = 1.0;
  double power_noise_sigma_w = 0.0;
  // Emulated seconds per wall-clock second.
  double time_scale = 1.0;

  // Rejects non-positive or non-finite rates (an infinite bandwidth is not a
  // way to switch transfers off).
  void validate() const;

  friend bool operator==(const DeviceProfile&, const DeviceProfile&) = default;
};

enum class Direction : std::uint8_t { uplink, downlink };
enum class Stage : std::uint8_t { idle, fit, eval };

const char* to_string(Stage s) noexcept;

// Evaluation is a forward pass only; it runs this many times faster than
// training on the same device.
inline constexpr double kEvalSpeedup = 3.0;

// epochs * num_samples * work_fraction / samples_per_second. work_fraction
// is the share of the full model a width-scaled client trains (1 otherwise).
double emulated_fit_duration(const DeviceProfile& p, std::uint64_t num_samples, std::uint32_t epochs,
                             double work_fraction = 1.0);
double emulated_eval_duration(const DeviceProfile& p, std::uint64_t num_samples, double work_fraction = 1.0);
// 8 * bytes / bps for the given direction.
double emulated_tx_duration(const DeviceProfile& p, std::uint64_t payload_bytes, Direction dir);

// max(0, emulated / time_scale - real_elapsed), in wall seconds.
double throttle_sleep_s(double real_elapsed_s, double emulated_s, double time_scale);
// Sleeps for throttle_sleep_s(...) and returns the requested sleep.
double throttle(double real_elapsed_s, double emulated_s, double time_scale);

// idle (+ delta during fit/eval) + N(0, sigma), clamped at zero.
double power_sample(const DeviceProfile& p, Stage stage, std::mt19937_64& rng);

// Wall clock mapped onto emulated seconds since a shared epoch. All processes
// of a job run on one host, so steady_clock readings are comparable.
class EmulatedClock {
 public:
  using steady = std::chrono::steady_clock;

  EmulatedClock(steady::time_point epoch, double time_scale) : epoch_(epoch), scale_(time_scale) {}

  double now() const { return at(steady::now()); }
  double at(steady::time_point t) const {
    return std::chrono::duration<double>(t - epoch_).count() * scale_;
  }
  double time_scale() const noexcept { return scale_; }
  steady::time_point epoch() const noexcept { return epoch_; }
  // Wall-clock instant at which emulated time reaches `emulated_s`.
  steady::time_point wall_at(double emulated_s) const {
    return epoch_ + std::chrono::duration_cast<steady::duration>(std::chrono::duration<double>(emulated_s / scale_));
  }

 private:
  steady::time_point epoch_;
  double scale_;
};

using ProfileTable = std::map<std::string, DeviceProfile>;

// Document: a mapping dev_type -> {samples_per_second, idle_power_w, ...}.
ProfileTable parse_profiles(const std::string& yaml_text, const std::string& source_name = "<profiles>");
ProfileTable load_profiles(const std::filesystem::path& path);

// Built-in fleet. Only JetsonXavierNX idle power is a measured figure; every
// other number is synthetic, ordered from JetsonAGXOrin (fastest) down to
// JetsonNano (slowest).
const std::string& default_profiles_yaml();
ProfileTable default_profiles();

}  // namespace colext
