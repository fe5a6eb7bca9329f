#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "colext/emulator.hpp"
#include "colext/error.hpp"
#include "colext/strategy.hpp"

namespace colext {

enum class StageKind : std::uint8_t { fit = 0, eval = 1 };
enum class Edge : std::uint8_t { start = 0, end = 1 };

const char* to_string(StageKind k) noexcept;
const char* to_string(Edge e) noexcept;
inline Stage to_stage(StageKind k) noexcept { return k == StageKind::fit ? Stage::fit : Stage::eval; }

struct MetricSample {
  double ts_emulated_s = 0.0;
  std::uint32_t client_id = 0;
  double cpu_percent = 0.0;
  std::uint64_t mem_bytes = 0;
  double power_w = 0.0;
  std::uint64_t net_up_bytes = 0;
  std::uint64_t net_down_bytes = 0;

  friend bool operator==(const MetricSample&, const MetricSample&) = default;
};

// f64 ts, u32 client, f32 cpu, u64 mem, f32 power, u64 up, u64 down.
inline constexpr std::size_t kEncodedSampleSize = 44;
void encode_sample(const MetricSample& s, std::vector<std::uint8_t>& out);
std::vector<MetricSample> decode_samples(std::span<const std::uint8_t> bytes);

struct StageEvent {
  std::uint32_t client_id = 0;
  std::uint32_t round = 0;
  StageKind kind = StageKind::fit;
  Edge edge = Edge::start;
  double ts_emulated_s = 0.0;

  friend bool operator==(const StageEvent&, const StageEvent&) = default;
};

// f64 ts, u32 client, u32 round, u8 kind, u8 edge.
inline constexpr std::size_t kEncodedEventSize = 18;
void encode_event(const StageEvent& e, std::vector<std::uint8_t>& out);
std::vector<StageEvent> decode_events(std::span<const std::uint8_t> bytes);

// One push worth of telemetry. Samples are kept in their encoded form so the
// buffer footprint is exactly kEncodedSampleSize per sample.
struct MetricBatch {
  std::vector<std::uint8_t> samples;
  std::vector<StageEvent> events;

  std::size_t sample_count() const noexcept { return samples.size() / kEncodedSampleSize; }
  bool empty() const noexcept { return samples.empty() && events.empty(); }
};

// Append-only embedded store. Layout under root:
//   jobs/<job_id>/metrics/samples-<client>.bin   fixed-size sample records
//   jobs/<job_id>/metrics/events-<client>.bin    fixed-size stage events
//   jobs/<job_id>/metrics/rounds.jsonl           one RoundRecord per line
// Each client process appends only to its own segments, so many processes
// can write concurrently without locking.
class MetricStore {
 public:
  explicit MetricStore(std::filesystem::path root);

  const std::filesystem::path& root() const noexcept { return root_; }
  std::filesystem::path job_dir(const std::string& job_id) const;
  std::filesystem::path metrics_dir(const std::string& job_id) const;

  // Creates the job directory; fails if the id is taken.
  void create_job(const std::string& job_id) const;
  bool has_job(const std::string& job_id) const;
  std::vector<std::string> list_jobs() const;

  // Durable append (write + fdatasync) of one batch for one client.
  void append_batch(const std::string& job_id, std::uint32_t client_id, const MetricBatch& batch) const;
  void append_round(const std::string& job_id, const RoundRecord& record) const;

  // Samples/events ordered by client id, then arrival.
  std::vector<MetricSample> read_samples(const std::string& job_id) const;
  std::vector<StageEvent> read_events(const std::string& job_id) const;
  std::vector<RoundRecord> read_rounds(const std::string& job_id) const;

 private:
  void require_job(const std::string& job_id) const;

  std::filesystem::path root_;
};

std::string round_record_to_json(const RoundRecord& r);
RoundRecord round_record_from_json(const std::string& line);

class MetricSink {
 public:
  virtual ~MetricSink() = default;
  virtual void push_batch(const MetricBatch& batch) = 0;
};

// Pushes into a MetricStore on behalf of one client. Empty batches are a
// no-op; failed writes are retried `retries` times before surfacing.
class StoreSink final : public MetricSink {
 public:
  StoreSink(const MetricStore& store, std::string job_id, std::uint32_t client_id, int retries = 3)
      : store_(store), job_id_(std::move(job_id)), client_id_(client_id), retries_(retries) {}
  void push_batch(const MetricBatch& batch) override;

 private:
  const MetricStore& store_;
  std::string job_id_;
  std::uint32_t client_id_;
  int retries_;
};

void push_batch(const MetricBatch& batch, MetricSink& sink);

// Current stage of a client process plus the clock that stamps samples and
// stage events. Both are read and written under one lock, so a sample's
// stage always agrees with the stage windows its timestamp falls into.
class StageTracker {
 public:
  StageTracker(std::uint32_t client_id, EmulatedClock clock);

  std::uint32_t client_id() const noexcept { return client_id_; }
  const EmulatedClock& clock() const noexcept { return clock_; }

  // Records a stage edge. Throws InvalidArgument when an end has no open
  // start of the same (round, kind) or a start arrives while a stage is open.
  StageEvent emit(std::uint32_t round, StageKind kind, Edge edge);

  struct Snapshot {
    double ts = 0.0;
    Stage stage = Stage::idle;
  };
  // Strictly increasing timestamps across emit() and snapshot().
  Snapshot snapshot();

  void set_listener(std::function<void(const StageEvent&)> fn);

 private:
  double next_ts_locked();

  std::uint32_t client_id_;
  EmulatedClock clock_;
  std::mutex mu_;
  double last_ts_ = -1.0;
  Stage stage_ = Stage::idle;
  std::uint32_t open_round_ = 0;
  std::function<void(const StageEvent&)> listener_;
};

// Produces one sample for the given timestamp/stage.
using SensorFn = std::function<MetricSample(double ts, Stage stage)>;

// Reads this process's CPU% and RSS from /proc, power from the profile and
// cumulative network bytes from the supplied counters.
class ProcessSensors {
 public:
  ProcessSensors(std::uint32_t client_id, DeviceProfile profile, std::uint64_t seed,
                 std::function<std::uint64_t()> bytes_up = {}, std::function<std::uint64_t()> bytes_down = {});
  MetricSample operator()(double ts, Stage stage);

  // True when /proc was readable; otherwise cpu/mem columns are zero-filled.
  bool os_metrics_available() const noexcept { return os_ok_; }

 private:
  std::uint32_t client_id_;
  DeviceProfile profile_;
  std::mt19937_64 rng_;
  std::function<std::uint64_t()> up_, down_;
  bool os_ok_ = true;
  double last_cpu_s_ = -1.0;
  std::chrono::steady_clock::time_point last_wall_;
};

struct ScraperConfig {
  double scrape_interval_s = 0.3;  // emulated seconds
  double push_interval_s = 10.0;   // emulated seconds
  bool pushes_enabled = true;
  // Oldest samples are dropped past this many buffered (counted in stats).
  std::size_t max_buffered_samples = 1u << 20;

  void validate() const;
};

struct ScraperStats {
  std::uint64_t samples_scraped = 0;
  std::uint64_t samples_pushed = 0;
  std::uint64_t samples_dropped = 0;
  std::uint64_t events_pushed = 0;
  std::uint64_t push_failures = 0;
  std::vector<std::size_t> batch_sizes;    // samples per successful flush
  std::vector<double> flush_times_s;       // emulated time of each flush
};

// Background sampler: one sample per tick on a fixed-rate schedule
// (tick i at start + i * interval), buffered and flushed to the sink every
// push interval and once more on stop().
class Scraper {
 public:
  Scraper(ScraperConfig cfg, StageTracker& tracker, SensorFn sensors, MetricSink* sink);
  ~Scraper();
  Scraper(const Scraper&) = delete;
  Scraper& operator=(const Scraper&) = delete;

  void start();
  // Stops ticking and flushes what is buffered. Idempotent.
  void stop();
  // Runs on the caller's thread until stop() is requested from elsewhere.
  void run();

  // Stage events ride along with the next flush.
  void add_event(const StageEvent& e);

  ScraperStats stats() const;
  std::size_t buffered_bytes() const;
  std::size_t buffered_samples() const;

 private:
  // `slot` is the tick index; flush deadlines compare against its nominal
  // time so a late tick still lands in the batch it was scheduled for.
  void tick(std::uint64_t slot);
  bool flush_locked(double now_ts);

  ScraperConfig cfg_;
  StageTracker& tracker_;
  SensorFn sensors_;
  MetricSink* sink_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  bool stop_requested_ = false;
  bool stopped_ = false;
  MetricBatch buffer_;
  double start_ts_ = 0.0;
  double last_flush_ts_ = 0.0;
  bool have_flush_ts_ = false;
  ScraperStats stats_;
  std::thread thread_;
};

// A paired [start, end) stage interval of one client.
struct StageWindow {
  std::uint32_t client_id = 0;
  std::uint32_t round = 0;
  StageKind kind = StageKind::fit;
  double start = 0.0;
  double end = 0.0;

  double duration() const noexcept { return end - start; }
};

class PairingError : public Error {
 public:
  PairingError(const std::string& what, std::vector<std::string> offenders)
      : Error(what), offenders_(std::move(offenders)) {}
  const std::vector<std::string>& offenders() const noexcept { return offenders_; }

 private:
  std::vector<std::string> offenders_;
};

// Pairs start/end edges per (client, round, kind). Throws PairingError
// listing every unmatched, duplicated, inverted or overlapping window.
std::vector<StageWindow> pair_stage_events(std::span<const StageEvent> events);

struct Association {
  std::vector<StageWindow> windows;  // ordered by (client, start)
  // Per sample: index into windows, or -1 when idle.
  std::vector<std::int64_t> sample_window;
  // Per window: indices of its samples.
  std::vector<std::vector<std::size_t>> window_samples;
  std::vector<std::size_t> idle_samples;
};

// Assigns each sample to the stage window of its client containing its
// timestamp (half-open), else idle. Rounds missing from `rounds` (when it is
// non-empty) are reported as pairing offenders.
Association associate_rounds(std::span<const MetricSample> samples, std::span<const StageEvent> events,
                             std::span<const RoundRecord> rounds);

inline constexpr const char* kSamplesCsvHeader = "ts_s,client_id,cpu_pct,mem_bytes,power_w,net_up_bytes,net_down_bytes";
inline constexpr const char* kStageEventsCsvHeader = "ts_s,client_id,round,kind,edge";
inline constexpr const char* kRoundsCsvHeader = "round,start_s,end_s,mean_val_acc,sampled_clients";

std::string samples_csv(std::span<const MetricSample> samples);
std::string stage_events_csv(std::span<const StageEvent> events);
std::string rounds_csv(std::span<const RoundRecord> rounds);

struct ExportedFiles {
  std::filesystem::path samples;
  std::filesystem::path stage_events;
  std::filesystem::path rounds;
  std::size_t sample_rows = 0;
  std::size_t event_rows = 0;
  std::size_t round_rows = 0;
};

// Writes samples.csv, stage_events.csv and rounds.csv into out_dir.
ExportedFiles export_csv(const MetricStore& store, const std::string& job_id, const std::filesystem::path& out_dir);

}  // namespace colext
