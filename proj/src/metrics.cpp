#include "colext/metrics.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include <fmt/format.h>

#include "colext/binary_io.hpp"
#include "colext/file_util.hpp"
#include "json.hpp"

namespace colext {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(StageKind k) noexcept { return k == StageKind::fit ? "fit" : "eval"; }
const char* to_string(Edge e) noexcept { return e == Edge::start ? "start" : "end"; }

void encode_sample(const MetricSample& s, std::vector<std::uint8_t>& out) {
  ByteWriter w(out);
  w.put_f64(s.ts_emulated_s);
  w.put_u32(s.client_id);
  w.put_f32(static_cast<float>(s.cpu_percent));
  w.put_u64(s.mem_bytes);
  w.put_f32(static_cast<float>(s.power_w));
  w.put_u64(s.net_up_bytes);
  w.put_u64(s.net_down_bytes);
}

std::vector<MetricSample> decode_samples(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kEncodedSampleSize != 0) throw StoreError("sample segment has a torn record");
  ByteReader r(bytes);
  std::vector<MetricSample> out(bytes.size() / kEncodedSampleSize);
  for (auto& s : out) {
    s.ts_emulated_s = r.get_f64();
    s.client_id = r.get_u32();
    s.cpu_percent = r.get_f32();
    s.mem_bytes = r.get_u64();
    s.power_w = r.get_f32();
    s.net_up_bytes = r.get_u64();
    s.net_down_bytes = r.get_u64();
  }
  return out;
}

void encode_event(const StageEvent& e, std::vector<std::uint8_t>& out) {
  ByteWriter w(out);
  w.put_f64(e.ts_emulated_s);
  w.put_u32(e.client_id);
  w.put_u32(e.round);
  w.put_u8(static_cast<std::uint8_t>(e.kind));
  w.put_u8(static_cast<std::uint8_t>(e.edge));
}

std::vector<StageEvent> decode_events(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kEncodedEventSize != 0) throw StoreError("event segment has a torn record");
  ByteReader r(bytes);
  std::vector<StageEvent> out(bytes.size() / kEncodedEventSize);
  for (auto& e : out) {
    e.ts_emulated_s = r.get_f64();
    e.client_id = r.get_u32();
    e.round = r.get_u32();
    const auto kind = r.get_u8();
    const auto edge = r.get_u8();
    if (kind > 1 || edge > 1) throw StoreError("event segment has an invalid record");
    e.kind = static_cast<StageKind>(kind);
    e.edge = static_cast<Edge>(edge);
  }
  return out;
}

// ---------------------------------------------------------------------------
// MetricStore

namespace {

void append_durable(const fs::path& path, std::span<const std::uint8_t> bytes) {
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) throw StoreError("cannot open " + path.string() + ": " + std::strerror(errno));
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = ::write(fd, bytes.data() + off, bytes.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      const std::string msg = "write to " + path.string() + " failed: " + std::strerror(errno);
      ::close(fd);
      throw StoreError(msg);
    }
    off += static_cast<std::size_t>(n);
  }
  ::fdatasync(fd);
  ::close(fd);
}

// Segment files of one kind, ordered by client id.
std::vector<std::pair<std::uint32_t, fs::path>> segments(const fs::path& dir, const std::string& prefix) {
  std::vector<std::pair<std::uint32_t, fs::path>> out;
  if (!fs::exists(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind(prefix, 0) != 0 || entry.path().extension() != ".bin") continue;
    const auto id_text = name.substr(prefix.size(), name.size() - prefix.size() - 4);
    try {
      out.emplace_back(static_cast<std::uint32_t>(std::stoul(id_text)), entry.path());
    } catch (const std::logic_error&) {
      continue;
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

MetricStore::MetricStore(fs::path root) : root_(fs::absolute(root)) { fs::create_directories(root_ / "jobs"); }

fs::path MetricStore::job_dir(const std::string& job_id) const { return root_ / "jobs" / job_id; }
fs::path MetricStore::metrics_dir(const std::string& job_id) const { return job_dir(job_id) / "metrics"; }

void MetricStore::create_job(const std::string& job_id) const {
  if (job_id.empty() || job_id.find('/') != std::string::npos || job_id == "." || job_id == "..") {
    throw StoreError("invalid job id '" + job_id + "'");
  }
  if (!fs::create_directory(job_dir(job_id))) throw StoreError("job id '" + job_id + "' already exists");
  fs::create_directory(metrics_dir(job_id));
}

bool MetricStore::has_job(const std::string& job_id) const {
  return !job_id.empty() && job_id.find('/') == std::string::npos && fs::is_directory(job_dir(job_id));
}

std::vector<std::string> MetricStore::list_jobs() const {
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(root_ / "jobs")) {
    if (e.is_directory()) out.push_back(e.path().filename().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void MetricStore::require_job(const std::string& job_id) const {
  if (!has_job(job_id)) throw StoreError("unknown job id '" + job_id + "'");
}

void MetricStore::append_batch(const std::string& job_id, std::uint32_t client_id, const MetricBatch& batch) const {
  require_job(job_id);
  const auto dir = metrics_dir(job_id);
  if (!batch.samples.empty()) {
    append_durable(dir / ("samples-" + std::to_string(client_id) + ".bin"), batch.samples);
  }
  if (!batch.events.empty()) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(batch.events.size() * kEncodedEventSize);
    for (const auto& e : batch.events) encode_event(e, bytes);
    append_durable(dir / ("events-" + std::to_string(client_id) + ".bin"), bytes);
  }
}

void MetricStore::append_round(const std::string& job_id, const RoundRecord& record) const {
  require_job(job_id);
  const auto line = round_record_to_json(record) + "\n";
  append_durable(metrics_dir(job_id) / "rounds.jsonl",
                 std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(line.data()), line.size()));
}

std::vector<MetricSample> MetricStore::read_samples(const std::string& job_id) const {
  require_job(job_id);
  std::vector<MetricSample> out;
  for (const auto& [id, path] : segments(metrics_dir(job_id), "samples-")) {
    auto part = decode_samples(read_file_bytes(path));
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

std::vector<StageEvent> MetricStore::read_events(const std::string& job_id) const {
  require_job(job_id);
  std::vector<StageEvent> out;
  for (const auto& [id, path] : segments(metrics_dir(job_id), "events-")) {
    auto part = decode_events(read_file_bytes(path));
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

std::vector<RoundRecord> MetricStore::read_rounds(const std::string& job_id) const {
  require_job(job_id);
  std::vector<RoundRecord> out;
  const auto path = metrics_dir(job_id) / "rounds.jsonl";
  if (!fs::exists(path)) return out;
  std::istringstream in(read_file_text(path));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(round_record_from_json(line));
  }
  return out;
}

std::string round_record_to_json(const RoundRecord& r) {
  json clients = json::array();
  for (const auto& c : r.clients) {
    clients.push_back({{"client_id", c.client_id},
                       {"sampled", c.sampled},
                       {"aggregated", c.aggregated},
                       {"downlink_s", c.downlink_s},
                       {"fit_s", c.fit_s},
                       {"uplink_s", c.uplink_s},
                       {"eval_s", c.eval_s},
                       {"num_examples", c.num_examples},
                       {"num_batches", c.num_batches},
                       {"train_loss", c.train_loss},
                       {"val_loss", c.val_loss},
                       {"val_accuracy", c.val_accuracy}});
  }
  json j = {{"round", r.round},
            {"sampled_clients", r.sampled_clients},
            {"start_s", r.round_start},
            {"end_s", r.round_end},
            {"mean_val_acc", r.mean_val_accuracy},
            {"wall_s", r.wall_duration_s},
            {"clients", clients}};
  return j.dump();
}

RoundRecord round_record_from_json(const std::string& line) {
  try {
    const auto j = json::parse(line);
    RoundRecord r;
    r.round = j.at("round").get<std::uint32_t>();
    r.sampled_clients = j.at("sampled_clients").get<std::vector<std::uint32_t>>();
    r.round_start = j.at("start_s").get<double>();
    r.round_end = j.at("end_s").get<double>();
    r.mean_val_accuracy = j.at("mean_val_acc").get<double>();
    r.wall_duration_s = j.value("wall_s", 0.0);
    for (const auto& c : j.at("clients")) {
      ClientRoundStats s;
      s.client_id = c.at("client_id").get<std::uint32_t>();
      s.sampled = c.at("sampled").get<bool>();
      s.aggregated = c.at("aggregated").get<bool>();
      s.downlink_s = c.at("downlink_s").get<double>();
      s.fit_s = c.at("fit_s").get<double>();
      s.uplink_s = c.at("uplink_s").get<double>();
      s.eval_s = c.at("eval_s").get<double>();
      s.num_examples = c.at("num_examples").get<std::uint64_t>();
      s.num_batches = c.at("num_batches").get<std::uint64_t>();
      s.train_loss = c.at("train_loss").get<double>();
      s.val_loss = c.at("val_loss").get<double>();
      s.val_accuracy = c.at("val_accuracy").get<double>();
      r.clients.push_back(s);
    }
    return r;
  } catch (const json::exception& e) {
    throw StoreError(std::string("malformed round record: ") + e.what());
  }
}

void StoreSink::push_batch(const MetricBatch& batch) {
  if (batch.empty()) return;
  for (int attempt = 0;; ++attempt) {
    try {
      store_.append_batch(job_id_, client_id_, batch);
      return;
    } catch (const StoreError&) {
      if (attempt >= retries_) throw;
      std::this_thread::sleep_for(std::chrono::milliseconds(10 << attempt));
    }
  }
}

void push_batch(const MetricBatch& batch, MetricSink& sink) {
  if (batch.empty()) return;
  sink.push_batch(batch);
}

// ---------------------------------------------------------------------------
// StageTracker

StageTracker::StageTracker(std::uint32_t client_id, EmulatedClock clock) : client_id_(client_id), clock_(clock) {}

double StageTracker::next_ts_locked() {
  double ts = clock_.now();
  if (ts <= last_ts_) ts = std::nextafter(last_ts_, HUGE_VAL);
  last_ts_ = ts;
  return ts;
}

StageEvent StageTracker::emit(std::uint32_t round, StageKind kind, Edge edge) {
  StageEvent ev;
  std::function<void(const StageEvent&)> listener;
  {
    std::lock_guard lock(mu_);
    const Stage wanted = to_stage(kind);
    if (edge == Edge::start) {
      if (stage_ != Stage::idle) throw InvalidArgument("stage start while another stage is open");
      stage_ = wanted;
      open_round_ = round;
    } else {
      if (stage_ != wanted || open_round_ != round) {
        throw InvalidArgument(std::string("end of ") + to_string(kind) + " in round " + std::to_string(round) +
                              " without a matching start");
      }
      stage_ = Stage::idle;
    }
    ev = StageEvent{client_id_, round, kind, edge, next_ts_locked()};
    listener = listener_;
  }
  if (listener) listener(ev);
  return ev;
}

StageTracker::Snapshot StageTracker::snapshot() {
  std::lock_guard lock(mu_);
  return {next_ts_locked(), stage_};
}

void StageTracker::set_listener(std::function<void(const StageEvent&)> fn) {
  std::lock_guard lock(mu_);
  listener_ = std::move(fn);
}

// ---------------------------------------------------------------------------
// Sensors

namespace {

// utime + stime of this process, in seconds; negative when unavailable.
double process_cpu_seconds() {
  std::ifstream in("/proc/self/stat");
  std::string text;
  if (!in || !std::getline(in, text)) return -1.0;
  const auto close = text.rfind(')');
  if (close == std::string::npos) return -1.0;
  std::istringstream rest(text.substr(close + 2));
  std::string field;
  unsigned long utime = 0, stime = 0;
  // fields after the command name start at index 3 (state)
  for (int idx = 3; rest >> field; ++idx) {
    if (idx == 14) utime = std::stoul(field);
    if (idx == 15) {
      stime = std::stoul(field);
      break;
    }
  }
  return static_cast<double>(utime + stime) / static_cast<double>(::sysconf(_SC_CLK_TCK));
}

std::int64_t process_rss_bytes() {
  std::ifstream in("/proc/self/statm");
  unsigned long size = 0, resident = 0;
  if (!(in >> size >> resident)) return -1;
  return static_cast<std::int64_t>(resident) * ::sysconf(_SC_PAGESIZE);
}

}  // namespace

ProcessSensors::ProcessSensors(std::uint32_t client_id, DeviceProfile profile, std::uint64_t seed,
                               std::function<std::uint64_t()> bytes_up, std::function<std::uint64_t()> bytes_down)
    : client_id_(client_id),
      profile_(std::move(profile)),
      rng_(seed),
      up_(std::move(bytes_up)),
      down_(std::move(bytes_down)) {
  last_cpu_s_ = process_cpu_seconds();
  last_wall_ = std::chrono::steady_clock::now();
  os_ok_ = last_cpu_s_ >= 0.0 && process_rss_bytes() >= 0;
}

MetricSample ProcessSensors::operator()(double ts, Stage stage) {
  MetricSample s;
  s.ts_emulated_s = ts;
  s.client_id = client_id_;
  s.power_w = power_sample(profile_, stage, rng_);
  s.net_up_bytes = up_ ? up_() : 0;
  s.net_down_bytes = down_ ? down_() : 0;
  if (os_ok_) {
    const double cpu = process_cpu_seconds();
    const auto now = std::chrono::steady_clock::now();
    const double wall = std::chrono::duration<double>(now - last_wall_).count();
    if (cpu >= 0.0 && wall > 0.0) s.cpu_percent = std::max(0.0, (cpu - last_cpu_s_) / wall * 100.0);
    last_cpu_s_ = cpu;
    last_wall_ = now;
    s.mem_bytes = static_cast<std::uint64_t>(std::max<std::int64_t>(0, process_rss_bytes()));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Scraper

void ScraperConfig::validate() const {
  if (!(scrape_interval_s > 0.0) || !std::isfinite(scrape_interval_s)) {
    throw InvalidArgument("scrape interval must be positive");
  }
  if (!(push_interval_s > 0.0) || !std::isfinite(push_interval_s)) {
    throw InvalidArgument("push interval must be positive");
  }
}

Scraper::Scraper(ScraperConfig cfg, StageTracker& tracker, SensorFn sensors, MetricSink* sink)
    : cfg_(cfg), tracker_(tracker), sensors_(std::move(sensors)), sink_(sink) {
  cfg_.validate();
}

Scraper::~Scraper() { stop(); }

void Scraper::start() {
  thread_ = std::thread([this] { run(); });
}

void Scraper::run() {
  using clock = std::chrono::steady_clock;
  const auto period = std::chrono::duration_cast<clock::duration>(
      std::chrono::duration<double>(cfg_.scrape_interval_s / tracker_.clock().time_scale()));
  auto next = clock::now();
  std::unique_lock lock(mu_);
  for (std::uint64_t slot = 0; !stop_requested_; ++slot) {
    lock.unlock();
    tick(slot);
    lock.lock();
    next += period;
    cv_.wait_until(lock, next, [this] { return stop_requested_; });
  }
}

void Scraper::tick(std::uint64_t slot) {
  const auto snap = tracker_.snapshot();
  const auto sample = sensors_(snap.ts, snap.stage);
  std::lock_guard lock(mu_);
  if (!have_flush_ts_) {
    start_ts_ = snap.ts;
    last_flush_ts_ = snap.ts;
    have_flush_ts_ = true;
  }
  const double nominal = start_ts_ + static_cast<double>(slot) * cfg_.scrape_interval_s;
  // Flush deadlines are fixed-rate too: start + k * push_interval.
  if (cfg_.pushes_enabled && nominal >= last_flush_ts_ + cfg_.push_interval_s) {
    const double due = last_flush_ts_ + cfg_.push_interval_s;
    if (flush_locked(snap.ts)) {
      last_flush_ts_ = due;
      while (nominal >= last_flush_ts_ + cfg_.push_interval_s) last_flush_ts_ += cfg_.push_interval_s;
    }
  }
  encode_sample(sample, buffer_.samples);
  ++stats_.samples_scraped;
  if (buffer_.sample_count() > cfg_.max_buffered_samples) {
    buffer_.samples.erase(buffer_.samples.begin(), buffer_.samples.begin() + kEncodedSampleSize);
    ++stats_.samples_dropped;
  }
}

bool Scraper::flush_locked(double now_ts) {
  if (buffer_.empty()) return true;
  if (sink_ == nullptr) return false;
  try {
    push_batch(buffer_, *sink_);
  } catch (const Error&) {
    ++stats_.push_failures;
    return false;
  }
  const auto n = buffer_.sample_count();
  stats_.samples_pushed += n;
  stats_.events_pushed += buffer_.events.size();
  stats_.batch_sizes.push_back(n);
  stats_.flush_times_s.push_back(now_ts);
  buffer_ = MetricBatch{};
  return true;
}

void Scraper::add_event(const StageEvent& e) {
  std::lock_guard lock(mu_);
  buffer_.events.push_back(e);
}

void Scraper::stop() {
  {
    std::lock_guard lock(mu_);
    if (stopped_) return;
    stop_requested_ = true;
  }
  cv_.notify_all();
  if (thread_.joinable()) thread_.join();
  std::lock_guard lock(mu_);
  stopped_ = true;
  flush_locked(tracker_.clock().now());
}

ScraperStats Scraper::stats() const {
  std::lock_guard lock(mu_);
  return stats_;
}

std::size_t Scraper::buffered_bytes() const {
  std::lock_guard lock(mu_);
  return buffer_.samples.size();
}

std::size_t Scraper::buffered_samples() const {
  std::lock_guard lock(mu_);
  return buffer_.sample_count();
}

// ---------------------------------------------------------------------------
// Association

std::vector<StageWindow> pair_stage_events(std::span<const StageEvent> events) {
  using Key = std::tuple<std::uint32_t, std::uint32_t, std::uint8_t>;
  struct Edges {
    std::vector<double> starts, ends;
  };
  std::map<Key, Edges> by_key;
  for (const auto& e : events) {
    auto& slot = by_key[{e.client_id, e.round, static_cast<std::uint8_t>(e.kind)}];
    (e.edge == Edge::start ? slot.starts : slot.ends).push_back(e.ts_emulated_s);
  }
  std::vector<std::string> offenders;
  std::vector<StageWindow> windows;
  for (const auto& [key, edges] : by_key) {
    const auto [client, round, kind] = key;
    const auto label = fmt::format("client {} round {} {}", client, round, to_string(static_cast<StageKind>(kind)));
    if (edges.starts.size() != 1 || edges.ends.size() != 1) {
      offenders.push_back(fmt::format("{}: {} start(s), {} end(s)", label, edges.starts.size(), edges.ends.size()));
      continue;
    }
    if (edges.ends[0] < edges.starts[0]) {
      offenders.push_back(label + ": ends before it starts");
      continue;
    }
    windows.push_back({client, round, static_cast<StageKind>(kind), edges.starts[0], edges.ends[0]});
  }
  std::sort(windows.begin(), windows.end(), [](const auto& a, const auto& b) {
    return std::tie(a.client_id, a.start, a.round) < std::tie(b.client_id, b.start, b.round);
  });
  for (std::size_t i = 1; i < windows.size(); ++i) {
    const auto& prev = windows[i - 1];
    const auto& cur = windows[i];
    if (prev.client_id == cur.client_id && cur.start < prev.end) {
      offenders.push_back(fmt::format("client {} round {} {} overlaps round {} {}", cur.client_id, cur.round,
                                      to_string(cur.kind), prev.round, to_string(prev.kind)));
    }
  }
  if (!offenders.empty()) {
    throw PairingError(fmt::format("{} malformed stage window(s)", offenders.size()), std::move(offenders));
  }
  return windows;
}

Association associate_rounds(std::span<const MetricSample> samples, std::span<const StageEvent> events,
                             std::span<const RoundRecord> rounds) {
  Association a;
  a.windows = pair_stage_events(events);
  if (!rounds.empty()) {
    std::vector<std::uint32_t> known;
    for (const auto& r : rounds) known.push_back(r.round);
    std::sort(known.begin(), known.end());
    std::vector<std::string> offenders;
    for (const auto& w : a.windows) {
      if (!std::binary_search(known.begin(), known.end(), w.round)) {
        offenders.push_back(fmt::format("client {} {} window in unrecorded round {}", w.client_id,
                                        to_string(w.kind), w.round));
      }
    }
    if (!offenders.empty()) throw PairingError("stage windows outside recorded rounds", std::move(offenders));
  }

  // windows are sorted by (client, start): locate each client's slice
  std::map<std::uint32_t, std::pair<std::size_t, std::size_t>> slice;
  for (std::size_t i = 0; i < a.windows.size(); ++i) {
    auto [it, inserted] = slice.try_emplace(a.windows[i].client_id, i, i + 1);
    if (!inserted) it->second.second = i + 1;
  }
  a.sample_window.assign(samples.size(), -1);
  a.window_samples.resize(a.windows.size());
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const auto& sample = samples[s];
    auto it = slice.find(sample.client_id);
    if (it != slice.end()) {
      const auto first = a.windows.begin() + static_cast<std::ptrdiff_t>(it->second.first);
      const auto last = a.windows.begin() + static_cast<std::ptrdiff_t>(it->second.second);
      auto w = std::upper_bound(first, last, sample.ts_emulated_s,
                                [](double ts, const StageWindow& win) { return ts < win.start; });
      if (w != first) {
        --w;
        if (sample.ts_emulated_s < w->end) {
          const auto idx = static_cast<std::size_t>(w - a.windows.begin());
          a.sample_window[s] = static_cast<std::int64_t>(idx);
          a.window_samples[idx].push_back(s);
          continue;
        }
      }
    }
    a.idle_samples.push_back(s);
  }
  return a;
}

// ---------------------------------------------------------------------------
// CSV export

std::string samples_csv(std::span<const MetricSample> samples) {
  std::string out = std::string(kSamplesCsvHeader) + "\n";
  for (const auto& s : samples) {
    out += fmt::format("{:.3f},{},{:.3f},{},{:.6f},{},{}\n", s.ts_emulated_s, s.client_id, s.cpu_percent, s.mem_bytes,
                       s.power_w, s.net_up_bytes, s.net_down_bytes);
  }
  return out;
}

std::string stage_events_csv(std::span<const StageEvent> events) {
  std::string out = std::string(kStageEventsCsvHeader) + "\n";
  for (const auto& e : events) {
    out += fmt::format("{:.3f},{},{},{},{}\n", e.ts_emulated_s, e.client_id, e.round, to_string(e.kind),
                       to_string(e.edge));
  }
  return out;
}

std::string rounds_csv(std::span<const RoundRecord> rounds) {
  std::string out = std::string(kRoundsCsvHeader) + "\n";
  for (const auto& r : rounds) {
    std::string ids;
    for (std::size_t i = 0; i < r.sampled_clients.size(); ++i) {
      if (i) ids += ';';
      ids += std::to_string(r.sampled_clients[i]);
    }
    out += fmt::format("{},{:.3f},{:.3f},{:.6f},{}\n", r.round, r.round_start, r.round_end, r.mean_val_accuracy, ids);
  }
  return out;
}

ExportedFiles export_csv(const MetricStore& store, const std::string& job_id, const fs::path& out_dir) {
  if (!store.has_job(job_id)) throw StoreError("unknown job id '" + job_id + "'");
  const auto samples = store.read_samples(job_id);
  const auto events = store.read_events(job_id);
  const auto rounds = store.read_rounds(job_id);
  fs::create_directories(out_dir);
  ExportedFiles f;
  f.samples = out_dir / "samples.csv";
  f.stage_events = out_dir / "stage_events.csv";
  f.rounds = out_dir / "rounds.csv";
  write_file_atomic(f.samples, samples_csv(samples));
  write_file_atomic(f.stage_events, stage_events_csv(events));
  write_file_atomic(f.rounds, rounds_csv(rounds));
  f.sample_rows = samples.size();
  f.event_rows = events.size();
  f.round_rows = rounds.size();
  return f;
}

}  // namespace colext
