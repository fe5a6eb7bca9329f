#pragma once

// Helpers shared by the unit tests and the acceptance binary.

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <future>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "colext/client.hpp"
#include "colext/partition.hpp"
#include "colext/protocol.hpp"
#include "colext/server.hpp"

namespace colext::testing {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "colext") {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const noexcept { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline DeviceProfile flat_profile(const std::string& name, double sps = 1000.0, double idle = 2.0,
                                  double delta = 1.0, double bps = 1e9) {
  DeviceProfile p;
  p.name = name;
  p.samples_per_second = sps;
  p.idle_power_w = idle;
  p.active_power_delta_w = delta;
  p.uplink_bps = bps;
  p.downlink_bps = bps;
  p.power_noise_sigma_w = 0.0;
  return p;
}

// Per-client train/val shards built the same way launch-job builds them.
inline std::vector<TrainValSplit> make_shards(std::uint32_t clients, std::uint32_t classes, std::uint32_t dim,
                                              std::uint32_t per_class, std::uint64_t seed,
                                              std::optional<double> alpha, BlobOptions blobs = {3.0, 1.0},
                                              double val_fraction = 0.2) {
  const auto data = synth_dataset(classes, dim, per_class, seed, blobs);
  PartitionPlan plan;
  plan.num_clients = clients;
  plan.alpha = alpha;
  plan.seed = seed;
  plan.val_fraction = val_fraction;
  std::vector<TrainValSplit> out;
  for (std::uint32_t k = 0; const auto& shard : dirichlet_partition(data, plan)) {
    out.push_back(train_val_split(shard, val_fraction, round_seed(seed, k++)));
  }
  return out;
}

// Random well-formed message of any type, with finite reals only so that
// decoded messages compare equal.
inline proto::Message random_message(std::mt19937_64& rng) {
  auto u32 = [&] { return static_cast<std::uint32_t>(rng()); };
  auto real = [&] { return std::uniform_real_distribution<float>(-1e6f, 1e6f)(rng); };
  auto text = [&] {
    std::string t(rng() % 24, ' ');
    for (auto& ch : t) ch = static_cast<char>(rng() % 256);
    return t;
  };
  auto params = [&] {
    ParamVector p;
    const auto layers = rng() % 4;
    for (std::size_t l = 0; l < layers; ++l) {
      p.shapes.push_back({static_cast<std::uint32_t>(rng() % 5), static_cast<std::uint32_t>(rng() % 5),
                          static_cast<std::uint32_t>(rng() % 5)});
    }
    p.values.resize(p.expected_size());
    for (auto& v : p.values) v = real();
    return p;
  };
  auto config = [&] {
    proto::ConfigMap c;
    for (std::size_t i = rng() % 5; i > 0; --i) c[text()] = text();
    return c;
  };
  auto metrics = [&] {
    proto::MetricMap m;
    for (std::size_t i = rng() % 5; i > 0; --i) m[text()] = real();
    return m;
  };
  switch (rng() % 8) {
    case 0: return proto::Hello{u32(), text()};
    case 1: return proto::HelloAck{config()};
    case 2: return proto::FitRequest{u32(), params(), config()};
    case 3: return proto::FitResponse{u32(), u32(), u32(), params(), metrics()};
    case 4: return proto::EvalRequest{u32(), params(), config()};
    case 5: return proto::EvalResponse{u32(), u32(), u32(), real(), real(), metrics()};
    case 6: return proto::Shutdown{};
    default: return proto::ErrorMessage{text()};
  }
}

// Mutates a valid frame: flips, truncates, extends or rewrites the header.
inline std::vector<std::uint8_t> mangle(std::vector<std::uint8_t> frame, std::mt19937_64& rng) {
  switch (rng() % 5) {
    case 0:
      for (int i = 0; i < 1 + static_cast<int>(rng() % 4); ++i) frame[rng() % frame.size()] ^= static_cast<std::uint8_t>(1 + rng() % 255);
      break;
    case 1: frame.resize(rng() % frame.size()); break;
    case 2: frame.push_back(static_cast<std::uint8_t>(rng())); break;
    case 3: frame[4] = static_cast<std::uint8_t>(rng()); break;
    default:
      for (int i = 0; i < 4; ++i) frame[i] = static_cast<std::uint8_t>(rng());
      break;
  }
  return frame;
}

inline std::vector<std::uint8_t> random_bytes(std::mt19937_64& rng, std::size_t max_len) {
  std::vector<std::uint8_t> b(rng() % (max_len + 1));
  for (auto& x : b) x = static_cast<std::uint8_t>(rng());
  return b;
}

struct InProcessRun {
  ServerResult server;
  std::vector<ClientResult> clients;
  std::string server_error;
};

// Server and clients as threads of this process, talking over loopback.
// Client ports are filled in once the server listens.
inline InProcessRun run_in_process(ServerOptions sopts, std::vector<ClientOptions> copts) {
  InProcessRun out;
  std::promise<std::uint16_t> port;
  auto port_future = port.get_future();
  sopts.listen = {"127.0.0.1", 0};
  sopts.on_listening = [&port](std::uint16_t p) { port.set_value(p); };
  std::thread server([&] {
    try {
      out.server = server_run(sopts);
    } catch (const std::exception& e) {
      out.server_error = e.what();
    }
  });
  const auto p = port_future.get();
  out.clients.resize(copts.size());
  std::vector<std::thread> clients;
  for (std::size_t i = 0; i < copts.size(); ++i) {
    copts[i].server = {"127.0.0.1", p};
    clients.emplace_back([&, i] { out.clients[i] = client_run(copts[i]); });
  }
  for (auto& t : clients) t.join();
  server.join();
  return out;
}

// Client options for shards[k] on profiles[k].
inline std::vector<ClientOptions> client_options(const std::vector<TrainValSplit>& shards,
                                                 const std::vector<DeviceProfile>& profiles,
                                                 const ModelSpec& model) {
  std::vector<ClientOptions> out;
  for (std::uint32_t k = 0; k < shards.size(); ++k) {
    ClientOptions c;
    c.client_id = k;
    c.profile = profiles[k];
    c.train = shards[k].train;
    c.val = shards[k].val;
    c.model = model;
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace colext::testing
