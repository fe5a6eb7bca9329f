#include <algorithm>
#include <chrono>
#include <map>
#include <mutex>
#include <random>
#include <thread>

#include <gtest/gtest.h>

#include "colext/error.hpp"
#include "colext/net.hpp"
#include "colext/protocol.hpp"
#include "support.hpp"

using namespace colext;
namespace t = colext::testing;

namespace {

ModelSpec softmax(std::uint32_t d, std::uint32_t c) {
  ModelSpec s;
  s.layer_widths = {d, c};
  return s;
}

ServerOptions server_opts(std::uint32_t n, std::uint32_t rounds, double fraction = 1.0) {
  ServerOptions o;
  o.n_clients = n;
  o.strategy.num_rounds = rounds;
  o.strategy.fraction_fit = fraction;
  o.strategy.seed = 3;
  o.model = softmax(4, 3);
  o.time_scale = 1000.0;
  o.io_timeout = std::chrono::seconds(60);
  return o;
}

std::vector<DeviceProfile> profiles(std::size_t n, double sps = 1000.0, double bps = 1e9) {
  std::vector<DeviceProfile> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(t::flat_profile("dev", sps, 2.0, 1.0, bps));
  return out;
}

// Recorded stage edges of every client, keyed by (client, round, kind).
struct EdgeLog {
  std::mutex mu;
  std::map<std::tuple<std::uint32_t, std::uint32_t, StageKind>, std::vector<StageEvent>> edges;

  void attach(std::vector<ClientOptions>& opts) {
    for (auto& o : opts) {
      o.on_stage_event = [this](const StageEvent& e) {
        std::lock_guard lock(mu);
        edges[{e.client_id, e.round, e.kind}].push_back(e);
      };
    }
  }
};

}  // namespace

TEST(Wire, ShutdownIsFiveBytes) {
  EXPECT_EQ(proto::encode(proto::Shutdown{}), (std::vector<std::uint8_t>{1, 0, 0, 0, 7}));
}

TEST(Wire, HelloLayout) {
  const auto b = proto::encode(proto::Hello{3, "ab"});
  EXPECT_EQ(b, (std::vector<std::uint8_t>{9, 0, 0, 0, 1, 3, 0, 0, 0, 2, 0, 'a', 'b'}));
}

TEST(Wire, FitRequestRoundTrip) {
  ModelSpec s;
  s.layer_widths = {4, 8, 3};
  proto::FitRequest req{7, init_model(s, 1), {{"lr", "0.1"}}};
  const auto m = proto::decode(proto::encode(req));
  EXPECT_EQ(std::get<proto::FitRequest>(m), req);
  EXPECT_EQ(std::get<proto::FitRequest>(m).params.values.size(), 67u);
}

TEST(Property, FuzzedMessagesRoundTrip) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 2000; ++i) {
    const auto m = t::random_message(rng);
    const auto frame = proto::encode(m);
    EXPECT_EQ(proto::decode(frame), m);
  }
}

TEST(Property, MalformedFramesNeverCrash) {
  std::mt19937_64 rng(12);
  int rejected = 0;
  for (int i = 0; i < 5000; ++i) {
    std::vector<std::uint8_t> frame =
        i % 2 ? t::random_bytes(rng, 64) : t::mangle(proto::encode(t::random_message(rng)), rng);
    try {
      (void)proto::decode(frame);
    } catch (const ProtocolError&) {
      ++rejected;
    }
  }
  EXPECT_GT(rejected, 0);
}

TEST(Wire, SpecificRejections) {
  EXPECT_THROW(proto::decode(std::vector<std::uint8_t>{0, 0, 0, 0, 7}), ProtocolError);
  EXPECT_THROW(proto::decode(std::vector<std::uint8_t>{1, 0, 0, 0, 9}), ProtocolError);
  EXPECT_THROW(proto::decode(std::vector<std::uint8_t>{2, 0, 0, 0, 7, 0}), ProtocolError);
  EXPECT_THROW(proto::decode(std::vector<std::uint8_t>{1, 0, 0}), ProtocolError);
  EXPECT_THROW(proto::decode(std::vector<std::uint8_t>{0xff, 0xff, 0xff, 0xff, 7}), ProtocolError);
  // a param header claiming 2^32-1 layers inside a tiny frame
  EXPECT_THROW(proto::decode(std::vector<std::uint8_t>{9, 0, 0, 0, 3, 0, 0, 0, 0, 0xff, 0xff, 0xff, 0xff}),
               ProtocolError);
}

TEST(Net, ParseAddress) {
  const auto a = net::parse_address("127.0.0.1:8080");
  EXPECT_EQ(a.host, "127.0.0.1");
  EXPECT_EQ(a.port, 8080);
  EXPECT_THROW(net::parse_address("nohost"), InvalidArgument);
  EXPECT_THROW(net::parse_address("h:99999"), InvalidArgument);
}

TEST(Net, ConnectGivesUp) {
  net::RetryPolicy r;
  r.max_attempts = 3;
  r.initial_backoff = std::chrono::milliseconds(1);
  EXPECT_THROW(net::connect({"127.0.0.1", net::pick_free_port()}, r), Error);
}

TEST(Net, GarbageOnTheWireIsAProtocolError) {
  net::Listener l({"127.0.0.1", 0});
  std::thread peer([&] {
    auto c = net::connect({"127.0.0.1", l.port()});
    const std::vector<std::uint8_t> junk{3, 0, 0, 0, 42, 1, 2};
    c.send_frame(junk);
  });
  auto conn = l.accept();
  ASSERT_TRUE(conn);
  EXPECT_THROW(conn->receive(), ProtocolError);
  peer.join();
}

TEST(Session, OneClientOneRound) {
  const auto shards = t::make_shards(1, 3, 4, 20, 1, std::nullopt);
  auto copts = t::client_options(shards, profiles(1), softmax(4, 3));
  const auto run = t::run_in_process(server_opts(1, 1), copts);
  ASSERT_EQ(run.server_error, "");
  EXPECT_EQ(run.server.history.size(), 1u);
  EXPECT_EQ(run.clients[0].exit_code, 0) << run.clients[0].error;
  EXPECT_EQ(run.clients[0].fits, 1u);
  EXPECT_EQ(run.clients[0].evals, 1u);
  EXPECT_EQ(run.server.history[0].clients[0].num_examples, shards[0].train.size());
}

TEST(Session, FractionSamplesFitsButEvaluatesEveryone) {
  const auto shards = t::make_shards(10, 3, 4, 40, 2, 1.0);
  auto copts = t::client_options(shards, profiles(10), softmax(4, 3));
  EdgeLog log;
  log.attach(copts);
  const auto run = t::run_in_process(server_opts(10, 3, 0.4), copts);
  ASSERT_EQ(run.server_error, "");
  ASSERT_EQ(run.server.history.size(), 3u);
  std::uint64_t fits = 0, evals = 0;
  for (const auto& c : run.clients) {
    EXPECT_EQ(c.exit_code, 0) << c.error;
    fits += c.fits;
    evals += c.evals;
  }
  EXPECT_EQ(fits, 12u);
  EXPECT_EQ(evals, 30u);
  for (const auto& rec : run.server.history) {
    EXPECT_EQ(rec.sampled_clients.size(), 4u);
    std::size_t aggregated = 0;
    for (const auto& c : rec.clients) aggregated += c.aggregated;
    EXPECT_EQ(aggregated, 4u);
    for (std::uint32_t k = 0; k < 10; ++k) {
      const bool sampled = std::count(rec.sampled_clients.begin(), rec.sampled_clients.end(), k) > 0;
      EXPECT_EQ(log.edges[std::make_tuple(k, rec.round, StageKind::fit)].size(), sampled ? 2u : 0u);
      EXPECT_EQ(log.edges[std::make_tuple(k, rec.round, StageKind::eval)].size(), 2u);
    }
  }
}

TEST(Session, SameSeedSameHistory) {
  const auto shards = t::make_shards(4, 3, 4, 30, 5, 0.5);
  auto run_once = [&] {
    return t::run_in_process(server_opts(4, 4, 0.5), t::client_options(shards, profiles(4), softmax(4, 3)));
  };
  const auto a = run_once();
  const auto b = run_once();
  ASSERT_EQ(a.server_error, "");
  ASSERT_EQ(b.server_error, "");
  EXPECT_EQ(a.server.final_params, b.server.final_params);
  ASSERT_EQ(a.server.history.size(), b.server.history.size());
  EXPECT_EQ(rounds_csv(a.server.history), rounds_csv(b.server.history));
  for (std::size_t i = 0; i < a.server.history.size(); ++i) {
    // wall time is the one non-deterministic field
    auto ra = a.server.history[i], rb = b.server.history[i];
    ra.wall_duration_s = rb.wall_duration_s = 0.0;
    EXPECT_EQ(round_record_to_json(ra), round_record_to_json(rb));
  }
}

// Fit windows on the shared emulated clock cover at least the emulated fit
// time, and the round's wall duration covers the slowest fit + uplink.
TEST(Session, WindowsCoverEmulatedTime) {
  const auto shards = t::make_shards(3, 3, 4, 40, 6, std::nullopt);
  auto copts = t::client_options(shards, profiles(3, 2000.0, 2e5), softmax(4, 3));
  EdgeLog log;
  log.attach(copts);
  auto sopts = server_opts(3, 2);
  sopts.time_scale = 20.0;
  sopts.local_epochs = 2;
  const auto run = t::run_in_process(sopts, copts);
  ASSERT_EQ(run.server_error, "");
  for (const auto& rec : run.server.history) {
    double slowest = 0.0;
    for (const auto& c : rec.clients) {
      const auto& e = log.edges[std::make_tuple(c.client_id, rec.round, StageKind::fit)];
      ASSERT_EQ(e.size(), 2u);
      const double want = emulated_fit_duration(copts[c.client_id].profile, shards[c.client_id].train.size(), 2);
      EXPECT_GE(e[1].ts_emulated_s - e[0].ts_emulated_s, want * (1 - 1e-6));
      slowest = std::max(slowest, c.fit_s + c.uplink_s);
    }
    EXPECT_GE(rec.wall_duration_s * sopts.time_scale, slowest * (1 - 1e-3));
    EXPECT_GE(rec.duration(), slowest);
  }
}

TEST(Session, DeadlineDropsLateUpdates) {
  const auto shards = t::make_shards(3, 3, 4, 60, 7, std::nullopt);
  auto profs = profiles(3, 1000.0);
  profs[2].samples_per_second = 10.0;  // ~12 s of fit, far past the deadline
  auto copts = t::client_options(shards, profs, softmax(4, 3));
  auto sopts = server_opts(3, 1);
  sopts.strategy.round_deadline_s = 1.0;
  const auto run = t::run_in_process(sopts, copts);
  ASSERT_EQ(run.server_error, "");
  const auto& rec = run.server.history.at(0);
  EXPECT_TRUE(rec.clients[0].aggregated);
  EXPECT_FALSE(rec.clients[2].aggregated);
}

TEST(Session, ShutdownRightAfterHello) {
  net::Listener l({"127.0.0.1", 0});
  std::thread server([&] {
    auto c = l.accept();
    auto hello = c->receive();
    ASSERT_TRUE(hello && std::holds_alternative<proto::Hello>(*hello));
    c->send(proto::Shutdown{});
    (void)c->receive();
  });
  const auto shards = t::make_shards(1, 3, 4, 10, 1, std::nullopt);
  auto copts = t::client_options(shards, profiles(1), softmax(4, 3));
  copts[0].server = {"127.0.0.1", l.port()};
  const auto r = client_run(copts[0]);
  server.join();
  EXPECT_EQ(r.exit_code, 0) << r.error;
  EXPECT_EQ(r.fits, 0u);
}

// A client that echoes the wrong round number fails the job.
TEST(Session, RoundEchoIsValidated) {
  auto sopts = server_opts(1, 1);
  std::promise<std::uint16_t> port;
  sopts.on_listening = [&](std::uint16_t p) { port.set_value(p); };
  std::string error;
  std::thread server([&] {
    try {
      server_run(sopts);
    } catch (const std::exception& e) {
      error = e.what();
    }
  });
  auto c = net::connect({"127.0.0.1", port.get_future().get()});
  c.send(proto::Hello{0, "dev"});
  ASSERT_TRUE(std::holds_alternative<proto::HelloAck>(*c.receive()));
  auto req = c.receive();
  ASSERT_TRUE(req && std::holds_alternative<proto::FitRequest>(*req));
  auto& fit = std::get<proto::FitRequest>(*req);
  proto::FitResponse resp{fit.round + 1, 0, 5, fit.params, {{"fit_s", 0.f}, {"uplink_s", 0.f}, {"downlink_s", 0.f}}};
  c.send(resp);
  auto last = c.receive();
  server.join();
  EXPECT_NE(error, "");
  ASSERT_TRUE(last.has_value());
  EXPECT_TRUE(std::holds_alternative<proto::ErrorMessage>(*last));
}

TEST(Session, DuplicateClientIdRejected) {
  auto sopts = server_opts(2, 1);
  sopts.io_timeout = std::chrono::seconds(2);
  std::promise<std::uint16_t> port;
  sopts.on_listening = [&](std::uint16_t p) { port.set_value(p); };
  std::thread server([&] {
    try {
      server_run(sopts);
    } catch (const std::exception&) {
    }
  });
  const auto p = port.get_future().get();
  auto a = net::connect({"127.0.0.1", p});
  a.send(proto::Hello{0, "dev"});
  auto b = net::connect({"127.0.0.1", p});
  b.send(proto::Hello{0, "dev"});
  auto reply = b.receive();
  ASSERT_TRUE(reply.has_value());
  EXPECT_TRUE(std::holds_alternative<proto::ErrorMessage>(*reply));
  a.close();
  b.close();
  server.join();
}

TEST(Session, ClientDeathFailsTheServer) {
  auto sopts = server_opts(2, 5);
  std::promise<std::uint16_t> port;
  sopts.on_listening = [&](std::uint16_t p) { port.set_value(p); };
  std::string error;
  std::thread server([&] {
    try {
      server_run(sopts);
    } catch (const std::exception& e) {
      error = e.what();
    }
  });
  const auto p = port.get_future().get();
  const auto shards = t::make_shards(2, 3, 4, 20, 1, std::nullopt);
  auto copts = t::client_options(shards, profiles(2), softmax(4, 3));
  copts[0].server = {"127.0.0.1", p};
  std::thread good([&] { client_run(copts[0]); });
  {
    auto bad = net::connect({"127.0.0.1", p});
    bad.send(proto::Hello{1, "dev"});
    (void)bad.receive();  // HelloAck
    (void)bad.receive();  // first request, then vanish
  }
  server.join();
  good.join();
  EXPECT_NE(error, "");
}
