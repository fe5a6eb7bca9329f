#include "colext/server.hpp"

#include <algorithm>
#include <memory>
#include <optional>
#include <set>
#include <thread>

#include <fmt/format.h>

#include "colext/blocking_queue.hpp"
#include "colext/error.hpp"
#include "colext/protocol.hpp"

namespace colext {

std::uint64_t client_train_seed(std::uint64_t strategy_seed, std::uint32_t round, std::uint32_t client_id) noexcept {
  return round_seed(round_seed(strategy_seed, round) ^ 0xC0FFEEULL, client_id);
}

namespace {

using Clock = std::chrono::steady_clock;

struct Inbound {
  std::size_t conn = 0;
  std::optional<proto::Message> msg;  // nullopt: connection gone
  std::string error;
};

float metric(const proto::MetricMap& m, const char* key) {
  auto it = m.find(key);
  return it == m.end() ? 0.0f : it->second;
}

// Owns the listener, the accepted connections and their reader threads.
// Only the round loop (the caller of server_run) touches registration and
// round state; readers just forward owned messages through the queue.
class Session {
 public:
  explicit Session(const ServerOptions& opts) : opts_(opts), listener_(opts.listen) {
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  ~Session() { teardown(); }

  std::uint16_t port() const { return listener_.port(); }

  void teardown() {
    listener_.close();
    if (acceptor_.joinable()) acceptor_.join();
    std::lock_guard lock(conns_mu_);
    for (auto& c : conns_) c->shutdown();
    for (auto& t : readers_) {
      if (t.joinable()) t.join();
    }
    readers_.clear();
  }

  Inbound next(const char* waiting_for) {
    auto in = queue_.pop_for(opts_.io_timeout);
    if (!in) throw Error(std::string("timed out waiting for ") + waiting_for);
    return std::move(*in);
  }

  net::Connection& conn(std::size_t idx) {
    std::lock_guard lock(conns_mu_);
    return *conns_.at(idx);
  }

  void send(std::size_t idx, const proto::Message& m) { conn(idx).send(m); }

  // Best effort; used on the failure path.
  void broadcast_error(const std::vector<std::size_t>& targets, const std::string& reason) {
    for (auto idx : targets) {
      try {
        send(idx, proto::ErrorMessage{reason});
      } catch (const std::exception&) {
      }
    }
  }

 private:
  void accept_loop() {
    while (auto c = listener_.accept()) {
      std::lock_guard lock(conns_mu_);
      const std::size_t idx = conns_.size();
      conns_.push_back(std::make_unique<net::Connection>(std::move(*c)));
      net::Connection* raw = conns_.back().get();
      readers_.emplace_back([this, idx, raw] { read_loop(idx, *raw); });
    }
  }

  void read_loop(std::size_t idx, net::Connection& c) {
    try {
      while (auto m = c.receive()) queue_.push(Inbound{idx, std::move(*m), {}});
      queue_.push(Inbound{idx, std::nullopt, "connection closed"});
    } catch (const std::exception& e) {
      queue_.push(Inbound{idx, std::nullopt, e.what()});
    }
  }

  const ServerOptions& opts_;
  net::Listener listener_;
  std::thread acceptor_;
  std::mutex conns_mu_;
  std::vector<std::unique_ptr<net::Connection>> conns_;
  std::vector<std::thread> readers_;
  BlockingQueue<Inbound> queue_;
};

class RoundLoop {
 public:
  RoundLoop(const ServerOptions& opts, Session& session) : opts_(opts), session_(session) {}

  ServerResult run() {
    register_clients();
    send_hello_acks();

    ServerResult result;
    ParamVector global = init_model(opts_.model.with_ratio(WidthRatio{}), opts_.strategy.seed);
    double now = 0.0;
    for (std::uint32_t round = 0;; ++round) {
      const auto wall_start = Clock::now();
      RoundRecord rec;
      rec.round = round;
      rec.round_start = now;
      rec.clients.resize(opts_.n_clients);
      for (std::uint32_t k = 0; k < opts_.n_clients; ++k) rec.clients[k].client_id = k;

      rec.sampled_clients = sample_clients(all_ids_, opts_.strategy.fraction_fit, round_seed(opts_.strategy.seed, round));
      const double fit_phase = run_fit(round, rec, global);
      const double eval_phase = run_eval(round, rec, global);
      now += fit_phase + eval_phase;
      rec.round_end = now;
      rec.wall_duration_s = std::chrono::duration<double>(Clock::now() - wall_start).count();

      result.history.push_back(rec);
      if (opts_.on_round) opts_.on_round(rec);
      if (should_stop(result.history, opts_.strategy)) break;
    }

    for (std::uint32_t k = 0; k < opts_.n_clients; ++k) session_.send(conn_of_[k], proto::Shutdown{});
    wait_for_disconnects();
    result.final_params = std::move(global);
    return result;
  }

  std::vector<std::size_t> registered_connections() const {
    std::vector<std::size_t> out;
    for (const auto& [k, c] : conn_of_) out.push_back(c);
    return out;
  }

 private:
  void register_clients() {
    while (conn_of_.size() < opts_.n_clients) {
      auto in = session_.next("client registration");
      if (!in.msg) {
        if (client_of_.contains(in.conn)) {
          throw Error(fmt::format("client {} disconnected during registration: {}", client_of_[in.conn], in.error));
        }
        continue;  // stray connection that never said Hello
      }
      const auto* hello = std::get_if<proto::Hello>(&*in.msg);
      if (hello == nullptr) {
        reject(in.conn, "expected Hello");
        continue;
      }
      if (hello->client_id >= opts_.n_clients || conn_of_.contains(hello->client_id)) {
        reject(in.conn, fmt::format("client id {} is out of range or already registered", hello->client_id));
        continue;
      }
      conn_of_[hello->client_id] = in.conn;
      client_of_[in.conn] = hello->client_id;
      dev_type_[hello->client_id] = hello->dev_type;
    }
    for (std::uint32_t k = 0; k < opts_.n_clients; ++k) all_ids_.push_back(k);
  }

  void reject(std::size_t conn, const std::string& reason) {
    try {
      session_.send(conn, proto::ErrorMessage{reason});
      session_.conn(conn).shutdown();
    } catch (const std::exception&) {
    }
  }

  void send_hello_acks() {
    // every process of the job maps steady_clock onto emulated time from here
    const auto epoch = Clock::now();
    proto::HelloAck ack;
    ack.config["epoch_ns"] = std::to_string(
        std::chrono::duration_cast<std::chrono::nanoseconds>(epoch.time_since_epoch()).count());
    ack.config["time_scale"] = fmt::format("{}", opts_.time_scale);
    ack.config["n_clients"] = std::to_string(opts_.n_clients);
    for (std::uint32_t k = 0; k < opts_.n_clients; ++k) session_.send(conn_of_[k], ack);
  }

  WidthRatio ratio_of(std::uint32_t client) const {
    if (opts_.strategy.algorithm != Algorithm::heterofl) return WidthRatio{};
    auto it = opts_.width_ratios.find(dev_type_.at(client));
    return it == opts_.width_ratios.end() ? WidthRatio{} : it->second;
  }

  ParamVector params_for(std::uint32_t client, const ParamVector& global) const {
    const auto ratio = ratio_of(client);
    if (ratio.is_full()) return global;
    return heterofl_extract(global, opts_.model, ratio);
  }

  proto::ConfigMap request_config(std::uint32_t round, std::uint32_t client) const {
    const auto ratio = ratio_of(client);
    const double full = static_cast<double>(opts_.model.with_ratio(WidthRatio{}).param_count());
    const double sub = static_cast<double>(opts_.model.with_ratio(ratio).param_count());
    proto::ConfigMap c;
    c["local_epochs"] = std::to_string(opts_.local_epochs);
    c["batch_size"] = std::to_string(opts_.batch_size);
    c["learning_rate"] = fmt::format("{}", opts_.learning_rate);
    c["mu"] = fmt::format("{}", opts_.strategy.algorithm == Algorithm::fedavg ? 0.0 : opts_.strategy.mu);
    c["seed"] = std::to_string(client_train_seed(opts_.strategy.seed, round, client));
    c["width_ratio"] = ratio.to_string();
    c["work_fraction"] = fmt::format("{}", sub / full);
    return c;
  }

  [[noreturn]] void fail_disconnect(const Inbound& in) {
    auto it = client_of_.find(in.conn);
    const std::string who = it == client_of_.end() ? "an unregistered peer" : fmt::format("client {}", it->second);
    throw Error(fmt::format("{} disconnected mid-round: {}", who, in.error));
  }

  std::uint32_t sender(const Inbound& in) const {
    auto it = client_of_.find(in.conn);
    if (it == client_of_.end()) throw ProtocolError("message from an unregistered connection");
    return it->second;
  }

  double run_fit(std::uint32_t round, RoundRecord& rec, ParamVector& global) {
    for (auto k : rec.sampled_clients) {
      session_.send(conn_of_[k], proto::FitRequest{round, params_for(k, global), request_config(round, k)});
    }
    std::set<std::uint32_t> pending(rec.sampled_clients.begin(), rec.sampled_clients.end());
    std::vector<ClientUpdate> updates;
    std::vector<double> arrival;
    while (!pending.empty()) {
      auto in = session_.next("FitResponse");
      if (!in.msg) fail_disconnect(in);
      const auto k = sender(in);
      auto* resp = std::get_if<proto::FitResponse>(&*in.msg);
      if (resp == nullptr) {
        throw ProtocolError(fmt::format("client {} sent {} during fit", k, proto::to_string(proto::tag_of(*in.msg))));
      }
      if (resp->round != round || resp->client_id != k || !pending.contains(k)) {
        throw ProtocolError(fmt::format("client {} answered round {} while round {} is open", k, resp->round, round));
      }
      pending.erase(k);
      auto& stats = rec.clients[k];
      stats.sampled = true;
      stats.downlink_s = metric(resp->metrics, "downlink_s");
      stats.fit_s = metric(resp->metrics, "fit_s");
      stats.uplink_s = metric(resp->metrics, "uplink_s");
      stats.train_loss = metric(resp->metrics, "train_loss");
      stats.num_batches = static_cast<std::uint64_t>(metric(resp->metrics, "num_batches"));
      stats.num_examples = resp->num_examples;

      ClientUpdate u;
      u.client_id = k;
      u.params = std::move(resp->params);
      u.num_examples = resp->num_examples;
      u.width_ratio = ratio_of(k);
      u.train_loss = stats.train_loss;
      updates.push_back(std::move(u));
      arrival.push_back(stats.downlink_s + stats.fit_s + stats.uplink_s);
    }

    // updates that would land after the deadline are dropped
    std::vector<ClientUpdate> on_time;
    double phase = 0.0;
    bool dropped = false;
    for (std::size_t i = 0; i < updates.size(); ++i) {
      if (opts_.strategy.round_deadline_s && arrival[i] > *opts_.strategy.round_deadline_s) {
        dropped = true;
        continue;
      }
      phase = std::max(phase, arrival[i]);
      rec.clients[updates[i].client_id].aggregated = true;
      on_time.push_back(std::move(updates[i]));
    }
    if (on_time.empty()) throw Error(fmt::format("round {} failed: no update arrived before the deadline", round));
    if (dropped) phase = *opts_.strategy.round_deadline_s;

    if (opts_.strategy.algorithm == Algorithm::heterofl) {
      global = heterofl_aggregate(on_time, global, opts_.model.with_ratio(WidthRatio{}));
    } else {
      global = aggregate_fedavg(on_time);
    }
    return phase;
  }

  double run_eval(std::uint32_t round, RoundRecord& rec, const ParamVector& global) {
    for (std::uint32_t k = 0; k < opts_.n_clients; ++k) {
      session_.send(conn_of_[k], proto::EvalRequest{round, params_for(k, global), request_config(round, k)});
    }
    std::set<std::uint32_t> pending(all_ids_.begin(), all_ids_.end());
    std::vector<double> accuracies(opts_.n_clients, 0.0);
    double phase = 0.0;
    while (!pending.empty()) {
      auto in = session_.next("EvalResponse");
      if (!in.msg) fail_disconnect(in);
      const auto k = sender(in);
      auto* resp = std::get_if<proto::EvalResponse>(&*in.msg);
      if (resp == nullptr) {
        throw ProtocolError(fmt::format("client {} sent {} during eval", k, proto::to_string(proto::tag_of(*in.msg))));
      }
      if (resp->round != round || resp->client_id != k || !pending.contains(k)) {
        throw ProtocolError(fmt::format("client {} evaluated round {} while round {} is open", k, resp->round, round));
      }
      pending.erase(k);
      auto& stats = rec.clients[k];
      stats.eval_s = metric(resp->metrics, "eval_s");
      stats.val_loss = resp->loss;
      stats.val_accuracy = resp->accuracy;
      accuracies[k] = resp->accuracy;
      phase = std::max(phase, static_cast<double>(metric(resp->metrics, "downlink_s")) + stats.eval_s +
                                  metric(resp->metrics, "uplink_s"));
    }
    rec.mean_val_accuracy = mean_accuracy(accuracies);
    return phase;
  }

  void wait_for_disconnects() {
    std::set<std::uint32_t> open(all_ids_.begin(), all_ids_.end());
    const auto deadline = Clock::now() + std::chrono::seconds(10);
    while (!open.empty() && Clock::now() < deadline) {
      try {
        auto in = session_.next("client exit");
        if (!in.msg) {
          if (auto it = client_of_.find(in.conn); it != client_of_.end()) open.erase(it->second);
        }
      } catch (const Error&) {
        break;
      }
    }
  }

  const ServerOptions& opts_;
  Session& session_;
  std::map<std::uint32_t, std::size_t> conn_of_;
  std::map<std::size_t, std::uint32_t> client_of_;
  std::map<std::uint32_t, std::string> dev_type_;
  std::vector<std::uint32_t> all_ids_;
};

}  // namespace

ServerResult server_run(const ServerOptions& opts) {
  opts.model.validate();
  opts.strategy.validate(opts.n_clients);
  if (!(opts.time_scale > 0.0)) throw InvalidArgument("time_scale must be positive");

  Session session(opts);
  if (opts.on_listening) opts.on_listening(session.port());
  RoundLoop loop(opts, session);
  try {
    auto result = loop.run();
    session.teardown();
    return result;
  } catch (const std::exception& e) {
    session.broadcast_error(loop.registered_connections(), e.what());
    session.teardown();
    throw;
  }
}

}  // namespace colext
