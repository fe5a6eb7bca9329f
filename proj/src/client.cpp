#include "colext/client.hpp"

#include <chrono>
#include <memory>
#include <thread>

#include <fmt/format.h>

#include "colext/error.hpp"
#include "colext/protocol.hpp"

namespace colext {

namespace {

using Clock = std::chrono::steady_clock;

const std::string& require_key(const proto::ConfigMap& c, const char* key) {
  auto it = c.find(key);
  if (it == c.end()) throw ProtocolError(std::string("request is missing config key ") + key);
  return it->second;
}

double config_double(const proto::ConfigMap& c, const char* key, double fallback) {
  auto it = c.find(key);
  if (it == c.end()) return fallback;
  try {
    return std::stod(it->second);
  } catch (const std::exception&) {
    throw ProtocolError(fmt::format("config key {} is not a number: {}", key, it->second));
  }
}

std::uint64_t config_u64(const proto::ConfigMap& c, const char* key) {
  const auto& v = require_key(c, key);
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw ProtocolError(fmt::format("config key {} is not an integer: {}", key, v));
  }
}

void sleep_s(double s) {
  if (s > 0.0) std::this_thread::sleep_for(std::chrono::duration<double>(s));
}

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

class Session {
 public:
  Session(const ClientOptions& opts, net::Connection& conn, const proto::HelloAck& ack)
      : opts_(opts),
        conn_(conn),
        clock_(parse_epoch(ack.config), config_double(ack.config, "time_scale", 1.0)),
        tracker_(opts.client_id, clock_) {
    if (!(clock_.time_scale() > 0.0)) throw ProtocolError("HelloAck carries a non-positive time_scale");
    if (opts_.scraper) {
      ProcessSensors sensors(
          opts_.client_id, opts_.profile, opts_.power_seed, [&c = conn_] { return c.bytes_sent(); },
          [&c = conn_] { return c.bytes_received(); });
      scraper_ = std::make_unique<Scraper>(*opts_.scraper, tracker_, std::move(sensors), opts_.sink);
    }
    tracker_.set_listener([this](const StageEvent& e) {
      if (scraper_) scraper_->add_event(e);
      if (opts_.on_stage_event) opts_.on_stage_event(e);
    });
    if (scraper_) scraper_->start();
  }

  ~Session() { stop_scraper(); }

  void stop_scraper() {
    if (scraper_) scraper_->stop();
  }

  std::optional<ScraperStats> scraper_stats() const {
    if (!scraper_) return std::nullopt;
    return scraper_->stats();
  }

  double time_scale() const { return clock_.time_scale(); }

  void fit(proto::FitRequest& req, ClientResult& result) {
    const auto t0 = Clock::now();
    const double downlink = emulated_tx_duration(opts_.profile, conn_.last_frame_bytes(), Direction::downlink);
    throttle(since(t0), downlink, time_scale());

    TrainConfig tc;
    tc.local_epochs = static_cast<std::uint32_t>(config_u64(req.config, "local_epochs"));
    tc.batch_size = static_cast<std::uint32_t>(config_u64(req.config, "batch_size"));
    tc.learning_rate = config_double(req.config, "learning_rate", tc.learning_rate);
    tc.mu = config_double(req.config, "mu", 0.0);
    tc.seed = config_u64(req.config, "seed");
    const auto spec = opts_.model.with_ratio(WidthRatio::parse(require_key(req.config, "width_ratio")));
    const double work = config_double(req.config, "work_fraction", 1.0);

    tracker_.emit(req.round, StageKind::fit, Edge::start);
    const auto t_fit = Clock::now();
    auto trained = local_train(req.params, spec, opts_.train, tc);
    const double fit_s = emulated_fit_duration(opts_.profile, opts_.train.size(), tc.local_epochs, work);
    throttle(since(t_fit), fit_s, time_scale());
    tracker_.emit(req.round, StageKind::fit, Edge::end);

    proto::FitResponse resp;
    resp.round = req.round;
    resp.client_id = opts_.client_id;
    resp.num_examples = static_cast<std::uint32_t>(trained.num_examples);
    resp.params = std::move(trained.params);
    resp.metrics["downlink_s"] = static_cast<float>(downlink);
    resp.metrics["fit_s"] = static_cast<float>(fit_s);
    resp.metrics["train_loss"] = static_cast<float>(trained.train_loss);
    resp.metrics["num_batches"] = static_cast<float>(trained.num_batches);
    // the uplink entry itself is part of the payload, so size it first
    resp.metrics["uplink_s"] = 0.0f;
    const double uplink = emulated_tx_duration(opts_.profile, proto::encode(resp).size(), Direction::uplink);
    resp.metrics["uplink_s"] = static_cast<float>(uplink);
    auto frame = proto::encode(resp);
    sleep_s(uplink / time_scale());
    conn_.send_frame(frame);
    ++result.fits;
  }

  void eval(proto::EvalRequest& req, ClientResult& result) {
    const auto t0 = Clock::now();
    const double downlink = emulated_tx_duration(opts_.profile, conn_.last_frame_bytes(), Direction::downlink);
    throttle(since(t0), downlink, time_scale());

    const auto spec = opts_.model.with_ratio(WidthRatio::parse(require_key(req.config, "width_ratio")));
    const double work = config_double(req.config, "work_fraction", 1.0);

    tracker_.emit(req.round, StageKind::eval, Edge::start);
    const auto t_eval = Clock::now();
    const auto ev = evaluate(req.params, spec, opts_.val);
    const double eval_s = emulated_eval_duration(opts_.profile, opts_.val.size(), work);
    throttle(since(t_eval), eval_s, time_scale());
    tracker_.emit(req.round, StageKind::eval, Edge::end);

    proto::EvalResponse resp;
    resp.round = req.round;
    resp.client_id = opts_.client_id;
    resp.num_examples = static_cast<std::uint32_t>(opts_.val.size());
    resp.loss = static_cast<float>(ev.loss);
    resp.accuracy = static_cast<float>(ev.accuracy);
    resp.metrics["downlink_s"] = static_cast<float>(downlink);
    resp.metrics["eval_s"] = static_cast<float>(eval_s);
    resp.metrics["uplink_s"] = 0.0f;
    const double uplink = emulated_tx_duration(opts_.profile, proto::encode(resp).size(), Direction::uplink);
    resp.metrics["uplink_s"] = static_cast<float>(uplink);
    auto frame = proto::encode(resp);
    sleep_s(uplink / time_scale());
    conn_.send_frame(frame);
    ++result.evals;
  }

 private:
  static Clock::time_point parse_epoch(const proto::ConfigMap& c) {
    const auto& v = require_key(c, "epoch_ns");
    try {
      return Clock::time_point(std::chrono::nanoseconds(std::stoll(v)));
    } catch (const std::exception&) {
      throw ProtocolError("HelloAck epoch_ns is not an integer: " + v);
    }
  }

  const ClientOptions& opts_;
  net::Connection& conn_;
  EmulatedClock clock_;
  StageTracker tracker_;
  std::unique_ptr<Scraper> scraper_;
};

}  // namespace

ClientResult client_run(const ClientOptions& opts) {
  ClientResult result;
  // declared before the session: its scraper reads the connection counters
  net::Connection conn;
  std::unique_ptr<Session> session;
  try {
    opts.profile.validate();
    opts.model.validate();
    opts.train.validate();
    opts.val.validate();
    if (opts.train.size() == 0) throw InvalidArgument("client has no training data");

    conn = net::connect(opts.server, opts.retry);
    conn.send(proto::Hello{opts.client_id, opts.profile.name});
    auto first = conn.receive();
    if (!first) throw Error("server closed the connection before HelloAck");
    if (auto* err = std::get_if<proto::ErrorMessage>(&*first)) throw Error("server rejected client: " + err->reason);
    if (std::holds_alternative<proto::Shutdown>(*first)) return result;
    auto* ack = std::get_if<proto::HelloAck>(&*first);
    if (ack == nullptr) throw ProtocolError(std::string("expected HelloAck, got ") + proto::to_string(proto::tag_of(*first)));
    session = std::make_unique<Session>(opts, conn, *ack);

    for (;;) {
      auto msg = conn.receive();
      if (!msg) throw Error("server closed the connection without Shutdown");
      if (auto* fit = std::get_if<proto::FitRequest>(&*msg)) {
        session->fit(*fit, result);
      } else if (auto* ev = std::get_if<proto::EvalRequest>(&*msg)) {
        session->eval(*ev, result);
      } else if (std::holds_alternative<proto::Shutdown>(*msg)) {
        break;
      } else if (auto* err = std::get_if<proto::ErrorMessage>(&*msg)) {
        throw Error("server aborted the job: " + err->reason);
      } else {
        throw ProtocolError(std::string("unexpected ") + proto::to_string(proto::tag_of(*msg)));
      }
    }
    session->stop_scraper();
    result.scraper_stats = session->scraper_stats();
    result.exit_code = 0;
  } catch (const std::exception& e) {
    result.exit_code = 2;
    result.error = e.what();
    if (session) {
      session->stop_scraper();
      result.scraper_stats = session->scraper_stats();
    }
  }
  return result;
}

}  // namespace colext
