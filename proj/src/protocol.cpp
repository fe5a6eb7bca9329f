#include "colext/protocol.hpp"

#include <cstring>

#include "colext/binary_io.hpp"
#include "colext/error.hpp"

namespace colext::proto {

Tag tag_of(const Message& m) noexcept { return static_cast<Tag>(m.index() + 1); }

const char* to_string(Tag t) noexcept {
  switch (t) {
    case Tag::hello: return "Hello";
    case Tag::hello_ack: return "HelloAck";
    case Tag::fit_request: return "FitRequest";
    case Tag::fit_response: return "FitResponse";
    case Tag::eval_request: return "EvalRequest";
    case Tag::eval_response: return "EvalResponse";
    case Tag::shutdown: return "Shutdown";
    case Tag::error: return "Error";
  }
  return "?";
}

namespace {

void put_config(ByteWriter& w, const ConfigMap& c) {
  w.put_u32(static_cast<std::uint32_t>(c.size()));
  for (const auto& [k, v] : c) {
    w.put_string(k);
    w.put_string(v);
  }
}

void put_metrics(ByteWriter& w, const MetricMap& m) {
  w.put_u32(static_cast<std::uint32_t>(m.size()));
  for (const auto& [k, v] : m) {
    w.put_string(k);
    w.put_f32(v);
  }
}

ConfigMap get_config(ByteReader& r) {
  const auto n = r.get_u32();
  if (static_cast<std::uint64_t>(n) * 4 > r.remaining()) throw ProtocolError("config map count exceeds frame");
  ConfigMap c;
  for (std::uint32_t i = 0; i < n; ++i) {
    auto k = r.get_string();
    auto v = r.get_string();
    if (!c.emplace(std::move(k), std::move(v)).second) throw ProtocolError("duplicate config key");
  }
  return c;
}

MetricMap get_metrics(ByteReader& r) {
  const auto n = r.get_u32();
  if (static_cast<std::uint64_t>(n) * 6 > r.remaining()) throw ProtocolError("metric map count exceeds frame");
  MetricMap m;
  for (std::uint32_t i = 0; i < n; ++i) {
    auto k = r.get_string();
    const auto v = r.get_f32();
    if (!m.emplace(std::move(k), v).second) throw ProtocolError("duplicate metric key");
  }
  return m;
}

struct PayloadWriter {
  ByteWriter& w;

  void operator()(const Hello& m) {
    w.put_u32(m.client_id);
    w.put_string(m.dev_type);
  }
  void operator()(const HelloAck& m) { put_config(w, m.config); }
  void operator()(const FitRequest& m) {
    w.put_u32(m.round);
    encode_params(m.params, w);
    put_config(w, m.config);
  }
  void operator()(const FitResponse& m) {
    w.put_u32(m.round);
    w.put_u32(m.client_id);
    w.put_u32(m.num_examples);
    encode_params(m.params, w);
    put_metrics(w, m.metrics);
  }
  void operator()(const EvalRequest& m) {
    w.put_u32(m.round);
    encode_params(m.params, w);
    put_config(w, m.config);
  }
  void operator()(const EvalResponse& m) {
    w.put_u32(m.round);
    w.put_u32(m.client_id);
    w.put_u32(m.num_examples);
    w.put_f32(m.loss);
    w.put_f32(m.accuracy);
    put_metrics(w, m.metrics);
  }
  void operator()(const Shutdown&) {}
  void operator()(const ErrorMessage& m) { w.put_string(m.reason); }
};

}  // namespace

std::vector<std::uint8_t> encode(const Message& m) {
  std::vector<std::uint8_t> out(kFrameHeaderBytes);
  ByteWriter w(out);
  std::visit(PayloadWriter{w}, m);
  const auto len = out.size() - 4;
  if (len > kMaxFrameLength) throw ProtocolError("message exceeds maximum frame length");
  const auto len32 = static_cast<std::uint32_t>(len);
  std::memcpy(out.data(), &len32, 4);
  out[4] = static_cast<std::uint8_t>(tag_of(m));
  return out;
}

Message decode_payload(std::uint8_t tag, std::span<const std::uint8_t> payload) {
  ByteReader r(payload);
  Message out;
  switch (static_cast<Tag>(tag)) {
    case Tag::hello: {
      Hello m;
      m.client_id = r.get_u32();
      m.dev_type = r.get_string();
      out = std::move(m);
      break;
    }
    case Tag::hello_ack: out = HelloAck{get_config(r)}; break;
    case Tag::fit_request: {
      FitRequest m;
      m.round = r.get_u32();
      m.params = decode_params(r);
      m.config = get_config(r);
      out = std::move(m);
      break;
    }
    case Tag::fit_response: {
      FitResponse m;
      m.round = r.get_u32();
      m.client_id = r.get_u32();
      m.num_examples = r.get_u32();
      m.params = decode_params(r);
      m.metrics = get_metrics(r);
      out = std::move(m);
      break;
    }
    case Tag::eval_request: {
      EvalRequest m;
      m.round = r.get_u32();
      m.params = decode_params(r);
      m.config = get_config(r);
      out = std::move(m);
      break;
    }
    case Tag::eval_response: {
      EvalResponse m;
      m.round = r.get_u32();
      m.client_id = r.get_u32();
      m.num_examples = r.get_u32();
      m.loss = r.get_f32();
      m.accuracy = r.get_f32();
      m.metrics = get_metrics(r);
      out = std::move(m);
      break;
    }
    case Tag::shutdown: out = Shutdown{}; break;
    case Tag::error: out = ErrorMessage{r.get_string()}; break;
    default: throw ProtocolError("unknown message tag " + std::to_string(tag));
  }
  if (!r.empty()) throw ProtocolError("trailing bytes after " + std::string(to_string(static_cast<Tag>(tag))));
  return out;
}

std::uint32_t frame_length(std::span<const std::uint8_t, 4> header) {
  std::uint32_t len;
  std::memcpy(&len, header.data(), 4);
  if (len == 0) throw ProtocolError("frame length 0 leaves no room for a tag");
  if (len > kMaxFrameLength) throw ProtocolError("frame length " + std::to_string(len) + " exceeds limit");
  return len;
}

Message decode(std::span<const std::uint8_t> frame) {
  if (frame.size() < kFrameHeaderBytes) throw ProtocolError("truncated frame header");
  const auto len = frame_length(frame.first<4>());
  if (static_cast<std::uint64_t>(len) + 4 != frame.size()) {
    throw ProtocolError("frame length field " + std::to_string(len) + " does not match " +
                        std::to_string(frame.size() - 4) + " available bytes");
  }
  return decode_payload(frame[4], frame.subspan(kFrameHeaderBytes));
}

}  // namespace colext::proto
