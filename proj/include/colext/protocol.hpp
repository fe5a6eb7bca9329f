#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "colext/model.hpp"

namespace colext::proto {

// Wire tags. A frame is: u32-LE length (tag + payload), u8 tag, payload.
enum class Tag : std::uint8_t {
  hello = 1,
  hello_ack = 2,
  fit_request = 3,
  fit_response = 4,
  eval_request = 5,
  eval_response = 6,
  shutdown = 7,
  error = 8,
};

inline constexpr std::size_t kFrameHeaderBytes = 5;
inline constexpr std::uint32_t kMaxFrameLength = 256u << 20;

// String key-values sent by the server (fit config, clock setup).
using ConfigMap = std::map<std::string, std::string>;
// Numeric client-side measurements (durations, losses).
using MetricMap = std::map<std::string, float>;

struct Hello {
  std::uint32_t client_id = 0;
  std::string dev_type;
  friend bool operator==(const Hello&, const Hello&) = default;
};

struct HelloAck {
  ConfigMap config;
  friend bool operator==(const HelloAck&, const HelloAck&) = default;
};

struct FitRequest {
  std::uint32_t round = 0;
  ParamVector params;
  ConfigMap config;
  friend bool operator==(const FitRequest&, const FitRequest&) = default;
};

struct FitResponse {
  std::uint32_t round = 0;
  std::uint32_t client_id = 0;
  std::uint32_t num_examples = 0;
  ParamVector params;
  MetricMap metrics;
  friend bool operator==(const FitResponse&, const FitResponse&) = default;
};

struct EvalRequest {
  std::uint32_t round = 0;
  ParamVector params;
  ConfigMap config;
  friend bool operator==(const EvalRequest&, const EvalRequest&) = default;
};

struct EvalResponse {
  std::uint32_t round = 0;
  std::uint32_t client_id = 0;
  std::uint32_t num_examples = 0;
  float loss = 0.0f;
  float accuracy = 0.0f;
  MetricMap metrics;
  friend bool operator==(const EvalResponse&, const EvalResponse&) = default;
};

struct Shutdown {
  friend bool operator==(const Shutdown&, const Shutdown&) = default;
};

struct ErrorMessage {
  std::string reason;
  friend bool operator==(const ErrorMessage&, const ErrorMessage&) = default;
};

// Alternative index + 1 == wire tag.
using Message =
    std::variant<Hello, HelloAck, FitRequest, FitResponse, EvalRequest, EvalResponse, Shutdown, ErrorMessage>;

Tag tag_of(const Message& m) noexcept;
const char* to_string(Tag t) noexcept;

std::vector<std::uint8_t> encode(const Message& m);

// Decodes one complete frame. Throws ProtocolError on truncation, unknown
// tags, length mismatch, trailing bytes or an oversized length field.
Message decode(std::span<const std::uint8_t> frame);

// Decodes a payload whose tag has already been read off the wire.
Message decode_payload(std::uint8_t tag, std::span<const std::uint8_t> payload);

// Length field of a frame header; throws on lengths of 0 or above the cap.
std::uint32_t frame_length(std::span<const std::uint8_t, 4> header);

}  // namespace colext::proto
