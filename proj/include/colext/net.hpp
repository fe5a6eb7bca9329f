#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "colext/protocol.hpp"

namespace colext::net {

struct Address {
  std::string host;
  std::uint16_t port = 0;

  std::string to_string() const { return host + ":" + std::to_string(port); }
};

// "host:port"; throws InvalidArgument otherwise.
Address parse_address(const std::string& text);

// Owning TCP stream socket that speaks whole protocol frames.
class Connection {
 public:
  Connection() = default;
  explicit Connection(int fd) : fd_(fd) {}
  Connection(Connection&& o) noexcept;
  Connection& operator=(Connection&& o) noexcept;
  Connection(const Connection&) = delete;
  Connection& operator=(const Connection&) = delete;
  ~Connection();

  bool valid() const noexcept { return fd_ >= 0; }
  int fd() const noexcept { return fd_; }

  void send_frame(const std::vector<std::uint8_t>& frame);
  void send(const proto::Message& m) { send_frame(proto::encode(m)); }

  // Next message, or nullopt on orderly EOF before a frame starts.
  // Throws ProtocolError for malformed frames and Error for socket failures.
  std::optional<proto::Message> receive();

  // Unblocks a concurrent receive() without releasing the descriptor.
  void shutdown() noexcept;
  void close() noexcept;

  std::uint64_t bytes_sent() const noexcept { return sent_.load(); }
  std::uint64_t bytes_received() const noexcept { return received_.load(); }
  // Size of the most recently received frame, header included.
  std::uint64_t last_frame_bytes() const noexcept { return last_frame_.load(); }

 private:
  bool read_exact(std::uint8_t* dst, std::size_t n, bool eof_ok);

  int fd_ = -1;
  std::atomic<std::uint64_t> sent_{0};
  std::atomic<std::uint64_t> received_{0};
  std::atomic<std::uint64_t> last_frame_{0};
};

class Listener {
 public:
  // Binds host:port (port 0 picks a free one) and listens.
  explicit Listener(const Address& addr);
  Listener(Listener&&) noexcept;
  Listener& operator=(Listener&&) = delete;
  ~Listener();

  std::uint16_t port() const noexcept { return port_; }
  // Blocks until a peer connects; nullopt once close() was called.
  std::optional<Connection> accept();
  void close() noexcept;

 private:
  std::atomic<int> fd_{-1};
  std::uint16_t port_ = 0;
};

struct RetryPolicy {
  int max_attempts = 60;
  std::chrono::milliseconds initial_backoff{20};
  std::chrono::milliseconds max_backoff{500};
};

// Connects with bounded exponential backoff; throws Error when exhausted.
Connection connect(const Address& addr, const RetryPolicy& retry = {});

// Asks the kernel for a currently free TCP port on host.
std::uint16_t pick_free_port(const std::string& host = "127.0.0.1");

}  // namespace colext::net
