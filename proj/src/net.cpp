#include "colext/net.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <thread>

#include "colext/error.hpp"

namespace colext::net {

namespace {

std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

sockaddr_in resolve(const Address& addr) {
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(addr.port);
  const std::string host = addr.host.empty() || addr.host == "localhost" ? "127.0.0.1" : addr.host;
  if (inet_pton(AF_INET, host.c_str(), &sa.sin_addr) == 1) return sa;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  addrinfo* res = nullptr;
  if (getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) {
    throw InvalidArgument("cannot resolve host '" + host + "'");
  }
  sa.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  freeaddrinfo(res);
  return sa;
}

}  // namespace

Address parse_address(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon + 1 == text.size()) {
    throw InvalidArgument("address '" + text + "' is not host:port");
  }
  Address a;
  a.host = text.substr(0, colon);
  try {
    std::size_t used = 0;
    const auto port = std::stoul(text.substr(colon + 1), &used);
    if (used != text.size() - colon - 1 || port > 65535) throw std::out_of_range("port");
    a.port = static_cast<std::uint16_t>(port);
  } catch (const std::logic_error&) {
    throw InvalidArgument("bad port in address '" + text + "'");
  }
  return a;
}

Connection::Connection(Connection&& o) noexcept
    : fd_(o.fd_), sent_(o.sent_.load()), received_(o.received_.load()), last_frame_(o.last_frame_.load()) {
  o.fd_ = -1;
}

Connection& Connection::operator=(Connection&& o) noexcept {
  if (this != &o) {
    close();
    fd_ = o.fd_;
    o.fd_ = -1;
    sent_ = o.sent_.load();
    received_ = o.received_.load();
    last_frame_ = o.last_frame_.load();
  }
  return *this;
}

Connection::~Connection() { close(); }

void Connection::send_frame(const std::vector<std::uint8_t>& frame) {
  std::size_t off = 0;
  while (off < frame.size()) {
    const auto n = ::send(fd_, frame.data() + off, frame.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(errno_text("send"));
    }
    off += static_cast<std::size_t>(n);
  }
  sent_ += frame.size();
}

bool Connection::read_exact(std::uint8_t* dst, std::size_t n, bool eof_ok) {
  std::size_t off = 0;
  while (off < n) {
    const auto got = ::recv(fd_, dst + off, n - off, 0);
    if (got == 0) {
      if (eof_ok && off == 0) return false;
      throw ProtocolError("connection closed mid-frame");
    }
    if (got < 0) {
      if (errno == EINTR) continue;
      throw Error(errno_text("recv"));
    }
    off += static_cast<std::size_t>(got);
  }
  received_ += n;
  return true;
}

std::optional<proto::Message> Connection::receive() {
  std::uint8_t header[proto::kFrameHeaderBytes];
  if (!read_exact(header, 4, true)) return std::nullopt;
  const auto len = proto::frame_length(std::span<const std::uint8_t, 4>(header, 4));
  read_exact(header + 4, 1, false);
  std::vector<std::uint8_t> payload(len - 1);
  if (!payload.empty()) read_exact(payload.data(), payload.size(), false);
  last_frame_ = 4 + static_cast<std::uint64_t>(len);
  return proto::decode_payload(header[4], payload);
}

void Connection::shutdown() noexcept {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

void Connection::close() noexcept {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

Listener::Listener(const Address& addr) {
  const int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd < 0) throw Error(errno_text("socket"));
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  auto sa = resolve(addr);
  if (::bind(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0) {
    const auto msg = errno_text(("bind " + addr.to_string()).c_str());
    ::close(fd);
    throw Error(msg);
  }
  if (::listen(fd, 128) != 0) {
    const auto msg = errno_text("listen");
    ::close(fd);
    throw Error(msg);
  }
  socklen_t len = sizeof(sa);
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&sa), &len);
  port_ = ntohs(sa.sin_port);
  fd_ = fd;
}

Listener::Listener(Listener&& o) noexcept : fd_(o.fd_.exchange(-1)), port_(o.port_) {}

Listener::~Listener() { close(); }

std::optional<Connection> Listener::accept() {
  for (;;) {
    const int lfd = fd_.load();
    if (lfd < 0) return std::nullopt;
    const int fd = ::accept4(lfd, nullptr, nullptr, SOCK_CLOEXEC);
    if (fd >= 0) {
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      return Connection(fd);
    }
    if (errno == EINTR || errno == ECONNABORTED) continue;
    return std::nullopt;
  }
}

void Listener::close() noexcept {
  const int fd = fd_.exchange(-1);
  if (fd >= 0) {
    ::shutdown(fd, SHUT_RDWR);
    ::close(fd);
  }
}

Connection connect(const Address& addr, const RetryPolicy& retry) {
  const auto sa = resolve(addr);
  auto backoff = retry.initial_backoff;
  std::string last_error;
  for (int attempt = 0; attempt < retry.max_attempts; ++attempt) {
    const int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd < 0) throw Error(errno_text("socket"));
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&sa), sizeof(sa)) == 0) {
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      return Connection(fd);
    }
    last_error = errno_text("connect");
    ::close(fd);
    std::this_thread::sleep_for(backoff);
    backoff = std::min(backoff * 2, retry.max_backoff);
  }
  throw Error("could not reach " + addr.to_string() + " after " + std::to_string(retry.max_attempts) +
              " attempts (" + last_error + ")");
}

std::uint16_t pick_free_port(const std::string& host) {
  Listener l(Address{host, 0});
  return l.port();
}

}  // namespace colext::net
