#pragma once

#include <chrono>
#include <csignal>
#include <cstring>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>

#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include "core.hpp"

namespace hypens {

class TransportError : public Error {
 public:
  using Error::Error;
};

class TimeoutError : public TransportError {
 public:
  using TransportError::TransportError;
};

class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// A bidirectional stream of "\n"-terminated UTF-8 lines.
class LineChannel {
 public:
  virtual ~LineChannel() = default;

  /// Sends one line; the terminator is appended.
  virtual void write_line(std::string_view line) = 0;
  /// Pushes buffered writes to the peer.
  virtual void flush() {}
  /// Next line without its terminator, or nullopt if none arrives in time.
  /// Throws TransportError when the peer has closed the stream.
  virtual std::optional<std::string> read_line(std::chrono::milliseconds timeout) = 0;
};

namespace detail {

/// Buffered line I/O over a pair of file descriptors (may be the same fd).
class FdLineIo {
 public:
  FdLineIo(int read_fd, int write_fd) : rfd_(read_fd), wfd_(write_fd) {}

  void write_all(std::string_view data) {
    while (!data.empty()) {
      ssize_t k = ::write(wfd_, data.data(), data.size());
      if (k < 0) {
        if (errno == EINTR) continue;
        throw TransportError(std::string("write failed: ") + std::strerror(errno));
      }
      data.remove_prefix(static_cast<std::size_t>(k));
    }
  }

  std::optional<std::string> read_line(std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
      if (auto pos = buf_.find('\n'); pos != std::string::npos) {
        std::string line = buf_.substr(0, pos);
        buf_.erase(0, pos + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return line;
      }
      if (eof_) throw TransportError("peer closed the stream");
      auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
          deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) return std::nullopt;
      pollfd p{rfd_, POLLIN, 0};
      int r = ::poll(&p, 1, static_cast<int>(left.count()));
      if (r < 0) {
        if (errno == EINTR) continue;
        throw TransportError(std::string("poll failed: ") + std::strerror(errno));
      }
      if (r == 0) return std::nullopt;
      char chunk[4096];
      ssize_t k = ::read(rfd_, chunk, sizeof chunk);
      if (k < 0) {
        if (errno == EINTR || errno == EAGAIN) continue;
        throw TransportError(std::string("read failed: ") + std::strerror(errno));
      }
      if (k == 0)
        eof_ = true;
      else
        buf_.append(chunk, static_cast<std::size_t>(k));
    }
  }

 private:
  int rfd_;
  int wfd_;
  std::string buf_;
  bool eof_ = false;
};

inline void ignore_sigpipe() {
  static std::once_flag once;
  std::call_once(once, [] { std::signal(SIGPIPE, SIG_IGN); });
}

}  // namespace detail

/// Child process spawned through /bin/sh; talks over its stdin/stdout.
class SubprocessChannel final : public LineChannel {
 public:
  explicit SubprocessChannel(const std::string& command) {
    detail::ignore_sigpipe();
    int to_child[2], from_child[2];
    if (::pipe(to_child) != 0) throw TransportError("pipe failed");
    if (::pipe(from_child) != 0) {
      ::close(to_child[0]), ::close(to_child[1]);
      throw TransportError("pipe failed");
    }
    pid_ = ::fork();
    if (pid_ < 0) throw TransportError("fork failed");
    if (pid_ == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::close(to_child[0]), ::close(to_child[1]);
      ::close(from_child[0]), ::close(from_child[1]);
      ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    wfd_ = to_child[1];
    rfd_ = from_child[0];
    ::fcntl(wfd_, F_SETFD, FD_CLOEXEC);
    ::fcntl(rfd_, F_SETFD, FD_CLOEXEC);
    io_ = std::make_unique<detail::FdLineIo>(rfd_, wfd_);
  }

  SubprocessChannel(const SubprocessChannel&) = delete;
  SubprocessChannel& operator=(const SubprocessChannel&) = delete;

  ~SubprocessChannel() override {
    if (wfd_ >= 0) ::close(wfd_);
    if (rfd_ >= 0) ::close(rfd_);
    if (pid_ > 0) {
      // Closing stdin asks the child to exit; give it a moment, then kill.
      for (int i = 0; i < 50; ++i) {
        if (::waitpid(pid_, nullptr, WNOHANG) == pid_) return;
        ::usleep(10000);
      }
      ::kill(pid_, SIGKILL);
      ::waitpid(pid_, nullptr, 0);
    }
  }

  void write_line(std::string_view line) override {
    pending_.append(line);
    pending_.push_back('\n');
    if (pending_.size() >= 1 << 16) flush();
  }

  void flush() override {
    if (pending_.empty()) return;
    io_->write_all(pending_);
    pending_.clear();
  }

  std::optional<std::string> read_line(std::chrono::milliseconds timeout) override {
    flush();
    return io_->read_line(timeout);
  }

 private:
  pid_t pid_ = -1;
  int wfd_ = -1;
  int rfd_ = -1;
  std::string pending_;
  std::unique_ptr<detail::FdLineIo> io_;
};

/// Client side of a TCP byte stream.
class TcpChannel final : public LineChannel {
 public:
  TcpChannel(const std::string& host, const std::string& port) {
    detail::ignore_sigpipe();
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res); rc != 0)
      throw TransportError("cannot resolve " + host + ":" + port + ": " + ::gai_strerror(rc));
    for (addrinfo* ai = res; ai; ai = ai->ai_next) {
      int fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
      if (fd < 0) continue;
      if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) {
        fd_ = fd;
        break;
      }
      ::close(fd);
    }
    ::freeaddrinfo(res);
    if (fd_ < 0) throw TransportError("cannot connect to " + host + ":" + port);
    io_ = std::make_unique<detail::FdLineIo>(fd_, fd_);
  }

  TcpChannel(const TcpChannel&) = delete;
  TcpChannel& operator=(const TcpChannel&) = delete;
  ~TcpChannel() override {
    if (fd_ >= 0) ::close(fd_);
  }

  void write_line(std::string_view line) override {
    pending_.append(line);
    pending_.push_back('\n');
  }
  void flush() override {
    if (pending_.empty()) return;
    io_->write_all(pending_);
    pending_.clear();
  }
  std::optional<std::string> read_line(std::chrono::milliseconds timeout) override {
    flush();
    return io_->read_line(timeout);
  }

 private:
  int fd_ = -1;
  std::string pending_;
  std::unique_ptr<detail::FdLineIo> io_;
};

/// Server half of a line protocol. `emit` queues one outgoing line.
class LineService {
 public:
  using Emit = std::function<void(std::string)>;
  virtual ~LineService() = default;
  virtual void greet(const Emit& emit) = 0;
  virtual void on_line(std::string_view line, const Emit& emit) = 0;
  /// Called when the client waits for output; services that buffer replies
  /// release them here.
  virtual void on_drain(const Emit&) {}
};

/// In-process channel driving a LineService synchronously. Used by the stub
/// scorers and identifiers; no threads, no sockets.
class LoopbackChannel final : public LineChannel {
 public:
  explicit LoopbackChannel(std::shared_ptr<LineService> service) : service_(std::move(service)) {
    service_->greet(emitter());
  }

  void write_line(std::string_view line) override {
    std::lock_guard lock(mu_);
    if (closed_) throw TransportError("loopback channel closed");
    service_->on_line(line, emitter());
  }

  std::optional<std::string> read_line(std::chrono::milliseconds) override {
    std::lock_guard lock(mu_);
    if (out_.empty()) service_->on_drain(emitter());
    if (out_.empty()) {
      if (closed_) throw TransportError("loopback channel closed");
      return std::nullopt;
    }
    std::string line = std::move(out_.front());
    out_.pop_front();
    return line;
  }

  /// Simulates the peer going away.
  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    out_.clear();
  }

 private:
  LineService::Emit emitter() {
    return [this](std::string line) { out_.push_back(std::move(line)); };
  }

  std::mutex mu_;
  std::shared_ptr<LineService> service_;
  std::deque<std::string> out_;
  bool closed_ = false;
};

/// Opens "exec:<shell command>" or "tcp://host:port".
inline std::unique_ptr<LineChannel> open_channel(std::string_view endpoint) {
  if (endpoint.starts_with("exec:"))
    return std::make_unique<SubprocessChannel>(std::string(endpoint.substr(5)));
  if (endpoint.starts_with("tcp://")) {
    std::string_view rest = endpoint.substr(6);
    auto colon = rest.rfind(':');
    if (colon == std::string_view::npos) throw Error("tcp endpoint needs host:port");
    return std::make_unique<TcpChannel>(std::string(rest.substr(0, colon)),
                                        std::string(rest.substr(colon + 1)));
  }
  throw Error("unsupported endpoint '" + std::string(endpoint) + "'");
}

}  // namespace hypens
