#pragma once

// Message transports: in-process queues (message objects handed across
// threads) and file descriptors carrying NDJSON (pipes or TCP).

#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <csignal>
#include <cstdio>
#include <cstring>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include "distdesign/protocol.hpp"

namespace distdesign {

using Millis = std::chrono::milliseconds;

class Channel {
 public:
  virtual ~Channel() = default;
  virtual void send(const Message& m) = 0;
  // Throws ProtocolError on timeout, closed peer or a malformed message.
  virtual Message receive(Millis timeout) = 0;
  virtual void close() = 0;
};

namespace detail {

struct MessageQueue {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<Message> items;
  bool closed = false;
};

}  // namespace detail

class QueueChannel final : public Channel {
 public:
  QueueChannel(std::shared_ptr<detail::MessageQueue> in, std::shared_ptr<detail::MessageQueue> out)
      : in_(std::move(in)), out_(std::move(out)) {}
  ~QueueChannel() override { close(); }

  void send(const Message& m) override {
    {
      std::lock_guard lock(out_->mu);
      if (out_->closed) throw ProtocolError("channel closed");
      out_->items.push_back(m);
    }
    out_->cv.notify_one();
  }

  Message receive(Millis timeout) override {
    std::unique_lock lock(in_->mu);
    if (!in_->cv.wait_for(lock, timeout, [&] { return !in_->items.empty() || in_->closed; }))
      throw ProtocolError("timed out after " + std::to_string(timeout.count()) + " ms waiting for a message");
    if (in_->items.empty()) throw ProtocolError("channel closed by peer");
    Message m = std::move(in_->items.front());
    in_->items.pop_front();
    return m;
  }

  // Closes both directions; queued messages stay readable.
  void close() override {
    for (auto* q : {in_.get(), out_.get()}) {
      {
        std::lock_guard lock(q->mu);
        q->closed = true;
      }
      q->cv.notify_all();
    }
  }

 private:
  std::shared_ptr<detail::MessageQueue> in_, out_;
};

inline std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> make_queue_pair() {
  auto a = std::make_shared<detail::MessageQueue>();
  auto b = std::make_shared<detail::MessageQueue>();
  return {std::make_unique<QueueChannel>(a, b), std::make_unique<QueueChannel>(b, a)};
}

// NDJSON over a pair of descriptors (the same one for sockets).
class FdChannel final : public Channel {
 public:
  FdChannel(int read_fd, int write_fd, bool owns = true) : read_fd_(read_fd), write_fd_(write_fd), owns_(owns) {}
  FdChannel(const FdChannel&) = delete;
  FdChannel& operator=(const FdChannel&) = delete;
  ~FdChannel() override { close(); }

  void send(const Message& m) override {
    if (write_fd_ < 0) throw ProtocolError("channel closed");
    const std::string line = encode_message(m);
    std::size_t off = 0;
    while (off < line.size()) {
      const ssize_t k = ::write(write_fd_, line.data() + off, line.size() - off);
      if (k < 0) {
        if (errno == EINTR) continue;
        throw ProtocolError(std::string("write failed: ") + std::strerror(errno));
      }
      off += static_cast<std::size_t>(k);
    }
  }

  Message receive(Millis timeout) override {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (true) {
      const auto nl = buffer_.find('\n', scanned_);
      if (nl != std::string::npos) {
        const std::string line = buffer_.substr(0, nl + 1);
        buffer_.erase(0, nl + 1);
        scanned_ = 0;
        return decode_message(line);
      }
      scanned_ = buffer_.size();
      if (read_fd_ < 0) throw ProtocolError("channel closed");
      const auto left = std::chrono::duration_cast<Millis>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0)
        throw ProtocolError("timed out after " + std::to_string(timeout.count()) + " ms waiting for a message");
      pollfd p{read_fd_, POLLIN, 0};
      const int ready = ::poll(&p, 1, static_cast<int>(std::min<long long>(left.count(), 60'000)));
      if (ready < 0) {
        if (errno == EINTR) continue;
        throw ProtocolError(std::string("poll failed: ") + std::strerror(errno));
      }
      if (ready == 0) continue;
      char chunk[65536];
      const ssize_t k = ::read(read_fd_, chunk, sizeof chunk);
      if (k < 0) {
        if (errno == EINTR) continue;
        throw ProtocolError(std::string("read failed: ") + std::strerror(errno));
      }
      if (k == 0) {
        if (!buffer_.empty()) throw ProtocolError("connection closed inside a message (truncated line)");
        throw ProtocolError("connection closed by peer");
      }
      buffer_.append(chunk, static_cast<std::size_t>(k));
    }
  }

  void close() override {
    if (!owns_) {
      read_fd_ = write_fd_ = -1;
      return;
    }
    if (read_fd_ >= 0) ::close(read_fd_);
    if (write_fd_ >= 0 && write_fd_ != read_fd_) ::close(write_fd_);
    read_fd_ = write_fd_ = -1;
  }

 private:
  int read_fd_, write_fd_;
  bool owns_;
  std::string buffer_;
  std::size_t scanned_ = 0;
};

// Writes to a vanished peer should fail with EPIPE, not kill the process.
inline void ignore_sigpipe() { std::signal(SIGPIPE, SIG_IGN); }

// A child process speaking the protocol on its stdin/stdout.
class WorkerProcess {
 public:
  WorkerProcess(const std::string& executable, const std::vector<std::string>& args) {
    ignore_sigpipe();
    int to_child[2], from_child[2];
    if (::pipe2(to_child, O_CLOEXEC) != 0 || ::pipe2(from_child, O_CLOEXEC) != 0)
      throw ProtocolError(std::string("pipe failed: ") + std::strerror(errno));
    // Only async-signal-safe calls between fork and exec.
    std::vector<std::string> all{executable};
    all.insert(all.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& a : all) argv.push_back(a.data());
    argv.push_back(nullptr);
    pid_ = ::fork();
    if (pid_ < 0) throw ProtocolError(std::string("fork failed: ") + std::strerror(errno));
    if (pid_ == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::execv(argv[0], argv.data());
      static const char msg[] = "cannot start worker process\n";
      [[maybe_unused]] auto r = ::write(STDERR_FILENO, msg, sizeof msg - 1);
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    channel_ = std::make_unique<FdChannel>(from_child[0], to_child[1]);
  }

  WorkerProcess(const WorkerProcess&) = delete;
  WorkerProcess& operator=(const WorkerProcess&) = delete;

  ~WorkerProcess() {
    channel_.reset();
    if (pid_ > 0 && !reaped_) {
      ::kill(pid_, SIGKILL);
      ::waitpid(pid_, nullptr, 0);
    }
  }

  Channel& channel() { return *channel_; }

  // Exit status once the child ends; -1 for a signal. Kills after `grace`.
  int wait(Millis grace) {
    if (reaped_) return status_;
    channel_->close();
    const auto deadline = std::chrono::steady_clock::now() + grace;
    int raw = 0;
    while (true) {
      const pid_t r = ::waitpid(pid_, &raw, WNOHANG);
      if (r == pid_) break;
      if (std::chrono::steady_clock::now() >= deadline) {
        ::kill(pid_, SIGKILL);
        ::waitpid(pid_, &raw, 0);
        break;
      }
      ::usleep(2000);
    }
    reaped_ = true;
    status_ = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    return status_;
  }

  // Exit status if the child has already ended.
  std::optional<int> poll_exit() {
    if (reaped_) return status_;
    int raw = 0;
    if (::waitpid(pid_, &raw, WNOHANG) != pid_) return std::nullopt;
    reaped_ = true;
    status_ = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    return status_;
  }

 private:
  pid_t pid_ = -1;
  std::unique_ptr<Channel> channel_;
  bool reaped_ = false;
  int status_ = -1;
};

struct HostPort {
  std::string host = "127.0.0.1";
  int port = 0;
};

inline HostPort parse_host_port(const std::string& text) {
  HostPort hp;
  const auto colon = text.rfind(':');
  std::string port = text;
  if (colon != std::string::npos) {
    if (colon > 0) hp.host = text.substr(0, colon);
    port = text.substr(colon + 1);
  }
  try {
    std::size_t used = 0;
    hp.port = std::stoi(port, &used);
    if (used != port.size() || hp.port < 0 || hp.port > 65535) throw std::invalid_argument(port);
  } catch (const std::exception&) {
    throw UsageError("bad address '" + text + "', expected host:port");
  }
  return hp;
}

namespace detail {

inline addrinfo* resolve(const HostPort& hp, bool passive) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(hp.port);
  if (const int rc = ::getaddrinfo(hp.host.c_str(), port.c_str(), &hints, &res); rc != 0)
    throw ProtocolError("cannot resolve " + hp.host + ": " + ::gai_strerror(rc));
  return res;
}

}  // namespace detail

class TcpListener {
 public:
  explicit TcpListener(const HostPort& hp) {
    ignore_sigpipe();
    addrinfo* res = detail::resolve(hp, true);
    fd_ = ::socket(res->ai_family, res->ai_socktype | SOCK_CLOEXEC, res->ai_protocol);
    if (fd_ < 0) {
      ::freeaddrinfo(res);
      throw ProtocolError(std::string("socket failed: ") + std::strerror(errno));
    }
    const int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    const int rc = ::bind(fd_, res->ai_addr, res->ai_addrlen);
    ::freeaddrinfo(res);
    if (rc != 0 || ::listen(fd_, 64) != 0) {
      const std::string why = std::strerror(errno);
      ::close(fd_);
      throw ProtocolError("cannot listen on " + hp.host + ":" + std::to_string(hp.port) + ": " + why);
    }
    sockaddr_in addr{};
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }

  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;
  ~TcpListener() {
    if (fd_ >= 0) ::close(fd_);
  }

  int port() const { return port_; }

  std::unique_ptr<Channel> accept(Millis timeout) {
    pollfd p{fd_, POLLIN, 0};
    while (true) {
      const int ready = ::poll(&p, 1, static_cast<int>(timeout.count()));
      if (ready < 0 && errno == EINTR) continue;
      if (ready <= 0) throw ProtocolError("no worker connected within " + std::to_string(timeout.count()) + " ms");
      break;
    }
    const int c = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
    if (c < 0) throw ProtocolError(std::string("accept failed: ") + std::strerror(errno));
    return std::make_unique<FdChannel>(c, c);
  }

 private:
  int fd_ = -1;
  int port_ = 0;
};

// Retries until the coordinator is listening or the timeout passes.
inline std::unique_ptr<Channel> tcp_connect(const HostPort& hp, Millis timeout) {
  ignore_sigpipe();
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  while (true) {
    addrinfo* res = detail::resolve(hp, false);
    const int fd = ::socket(res->ai_family, res->ai_socktype | SOCK_CLOEXEC, res->ai_protocol);
    const int rc = fd >= 0 ? ::connect(fd, res->ai_addr, res->ai_addrlen) : -1;
    const int err = errno;
    ::freeaddrinfo(res);
    if (rc == 0) return std::make_unique<FdChannel>(fd, fd);
    if (fd >= 0) ::close(fd);
    if (std::chrono::steady_clock::now() >= deadline)
      throw ProtocolError("cannot connect to " + hp.host + ":" + std::to_string(hp.port) + ": " + std::strerror(err));
    ::usleep(50'000);
  }
}

}  // namespace distdesign
