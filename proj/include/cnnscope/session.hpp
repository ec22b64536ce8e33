#pragma once

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/eventfd.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "cnnscope/frame.hpp"
#include "cnnscope/pruner.hpp"
#include "cnnscope/similarity.hpp"

namespace cnnscope {

// ---------------------------------------------------------------------------
// Sockets
// ---------------------------------------------------------------------------

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { reset(); }

  int fd() const noexcept { return fd_; }
  bool valid() const noexcept { return fd_ >= 0; }
  void reset() noexcept {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};

/// Accepts "host:port", ":port" or "port".
inline Endpoint parse_endpoint(const std::string& text) {
  Endpoint ep;
  std::string port = text;
  if (const auto colon = text.rfind(':'); colon != std::string::npos) {
    if (colon > 0) ep.host = text.substr(0, colon);
    port = text.substr(colon + 1);
  }
  try {
    std::size_t used = 0;
    const unsigned long v = std::stoul(port, &used);
    if (used != port.size() || v > 65535) throw std::invalid_argument(port);
    ep.port = static_cast<std::uint16_t>(v);
  } catch (const std::exception&) {
    throw DomainError("bad address '" + text + "'");
  }
  return ep;
}

namespace detail {

inline sockaddr_in resolve(const Endpoint& ep) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  const std::string host = ep.host == "localhost" ? "127.0.0.1" : ep.host;
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    throw DomainError("cannot parse IPv4 host '" + ep.host + "'");
  }
  return addr;
}

inline void set_nonblocking(int fd) { ::fcntl(fd, F_SETFL, ::fcntl(fd, F_GETFL) | O_NONBLOCK); }

}  // namespace detail

inline Socket listen_on(const Endpoint& ep) {
  Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!s.valid()) throw Error(std::string("socket: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  const auto addr = detail::resolve(ep);
  if (::bind(s.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
    throw Error("cannot bind " + ep.host + ":" + std::to_string(ep.port) + ": " + std::strerror(errno));
  }
  if (::listen(s.fd(), 4) != 0) throw Error(std::string("listen: ") + std::strerror(errno));
  detail::set_nonblocking(s.fd());
  return s;
}

inline std::uint16_t bound_port(const Socket& s) {
  sockaddr_in addr{};
  socklen_t len = sizeof addr;
  ::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
  return ntohs(addr.sin_port);
}

// ---------------------------------------------------------------------------
// Session
// ---------------------------------------------------------------------------

/// Everything published for one training step.
struct StepPublication {
  std::int64_t step = 0;
  std::vector<Geometry> geometry;
  std::optional<SimilarityReport> similarity;
  std::optional<std::pair<std::string, PrunePlan>> proposal;  // (id, plan)
};

struct PublishOutcome {
  bool connected = false;  // false: viewer absent, frames dropped
  std::size_t frames = 0;  // frames in the step group
  std::uint64_t dropped_groups = 0;
};

enum class PruneAction { apply, dismiss };

struct PruneCommand {
  std::string proposal_id;
  PruneAction action = PruneAction::apply;
  PrunePlan plan;  // the proposal being answered
};

struct SessionConfig {
  std::size_t queue_capacity = 8;  // step groups
  ojson network = ojson::object();  // summary sent in the hello reply
  std::chrono::milliseconds handshake_timeout{5000};
};

struct SessionStats {
  std::uint64_t frames_sent = 0;
  std::uint64_t groups_dropped = 0;
  std::uint64_t viewers_served = 0;
};

/// In-process co-processing endpoint. A network thread owns the sockets; the
/// training thread hands it whole step groups through a bounded drop-oldest
/// queue and drains viewer commands at step boundaries.
class Session {
 public:
  /// Binds and starts the network thread. Throws Error when the address cannot be bound.
  static std::unique_ptr<Session> serve(const std::string& bind_address, SessionConfig config = {}) {
    return std::unique_ptr<Session>(new Session(listen_on(parse_endpoint(bind_address)), std::move(config)));
  }

  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  ~Session() {
    stop_ = true;
    wake();
    if (thread_.joinable()) thread_.join();
    ::close(wake_fd_);
  }

  std::uint16_t port() const { return port_; }

  /// True once a viewer has completed the handshake.
  bool connected() const { return connected_.load(); }

  SessionStats stats() const {
    std::lock_guard lock(mu_);
    return stats_;
  }

  /// Blocks until a viewer completes the handshake or the timeout expires.
  bool wait_for_viewer(std::chrono::milliseconds timeout) const {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (!connected_.load()) {
      if (std::chrono::steady_clock::now() >= deadline) return false;
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    return true;
  }

  /// Blocks until everything queued has reached the socket, the viewer is
  /// gone, or the timeout expires. Returns true when nothing is left pending.
  bool flush(std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (connected_.load()) {
      {
        std::lock_guard lock(mu_);
        if (outbox_.empty() && unsent_bytes_.load() == 0) return true;
      }
      if (std::chrono::steady_clock::now() >= deadline) return false;
      wake();
      std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
    return true;
  }

  void set_network_summary(ojson network) {
    std::lock_guard lock(mu_);
    config_.network = std::move(network);
  }

  /// Records a proposal so a later prune_command can reference it; returns its id.
  std::string register_proposal(const PrunePlan& plan) {
    std::lock_guard lock(mu_);
    std::string id = "p" + std::to_string(next_proposal_++);
    proposals_[id] = ProposalState{plan, false};
    return id;
  }

  /// Queues one step group: step_begin, geometry..., [similarity], [prune_proposal], step_end.
  /// Without a viewer the group is discarded. Never blocks on the socket.
  PublishOutcome publish_step(const StepPublication& pub) {
    std::vector<Frame> group;
    group.push_back({FrameType::step_begin, pub.step, 0, ojson::object()});
    for (const auto& g : pub.geometry) group.push_back({FrameType::geometry, pub.step, 0, geometry_body(g)});
    if (pub.similarity) group.push_back({FrameType::similarity, pub.step, 0, ojson(*pub.similarity)});
    if (pub.proposal) {
      ojson body;
      body["proposal_id"] = pub.proposal->first;
      body["plan"] = pub.proposal->second;
      group.push_back({FrameType::prune_proposal, pub.step, 0, std::move(body)});
    }
    PublishOutcome out;
    out.frames = group.size() + 1;
    {
      std::lock_guard lock(mu_);
      out.connected = connected_.load();
      if (!out.connected) {
        out.dropped_groups = stats_.groups_dropped;
        return out;
      }
      while (outbox_.size() >= std::max<std::size_t>(1, config_.queue_capacity)) {
        outbox_.pop_front();
        ++stats_.groups_dropped;
      }
      ojson end_body;
      end_body["dropped_groups"] = stats_.groups_dropped;
      group.push_back({FrameType::step_end, pub.step, 0, std::move(end_body)});
      outbox_.push_back(std::move(group));
      out.dropped_groups = stats_.groups_dropped;
    }
    wake();
    return out;
  }

  /// Drains viewer commands received since the last call. Commands naming an
  /// unknown or already resolved proposal are answered here with
  /// prune_ack{applied:false}; the rest are returned and must be answered with
  /// acknowledge().
  std::vector<PruneCommand> poll_commands(std::int64_t step) {
    std::vector<PruneCommand> valid;
    std::vector<ojson> inbox;
    {
      std::lock_guard lock(mu_);
      inbox.swap(inbox_);
    }
    for (const auto& body : inbox) {
      std::string id;
      std::string action;
      try {
        id = body.at("proposal_id").get<std::string>();
        action = body.at("action").get<std::string>();
      } catch (const nlohmann::json::exception&) {
        send_ack(step, id, false, std::nullopt, "malformed command");
        continue;
      }
      if (action != "apply" && action != "dismiss") {
        send_ack(step, id, false, std::nullopt, "unknown action '" + action + "'");
        continue;
      }
      std::optional<PrunePlan> plan;
      std::string reason;
      {
        std::lock_guard lock(mu_);
        auto it = proposals_.find(id);
        if (it == proposals_.end()) {
          reason = "unknown proposal";
        } else if (it->second.resolved) {
          reason = "already resolved";
        } else {
          it->second.resolved = true;
          plan = it->second.plan;
        }
      }
      if (!plan) {
        send_ack(step, id, false, std::nullopt, reason);
        continue;
      }
      valid.push_back({id, action == "apply" ? PruneAction::apply : PruneAction::dismiss, *plan});
    }
    return valid;
  }

  /// Answers a command returned by poll_commands.
  void acknowledge(std::int64_t step, const std::string& proposal_id, bool applied,
                   std::size_t new_filter_count, const std::string& reason = "") {
    send_ack(step, proposal_id, applied, new_filter_count, reason);
  }

 private:
  struct ProposalState {
    PrunePlan plan;
    bool resolved = false;
  };

  enum class Peer { none, awaiting_hello, ready };

  Session(Socket listener, SessionConfig config)
      : listener_(std::move(listener)), config_(std::move(config)) {
    port_ = bound_port(listener_);
    wake_fd_ = ::eventfd(0, EFD_NONBLOCK | EFD_CLOEXEC);
    if (wake_fd_ < 0) throw Error(std::string("eventfd: ") + std::strerror(errno));
    thread_ = std::thread([this] { loop(); });
  }

  void wake() {
    const std::uint64_t one = 1;
    [[maybe_unused]] auto n = ::write(wake_fd_, &one, sizeof one);
  }

  void send_ack(std::int64_t step, const std::string& id, bool applied, std::optional<std::size_t> filters,
                const std::string& reason) {
    ojson body;
    body["proposal_id"] = id;
    body["applied"] = applied;
    if (filters) body["new_filter_count"] = *filters;
    if (!reason.empty()) body["reason"] = reason;
    {
      std::lock_guard lock(mu_);
      if (!connected_.load()) return;
      outbox_.push_back({Frame{FrameType::prune_ack, step, 0, std::move(body)}});
    }
    wake();
  }

  // -- network thread -------------------------------------------------------

  void queue_direct(const Frame& f) {
    Frame copy = f;
    copy.seq = seq_++;
    outbuf_ += encode_frame(copy);
  }

  void drop_peer() {
    peer_.reset();
    state_ = Peer::none;
    outbuf_.clear();
    splitter_ = FrameSplitter{};
    std::lock_guard lock(mu_);
    connected_ = false;
    outbox_.clear();
  }

  void handle_frame(const Frame& f) {
    if (state_ == Peer::awaiting_hello) {
      if (f.type != FrameType::hello) {
        throw ProtocolError("expected hello");
      }
      const int version = f.body.value("protocol_version", -1);
      if (version != kProtocolVersion) {
        ojson body;
        body["reason"] = "unsupported version";
        queue_direct({FrameType::bye, -1, 0, std::move(body)});
        closing_ = true;
        return;
      }
      ojson body;
      body["protocol_version"] = kProtocolVersion;
      {
        std::lock_guard lock(mu_);
        body["network"] = config_.network;
        ++stats_.viewers_served;
      }
      queue_direct({FrameType::hello, -1, 0, std::move(body)});
      state_ = Peer::ready;
      connected_ = true;
      return;
    }
    if (f.type == FrameType::prune_command) {
      std::lock_guard lock(mu_);
      inbox_.push_back(f.body);
    } else if (f.type == FrameType::bye) {
      closing_ = true;
    }
  }

  void accept_pending() {
    while (true) {
      int fd = ::accept4(listener_.fd(), nullptr, nullptr, SOCK_CLOEXEC);
      if (fd < 0) return;
      Socket s(fd);
      detail::set_nonblocking(fd);
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      if (state_ != Peer::none) {
        // Single viewer: tell the newcomer and hang up.
        ojson body;
        body["reason"] = "viewer already connected";
        const auto bytes = encode_frame(Frame{FrameType::bye, -1, 0, std::move(body)});
        [[maybe_unused]] auto n = ::send(fd, bytes.data(), bytes.size(), MSG_NOSIGNAL);
        continue;
      }
      peer_ = std::move(s);
      state_ = Peer::awaiting_hello;
      seq_ = 0;
      closing_ = false;
      hello_deadline_ = std::chrono::steady_clock::now() + config_.handshake_timeout;
    }
  }

  void loop() {
    char buf[1 << 16];
    while (!stop_) {
      pollfd fds[3] = {{listener_.fd(), POLLIN, 0}, {wake_fd_, POLLIN, 0}, {-1, 0, 0}};
      nfds_t n = 2;
      if (peer_.valid()) {
        fds[2] = {peer_.fd(), static_cast<short>(POLLIN | (outbuf_.empty() ? 0 : POLLOUT)), 0};
        n = 3;
      }
      ::poll(fds, n, 50);
      if (fds[1].revents & POLLIN) {
        std::uint64_t v;
        while (::read(wake_fd_, &v, sizeof v) > 0) {
        }
      }
      if (fds[0].revents & POLLIN) accept_pending();
      if (!peer_.valid()) continue;

      bool lost = false;
      if (n == 3 && (fds[2].revents & (POLLIN | POLLHUP | POLLERR))) {
        const ssize_t got = ::recv(peer_.fd(), buf, sizeof buf, 0);
        if (got == 0 || (got < 0 && errno != EAGAIN && errno != EWOULDBLOCK)) {
          lost = true;
        } else if (got > 0) {
          splitter_.feed(std::string_view(buf, static_cast<std::size_t>(got)));
          try {
            while (auto f = splitter_.next_frame()) handle_frame(*f);
          } catch (const ProtocolError&) {
            lost = true;
          }
        }
      }
      if (!lost && state_ == Peer::awaiting_hello && std::chrono::steady_clock::now() > hello_deadline_) {
        lost = true;
      }
      if (!lost && state_ == Peer::ready && outbuf_.empty() && !closing_) {
        std::vector<Frame> group;
        {
          std::lock_guard lock(mu_);
          if (!outbox_.empty()) {
            group = std::move(outbox_.front());
            outbox_.pop_front();
            unsent_bytes_ = 1;  // keeps flush() waiting until the bytes are encoded
          }
        }
        for (const auto& f : group) queue_direct(f);
        std::lock_guard lock(mu_);
        stats_.frames_sent += group.size();
      }
      while (!lost && !outbuf_.empty()) {
        const ssize_t sent = ::send(peer_.fd(), outbuf_.data(), outbuf_.size(), MSG_NOSIGNAL);
        if (sent < 0) {
          if (errno != EAGAIN && errno != EWOULDBLOCK) lost = true;
          break;
        }
        outbuf_.erase(0, static_cast<std::size_t>(sent));
      }
      if (!lost && closing_ && outbuf_.empty()) lost = true;
      if (lost) drop_peer();
      unsent_bytes_ = outbuf_.size();
    }
  }

  Socket listener_;
  std::uint16_t port_ = 0;
  int wake_fd_ = -1;
  std::thread thread_;
  std::atomic<bool> stop_{false};
  std::atomic<bool> connected_{false};
  std::atomic<std::size_t> unsent_bytes_{0};

  mutable std::mutex mu_;  // guards config_, stats_, outbox_, inbox_, proposals_
  SessionConfig config_;
  SessionStats stats_;
  std::deque<std::vector<Frame>> outbox_;
  std::vector<ojson> inbox_;
  std::map<std::string, ProposalState> proposals_;
  std::uint64_t next_proposal_ = 0;

  // Network-thread state.
  Socket peer_;
  Peer state_ = Peer::none;
  bool closing_ = false;
  std::uint64_t seq_ = 0;
  std::string outbuf_;
  FrameSplitter splitter_;
  std::chrono::steady_clock::time_point hello_deadline_;
};

// ---------------------------------------------------------------------------
// Viewer-side client (used by tests, replay checks and scripted viewers)
// ---------------------------------------------------------------------------

class ViewerClient {
 public:
  ViewerClient(const std::string& host, std::uint16_t port) {
    sock_ = Socket(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (!sock_.valid()) throw Error(std::string("socket: ") + std::strerror(errno));
    const auto addr = detail::resolve({host, port});
    if (::connect(sock_.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
      throw Error("cannot connect to " + host + ":" + std::to_string(port) + ": " + std::strerror(errno));
    }
    int one = 1;
    ::setsockopt(sock_.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }

  void send(FrameType type, ojson body, std::int64_t step = -1) {
    const auto bytes = encode_frame(Frame{type, step, seq_++, std::move(body)});
    std::size_t off = 0;
    while (off < bytes.size()) {
      const ssize_t n = ::send(sock_.fd(), bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
      if (n <= 0) throw Error("viewer send failed");
      off += static_cast<std::size_t>(n);
    }
  }

  void hello(int version = kProtocolVersion) {
    ojson body;
    body["protocol_version"] = version;
    send(FrameType::hello, std::move(body));
  }

  void command(const std::string& proposal_id, PruneAction action) {
    ojson body;
    body["proposal_id"] = proposal_id;
    body["action"] = action == PruneAction::apply ? "apply" : "dismiss";
    send(FrameType::prune_command, std::move(body));
  }

  /// Next frame, or nullopt on timeout or when the server closed the connection.
  std::optional<Frame> read(std::chrono::milliseconds timeout = std::chrono::milliseconds(5000)) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    char buf[1 << 16];
    while (true) {
      if (auto f = splitter_.next_frame()) return f;
      if (closed_) return std::nullopt;
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
          deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) return std::nullopt;
      pollfd pfd{sock_.fd(), POLLIN, 0};
      if (::poll(&pfd, 1, static_cast<int>(left.count())) <= 0) continue;
      const ssize_t got = ::recv(sock_.fd(), buf, sizeof buf, 0);
      if (got <= 0) {
        closed_ = true;
        continue;
      }
      splitter_.feed(std::string_view(buf, static_cast<std::size_t>(got)));
    }
  }

  bool closed() const { return closed_; }
  void close() { sock_.reset(); }

 private:
  Socket sock_;
  FrameSplitter splitter_;
  std::uint64_t seq_ = 0;
  bool closed_ = false;
};

}  // namespace cnnscope
