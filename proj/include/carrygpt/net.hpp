#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <string>

#include "carrygpt/common.hpp"

namespace carrygpt::net {

struct Addr {
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;

    static Addr parse(const std::string& s) {
        const std::size_t colon = s.rfind(':');
        if (colon == std::string::npos) throw ConfigError("address must be host:port, got " + s);
        Addr a;
        a.host = s.substr(0, colon);
        if (a.host.empty()) a.host = "127.0.0.1";
        const std::string port_str = s.substr(colon + 1);
        try {
            const int p = std::stoi(port_str);
            if (p < 0 || p > 65535) throw std::out_of_range("port");
            a.port = static_cast<std::uint16_t>(p);
        } catch (const std::exception&) {
            throw ConfigError("bad port in address: " + s);
        }
        return a;
    }

    std::string str() const { return host + ":" + std::to_string(port); }
};

// Raised when a blocking wait was interrupted by a stop request.
struct Stopped : Error {
    Stopped() : Error("stopped") {}
};

class Socket {
public:
    Socket() = default;
    explicit Socket(int fd) : fd_(fd) {}
    Socket(const Socket&) = delete;
    Socket& operator=(const Socket&) = delete;
    Socket(Socket&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
    Socket& operator=(Socket&& o) noexcept {
        if (this != &o) {
            close_fd();
            fd_ = o.fd_;
            o.fd_ = -1;
        }
        return *this;
    }
    ~Socket() { close_fd(); }

    bool valid() const { return fd_ >= 0; }
    int fd() const { return fd_; }

    void close() { close_fd(); }

    // Close with RST instead of FIN: no TIME_WAIT. For tight loops that
    // open thousands of short-lived connections (fuzzing).
    void set_linger_reset() {
        linger lg{1, 0};
        ::setsockopt(fd_, SOL_SOCKET, SO_LINGER, &lg, sizeof(lg));
    }

    void send_all(const void* data, std::size_t len) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        while (len > 0) {
            const ssize_t n = ::send(fd_, p, len, MSG_NOSIGNAL);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw NetError(std::string("send failed: ") + std::strerror(errno));
            }
            p += n;
            len -= static_cast<std::size_t>(n);
        }
    }

    // Blocks until len bytes arrive. Returns false on clean EOF before the
    // first byte; mid-read EOF is an error. Honors an optional stop flag.
    bool recv_exact(void* data, std::size_t len, const std::atomic<bool>* stop = nullptr) {
        auto* p = static_cast<std::uint8_t*>(data);
        std::size_t got = 0;
        while (got < len) {
            if (stop != nullptr) {
                pollfd pfd{fd_, POLLIN, 0};
                const int pr = ::poll(&pfd, 1, 200);
                if (pr < 0 && errno != EINTR) throw NetError(std::string("poll failed: ") + std::strerror(errno));
                if (stop->load(std::memory_order_relaxed)) throw Stopped{};
                if (pr <= 0) continue;
            }
            const ssize_t n = ::recv(fd_, p + got, len - got, 0);
            if (n < 0) {
                if (errno == EINTR) continue;
                if (errno == EAGAIN || errno == EWOULDBLOCK) throw NetError("recv timed out");
                throw NetError(std::string("recv failed: ") + std::strerror(errno));
            }
            if (n == 0) {
                if (got == 0) return false;
                throw NetError("connection closed mid-message");
            }
            got += static_cast<std::size_t>(n);
        }
        return true;
    }

private:
    void close_fd() {
        if (fd_ >= 0) {
            ::close(fd_);
            fd_ = -1;
        }
    }
    int fd_ = -1;
};

class Listener {
public:
    explicit Listener(const Addr& addr) {
        fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd_ < 0) throw NetError(std::string("socket failed: ") + std::strerror(errno));
        const int one = 1;
        ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        sockaddr_in sa{};
        sa.sin_family = AF_INET;
        sa.sin_port = htons(addr.port);
        if (::inet_pton(AF_INET, addr.host.c_str(), &sa.sin_addr) != 1)
            throw ConfigError("cannot parse bind host: " + addr.host);
        if (::bind(fd_, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) < 0)
            throw NetError("cannot bind " + addr.str() + ": " + std::strerror(errno));
        if (::listen(fd_, 16) < 0) throw NetError(std::string("listen failed: ") + std::strerror(errno));
        socklen_t slen = sizeof(sa);
        ::getsockname(fd_, reinterpret_cast<sockaddr*>(&sa), &slen);
        bound_port_ = ntohs(sa.sin_port);
    }
    Listener(const Listener&) = delete;
    Listener& operator=(const Listener&) = delete;
    ~Listener() {
        if (fd_ >= 0) ::close(fd_);
    }

    std::uint16_t port() const { return bound_port_; }

    // Waits for a connection, polling the stop flag.
    Socket accept(const std::atomic<bool>* stop = nullptr) {
        while (true) {
            pollfd pfd{fd_, POLLIN, 0};
            const int pr = ::poll(&pfd, 1, 200);
            if (pr < 0 && errno != EINTR) throw NetError(std::string("poll failed: ") + std::strerror(errno));
            if (stop != nullptr && stop->load(std::memory_order_relaxed)) throw Stopped{};
            if (pr <= 0) continue;
            const int cfd = ::accept(fd_, nullptr, nullptr);
            if (cfd < 0) {
                if (errno == EINTR || errno == ECONNABORTED) continue;
                throw NetError(std::string("accept failed: ") + std::strerror(errno));
            }
            return Socket(cfd);
        }
    }

private:
    int fd_ = -1;
    std::uint16_t bound_port_ = 0;
};

inline Socket connect_to(const Addr& addr, int recv_timeout_ms = 30000) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw NetError(std::string("socket failed: ") + std::strerror(errno));
    Socket s(fd);
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(addr.port);
    if (::inet_pton(AF_INET, addr.host.c_str(), &sa.sin_addr) != 1)
        throw ConfigError("cannot parse host: " + addr.host);
    if (::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) < 0)
        throw NetError("cannot connect to " + addr.str() + ": " + std::strerror(errno));
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    if (recv_timeout_ms > 0) {
        timeval tv{recv_timeout_ms / 1000, (recv_timeout_ms % 1000) * 1000};
        ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
    }
    return s;
}

} // namespace carrygpt::net
