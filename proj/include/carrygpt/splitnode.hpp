#pragma once

#include <array>
#include <atomic>
#include <iostream>
#include <thread>

#include "carrygpt/net.hpp"
#include "carrygpt/sha256.hpp"
#include "carrygpt/train.hpp"
#include "carrygpt/wire.hpp"

namespace carrygpt {

// The protocol deliberately has no gradient message type: embeddings flow
// one way, token ids the other, and nothing a training node sends can
// change the frozen base.

namespace splitdetail {

inline void send_message(net::Socket& sock, const wire::Message& m, std::uint64_t* byte_counter = nullptr) {
    const auto frame = wire::encode_frame(m);
    sock.send_all(frame.data(), frame.size());
    if (byte_counter != nullptr) *byte_counter += frame.size();
}

// Reads one frame; returns nullopt on clean EOF at a frame boundary.
inline std::optional<wire::Message> recv_message(net::Socket& sock, const wire::Context& ctx,
                                                 const std::atomic<bool>* stop = nullptr,
                                                 std::uint64_t* byte_counter = nullptr) {
    std::uint8_t header[9];
    if (!sock.recv_exact(header, 9, stop)) return std::nullopt;
    const wire::FrameHeader h = wire::parse_header(header);
    std::vector<std::uint8_t> body(h.length);
    if (h.length > 0 && !sock.recv_exact(body.data(), body.size(), stop))
        throw FramingError("connection closed mid-frame");
    if (byte_counter != nullptr) *byte_counter += 9 + body.size();
    return wire::decode_body(h.type, body.data(), body.size(), ctx);
}

} // namespace splitdetail

struct ServeOptions {
    std::string bind = "127.0.0.1:0";
    // push mode streams a server-side corpus instead of answering requests
    bool push = false;
    std::vector<TokenSequence> push_corpus;
    std::vector<int> push_depths;
    int push_bits = 4;
    bool quiet = false;
};

// Inference node: owns the frozen base, answers token batches with
// quantized taps. One connection at a time; an END frame ends the process
// loop cleanly, a malformed frame only aborts the connection.
class EmbeddingServer {
public:
    EmbeddingServer(BaseModel model, std::array<std::uint8_t, 32> model_hash, ServeOptions opt = {})
        : model_(std::move(model)), hash_(model_hash), opt_(std::move(opt)),
          listener_(net::Addr::parse(opt_.bind)) {
        if (!model_.frozen()) model_.freeze();
    }

    static EmbeddingServer from_file(const std::string& model_path, ServeOptions opt = {}) {
        return EmbeddingServer(BaseModel::load(model_path), Sha256::hash_file(model_path), std::move(opt));
    }

    std::uint16_t port() const { return listener_.port(); }
    const std::array<std::uint8_t, 32>& model_hash() const { return hash_; }
    void request_stop() { stop_.store(true, std::memory_order_relaxed); }

    // Accept loop; returns 0 after a session ends with END or on stop.
    int run() {
        log("serving on " + net::Addr::parse(opt_.bind).host + ":" + std::to_string(listener_.port()));
        while (true) {
            net::Socket conn;
            try {
                conn = listener_.accept(&stop_);
            } catch (const net::Stopped&) {
                log("stop requested; shutting down");
                return 0;
            }
            try {
                const bool job_done = opt_.push ? serve_push(conn) : serve_pull(conn);
                if (job_done) {
                    log("session ended cleanly");
                    return 0;
                }
            } catch (const net::Stopped&) {
                log("stop requested; shutting down");
                return 0;
            } catch (const Error& e) {
                // connection-level failure: abort this connection, keep serving
                log(std::string("connection aborted: ") + e.what());
            }
        }
    }

private:
    void log(const std::string& msg) const {
        if (!opt_.quiet) std::cerr << "[serve] " << msg << "\n";
    }

    // HELLO validation shared by both modes. Returns the negotiated
    // depths/bits on success, empty on rejection.
    struct Session {
        std::vector<int> depths;
        int bits = 0;
    };

    std::optional<Session> handshake(net::Socket& conn) {
        const auto msg = splitdetail::recv_message(conn, wire::Context{}, &stop_);
        if (!msg) throw FramingError("client closed before HELLO");
        const auto* hello = std::get_if<wire::Hello>(&*msg);
        if (hello == nullptr) throw ProtocolError("expected HELLO as the first frame");
        bool ok = hello->proto_version == kProtoVersion;
        if (ok && hello->base_model_hash != hash_) ok = false;
        if (ok && hello->d_base != static_cast<std::uint32_t>(model_.cfg.dim)) ok = false;
        Session session;
        session.bits = hello->bits;
        if (ok && !quant_bits_allowed(session.bits)) ok = false;
        for (std::uint8_t d : hello->depths) {
            if (d > model_.cfg.layers) ok = false;
            session.depths.push_back(static_cast<int>(d));
        }
        if (ok && session.depths.empty()) ok = false;
        splitdetail::send_message(conn, wire::HelloAck{static_cast<std::uint8_t>(ok ? 1 : 0)});
        if (!ok) {
            log("handshake rejected");
            return std::nullopt;
        }
        return session;
    }

    // Pull mode: token batches in, tap batches out, strictly FIFO.
    // Returns true when the client finished the whole job with END.
    bool serve_pull(net::Socket& conn) {
        const auto session = handshake(conn);
        if (!session) return false;
        while (true) {
            const auto msg = splitdetail::recv_message(conn, wire::Context{}, &stop_);
            if (!msg) return false; // client went away; allow reconnect
            if (std::holds_alternative<wire::End>(*msg)) return true;
            if (std::holds_alternative<wire::BatchAck>(*msg)) continue;
            const auto* batch = std::get_if<wire::Batch>(&*msg);
            if (batch == nullptr) throw ProtocolError("unexpected frame type in session");
            if (!batch->blocks.empty()) throw ProtocolError("request BATCH must not carry blocks");
            wire::Batch reply;
            reply.batch_id = batch->batch_id;
            reply.token_ids = batch->token_ids;
            TokenSequence seq;
            for (std::uint32_t id : batch->token_ids) seq.ids.push_back(static_cast<int>(id));
            const auto taps = model_.forward_taps(seq, session->depths);
            for (const auto& tap : taps)
                reply.blocks.push_back(
                    wire::DepthBlock{static_cast<std::uint8_t>(tap.depth), quantize(tap.values, session->bits)});
            splitdetail::send_message(conn, reply);
        }
    }

    // Push mode: stream the configured corpus, one batch in flight.
    bool serve_push(net::Socket& conn) {
        const auto session = handshake(conn);
        if (!session) return false;
        const std::vector<int>& depths = opt_.push_depths.empty() ? session->depths : opt_.push_depths;
        std::uint64_t batch_id = 0;
        for (const auto& seq : opt_.push_corpus) {
            wire::Batch out;
            out.batch_id = batch_id++;
            for (int id : seq.ids) out.token_ids.push_back(static_cast<std::uint32_t>(id));
            for (const auto& tap : model_.forward_taps(seq, depths))
                out.blocks.push_back(
                    wire::DepthBlock{static_cast<std::uint8_t>(tap.depth), quantize(tap.values, session->bits)});
            splitdetail::send_message(conn, out);
            const auto ack = splitdetail::recv_message(conn, wire::Context{}, &stop_);
            if (!ack) return false;
            const auto* ba = std::get_if<wire::BatchAck>(&*ack);
            if (ba == nullptr) throw ProtocolError("expected BATCH_ACK in push mode");
            if (ba->batch_id != out.batch_id) throw ProtocolError("push ack out of order");
        }
        splitdetail::send_message(conn, wire::End{});
        return true;
    }

    BaseModel model_;
    std::array<std::uint8_t, 32> hash_;
    ServeOptions opt_;
    net::Listener listener_;
    std::atomic<bool> stop_{false};
};

struct SessionConfig {
    std::string endpoint;
    std::uint16_t proto_version = kProtoVersion;
    std::vector<int> depths;
    int bits = 4;
    std::array<std::uint8_t, 32> base_model_hash{};
    int d_base = 0;
    std::string base_id = "main";
    int max_reconnects = 3;
    int backoff_start_ms = 100;
    int recv_timeout_ms = 30000;
    bool quiet = true;
};

// Training-node side of the wire: fetches quantized taps for a sequence,
// reconnecting with backoff and resuming at the current batch id.
class RemoteTapSource : public TapSource {
public:
    explicit RemoteTapSource(SessionConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.d_base <= 0) throw ConfigError("remote session: d_base must be set");
        if (cfg_.depths.empty()) throw ConfigError("remote session: at least one tap depth required");
        if (!quant_bits_allowed(cfg_.bits)) throw ConfigError("remote session: bad quantization bits");
    }

    ~RemoteTapSource() override {
        try {
            end_session();
        } catch (...) {
        }
    }

    TapSet fetch(const TokenSequence& seq) override {
        const std::uint64_t id = next_batch_id_++;
        wire::Batch request;
        request.batch_id = id;
        for (int t : seq.ids) request.token_ids.push_back(static_cast<std::uint32_t>(t));

        int attempts_left = cfg_.max_reconnects;
        int backoff = cfg_.backoff_start_ms;
        while (true) {
            try {
                ensure_connected();
                splitdetail::send_message(sock_, wire::Message{request}, &bytes_);
                while (true) {
                    const auto msg =
                        splitdetail::recv_message(sock_, wire::Context{cfg_.d_base}, nullptr, &bytes_);
                    if (!msg) throw NetError("server closed the connection");
                    const auto* reply = std::get_if<wire::Batch>(&*msg);
                    if (reply == nullptr) throw ProtocolError("expected BATCH reply");
                    if (reply->batch_id < id) continue; // stale duplicate: drop
                    if (reply->batch_id > id) throw ProtocolError("reply for a future batch id");
                    ++fetch_count_;
                    return to_tapset(*reply);
                }
            } catch (const NetError& e) {
                sock_.close();
                connected_ = false;
                if (attempts_left-- <= 0)
                    throw NetError(std::string("retry budget exhausted fetching batch ") + std::to_string(id) +
                                   ": " + e.what());
                if (!cfg_.quiet) std::cerr << "[remote] reconnecting after error: " << e.what() << "\n";
                std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
                backoff *= 2;
            }
        }
    }

    void end_session() {
        if (connected_) {
            splitdetail::send_message(sock_, wire::End{}, &bytes_);
            sock_.close();
            connected_ = false;
        }
    }

    std::uint64_t bytes_transferred() const override { return bytes_; }
    std::uint64_t fetches() const override { return fetch_count_; }

private:
    void ensure_connected() {
        if (connected_) return;
        sock_ = net::connect_to(net::Addr::parse(cfg_.endpoint), cfg_.recv_timeout_ms);
        wire::Hello hello;
        hello.proto_version = cfg_.proto_version;
        hello.base_model_hash = cfg_.base_model_hash;
        hello.d_base = static_cast<std::uint32_t>(cfg_.d_base);
        for (int d : cfg_.depths) hello.depths.push_back(static_cast<std::uint8_t>(d));
        hello.bits = static_cast<std::uint8_t>(cfg_.bits);
        splitdetail::send_message(sock_, hello, &bytes_);
        const auto ack = splitdetail::recv_message(sock_, wire::Context{}, nullptr, &bytes_);
        if (!ack) throw NetError("server closed during handshake");
        const auto* ha = std::get_if<wire::HelloAck>(&*ack);
        if (ha == nullptr) throw ProtocolError("expected HELLO_ACK");
        if (ha->accepted != 1) throw HandshakeError("server rejected the session (version or model hash mismatch)");
        connected_ = true;
    }

    TapSet to_tapset(const wire::Batch& reply) const {
        TapSet out;
        for (const auto& db : reply.blocks) out.taps[cfg_.base_id][db.depth] = dequantize(db.block);
        return out;
    }

    SessionConfig cfg_;
    net::Socket sock_;
    bool connected_ = false;
    std::uint64_t next_batch_id_ = 0;
    std::uint64_t bytes_ = 0;
    std::uint64_t fetch_count_ = 0;
};

// Pull-mode remote training: identical semantics to the local loop, with
// taps sourced from the wire.
inline TrainResult train_remote(CarryOnModel& carry, const SessionConfig& session,
                                const std::vector<TokenSequence>& train_set,
                                const std::vector<TokenSequence>& val_set, const TrainOptions& opt,
                                const std::vector<TokenSequence>* general_val = nullptr) {
    RemoteTapSource source(session);
    TrainResult result = train_carryon(carry, source, train_set, val_set, opt, general_val);
    source.end_session();
    return result;
}

// Push-mode consumer: acknowledges each streamed batch in order and hands
// the dequantized taps to the callback until the server sends END.
inline std::uint64_t consume_push_stream(
    const SessionConfig& session,
    const std::function<void(std::uint64_t, const TokenSequence&, const TapSet&)>& on_batch) {
    net::Socket sock = net::connect_to(net::Addr::parse(session.endpoint));
    std::uint64_t bytes = 0;
    wire::Hello hello;
    hello.proto_version = session.proto_version;
    hello.base_model_hash = session.base_model_hash;
    hello.d_base = static_cast<std::uint32_t>(session.d_base);
    for (int d : session.depths) hello.depths.push_back(static_cast<std::uint8_t>(d));
    hello.bits = static_cast<std::uint8_t>(session.bits);
    splitdetail::send_message(sock, hello, &bytes);
    const auto ack = splitdetail::recv_message(sock, wire::Context{}, nullptr, &bytes);
    if (!ack || !std::holds_alternative<wire::HelloAck>(*ack)) throw ProtocolError("expected HELLO_ACK");
    if (std::get<wire::HelloAck>(*ack).accepted != 1) throw HandshakeError("server rejected the session");
    std::uint64_t expected = 0;
    while (true) {
        const auto msg = splitdetail::recv_message(sock, wire::Context{session.d_base}, nullptr, &bytes);
        if (!msg) throw NetError("server closed mid-stream");
        if (std::holds_alternative<wire::End>(*msg)) break;
        const auto* batch = std::get_if<wire::Batch>(&*msg);
        if (batch == nullptr) throw ProtocolError("expected BATCH in push stream");
        if (batch->batch_id != expected) continue; // duplicate: drop, ack was lost
        TokenSequence seq;
        for (std::uint32_t id : batch->token_ids) seq.ids.push_back(static_cast<int>(id));
        TapSet taps;
        for (const auto& db : batch->blocks) taps.taps[session.base_id][db.depth] = dequantize(db.block);
        on_batch(batch->batch_id, seq, taps);
        ++expected;
        splitdetail::send_message(sock, wire::BatchAck{batch->batch_id}, &bytes);
    }
    return bytes;
}

} // namespace carrygpt
