#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <cstdio>
#include <string>
#include <variant>
#include <vector>

#include "carrygpt/common.hpp"
#include "carrygpt/quantize.hpp"

namespace carrygpt::wire {

// Frame layout (little-endian):
//   magic "CGO1" (4) | type u8 | length u32 | body
// A malformed magic or length aborts the connection.
inline constexpr char kMagic[4] = {'C', 'G', 'O', '1'};
inline constexpr std::uint32_t kMaxFrameLen = 1u << 26;

enum class FrameType : std::uint8_t {
    Hello = 0x01,
    HelloAck = 0x02,
    Batch = 0x03,
    BatchAck = 0x04,
    End = 0x05,
};

struct Hello {
    std::uint16_t proto_version = kProtoVersion;
    std::array<std::uint8_t, 32> base_model_hash{};
    std::uint32_t d_base = 0;
    std::vector<std::uint8_t> depths;
    std::uint8_t bits = 0;
    bool operator==(const Hello&) const = default;
};

struct HelloAck {
    std::uint8_t accepted = 0;
    bool operator==(const HelloAck&) const = default;
};

struct DepthBlock {
    std::uint8_t depth = 0;
    QuantizedBlock block;
    bool operator==(const DepthBlock&) const = default;
};

// A batch carries one token sequence. A request has no blocks; a reply
// echoes the token ids and adds one block per requested depth.
struct Batch {
    std::uint64_t batch_id = 0;
    std::vector<std::uint32_t> token_ids;
    std::vector<DepthBlock> blocks;
    bool operator==(const Batch&) const = default;
};

struct BatchAck {
    std::uint64_t batch_id = 0;
    bool operator==(const BatchAck&) const = default;
};

struct End {
    bool operator==(const End&) const = default;
};

using Message = std::variant<Hello, HelloAck, Batch, BatchAck, End>;

namespace detail {

struct Writer {
    std::vector<std::uint8_t> buf;
    void u8(std::uint8_t v) { buf.push_back(v); }
    void u16(std::uint16_t v) {
        for (int i = 0; i < 2; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void bytes(const std::uint8_t* p, std::size_t n) { buf.insert(buf.end(), p, p + n); }
};

struct Reader {
    const std::uint8_t* p;
    std::size_t len;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > len) throw FramingError("truncated frame body");
    }
    std::uint8_t u8() {
        need(1);
        return p[pos++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(p[pos++]) << (8 * i);
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[pos++]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[pos++]) << (8 * i);
        return v;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    void bytes(std::uint8_t* out, std::size_t n) {
        need(n);
        std::memcpy(out, p + pos, n);
        pos += n;
    }
    void done() const {
        if (pos != len) throw FramingError("frame body has trailing bytes");
    }
};

// HELLO body: proto_version u16 | hash 32B | d_base u32 | depths u8[] |
// bits u8; the depth count is implied by the frame length.
inline void encode_body(Writer& w, const Hello& m) {
    w.u16(m.proto_version);
    w.bytes(m.base_model_hash.data(), 32);
    w.u32(m.d_base);
    if (m.depths.size() > 255) throw ProtocolError("HELLO: too many depths");
    w.bytes(m.depths.data(), m.depths.size());
    w.u8(m.bits);
}

inline void encode_body(Writer& w, const HelloAck& m) { w.u8(m.accepted); }

// BATCH body: batch_id u64 | n u32 | token_ids u32[n] | blocks until the
// end of the frame, each: depth u8 | bits u8 | payload (raw f64[n*d] for
// bits=0, otherwise scales f64[n] then packed codes).
inline void encode_body(Writer& w, const Batch& m) {
    if (m.token_ids.empty()) throw ProtocolError("BATCH: empty token sequence");
    w.u64(m.batch_id);
    w.u32(static_cast<std::uint32_t>(m.token_ids.size()));
    for (std::uint32_t id : m.token_ids) w.u32(id);
    for (const auto& db : m.blocks) {
        const QuantizedBlock& q = db.block;
        if (q.n != static_cast<int>(m.token_ids.size()))
            throw ProtocolError("BATCH: block row count disagrees with token count");
        w.u8(db.depth);
        w.u8(static_cast<std::uint8_t>(q.bits));
        if (q.bits == 0) {
            for (double v : q.raw) w.f64(v);
        } else {
            for (double s : q.scales) w.f64(s);
            w.bytes(q.codes.data(), q.codes.size());
        }
    }
}

inline void encode_body(Writer& w, const BatchAck& m) { w.u64(m.batch_id); }
inline void encode_body(Writer&, const End&) {}

} // namespace detail

inline FrameType frame_type_of(const Message& m) {
    switch (m.index()) {
        case 0: return FrameType::Hello;
        case 1: return FrameType::HelloAck;
        case 2: return FrameType::Batch;
        case 3: return FrameType::BatchAck;
        default: return FrameType::End;
    }
}

inline std::vector<std::uint8_t> encode_frame(const Message& m) {
    detail::Writer body;
    std::visit([&](const auto& msg) { detail::encode_body(body, msg); }, m);
    detail::Writer frame;
    frame.bytes(reinterpret_cast<const std::uint8_t*>(kMagic), 4);
    frame.u8(static_cast<std::uint8_t>(frame_type_of(m)));
    if (body.buf.size() > kMaxFrameLen) throw ProtocolError("frame body exceeds limit");
    frame.u32(static_cast<std::uint32_t>(body.buf.size()));
    frame.bytes(body.buf.data(), body.buf.size());
    return frame.buf;
}

struct FrameHeader {
    FrameType type;
    std::uint32_t length;
};

// Parses and validates the 9-byte frame header.
inline FrameHeader parse_header(const std::uint8_t header[9]) {
    if (std::memcmp(header, kMagic, 4) != 0) throw FramingError("bad frame magic");
    const std::uint8_t type = header[4];
    std::uint32_t len = 0;
    for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(header[5 + i]) << (8 * i);
    if (len > kMaxFrameLen) throw FramingError("frame length " + std::to_string(len) + " exceeds limit");
    return FrameHeader{static_cast<FrameType>(type), len};
}

// Decode context: batch blocks need the embedding width agreed in HELLO.
struct Context {
    int d_base = 0;
};

inline Message decode_body(FrameType type, const std::uint8_t* body, std::size_t len, const Context& ctx) {
    detail::Reader r{body, len};
    switch (type) {
        case FrameType::Hello: {
            if (len < 39) throw FramingError("HELLO body too short");
            Hello m;
            m.proto_version = r.u16();
            r.bytes(m.base_model_hash.data(), 32);
            m.d_base = r.u32();
            const std::size_t nd = len - 39; // everything between d_base and the trailing bits byte
            m.depths.resize(nd);
            if (nd) r.bytes(m.depths.data(), nd);
            m.bits = r.u8();
            r.done();
            return m;
        }
        case FrameType::HelloAck: {
            HelloAck m;
            m.accepted = r.u8();
            r.done();
            return m;
        }
        case FrameType::Batch: {
            Batch m;
            m.batch_id = r.u64();
            const std::uint32_t n = r.u32();
            if (n == 0) throw ProtocolError("BATCH: empty token sequence");
            if (n > kMaxFrameLen / 4) throw FramingError("BATCH: token count exceeds frame limit");
            m.token_ids.resize(n);
            for (auto& id : m.token_ids) id = r.u32();
            while (r.pos < r.len) { // depth blocks run to the end of the frame
                DepthBlock db;
                db.depth = r.u8();
                const int bits = r.u8();
                if (!quant_bits_allowed(bits)) throw ProtocolError("BATCH: bad quantization bits " + std::to_string(bits));
                if (ctx.d_base <= 0) throw ProtocolError("BATCH: blocks present but embedding width unknown");
                QuantizedBlock& q = db.block;
                q.bits = bits;
                q.n = static_cast<int>(n);
                q.d = ctx.d_base;
                if (bits == 0) {
                    q.raw.resize(static_cast<std::size_t>(q.n) * q.d);
                    for (auto& v : q.raw) v = r.f64();
                } else {
                    q.scales.resize(n);
                    for (auto& s : q.scales) s = r.f64();
                    q.codes.resize(static_cast<std::size_t>(q.n) * q.row_bytes());
                    r.bytes(q.codes.data(), q.codes.size());
                }
                m.blocks.push_back(std::move(db));
            }
            r.done();
            return m;
        }
        case FrameType::BatchAck: {
            BatchAck m;
            m.batch_id = r.u64();
            r.done();
            return m;
        }
        case FrameType::End: {
            r.done();
            return End{};
        }
        default:
            throw ProtocolError("unknown frame type 0x" + [&] {
                char buf[8];
                std::snprintf(buf, sizeof(buf), "%02x", static_cast<unsigned>(type));
                return std::string(buf);
            }());
    }
}

// Whole-frame decode for tests and in-memory use.
inline Message decode_frame(const std::vector<std::uint8_t>& frame, const Context& ctx) {
    if (frame.size() < 9) throw FramingError("frame shorter than header");
    const FrameHeader h = parse_header(frame.data());
    if (frame.size() != 9 + static_cast<std::size_t>(h.length)) throw FramingError("frame length mismatch");
    return decode_body(h.type, frame.data() + 9, h.length, ctx);
}

} // namespace carrygpt::wire
