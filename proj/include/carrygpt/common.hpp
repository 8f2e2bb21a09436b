#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace carrygpt {

// Scalar type of all tensor math. Acceptance paths run in 64-bit; the
// 32-bit build (-DCARRYGPT_REAL32) trades gradient-check headroom for speed.
#ifdef CARRYGPT_REAL32
using Real = float;
#else
using Real = double;
#endif

inline constexpr std::uint16_t kModelFormatVersion = 1;
inline constexpr std::uint16_t kProtoVersion = 1;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor extents disagree with what an operation requires.
struct ShapeError : Error {
    using Error::Error;
};

// A configuration value violates its invariant.
struct ConfigError : Error {
    using Error::Error;
};

// Input data cannot be used (too short, out-of-range ids, ...).
struct DataError : Error {
    using Error::Error;
};

// An evaluation has no defined result (empty stream, empty mask).
struct EvalError : Error {
    using Error::Error;
};

// File / serialization failures.
struct IoError : Error {
    using Error::Error;
};

// Wire: structurally broken frame (bad magic, bad length, truncation).
struct FramingError : Error {
    using Error::Error;
};

// Wire: well-framed but semantically invalid message.
struct ProtocolError : Error {
    using Error::Error;
};

// Wire: HELLO negotiation failed (version or model-hash mismatch).
struct HandshakeError : Error {
    using Error::Error;
};

// Optimizer hit a non-finite gradient.
struct OptimError : Error {
    using Error::Error;
};

// Socket-level failure.
struct NetError : Error {
    using Error::Error;
};

} // namespace carrygpt
