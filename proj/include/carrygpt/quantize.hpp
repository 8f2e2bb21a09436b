#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "carrygpt/tensor.hpp"

namespace carrygpt {

inline bool quant_bits_allowed(int b) { return b == 0 || b == 2 || b == 3 || b == 4 || b == 8; }

inline int quant_level_max(int b) { return (1 << (b - 1)) - 1; }

// Wire codec id reserved for learned bridges (vector quantization etc.);
// no such codec is implemented, decoders must reject it.
inline constexpr int kReservedLearnedCodecId = 0xff;

// Per-token (per-row) symmetric uniform quantization of an embedding matrix.
// bits = 0 is a passthrough that carries raw values. Codes live in
// [-(2^(b-1)-1), 2^(b-1)-1] and are bit-packed little-endian, each row
// padded to a byte boundary.
struct QuantizedBlock {
    int bits = 0;
    int n = 0;
    int d = 0;
    std::vector<double> scales;        // one per row; empty when bits == 0
    std::vector<std::uint8_t> codes;   // packed; empty when bits == 0
    std::vector<double> raw;           // passthrough payload when bits == 0

    std::size_t row_bytes() const { return (static_cast<std::size_t>(d) * bits + 7) / 8; }

    bool operator==(const QuantizedBlock& o) const {
        return bits == o.bits && n == o.n && d == o.d && scales == o.scales && codes == o.codes && raw == o.raw;
    }
};

namespace detail {

// Writes a two's-complement code of `bits` width at element position `idx`
// within a row-aligned little-endian bit stream.
inline void put_code(std::vector<std::uint8_t>& buf, std::size_t row_base_bytes, int idx, int bits, int value) {
    const std::uint32_t u = static_cast<std::uint32_t>(value) & ((1u << bits) - 1);
    std::size_t bit = static_cast<std::size_t>(idx) * bits;
    for (int k = 0; k < bits; ++k, ++bit)
        if (u & (1u << k)) buf[row_base_bytes + bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
}

inline int get_code(const std::vector<std::uint8_t>& buf, std::size_t row_base_bytes, int idx, int bits) {
    std::uint32_t u = 0;
    std::size_t bit = static_cast<std::size_t>(idx) * bits;
    for (int k = 0; k < bits; ++k, ++bit)
        if (buf[row_base_bytes + bit / 8] & (1u << (bit % 8))) u |= 1u << k;
    // sign extend
    if (u & (1u << (bits - 1))) u |= ~((1u << bits) - 1);
    return static_cast<int>(static_cast<std::int32_t>(u));
}

// max|x| / qmax, then iterated to a fixed point of s -> (qmax*s)/qmax so
// that requantizing a dequantized block reproduces the identical scale.
inline double canonical_scale(double max_abs, int qmax) {
    if (max_abs == 0.0) return 0.0;
    double s = max_abs / static_cast<double>(qmax);
    for (int it = 0; it < 8; ++it) {
        const double next = (static_cast<double>(qmax) * s) / static_cast<double>(qmax);
        if (next == s) break;
        s = next;
    }
    return s;
}

} // namespace detail

inline QuantizedBlock quantize(const Tensor& x, int bits) {
    if (x.shape().size() != 2) throw ShapeError("quantize: expected 2-d tensor, got " + x.shape_str());
    if (!quant_bits_allowed(bits)) throw ConfigError("quantize: bits must be one of {0,2,3,4,8}, got " + std::to_string(bits));
    QuantizedBlock q;
    q.bits = bits;
    q.n = x.rows();
    q.d = x.cols();
    if (bits == 0) {
        q.raw.assign(x.data().begin(), x.data().end());
        return q;
    }
    const int qmax = quant_level_max(bits);
    q.scales.resize(static_cast<std::size_t>(q.n));
    q.codes.assign(static_cast<std::size_t>(q.n) * q.row_bytes(), 0);
    for (int i = 0; i < q.n; ++i) {
        double m = 0.0;
        for (int j = 0; j < q.d; ++j) m = std::max(m, std::abs(static_cast<double>(x.at(i, j))));
        const double s = detail::canonical_scale(m, qmax);
        q.scales[static_cast<std::size_t>(i)] = s;
        if (s == 0.0) continue; // all-zero row: scale 0, codes 0
        const std::size_t base = static_cast<std::size_t>(i) * q.row_bytes();
        for (int j = 0; j < q.d; ++j) {
            int c = static_cast<int>(std::nearbyint(static_cast<double>(x.at(i, j)) / s));
            if (c > qmax) c = qmax;
            if (c < -qmax) c = -qmax;
            detail::put_code(q.codes, base, j, bits, c);
        }
    }
    return q;
}

inline Tensor dequantize(const QuantizedBlock& q) {
    if (q.bits == 0) {
        std::vector<Real> vals(q.raw.begin(), q.raw.end());
        return Tensor::from_data({q.n, q.d}, std::move(vals));
    }
    Tensor out = Tensor::zeros({q.n, q.d});
    for (int i = 0; i < q.n; ++i) {
        const double s = q.scales[static_cast<std::size_t>(i)];
        if (s == 0.0) continue;
        const std::size_t base = static_cast<std::size_t>(i) * q.row_bytes();
        for (int j = 0; j < q.d; ++j)
            out.at(i, j) = static_cast<Real>(detail::get_code(q.codes, base, j, q.bits) * s);
    }
    return out;
}

// Convenience roundtrip used by both the local tap source and the tests.
inline Tensor quantize_roundtrip(const Tensor& x, int bits) {
    if (bits == 0) {
        Tensor copy = Tensor::from_data(x.shape(), std::vector<Real>(x.data()));
        return copy;
    }
    return dequantize(quantize(x, bits));
}

} // namespace carrygpt
