#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "carrygpt/nn.hpp"

namespace carrygpt {

// Model container: magic "CGPT" | format version u16 | canonical JSON config
// (u32 length prefix) | u32 param count | per param: u32 name length, name,
// u32 ndims, u32 extents, raw little-endian f64 values. Writing the same
// model twice yields identical bytes.
inline constexpr char kModelMagic[4] = {'C', 'G', 'P', 'T'};

namespace detail {

inline void write_u16(std::ostream& os, std::uint16_t v) {
    char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
    os.write(b, 2);
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 4);
}

inline void write_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    os.write(b, 8);
}

inline std::uint16_t read_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    if (!is) throw IoError("model file truncated");
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("model file truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline double read_f64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw IoError("model file truncated");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

} // namespace detail

inline void save_model_file(const std::string& path, const nlohmann::json& config, const ParamStore& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write model file: " + path);
    os.write(kModelMagic, 4);
    detail::write_u16(os, kModelFormatVersion);
    const std::string cfg = config.dump(); // nlohmann keeps keys sorted: canonical
    detail::write_u32(os, static_cast<std::uint32_t>(cfg.size()));
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    detail::write_u32(os, static_cast<std::uint32_t>(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Param& p = params[i];
        detail::write_u32(os, static_cast<std::uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        detail::write_u32(os, static_cast<std::uint32_t>(p.value.shape().size()));
        for (int e : p.value.shape()) detail::write_u32(os, static_cast<std::uint32_t>(e));
        for (Real v : p.value.data()) detail::write_f64(os, static_cast<double>(v));
    }
    if (!os) throw IoError("failed writing model file: " + path);
}

struct ModelFile {
    nlohmann::json config;
    struct Entry {
        std::string name;
        std::vector<int> shape;
        std::vector<double> values;
    };
    std::vector<Entry> params;
};

inline ModelFile load_model_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open model file: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kModelMagic, 4) != 0) throw IoError("bad model magic in " + path);
    const std::uint16_t version = detail::read_u16(is);
    if (version != kModelFormatVersion)
        throw IoError("unsupported model format version " + std::to_string(version));
    const std::uint32_t cfg_len = detail::read_u32(is);
    std::string cfg(cfg_len, '\0');
    is.read(cfg.data(), cfg_len);
    if (!is) throw IoError("model file truncated in config");
    ModelFile mf;
    try {
        mf.config = nlohmann::json::parse(cfg);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("bad model config json: ") + e.what());
    }
    const std::uint32_t count = detail::read_u32(is);
    mf.params.resize(count);
    for (auto& entry : mf.params) {
        const std::uint32_t name_len = detail::read_u32(is);
        entry.name.resize(name_len);
        is.read(entry.name.data(), name_len);
        const std::uint32_t ndims = detail::read_u32(is);
        entry.shape.resize(ndims);
        std::size_t numel = 1;
        for (auto& e : entry.shape) {
            e = static_cast<int>(detail::read_u32(is));
            numel *= static_cast<std::size_t>(e);
        }
        entry.values.resize(numel);
        for (auto& v : entry.values) v = detail::read_f64(is);
        if (!is) throw IoError("model file truncated in parameter " + entry.name);
    }
    return mf;
}

// Copies values into an already-shaped store; every entry must match an
// existing parameter exactly.
inline void load_into_store(const ModelFile& mf, ParamStore& store) {
    if (mf.params.size() != store.size())
        throw IoError("parameter count mismatch: file has " + std::to_string(mf.params.size()) + ", model has " +
                      std::to_string(store.size()));
    for (const auto& entry : mf.params) {
        Param& p = store.at(entry.name);
        if (p.value.shape() != entry.shape)
            throw IoError("shape mismatch for parameter " + entry.name + ": file " +
                          Tensor::shape_str(entry.shape) + " vs model " + p.value.shape_str());
        for (std::size_t i = 0; i < entry.values.size(); ++i)
            p.value.data()[i] = static_cast<Real>(entry.values[i]);
    }
}

} // namespace carrygpt
