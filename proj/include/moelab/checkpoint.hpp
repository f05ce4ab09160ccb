#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/common.hpp"
#include "moelab/param.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

// Checkpoint container: an 8-byte little-endian header length, a JSON header
// (format version, dtype, tensor names/shapes/classes, free-form meta), then
// the raw little-endian tensor payloads concatenated in header order.
inline constexpr int kCheckpointFormatVersion = 1;

namespace detail {

inline void write_u64_le(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64_le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

template <typename S>
void write_scalars_le(std::ostream& os, const std::vector<S>& data) {
    static_assert(sizeof(S) == 4 || sizeof(S) == 8);
    for (S v : data) {
        if constexpr (sizeof(S) == 8) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            write_u64_le(os, bits);
        } else {
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            unsigned char b[4];
            for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
            os.write(reinterpret_cast<const char*>(b), 4);
        }
    }
}

template <typename S>
void read_scalars_le(std::istream& is, std::vector<S>& data) {
    for (S& v : data) {
        if constexpr (sizeof(S) == 8) {
            const std::uint64_t bits = read_u64_le(is);
            std::memcpy(&v, &bits, 8);
        } else {
            unsigned char b[4];
            is.read(reinterpret_cast<char*>(b), 4);
            std::uint32_t bits = 0;
            for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(b[i]) << (8 * i);
            std::memcpy(&v, &bits, 4);
        }
    }
}

template <typename S>
const char* dtype_name() {
    return sizeof(S) == 8 ? "f64" : "f32";
}

}  // namespace detail

template <typename S>
void save_checkpoint(const std::string& path, const ParamRegistry<S>& params,
                     const nlohmann::json& meta = nlohmann::json::object()) {
    nlohmann::json header;
    header["format_version"] = kCheckpointFormatVersion;
    header["dtype"] = detail::dtype_name<S>();
    header["meta"] = meta;
    nlohmann::json tensors = nlohmann::json::array();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Parameter<S>& p = params[i];
        tensors.push_back({{"name", p.name}, {"shape", p.value.shape}, {"class", to_string(p.cls)}});
    }
    header["tensors"] = tensors;
    const std::string hs = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    detail::write_u64_le(os, hs.size());
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (std::size_t i = 0; i < params.size(); ++i)
        detail::write_scalars_le(os, params[i].value.data);
    if (!os) throw IoError("checkpoint write failed: " + path);
}

struct CheckpointInfo {
    nlohmann::json header;
    nlohmann::json meta;
};

// Loads payloads into matching registry entries. The registry must already
// contain every tensor named in the header with the same shape.
template <typename S>
CheckpointInfo load_checkpoint(const std::string& path, ParamRegistry<S>& params) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    const std::uint64_t hlen = detail::read_u64_le(is);
    std::string hs(hlen, '\0');
    is.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw IoError("truncated checkpoint header: " + path);
    nlohmann::json header = nlohmann::json::parse(hs);
    if (header.at("format_version").get<int>() != kCheckpointFormatVersion)
        throw IoError("unsupported checkpoint format version");
    if (header.at("dtype").get<std::string>() != detail::dtype_name<S>())
        throw IoError("checkpoint dtype mismatch: file has " + header.at("dtype").get<std::string>());
    for (const auto& entry : header.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        Parameter<S>* p = params.find(name);
        if (!p) throw IoError("checkpoint tensor not present in model: " + name);
        const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
        if (shape != p->value.shape)
            throw IoError("checkpoint shape mismatch for " + name);
        detail::read_scalars_le(is, p->value.data);
    }
    if (!is) throw IoError("truncated checkpoint payload: " + path);
    return CheckpointInfo{header, header.value("meta", nlohmann::json::object())};
}

inline nlohmann::json read_checkpoint_header(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    const std::uint64_t hlen = detail::read_u64_le(is);
    std::string hs(hlen, '\0');
    is.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw IoError("truncated checkpoint header: " + path);
    return nlohmann::json::parse(hs);
}

}  // namespace moelab
