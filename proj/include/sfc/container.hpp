#pragma once

// Tensor container file format, shared project-wide.
//
// Layout:
//   bytes 0..7    magic "SFCT0001"
//   bytes 8..15   unsigned 64-bit little-endian header length H
//   bytes 16..16+H  UTF-8 JSON header: name -> {dtype, shape, offset, length}
//   then raw little-endian element data; offsets are relative to the start of
//   the data section.
//
// Round trips are bit-exact: float64 tensors are written verbatim, float32
// tensors are written as the exact float cast of values that were themselves
// read from float32 storage.

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "sfc/tensor.hpp"

namespace sfc {

inline constexpr char kContainerMagic[8] = {'S', 'F', 'C', 'T', '0', '0', '0', '1'};

namespace detail {

inline void put_u64_le(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline uint64_t get_u64_le(const char* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
}

static_assert(std::endian::native == std::endian::little,
              "container serialization assumes a little-endian host");

}  // namespace detail

// std::map keeps header entries name-sorted so identical content produces
// identical bytes.
using TensorMap = std::map<std::string, Tensor>;

inline std::string serialize_container(const TensorMap& tensors) {
    nlohmann::ordered_json header = nlohmann::ordered_json::object();
    std::string data;
    for (const auto& [name, t] : tensors) {
        const std::size_t elem = t.dtype() == DType::f32 ? 4 : 8;
        const std::size_t offset = data.size();
        const std::size_t length = t.numel() * elem;
        header[name] = {{"dtype", dtype_name(t.dtype())},
                        {"shape", t.shape()},
                        {"offset", offset},
                        {"length", length}};
        data.resize(offset + length);
        char* dst = data.data() + offset;
        if (t.dtype() == DType::f32) {
            for (std::size_t i = 0; i < t.numel(); ++i) {
                float f = static_cast<float>(t[i]);
                std::memcpy(dst + 4 * i, &f, 4);
            }
        } else {
            std::memcpy(dst, t.data().data(), length);
        }
    }
    std::string out(kContainerMagic, 8);
    const std::string htext = header.dump();
    detail::put_u64_le(out, htext.size());
    out += htext;
    out += data;
    return out;
}

inline TensorMap deserialize_container(const std::string& bytes) {
    require(bytes.size() >= 16 && std::memcmp(bytes.data(), kContainerMagic, 8) == 0,
            "not a tensor container (bad magic)");
    const uint64_t hlen = detail::get_u64_le(bytes.data() + 8);
    require(bytes.size() >= 16 + hlen, "truncated container header");
    const nlohmann::json header = nlohmann::json::parse(bytes.substr(16, hlen));
    const char* data = bytes.data() + 16 + hlen;
    const std::size_t data_size = bytes.size() - 16 - hlen;

    TensorMap out;
    for (auto it = header.begin(); it != header.end(); ++it) {
        const auto& e = it.value();
        const DType dtype = dtype_from_name(e.at("dtype").get<std::string>());
        const auto shape = e.at("shape").get<std::vector<std::size_t>>();
        const std::size_t offset = e.at("offset").get<std::size_t>();
        const std::size_t length = e.at("length").get<std::size_t>();
        require(offset + length <= data_size, "container entry out of bounds: " + it.key());
        Tensor t(shape, dtype);
        const std::size_t elem = dtype == DType::f32 ? 4 : 8;
        require(length == t.numel() * elem, "container entry length mismatch: " + it.key());
        auto dst = t.mut();
        if (dtype == DType::f32) {
            for (std::size_t i = 0; i < t.numel(); ++i) {
                float f;
                std::memcpy(&f, data + offset + 4 * i, 4);
                dst[i] = static_cast<double>(f);
            }
        } else {
            std::memcpy(dst.data(), data + offset, length);
        }
        out.emplace(it.key(), std::move(t));
    }
    return out;
}

inline void save_container(const std::string& path, const TensorMap& tensors) {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "cannot open for writing: " + path);
    const std::string bytes = serialize_container(tensors);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(f.good(), "write failed: " + path);
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "cannot open: " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "cannot open for writing: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(f.good(), "write failed: " + path);
}

inline TensorMap load_container(const std::string& path) {
    return deserialize_container(read_file(path));
}

}  // namespace sfc
