#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cuedepth/error.hpp"
#include "cuedepth/tensor.hpp"

namespace cuedepth {

// Binary tensor format: magic "CDT1", dtype u8 (0 = f64, 1 = f32),
// rank u32, extents u32 each, row-major payload. All integers and
// floats little-endian.

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
#if defined(__BYTE_ORDER__) && __BYTE_ORDER__ == __ORDER_BIG_ENDIAN__
    std::reverse(buf, buf + sizeof(T));
#endif
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
#if defined(__BYTE_ORDER__) && __BYTE_ORDER__ == __ORDER_BIG_ENDIAN__
    std::reverse(buf, buf + sizeof(T));
#endif
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

} // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
    os.write("CDT1", 4);
    detail::write_le<std::uint8_t>(os, 0); // f64
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
    for (std::size_t i = 0; i < t.numel(); ++i) detail::write_le<double>(os, t[i]);
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw PersistenceError("cannot open for write: " + path.string());
    write_tensor(os, t);
    if (!os) throw PersistenceError("write failed: " + path.string());
}

inline Tensor read_tensor(std::istream& is, const std::string& origin = "<stream>") {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "CDT1", 4) != 0) {
        throw FormatError("bad magic bytes in " + origin);
    }
    const auto dtype = detail::read_le<std::uint8_t>(is);
    if (dtype > 1) throw FormatError("unknown dtype code " + std::to_string(dtype) + " in " + origin);
    const auto rank = detail::read_le<std::uint32_t>(is);
    if (rank > 8) throw FormatError("implausible rank " + std::to_string(rank) + " in " + origin);
    Shape shape(rank);
    for (auto& e : shape) e = detail::read_le<std::uint32_t>(is);
    Tensor t(shape);
    if (dtype == 0) {
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = detail::read_le<double>(is);
    } else {
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(detail::read_le<float>(is));
    }
    if (!is) throw FormatError("truncated tensor payload in " + origin);
    return t;
}

inline Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw PersistenceError("cannot open for read: " + path.string());
    return read_tensor(is, path.string());
}

} // namespace cuedepth
