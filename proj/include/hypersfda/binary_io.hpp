#pragma once

#include "hypersfda/common.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

namespace hypersfda::bin {

// Little-endian scalar encoding, independent of host byte order.

template <class T>
inline void put(std::ostream& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
inline T get(std::istream& in, const char* what) {
    unsigned char buf[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) throw ParseError(std::string("truncated file while reading ") + what);
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    T value;
    std::memcpy(&value, buf, sizeof(T));
    return value;
}

inline void put_u16(std::ostream& out, std::uint16_t v) { put(out, v); }
inline void put_u32(std::ostream& out, std::uint32_t v) { put(out, v); }
inline void put_u64(std::ostream& out, std::uint64_t v) { put(out, v); }
inline void put_f64(std::ostream& out, double v) { put(out, v); }

inline std::uint16_t get_u16(std::istream& in, const char* what) { return get<std::uint16_t>(in, what); }
inline std::uint32_t get_u32(std::istream& in, const char* what) { return get<std::uint32_t>(in, what); }
inline std::uint64_t get_u64(std::istream& in, const char* what) { return get<std::uint64_t>(in, what); }
inline double get_f64(std::istream& in, const char* what) { return get<double>(in, what); }

/// Dense tensor, row-major, no shape prefix (shapes are implied by the header).
template <class Derived>
inline void put_tensor(std::ostream& out, const Eigen::DenseBase<Derived>& t) {
    for (Index i = 0; i < t.rows(); ++i)
        for (Index j = 0; j < t.cols(); ++j) put_f64(out, t(i, j));
}

template <class Derived>
inline void get_tensor(std::istream& in, Eigen::DenseBase<Derived>& t, const char* what) {
    for (Index i = 0; i < t.rows(); ++i)
        for (Index j = 0; j < t.cols(); ++j) t(i, j) = get_f64(in, what);
}

inline void put_magic(std::ostream& out, const char (&magic)[5]) { out.write(magic, 4); }

inline void expect_magic(std::istream& in, const char (&magic)[5], const char* what) {
    char buf[4];
    if (!in.read(buf, 4) || std::memcmp(buf, magic, 4) != 0) throw ParseError(std::string("bad magic bytes in ") + what);
}

}  // namespace hypersfda::bin
