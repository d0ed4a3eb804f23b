#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ribsr/tensor.hpp"

namespace ribsr {

// "RIBT" binary tensor file:
//   magic "RIBT" | version u8 = 1 | dtype u8 (0=f32, 1=f64) | rank u32 LE |
//   dims rank x u64 LE | payload row-major LE scalars.
// Round trips are bit-identical.

namespace io_detail {

inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
    return v;
}

template <typename T>
struct DtypeCode;
template <>
struct DtypeCode<float> {
    static constexpr std::uint8_t value = 0;
    using Bits = std::uint32_t;
};
template <>
struct DtypeCode<double> {
    static constexpr std::uint8_t value = 1;
    using Bits = std::uint64_t;
};

}  // namespace io_detail

template <typename T>
std::vector<std::uint8_t> encode_tensor(const TensorT<T>& t) {
    using io_detail::put_u32;
    using io_detail::put_u64;
    using Bits = typename io_detail::DtypeCode<T>::Bits;
    std::vector<std::uint8_t> b;
    b.reserve(10 + 8 * t.rank() + sizeof(T) * t.numel());
    b.insert(b.end(), {'R', 'I', 'B', 'T'});
    b.push_back(1);
    b.push_back(io_detail::DtypeCode<T>::value);
    put_u32(b, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t i = 0; i < t.rank(); ++i) put_u64(b, static_cast<std::uint64_t>(t.dim(i)));
    for (std::size_t i = 0; i < t.numel(); ++i) {
        Bits bits = std::bit_cast<Bits>(t[i]);
        for (std::size_t k = 0; k < sizeof(Bits); ++k)
            b.push_back(static_cast<std::uint8_t>(bits >> (8 * k)));
    }
    return b;
}

template <typename T>
TensorT<T> decode_tensor(const std::vector<std::uint8_t>& b) {
    using io_detail::get_le;
    using Bits = typename io_detail::DtypeCode<T>::Bits;
    if (b.size() < 10) throw LengthError("tensor file truncated: header incomplete");
    if (std::memcmp(b.data(), "RIBT", 4) != 0)
        throw FormatError("tensor file: bad magic, expected RIBT");
    if (b[4] != 1)
        throw FormatError("tensor file: unsupported version " + std::to_string(int(b[4])));
    if (b[5] != io_detail::DtypeCode<T>::value)
        throw FormatError("tensor file: dtype code " + std::to_string(int(b[5])) +
                          " does not match requested scalar type");
    const std::uint32_t rank = get_le<std::uint32_t>(b.data() + 6);
    if (rank == 0) throw FormatError("tensor file: rank 0");
    std::size_t pos = 10;
    if (b.size() < pos + 8ull * rank) throw LengthError("tensor file truncated: dims incomplete");
    Dims dims(rank);
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        dims[i] = static_cast<std::size_t>(get_le<std::uint64_t>(b.data() + pos));
        n *= dims[i];
        pos += 8;
    }
    if (b.size() != pos + sizeof(T) * n)
        throw LengthError("tensor file truncated or oversized: expected " +
                          std::to_string(pos + sizeof(T) * n) + " bytes, got " +
                          std::to_string(b.size()));
    std::vector<T> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        data[i] = std::bit_cast<T>(get_le<Bits>(b.data() + pos));
        pos += sizeof(T);
    }
    return TensorT<T>(std::move(dims), std::move(data));
}

template <typename T>
void save_tensor(const std::string& path, const TensorT<T>& t) {
    const auto bytes = encode_tensor(t);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for write: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for read: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

template <typename T>
TensorT<T> load_tensor(const std::string& path) {
    return decode_tensor<T>(read_file_bytes(path));
}

}  // namespace ribsr
