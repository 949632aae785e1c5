#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "imsty/tensor.hpp"

// Parameter checkpoint file format:
//   magic bytes "IMSTYCKPT1"
//   u32 (little endian) tensor count
//   per tensor: u32 name length, UTF-8 name bytes, u32 rank, rank * u32 dims,
//               raw little-endian f64 data in row-major order.

namespace imsty {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

namespace detail {

constexpr char kCkptMagic[] = "IMSTYCKPT1";  // 10 bytes, no terminator written
constexpr std::size_t kCkptMagicLen = 10;

inline void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class ByteReader {
public:
    ByteReader(const std::string& path, std::string bytes) : path_(path), bytes_(std::move(bytes)) {}

    std::size_t offset() const { return pos_; }

    void need(std::size_t n, const char* what) const {
        if (pos_ + n > bytes_.size()) {
            throw std::runtime_error("checkpoint '" + path_ + "': truncated while reading " + what +
                                     " at offset " + std::to_string(pos_) + " (need " +
                                     std::to_string(n) + " bytes, " +
                                     std::to_string(bytes_.size() - pos_) + " available)");
        }
    }

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    double f64(const char* what) {
        need(8, what);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 8;
        double v;
        std::memcpy(&v, &bits, sizeof(v));
        return v;
    }

    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

private:
    std::string path_;
    std::string bytes_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& items) {
    std::string out;
    out.append(detail::kCkptMagic, detail::kCkptMagicLen);
    detail::put_u32(out, static_cast<std::uint32_t>(items.size()));
    for (const NamedTensor& it : items) {
        detail::put_u32(out, static_cast<std::uint32_t>(it.name.size()));
        out.append(it.name);
        detail::put_u32(out, static_cast<std::uint32_t>(it.tensor.rank()));
        for (std::size_t d : it.tensor.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
        for (double v : it.tensor.raw()) detail::put_f64(out, v);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

inline std::vector<NamedTensor> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    detail::ByteReader r(path, std::move(bytes));
    const std::string magic = r.str(detail::kCkptMagicLen, "magic");
    if (magic != std::string(detail::kCkptMagic, detail::kCkptMagicLen)) {
        throw std::runtime_error("checkpoint '" + path + "': bad magic at offset 0 (expected IMSTYCKPT1)");
    }
    const std::uint32_t count = r.u32("tensor count");
    std::vector<NamedTensor> items;
    items.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.u32("name length");
        std::string name = r.str(name_len, "name");
        const std::uint32_t rank = r.u32("rank");
        std::vector<std::size_t> shape(rank);
        std::size_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            shape[d] = r.u32("dimension");
            numel *= shape[d];
        }
        std::vector<double> data(numel);
        for (std::size_t j = 0; j < numel; ++j) data[j] = r.f64("tensor data");
        items.push_back({std::move(name), Tensor::from_data(std::move(shape), std::move(data))});
    }
    return items;
}

}  // namespace imsty
