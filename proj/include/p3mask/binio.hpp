#pragma once

// Little-endian binary serialization helpers and the CRC-32 used by the mask
// key and model checkpoint file formats. All multi-byte fields in those
// formats are little-endian regardless of host order, and every file carries
// a trailing CRC-32 (polynomial 0xEDB88320) over all preceding bytes.

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace p3mask {

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }

    void u16(std::uint16_t v) {
        buf_.push_back(static_cast<std::uint8_t>(v & 0xff));
        buf_.push_back(static_cast<std::uint8_t>(v >> 8));
    }

    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }

    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }

    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }

    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        buf_.insert(buf_.end(), p, p + n);
    }

    /// Length-prefixed (u32) UTF-8 string.
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

    const std::vector<std::uint8_t>& data() const { return buf_; }

private:
    std::vector<std::uint8_t> buf_;
};

/// Reads little-endian fields from a byte buffer; throws std::runtime_error
/// with the offending offset on truncation.
class ByteReader {
public:
    ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}
    explicit ByteReader(const std::vector<std::uint8_t>& buf) : ByteReader(buf.data(), buf.size()) {}

    std::uint8_t u8() {
        need(1);
        return data_[pos_++];
    }

    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(data_[pos_] | (data_[pos_ + 1] << 8));
        pos_ += 2;
        return v;
    }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }

    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }

    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return size_ - pos_; }

private:
    void need(std::size_t n) const {
        if (size_ - pos_ < n) {
            throw std::runtime_error("binary data truncated at byte " + std::to_string(pos_) +
                                     " (need " + std::to_string(n) + " more, have " +
                                     std::to_string(size_ - pos_) + ")");
        }
    }

    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

/// CRC-32 (reflected, polynomial 0xEDB88320), as used by zip/png.
std::uint32_t crc32(const std::uint8_t* data, std::size_t size);

inline std::uint32_t crc32(const std::vector<std::uint8_t>& buf) {
    return crc32(buf.data(), buf.size());
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);

} // namespace p3mask
