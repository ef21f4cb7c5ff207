#pragma once

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmofl {

// Little-endian byte buffer helpers shared by all blob formats.
class ByteWriter {
public:
    void u8(uint8_t x) { buf_.push_back(x); }
    void u32(uint32_t x) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(x >> (8 * i)));
    }
    void u64(uint64_t x) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(x >> (8 * i)));
    }
    void f64(double x) {
        uint64_t bits;
        std::memcpy(&bits, &x, 8);
        u64(bits);
    }
    void bytes(const void* p, size_t n) {
        const auto* b = static_cast<const uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void magic(const char tag[8]) { bytes(tag, 8); }

    const std::vector<uint8_t>& data() const { return buf_; }
    std::vector<uint8_t> take() { return std::move(buf_); }

private:
    std::vector<uint8_t> buf_;
};

class ByteReader {
public:
    explicit ByteReader(const std::vector<uint8_t>& buf) : buf_(buf) {}

    uint8_t u8() {
        need(1);
        return buf_[pos_++];
    }
    uint32_t u32() {
        need(4);
        uint32_t x = 0;
        for (int i = 0; i < 4; ++i) x |= static_cast<uint32_t>(buf_[pos_++]) << (8 * i);
        return x;
    }
    uint64_t u64() {
        need(8);
        uint64_t x = 0;
        for (int i = 0; i < 8; ++i) x |= static_cast<uint64_t>(buf_[pos_++]) << (8 * i);
        return x;
    }
    double f64() {
        const uint64_t bits = u64();
        double x;
        std::memcpy(&x, &bits, 8);
        return x;
    }
    void expect_magic(const char tag[8]) {
        need(8);
        if (std::memcmp(buf_.data() + pos_, tag, 8) != 0)
            throw std::runtime_error("blob magic mismatch, expected " + std::string(tag, 8));
        pos_ += 8;
    }
    size_t remaining() const { return buf_.size() - pos_; }
    bool done() const { return pos_ == buf_.size(); }

private:
    void need(size_t n) const {
        if (pos_ + n > buf_.size()) throw std::runtime_error("truncated blob");
    }
    const std::vector<uint8_t>& buf_;
    size_t pos_ = 0;
};

void write_file_atomic(const std::string& path, const void* data, size_t size);
void write_file_atomic(const std::string& path, const std::string& text);
std::vector<uint8_t> read_file(const std::string& path);

}  // namespace mmofl
