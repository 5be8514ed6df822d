#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "splm/error.hpp"

namespace splm {

// Explicit little-endian binary I/O. Readers track the byte offset so that
// truncation and corruption errors can point at where parsing stopped.

class BinaryWriter {
public:
    explicit BinaryWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
        require(out_.good(), "BinaryWriter: cannot open '", path, "' for writing");
    }

    void magic(const char (&m)[9]) { out_.write(m, 8); }
    void u8(uint8_t v) { out_.put(static_cast<char>(v)); }
    void u16(uint16_t v) { put_le(v, 2); }
    void u32(uint32_t v) { put_le(v, 4); }
    void i32(int32_t v) { put_le(static_cast<uint32_t>(v), 4); }
    void u64(uint64_t v) { put_le(v, 8); }
    void f32(float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_le(bits, 4);
    }
    void f64(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        put_le(bits, 8);
    }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        out_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    void f32s(const std::vector<float>& v) {
        for (float x : v) f32(x);
    }

    void close() {
        out_.close();
        require(out_.good(), "BinaryWriter: write to '", path_, "' failed");
    }

private:
    void put_le(uint64_t bits, int bytes) {
        char buf[8];
        for (int i = 0; i < bytes; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
        out_.write(buf, bytes);
    }
    std::string path_;
    std::ofstream out_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        require(in_.good(), "BinaryReader: cannot open '", path, "'");
    }

    void magic(const char (&expect)[9]) {
        char got[9] = {0};
        read(got, 8);
        if (std::memcmp(got, expect, 8) != 0)
            fail("BinaryReader: '", path_, "': bad magic at offset 0, expected ", expect);
    }
    uint8_t u8() {
        char c;
        read(&c, 1);
        return static_cast<uint8_t>(c);
    }
    uint16_t u16() { return static_cast<uint16_t>(get_le(2)); }
    uint32_t u32() { return static_cast<uint32_t>(get_le(4)); }
    int32_t i32() { return static_cast<int32_t>(get_le(4)); }
    uint64_t u64() { return get_le(8); }
    float f32() {
        const uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64() {
        const uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str(uint32_t max_len = 1u << 24) {
        const uint32_t n = u32();
        require(n <= max_len, "BinaryReader: '", path_, "': string length ", n, " at offset ",
                offset_ - 4, " exceeds limit");
        std::string s(n, '\0');
        if (n > 0) read(s.data(), n);
        return s;
    }
    std::vector<float> f32s(size_t n) {
        std::vector<float> v(n);
        for (auto& x : v) x = f32();
        return v;
    }

    uint64_t offset() const { return offset_; }
    bool at_eof() {
        in_.peek();
        return in_.eof();
    }

private:
    uint64_t get_le(int bytes) {
        char buf[8];
        read(buf, static_cast<size_t>(bytes));
        uint64_t bits = 0;
        for (int i = 0; i < bytes; ++i)
            bits |= static_cast<uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
        return bits;
    }
    void read(char* dst, size_t n) {
        in_.read(dst, static_cast<std::streamsize>(n));
        if (static_cast<size_t>(in_.gcount()) != n)
            fail("BinaryReader: '", path_, "': truncated at offset ", offset_, " (wanted ", n,
                 " bytes)");
        offset_ += n;
    }
    std::string path_;
    std::ifstream in_;
    uint64_t offset_ = 0;
};

}  // namespace splm
