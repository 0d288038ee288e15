// Little-endian binary stream helpers shared by every versioned file format
// (model files, checkpoints, stream states).
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "pushbroom/tensor.hpp"

namespace pushbroom {

class BinWriter {
public:
    explicit BinWriter(std::ostream& os) : os_(os) {}

    void bytes(const void* p, size_t n) { os_.write((const char*)p, (std::streamsize)n); }

    void u8(uint8_t v) { bytes(&v, 1); }
    void u32(uint32_t v) {
        uint8_t b[4] = {(uint8_t)v, (uint8_t)(v >> 8), (uint8_t)(v >> 16), (uint8_t)(v >> 24)};
        bytes(b, 4);
    }
    void u64(uint64_t v) {
        u32((uint32_t)v);
        u32((uint32_t)(v >> 32));
    }
    void i64(int64_t v) { u64((uint64_t)v); }
    void f64(double v) {
        uint64_t b;
        std::memcpy(&b, &v, 8);
        u64(b);
    }
    void str(const std::string& s) {
        u32((uint32_t)s.size());
        bytes(s.data(), s.size());
    }
    void magic(const char m[4]) { bytes(m, 4); }
    void tensor(const Tensor& t) {
        u32((uint32_t)t.ndim());
        for (int i = 0; i < t.ndim(); ++i) u32((uint32_t)t.dim(i));
        for (int64_t i = 0; i < t.numel(); ++i) f64(t[i]);
    }

private:
    std::ostream& os_;
};

class BinReader {
public:
    explicit BinReader(std::istream& is) : is_(is) {}

    void bytes(void* p, size_t n) {
        is_.read((char*)p, (std::streamsize)n);
        if ((size_t)is_.gcount() != n) fail("binary read: truncated stream");
    }

    uint8_t u8() {
        uint8_t v;
        bytes(&v, 1);
        return v;
    }
    uint32_t u32() {
        uint8_t b[4];
        bytes(b, 4);
        return (uint32_t)b[0] | (uint32_t)b[1] << 8 | (uint32_t)b[2] << 16 | (uint32_t)b[3] << 24;
    }
    uint64_t u64() {
        uint64_t lo = u32();
        uint64_t hi = u32();
        return lo | hi << 32;
    }
    int64_t i64() { return (int64_t)u64(); }
    double f64() {
        uint64_t b = u64();
        double v;
        std::memcpy(&v, &b, 8);
        return v;
    }
    std::string str() {
        uint32_t n = u32();
        if (n > (1u << 24)) fail("binary read: implausible string length");
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    void expect_magic(const char m[4], const std::string& what) {
        char b[4];
        bytes(b, 4);
        if (std::memcmp(b, m, 4) != 0) fail(what + ": bad magic bytes (wrong or corrupted file)");
    }
    Tensor tensor() {
        uint32_t nd = u32();
        if (nd == 0 || nd > 8) fail("binary read: implausible tensor rank");
        Shape s((size_t)nd);
        for (auto& e : s) {
            uint32_t v = u32();
            if (v == 0 || v > (1u << 28)) fail("binary read: implausible tensor extent");
            e = (int)v;
        }
        Tensor t(s);
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = f64();
        return t;
    }

private:
    std::istream& is_;
};

inline std::ofstream open_out_binary(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail("cannot open for writing: " + path);
    return os;
}

inline std::ifstream open_in_binary(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("cannot open for reading: " + path);
    return is;
}

}  // namespace pushbroom
