#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "protogate/common.hpp"

namespace protogate {

/// Distinct failure modes for the binary container family. Each maps to its
/// own exception code so callers can tell a corrupt file from a wrong one.
enum class ContainerErrc {
    missing_file = 1,
    bad_magic,
    bad_version,
    truncated,
    dim_mismatch,
    label_out_of_range,
    manifest_mismatch,
};

class ContainerError : public std::runtime_error {
public:
    ContainerError(ContainerErrc code, const std::string& what)
        : std::runtime_error(what), code_(code) {}
    ContainerErrc code() const { return code_; }

private:
    ContainerErrc code_;
};

// All containers are little-endian: 8-byte magic, u32 version, typed header
// fields, then contiguous float32 payloads.

class BinaryWriter {
public:
    explicit BinaryWriter(const std::filesystem::path& path)
        : out_(path, std::ios::binary | std::ios::trunc) {
        if (!out_) throw ContainerError(ContainerErrc::missing_file, "cannot open for write: " + path.string());
    }

    void magic(const char (&m)[9]) { out_.write(m, 8); }
    void u8(uint8_t v) { out_.put(static_cast<char>(v)); }
    void u32(uint32_t v) {
        char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8),
                     static_cast<char>(v >> 16), static_cast<char>(v >> 24)};
        out_.write(b, 4);
    }
    void u64(uint64_t v) {
        u32(static_cast<uint32_t>(v));
        u32(static_cast<uint32_t>(v >> 32));
    }
    void i64(int64_t v) { u64(static_cast<uint64_t>(v)); }
    void f32(float v) {
        uint32_t bits;
        static_assert(sizeof(bits) == sizeof(v));
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void f64(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void f32_array(std::span<const float> a) {
        for (float v : a) f32(v);
    }
    /// Narrows doubles to float32 payload form.
    void f32_array(std::span<const double> a) {
        for (double v : a) f32(static_cast<float>(v));
    }
    void f64_array(std::span<const double> a) {
        for (double v : a) f64(v);
    }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        out_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    void close() { out_.close(); }

private:
    std::ofstream out_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::filesystem::path& path)
        : in_(path, std::ios::binary), path_(path.string()) {
        if (!in_) throw ContainerError(ContainerErrc::missing_file, "cannot open: " + path_);
    }

    void expect_magic(const char (&m)[9]) {
        char got[8];
        read_raw(got, 8);
        if (std::memcmp(got, m, 8) != 0)
            throw ContainerError(ContainerErrc::bad_magic, "bad magic in " + path_);
    }
    void expect_version(uint32_t want) {
        uint32_t got = u32();
        if (got != want)
            throw ContainerError(ContainerErrc::bad_version,
                                 "unsupported container version " + std::to_string(got) + " in " + path_);
    }
    uint8_t u8() {
        char c;
        read_raw(&c, 1);
        return static_cast<uint8_t>(c);
    }
    uint32_t u32() {
        unsigned char b[4];
        read_raw(reinterpret_cast<char*>(b), 4);
        return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
               (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
    }
    uint64_t u64() {
        uint64_t lo = u32();
        uint64_t hi = u32();
        return lo | (hi << 32);
    }
    int64_t i64() { return static_cast<int64_t>(u64()); }
    float f32() {
        uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64() {
        uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::vector<float> f32_array(size_t n) {
        std::vector<float> a(n);
        for (auto& v : a) v = f32();
        return a;
    }
    std::vector<double> f32_array_as_double(size_t n) {
        std::vector<double> a(n);
        for (auto& v : a) v = static_cast<double>(f32());
        return a;
    }
    std::vector<double> f64_array(size_t n) {
        std::vector<double> a(n);
        for (auto& v : a) v = f64();
        return a;
    }
    std::string str() {
        uint32_t n = u32();
        std::string s(n, '\0');
        if (n > 0) read_raw(s.data(), n);
        return s;
    }
    bool at_end() {
        return in_.peek() == std::char_traits<char>::eof();
    }

private:
    void read_raw(char* dst, std::streamsize n) {
        in_.read(dst, n);
        if (in_.gcount() != n)
            throw ContainerError(ContainerErrc::truncated,
                                 "payload shorter than header promises: " + path_);
    }

    std::ifstream in_;
    std::string path_;
};

}  // namespace protogate
