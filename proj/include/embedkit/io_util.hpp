#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "embedkit/error.hpp"

namespace embedkit {

// Warnings are reported through a sink so callers (and tests) can capture
// them; the default goes to stderr.
using WarningSink = std::function<void(const std::string&)>;

inline WarningSink stderr_warnings() {
    return [](const std::string& msg) { std::cerr << "warning: " << msg << "\n"; };
}

inline std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a64(std::span<const unsigned char>(
                       reinterpret_cast<const unsigned char*>(s.data()), s.size()),
                   h);
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path);
    std::ostringstream oss;
    oss << in.rdbuf();
    return oss.str();
}

inline std::uint64_t file_hash(const std::string& path) { return fnv1a64(read_file(path)); }

// Write-temp-then-rename so partially written artifacts are never visible.
inline void write_file_atomic(const std::string& path, const std::string& bytes) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write file: " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

// Little-endian packing; checkpoint files are endian-pinned.
inline void put_u8(std::string& buf, std::uint8_t v) { buf.push_back(static_cast<char>(v)); }

inline void put_u32le(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64le(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32le(std::string& buf, float v) { put_u32le(buf, std::bit_cast<std::uint32_t>(v)); }

// Cursor over a byte buffer; throws FormatError carrying the offset.
class ByteReader {
public:
    ByteReader(const std::string& buf, std::string what) : buf_(buf), what_(std::move(what)) {}

    std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }

    std::uint32_t u32le() {
        const char* p = take(4);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(p[i]);
        return v;
    }

    std::uint64_t u64le() {
        const char* p = take(8);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(p[i]);
        return v;
    }

    float f32le() { return std::bit_cast<float>(u32le()); }

    std::string bytes(std::size_t n) {
        const char* p = take(n);
        return std::string(p, n);
    }

    std::size_t offset() const { return pos_; }

    void expect_end() const {
        if (pos_ != buf_.size())
            throw FormatError(what_ + ": trailing bytes at offset " + std::to_string(pos_));
    }

    [[noreturn]] void fail(const std::string& msg) const {
        throw FormatError(what_ + ": " + msg + " at offset " + std::to_string(pos_));
    }

private:
    const char* take(std::size_t n) {
        if (pos_ + n > buf_.size())
            throw FormatError(what_ + ": truncated payload at offset " + std::to_string(pos_));
        const char* p = buf_.data() + pos_;
        pos_ += n;
        return p;
    }

    const std::string& buf_;
    std::string what_;
    std::size_t pos_ = 0;
};

// Static partition across at most `threads` workers; item i always lands in
// the same slot, so results are independent of scheduling.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::size_t nw = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
    std::vector<std::thread> workers;
    workers.reserve(nw);
    for (std::size_t w = 0; w < nw; ++w) {
        workers.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += nw) fn(i);
        });
    }
    for (auto& t : workers) t.join();
}

}  // namespace embedkit
