#pragma once

#include <unistd.h>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "rebalance/dataset.hpp"

namespace testutil {

// Per-process scratch directory, created on first use.
inline std::filesystem::path tmpdir() {
    static const std::filesystem::path dir = [] {
        auto p = std::filesystem::temp_directory_path() /
                 ("rebalance_tests_" + std::to_string(static_cast<long>(::getpid())));
        std::filesystem::create_directories(p);
        return p;
    }();
    return dir;
}

inline std::string tmpfile(const std::string& name) { return (tmpdir() / name).string(); }

// Little-endian writers, independent of the library's serialization code.
inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}
inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

inline void write_bytes(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::string read_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// A well-formed GEMB byte string; pass num_spurious = 0 to omit the
// spurious section.
inline std::string gemb_bytes(std::uint64_t n, std::uint64_t d, std::uint32_t num_classes,
                              std::uint32_t num_spurious, const std::vector<float>& features,
                              const std::vector<std::uint32_t>& classes,
                              const std::vector<std::uint32_t>& spurious = {}) {
    std::string out = "GEMB";
    put_u32(out, 1);
    put_u64(out, n);
    put_u64(out, d);
    put_u32(out, num_classes);
    put_u32(out, num_spurious);
    for (float v : features) put_f32(out, v);
    for (std::uint32_t v : classes) put_u32(out, v);
    for (std::uint32_t v : spurious) put_u32(out, v);
    return out;
}

// Dataset with the requested per-group row counts. Feature column 0 carries
// the original row index so shuffles and subsets can be traced; column 1
// carries the group id.
inline rebalance::EmbeddingDataset grouped_dataset(
    const std::vector<std::vector<std::size_t>>& counts_by_class, std::uint32_t num_spurious) {
    rebalance::EmbeddingDataset ds;
    ds.num_classes = static_cast<std::uint32_t>(counts_by_class.size());
    ds.num_spurious = num_spurious;
    std::size_t n = 0;
    for (const auto& row : counts_by_class) {
        for (std::size_t c : row) n += c;
    }
    ds.features = rebalance::Matrix(n, 2);
    std::size_t i = 0;
    for (std::uint32_t y = 0; y < counts_by_class.size(); ++y) {
        for (std::uint32_t s = 0; s < counts_by_class[y].size(); ++s) {
            for (std::size_t k = 0; k < counts_by_class[y][s]; ++k, ++i) {
                ds.features.at(i, 0) = static_cast<double>(i);
                ds.features.at(i, 1) = static_cast<double>(y * num_spurious + s);
                ds.class_labels.push_back(y);
                if (num_spurious > 0) ds.spurious_labels.push_back(s);
            }
        }
    }
    ds.validate();
    return ds;
}

// Captures one std stream for the lifetime of the guard.
class CaptureStream {
public:
    explicit CaptureStream(std::ostream& stream) : stream_(stream), old_(stream.rdbuf()) {
        stream_.rdbuf(buffer_.rdbuf());
    }
    ~CaptureStream() { stream_.rdbuf(old_); }
    std::string text() const { return buffer_.str(); }

private:
    std::ostream& stream_;
    std::streambuf* old_;
    std::ostringstream buffer_;
};

}  // namespace testutil
