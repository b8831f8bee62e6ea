#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "error.hpp"

namespace critlayers::fsutil {

namespace fs = std::filesystem;

// Writes through a sibling temp file and renames it into place, so readers never see a partial file.
inline void atomic_write(const fs::path & path, std::string_view bytes) {
    std::error_code ec;
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path(), ec);
        require(!ec, ErrorCode::io, "cannot create directory " + path.parent_path().string() + ": " + ec.message());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(out), ErrorCode::io, "cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        require(static_cast<bool>(out), ErrorCode::io, "write failed for " + tmp.string());
    }
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        throw Error(ErrorCode::io, "cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
    }
}

inline std::string read_file(const fs::path & path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::io, "cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    require(!in.bad(), ErrorCode::io, "read failed for " + path.string());
    return bytes;
}

// Little-endian scalar packing. The on-disk formats are LE regardless of host order.
template <typename T>
void put_le(std::string & out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(std::begin(raw), std::end(raw));
    }
    out.append(reinterpret_cast<const char *>(raw), sizeof(T));
}

template <typename T>
T get_le(const char * src) {
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, src, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(std::begin(raw), std::end(raw));
    }
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
}

// 64-bit FNV-1a, used for provenance hashes in manifests and run reports.
class Fnv1a {
public:
    void update(std::string_view bytes) {
        for (unsigned char c : bytes) {
            state_ ^= c;
            state_ *= 0x100000001b3ULL;
        }
    }
    std::uint64_t value() const { return state_; }
    std::string hex() const {
        static constexpr char digits[] = "0123456789abcdef";
        std::string s(16, '0');
        std::uint64_t v = state_;
        for (int i = 15; i >= 0; --i) {
            s[static_cast<std::size_t>(i)] = digits[v & 0xf];
            v >>= 4;
        }
        return s;
    }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string file_hash(const fs::path & path) {
    Fnv1a h;
    if (fs::is_directory(path)) {
        std::vector<fs::path> files;
        for (const auto & entry : fs::recursive_directory_iterator(path)) {
            if (entry.is_regular_file()) {
                files.push_back(entry.path());
            }
        }
        std::sort(files.begin(), files.end());
        for (const auto & f : files) {
            h.update(fs::relative(f, path).generic_string());
            h.update(read_file(f));
        }
    } else {
        h.update(read_file(path));
    }
    return h.hex();
}

} // namespace critlayers::fsutil
