#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "sarmae/tensor.hpp"

namespace sarmae {

// Checkpoint container:
//   magic "SMAECKPT", u32 version,
//   u32 entry count, per entry: u32 name length, name bytes, u32 rank,
//   u64 extents..., u32 dtype (0 = f32 little-endian), u64 byte offset
//   (relative to the start of the data block), then the raw buffers.
// Round-trips bit-exactly.

inline constexpr char kCheckpointMagic[8] = {'S', 'M', 'A', 'E', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& what) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated while reading " + what);
    return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const std::map<std::string, Tensor>& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    os.write(kCheckpointMagic, 8);
    detail::write_pod<std::uint32_t>(os, kCheckpointVersion);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
        for (auto e : t.shape()) detail::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(e));
        detail::write_pod<std::uint32_t>(os, 0);  // dtype f32
        detail::write_pod<std::uint64_t>(os, offset);
        offset += static_cast<std::uint64_t>(t.numel()) * sizeof(float);
    }
    for (const auto& [name, t] : tensors)
        os.write(reinterpret_cast<const char*>(t.raw().data()),
                 static_cast<std::streamsize>(t.raw().size() * sizeof(float)));
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const auto version = detail::read_pod<std::uint32_t>(is, "version");
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const auto count = detail::read_pod<std::uint32_t>(is, "entry count");
    struct Entry {
        std::string name;
        Shape shape;
        std::uint64_t offset;
    };
    std::vector<Entry> entries(count);
    for (auto& e : entries) {
        const auto nlen = detail::read_pod<std::uint32_t>(is, "name length");
        e.name.resize(nlen);
        is.read(e.name.data(), nlen);
        const auto rank = detail::read_pod<std::uint32_t>(is, "rank");
        e.shape.resize(rank);
        for (auto& d : e.shape)
            d = static_cast<std::int64_t>(detail::read_pod<std::uint64_t>(is, "extent"));
        const auto dtype = detail::read_pod<std::uint32_t>(is, "dtype");
        if (dtype != 0)
            throw std::runtime_error("checkpoint: unsupported dtype " + std::to_string(dtype));
        e.offset = detail::read_pod<std::uint64_t>(is, "offset");
        if (!is) throw std::runtime_error("checkpoint: truncated manifest in " + path);
    }
    const std::streampos data_start = is.tellg();
    std::map<std::string, Tensor> out;
    for (const auto& e : entries) {
        const auto n = shape_numel(e.shape);
        std::vector<float> data(static_cast<std::size_t>(n));
        is.seekg(data_start + static_cast<std::streamoff>(e.offset));
        is.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(float)));
        if (!is)
            throw std::runtime_error("checkpoint: truncated data block for tensor '" + e.name +
                                     "' in " + path);
        out.emplace(e.name, Tensor(e.shape, std::move(data)));
    }
    return out;
}

}  // namespace sarmae
