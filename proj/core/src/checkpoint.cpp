#include "prefalign/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace prefalign {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'R', 'L'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& is, const std::string& path) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
        throw std::runtime_error("checkpoint '" + path + "' is truncated");
    }
    return v;
}

std::uint64_t read_u64(std::istream& is, const std::string& path) {
    std::uint64_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
        throw std::runtime_error("checkpoint '" + path + "' is truncated");
    }
    return v;
}

}  // namespace

void write_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open '" + tmp + "' for writing");
        os.write(kMagic, 4);
        write_u32(os, kVersion);
        write_u32(os, static_cast<std::uint32_t>(tensors.size()));
        for (const auto& t : tensors) {
            std::size_t count = 1;
            for (auto d : t.shape) count *= static_cast<std::size_t>(d);
            if (count != t.data.size()) {
                throw std::invalid_argument("tensor '" + t.name + "' shape/data mismatch");
            }
            write_u32(os, static_cast<std::uint32_t>(t.name.size()));
            os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
            write_u32(os, static_cast<std::uint32_t>(t.shape.size()));
            for (auto d : t.shape) write_u64(os, static_cast<std::uint64_t>(d));
            os.write(reinterpret_cast<const char*>(t.data.data()),
                     static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        }
        if (!os) throw std::runtime_error("write to '" + tmp + "' failed");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw std::runtime_error("rename '" + tmp + "' -> '" + path + "' failed");
    }
}

std::vector<NamedTensor> read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint '" + path + "'");
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("'" + path + "' is not a checkpoint (bad magic)");
    }
    const std::uint32_t version = read_u32(is, path);
    if (version != kVersion) {
        throw std::runtime_error("checkpoint '" + path + "' has unsupported version " +
                                 std::to_string(version));
    }
    const std::uint32_t count = read_u32(is, path);
    std::vector<NamedTensor> tensors;
    tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        const std::uint32_t name_len = read_u32(is, path);
        t.name.resize(name_len);
        if (!is.read(t.name.data(), name_len)) {
            throw std::runtime_error("checkpoint '" + path + "' is truncated");
        }
        const std::uint32_t rank = read_u32(is, path);
        std::size_t n = 1;
        t.shape.resize(rank);
        for (std::uint32_t d = 0; d < rank; ++d) {
            t.shape[d] = static_cast<std::int64_t>(read_u64(is, path));
            n *= static_cast<std::size_t>(t.shape[d]);
        }
        t.data.resize(n);
        if (!is.read(reinterpret_cast<char*>(t.data.data()),
                     static_cast<std::streamsize>(n * sizeof(double)))) {
            throw std::runtime_error("checkpoint '" + path + "' is truncated");
        }
        tensors.push_back(std::move(t));
    }
    return tensors;
}

double u64_as_f64(std::uint64_t v) { return std::bit_cast<double>(v); }
std::uint64_t f64_as_u64(double v) { return std::bit_cast<std::uint64_t>(v); }

}  // namespace prefalign
