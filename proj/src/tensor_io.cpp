#include "refkv/tensor_io.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace refkv {

namespace {

void put_u64_le(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (unsigned char)((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t get_u64_le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
    return v;
}

bool is_little_endian() {
    uint16_t x = 1;
    return *reinterpret_cast<unsigned char*>(&x) == 1;
}

}  // namespace

void save_rkvt(const Tensor& t, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os.write("RKVT", 4);
    unsigned char hdr[4] = {1 /*version*/, 0 /*dtype f32*/, (unsigned char)t.rank(), 0};
    os.write(reinterpret_cast<const char*>(hdr), 4);
    for (int i = 0; i < t.rank(); ++i) put_u64_le(os, uint64_t(t.dim(i)));
    if (is_little_endian()) {
        os.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.numel() * 4));
    } else {
        for (int64_t i = 0; i < t.numel(); ++i) {
            uint32_t u;
            std::memcpy(&u, t.data() + i, 4);
            unsigned char b[4] = {(unsigned char)(u & 0xff), (unsigned char)((u >> 8) & 0xff),
                                  (unsigned char)((u >> 16) & 0xff),
                                  (unsigned char)((u >> 24) & 0xff)};
            os.write(reinterpret_cast<const char*>(b), 4);
        }
    }
    if (!os) throw std::runtime_error("short write to " + path);
}

Tensor load_rkvt(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "RKVT", 4) != 0)
        throw std::runtime_error(path + ": not an RKVT file (bad magic)");
    unsigned char hdr[4];
    is.read(reinterpret_cast<char*>(hdr), 4);
    if (!is) throw std::runtime_error(path + ": truncated header");
    if (hdr[0] != 1) throw std::runtime_error(path + ": unsupported RKVT version");
    if (hdr[1] != 0) throw std::runtime_error(path + ": unsupported dtype");
    int rank = hdr[2];
    std::vector<int64_t> shape(static_cast<size_t>(rank), 0);
    for (int i = 0; i < rank; ++i) shape[size_t(i)] = int64_t(get_u64_le(is));
    if (!is) throw std::runtime_error(path + ": truncated extents");
    Tensor t = Tensor::zeros(shape);
    if (is_little_endian()) {
        is.read(reinterpret_cast<char*>(t.data()), std::streamsize(t.numel() * 4));
    } else {
        for (int64_t i = 0; i < t.numel(); ++i) {
            unsigned char b[4];
            is.read(reinterpret_cast<char*>(b), 4);
            uint32_t u = uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
                         (uint32_t(b[3]) << 24);
            std::memcpy(t.data() + i, &u, 4);
        }
    }
    if (!is) throw std::runtime_error(path + ": truncated payload");
    return t;
}

}  // namespace refkv
