#include "bf/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace bf {

namespace {

constexpr char kMagic[5] = {'B', 'F', 'C', 'K', '1'};

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("checkpoint: truncated file");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> params) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("checkpoint: cannot open " + tmp + " for writing");
        os.write(kMagic, sizeof(kMagic));
        put_u32(os, static_cast<uint32_t>(params.size()));
        for (const auto& p : params) {
            put_u32(os, static_cast<uint32_t>(p.name.size()));
            os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
            const auto& shape = p.tensor.shape();
            put_u32(os, static_cast<uint32_t>(shape.size()));
            for (int d : shape) put_u32(os, static_cast<uint32_t>(d));
            static_assert(sizeof(float) == 4);
            os.write(reinterpret_cast<const char*>(p.tensor.data().data()),
                     static_cast<std::streamsize>(p.tensor.size() * sizeof(float)));
        }
        if (!os) throw IoError("checkpoint: write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open " + path.string());
    char magic[5];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw IoError("checkpoint: bad magic in " + path.string());
    }
    const uint32_t count = get_u32(is);
    std::vector<NamedTensor> out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = get_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const uint32_t rank = get_u32(is);
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<int>(get_u32(is));
        const auto n = numel(shape);
        std::vector<float> data(static_cast<size_t>(n));
        is.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(n * sizeof(float)));
        if (!is) throw IoError("checkpoint: truncated tensor data in " + path.string());
        out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
    }
    return out;
}

}  // namespace bf
