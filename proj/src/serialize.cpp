#include "hgpe/serialize.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace hgpe {

namespace {

constexpr char kMagic[4] = {'H', 'G', 'P', 'E'};

void put_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

void put_f32(std::ostream& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

[[noreturn]] void truncated(const std::string& path) {
    throw std::runtime_error("weights: truncated or corrupt file " + path);
}

uint32_t get_u32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) truncated(path);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

uint64_t get_u64(std::istream& in, const std::string& path) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) truncated(path);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void save_weights(const std::string& path, const ParamStore& store, WeightDtype dtype) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("weights: cannot write " + path);
    out.write(kMagic, 4);
    put_u32(out, kWeightFormatVersion);
    put_u32(out, static_cast<uint32_t>(store.entries.size()));
    for (const auto& e : store.entries) {
        put_u32(out, static_cast<uint32_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        const Tensor& t = *e.tensor;
        put_u32(out, static_cast<uint32_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i) put_u64(out, static_cast<uint64_t>(t.dim(i)));
        out.put(static_cast<char>(dtype));
        if (dtype == WeightDtype::F64) {
            for (int64_t i = 0; i < t.numel(); ++i) put_f64(out, t[i]);
        } else {
            for (int64_t i = 0; i < t.numel(); ++i) put_f32(out, static_cast<float>(t[i]));
        }
    }
    if (!out) throw std::runtime_error("weights: write failed for " + path);
}

void load_weights(const std::string& path, ParamStore& store) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("weights: cannot open " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("weights: bad magic in " + path);
    const uint32_t version = get_u32(in, path);
    if (version != kWeightFormatVersion)
        throw std::runtime_error("weights: unsupported version " + std::to_string(version));
    const uint32_t count = get_u32(in, path);
    if (count != store.entries.size())
        throw std::runtime_error("weights: file has " + std::to_string(count) +
                                 " tensors, model expects " + std::to_string(store.entries.size()));
    for (auto& e : store.entries) {
        const uint32_t name_len = get_u32(in, path);
        std::string name(name_len, '\0');
        if (!in.read(name.data(), name_len)) truncated(path);
        if (name != e.name)
            throw std::runtime_error("weights: tensor name mismatch, file has '" + name +
                                     "', model expects '" + e.name + "'");
        const uint32_t rank = get_u32(in, path);
        std::vector<int64_t> dims(rank);
        for (uint32_t i = 0; i < rank; ++i) dims[i] = static_cast<int64_t>(get_u64(in, path));
        if (dims != e.tensor->dims())
            throw std::runtime_error("weights: shape mismatch for '" + e.name + "', file has " +
                                     dims_str(dims) + ", model expects " + e.tensor->shape_str());
        const int tag = in.get();
        if (tag != static_cast<int>(WeightDtype::F64) && tag != static_cast<int>(WeightDtype::F32))
            throw std::runtime_error("weights: unknown dtype tag for '" + e.name + "'");
        Tensor& t = *e.tensor;
        if (tag == static_cast<int>(WeightDtype::F64)) {
            for (int64_t i = 0; i < t.numel(); ++i) {
                const uint64_t bits = get_u64(in, path);
                double v;
                std::memcpy(&v, &bits, 8);
                t[i] = v;
            }
        } else {
            for (int64_t i = 0; i < t.numel(); ++i) {
                const uint32_t bits = get_u32(in, path);
                float v;
                std::memcpy(&v, &bits, 4);
                t[i] = static_cast<double>(v);
            }
        }
    }
}

}  // namespace hgpe
