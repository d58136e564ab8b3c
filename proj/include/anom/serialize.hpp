#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "anom/tensor.hpp"

namespace anom {

struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error("io error: " + m) {}
};

// RNTF: "RNTF", version 0x01, u8 rank, rank x u32 LE extents, row-major f32 LE.
namespace rntf {

inline void write_u32le(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("truncated u32");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void write_f32le(std::ostream& os, float f) {
    uint32_t v;
    std::memcpy(&v, &f, 4);
    write_u32le(os, v);
}

inline float read_f32le(std::istream& is) {
    uint32_t v = read_u32le(is);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

template <class T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
    os.write("RNTF", 4);
    os.put(0x01);
    os.put(static_cast<char>(t.shape().size()));
    for (int e : t.shape()) write_u32le(os, static_cast<uint32_t>(e));
    for (size_t i = 0; i < t.numel(); ++i) write_f32le(os, static_cast<float>(t[i]));
}

template <class T>
Tensor<T> read_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "RNTF", 4) != 0) throw IoError("bad tensor file magic");
    int version = is.get();
    if (version != 0x01) throw IoError("unsupported tensor file version");
    int rank = is.get();
    if (rank < 0) throw IoError("truncated tensor header");
    Shape shape(rank);
    for (int i = 0; i < rank; ++i) shape[i] = static_cast<int>(read_u32le(is));
    size_t n = shape_numel(shape);
    std::vector<T> data(n);
    for (size_t i = 0; i < n; ++i) data[i] = static_cast<T>(read_f32le(is));
    return Tensor<T>::from_data(shape, std::move(data));
}

template <class T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    write_tensor(os, t);
}

template <class T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    return read_tensor<T>(is);
}

}  // namespace rntf

// Named parameter map. Ordered so serialization is canonical.
template <class T>
struct ParamSet {
    std::map<std::string, Tensor<T>> params;

    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        auto [it, inserted] = params.emplace(name, std::move(t));
        if (!inserted) throw ContractError("duplicate parameter name: " + name);
        it->second.set_requires_grad(true);
        return it->second;
    }

    Tensor<T>& at(const std::string& name) {
        auto it = params.find(name);
        if (it == params.end()) throw ContractError("unknown parameter: " + name);
        return it->second;
    }

    void zero_grad() {
        for (auto& [k, t] : params) t.zero_grad();
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw IoError("cannot open " + path.string() + " for writing");
        rntf::write_u32le(os, static_cast<uint32_t>(params.size()));
        for (const auto& [name, t] : params) {
            rntf::write_u32le(os, static_cast<uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            rntf::write_tensor(os, t);
        }
    }

    static ParamSet load(const std::filesystem::path& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw IoError("cannot open " + path.string());
        ParamSet ps;
        uint32_t count = rntf::read_u32le(is);
        for (uint32_t i = 0; i < count; ++i) {
            uint32_t len = rntf::read_u32le(is);
            std::string name(len, '\0');
            is.read(name.data(), len);
            if (!is) throw IoError("truncated parameter name");
            ps.add(name, rntf::read_tensor<T>(is));
        }
        return ps;
    }

    // Copies values from src into matching parameters (shapes must agree).
    void load_values_from(const ParamSet& src) {
        for (auto& [name, t] : params) {
            auto it = src.params.find(name);
            if (it == src.params.end()) throw ContractError("checkpoint missing parameter: " + name);
            if (it->second.shape() != t.shape()) throw ShapeError("checkpoint shape mismatch for " + name);
            t.mutable_data() = it->second.data();
        }
    }
};

}  // namespace anom
