#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "cmtkd/tensor.hpp"

namespace cmtkd {

// Versioned container of named f32/f64 arrays plus the config echo and the
// RNG stream states. Round-trips are bit-exact.
struct CheckpointArray {
    std::string name;
    char dtype = 'd';  // 'f' or 'd'
    std::vector<i64> shape;
    std::vector<double> f64;
    std::vector<float> f32;

    i64 numel() const { return shape_numel(shape); }
};

struct Checkpoint {
    std::string config_echo;
    std::map<std::string, std::string> rng_states;
    std::vector<CheckpointArray> arrays;

    const CheckpointArray* find(const std::string& name) const {
        for (const auto& a : arrays)
            if (a.name == name) return &a;
        return nullptr;
    }
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}
inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}
inline void put_str(std::ostream& os, const std::string& s) {
    put_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string get_str(std::istream& is) {
    const std::uint64_t n = get_u64(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    return s;
}
}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValueError("save_checkpoint: cannot open " + path);
    os.write("CMTK", 4);
    detail::put_u64(os, kCheckpointVersion);
    detail::put_str(os, ck.config_echo);
    detail::put_u64(os, ck.rng_states.size());
    for (const auto& [k, v] : ck.rng_states) {
        detail::put_str(os, k);
        detail::put_str(os, v);
    }
    detail::put_u64(os, ck.arrays.size());
    for (const auto& a : ck.arrays) {
        detail::put_str(os, a.name);
        os.put(a.dtype);
        detail::put_u64(os, a.shape.size());
        for (i64 d : a.shape) detail::put_u64(os, static_cast<std::uint64_t>(d));
        if (a.dtype == 'd')
            os.write(reinterpret_cast<const char*>(a.f64.data()),
                     static_cast<std::streamsize>(a.f64.size() * sizeof(double)));
        else
            os.write(reinterpret_cast<const char*>(a.f32.data()),
                     static_cast<std::streamsize>(a.f32.size() * sizeof(float)));
    }
    if (!os) throw ValueError("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValueError("load_checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "CMTK", 4) != 0) throw ValueError("load_checkpoint: bad magic");
    if (detail::get_u64(is) != kCheckpointVersion) throw ValueError("load_checkpoint: unsupported version");
    Checkpoint ck;
    ck.config_echo = detail::get_str(is);
    const std::uint64_t nrng = detail::get_u64(is);
    for (std::uint64_t i = 0; i < nrng; ++i) {
        std::string k = detail::get_str(is);
        ck.rng_states[k] = detail::get_str(is);
    }
    const std::uint64_t narr = detail::get_u64(is);
    for (std::uint64_t i = 0; i < narr; ++i) {
        CheckpointArray a;
        a.name = detail::get_str(is);
        a.dtype = static_cast<char>(is.get());
        const std::uint64_t nd = detail::get_u64(is);
        for (std::uint64_t d = 0; d < nd; ++d) a.shape.push_back(static_cast<i64>(detail::get_u64(is)));
        const i64 n = a.numel();
        if (a.dtype == 'd') {
            a.f64.resize(static_cast<std::size_t>(n));
            is.read(reinterpret_cast<char*>(a.f64.data()), static_cast<std::streamsize>(n * 8));
        } else if (a.dtype == 'f') {
            a.f32.resize(static_cast<std::size_t>(n));
            is.read(reinterpret_cast<char*>(a.f32.data()), static_cast<std::streamsize>(n * 4));
        } else {
            throw ValueError("load_checkpoint: unknown dtype tag");
        }
        ck.arrays.push_back(std::move(a));
    }
    if (!is) throw ValueError("load_checkpoint: truncated file");
    return ck;
}

template <class T>
CheckpointArray array_from_tensor(const std::string& name, const Tensor<T>& t) {
    CheckpointArray a;
    a.name = name;
    a.shape = t.shape();
    if constexpr (sizeof(T) == 8) {
        a.dtype = 'd';
        a.f64.assign(t.values().begin(), t.values().end());
    } else {
        a.dtype = 'f';
        a.f32.assign(t.values().begin(), t.values().end());
    }
    return a;
}

template <class T>
void tensor_from_array(const CheckpointArray& a, Tensor<T>& t) {
    if (a.shape != t.shape()) throw ShapeError("checkpoint: shape mismatch for " + a.name);
    if (a.dtype == 'd') {
        if (a.f64.size() != t.values().size()) throw ShapeError("checkpoint: size mismatch for " + a.name);
        for (std::size_t i = 0; i < a.f64.size(); ++i) t.values()[i] = static_cast<T>(a.f64[i]);
    } else {
        if (a.f32.size() != t.values().size()) throw ShapeError("checkpoint: size mismatch for " + a.name);
        for (std::size_t i = 0; i < a.f32.size(); ++i) t.values()[i] = static_cast<T>(a.f32[i]);
    }
}

}  // namespace cmtkd
