#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "cmtkd/rng.hpp"
#include "cmtkd/tensor.hpp"

namespace cmtkd {

// Binary image set: magic "CMTD", version, class count, image count, H, W, C
// (little-endian u32), then count*C*H*W pixel bytes (per image, channel
// major) and count u16 labels.
struct Dataset {
    std::uint32_t classes = 0;
    std::uint32_t h = 0, w = 0, c = 0;
    std::vector<std::uint8_t> pixels;  // [count][C][H][W]
    std::vector<std::uint16_t> labels;

    std::size_t count() const { return labels.size(); }
    std::size_t image_size() const { return static_cast<std::size_t>(c) * h * w; }
    const std::uint8_t* image(std::size_t i) const { return pixels.data() + i * image_size(); }
};

namespace detail {
inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
}  // namespace detail

inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValueError("save_dataset: cannot open " + path);
    os.write("CMTD", 4);
    detail::put_u32(os, kDatasetVersion);
    detail::put_u32(os, ds.classes);
    detail::put_u32(os, static_cast<std::uint32_t>(ds.count()));
    detail::put_u32(os, ds.h);
    detail::put_u32(os, ds.w);
    detail::put_u32(os, ds.c);
    os.write(reinterpret_cast<const char*>(ds.pixels.data()), static_cast<std::streamsize>(ds.pixels.size()));
    for (std::uint16_t l : ds.labels) {
        unsigned char b[2] = {static_cast<unsigned char>(l), static_cast<unsigned char>(l >> 8)};
        os.write(reinterpret_cast<const char*>(b), 2);
    }
    if (!os) throw ValueError("save_dataset: write failed for " + path);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValueError("load_dataset: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "CMTD", 4) != 0) throw ValueError("load_dataset: bad magic in " + path);
    const std::uint32_t version = detail::get_u32(is);
    if (version != kDatasetVersion) throw ValueError("load_dataset: unsupported version");
    Dataset ds;
    ds.classes = detail::get_u32(is);
    const std::uint32_t count = detail::get_u32(is);
    ds.h = detail::get_u32(is);
    ds.w = detail::get_u32(is);
    ds.c = detail::get_u32(is);
    if (!is || ds.classes == 0 || ds.h == 0 || ds.w == 0 || ds.c == 0)
        throw ValueError("load_dataset: corrupt header in " + path);
    ds.pixels.resize(static_cast<std::size_t>(count) * ds.image_size());
    is.read(reinterpret_cast<char*>(ds.pixels.data()), static_cast<std::streamsize>(ds.pixels.size()));
    ds.labels.resize(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        unsigned char b[2];
        is.read(reinterpret_cast<char*>(b), 2);
        ds.labels[i] = static_cast<std::uint16_t>(b[0] | (b[1] << 8));
    }
    if (!is) throw ValueError("load_dataset: truncated file " + path);
    for (std::uint16_t l : ds.labels)
        if (l >= ds.classes) throw ValueError("load_dataset: label out of range");
    return ds;
}

// ---------------------------------------------------------------------------
// Synthetic 10-class pattern generator. Classes come in confusable pairs
// that differ only in fine detail (stripe period, checker cell, disk vs
// ring, plus vs X), so telling them apart under noise takes feature
// precision. Every class is closed under horizontal flips, keeping the flip
// augmentation label preserving.
// ---------------------------------------------------------------------------
namespace patterns {

inline void draw(int cls, int h, int w, Rng& rng, std::vector<double>& img) {
    img.assign(static_cast<std::size_t>(h) * w, 0.0);
    auto at = [&](int y, int x) -> double& { return img[static_cast<std::size_t>(y) * w + x]; };
    const double amp = rng.uniform(0.55, 1.0);
    const int cy = h / 2 + static_cast<int>(rng.randint(-2, 2));
    const int cx = w / 2 + static_cast<int>(rng.randint(-2, 2));
    auto stripes = [&](bool horizontal, int period) {
        const int ph = static_cast<int>(rng.randint(0, period - 1));
        const int on = (period + 1) / 2;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (((horizontal ? y : x) + ph) % period < on) at(y, x) = amp;
    };
    auto checker = [&](int cell) {
        const int ph = static_cast<int>(rng.randint(0, 2 * cell - 1));
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if ((((y + ph) / cell) + ((x + ph) / cell)) % 2 == 0) at(y, x) = amp;
    };
    switch (cls) {
        case 0: stripes(true, 3); break;
        case 1: stripes(true, 5); break;
        case 2: stripes(false, 3); break;
        case 3: stripes(false, 5); break;
        case 4: checker(2); break;
        case 5: checker(3); break;
        case 6: {  // filled disk
            const double r = rng.uniform(3.5, 5.0);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) at(y, x) = amp;
            break;
        }
        case 7: {  // ring of similar radius
            const double ro = rng.uniform(4.0, 5.5), ri = ro - rng.uniform(1.6, 2.2);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                    if (d2 <= ro * ro && d2 >= ri * ri) at(y, x) = amp;
                }
            break;
        }
        case 8: {  // plus cross
            const int arm = static_cast<int>(rng.randint(1, 2));
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    if (std::abs(y - cy) <= arm || std::abs(x - cx) <= arm) at(y, x) = amp;
            break;
        }
        default: {  // X cross
            const int arm = static_cast<int>(rng.randint(1, 2));
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    if (std::abs((y - cy) - (x - cx)) <= arm || std::abs((y - cy) + (x - cx)) <= arm)
                        at(y, x) = amp;
            break;
        }
    }
}

}  // namespace patterns

// Pixel noise keeps low bit-width models visibly below the full-precision
// ceiling; label noise (a fraction of labels re-drawn uniformly) rewards
// training signals that pool evidence across networks instead of memorizing.
inline Dataset make_synthetic(int classes, int per_class, int h, int w, int channels,
                              std::uint64_t seed, double noise = 0.22, double label_noise = 0.0) {
    if (classes < 2 || classes > 10) throw ValueError("make_synthetic: classes must be in [2,10]");
    if (per_class < 1) throw ValueError("make_synthetic: per_class must be >= 1");
    if (label_noise < 0.0 || label_noise >= 1.0) throw ValueError("make_synthetic: label_noise in [0,1)");
    Rng rng = Rng::substream(seed, "datagen");
    Dataset ds;
    ds.classes = static_cast<std::uint32_t>(classes);
    ds.h = static_cast<std::uint32_t>(h);
    ds.w = static_cast<std::uint32_t>(w);
    ds.c = static_cast<std::uint32_t>(channels);

    std::vector<int> order;
    for (int cls = 0; cls < classes; ++cls)
        for (int i = 0; i < per_class; ++i) order.push_back(cls);
    rng.shuffle(order);

    std::vector<double> img;
    for (int cls : order) {
        patterns::draw(cls, h, w, rng, img);
        const double bg = rng.uniform(0.05, 0.2);
        for (int ch = 0; ch < channels; ++ch) {
            const double gain = channels == 1 ? 1.0 : rng.uniform(0.8, 1.0);
            for (std::size_t e = 0; e < img.size(); ++e) {
                double v = bg + gain * img[e] + rng.normal(0.0, noise);
                v = std::min(1.0, std::max(0.0, v));
                ds.pixels.push_back(static_cast<std::uint8_t>(v * 255.0 + 0.5));
            }
        }
        ds.labels.push_back(static_cast<std::uint16_t>(cls));
    }
    // Corrupt labels only in the leading train portion of the file; the
    // trailing test split keeps clean labels.
    if (label_noise > 0.0) {
        const std::size_t cutoff = static_cast<std::size_t>(static_cast<double>(ds.count()) * 0.8);
        for (std::size_t i = 0; i < cutoff; ++i)
            if (rng.bernoulli(label_noise))
                ds.labels[i] = static_cast<std::uint16_t>(rng.randint(0, classes - 1));
    }
    return ds;
}

// Deterministic 80/20 split by file position (generation order is already
// shuffled, so both splits stay close to class balanced).
struct SplitIndices {
    std::vector<std::size_t> train, test;
};

inline SplitIndices split_dataset(const Dataset& ds, double train_fraction = 0.8) {
    SplitIndices out;
    const std::size_t cutoff = static_cast<std::size_t>(static_cast<double>(ds.count()) * train_fraction);
    for (std::size_t i = 0; i < ds.count(); ++i) (i < cutoff ? out.train : out.test).push_back(i);
    return out;
}

// Per-channel mean/std of the train split (pixels scaled to [0,1]).
struct Normalizer {
    std::vector<double> mean, stddev;
};

inline Normalizer compute_normalizer(const Dataset& ds, const std::vector<std::size_t>& train_idx) {
    if (train_idx.empty()) throw ValueError("compute_normalizer: empty train split");
    Normalizer nm;
    nm.mean.assign(ds.c, 0.0);
    nm.stddev.assign(ds.c, 0.0);
    const std::size_t plane = static_cast<std::size_t>(ds.h) * ds.w;
    double cnt = static_cast<double>(train_idx.size() * plane);
    for (std::size_t i : train_idx) {
        const std::uint8_t* img = ds.image(i);
        for (std::uint32_t ch = 0; ch < ds.c; ++ch)
            for (std::size_t e = 0; e < plane; ++e)
                nm.mean[ch] += img[ch * plane + e] / 255.0;
    }
    for (auto& m : nm.mean) m /= cnt;
    for (std::size_t i : train_idx) {
        const std::uint8_t* img = ds.image(i);
        for (std::uint32_t ch = 0; ch < ds.c; ++ch)
            for (std::size_t e = 0; e < plane; ++e) {
                const double d = img[ch * plane + e] / 255.0 - nm.mean[ch];
                nm.stddev[ch] += d * d;
            }
    }
    for (auto& s : nm.stddev) s = std::max(std::sqrt(s / cnt), 1e-8);
    return nm;
}

// Assembles a normalized [B,C,H,W] batch. Train-time augmentation is a
// horizontal flip (p = 0.5) and a random crop from a 2-pixel zero padding.
template <class T>
Tensor<T> assemble_batch(const Dataset& ds, const Normalizer& nm, const std::vector<std::size_t>& indices,
                         bool augment, Rng* aug_rng) {
    const i64 B = static_cast<i64>(indices.size());
    const i64 C = ds.c, H = ds.h, W = ds.w;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    Tensor<T> batch({B, C, H, W});
    T* out = batch.values().data();
    std::vector<double> tmp(plane);
    constexpr int pad = 2;
    for (i64 b = 0; b < B; ++b) {
        const std::uint8_t* img = ds.image(indices[static_cast<std::size_t>(b)]);
        bool flip = false;
        int dy = 0, dx = 0;
        if (augment) {
            flip = aug_rng->bernoulli(0.5);
            dy = static_cast<int>(aug_rng->randint(-pad, pad));
            dx = static_cast<int>(aug_rng->randint(-pad, pad));
        }
        for (i64 ch = 0; ch < C; ++ch) {
            const std::uint8_t* src = img + static_cast<std::size_t>(ch) * plane;
            for (i64 y = 0; y < H; ++y)
                for (i64 x = 0; x < W; ++x) {
                    const i64 sy = y + dy;
                    i64 sx = flip ? (W - 1 - x) : x;
                    sx += dx;
                    double v;
                    if (sy < 0 || sy >= H || sx < 0 || sx >= W) {
                        v = nm.mean[static_cast<std::size_t>(ch)];  // pad with the channel mean
                    } else {
                        v = src[static_cast<std::size_t>(sy) * W + sx] / 255.0;
                    }
                    out[((b * C + ch) * H + y) * W + x] =
                        T((v - nm.mean[static_cast<std::size_t>(ch)]) / nm.stddev[static_cast<std::size_t>(ch)]);
                }
        }
    }
    return batch;
}

inline std::vector<int> batch_labels(const Dataset& ds, const std::vector<std::size_t>& indices) {
    std::vector<int> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(static_cast<int>(ds.labels[i]));
    return out;
}

}  // namespace cmtkd
