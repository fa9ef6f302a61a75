// SPDX-License-Identifier: Apache-2.0

#pragma once

// IDX files (the MNIST distribution format; big-endian, optionally gzipped)
// and a synthetic Gaussian-blobs generator.

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "error.hpp"
#include "tensor.hpp"

namespace lbt {

struct Dataset {
    RealTensor images; // N x C x H x W
    std::vector<int> labels;
    int num_classes = 0;

    std::size_t size() const { return labels.size(); }
    Shape sample_shape() const { return Shape(images.shape.begin() + 1, images.shape.end()); }

    void validate() const {
        if (images.shape.size() != 4 || images.shape[0] != labels.size())
            throw Error("dataset has " + std::to_string(labels.size()) + " labels for images " + shape_str(images.shape));
        for (int l : labels)
            if (l < 0 || l >= num_classes) throw Error("label " + std::to_string(l) + " outside 0.." + std::to_string(num_classes - 1));
    }

    /// Rows `index` gathered into a batch.
    RealTensor batch_images(std::span<const std::size_t> index) const {
        Shape s = images.shape;
        s[0] = index.size();
        const std::size_t stride = shape_size(sample_shape());
        RealTensor out(s);
        for (std::size_t i = 0; i < index.size(); ++i)
            std::copy_n(images.values.begin() + static_cast<std::ptrdiff_t>(index[i] * stride), stride,
                        out.values.begin() + static_cast<std::ptrdiff_t>(i * stride));
        return out;
    }
    std::vector<int> batch_labels(std::span<const std::size_t> index) const {
        std::vector<int> out(index.size());
        for (std::size_t i = 0; i < index.size(); ++i) out[i] = labels[index[i]];
        return out;
    }

    /// First `n` samples (all of them when n is 0 or larger than the set).
    Dataset head(std::size_t n) const {
        if (n == 0 || n >= size()) return *this;
        Dataset d;
        d.num_classes = num_classes;
        d.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
        Shape s = images.shape;
        s[0] = n;
        const std::size_t stride = shape_size(sample_shape());
        d.images = RealTensor(s, std::vector<double>(images.values.begin(), images.values.begin() + static_cast<std::ptrdiff_t>(n * stride)));
        return d;
    }
};

// ---------------------------------------------------------------- raw bytes

inline bool has_gz_suffix(const std::filesystem::path& p) { return p.extension() == ".gz"; }

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::vector<std::uint8_t> bytes;
    if (has_gz_suffix(path)) {
        gzFile f = gzopen(path.c_str(), "rb");
        if (!f) throw Error("cannot open " + path.string());
        std::uint8_t buf[1 << 16];
        int got = 0;
        while ((got = gzread(f, buf, sizeof buf)) > 0) bytes.insert(bytes.end(), buf, buf + got);
        int errnum = 0;
        const char* msg = gzerror(f, &errnum);
        const std::string err = errnum < 0 && errnum != Z_BUF_ERROR ? msg : "";
        gzclose(f);
        if (got < 0 || !err.empty()) throw Error("gzip error in " + path.string() + ": " + err);
        return bytes;
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    if (has_gz_suffix(path)) {
        gzFile f = gzopen(path.c_str(), "wb");
        if (!f) throw Error("cannot write " + path.string());
        const bool ok = bytes.empty() || gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size())) == static_cast<int>(bytes.size());
        gzclose(f);
        if (!ok) throw Error("gzip write failed for " + path.string());
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + path.string());
}

// ---------------------------------------------------------------- IDX

enum class IdxType : std::uint8_t { u8 = 0x08, f32 = 0x0D, f64 = 0x0E };

struct IdxArray {
    IdxType type = IdxType::u8;
    std::vector<std::uint32_t> dims;
    std::vector<double> values; // raw element values, not rescaled
};

namespace detail {

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off) {
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) | b[off + 3];
}

inline void need(const std::vector<std::uint8_t>& b, std::size_t off, std::size_t n, const std::string& path) {
    if (b.size() < off + n)
        throw Error(path + ": truncated file at offset " + std::to_string(off) + " (needed " + std::to_string(n) + " bytes, file has " +
                    std::to_string(b.size()) + ")");
}

inline std::string hex32(std::uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", v);
    return buf;
}

inline void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

} // namespace detail

/// Parse an IDX byte stream; `expected_magics` lists the accepted magic words.
inline IdxArray parse_idx(const std::vector<std::uint8_t>& b, std::span<const std::uint32_t> expected_magics, const std::string& path) {
    detail::need(b, 0, 4, path);
    const std::uint32_t magic = detail::read_be32(b, 0);
    bool ok = false;
    for (auto m : expected_magics) ok = ok || m == magic;
    if (!ok) {
        std::string want;
        for (auto m : expected_magics) want += (want.empty() ? "" : " or ") + detail::hex32(m);
        throw Error(path + ": bad magic " + detail::hex32(magic) + " at offset 0 (expected " + want + ")");
    }
    IdxArray a;
    a.type = static_cast<IdxType>((magic >> 8) & 0xff);
    const std::size_t rank = magic & 0xff;
    detail::need(b, 4, 4 * rank, path);
    std::uint64_t count = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        const std::uint32_t d = detail::read_be32(b, 4 + 4 * i);
        a.dims.push_back(d);
        count *= d;
        if (count > (std::uint64_t{1} << 36)) throw Error(path + ": dimension overflow at offset " + std::to_string(4 + 4 * i));
    }
    const std::size_t width = a.type == IdxType::u8 ? 1 : a.type == IdxType::f32 ? 4 : 8;
    const std::size_t data_off = 4 + 4 * rank;
    detail::need(b, data_off, static_cast<std::size_t>(count) * width, path);
    a.values.resize(static_cast<std::size_t>(count));
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        const std::size_t off = data_off + i * width;
        switch (a.type) {
        case IdxType::u8: a.values[i] = b[off]; break;
        case IdxType::f32: a.values[i] = std::bit_cast<float>(detail::read_be32(b, off)); break;
        case IdxType::f64: {
            const std::uint64_t bits = (std::uint64_t{detail::read_be32(b, off)} << 32) | detail::read_be32(b, off + 4);
            a.values[i] = std::bit_cast<double>(bits);
            break;
        }
        }
    }
    return a;
}

inline std::vector<std::uint8_t> encode_idx(const IdxArray& a) {
    std::vector<std::uint8_t> b;
    detail::put_be32(b, (static_cast<std::uint32_t>(a.type) << 8) | static_cast<std::uint32_t>(a.dims.size()));
    std::uint64_t count = 1;
    for (auto d : a.dims) {
        detail::put_be32(b, d);
        count *= d;
    }
    if (count != a.values.size()) throw Error("idx: value count does not match dims");
    for (double v : a.values) {
        switch (a.type) {
        case IdxType::u8:
            if (v < 0 || v > 255 || v != std::floor(v)) throw Error("idx: value does not fit an unsigned byte");
            b.push_back(static_cast<std::uint8_t>(v));
            break;
        case IdxType::f32: detail::put_be32(b, std::bit_cast<std::uint32_t>(static_cast<float>(v))); break;
        case IdxType::f64: {
            const auto bits = std::bit_cast<std::uint64_t>(v);
            detail::put_be32(b, static_cast<std::uint32_t>(bits >> 32));
            detail::put_be32(b, static_cast<std::uint32_t>(bits));
            break;
        }
        }
    }
    return b;
}

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;
inline constexpr std::uint32_t kIdxFeaturesMagic = 0x00000E02; // N x D doubles

/// Images as N x C x H x W in [0, 1] for unsigned bytes (scaled by 1/255).
/// Also accepts N x D double features, returned as N x 1 x 1 x D unscaled.
inline RealTensor load_idx_images(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    const std::uint32_t magics[] = {kIdxImagesMagic, kIdxFeaturesMagic};
    IdxArray a = parse_idx(bytes, magics, path.string());
    if (a.type == IdxType::u8) {
        for (auto& v : a.values) v /= 255.0;
        return RealTensor({a.dims[0], 1, a.dims[1], a.dims[2]}, std::move(a.values));
    }
    return RealTensor({a.dims[0], 1, 1, a.dims[1]}, std::move(a.values));
}

inline std::vector<int> load_idx_labels(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    const std::uint32_t magics[] = {kIdxLabelsMagic};
    const IdxArray a = parse_idx(bytes, magics, path.string());
    return std::vector<int>(a.values.begin(), a.values.end());
}

inline void write_idx_labels(const std::filesystem::path& path, const std::vector<int>& labels) {
    IdxArray a{IdxType::u8, {static_cast<std::uint32_t>(labels.size())}, std::vector<double>(labels.begin(), labels.end())};
    write_file_bytes(path, encode_idx(a));
}

/// Unsigned-byte N x H x W images; `pixels` are the raw 0..255 bytes.
inline void write_idx_images_u8(const std::filesystem::path& path, std::uint32_t n, std::uint32_t h, std::uint32_t w,
                                const std::vector<std::uint8_t>& pixels) {
    IdxArray a{IdxType::u8, {n, h, w}, std::vector<double>(pixels.begin(), pixels.end())};
    write_file_bytes(path, encode_idx(a));
}

/// Feature vectors (N x 1 x 1 x D) as N x D doubles.
inline void write_idx_features(const std::filesystem::path& path, const RealTensor& images) {
    const std::size_t n = images.shape.at(0);
    IdxArray a{IdxType::f64, {static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(images.size() / std::max<std::size_t>(n, 1))},
               images.values};
    write_file_bytes(path, encode_idx(a));
}

/// Labels file next to an images file: "...images-idx3..." -> "...labels-idx1...".
inline std::filesystem::path sibling_labels_path(const std::filesystem::path& images) {
    std::string name = images.filename().string();
    for (const auto& [from, to] : {std::pair<std::string, std::string>{"images-idx3", "labels-idx1"}, {"images", "labels"}}) {
        const auto pos = name.find(from);
        if (pos != std::string::npos) {
            name.replace(pos, from.size(), to);
            return images.parent_path() / name;
        }
    }
    throw Error("cannot derive a labels path from " + images.string());
}

inline Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels, int num_classes = 10) {
    Dataset d;
    d.images = load_idx_images(images);
    d.labels = load_idx_labels(labels);
    d.num_classes = num_classes;
    d.validate();
    return d;
}

// ---------------------------------------------------------------- synthetic

/// Class c is centred on a fixed random unit direction scaled by `spread`,
/// plus unit Gaussian noise. Samples are stored class-major.
inline Dataset synth_blobs(int num_classes, std::size_t per_class, std::size_t dim, double spread, std::uint64_t seed) {
    if (num_classes < 1 || per_class < 1 || dim < 1) throw Error("synth_blobs: counts must be positive");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> centers(static_cast<std::size_t>(num_classes) * dim);
    for (int c = 0; c < num_classes; ++c) {
        double norm = 0.0;
        double* v = centers.data() + static_cast<std::size_t>(c) * dim;
        while (norm == 0.0) {
            norm = 0.0;
            for (std::size_t k = 0; k < dim; ++k) {
                v[k] = normal(rng);
                norm += v[k] * v[k];
            }
        }
        norm = std::sqrt(norm);
        for (std::size_t k = 0; k < dim; ++k) v[k] = v[k] / norm * spread;
    }
    Dataset d;
    d.num_classes = num_classes;
    const std::size_t n = per_class * static_cast<std::size_t>(num_classes);
    d.images = RealTensor({n, 1, 1, dim});
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto c = static_cast<int>(i / per_class);
        d.labels[i] = c;
        for (std::size_t k = 0; k < dim; ++k)
            d.images[i * dim + k] = centers[static_cast<std::size_t>(c) * dim + k] + normal(rng);
    }
    return d;
}

} // namespace lbt
