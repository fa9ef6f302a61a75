// SPDX-License-Identifier: Apache-2.0

#pragma once

// LBT1 checkpoint container. Layout, all integers little-endian:
//
//   "LBT1"  u32 version  u32 record_count
//   record: u32 role  u32 index  u32 rank  u64 dims[rank]  i32 bit_width  i32 exponent
//           u64 payload_bytes  payload
//
// bit_width > 0: payload is i32 codes. bit_width == 0: f64 values.
// bit_width == -1: opaque bytes (config text, trainer counters).

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "data.hpp"
#include "error.hpp"
#include "tensor.hpp"

namespace lbt {

inline constexpr char kCheckpointMagic[4] = {'L', 'B', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class Role : std::uint32_t {
    weight = 1,
    bias = 2,
    weight_acc = 3,
    bias_acc = 4,
    weight_velocity = 5,
    bias_velocity = 6,
    weight_adam_m = 7,
    bias_adam_m = 8,
    weight_adam_v = 9,
    bias_adam_v = 10,
    config_text = 100,
    trainer_state = 101,
};

inline const char* role_name(Role r) {
    switch (r) {
    case Role::weight: return "weight";
    case Role::bias: return "bias";
    case Role::weight_acc: return "weight_acc";
    case Role::bias_acc: return "bias_acc";
    case Role::weight_velocity: return "weight_velocity";
    case Role::bias_velocity: return "bias_velocity";
    case Role::weight_adam_m: return "weight_adam_m";
    case Role::bias_adam_m: return "bias_adam_m";
    case Role::weight_adam_v: return "weight_adam_v";
    case Role::bias_adam_v: return "bias_adam_v";
    case Role::config_text: return "config_text";
    case Role::trainer_state: return "trainer_state";
    }
    return "unknown";
}

struct TensorRecord {
    Role role = Role::weight;
    std::uint32_t index = 0;
    Shape shape;
    std::int32_t bit_width = 0;
    std::int32_t exponent = 0;
    std::vector<std::uint8_t> payload;

    static TensorRecord from(Role role, std::uint32_t index, const QTensor& q) {
        TensorRecord r{role, index, q.shape, q.format.bit_width, q.format.exponent, {}};
        r.payload.reserve(q.size() * 4);
        for (auto c : q.codes) put_le(r.payload, static_cast<std::uint32_t>(c));
        return r;
    }
    static TensorRecord from(Role role, std::uint32_t index, const RealTensor& t) {
        TensorRecord r{role, index, t.shape, 0, 0, {}};
        r.payload.reserve(t.size() * 8);
        for (double v : t.values) put_le(r.payload, std::bit_cast<std::uint64_t>(v));
        return r;
    }
    static TensorRecord bytes(Role role, std::uint32_t index, std::vector<std::uint8_t> data) {
        TensorRecord r{role, index, {data.size()}, -1, 0, std::move(data)};
        return r;
    }

    QTensor to_qtensor() const {
        if (bit_width <= 0) throw Error(std::string("checkpoint record ") + role_name(role) + " is not a quantized tensor");
        QTensor q(shape, {bit_width, exponent});
        if (payload.size() != q.size() * 4) throw Error("checkpoint: truncated record");
        for (std::size_t i = 0; i < q.size(); ++i) q.codes[i] = static_cast<std::int32_t>(get_le<std::uint32_t>(payload, i * 4));
        q.validate();
        return q;
    }
    RealTensor to_real() const {
        if (bit_width != 0) throw Error(std::string("checkpoint record ") + role_name(role) + " is not a real tensor");
        RealTensor t(shape);
        if (payload.size() != t.size() * 8) throw Error("checkpoint: truncated record");
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::bit_cast<double>(get_le<std::uint64_t>(payload, i * 8));
        return t;
    }

    template <class T>
    static void put_le(std::vector<std::uint8_t>& b, T v) {
        for (std::size_t i = 0; i < sizeof(T); ++i) b.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * i)));
    }
    template <class T>
    static T get_le(const std::vector<std::uint8_t>& b, std::size_t off) {
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= std::uint64_t{b[off + i]} << (8 * i);
        return static_cast<T>(v);
    }
};

struct Checkpoint {
    std::vector<TensorRecord> records;

    const TensorRecord* find(Role role, std::uint32_t index = 0) const {
        for (const auto& r : records)
            if (r.role == role && r.index == index) return &r;
        return nullptr;
    }
    const TensorRecord& get(Role role, std::uint32_t index = 0) const {
        if (const auto* r = find(role, index)) return *r;
        throw Error(std::string("checkpoint has no ") + role_name(role) + " record " + std::to_string(index));
    }

    std::vector<std::uint8_t> encode() const {
        std::vector<std::uint8_t> b(kCheckpointMagic, kCheckpointMagic + 4);
        TensorRecord::put_le(b, kCheckpointVersion);
        TensorRecord::put_le(b, static_cast<std::uint32_t>(records.size()));
        for (const auto& r : records) {
            TensorRecord::put_le(b, static_cast<std::uint32_t>(r.role));
            TensorRecord::put_le(b, r.index);
            TensorRecord::put_le(b, static_cast<std::uint32_t>(r.shape.size()));
            for (auto d : r.shape) TensorRecord::put_le(b, static_cast<std::uint64_t>(d));
            TensorRecord::put_le(b, static_cast<std::uint32_t>(r.bit_width));
            TensorRecord::put_le(b, static_cast<std::uint32_t>(r.exponent));
            TensorRecord::put_le(b, static_cast<std::uint64_t>(r.payload.size()));
            b.insert(b.end(), r.payload.begin(), r.payload.end());
        }
        return b;
    }

    static Checkpoint decode(const std::vector<std::uint8_t>& b, const std::string& source = "checkpoint") {
        std::size_t off = 0;
        auto need = [&](std::size_t n) {
            if (b.size() < off + n) throw Error(source + ": truncated record at offset " + std::to_string(off));
        };
        need(4);
        if (std::memcmp(b.data(), kCheckpointMagic, 4) != 0) throw Error(source + ": bad magic (not an LBT1 checkpoint)");
        off = 4;
        need(8);
        const auto version = TensorRecord::get_le<std::uint32_t>(b, off);
        if (version != kCheckpointVersion) throw Error(source + ": unsupported checkpoint version " + std::to_string(version));
        const auto count = TensorRecord::get_le<std::uint32_t>(b, off + 4);
        off += 8;
        Checkpoint ck;
        for (std::uint32_t k = 0; k < count; ++k) {
            TensorRecord r;
            need(12);
            r.role = static_cast<Role>(TensorRecord::get_le<std::uint32_t>(b, off));
            r.index = TensorRecord::get_le<std::uint32_t>(b, off + 4);
            const auto rank = TensorRecord::get_le<std::uint32_t>(b, off + 8);
            off += 12;
            if (rank > 8) throw Error(source + ": implausible tensor rank at offset " + std::to_string(off - 4));
            need(8 * rank);
            for (std::uint32_t i = 0; i < rank; ++i) r.shape.push_back(TensorRecord::get_le<std::uint64_t>(b, off + 8 * i));
            off += 8 * rank;
            need(16);
            r.bit_width = static_cast<std::int32_t>(TensorRecord::get_le<std::uint32_t>(b, off));
            r.exponent = static_cast<std::int32_t>(TensorRecord::get_le<std::uint32_t>(b, off + 4));
            const auto bytes = TensorRecord::get_le<std::uint64_t>(b, off + 8);
            off += 16;
            need(bytes);
            r.payload.assign(b.begin() + static_cast<std::ptrdiff_t>(off), b.begin() + static_cast<std::ptrdiff_t>(off + bytes));
            off += bytes;
            ck.records.push_back(std::move(r));
        }
        return ck;
    }

    void save(const std::filesystem::path& path) const {
        // written under a temporary name, then renamed into place
        const auto tmp = std::filesystem::path(path.string() + ".tmp");
        write_file_bytes(tmp, encode());
        std::filesystem::rename(tmp, path);
    }
    static Checkpoint load(const std::filesystem::path& path) { return decode(read_file_bytes(path), path.string()); }
};

} // namespace lbt
