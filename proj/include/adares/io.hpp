#pragma once

// "ADRS" tensor files. Version 1 holds one tensor:
//   "ADRS" | u32 version | u32 rank | u32 dims[rank] | f32 payload (row-major)
// Version 2 is a named container:
//   "ADRS" | u32 version | u32 count | count x (u32 name_len | name bytes | u32 rank | u32 dims[] | f32 payload)
// Everything little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "adares/nn.hpp"
#include "adares/tensor.hpp"

namespace adares::io {

inline constexpr char kMagic[4] = {'A', 'D', 'R', 'S'};
inline constexpr std::uint32_t kSingleTensorVersion = 1;
inline constexpr std::uint32_t kNamedVersion = 2;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

static_assert(std::endian::native == std::endian::little, "ADRS files are written on little-endian hosts only");

inline void put_u32(std::string& out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}

inline void put_tensor(std::string& out, const Tensor& t) {
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) {
        const float f = static_cast<float>(v);
        char b[4];
        std::memcpy(b, &f, 4);
        out.append(b, 4);
    }
}

class Reader {
public:
    Reader(std::string bytes, std::string origin) : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v;
        std::memcpy(&v, bytes_.data() + pos_, 4);
        pos_ += 4;
        return v;
    }

    std::string str(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    Tensor tensor() {
        const std::uint32_t rank = u32();
        if (rank > 8) throw IoError(origin_ + ": implausible tensor rank " + std::to_string(rank));
        Shape shape(rank);
        for (auto& d : shape) d = u32();
        const std::size_t n = numel(shape);
        need(n * 4);
        std::vector<double> values(n);
        for (std::size_t i = 0; i < n; ++i) {
            float f;
            std::memcpy(&f, bytes_.data() + pos_ + 4 * i, 4);
            values[i] = f;
        }
        pos_ += n * 4;
        return Tensor(std::move(shape), std::move(values));
    }

    std::uint32_t header() {
        if (str(4) != std::string(kMagic, 4)) throw IoError(origin_ + ": not an ADRS file");
        return u32();
    }

    void finish() const {
        if (pos_ != bytes_.size()) throw IoError(origin_ + ": trailing bytes after payload");
    }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw IoError(origin_ + ": truncated ADRS file");
    }

    std::string bytes_;
    std::string origin_;
    std::size_t pos_ = 0;
};

inline std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void dump(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + path.string());
}

}  // namespace detail

inline std::string encode_tensor(const Tensor& t) {
    std::string out(kMagic, 4);
    detail::put_u32(out, kSingleTensorVersion);
    detail::put_tensor(out, t);
    return out;
}

inline std::string encode_named(const NamedTensors& entries) {
    std::string out(kMagic, 4);
    detail::put_u32(out, kNamedVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(entries.size()));
    std::set<std::string> seen;
    for (const auto& [name, t] : entries) {
        if (!seen.insert(name).second) throw ConfigError("duplicate tensor name " + name);
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_tensor(out, t);
    }
    return out;
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) { detail::dump(path, encode_tensor(t)); }

inline void write_named(const std::filesystem::path& path, const NamedTensors& entries) {
    detail::dump(path, encode_named(entries));
}

inline Tensor read_tensor(const std::filesystem::path& path) {
    detail::Reader r(detail::slurp(path), path.string());
    const std::uint32_t version = r.header();
    if (version != kSingleTensorVersion) {
        throw IoError(path.string() + ": expected a single-tensor ADRS file, found version " + std::to_string(version));
    }
    Tensor t = r.tensor();
    r.finish();
    return t;
}

inline NamedTensors read_named(const std::filesystem::path& path) {
    detail::Reader r(detail::slurp(path), path.string());
    const std::uint32_t version = r.header();
    if (version != kNamedVersion) {
        throw IoError(path.string() + ": expected a named ADRS container, found version " + std::to_string(version));
    }
    const std::uint32_t count = r.u32();
    NamedTensors out;
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::uint32_t len = r.u32();
        std::string name = r.str(len);
        out.emplace_back(std::move(name), r.tensor());
    }
    r.finish();
    return out;
}

inline void save_state(const std::filesystem::path& path, const nn::StateList& state) {
    NamedTensors entries;
    entries.reserve(state.size());
    for (const auto& [name, t] : state) entries.emplace_back(name, *t);
    write_named(path, entries);
}

/// Loads every entry of `state` from a checkpoint; names and shapes must match. With
/// `allow_extra` the checkpoint may carry tensors the module does not own (a full model
/// checkpoint feeding just the DiffRes layer, say).
inline void load_state(const std::filesystem::path& path, const nn::StateList& state, bool allow_extra = false) {
    NamedTensors entries = read_named(path);
    std::map<std::string, Tensor*> slots;
    for (const auto& [name, t] : state) slots[name] = t;
    std::size_t matched = 0;
    for (auto& [name, t] : entries) {
        auto it = slots.find(name);
        if (it == slots.end()) {
            if (allow_extra) continue;
            throw ConfigError(path.string() + ": unexpected tensor " + name);
        }
        ++matched;
        if (it->second->shape() != t.shape()) {
            throw ShapeError(name + ": checkpoint shape " + to_string(t.shape()) + " vs model " +
                             to_string(it->second->shape()));
        }
        *it->second = std::move(t);
    }
    if (matched != slots.size()) {
        throw ConfigError(path.string() + ": checkpoint provides " + std::to_string(matched) + " of " +
                          std::to_string(slots.size()) + " tensors the model needs");
    }
}

}  // namespace adares::io
