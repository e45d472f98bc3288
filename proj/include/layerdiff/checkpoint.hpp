#pragma once

// Checkpoint container:
//   "LDIFCKPT" magic, u32 format version, u32 header length, header JSON
//   (format_version, precision, model config, free-form meta), u64 tensor
//   count, then per tensor: u32 name length, name bytes, u32 rank, u64 dims,
//   little-endian IEEE-754 payload (4 or 8 bytes per element).

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "layerdiff/model_config.hpp"
#include "layerdiff/numerics/autograd.hpp"
#include "layerdiff/numerics/tensor.hpp"

namespace layerdiff {

inline constexpr char kCheckpointMagic[8] = {'L', 'D', 'I', 'F', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <typename T>
constexpr const char* precision_name() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? "f32" : "f64";
}

template <typename T>
struct Checkpoint {
    ModelConfig model;
    std::string precision;
    json meta = json::object();
    std::map<std::string, Tensor<T>> tensors;
};

namespace detail {

class ByteWriter {
public:
    explicit ByteWriter(std::ostream& os) : os_(os) {}
    template <typename U>
    void uint(U v) {
        static_assert(std::is_unsigned_v<U>);
        for (std::size_t i = 0; i < sizeof(U); ++i) os_.put(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void bytes(const void* p, std::size_t n) { os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

private:
    std::ostream& os_;
};

class ByteReader {
public:
    ByteReader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}
    template <typename U>
    U uint() {
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            const int c = is_.get();
            if (c == EOF) fail("unexpected end of file");
            v |= static_cast<U>(static_cast<unsigned char>(c)) << (8 * i);
        }
        return v;
    }
    std::string str(std::size_t n) {
        std::string s(n, '\0');
        is_.read(s.data(), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n) fail("unexpected end of file");
        return s;
    }
    [[noreturn]] void fail(const std::string& msg) const { throw CheckpointError(path_ + ": " + msg); }

private:
    std::istream& is_;
    std::string path_;
};

}  // namespace detail

template <typename T>
void write_checkpoint(std::ostream& os, const Checkpoint<T>& ck) {
    detail::ByteWriter w(os);
    json header{{"format_version", kCheckpointVersion}, {"precision", precision_name<T>()}, {"model", ck.model},
                {"meta", ck.meta}};
    const std::string text = header.dump();
    w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
    w.uint(kCheckpointVersion);
    w.uint(static_cast<std::uint32_t>(text.size()));
    w.bytes(text.data(), text.size());
    w.uint(static_cast<std::uint64_t>(ck.tensors.size()));
    using Bits = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;
    for (const auto& [name, t] : ck.tensors) {
        w.uint(static_cast<std::uint32_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.uint(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) w.uint(static_cast<std::uint64_t>(d));
        for (T v : t.values()) w.uint(std::bit_cast<Bits>(v));
    }
}

template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ck) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError(path + ": cannot open for writing");
    write_checkpoint(os, ck);
    if (!os) throw CheckpointError(path + ": write failed");
}

/// Reads a checkpoint, converting the payload to T when precisions differ.
template <typename T>
Checkpoint<T> read_checkpoint(std::istream& is, const std::string& path = "<stream>") {
    detail::ByteReader r(is, path);
    if (r.str(8) != std::string(kCheckpointMagic, 8)) r.fail("not a checkpoint (bad magic)");
    const auto version = r.uint<std::uint32_t>();
    if (version != kCheckpointVersion) r.fail("unsupported format version " + std::to_string(version));
    const auto header_len = r.uint<std::uint32_t>();
    json header;
    try {
        header = json::parse(r.str(header_len));
    } catch (const json::exception& e) {
        r.fail(std::string("corrupt header: ") + e.what());
    }
    Checkpoint<T> ck;
    try {
        ck.precision = header.at("precision").get<std::string>();
        ck.model = header.at("model").get<ModelConfig>();
        if (header.contains("meta")) ck.meta = header.at("meta");
    } catch (const std::exception& e) {
        r.fail(std::string("bad header: ") + e.what());
    }
    if (ck.precision != "f32" && ck.precision != "f64") r.fail("unknown precision '" + ck.precision + "'");
    const auto count = r.uint<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name = r.str(r.uint<std::uint32_t>());
        const auto rank = r.uint<std::uint32_t>();
        if (rank == 0 || rank > 8) r.fail("tensor '" + name + "' has invalid rank");
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<std::int64_t>(r.uint<std::uint64_t>()));
        std::vector<T> data(static_cast<std::size_t>(shape_numel(shape)));
        for (auto& v : data) {
            if (ck.precision == "f32") v = static_cast<T>(std::bit_cast<float>(r.uint<std::uint32_t>()));
            else v = static_cast<T>(std::bit_cast<double>(r.uint<std::uint64_t>()));
        }
        if (!ck.tensors.emplace(name, Tensor<T>(std::move(shape), std::move(data))).second) {
            r.fail("duplicate tensor '" + name + "'");
        }
    }
    return ck;
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError(path + ": cannot open for reading");
    return read_checkpoint<T>(is, path);
}

/// Reads only the header (precision, model config, meta).
inline json read_checkpoint_header(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError(path + ": cannot open for reading");
    detail::ByteReader r(is, path);
    if (r.str(8) != std::string(kCheckpointMagic, 8)) r.fail("not a checkpoint (bad magic)");
    r.uint<std::uint32_t>();
    const auto len = r.uint<std::uint32_t>();
    return json::parse(r.str(len));
}

template <typename T>
ParamStore<T> params_from_checkpoint(const Checkpoint<T>& ck, const std::string& prefix_to_skip = "adam.") {
    ParamStore<T> ps;
    for (const auto& [name, t] : ck.tensors) {
        if (name.rfind(prefix_to_skip, 0) == 0) continue;
        ps.add(name, t);
    }
    return ps;
}

}  // namespace layerdiff
