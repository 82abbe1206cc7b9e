#include "ehrgan/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ehrgan/error.hpp"

namespace ehrgan {

namespace bin {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

void put_str(std::string& out, std::string_view s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.append(s);
}

std::string_view Reader::raw(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw ParseError("unexpected end of binary data at byte " + std::to_string(pos_));
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
}

std::uint32_t Reader::u32() {
    auto s = raw(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
}

std::uint64_t Reader::u64() {
    auto s = raw(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
}

double Reader::f64() { return std::bit_cast<double>(u64()); }

std::string Reader::str() {
    const auto n = u32();
    return std::string(raw(n));
}

}  // namespace bin

namespace {
constexpr std::string_view kMagic = "EHRGCKPT";
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw InvalidArgument("checkpoint has no tensor '" + name + "'");
}

bool Checkpoint::has_tensor(const std::string& name) const {
    for (const auto& [n, _] : tensors)
        if (n == name) return true;
    return false;
}

const std::string& Checkpoint::meta_value(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw InvalidArgument("checkpoint has no metadata key '" + key + "'");
    return it->second;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
    std::string out(kMagic);
    bin::put_u32(out, Checkpoint::kVersion);
    out.push_back(1);
    out.append(3, '\0');
    bin::put_u32(out, static_cast<std::uint32_t>(ckpt.meta.size()));
    for (const auto& [k, v] : ckpt.meta) {
        bin::put_str(out, k);
        bin::put_str(out, v);
    }
    bin::put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        bin::put_str(out, name);
        bin::put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (auto e : t.shape()) bin::put_u64(out, e);
        for (Real v : t.values()) bin::put_f64(out, v);
    }
    return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
    bin::Reader r(bytes);
    if (r.raw(kMagic.size()) != kMagic) throw ParseError("not a checkpoint file (bad magic)");
    const auto version = r.u32();
    if (version != Checkpoint::kVersion)
        throw VersionMismatch("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(Checkpoint::kVersion) + ")");
    auto flags = r.raw(4);
    if (flags[0] != 1) throw ParseError("checkpoint is not little-endian");
    Checkpoint c;
    const auto n_meta = r.u32();
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        auto k = r.str();
        c.meta[k] = r.str();
    }
    const auto n_tensor = r.u32();
    for (std::uint32_t i = 0; i < n_tensor; ++i) {
        auto name = r.str();
        const auto rank = r.u32();
        if (rank == 0 || rank > 8) throw ParseError("tensor '" + name + "' has invalid rank " + std::to_string(rank));
        Shape shape(rank);
        std::size_t n = 1;
        for (auto& e : shape) {
            e = r.u64();
            if (e == 0 || e > (std::size_t{1} << 32)) throw ParseError("tensor '" + name + "' has invalid extent");
            n *= e;
        }
        if (n > bytes.size()) throw ParseError("tensor '" + name + "' is larger than the file");
        std::vector<Real> data(n);
        for (auto& v : data) v = r.f64();
        c.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    if (!r.done()) throw ParseError("trailing bytes after checkpoint tensors");
    return c;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing '" + path + "'");
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) { write_file(path, encode_checkpoint(ckpt)); }

Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

void export_params(const ParamSet& params, const std::string& prefix, Checkpoint& out) {
    for (const auto& [name, p] : params) out.tensors.emplace_back(prefix + name, p.value);
    out.meta[prefix + "step"] = std::to_string(params.step());
}

void import_params(ParamSet& params, const std::string& prefix, const Checkpoint& in) {
    for (auto& [name, p] : params) {
        const Tensor& t = in.tensor(prefix + name);
        if (t.shape() != p.value.shape())
            throw ShapeError("checkpoint tensor '" + prefix + name + "' has shape " + shape_string(t.shape()) +
                             ", model expects " + shape_string(p.value.shape()));
        p.value = t;
    }
    auto it = in.meta.find(prefix + "step");
    if (it != in.meta.end()) params.set_step(std::stoull(it->second));
}

}  // namespace ehrgan
