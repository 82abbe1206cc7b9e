#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ehrgan/params.hpp"
#include "ehrgan/tensor.hpp"

namespace ehrgan {

/// Binary tensor archive.
///
/// Layout (all integers little-endian):
///   "EHRGCKPT"  u32 version  u8 endian(=1 little)  u8[3] zero
///   u32 n_meta   { u32 len, key bytes, u32 len, value bytes } * n_meta
///   u32 n_tensor { u32 len, name bytes, u32 rank, u64 extent * rank,
///                  f64 value * prod(extents) } * n_tensor
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::map<std::string, std::string> meta;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor& tensor(const std::string& name) const;
    bool has_tensor(const std::string& name) const;
    const std::string& meta_value(const std::string& key) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

/// Copy every parameter (values only, buffers included) under `prefix`.
void export_params(const ParamSet& params, const std::string& prefix, Checkpoint& out);
/// Overwrite parameter values from `prefix`-named tensors; shapes must match.
void import_params(ParamSet& params, const std::string& prefix, const Checkpoint& in);

// Little-endian primitive encoding shared by the binary file formats.
namespace bin {
void put_u32(std::string& out, std::uint32_t v);
void put_u64(std::string& out, std::uint64_t v);
void put_f64(std::string& out, double v);
void put_str(std::string& out, std::string_view s);

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}
    std::uint32_t u32();
    std::uint64_t u64();
    double f64();
    std::string str();
    std::string_view raw(std::size_t n);
    bool done() const { return pos_ == bytes_.size(); }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};
}  // namespace bin

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

}  // namespace ehrgan
