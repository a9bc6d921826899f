#pragma once

#include "hflow/numerics/parameter.hpp"
#include "hflow/numerics/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace hflow::num {

// Tensor archive ("HFLW") shared by all checkpoints:
//   magic "HFLW" | version u16 | count u32 |
//   per tensor: name_len u16 | name utf-8 | rank u8 | extents u32[rank] | payload f64[prod(extents)]
// All integers and doubles little-endian.
inline constexpr std::uint16_t kArchiveVersion = 1;

using NamedTensor = std::pair<std::string, Tensor>;
using TensorArchive = std::vector<NamedTensor>;

std::vector<std::uint8_t> encode_archive(const TensorArchive& archive);
TensorArchive decode_archive(const std::vector<std::uint8_t>& bytes);

void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path);

// Lookup by name; throws ContractError naming the missing entry.
const Tensor& find_tensor(const TensorArchive& archive, const std::string& name);
bool has_tensor(const TensorArchive& archive, const std::string& name);

// Parameter-list helpers. Loading requires every parameter to be present with
// matching extents.
void append_params(TensorArchive& archive, const ParamRefs& params);
void load_params(const TensorArchive& archive, const ParamRefs& params);

// Scalar metadata stored as rank-1 single-element tensors.
void put_scalar(TensorArchive& archive, const std::string& name, double value);
double get_scalar(const TensorArchive& archive, const std::string& name);

// Atomic file write (temp file + rename).
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

} // namespace hflow::num
