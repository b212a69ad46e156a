#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qsim/tensor.hpp"

namespace qsim {

// TNS layout, all integers little-endian:
//   "TNSR" | u8 version=1 | u8 dtype=0 (f32) | u8 ndim | u8 pad=0
//   | ndim x u64 dims | row-major f32 payload
inline constexpr char kTnsMagic[4] = {'T', 'N', 'S', 'R'};
inline constexpr std::uint8_t kTnsVersion = 1;
inline constexpr std::uint8_t kTnsDtypeF32 = 0;

std::vector<std::uint8_t> encode_tns(const Tensor& t);
Tensor decode_tns(const std::vector<std::uint8_t>& bytes);

void save_tns(const std::filesystem::path& path, const Tensor& t);
Tensor load_tns(const std::filesystem::path& path);

}  // namespace qsim
