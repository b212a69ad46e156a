#include "qsim/tns_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <fmt/format.h>

#include "qsim/errors.hpp"

namespace qsim {

namespace {

constexpr std::size_t kFixedHeader = 8;

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace

std::vector<std::uint8_t> encode_tns(const Tensor& t) {
  if (t.rank() == 0 || t.rank() > 255) throw ValidationError("TNS: rank must be in [1,255]");
  std::vector<std::uint8_t> out;
  out.reserve(kFixedHeader + 8 * t.rank() + 4 * t.numel());
  out.insert(out.end(), std::begin(kTnsMagic), std::end(kTnsMagic));
  out.push_back(kTnsVersion);
  out.push_back(kTnsDtypeF32);
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  out.push_back(0);
  for (auto d : t.shape()) put_u64(out, d);
  for (float v : t.data()) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  return out;
}

Tensor decode_tns(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kFixedHeader) throw IoError("TNS: truncated header");
  if (std::memcmp(bytes.data(), kTnsMagic, 4) != 0) throw IoError("TNS: bad magic");
  if (bytes[4] != kTnsVersion) {
    throw IoError(fmt::format("TNS: unsupported version {}", bytes[4]));
  }
  if (bytes[5] != kTnsDtypeF32) {
    throw IoError(fmt::format("TNS: unsupported dtype code {}", bytes[5]));
  }
  const std::size_t ndim = bytes[6];
  if (ndim == 0) throw IoError("TNS: zero-rank tensor");
  if (bytes.size() < kFixedHeader + 8 * ndim) throw IoError("TNS: truncated dims");
  Shape shape(ndim);
  std::size_t numel = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    const std::uint64_t d = get_u64(bytes.data() + kFixedHeader + 8 * i);
    if (d == 0 || d > (std::uint64_t{1} << 40)) throw IoError("TNS: invalid dimension");
    shape[i] = static_cast<std::size_t>(d);
    numel *= shape[i];
    if (numel > (std::size_t{1} << 40)) throw IoError("TNS: tensor too large");
  }
  const std::size_t offset = kFixedHeader + 8 * ndim;
  if (bytes.size() != offset + 4 * numel) {
    throw IoError(fmt::format("TNS: payload size {} does not match shape {}",
                              bytes.size() - offset, shape_str(shape)));
  }
  std::vector<float> data(numel);
  for (std::size_t i = 0; i < numel; ++i) {
    const std::uint8_t* p = bytes.data() + offset + 4 * i;
    const std::uint32_t bits = std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) |
                               (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
    data[i] = std::bit_cast<float>(bits);
  }
  try {
    return Tensor(std::move(shape), std::move(data));
  } catch (const NumericalError& e) {
    throw IoError(fmt::format("TNS: {}", e.what()));
  }
}

void save_tns(const std::filesystem::path& path, const Tensor& t) {
  const auto bytes = encode_tns(t);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(fmt::format("cannot open {} for writing", path.string()));
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError(fmt::format("write failed for {}", path.string()));
}

Tensor load_tns(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(fmt::format("cannot open {}", path.string()));
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  try {
    return decode_tns(bytes);
  } catch (const IoError& e) {
    throw IoError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

}  // namespace qsim
