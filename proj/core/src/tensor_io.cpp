#include "icd/tensor_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace icd {

namespace {

constexpr char kMagic[4] = {'I', 'C', 'D', 'T'};
constexpr std::uint8_t kVersion = 1;
constexpr std::size_t kMaxRank = 8;

void put_u64(std::ostream& os, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(buf, 8);
}

std::uint64_t get_u64(std::istream& is) {
  char buf[8];
  is.read(buf, 8);
  if (!is) throw FormatError("tensor blob truncated while reading a 64-bit field");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
  }
  return v;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kMagic, 4);
  os.put(static_cast<char>(kVersion));
  put_u64(os, t.rank());
  for (std::size_t e : t.shape()) put_u64(os, e);
  for (double v : t.data()) put_u64(os, std::bit_cast<std::uint64_t>(v));
  if (!os) throw FormatError("failed to write tensor blob");
}

Tensor read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("tensor blob: bad magic, expected ICDT");
  }
  const int version = is.get();
  if (version != kVersion) {
    throw FormatError("tensor blob: unsupported version " + std::to_string(version));
  }
  const std::uint64_t rank = get_u64(is);
  if (rank > kMaxRank) throw FormatError("tensor blob: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    e = static_cast<std::size_t>(get_u64(is));
    if (e == 0) throw FormatError("tensor blob: zero extent");
  }
  const std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<double>(get_u64(is));
  return Tensor::from_data(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_tensor(is);
}

}  // namespace icd
