#pragma once

// TSR1 tensor container:
//   "TSR1" | u8 dtype (0 = f32, 1 = f64) | u8 rank | rank x u64 LE extents | payload
// The payload is the row-major element array in little-endian byte order.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "autoprom/error.hpp"
#include "autoprom/tensor.hpp"

namespace autoprom {

static_assert(std::endian::native == std::endian::little,
              "TSR1 I/O assumes a little-endian host");

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::kF32 : DType::kF64;
}

inline constexpr std::array<char, 4> kTsrMagic{'T', 'S', 'R', '1'};
inline constexpr std::size_t kTsrMaxRank = 16;

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(kTsrMagic.data(), kTsrMagic.size());
  const auto dtype = static_cast<std::uint8_t>(dtype_of<T>());
  const auto rank = static_cast<std::uint8_t>(t.rank());
  os.put(static_cast<char>(dtype));
  os.put(static_cast<char>(rank));
  for (std::size_t e : t.shape()) {
    const std::uint64_t v = e;
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(T)));
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw RuntimeAbort("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
  os.flush();
  if (!os) throw RuntimeAbort("write failed for " + path.string());
}

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

namespace detail {

class CountingReader {
 public:
  explicit CountingReader(std::istream& is) : is_(is) {}

  void read(void* dst, std::size_t n, const char* what) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    const auto got = static_cast<std::size_t>(is_.gcount());
    if (got != n)
      throw FormatError(std::string("truncated TSR1 stream while reading ") + what, offset_ + got);
    offset_ += n;
  }

  std::uint64_t offset() const { return offset_; }

 private:
  std::istream& is_;
  std::uint64_t offset_ = 0;
};

template <typename T>
Tensor<T> read_payload(CountingReader& in, Shape shape) {
  std::vector<T> data(shape_numel(shape));
  in.read(data.data(), data.size() * sizeof(T), "payload");
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace detail

/// Read one tensor keeping its stored dtype. Errors report the byte offset
/// relative to where the record starts.
inline AnyTensor read_any_tensor(std::istream& is) {
  detail::CountingReader in(is);
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size(), "magic");
  if (magic != kTsrMagic) throw FormatError("bad TSR1 magic", 0);
  std::uint8_t dtype = 0, rank = 0;
  in.read(&dtype, 1, "dtype");
  if (dtype > 1) throw FormatError("unknown TSR1 dtype code " + std::to_string(dtype), 4);
  in.read(&rank, 1, "rank");
  if (rank > kTsrMaxRank) throw FormatError("TSR1 rank too large", 5);
  Shape shape(rank);
  for (auto& e : shape) {
    std::uint64_t v = 0;
    in.read(&v, sizeof v, "extent");
    e = static_cast<std::size_t>(v);
  }
  if (dtype == 0) return detail::read_payload<float>(in, std::move(shape));
  return detail::read_payload<double>(in, std::move(shape));
}

/// Read one tensor converting to T if the stored dtype differs.
template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  AnyTensor any = read_any_tensor(is);
  return std::visit(
      [](auto&& t) -> Tensor<T> {
        using Stored = typename std::decay_t<decltype(t)>::value_type;
        if constexpr (std::is_same_v<Stored, T>)
          return std::move(t);
        else
          return t.template cast<T>();
      },
      std::move(any));
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open tensor file " + path.string());
  try {
    return read_tensor<T>(is);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

}  // namespace autoprom
