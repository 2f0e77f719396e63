#include "fewseg/array_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "fewseg/errors.hpp"
#include "fewseg/rng.hpp"

namespace fewseg {
namespace {

constexpr std::array<char, 4> kArrayMagic{'F', 'S', 'G', 'A'};
constexpr std::array<char, 4> kSliceMagic{'F', 'S', 'G', 'S'};
constexpr std::array<char, 4> kArchiveMagic{'F', 'S', 'G', 'N'};
constexpr std::uint32_t kFormatVersion = 1;
constexpr std::uint32_t kMaxDim = 1u << 20;

template <typename U>
void put_le(std::ostream& out, U value) {
  std::array<char, sizeof(U)> buf{};
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    buf[i] = static_cast<char>((value >> (8 * i)) & 0xff);
  }
  out.write(buf.data(), buf.size());
}

template <typename U>
U get_le(std::istream& in) {
  std::array<unsigned char, sizeof(U)> buf{};
  in.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (!in) throw ParseError("unexpected end of array data");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(buf[i]) << (8 * i);
  return value;
}

void put_magic(std::ostream& out, const std::array<char, 4>& magic) {
  out.write(magic.data(), magic.size());
}

void expect_magic(std::istream& in, const std::array<char, 4>& magic, const char* what) {
  std::array<char, 4> got{};
  in.read(got.data(), got.size());
  if (!in || got != magic) throw ParseError(std::string("bad magic for ") + what);
}

struct Header {
  DType dtype;
  std::uint32_t rows;
  std::uint32_t cols;
};

void put_header(std::ostream& out, DType dtype, Eigen::Index rows, Eigen::Index cols) {
  put_magic(out, kArrayMagic);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dtype));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rows));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cols));
}

Header get_header(std::istream& in) {
  expect_magic(in, kArrayMagic, "array block");
  Header h{};
  h.dtype = static_cast<DType>(get_le<std::uint32_t>(in));
  h.rows = get_le<std::uint32_t>(in);
  h.cols = get_le<std::uint32_t>(in);
  if (h.rows > kMaxDim || h.cols > kMaxDim) throw ParseError("array dimensions too large");
  return h;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  return in;
}

}  // namespace

void write_array(std::ostream& out, const RealMatrix& m) {
  put_header(out, DType::kFloat64, m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(m.data()[i]));
  }
}

void write_array(std::ostream& out, const LabelMap& m) {
  put_header(out, DType::kInt32, m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(m.data()[i]));
  }
}

RealMatrix read_real_array(std::istream& in) {
  const Header h = get_header(in);
  if (h.dtype != DType::kFloat64) throw ParseError("expected float64 array");
  RealMatrix m(h.rows, h.cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = std::bit_cast<double>(get_le<std::uint64_t>(in));
  }
  return m;
}

LabelMap read_label_array(std::istream& in) {
  const Header h = get_header(in);
  if (h.dtype != DType::kInt32) throw ParseError("expected int32 array");
  LabelMap m(h.rows, h.cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = std::bit_cast<std::int32_t>(get_le<std::uint32_t>(in));
  }
  return m;
}

void write_slice_file(const std::filesystem::path& path, const Image& image,
                      const LabelMap& label) {
  if (image.rows() != label.rows() || image.cols() != label.cols()) {
    throw InvalidInputError("image and label shapes differ");
  }
  auto out = open_out(path);
  put_magic(out, kSliceMagic);
  put_le<std::uint32_t>(out, kFormatVersion);
  write_array(out, image);
  write_array(out, label);
  if (!out) throw IoError("write failed: " + path.string());
}

std::pair<Image, LabelMap> read_slice_file(const std::filesystem::path& path) {
  auto in = open_in(path);
  try {
    expect_magic(in, kSliceMagic, "slice file");
    if (get_le<std::uint32_t>(in) != kFormatVersion) throw ParseError("unsupported slice version");
    Image image = read_real_array(in);
    LabelMap label = read_label_array(in);
    if (image.rows() != label.rows() || image.cols() != label.cols()) {
      throw ParseError("image and label shapes differ");
    }
    return {std::move(image), std::move(label)};
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_named_arrays(const std::filesystem::path& path, const NamedArrays& arrays) {
  auto out = open_out(path);
  put_magic(out, kArchiveMagic);
  put_le<std::uint32_t>(out, kFormatVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, m] : arrays) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_array(out, m);
  }
  if (!out) throw IoError("write failed: " + path.string());
}

NamedArrays read_named_arrays(const std::filesystem::path& path) {
  auto in = open_in(path);
  try {
    expect_magic(in, kArchiveMagic, "array archive");
    if (get_le<std::uint32_t>(in) != kFormatVersion) throw ParseError("unsupported archive version");
    const auto count = get_le<std::uint32_t>(in);
    NamedArrays arrays;
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto len = get_le<std::uint32_t>(in);
      if (len > 4096) throw ParseError("entry name too long");
      std::string name(len, '\0');
      in.read(name.data(), len);
      if (!in) throw ParseError("truncated entry name");
      arrays.emplace_back(std::move(name), read_real_array(in));
    }
    return arrays;
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::uint64_t file_digest(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::array<char, 1 << 14> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    const auto got = in.gcount();
    if (got <= 0) break;
    h = fnv1a64(std::string_view(buf.data(), static_cast<std::size_t>(got)), h);
  }
  return h;
}

}  // namespace fewseg
