#include "tss/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace tss {

namespace {

constexpr char kMagic[8] = {'T', 'S', 'S', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void write_le(std::ostream& out, T v) {
  char b[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i)
    b[i] = static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  out.write(b, sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char b[sizeof(T)];
  in.read(reinterpret_cast<char*>(b), sizeof(T));
  std::uint64_t v = 0;
  for (size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace

void save_checkpoint_raw(const std::string& path, const std::string& meta_json,
                         const std::vector<RawTensorEntry>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path + ": cannot open for writing");
  out.write(kMagic, 8);
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(meta_json.size()));
  out.write(meta_json.data(), static_cast<std::streamsize>(meta_json.size()));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    write_le<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    char dtype = t.f64 ? 1 : 0;
    char rank = static_cast<char>(t.dims.size());
    out.write(&dtype, 1);
    out.write(&rank, 1);
    for (auto d : t.dims) write_le<std::int64_t>(out, d);
    if (t.f64) {
      out.write(reinterpret_cast<const char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * 8));
    } else {
      std::vector<float> f(t.data.size());
      for (size_t i = 0; i < t.data.size(); ++i)
        f[i] = static_cast<float>(t.data[i]);
      out.write(reinterpret_cast<const char*>(f.data()),
                static_cast<std::streamsize>(f.size() * 4));
    }
  }
  if (!out) throw DataError(path + ": write failed");
}

std::pair<std::string, std::vector<RawTensorEntry>> load_checkpoint_raw(
    const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path + ": cannot open");
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw DataError(path + ": not a TSSCKPT1 checkpoint");
  auto meta_len = read_le<std::uint32_t>(in);
  std::string meta(meta_len, '\0');
  in.read(meta.data(), meta_len);
  auto count = read_le<std::uint32_t>(in);
  std::vector<RawTensorEntry> tensors(count);
  for (auto& t : tensors) {
    auto name_len = read_le<std::uint16_t>(in);
    t.name.resize(name_len);
    in.read(t.name.data(), name_len);
    char dtype, rank;
    in.read(&dtype, 1);
    in.read(&rank, 1);
    t.f64 = dtype == 1;
    Index n = 1;
    for (int i = 0; i < rank; ++i) {
      Index d = read_le<std::int64_t>(in);
      t.dims.push_back(d);
      n *= d;
    }
    t.data.resize(static_cast<size_t>(n));
    if (t.f64) {
      in.read(reinterpret_cast<char*>(t.data.data()),
              static_cast<std::streamsize>(n * 8));
    } else {
      std::vector<float> f(static_cast<size_t>(n));
      in.read(reinterpret_cast<char*>(f.data()),
              static_cast<std::streamsize>(n * 4));
      for (Index i = 0; i < n; ++i)
        t.data[static_cast<size_t>(i)] = f[static_cast<size_t>(i)];
    }
    if (!in) throw DataError(path + ": truncated checkpoint");
  }
  return {meta, tensors};
}

}  // namespace tss
