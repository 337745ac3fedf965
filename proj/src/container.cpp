#include "tss/container.hpp"

#include <cstring>
#include <fstream>

namespace tss {

namespace {

constexpr char kMagic[8] = {'T', 'S', 'S', 'M', 'A', 'T', '0', '1'};

void write_i64(std::ostream& out, std::int64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

std::int64_t read_i64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  std::int64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::int64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void write_array_file(const std::string& path,
                      const std::vector<Eigen::Index>& dims, const double* data,
                      bool as_f32) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path + ": cannot open for writing");
  out.write(kMagic, 8);
  char dtype = as_f32 ? 0 : 1;
  char rank = static_cast<char>(dims.size());
  out.write(&dtype, 1);
  out.write(&rank, 1);
  Eigen::Index n = 1;
  for (auto d : dims) {
    write_i64(out, d);
    n *= d;
  }
  if (as_f32) {
    std::vector<float> f(static_cast<size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) f[static_cast<size_t>(i)] = static_cast<float>(data[i]);
    out.write(reinterpret_cast<const char*>(f.data()), n * 4);
  } else {
    out.write(reinterpret_cast<const char*>(data), n * 8);
  }
  if (!out) throw DataError(path + ": write failed");
}

ArrayFile read_array_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path + ": cannot open");
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw DataError(path + ": not a TSSMAT01 container");
  char dtype, rank;
  in.read(&dtype, 1);
  in.read(&rank, 1);
  if (dtype != 0 && dtype != 1)
    throw DataError(path + ": unknown dtype " + std::to_string(int(dtype)));
  ArrayFile out;
  out.was_f32 = dtype == 0;
  Eigen::Index n = 1;
  for (int i = 0; i < rank; ++i) {
    std::int64_t d = read_i64(in);
    if (d < 0) throw DataError(path + ": negative dimension");
    out.dims.push_back(d);
    n *= d;
  }
  out.values.resize(static_cast<size_t>(n));
  if (dtype == 0) {
    std::vector<float> f(static_cast<size_t>(n));
    in.read(reinterpret_cast<char*>(f.data()), n * 4);
    for (Eigen::Index i = 0; i < n; ++i)
      out.values[static_cast<size_t>(i)] = f[static_cast<size_t>(i)];
  } else {
    in.read(reinterpret_cast<char*>(out.values.data()), n * 8);
  }
  if (!in) throw DataError(path + ": truncated container");
  return out;
}

void write_matrix_file(
    const std::string& path,
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& m,
    bool as_f32) {
  write_array_file(path, {m.rows(), m.cols()}, m.data(), as_f32);
}

Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>
read_matrix_file(const std::string& path) {
  ArrayFile a = read_array_file(path);
  if (a.dims.size() != 2)
    throw DataError(path + ": expected rank-2 container, got rank " +
                    std::to_string(a.dims.size()));
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> m(
      a.dims[0], a.dims[1]);
  std::memcpy(m.data(), a.values.data(), a.values.size() * sizeof(double));
  return m;
}

void write_layered_file(
    const std::string& path,
    const std::vector<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                    Eigen::RowMajor>>& layers) {
  if (layers.empty()) throw DataError(path + ": no layers to write");
  Eigen::Index L = static_cast<Eigen::Index>(layers.size());
  Eigen::Index T = layers[0].rows(), D = layers[0].cols();
  std::vector<double> flat(static_cast<size_t>(L * T * D));
  for (Eigen::Index l = 0; l < L; ++l) {
    if (layers[static_cast<size_t>(l)].rows() != T ||
        layers[static_cast<size_t>(l)].cols() != D)
      throw DataError(path + ": ragged layer shapes");
    std::memcpy(flat.data() + l * T * D, layers[static_cast<size_t>(l)].data(),
                static_cast<size_t>(T * D) * sizeof(double));
  }
  write_array_file(path, {L, T, D}, flat.data(), /*as_f32=*/true);
}

std::vector<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
read_layered_file(const std::string& path) {
  ArrayFile a = read_array_file(path);
  if (a.dims.size() != 3)
    throw DataError(path + ": expected rank-3 (L, Te, D) container, got rank " +
                    std::to_string(a.dims.size()));
  Eigen::Index L = a.dims[0], T = a.dims[1], D = a.dims[2];
  std::vector<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
      layers;
  for (Eigen::Index l = 0; l < L; ++l) {
    layers.emplace_back(T, D);
    std::memcpy(layers.back().data(), a.values.data() + l * T * D,
                static_cast<size_t>(T * D) * sizeof(double));
  }
  return layers;
}

}  // namespace tss
