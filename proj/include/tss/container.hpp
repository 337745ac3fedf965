#pragma once

// Binary array container used for feature dumps, layered frame-embedding
// files, and embedding caches.
//
// Byte layout (all integers little-endian):
//   magic   8 bytes  "TSSMAT01"
//   dtype   u8       0 = float32, 1 = float64
//   rank    u8
//   dims    rank x i64
//   data    product(dims) values, row-major, little-endian
//
// A layered frame-embedding file is this container with rank 3 and dims
// (L, Te, D): L layers of Te frames of D-dimensional float32 embeddings.

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "tss/error.hpp"

namespace tss {

struct ArrayFile {
  std::vector<Eigen::Index> dims;
  std::vector<double> values;  // row-major
  bool was_f32 = false;
};

void write_array_file(const std::string& path,
                      const std::vector<Eigen::Index>& dims, const double* data,
                      bool as_f32);

ArrayFile read_array_file(const std::string& path);

// [rows x cols] convenience wrappers.
void write_matrix_file(
    const std::string& path,
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& m,
    bool as_f32 = true);

Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>
read_matrix_file(const std::string& path);

// Layered frame-embedding files: L matrices of identical [Te x D] shape.
void write_layered_file(
    const std::string& path,
    const std::vector<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                    Eigen::RowMajor>>& layers);

std::vector<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
read_layered_file(const std::string& path);

}  // namespace tss
