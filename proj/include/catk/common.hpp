#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace catk {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Flat buffers viewed through Eigen maps. A fixed base alignment keeps the
// vectorized kernels on the same code path in every run, so results are
// bit-identical across processes.
using ParamVec = std::vector<double, Eigen::aligned_allocator<double>>;

using TokenSeq = std::vector<int>;

// Rows are response positions, columns are vocabulary entries; every row is
// a log-distribution.
using LogitsSeq = Matrix;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user input: malformed configs, schema violations, missing artifacts.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Index of the largest entry; ties go to the lowest index.
template <typename RowLike>
int argmax_lowest(const RowLike& row) {
  int best = 0;
  for (int j = 1; j < static_cast<int>(row.size()); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

// FNV-1a over raw bytes; used for artifact checksums.
std::uint64_t fnv1a(const void* data, std::size_t n,
                    std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

void write_u64_le(std::ostream& out, std::uint64_t v);
std::uint64_t read_u64_le(const unsigned char* b);

}  // namespace catk
