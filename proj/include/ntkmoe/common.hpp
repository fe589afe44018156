#pragma once

#include <Eigen/Dense>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdint>
#include <cstdlib>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace ntkmoe {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or violated precondition.
class SpecificationError : public Error {
public:
  using Error::Error;
};

class DimensionError : public Error {
public:
  using Error::Error;
};

// Divergence, failed factorization, non-finite values.
class NumericalError : public Error {
public:
  using Error::Error;
};

// Malformed CSV or snapshot payloads.
class FormatError : public Error {
public:
  using Error::Error;
};

class UnsupportedError : public Error {
public:
  using Error::Error;
};

// Diagnostics go to stderr; verbosity comes from NTKMOE_LOG_LEVEL
// (trace, debug, info, warn, error, off). Default is warn.
inline std::shared_ptr<spdlog::logger> log() {
  static std::shared_ptr<spdlog::logger> logger = [] {
    auto l = spdlog::get("ntkmoe");
    if (!l) l = spdlog::stderr_color_mt("ntkmoe");
    auto level = spdlog::level::warn;
    if (const char* env = std::getenv("NTKMOE_LOG_LEVEL")) {
      level = spdlog::level::from_str(env);
    }
    l->set_level(level);
    return l;
  }();
  return logger;
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw SpecificationError(what);
}

inline void require_dims(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

// Deterministic per-task seed derivation (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

// Rows of `source` listed in `ids`, in that order.
inline Matrix select_rows(const Matrix& source, const std::vector<int>& ids) {
  Matrix out(static_cast<Index>(ids.size()), source.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Index>(i)) = source.row(ids[i]);
  return out;
}

inline Matrix select_cols(const Matrix& source, const std::vector<int>& cols) {
  Matrix out(source.rows(), static_cast<Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Index>(j)) = source.col(cols[j]);
  return out;
}

inline Vector select_entries(const Vector& source, const std::vector<int>& ids) {
  Vector out(static_cast<Index>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) out(static_cast<Index>(i)) = source(ids[i]);
  return out;
}

}  // namespace ntkmoe
