#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace tca {

/// Frames are rows: an f x d sequence stores one descriptor per row.
template <typename Scalar>
using Sequence = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using FrameMask = Eigen::Array<bool, Eigen::Dynamic, 1>;

using SequenceD = Sequence<double>;
using SequenceF = Sequence<float>;
using VectorD = Vector<double>;

// Error taxonomy. The CLI maps these onto exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class UsageError : public Error {
public:
    using Error::Error;
};

/// Bad or inconsistent input data: malformed files, shape mismatches,
/// degenerate vectors, unknown ids.
class DataError : public Error {
public:
    using Error::Error;
};

class MalformedInput : public DataError {
public:
    using DataError::DataError;
};

class DegenerateInput : public DataError {
public:
    using DataError::DataError;
};

class DimensionMismatch : public DataError {
public:
    using DataError::DataError;
};

class InsufficientData : public DataError {
public:
    using DataError::DataError;
};

class NumericalFailure : public Error {
public:
    using Error::Error;
};

inline std::string shape_str(Eigen::Index rows, Eigen::Index cols)
{
    return std::to_string(rows) + "x" + std::to_string(cols);
}

inline Eigen::Index count_true(const FrameMask& mask)
{
    return mask.count();
}

} // namespace tca
