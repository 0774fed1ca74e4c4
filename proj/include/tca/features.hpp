#pragma once

// Frame descriptor extraction: per-layer max pooling (iMAC), 3x3 regional
// pooling (L3-iRMAC), PCA whitening and L2 normalization.

#include "tca/types.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

namespace tca {

inline constexpr double kNormEpsilon = 1e-12;
inline constexpr double kEigenFloorRatio = 1e-10;

enum class PoolingMode { IMac, L3IRMac };

/// One convolutional layer of one frame. Activations are stored as an
/// (h*w) x c matrix; spatial position (y, x) is row y*w + x.
template <typename Scalar>
struct FeatureLayer {
    Eigen::Index height = 0;
    Eigen::Index width = 0;
    Sequence<Scalar> activations;

    Eigen::Index channels() const { return activations.cols(); }
    Scalar at(Eigen::Index y, Eigen::Index x, Eigen::Index c) const
    {
        return activations(y * width + x, c);
    }
};

template <typename Scalar>
struct FeatureMapStack {
    std::vector<FeatureLayer<Scalar>> layers;
    std::uint32_t frame_index = 0;
};

template <typename Scalar>
void validate(const FeatureMapStack<Scalar>& maps)
{
    if (maps.layers.empty())
        throw MalformedInput("feature map stack has no layers");
    for (const auto& layer : maps.layers) {
        if (layer.height < 1 || layer.width < 1 || layer.channels() < 1)
            throw MalformedInput("feature layer has an empty grid");
        if (layer.activations.rows() != layer.height * layer.width)
            throw MalformedInput("feature layer activation count does not match its grid");
        if (!layer.activations.allFinite())
            throw MalformedInput("feature layer contains non-finite activations");
    }
}

/// v / |v|. Throws DegenerateInput when |v| <= 1e-12.
template <typename Derived>
auto l2_normalize(const Eigen::MatrixBase<Derived>& v)
{
    using Scalar = typename Derived::Scalar;
    const Scalar norm = v.norm();
    if (!(norm > Scalar(kNormEpsilon)))
        throw DegenerateInput("cannot L2-normalize a vector with near-zero norm");
    return (v / norm).eval();
}

/// Per-channel spatial maximum of every layer.
template <typename Scalar>
std::vector<Vector<Scalar>> imac_pool(const FeatureMapStack<Scalar>& maps)
{
    validate(maps);
    std::vector<Vector<Scalar>> pooled;
    pooled.reserve(maps.layers.size());
    for (const auto& layer : maps.layers)
        pooled.push_back(layer.activations.colwise().maxCoeff().transpose());
    return pooled;
}

/// Half-open extent [begin, end) of band `band` (0..2) along an axis of
/// length `extent`. Bands start at floor(i*n/3) and end at ceil((i+1)*n/3),
/// so they tile the axis exactly when n is divisible by 3 and overlap by at
/// most one position otherwise.
inline std::pair<Eigen::Index, Eigen::Index> region_band(Eigen::Index extent, int band)
{
    const Eigen::Index begin = (band * extent) / 3;
    const Eigen::Index end = ((band + 1) * extent + 2) / 3;
    return {begin, end};
}

/// Regional max pooling over a 3x3 grid of cells, summed over the nine
/// cells and L2-normalized, per layer.
template <typename Scalar>
std::vector<Vector<Scalar>> l3_irmac_pool(const FeatureMapStack<Scalar>& maps)
{
    validate(maps);
    std::vector<Vector<Scalar>> pooled;
    pooled.reserve(maps.layers.size());
    for (const auto& layer : maps.layers) {
        if (layer.height < 3 || layer.width < 3)
            throw MalformedInput("L3-iRMAC needs feature grids of at least 3x3, got "
                                 + shape_str(layer.height, layer.width));
        Vector<Scalar> sum = Vector<Scalar>::Zero(layer.channels());
        for (int by = 0; by < 3; ++by) {
            const auto [y0, y1] = region_band(layer.height, by);
            for (int bx = 0; bx < 3; ++bx) {
                const auto [x0, x1] = region_band(layer.width, bx);
                RowVector<Scalar> cell = RowVector<Scalar>::Constant(
                    layer.channels(), -std::numeric_limits<Scalar>::infinity());
                for (Eigen::Index y = y0; y < y1; ++y)
                    cell = cell.cwiseMax(layer.activations.middleRows(y * layer.width + x0, x1 - x0)
                                             .colwise()
                                             .maxCoeff());
                sum += cell.transpose();
            }
        }
        pooled.push_back(l2_normalize(sum));
    }
    return pooled;
}

template <typename Scalar>
std::vector<Vector<Scalar>> pool(const FeatureMapStack<Scalar>& maps, PoolingMode mode)
{
    return mode == PoolingMode::IMac ? imac_pool(maps) : l3_irmac_pool(maps);
}

/// Concatenates layer vectors in ascending layer order.
template <typename Scalar>
Vector<Scalar> concatenate(const std::vector<Vector<Scalar>>& parts)
{
    Eigen::Index total = 0;
    for (const auto& p : parts)
        total += p.size();
    Vector<Scalar> out(total);
    Eigen::Index offset = 0;
    for (const auto& p : parts) {
        out.segment(offset, p.size()) = p;
        offset += p.size();
    }
    return out;
}

/// Affine map y = (x - mean)^T projection onto the leading principal axes,
/// scaled to unit variance.
template <typename Scalar>
struct WhiteningModel {
    Vector<Scalar> mean;
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> projection;

    Eigen::Index input_dim() const { return mean.size(); }
    Eigen::Index output_dim() const { return projection.cols(); }

    Vector<Scalar> apply(const Vector<Scalar>& x) const
    {
        if (x.size() != input_dim())
            throw DimensionMismatch("whitening expects dimension " + std::to_string(input_dim())
                                    + ", got " + std::to_string(x.size()));
        return projection.transpose() * (x - mean);
    }

    /// Applies the model to every row of `samples`.
    Sequence<Scalar> apply_rows(const Sequence<Scalar>& samples) const
    {
        if (samples.cols() != input_dim())
            throw DimensionMismatch("whitening expects dimension " + std::to_string(input_dim())
                                    + ", got " + std::to_string(samples.cols()));
        return (samples.rowwise() - mean.transpose()) * projection;
    }
};

/// Fits PCA whitening on the rows of `samples` (population covariance).
/// Eigenvalues below 1e-10 of the largest are clamped before scaling.
template <typename Scalar>
WhiteningModel<Scalar> fit_whitening(const Sequence<Scalar>& samples, Eigen::Index output_dim)
{
    const Eigen::Index n = samples.rows();
    const Eigen::Index dim = samples.cols();
    if (output_dim < 1 || output_dim > dim)
        throw DimensionMismatch("whitening output dimension must be in [1, "
                                + std::to_string(dim) + "], got " + std::to_string(output_dim));
    if (n <= output_dim)
        throw InsufficientData("whitening needs more samples (" + std::to_string(n)
                               + ") than output dimensions (" + std::to_string(output_dim) + ")");
    if (!samples.allFinite())
        throw MalformedInput("whitening samples contain non-finite values");

    using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    WhiteningModel<Scalar> model;
    model.mean = samples.colwise().mean().transpose();
    const Mat centered = samples.rowwise() - model.mean.transpose();
    const Mat cov = (centered.transpose() * centered) / Scalar(n);

    Eigen::SelfAdjointEigenSolver<Mat> eig(cov);
    if (eig.info() != Eigen::Success)
        throw NumericalFailure("eigendecomposition of the sample covariance failed");
    const auto& values = eig.eigenvalues(); // ascending
    const Scalar largest = values(dim - 1);
    if (!(largest > Scalar(0)))
        throw DegenerateInput("whitening samples have zero variance");
    const Scalar floor = largest * Scalar(kEigenFloorRatio);

    model.projection.resize(dim, output_dim);
    for (Eigen::Index k = 0; k < output_dim; ++k) {
        const Eigen::Index src = dim - 1 - k;
        const Scalar lambda = std::max(values(src), floor);
        model.projection.col(k) = eig.eigenvectors().col(src) / std::sqrt(lambda);
    }
    return model;
}

/// Pool, concatenate, whiten and L2-normalize one frame.
template <typename Scalar>
Vector<Scalar> frame_descriptor(const FeatureMapStack<Scalar>& maps,
                                PoolingMode mode,
                                const WhiteningModel<Scalar>& model)
{
    const Vector<Scalar> raw = concatenate(pool(maps, mode));
    if (raw.size() != model.input_dim())
        throw DimensionMismatch("pooled descriptor has dimension " + std::to_string(raw.size())
                                + " but the whitening model expects "
                                + std::to_string(model.input_dim()));
    return l2_normalize(model.apply(raw));
}

} // namespace tca
