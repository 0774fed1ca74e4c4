#pragma once

// Video-to-video similarity measures and ranked retrieval evaluation.

#include "tca/types.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace tca {

enum class Measure { Cosine, Chamfer, SymmetricChamfer };

Measure parse_measure(const std::string& name);
std::string to_string(Measure measure);

namespace detail {

inline constexpr Eigen::Index kTileRows = 32;

template <typename Scalar>
Scalar row_dot(const Scalar* a, const Scalar* b, Eigen::Index d)
{
    Scalar acc = Scalar(0);
    for (Eigen::Index k = 0; k < d; ++k)
        acc += a[k] * b[k];
    return acc;
}

template <typename Scalar>
void check_pair(const Sequence<Scalar>& x, const Sequence<Scalar>& y)
{
    if (x.rows() == 0 || y.rows() == 0)
        throw DataError("similarity of an empty frame sequence is undefined");
    if (x.cols() != y.cols())
        throw DimensionMismatch("frame descriptors differ in dimension: " + std::to_string(x.cols())
                                + " vs " + std::to_string(y.cols()));
}

} // namespace detail

/// (1/n) sum_i max_j <x_i, y_j>. The frame-pair loop is tiled, but every dot
/// product and the outer sum run in the same order as a plain double loop,
/// so results are bit-identical to it.
template <typename Scalar>
Scalar chamfer_similarity(const Sequence<Scalar>& x, const Sequence<Scalar>& y)
{
    detail::check_pair(x, y);
    const Eigen::Index n = x.rows(), m = y.rows(), d = x.cols();
    const Eigen::Index tile = detail::kTileRows;
    std::vector<Scalar> best(static_cast<std::size_t>(n), -std::numeric_limits<Scalar>::infinity());
    for (Eigen::Index i0 = 0; i0 < n; i0 += tile) {
        const Eigen::Index i1 = std::min(n, i0 + tile);
        for (Eigen::Index j0 = 0; j0 < m; j0 += tile) {
            const Eigen::Index j1 = std::min(m, j0 + tile);
            for (Eigen::Index i = i0; i < i1; ++i) {
                Scalar b = best[i];
                for (Eigen::Index j = j0; j < j1; ++j)
                    b = std::max(b, detail::row_dot(x.row(i).data(), y.row(j).data(), d));
                best[i] = b;
            }
        }
    }
    Scalar sum = Scalar(0);
    for (const Scalar b : best)
        sum += b;
    return sum / Scalar(n);
}

template <typename Scalar>
Scalar symmetric_chamfer(const Sequence<Scalar>& x, const Sequence<Scalar>& y)
{
    return (chamfer_similarity(x, y) + chamfer_similarity(y, x)) / Scalar(2);
}

/// (1/nm) sum_i sum_j <x_i, y_j>, i.e. the dot product of the two
/// unnormalized mean descriptors. Bounded above by chamfer_similarity.
template <typename Scalar>
Scalar mean_pairwise_similarity(const Sequence<Scalar>& x, const Sequence<Scalar>& y)
{
    detail::check_pair(x, y);
    return x.colwise().mean().dot(y.colwise().mean());
}

/// Dot product of the L2-normalized mean descriptors.
template <typename Scalar>
Scalar cosine_similarity_video(const Sequence<Scalar>& x, const Sequence<Scalar>& y)
{
    detail::check_pair(x, y);
    const RowVector<Scalar> mx = x.colwise().mean();
    const RowVector<Scalar> my = y.colwise().mean();
    const Scalar nx = mx.norm(), ny = my.norm();
    if (!(nx > Scalar(1e-12)) || !(ny > Scalar(1e-12)))
        throw DegenerateInput("mean descriptor has near-zero norm");
    return mx.dot(my) / (nx * ny);
}

template <typename Scalar>
Scalar similarity(Measure measure, const Sequence<Scalar>& x, const Sequence<Scalar>& y)
{
    switch (measure) {
    case Measure::Cosine:
        return cosine_similarity_video(x, y);
    case Measure::Chamfer:
        return chamfer_similarity(x, y);
    case Measure::SymmetricChamfer:
        return symmetric_chamfer(x, y);
    }
    throw UsageError("unknown similarity measure");
}

using RetrievalCorpus = std::map<std::string, SequenceD>;

/// query id -> tier name -> relevant ids.
using GroundTruth = std::map<std::string, std::map<std::string, std::set<std::string>>>;

struct TierReport {
    std::map<std::string, double> average_precision;
    std::vector<std::string> skipped;
    double mean_ap = 0.0;
};

struct EvaluationReport {
    Measure measure = Measure::Cosine;
    std::map<std::string, TierReport> tiers;
    double similarity_seconds = 0.0;
    double total_seconds = 0.0;
};

/// Mean over relevant items of precision at their rank. Relevant items
/// missing from `ranked` contribute zero.
double average_precision(const std::vector<std::string>& ranked,
                         const std::set<std::string>& relevant);

/// Ranks every non-query corpus entry by descending similarity, ties broken
/// by ascending id.
std::vector<std::string> rank_candidates(const RetrievalCorpus& corpus,
                                         const std::string& query_id,
                                         const SequenceD& query,
                                         Measure measure);

/// Scores every ground-truth query. Queries are looked up in `queries`
/// first, then in the corpus.
EvaluationReport rank_and_score(const RetrievalCorpus& corpus,
                                const RetrievalCorpus& queries,
                                const GroundTruth& ground_truth,
                                Measure measure,
                                unsigned threads = 1);

} // namespace tca
