#pragma once

// Softmax-family contrastive losses over cosine similarity scores, with
// exact derivatives with respect to every score.

#include "tca/types.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace tca {

/// One positive similarity and N-1 negative similarities for a single anchor.
struct ScoreSet {
    double positive = 0.0;
    Eigen::VectorXd negatives;

    Eigen::Index size() const { return negatives.size() + 1; }
};

struct LossOutput {
    double value = 0.0;
    double d_positive = 0.0;
    Eigen::VectorXd d_negatives;
};

struct CircleParams {
    double gamma = 256.0;
    double margin = 0.25;
};

enum class LossKind { Softmax, InfoNCE, Circle };

struct LossSettings {
    LossKind kind = LossKind::Circle;
    double tau = 0.07;
    CircleParams circle;

    void validate() const
    {
        if (!(tau > 0.0))
            throw UsageError("temperature tau must be positive");
        if (!(circle.gamma > 0.0))
            throw UsageError("circle gamma must be positive");
        if (!(circle.margin > 0.0 && circle.margin < 1.0))
            throw UsageError("circle margin must lie in (0, 1)");
    }
};

LossKind parse_loss_kind(const std::string& name);
std::string to_string(LossKind kind);

namespace detail {

/// -log softmax(logits)[0] where logits = [positive, negatives...], together
/// with its derivative with respect to each logit.
inline LossOutput positive_cross_entropy(double positive, const Eigen::VectorXd& negatives)
{
    const double m = negatives.size() ? std::max(positive, negatives.maxCoeff()) : positive;
    const double e_pos = std::exp(positive - m);
    const Eigen::VectorXd e_neg = (negatives.array() - m).exp().matrix();
    const double total = e_pos + e_neg.sum();
    LossOutput out;
    // softplus(logsumexp(negatives) - positive), kept accurate when the
    // positive dominates and the loss is close to zero.
    double gap = -std::numeric_limits<double>::infinity();
    if (negatives.size()) {
        const double mn = negatives.maxCoeff();
        gap = mn + std::log((negatives.array() - mn).exp().sum()) - positive;
    }
    out.value = gap > 0.0 ? gap + std::log1p(std::exp(-gap)) : std::log1p(std::exp(gap));
    out.d_positive = -e_neg.sum() / total;
    out.d_negatives = e_neg / total;
    return out;
}

} // namespace detail

inline void check_scores(const ScoreSet& s)
{
    if (s.negatives.size() < 1)
        throw DataError("score set needs at least one negative");
    if (!std::isfinite(s.positive) || !s.negatives.allFinite())
        throw NumericalFailure("score set contains non-finite similarities");
}

/// Plain softmax cross-entropy with the positive as target class.
inline LossOutput softmax_loss(const ScoreSet& s)
{
    check_scores(s);
    return detail::positive_cross_entropy(s.positive, s.negatives);
}

/// InfoNCE with temperature applied to every logit, positive included.
inline LossOutput infonce_loss(const ScoreSet& s, double tau)
{
    if (!(tau > 0.0))
        throw UsageError("temperature tau must be positive");
    check_scores(s);
    LossOutput out = detail::positive_cross_entropy(s.positive / tau, s.negatives / tau);
    out.d_positive /= tau;
    out.d_negatives /= tau;
    return out;
}

/// Circle loss, single positive. The hinge weights alpha depend on the
/// scores and are differentiated through; at a hinge kink the flat side is
/// used.
inline LossOutput circle_loss(const ScoreSet& s, const CircleParams& p)
{
    check_scores(s);
    const double gamma = p.gamma;
    const double m = p.margin;
    const double delta_p = 1.0 - m;
    const double delta_n = m;

    const double hinge_p = 1.0 + m - s.positive;
    const double alpha_p = std::max(0.0, hinge_p);
    const double logit_p = gamma * alpha_p * (s.positive - delta_p);
    const double dlogit_p = hinge_p > 0.0 ? gamma * (alpha_p - (s.positive - delta_p)) : 0.0;

    const Eigen::Index n = s.negatives.size();
    Eigen::VectorXd logit_n(n), dlogit_n(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const double sn = s.negatives(j);
        const double hinge_n = sn + m;
        const double alpha_n = std::max(0.0, hinge_n);
        logit_n(j) = gamma * alpha_n * (sn - delta_n);
        dlogit_n(j) = hinge_n > 0.0 ? gamma * (alpha_n + (sn - delta_n)) : 0.0;
    }

    LossOutput out = detail::positive_cross_entropy(logit_p, logit_n);
    out.d_positive *= dlogit_p;
    out.d_negatives = out.d_negatives.cwiseProduct(dlogit_n);
    return out;
}

inline LossOutput evaluate_loss(const ScoreSet& s, const LossSettings& settings)
{
    switch (settings.kind) {
    case LossKind::Softmax:
        return softmax_loss(s);
    case LossKind::InfoNCE:
        return infonce_loss(s, settings.tau);
    case LossKind::Circle:
        return circle_loss(s, settings.circle);
    }
    throw UsageError("unknown loss kind");
}

namespace detail {

template <typename Derived>
Eigen::VectorXd unit(const Eigen::MatrixBase<Derived>& w)
{
    const double norm = w.norm();
    if (!(norm > 1e-12))
        throw DegenerateInput("similarity of a zero-norm descriptor is undefined");
    return w.template cast<double>() / norm;
}

} // namespace detail

/// Cosine similarities of the anchor to the positive and to every row of
/// `negatives`.
inline ScoreSet similarity_scores(const Eigen::VectorXd& anchor,
                                  const Eigen::VectorXd& positive,
                                  const SequenceD& negatives)
{
    if (positive.size() != anchor.size() || negatives.cols() != anchor.size())
        throw DimensionMismatch("similarity inputs differ in dimension");
    const Eigen::VectorXd za = detail::unit(anchor);
    ScoreSet s;
    s.positive = za.dot(detail::unit(positive));
    s.negatives.resize(negatives.rows());
    for (Eigen::Index j = 0; j < negatives.rows(); ++j)
        s.negatives(j) = za.dot(detail::unit(negatives.row(j).transpose()));
    return s;
}

/// Closed-form gradient of softmax_loss(similarity_scores(.)) with respect
/// to the unnormalized anchor.
inline Eigen::VectorXd anchor_gradient_analytic(const Eigen::VectorXd& anchor,
                                                const Eigen::VectorXd& positive,
                                                const SequenceD& negatives)
{
    const ScoreSet s = similarity_scores(anchor, positive, negatives);
    const LossOutput l = softmax_loss(s);
    // d_positive = sigma_p - 1, d_negatives = sigma_n.
    const Eigen::VectorXd za = detail::unit(anchor);
    Eigen::VectorXd bracket = l.d_positive * detail::unit(positive);
    for (Eigen::Index j = 0; j < negatives.rows(); ++j)
        bracket += l.d_negatives(j) * detail::unit(negatives.row(j).transpose());
    return (bracket - za * za.dot(bracket)) / anchor.norm();
}

/// Magnitude of the j-th negative's term in the anchor gradient of
/// softmax_loss: sigma_n^j * sqrt(1 - (s_n^j)^2).
inline double negative_contribution(const ScoreSet& s, Eigen::Index j)
{
    if (j < 0 || j >= s.negatives.size())
        throw DataError("negative index " + std::to_string(j) + " out of range");
    const LossOutput l = softmax_loss(s);
    const double sn = s.negatives(j);
    return l.d_negatives(j) * std::sqrt(std::max(0.0, 1.0 - sn * sn));
}

inline LossKind parse_loss_kind(const std::string& name)
{
    if (name == "softmax")
        return LossKind::Softmax;
    if (name == "infonce")
        return LossKind::InfoNCE;
    if (name == "circle")
        return LossKind::Circle;
    throw UsageError("unknown loss '" + name + "' (expected infonce, circle or softmax)");
}

inline std::string to_string(LossKind kind)
{
    switch (kind) {
    case LossKind::Softmax:
        return "softmax";
    case LossKind::InfoNCE:
        return "infonce";
    case LossKind::Circle:
        return "circle";
    }
    return "unknown";
}

} // namespace tca
