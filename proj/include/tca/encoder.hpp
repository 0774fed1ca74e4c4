#pragma once

// Single-layer multi-head self-attention encoder (post-norm Transformer
// encoder without positional encoding) with hand-written backward pass.

#include "tca/types.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

namespace tca {

inline constexpr double kLayerNormEpsilon = 1e-5;

struct EncoderConfig {
    Eigen::Index dim = 1024;
    Eigen::Index heads = 8;
    Eigen::Index ffn_dim = 2048;
    double dropout_rate = 0.5;
    std::uint64_t seed = 0;

    Eigen::Index head_dim() const { return dim / heads; }

    void validate() const
    {
        if (dim < 1 || heads < 1 || ffn_dim < 1)
            throw UsageError("encoder dimensions must be positive");
        if (dim % heads != 0)
            throw UsageError("encoder dim " + std::to_string(dim)
                             + " is not divisible by head count " + std::to_string(heads));
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
            throw UsageError("dropout rate must lie in [0, 1)");
    }
};

template <typename Scalar>
struct EncoderParams {
    using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Vec = Vector<Scalar>;

    Mat w_query, w_key, w_value, w_out; // d x d
    Mat ffn_w1;                         // d x ffn_dim
    Vec ffn_b1;
    Mat ffn_w2;                         // ffn_dim x d
    Vec ffn_b2;
    Vec ln1_gain, ln1_bias, ln2_gain, ln2_bias;

    Eigen::Index dim() const { return w_query.rows(); }
    Eigen::Index ffn_dim() const { return ffn_w1.cols(); }

    static EncoderParams zeros(Eigen::Index d, Eigen::Index ffn)
    {
        EncoderParams p;
        p.w_query = p.w_key = p.w_value = p.w_out = Mat::Zero(d, d);
        p.ffn_w1 = Mat::Zero(d, ffn);
        p.ffn_b1 = Vec::Zero(ffn);
        p.ffn_w2 = Mat::Zero(ffn, d);
        p.ffn_b2 = Vec::Zero(d);
        p.ln1_gain = p.ln1_bias = p.ln2_gain = p.ln2_bias = Vec::Zero(d);
        return p;
    }

    static EncoderParams zeros_like(const EncoderParams& other)
    {
        return zeros(other.dim(), other.ffn_dim());
    }

    template <typename Other>
    EncoderParams<Other> cast() const
    {
        EncoderParams<Other> out;
        visit_tensors([](const char*, auto& dst, const auto& src) { dst = src.template cast<Other>(); },
                      out, *this);
        return out;
    }
};

/// Calls fn(name, tensor...) once per parameter tensor, in the fixed order
/// used by checkpoints and the optimizer.
template <typename Fn, typename... Params>
void visit_tensors(Fn&& fn, Params&... ps)
{
    fn("w_query", ps.w_query...);
    fn("w_key", ps.w_key...);
    fn("w_value", ps.w_value...);
    fn("w_out", ps.w_out...);
    fn("ffn_w1", ps.ffn_w1...);
    fn("ffn_b1", ps.ffn_b1...);
    fn("ffn_w2", ps.ffn_w2...);
    fn("ffn_b2", ps.ffn_b2...);
    fn("ln1_gain", ps.ln1_gain...);
    fn("ln1_bias", ps.ln1_bias...);
    fn("ln2_gain", ps.ln2_gain...);
    fn("ln2_bias", ps.ln2_bias...);
}

/// Half-width of the uniform initializer for a fan_in x fan_out matrix.
inline double init_scale(Eigen::Index fan_in, Eigen::Index fan_out)
{
    return std::sqrt(6.0 / double(fan_in + fan_out));
}

/// Xavier-uniform weights drawn from `config.seed`; zero biases, unit gains.
template <typename Scalar = double>
EncoderParams<Scalar> init_encoder(const EncoderConfig& config)
{
    config.validate();
    auto p = EncoderParams<Scalar>::zeros(config.dim, config.ffn_dim);
    std::mt19937_64 rng(config.seed);
    auto fill = [&rng](auto& m) {
        const double a = init_scale(m.rows(), m.cols());
        std::uniform_real_distribution<double> dist(-a, a);
        for (Eigen::Index i = 0; i < m.size(); ++i)
            m.data()[i] = Scalar(dist(rng));
    };
    fill(p.w_query);
    fill(p.w_key);
    fill(p.w_value);
    fill(p.w_out);
    fill(p.ffn_w1);
    fill(p.ffn_w2);
    p.ln1_gain.setOnes();
    p.ln2_gain.setOnes();
    return p;
}

/// Everything the backward pass needs from one forward evaluation.
template <typename Scalar>
struct EncoderTrace {
    using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

    Mat input;
    FrameMask mask;
    Eigen::Index heads = 1;
    Mat query, key, value;
    std::vector<Mat> attention; // per head, f x f, rows sum to 1 over real keys
    Mat merged;                 // concatenated head outputs
    Mat attn_dropout;           // empty when dropout is inactive
    Mat ln1_hat;
    Vector<Scalar> ln1_rstd;
    Mat hidden;                 // LayerNorm1 output
    Mat ffn_pre;
    Mat ffn_act;                // ReLU (and dropout) output
    Mat ffn_dropout;
    Mat ln2_hat;
    Vector<Scalar> ln2_rstd;
    Mat output;                 // padded rows zeroed
};

namespace detail {

template <typename Mat, typename Vec>
void layer_norm_forward(const Mat& in, const Vec& gain, const Vec& bias, Mat& hat, Vec& rstd, Mat& out)
{
    using Scalar = typename Mat::Scalar;
    const Eigen::Index f = in.rows();
    hat.resize(in.rows(), in.cols());
    rstd.resize(f);
    for (Eigen::Index i = 0; i < f; ++i) {
        const Scalar mu = in.row(i).mean();
        const Scalar var = (in.row(i).array() - mu).square().mean();
        rstd(i) = Scalar(1) / std::sqrt(var + Scalar(kLayerNormEpsilon));
        hat.row(i) = (in.row(i).array() - mu) * rstd(i);
    }
    out = (hat.array().rowwise() * gain.transpose().array()).rowwise() + bias.transpose().array();
}

/// Returns d(in) and accumulates gain/bias gradients.
template <typename Mat, typename Vec>
Mat layer_norm_backward(const Mat& d_out, const Mat& hat, const Vec& rstd, const Vec& gain,
                        Vec& d_gain, Vec& d_bias)
{
    d_gain += (d_out.array() * hat.array()).colwise().sum().transpose().matrix();
    d_bias += d_out.colwise().sum().transpose();
    const Mat d_hat = d_out.array().rowwise() * gain.transpose().array();
    Mat d_in(d_out.rows(), d_out.cols());
    for (Eigen::Index i = 0; i < d_out.rows(); ++i) {
        const auto mean_dh = d_hat.row(i).mean();
        const auto mean_dh_hat = (d_hat.row(i).array() * hat.row(i).array()).mean();
        d_in.row(i) = rstd(i) * (d_hat.row(i).array() - mean_dh - hat.row(i).array() * mean_dh_hat);
    }
    return d_in;
}

template <typename Mat, typename Rng>
Mat dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng)
{
    using Scalar = typename Mat::Scalar;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const Scalar keep = Scalar(1.0 / (1.0 - rate));
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i)
        m.data()[i] = u(rng) < rate ? Scalar(0) : keep;
    return m;
}

} // namespace detail

template <typename Scalar>
void check_sequence(const EncoderParams<Scalar>& params, const Sequence<Scalar>& x, const FrameMask& mask)
{
    if (x.cols() != params.dim())
        throw DimensionMismatch("encoder expects descriptors of dimension "
                                + std::to_string(params.dim()) + ", got " + std::to_string(x.cols()));
    if (x.rows() < 1)
        throw DimensionMismatch("encoder input has no frames");
    if (mask.size() != x.rows())
        throw DimensionMismatch("frame mask length " + std::to_string(mask.size())
                                + " does not match frame count " + std::to_string(x.rows()));
    if (!mask.any())
        throw DegenerateInput("frame mask has no real frames");
}

/// Forward pass keeping intermediates. `rng` is only consulted when
/// `training` is set and the dropout rate is positive.
template <typename Scalar>
EncoderTrace<Scalar> encode_trace(const EncoderParams<Scalar>& params,
                                  Eigen::Index heads,
                                  double dropout_rate,
                                  const Sequence<Scalar>& x,
                                  const FrameMask& mask,
                                  bool training,
                                  std::mt19937_64* rng)
{
    using Mat = typename EncoderTrace<Scalar>::Mat;
    check_sequence(params, x, mask);
    const Eigen::Index f = x.rows();
    const Eigen::Index d = params.dim();
    if (heads < 1 || d % heads != 0)
        throw UsageError("encoder dim is not divisible by head count");
    const Eigen::Index dh = d / heads;
    const bool dropout = training && dropout_rate > 0.0;
    if (dropout && rng == nullptr)
        throw UsageError("training-mode dropout needs a random generator");

    EncoderTrace<Scalar> t;
    t.input = x;
    t.mask = mask;
    t.heads = heads;
    t.query = x * params.w_query;
    t.key = x * params.w_key;
    t.value = x * params.w_value;

    const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
    t.merged.resize(f, d);
    t.attention.resize(heads);
    for (Eigen::Index h = 0; h < heads; ++h) {
        Mat logits = (t.query.middleCols(h * dh, dh) * t.key.middleCols(h * dh, dh).transpose()) * scale;
        for (Eigen::Index j = 0; j < f; ++j)
            if (!mask(j))
                logits.col(j).setConstant(-std::numeric_limits<Scalar>::infinity());
        for (Eigen::Index i = 0; i < f; ++i) {
            const Scalar m = logits.row(i).maxCoeff();
            logits.row(i) = (logits.row(i).array() - m).exp();
            logits.row(i) /= logits.row(i).sum();
        }
        t.merged.middleCols(h * dh, dh) = logits * t.value.middleCols(h * dh, dh);
        t.attention[h] = std::move(logits);
    }

    Mat attn = t.merged * params.w_out;
    if (dropout) {
        t.attn_dropout = detail::dropout_mask<Mat>(f, d, dropout_rate, *rng);
        attn.array() *= t.attn_dropout.array();
    }

    Mat residual1 = x + attn;
    detail::layer_norm_forward(residual1, params.ln1_gain, params.ln1_bias, t.ln1_hat, t.ln1_rstd, t.hidden);

    t.ffn_pre = (t.hidden * params.ffn_w1).rowwise() + params.ffn_b1.transpose();
    t.ffn_act = t.ffn_pre.cwiseMax(Scalar(0));
    if (dropout) {
        t.ffn_dropout = detail::dropout_mask<Mat>(f, params.ffn_dim(), dropout_rate, *rng);
        t.ffn_act.array() *= t.ffn_dropout.array();
    }
    Mat residual2 = t.hidden + ((t.ffn_act * params.ffn_w2).rowwise() + params.ffn_b2.transpose());
    detail::layer_norm_forward(residual2, params.ln2_gain, params.ln2_bias, t.ln2_hat, t.ln2_rstd, t.output);

    for (Eigen::Index i = 0; i < f; ++i)
        if (!mask(i))
            t.output.row(i).setZero();
    return t;
}

/// Refined f x d frame descriptors; padded rows are zero.
template <typename Scalar>
Sequence<Scalar> encode_frames(const EncoderParams<Scalar>& params,
                               const EncoderConfig& config,
                               const Sequence<Scalar>& x,
                               const FrameMask& mask,
                               bool training = false,
                               std::mt19937_64* rng = nullptr)
{
    return encode_trace(params, config.heads, config.dropout_rate, x, mask, training, rng).output;
}

template <typename Scalar>
struct EncoderGradients {
    EncoderParams<Scalar> params;
    Sequence<Scalar> input;
};

/// Exact gradients of <upstream, output> with respect to the parameters and
/// the input, using the dropout pattern recorded in `trace`. Parameter
/// gradients are accumulated into `param_grads`; the input gradient is
/// returned.
template <typename Scalar>
Sequence<Scalar> encoder_backward(const EncoderParams<Scalar>& params,
                                  const EncoderTrace<Scalar>& t,
                                  const Sequence<Scalar>& upstream,
                                  EncoderParams<Scalar>& param_grads)
{
    using Mat = typename EncoderTrace<Scalar>::Mat;
    const Eigen::Index f = t.input.rows();
    const Eigen::Index d = params.dim();
    if (upstream.rows() != f || upstream.cols() != d)
        throw DimensionMismatch("upstream gradient has shape " + shape_str(upstream.rows(), upstream.cols())
                                + ", expected " + shape_str(f, d));
    const Eigen::Index dh = d / t.heads;

    Mat d_out = upstream;
    for (Eigen::Index i = 0; i < f; ++i)
        if (!t.mask(i))
            d_out.row(i).setZero();

    const Mat d_res2 = detail::layer_norm_backward(d_out, t.ln2_hat, t.ln2_rstd, params.ln2_gain,
                                                   param_grads.ln2_gain, param_grads.ln2_bias);
    // residual2 = hidden + ffn(hidden)
    param_grads.ffn_w2.noalias() += t.ffn_act.transpose() * d_res2;
    param_grads.ffn_b2 += d_res2.colwise().sum().transpose();
    Mat d_act = d_res2 * params.ffn_w2.transpose();
    if (t.ffn_dropout.size() != 0)
        d_act.array() *= t.ffn_dropout.array();
    d_act = (t.ffn_pre.array() > Scalar(0)).select(d_act, Scalar(0));
    param_grads.ffn_w1.noalias() += t.hidden.transpose() * d_act;
    param_grads.ffn_b1 += d_act.colwise().sum().transpose();
    Mat d_hidden = d_res2 + d_act * params.ffn_w1.transpose();

    const Mat d_res1 = detail::layer_norm_backward(d_hidden, t.ln1_hat, t.ln1_rstd, params.ln1_gain,
                                                   param_grads.ln1_gain, param_grads.ln1_bias);
    // residual1 = x + dropout(merged * w_out)
    Mat d_attn = d_res1;
    if (t.attn_dropout.size() != 0)
        d_attn.array() *= t.attn_dropout.array();
    param_grads.w_out.noalias() += t.merged.transpose() * d_attn;
    const Mat d_merged = d_attn * params.w_out.transpose();

    const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
    Mat d_query(f, d), d_key(f, d), d_value(f, d);
    for (Eigen::Index h = 0; h < t.heads; ++h) {
        const Mat& a = t.attention[h];
        const auto d_head = d_merged.middleCols(h * dh, dh);
        const Mat d_a = d_head * t.value.middleCols(h * dh, dh).transpose();
        d_value.middleCols(h * dh, dh) = a.transpose() * d_head;
        // softmax backward, row-wise
        const Vector<Scalar> row_dot = (d_a.array() * a.array()).rowwise().sum();
        const Mat d_logits = (a.array() * (d_a.array().colwise() - row_dot.array())) * scale;
        d_query.middleCols(h * dh, dh) = d_logits * t.key.middleCols(h * dh, dh);
        d_key.middleCols(h * dh, dh) = d_logits.transpose() * t.query.middleCols(h * dh, dh);
    }
    param_grads.w_query.noalias() += t.input.transpose() * d_query;
    param_grads.w_key.noalias() += t.input.transpose() * d_key;
    param_grads.w_value.noalias() += t.input.transpose() * d_value;

    Sequence<Scalar> d_x = d_res1;
    d_x.noalias() += d_query * params.w_query.transpose();
    d_x.noalias() += d_key * params.w_key.transpose();
    d_x.noalias() += d_value * params.w_value.transpose();
    return d_x;
}

/// Evaluation-mode backward: recomputes the forward pass without dropout.
template <typename Scalar>
EncoderGradients<Scalar> encoder_backward(const EncoderParams<Scalar>& params,
                                          const EncoderConfig& config,
                                          const Sequence<Scalar>& x,
                                          const FrameMask& mask,
                                          const Sequence<Scalar>& upstream)
{
    const auto trace = encode_trace(params, config.heads, config.dropout_rate, x, mask, false, nullptr);
    EncoderGradients<Scalar> g{EncoderParams<Scalar>::zeros_like(params), {}};
    g.input = encoder_backward(params, trace, upstream, g.params);
    return g;
}

/// Mean over real frames, L2-normalized.
template <typename Scalar>
Vector<Scalar> aggregate_video(const Sequence<Scalar>& refined, const FrameMask& mask)
{
    if (mask.size() != refined.rows())
        throw DimensionMismatch("frame mask length does not match frame count");
    const Eigen::Index n = count_true(mask);
    if (n == 0)
        throw DegenerateInput("cannot aggregate a video with no real frames");
    Vector<Scalar> sum = Vector<Scalar>::Zero(refined.cols());
    for (Eigen::Index i = 0; i < refined.rows(); ++i)
        if (mask(i))
            sum += refined.row(i).transpose();
    const Vector<Scalar> mean = sum / Scalar(n);
    const Scalar norm = mean.norm();
    if (!(norm > Scalar(1e-12)))
        throw DegenerateInput("mean frame descriptor has near-zero norm");
    return mean / norm;
}

template <typename Scalar>
Vector<Scalar> aggregate_video(const Sequence<Scalar>& refined)
{
    return aggregate_video(refined, FrameMask::Constant(refined.rows(), true));
}

/// Gradient of aggregate_video with respect to the refined rows.
template <typename Scalar>
Sequence<Scalar> aggregate_video_backward(const Sequence<Scalar>& refined,
                                          const FrameMask& mask,
                                          const Vector<Scalar>& d_video)
{
    const Eigen::Index n = count_true(mask);
    Vector<Scalar> mean = Vector<Scalar>::Zero(refined.cols());
    for (Eigen::Index i = 0; i < refined.rows(); ++i)
        if (mask(i))
            mean += refined.row(i).transpose();
    mean /= Scalar(n);
    const Scalar norm = mean.norm();
    const Vector<Scalar> z = mean / norm;
    const Vector<Scalar> d_mean = (d_video - z * z.dot(d_video)) / norm;
    Sequence<Scalar> d_rows = Sequence<Scalar>::Zero(refined.rows(), refined.cols());
    for (Eigen::Index i = 0; i < refined.rows(); ++i)
        if (mask(i))
            d_rows.row(i) = d_mean.transpose() / Scalar(n);
    return d_rows;
}

/// Attention each real frame receives, averaged over heads and real query
/// positions and normalized to sum to one. Padded entries are zero.
template <typename Scalar>
Vector<Scalar> mean_attention_response(const EncoderParams<Scalar>& params,
                                       const EncoderConfig& config,
                                       const Sequence<Scalar>& x,
                                       const FrameMask& mask)
{
    const auto t = encode_trace(params, config.heads, config.dropout_rate, x, mask, false, nullptr);
    const Eigen::Index f = x.rows();
    Vector<Scalar> response = Vector<Scalar>::Zero(f);
    for (const auto& a : t.attention)
        for (Eigen::Index i = 0; i < f; ++i)
            if (mask(i))
                response += a.row(i).transpose();
    for (Eigen::Index j = 0; j < f; ++j)
        if (!mask(j))
            response(j) = Scalar(0);
    const Scalar total = response.sum();
    if (!(total > Scalar(0)))
        throw NumericalFailure("attention response does not sum to a positive value");
    return response / total;
}

} // namespace tca
