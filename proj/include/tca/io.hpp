#pragma once

// Binary tensor formats (little-endian, f32 payloads) and JSON documents.
//
//   TCAF  feature maps of one video: magic, version, frames, K, then per
//         layer h, w, c followed by frames*h*w*c activations (frame-major,
//         row-major, channel fastest).
//   TCAW  whitening model: magic, version, D_in, D_out, mean, projection
//         (D_in x D_out row-major).
//   TCAE  encoder checkpoint: magic, version, config block, tensor count,
//         then per tensor rows, cols and data in visit_tensors order.
//   TCAD  descriptor corpus: magic, version, count, then per video id
//         length, UTF-8 id, f, d and f x d rows.

#include "tca/encoder.hpp"
#include "tca/features.hpp"
#include "tca/retrieval.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace tca::io {

inline constexpr std::uint32_t kFormatVersion = 1;

/// Writes to a sibling temporary file and renames it over `path`.
void atomic_write(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

std::vector<FeatureMapStack<double>> read_feature_maps(const std::filesystem::path& path);
void write_feature_maps(const std::filesystem::path& path, const std::vector<FeatureMapStack<double>>& frames);

WhiteningModel<double> read_whitening(const std::filesystem::path& path);
void write_whitening(const std::filesystem::path& path, const WhiteningModel<double>& model);

struct Checkpoint {
    EncoderConfig config;
    EncoderParams<double> params;
};

std::string encode_checkpoint(const EncoderConfig& config, const EncoderParams<double>& params);
Checkpoint decode_checkpoint(const std::string& bytes);
Checkpoint read_checkpoint(const std::filesystem::path& path);
void write_checkpoint(const std::filesystem::path& path, const EncoderConfig& config,
                      const EncoderParams<double>& params);

RetrievalCorpus read_corpus(const std::filesystem::path& path);
void write_corpus(const std::filesystem::path& path, const RetrievalCorpus& corpus);

GroundTruth read_ground_truth(const std::filesystem::path& path);
void write_ground_truth(const std::filesystem::path& path, const GroundTruth& gt);

std::string report_to_json(const EvaluationReport& report, bool include_timing = false);

/// Little-endian byte sink.
class ByteWriter {
public:
    void magic(const char (&tag)[5]) { out_.append(tag, 4); }
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f32(float v);
    void f64(double v);
    void bytes(const std::string& s) { out_ += s; }
    template <typename Derived>
    void f32s(const Eigen::DenseBase<Derived>& m)
    {
        // Row-major traversal regardless of storage order.
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j)
                f32(float(m(i, j)));
    }
    const std::string& str() const { return out_; }

private:
    std::string out_;
};

/// Bounds-checked little-endian reader; throws MalformedInput on overrun.
class ByteReader {
public:
    explicit ByteReader(const std::string& data, std::string what = "file")
        : data_(data), what_(std::move(what))
    {
    }
    void expect_magic(const char (&tag)[5]);
    std::uint32_t u32();
    std::uint64_t u64();
    float f32();
    double f64();
    std::string bytes(std::size_t n);
    bool done() const { return pos_ == data_.size(); }
    void expect_done() const;

private:
    void need(std::size_t n) const;
    const std::string& data_;
    std::string what_;
    std::size_t pos_ = 0;
};

} // namespace tca::io
