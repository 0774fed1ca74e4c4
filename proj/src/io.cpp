#include "tca/io.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace tca::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace fs = std::filesystem;
using json = nlohmann::json;

void atomic_write(const fs::path& path, const std::string& bytes)
{
    if (path.has_parent_path() && !path.parent_path().empty())
        fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp-" + std::to_string(std::random_device{}());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw DataError("cannot open '" + tmp.string() + "' for writing");
        out.write(bytes.data(), std::streamsize(bytes.size()));
        out.flush();
        if (!out) {
            out.close();
            fs::remove(tmp);
            throw DataError("failed writing '" + tmp.string() + "'");
        }
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        throw DataError("cannot move output into place at '" + path.string() + "': " + ec.message());
    }
}

std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------- bytes

void ByteWriter::u32(std::uint32_t v)
{
    char b[4];
    std::memcpy(b, &v, 4);
    out_.append(b, 4);
}

void ByteWriter::u64(std::uint64_t v)
{
    char b[8];
    std::memcpy(b, &v, 8);
    out_.append(b, 8);
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteReader::need(std::size_t n) const
{
    if (data_.size() - pos_ < n)
        throw MalformedInput(what_ + " is truncated");
}

void ByteReader::expect_magic(const char (&tag)[5])
{
    need(4);
    if (data_.compare(pos_, 4, tag, 4) != 0)
        throw MalformedInput(what_ + " does not start with magic '" + std::string(tag) + "'");
    pos_ += 4;
}

std::uint32_t ByteReader::u32()
{
    need(4);
    std::uint32_t v;
    std::memcpy(&v, data_.data() + pos_, 4);
    pos_ += 4;
    return v;
}

std::uint64_t ByteReader::u64()
{
    need(8);
    std::uint64_t v;
    std::memcpy(&v, data_.data() + pos_, 8);
    pos_ += 8;
    return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }
double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::string ByteReader::bytes(std::size_t n)
{
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
}

void ByteReader::expect_done() const
{
    if (!done())
        throw MalformedInput(what_ + " has trailing bytes");
}

namespace {

void expect_version(ByteReader& r, const std::string& what)
{
    const auto v = r.u32();
    if (v != kFormatVersion)
        throw MalformedInput(what + " has unsupported version " + std::to_string(v));
}

template <typename Mat>
void read_f32s(ByteReader& r, Mat& m)
{
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            const float v = r.f32();
            if (!std::isfinite(v))
                throw MalformedInput("tensor payload contains non-finite values");
            m(i, j) = v;
        }
}

} // namespace

// ---------------------------------------------------------- feature maps

std::vector<FeatureMapStack<double>> read_feature_maps(const fs::path& path)
{
    const std::string data = read_file(path);
    ByteReader r(data, "feature map file '" + path.string() + "'");
    r.expect_magic("TCAF");
    expect_version(r, "feature map file");
    const std::uint32_t frames = r.u32();
    const std::uint32_t layers = r.u32();
    if (frames == 0 || layers == 0)
        throw MalformedInput("feature map file '" + path.string() + "' has no frames or no layers");
    std::vector<FeatureMapStack<double>> out(frames);
    for (std::uint32_t f = 0; f < frames; ++f) {
        out[f].frame_index = f;
        out[f].layers.resize(layers);
    }
    for (std::uint32_t k = 0; k < layers; ++k) {
        const std::uint32_t h = r.u32(), w = r.u32(), c = r.u32();
        if (h == 0 || w == 0 || c == 0)
            throw MalformedInput("feature layer " + std::to_string(k) + " has an empty grid");
        for (std::uint32_t f = 0; f < frames; ++f) {
            auto& layer = out[f].layers[k];
            layer.height = h;
            layer.width = w;
            layer.activations.resize(Eigen::Index(h) * w, c);
            read_f32s(r, layer.activations);
        }
    }
    r.expect_done();
    return out;
}

void write_feature_maps(const fs::path& path, const std::vector<FeatureMapStack<double>>& frames)
{
    if (frames.empty())
        throw DataError("refusing to write an empty feature map file");
    const std::size_t layers = frames.front().layers.size();
    ByteWriter w;
    w.magic("TCAF");
    w.u32(kFormatVersion);
    w.u32(std::uint32_t(frames.size()));
    w.u32(std::uint32_t(layers));
    for (std::size_t k = 0; k < layers; ++k) {
        const auto& first = frames.front().layers.at(k);
        w.u32(std::uint32_t(first.height));
        w.u32(std::uint32_t(first.width));
        w.u32(std::uint32_t(first.channels()));
        for (const auto& frame : frames) {
            const auto& layer = frame.layers.at(k);
            if (layer.height != first.height || layer.width != first.width
                || layer.channels() != first.channels())
                throw DimensionMismatch("feature layer shapes differ across frames");
            w.f32s(layer.activations);
        }
    }
    atomic_write(path, w.str());
}

// -------------------------------------------------------------- whitening

WhiteningModel<double> read_whitening(const fs::path& path)
{
    const std::string data = read_file(path);
    ByteReader r(data, "whitening file '" + path.string() + "'");
    r.expect_magic("TCAW");
    expect_version(r, "whitening file");
    const std::uint32_t din = r.u32(), dout = r.u32();
    if (din == 0 || dout == 0 || dout > din)
        throw MalformedInput("whitening file has invalid dimensions");
    WhiteningModel<double> m;
    m.mean.resize(din);
    m.projection.resize(din, dout);
    read_f32s(r, m.mean);
    read_f32s(r, m.projection);
    r.expect_done();
    return m;
}

void write_whitening(const fs::path& path, const WhiteningModel<double>& model)
{
    ByteWriter w;
    w.magic("TCAW");
    w.u32(kFormatVersion);
    w.u32(std::uint32_t(model.input_dim()));
    w.u32(std::uint32_t(model.output_dim()));
    w.f32s(model.mean);
    w.f32s(model.projection);
    atomic_write(path, w.str());
}

// ------------------------------------------------------------- checkpoint

std::string encode_checkpoint(const EncoderConfig& config, const EncoderParams<double>& params)
{
    ByteWriter w;
    w.magic("TCAE");
    w.u32(kFormatVersion);
    w.u32(std::uint32_t(config.dim));
    w.u32(std::uint32_t(config.heads));
    w.u32(std::uint32_t(config.ffn_dim));
    w.f64(config.dropout_rate);
    w.u64(config.seed);
    w.u32(12);
    visit_tensors(
        [&w](const char*, const auto& t) {
            w.u32(std::uint32_t(t.rows()));
            w.u32(std::uint32_t(t.cols()));
            w.f32s(t);
        },
        params);
    return w.str();
}

Checkpoint decode_checkpoint(const std::string& bytes)
{
    ByteReader r(bytes, "checkpoint");
    r.expect_magic("TCAE");
    expect_version(r, "checkpoint");
    Checkpoint c;
    c.config.dim = r.u32();
    c.config.heads = r.u32();
    c.config.ffn_dim = r.u32();
    c.config.dropout_rate = r.f64();
    c.config.seed = r.u64();
    try {
        c.config.validate();
    } catch (const UsageError& e) {
        throw MalformedInput(std::string("checkpoint config is invalid: ") + e.what());
    }
    if (r.u32() != 12)
        throw MalformedInput("checkpoint has an unexpected tensor count");
    c.params = EncoderParams<double>::zeros(c.config.dim, c.config.ffn_dim);
    visit_tensors(
        [&r](const char* name, auto& t) {
            const auto rows = r.u32(), cols = r.u32();
            if (rows != t.rows() || cols != t.cols())
                throw MalformedInput(std::string("checkpoint tensor '") + name + "' has the wrong shape");
            read_f32s(r, t);
        },
        c.params);
    r.expect_done();
    return c;
}

Checkpoint read_checkpoint(const fs::path& path)
{
    return decode_checkpoint(read_file(path));
}

void write_checkpoint(const fs::path& path, const EncoderConfig& config, const EncoderParams<double>& params)
{
    atomic_write(path, encode_checkpoint(config, params));
}

// ----------------------------------------------------------------- corpus

RetrievalCorpus read_corpus(const fs::path& path)
{
    const std::string data = read_file(path);
    ByteReader r(data, "corpus file '" + path.string() + "'");
    r.expect_magic("TCAD");
    expect_version(r, "corpus file");
    const std::uint32_t count = r.u32();
    RetrievalCorpus corpus;
    for (std::uint32_t v = 0; v < count; ++v) {
        const std::uint32_t len = r.u32();
        std::string id = r.bytes(len);
        const std::uint32_t f = r.u32(), d = r.u32();
        if (f == 0 || d == 0)
            throw MalformedInput("corpus entry '" + id + "' is empty");
        SequenceD seq(f, d);
        read_f32s(r, seq);
        if (!corpus.emplace(id, std::move(seq)).second)
            throw MalformedInput("corpus file repeats id '" + id + "'");
    }
    r.expect_done();
    return corpus;
}

void write_corpus(const fs::path& path, const RetrievalCorpus& corpus)
{
    ByteWriter w;
    w.magic("TCAD");
    w.u32(kFormatVersion);
    w.u32(std::uint32_t(corpus.size()));
    for (const auto& [id, seq] : corpus) {
        w.u32(std::uint32_t(id.size()));
        w.bytes(id);
        w.u32(std::uint32_t(seq.rows()));
        w.u32(std::uint32_t(seq.cols()));
        w.f32s(seq);
    }
    atomic_write(path, w.str());
}

// ------------------------------------------------------------------ JSON

GroundTruth read_ground_truth(const fs::path& path)
{
    json doc;
    try {
        doc = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw MalformedInput("ground truth '" + path.string() + "' is not valid JSON: " + e.what());
    }
    if (!doc.is_object())
        throw MalformedInput("ground truth must be a JSON object");
    GroundTruth gt;
    for (const auto& [qid, tiers] : doc.items()) {
        if (!tiers.is_object())
            throw MalformedInput("ground truth entry for '" + qid + "' must map tier names to id lists");
        for (const auto& [tier, ids] : tiers.items()) {
            if (!ids.is_array())
                throw MalformedInput("ground truth tier '" + tier + "' of '" + qid + "' must be an array");
            auto& set = gt[qid][tier];
            for (const auto& id : ids)
                set.insert(id.get<std::string>());
        }
    }
    return gt;
}

void write_ground_truth(const fs::path& path, const GroundTruth& gt)
{
    json doc = json::object();
    for (const auto& [qid, tiers] : gt)
        for (const auto& [tier, ids] : tiers)
            doc[qid][tier] = std::vector<std::string>(ids.begin(), ids.end());
    atomic_write(path, doc.dump(2) + "\n");
}

std::string report_to_json(const EvaluationReport& report, bool include_timing)
{
    json doc;
    doc["measure"] = to_string(report.measure);
    doc["tiers"] = json::object();
    for (const auto& [tier, tr] : report.tiers) {
        json t;
        t["mAP"] = tr.mean_ap;
        t["queries"] = tr.average_precision.size();
        t["average_precision"] = json::object();
        for (const auto& [qid, ap] : tr.average_precision)
            t["average_precision"][qid] = ap;
        t["skipped"] = tr.skipped;
        doc["tiers"][tier] = t;
    }
    if (include_timing)
        doc["timing"] = {{"similarity_seconds", report.similarity_seconds},
                         {"total_seconds", report.total_seconds}};
    return doc.dump(2) + "\n";
}

} // namespace tca::io
