#include "tca/trainer.hpp"

#include "parallel.hpp"
#include "tca/io.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

namespace tca {

namespace fs = std::filesystem;
using json = nlohmann::json;

// --------------------------------------------------------------- manifest

void DatasetManifest::validate() const
{
    if (core_pairs.empty())
        throw DataError("manifest has no core pairs");
    if (distractors.empty())
        throw DataError("manifest has no distractors");
    std::set<std::pair<std::string, std::string>> seen_pairs;
    std::set<std::string> core;
    for (const auto& [a, b] : core_pairs) {
        if (a == b)
            throw DataError("core pair pairs video '" + a + "' with itself");
        const auto key = a < b ? std::make_pair(a, b) : std::make_pair(b, a);
        if (!seen_pairs.insert(key).second)
            throw DataError("core pair (" + a + ", " + b + ") is listed twice");
        core.insert(a);
        core.insert(b);
    }
    std::set<std::string> seen;
    for (const auto& id : distractors) {
        if (!seen.insert(id).second)
            throw DataError("distractor '" + id + "' is listed twice");
        if (core.count(id))
            throw DataError("video '" + id + "' is both a core video and a distractor");
    }
    for (const auto& id : core)
        if (!features.count(id))
            throw DataError("core video '" + id + "' has no feature file");
}

std::vector<std::string> DatasetManifest::core_ids() const
{
    std::set<std::string> ids;
    for (const auto& [a, b] : core_pairs) {
        ids.insert(a);
        ids.insert(b);
    }
    return {ids.begin(), ids.end()};
}

DatasetManifest DatasetManifest::load(const fs::path& path)
{
    json doc;
    try {
        doc = json::parse(io::read_file(path));
    } catch (const json::exception& e) {
        throw MalformedInput("manifest '" + path.string() + "' is not valid JSON: " + e.what());
    }
    DatasetManifest m;
    try {
        for (const auto& pair : doc.at("core_pairs")) {
            if (!pair.is_array() || pair.size() != 2)
                throw MalformedInput("every core pair must be a two-element array");
            m.core_pairs.emplace_back(pair[0].get<std::string>(), pair[1].get<std::string>());
        }
        m.distractors = doc.at("distractors").get<std::vector<std::string>>();
        const fs::path base = path.parent_path();
        for (const auto& [id, rel] : doc.at("features").items())
            m.features[id] = base / rel.get<std::string>();
    } catch (const json::exception& e) {
        throw MalformedInput("manifest '" + path.string() + "' is malformed: " + e.what());
    }
    return m;
}

std::string DatasetManifest::to_json() const
{
    json doc;
    doc["core_pairs"] = json::array();
    for (const auto& [a, b] : core_pairs)
        doc["core_pairs"].push_back({a, b});
    doc["distractors"] = distractors;
    doc["features"] = json::object();
    for (const auto& [id, p] : features)
        doc["features"][id] = p.generic_string();
    return doc.dump(2) + "\n";
}

RetrievalCorpus load_training_corpus(DatasetManifest& manifest)
{
    std::map<fs::path, RetrievalCorpus> files;
    auto lookup = [&](const std::string& id) -> const SequenceD* {
        const auto it = manifest.features.find(id);
        if (it == manifest.features.end())
            return nullptr;
        auto fit = files.find(it->second);
        if (fit == files.end()) {
            RetrievalCorpus c;
            if (fs::exists(it->second))
                c = io::read_corpus(it->second);
            fit = files.emplace(it->second, std::move(c)).first;
        }
        const auto& c = fit->second;
        if (auto e = c.find(id); e != c.end())
            return &e->second;
        if (c.size() == 1)
            return &c.begin()->second;
        return nullptr;
    };

    RetrievalCorpus corpus;
    for (const auto& id : manifest.core_ids()) {
        const SequenceD* seq = lookup(id);
        if (!seq)
            throw DataError("features for core video '" + id + "' are missing");
        corpus[id] = *seq;
    }
    std::vector<std::string> kept;
    for (const auto& id : manifest.distractors) {
        const SequenceD* seq = lookup(id);
        if (!seq) {
            std::cerr << "warning: distractor '" << id << "' has no features; skipped\n";
            continue;
        }
        corpus[id] = *seq;
        kept.push_back(id);
    }
    manifest.distractors = std::move(kept);
    if (manifest.distractors.empty())
        throw DataError("no distractor features could be loaded");
    Eigen::Index dim = -1;
    for (const auto& [id, seq] : corpus) {
        if (dim < 0)
            dim = seq.cols();
        else if (seq.cols() != dim)
            throw DimensionMismatch("video '" + id + "' has descriptor dimension " + std::to_string(seq.cols())
                                    + ", expected " + std::to_string(dim));
    }
    return corpus;
}

// ------------------------------------------------------------ memory bank

void MemoryBank::push(const VectorD& descriptor)
{
    if (std::abs(descriptor.norm() - 1.0) > 1e-6)
        throw DegenerateInput("memory bank only stores unit-norm descriptors");
    if (capacity_ == 0)
        return;
    if (store_.size() == capacity_)
        store_.pop_front();
    store_.push_back(descriptor);
}

SequenceD MemoryBank::matrix(Eigen::Index dim) const
{
    SequenceD m(Eigen::Index(store_.size()), dim);
    Eigen::Index i = 0;
    for (const auto& v : store_)
        m.row(i++) = v.transpose();
    return m;
}

// ------------------------------------------------------------- optimizer

void TrainingConfig::validate() const
{
    if (batch_size == 0 || negatives_per_step == 0 || bank_capacity == 0 || pad_length < 1)
        throw UsageError("batch size, negatives per step, bank capacity and pad length must be positive");
    if (bank_capacity < negatives_per_step)
        throw UsageError("bank capacity must be at least the number of negatives per step");
    if (!(base_lr >= 0.0) || !std::isfinite(base_lr))
        throw UsageError("learning rate must be a finite non-negative number");
    loss.validate();
}

AdamState AdamState::for_params(const EncoderParams<double>& params)
{
    AdamState s;
    s.first_moment = EncoderParams<double>::zeros_like(params);
    s.second_moment = EncoderParams<double>::zeros_like(params);
    return s;
}

double lr_at(std::size_t step_index, std::size_t total_steps, double base_lr)
{
    if (total_steps == 0)
        throw UsageError("cosine schedule needs at least one step");
    if (step_index > total_steps)
        throw UsageError("step index beyond the end of the schedule");
    const double pi = std::acos(-1.0);
    return base_lr * (1.0 + std::cos(pi * double(step_index) / double(total_steps))) / 2.0;
}

void adam_update(AdamState& state, EncoderParams<double>& params, const EncoderParams<double>& grads, double lr)
{
    bool finite = true;
    bool shapes = true;
    visit_tensors(
        [&](const char*, const auto& p, const auto& g) {
            shapes = shapes && p.rows() == g.rows() && p.cols() == g.cols();
            finite = finite && g.allFinite();
        },
        params, grads);
    if (!shapes)
        throw DimensionMismatch("gradient shapes do not match parameter shapes");
    if (!finite)
        throw NumericalFailure("non-finite gradient passed to the optimizer");

    ++state.step;
    const double c1 = 1.0 - std::pow(state.beta1, double(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, double(state.step));
    const double b1 = state.beta1, b2 = state.beta2, eps = state.epsilon;
    visit_tensors(
        [&](const char*, auto& p, const auto& g, auto& m, auto& v) {
            m = b1 * m + (1.0 - b1) * g;
            v.array() = b2 * v.array() + (1.0 - b2) * g.array().square();
            p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
        },
        params, grads, state.first_moment, state.second_moment);
}

// --------------------------------------------------------------- sampling

PreparedSequence prepare_sequence(const SequenceD& x, Eigen::Index pad_length, bool training, std::mt19937_64& rng)
{
    const Eigen::Index f = x.rows();
    if (f < 1)
        throw DataError("cannot prepare an empty frame sequence");
    if (!training)
        return {x, FrameMask::Constant(f, true)};
    if (pad_length < 1)
        throw UsageError("pad length must be positive");
    if (f > pad_length) {
        std::uniform_int_distribution<Eigen::Index> start(0, f - pad_length);
        const Eigen::Index s = start(rng);
        return {x.middleRows(s, pad_length), FrameMask::Constant(pad_length, true)};
    }
    PreparedSequence out{SequenceD::Zero(pad_length, x.cols()), FrameMask::Constant(pad_length, false)};
    out.frames.topRows(f) = x;
    out.mask.head(f).setConstant(true);
    return out;
}

std::vector<std::string> sample_negatives(const std::vector<std::string>& distractors, std::size_t n,
                                          std::mt19937_64& rng)
{
    if (distractors.empty())
        throw DataError("no distractors to sample negatives from");
    if (n > distractors.size())
        throw DataError("cannot draw " + std::to_string(n) + " distinct negatives from "
                        + std::to_string(distractors.size()) + " distractors");
    std::vector<std::size_t> idx(distractors.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < n; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    std::vector<std::string> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        out.push_back(distractors[idx[i]]);
    return out;
}

std::vector<Batch> sample_epoch(const DatasetManifest& manifest, std::mt19937_64& rng, std::size_t batch_size,
                                std::size_t n)
{
    if (manifest.core_pairs.empty())
        throw DataError("no core pairs to sample from");
    if (batch_size == 0)
        throw UsageError("batch size must be positive");
    std::vector<std::size_t> order(manifest.core_pairs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<Batch> batches;
    for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
        Batch b;
        const std::size_t end = std::min(order.size(), begin + batch_size);
        for (std::size_t i = begin; i < end; ++i) {
            auto [a, p] = manifest.core_pairs[order[i]];
            if (rng() & 1u)
                std::swap(a, p);
            b.pairs.emplace_back(std::move(a), std::move(p));
        }
        b.negatives = sample_negatives(manifest.distractors, n, rng);
        batches.push_back(std::move(b));
    }
    return batches;
}

// ---------------------------------------------------------------- trainer

namespace {

void add_into(EncoderParams<double>& acc, const EncoderParams<double>& g)
{
    visit_tensors([](const char*, auto& a, const auto& b) { a += b; }, acc, g);
}

constexpr std::size_t kGradientChunk = 16;

} // namespace

Trainer::Trainer(EncoderConfig encoder, TrainingConfig config, EncoderParams<double> params,
                 const RetrievalCorpus& corpus)
    : encoder_(encoder),
      config_(std::move(config)),
      params_(std::move(params)),
      adam_(AdamState::for_params(params_)),
      bank_(config_.bank_capacity),
      rng_(config_.seed),
      corpus_(corpus)
{
    encoder_.validate();
    config_.validate();
}

std::pair<double, EncoderParams<double>> Trainer::loss_and_gradients(const Batch& batch, std::mt19937_64& rng,
                                                                     std::vector<VectorD>* fresh_out) const
{
    const std::size_t n_pairs = batch.pairs.size();
    const std::size_t n_neg = batch.negatives.size();
    if (n_pairs == 0)
        throw DataError("empty training batch");
    const Eigen::Index d = encoder_.dim;

    std::vector<const std::string*> ids;
    for (const auto& pr : batch.pairs)
        ids.push_back(&pr.first);
    for (const auto& pr : batch.pairs)
        ids.push_back(&pr.second);
    for (const auto& id : batch.negatives)
        ids.push_back(&id);

    std::vector<PreparedSequence> prepared;
    std::vector<std::uint64_t> seeds;
    prepared.reserve(ids.size());
    for (const auto* id : ids) {
        const auto it = corpus_.find(*id);
        if (it == corpus_.end())
            throw DataError("no features loaded for video '" + *id + "'");
        if (it->second.cols() != d)
            throw DimensionMismatch("video '" + *id + "' has dimension " + std::to_string(it->second.cols())
                                    + " but the encoder expects " + std::to_string(d));
        prepared.push_back(prepare_sequence(it->second, config_.pad_length, true, rng));
        seeds.push_back(rng());
    }

    std::vector<EncoderTrace<double>> traces(ids.size());
    std::vector<VectorD> z(ids.size());
    detail::parallel_for(ids.size(), config_.threads, [&](std::size_t i) {
        std::mt19937_64 local(seeds[i]);
        traces[i] = encode_trace(params_, encoder_.heads, encoder_.dropout_rate, prepared[i].frames,
                                 prepared[i].mask, true, &local);
        z[i] = aggregate_video(traces[i].output, prepared[i].mask);
    });

    const SequenceD banked = bank_.matrix(d);
    SequenceD fresh(Eigen::Index(n_neg), d);
    for (std::size_t k = 0; k < n_neg; ++k)
        fresh.row(Eigen::Index(k)) = z[2 * n_pairs + k].transpose();

    std::vector<VectorD> dz(ids.size(), VectorD::Zero(d));
    const double weight = 1.0 / double(n_pairs);
    const Eigen::Index n_bank = banked.rows();
    double loss_sum = 0.0;
    for (std::size_t a = 0; a < n_pairs; ++a) {
        const VectorD& za = z[a];
        const VectorD& zp = z[n_pairs + a];
        ScoreSet s;
        s.positive = za.dot(zp);
        s.negatives.resize(n_bank + Eigen::Index(n_neg));
        s.negatives.head(n_bank) = banked * za;
        s.negatives.tail(Eigen::Index(n_neg)) = fresh * za;
        const LossOutput out = evaluate_loss(s, config_.loss);
        if (!std::isfinite(out.value)) {
            std::ostringstream msg;
            msg << "non-finite loss for anchor '" << batch.pairs[a].first << "' (s_p = " << s.positive
                << ", max s_n = " << s.negatives.maxCoeff() << ", loss = " << to_string(config_.loss.kind) << ")";
            throw NumericalFailure(msg.str());
        }
        loss_sum += out.value;
        dz[a] += weight * (out.d_positive * zp + banked.transpose() * out.d_negatives.head(n_bank)
                           + fresh.transpose() * out.d_negatives.tail(Eigen::Index(n_neg)));
        dz[n_pairs + a] += weight * out.d_positive * za;
        for (std::size_t k = 0; k < n_neg; ++k)
            dz[2 * n_pairs + k] += weight * out.d_negatives(n_bank + Eigen::Index(k)) * za;
    }

    // Per-sequence gradients are reduced in a fixed order so the result does
    // not depend on the thread count.
    auto grads = EncoderParams<double>::zeros_like(params_);
    for (std::size_t begin = 0; begin < ids.size(); begin += kGradientChunk) {
        const std::size_t count = std::min(kGradientChunk, ids.size() - begin);
        std::vector<EncoderParams<double>> partial(count);
        detail::parallel_for(count, config_.threads, [&](std::size_t c) {
            const std::size_t i = begin + c;
            partial[c] = EncoderParams<double>::zeros_like(params_);
            const SequenceD upstream = aggregate_video_backward(traces[i].output, prepared[i].mask, dz[i]);
            encoder_backward(params_, traces[i], upstream, partial[c]);
        });
        for (const auto& g : partial)
            add_into(grads, g);
    }

    if (fresh_out) {
        fresh_out->assign(z.begin() + std::ptrdiff_t(2 * n_pairs), z.end());
    }
    return {loss_sum * weight, std::move(grads)};
}

StepResult Trainer::step(const Batch& batch, double lr)
{
    std::vector<VectorD> fresh;
    auto [loss, grads] = loss_and_gradients(batch, rng_, &fresh);
    adam_update(adam_, params_, grads, lr);
    for (const auto& v : fresh)
        bank_.push(v);
    return {loss, bank_.size()};
}

std::string LogRecord::to_json() const
{
    json j;
    j["step"] = step;
    j["epoch"] = epoch;
    j["loss"] = loss;
    j["lr"] = lr;
    j["bank_size"] = bank_size;
    return j.dump();
}

// ------------------------------------------------------------ resume state

fs::path epoch_checkpoint_path(const fs::path& checkpoint, std::size_t epoch)
{
    fs::path p = checkpoint;
    char buf[32];
    std::snprintf(buf, sizeof buf, ".epoch%03zu", epoch);
    p += buf;
    return p;
}

fs::path state_path(const fs::path& checkpoint)
{
    fs::path p = checkpoint;
    p += ".state";
    return p;
}

namespace {

struct ResumeState {
    std::size_t epochs_done = 0;
    std::size_t global_step = 0;
};

template <typename Mat>
void put_f64s(io::ByteWriter& w, const Mat& m)
{
    for (Eigen::Index i = 0; i < m.size(); ++i)
        w.f64(m.data()[i]);
}

template <typename Mat>
void get_f64s(io::ByteReader& r, Mat& m)
{
    for (Eigen::Index i = 0; i < m.size(); ++i)
        m.data()[i] = r.f64();
}

void write_state(const fs::path& path, Trainer& t, const ResumeState& rs)
{
    io::ByteWriter w;
    w.magic("TCAS");
    w.u32(io::kFormatVersion);
    w.u32(std::uint32_t(t.encoder_config().dim));
    w.u32(std::uint32_t(t.encoder_config().ffn_dim));
    w.u64(rs.epochs_done);
    w.u64(rs.global_step);
    std::ostringstream rng_text;
    rng_text << t.rng();
    w.u32(std::uint32_t(rng_text.str().size()));
    w.bytes(rng_text.str());
    w.u64(t.optimizer().step);
    visit_tensors(
        [&](const char*, const auto& p, const auto& m, const auto& v) {
            put_f64s(w, p);
            put_f64s(w, m);
            put_f64s(w, v);
        },
        t.params(), t.optimizer().first_moment, t.optimizer().second_moment);
    w.u32(std::uint32_t(t.bank().size()));
    for (const auto& v : t.bank().entries())
        put_f64s(w, v);
    io::atomic_write(path, w.str());
}

ResumeState read_state(const fs::path& path, Trainer& t)
{
    const std::string data = io::read_file(path);
    io::ByteReader r(data, "training state '" + path.string() + "'");
    r.expect_magic("TCAS");
    if (r.u32() != io::kFormatVersion)
        throw MalformedInput("training state has an unsupported version");
    if (r.u32() != t.encoder_config().dim || r.u32() != t.encoder_config().ffn_dim)
        throw DimensionMismatch("training state does not match the encoder configuration");
    ResumeState rs;
    rs.epochs_done = r.u64();
    rs.global_step = r.u64();
    std::istringstream rng_text(r.bytes(r.u32()));
    rng_text >> t.rng();
    if (!rng_text)
        throw MalformedInput("training state has a corrupt random generator state");
    t.optimizer().step = r.u64();
    visit_tensors(
        [&](const char*, auto& p, auto& m, auto& v) {
            get_f64s(r, p);
            get_f64s(r, m);
            get_f64s(r, v);
        },
        t.params(), t.optimizer().first_moment, t.optimizer().second_moment);
    const std::uint32_t banked = r.u32();
    for (std::uint32_t i = 0; i < banked; ++i) {
        VectorD v(t.encoder_config().dim);
        get_f64s(r, v);
        t.bank().push(v);
    }
    r.expect_done();
    return rs;
}

} // namespace

// -------------------------------------------------------------------- fit

FitResult fit(DatasetManifest manifest, const EncoderConfig& encoder, const TrainingConfig& config,
              const FitOptions& options)
{
    encoder.validate();
    config.validate();
    manifest.validate();
    const RetrievalCorpus corpus = load_training_corpus(manifest);
    return fit(manifest, corpus, encoder, config, options);
}

FitResult fit(const DatasetManifest& manifest, const RetrievalCorpus& corpus, const EncoderConfig& encoder,
              const TrainingConfig& config, const FitOptions& options)
{
    encoder.validate();
    config.validate();
    manifest.validate();
    if (config.negatives_per_step > manifest.distractors.size())
        throw DataError("negatives per step (" + std::to_string(config.negatives_per_step)
                        + ") exceeds the number of distractors (" + std::to_string(manifest.distractors.size())
                        + ")");

    Trainer trainer(encoder, config, init_encoder<double>(encoder), corpus);
    ResumeState rs;
    if (options.resume)
        rs = read_state(*options.resume, trainer);

    std::ofstream log;
    if (options.log) {
        if (options.log->has_parent_path())
            fs::create_directories(options.log->parent_path());
        log.open(*options.log, options.resume ? std::ios::app : std::ios::trunc);
        if (!log)
            throw DataError("cannot open training log '" + options.log->string() + "'");
    }

    const std::size_t steps_per_epoch =
        (manifest.core_pairs.size() + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = std::max<std::size_t>(1, config.epochs * steps_per_epoch);

    FitResult result;
    for (std::size_t epoch = rs.epochs_done; epoch < config.epochs; ++epoch) {
        const auto batches = sample_epoch(manifest, trainer.rng(), config.batch_size, config.negatives_per_step);
        double epoch_sum = 0.0;
        for (const auto& batch : batches) {
            LogRecord rec;
            rec.step = rs.global_step;
            rec.epoch = epoch;
            rec.lr = lr_at(std::min(rs.global_step, total_steps), total_steps, config.base_lr);
            const StepResult sr = trainer.step(batch, rec.lr);
            rec.loss = sr.loss;
            rec.bank_size = sr.bank_size;
            epoch_sum += sr.loss;
            ++rs.global_step;
            if (log)
                log << rec.to_json() << '\n';
            if (options.on_step)
                options.on_step(rec);
            result.log.push_back(rec);
        }
        result.epoch_mean_loss.push_back(epoch_sum / double(batches.size()));
        rs.epochs_done = epoch + 1;
        if (log)
            log.flush();
        if (!options.checkpoint.empty()) {
            io::write_checkpoint(epoch_checkpoint_path(options.checkpoint, epoch), encoder, trainer.params());
            write_state(state_path(options.checkpoint), trainer, rs);
        }
    }
    if (!options.checkpoint.empty())
        io::write_checkpoint(options.checkpoint, encoder, trainer.params());
    result.params = trainer.params();
    return result;
}

// ------------------------------------------------------------- embedding

EmbeddedCorpus embed_corpus(const EncoderParams<double>& params, const EncoderConfig& config,
                            const RetrievalCorpus& corpus, unsigned threads)
{
    std::vector<const RetrievalCorpus::value_type*> entries;
    for (const auto& e : corpus)
        entries.push_back(&e);
    std::vector<SequenceD> refined(entries.size());
    std::vector<SequenceD> video(entries.size());
    detail::parallel_for(entries.size(), threads, [&](std::size_t i) {
        const SequenceD& x = entries[i]->second;
        const FrameMask mask = FrameMask::Constant(x.rows(), true);
        refined[i] = encode_frames(params, config, x, mask);
        video[i] = aggregate_video(refined[i], mask).transpose();
    });
    EmbeddedCorpus out;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        out.frames.emplace(entries[i]->first, std::move(refined[i]));
        out.videos.emplace(entries[i]->first, std::move(video[i]));
    }
    return out;
}

} // namespace tca
