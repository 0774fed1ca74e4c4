#include "tca/commands.hpp"

#include "parallel.hpp"
#include "tca/io.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <iostream>
#include <set>

namespace tca::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

PoolingMode parse_pooling_mode(const std::string& name)
{
    if (name == "imac")
        return PoolingMode::IMac;
    if (name == "l3-irmac")
        return PoolingMode::L3IRMac;
    throw UsageError("unknown pooling mode '" + name + "' (expected imac or l3-irmac)");
}

namespace {

std::string stem_id(const fs::path& p)
{
    std::string id = p.stem().string();
    if (id.empty())
        throw UsageError("cannot derive a video id from '" + p.string() + "'");
    return id;
}

void require_inputs(const std::vector<fs::path>& inputs)
{
    if (inputs.empty())
        throw UsageError("no input feature-map files given");
    std::set<std::string> ids;
    for (const auto& p : inputs)
        if (!ids.insert(stem_id(p)).second)
            throw UsageError("two inputs share the video id '" + stem_id(p) + "'");
}

void write_text(const std::optional<fs::path>& output, const std::string& text)
{
    if (output)
        io::atomic_write(*output, text);
    else
        std::cout << text;
}

} // namespace

void cmd_extract(const ExtractOptions& options)
{
    require_inputs(options.inputs);
    if (options.output.empty())
        throw UsageError("extract needs an output path");
    const auto model = io::read_whitening(options.whitening);
    RetrievalCorpus corpus;
    for (const auto& path : options.inputs) {
        const auto frames = io::read_feature_maps(path);
        SequenceD seq(Eigen::Index(frames.size()), model.output_dim());
        detail::parallel_for(frames.size(), options.threads, [&](std::size_t i) {
            seq.row(Eigen::Index(i)) = frame_descriptor(frames[i], options.mode, model).transpose();
        });
        corpus.emplace(stem_id(path), std::move(seq));
    }
    io::write_corpus(options.output, corpus);
}

void cmd_fit_whitening(const FitWhiteningOptions& options)
{
    require_inputs(options.inputs);
    if (options.output.empty())
        throw UsageError("fit-whitening needs an output path");
    if (options.output_dim < 1)
        throw UsageError("output dimension must be positive");
    std::vector<VectorD> rows;
    for (const auto& path : options.inputs)
        for (const auto& frame : io::read_feature_maps(path))
            rows.push_back(concatenate(pool(frame, options.mode)));
    const Eigen::Index dim = rows.front().size();
    SequenceD samples(Eigen::Index(rows.size()), dim);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != dim)
            throw DimensionMismatch("pooled descriptors differ in dimension across frames");
        samples.row(Eigen::Index(i)) = rows[i].transpose();
    }
    io::write_whitening(options.output, fit_whitening(samples, options.output_dim));
}

SyntheticDataset cmd_synth(const SynthOptions& options)
{
    options.spec.validate();
    if (options.output_dir.empty())
        throw UsageError("synth needs an output directory");
    SyntheticDataset data = generate_synthetic(options.spec);
    write_synthetic(data, options.output_dir);
    return data;
}

FitResult cmd_train(const TrainOptions& options)
{
    if (options.manifest.empty())
        throw UsageError("train needs --manifest");
    if (options.checkpoint.empty())
        throw UsageError("train needs --checkpoint");
    TrainingConfig training = options.training;
    EncoderConfig encoder = options.encoder;
    training.validate();
    // Reject bad values before touching data; divisibility of an inferred
    // dim is checked once the data dimension is known.
    EncoderConfig probe = encoder;
    if (probe.dim == 0)
        probe.dim = probe.heads;
    probe.validate();
    if (!fs::exists(options.manifest))
        throw UsageError("manifest '" + options.manifest.string() + "' does not exist");

    DatasetManifest manifest = DatasetManifest::load(options.manifest);
    manifest.validate();
    const RetrievalCorpus corpus = load_training_corpus(manifest);
    const Eigen::Index data_dim = corpus.begin()->second.cols();
    if (encoder.dim == 0)
        encoder.dim = data_dim;
    else if (encoder.dim != data_dim)
        throw DimensionMismatch("encoder dim " + std::to_string(encoder.dim)
                                + " does not match descriptor dimension " + std::to_string(data_dim));
    encoder.validate();

    FitOptions fo;
    fo.checkpoint = options.checkpoint;
    fo.log = options.log;
    fo.resume = options.resume;
    return fit(manifest, corpus, encoder, training, fo);
}

EmbeddedCorpus cmd_embed(const EmbedOptions& options)
{
    if (options.frames_output.empty() || options.videos_output.empty())
        throw UsageError("embed needs both --frames-out and --videos-out");
    const auto ckpt = io::read_checkpoint(options.checkpoint);
    const auto corpus = io::read_corpus(options.corpus);
    for (const auto& [id, seq] : corpus)
        if (seq.cols() != ckpt.config.dim)
            throw DimensionMismatch("video '" + id + "' has dimension " + std::to_string(seq.cols())
                                    + " but the checkpoint expects " + std::to_string(ckpt.config.dim));
    EmbeddedCorpus out = embed_corpus(ckpt.params, ckpt.config, corpus, options.threads);
    io::write_corpus(options.frames_output, out.frames);
    io::write_corpus(options.videos_output, out.videos);
    return out;
}

EvaluationReport cmd_evaluate(const EvaluateOptions& options)
{
    const auto corpus = io::read_corpus(options.corpus);
    RetrievalCorpus queries;
    if (options.queries)
        queries = io::read_corpus(*options.queries);
    const auto gt = io::read_ground_truth(options.ground_truth);
    EvaluationReport report = rank_and_score(corpus, queries, gt, options.measure, options.threads);
    write_text(options.output, io::report_to_json(report, options.timing));
    return report;
}

VectorD cmd_attention(const AttentionOptions& options)
{
    const auto ckpt = io::read_checkpoint(options.checkpoint);
    const auto corpus = io::read_corpus(options.corpus);
    const auto it = corpus.find(options.video);
    if (it == corpus.end())
        throw DataError("video '" + options.video + "' is not in the corpus");
    const SequenceD& x = it->second;
    const VectorD response =
        mean_attention_response(ckpt.params, ckpt.config, x, FrameMask::Constant(x.rows(), true));
    json doc;
    doc["video"] = options.video;
    doc["frames"] = response.size();
    doc["response"] = std::vector<double>(response.data(), response.data() + response.size());
    write_text(options.output, doc.dump(2) + "\n");
    return response;
}

// --------------------------------------------------------------- parsing

namespace {

struct GlobalOptions {
    std::uint64_t seed = 0;
    unsigned threads = 1;
};

void add_encoder_options(CLI::App* cmd, EncoderConfig& e)
{
    cmd->add_option("--dim", e.dim, "Descriptor dimension (default: from data)")->check(CLI::NonNegativeNumber);
    cmd->add_option("--heads", e.heads, "Attention heads")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_option("--ffn-dim", e.ffn_dim, "Feed-forward width")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_option("--dropout", e.dropout_rate, "Dropout rate in [0, 1)")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 0.999999));
}

void add_training_options(CLI::App* cmd, TrainingConfig& t, std::string& loss)
{
    cmd->add_option("--batch-size", t.batch_size, "Positive pairs per step")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_option("--epochs", t.epochs, "Passes over the core pairs")->capture_default_str()->check(CLI::NonNegativeNumber);
    cmd->add_option("--negatives", t.negatives_per_step, "Fresh negatives per step")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_option("--bank-size", t.bank_capacity, "Memory bank capacity")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_option("--pad-length", t.pad_length, "Training sequence length")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_option("--lr", t.base_lr, "Initial learning rate")->capture_default_str()->check(CLI::NonNegativeNumber);
    cmd->add_option("--loss", loss, "infonce, circle or softmax")
        ->capture_default_str()
        ->check(CLI::IsMember({"infonce", "circle", "softmax"}));
    cmd->add_option("--tau", t.loss.tau, "InfoNCE temperature")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_option("--gamma", t.loss.circle.gamma, "Circle scale")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_option("--margin", t.loss.circle.margin, "Circle margin in (0, 1)")
        ->capture_default_str()
        ->check(CLI::Range(1e-9, 1.0 - 1e-9));
}

} // namespace

int run(int argc, const char* const* argv)
{
    CLI::App app{"Frame-sequence video descriptors: extraction, training, retrieval", "tca"};
    app.require_subcommand(1);
    app.allow_config_extras(CLI::config_extras_mode::error);
    app.set_config("--config", "", "TOML/INI file with option values");

    GlobalOptions global;
    app.add_option("--seed", global.seed, "Random seed")->capture_default_str();
    app.add_option("--threads", global.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);

    std::string mode = "l3-irmac";
    std::string measure = "cosine";
    std::string loss = "circle";

    ExtractOptions extract;
    auto* c_extract = app.add_subcommand("extract", "Pool, whiten and normalize feature maps into a descriptor corpus");
    c_extract->add_option("inputs", extract.inputs, "Feature-map files (TCAF)")->required()->check(CLI::ExistingFile);
    c_extract->add_option("--mode", mode, "imac or l3-irmac")->capture_default_str()->check(CLI::IsMember({"imac", "l3-irmac"}));
    c_extract->add_option("--whitening", extract.whitening, "Whitening model (TCAW)")->required()->check(CLI::ExistingFile);
    c_extract->add_option("-o,--output", extract.output, "Output corpus (TCAD)")->required();

    FitWhiteningOptions whiten;
    auto* c_whiten = app.add_subcommand("fit-whitening", "Fit PCA whitening on pooled frame descriptors");
    c_whiten->add_option("inputs", whiten.inputs, "Feature-map files (TCAF)")->required()->check(CLI::ExistingFile);
    c_whiten->add_option("--mode", mode, "imac or l3-irmac")->capture_default_str()->check(CLI::IsMember({"imac", "l3-irmac"}));
    c_whiten->add_option("--output-dim", whiten.output_dim, "Whitened dimension")->capture_default_str()->check(CLI::PositiveNumber);
    c_whiten->add_option("-o,--output", whiten.output, "Output model (TCAW)")->required();

    SynthOptions synth;
    auto* c_synth = app.add_subcommand("synth", "Generate a synthetic pair-labelled dataset");
    auto& s = synth.spec;
    c_synth->add_option("--events", s.num_events)->capture_default_str()->check(CLI::PositiveNumber);
    c_synth->add_option("--positives", s.positives_per_event)->capture_default_str()->check(CLI::PositiveNumber);
    c_synth->add_option("--distractors", s.num_distractors)->capture_default_str()->check(CLI::PositiveNumber);
    c_synth->add_option("--min-frames", s.min_frames)->capture_default_str()->check(CLI::PositiveNumber);
    c_synth->add_option("--max-frames", s.max_frames)->capture_default_str()->check(CLI::PositiveNumber);
    c_synth->add_option("--dim", s.dim)->capture_default_str()->check(CLI::Range(2, 1 << 20));
    c_synth->add_option("--noise", s.noise_sigma, "Noise norm on positive frames")->capture_default_str()->check(CLI::NonNegativeNumber);
    c_synth->add_option("--crop", s.crop_fraction, "Positive length relative to base")->capture_default_str()->check(CLI::Range(1e-9, 1.0));
    c_synth->add_option("--scenes", s.scene_count, "Shared scene prototypes")->capture_default_str()->check(CLI::PositiveNumber);
    c_synth->add_option("--informative", s.informative_fraction, "Fraction of video-specific frames")->capture_default_str()->check(CLI::Range(0.0, 1.0));
    c_synth->add_option("--jitter", s.scene_jitter, "Scene frame perturbation norm")->capture_default_str()->check(CLI::NonNegativeNumber);
    c_synth->add_option("-o,--output", synth.output_dir, "Output directory")->required();

    TrainOptions train;
    auto* c_train = app.add_subcommand("train", "Train the encoder with memory-bank contrastive learning");
    c_train->add_option("--manifest", train.manifest, "Dataset manifest (JSON)")->required();
    c_train->add_option("--checkpoint", train.checkpoint, "Output checkpoint (TCAE)")->required();
    c_train->add_option("--log", train.log, "Training log (NDJSON)");
    c_train->add_option("--resume", train.resume, "Resume from a .state file")->check(CLI::ExistingFile);
    add_encoder_options(c_train, train.encoder);
    add_training_options(c_train, train.training, loss);

    EmbedOptions embed;
    auto* c_embed = app.add_subcommand("embed", "Encode a corpus into refined frame and video descriptors");
    c_embed->add_option("--checkpoint", embed.checkpoint)->required()->check(CLI::ExistingFile);
    c_embed->add_option("--corpus", embed.corpus)->required()->check(CLI::ExistingFile);
    c_embed->add_option("--frames-out", embed.frames_output, "Refined frame-level corpus (TCAD)")->required();
    c_embed->add_option("--videos-out", embed.videos_output, "Video-level descriptors (TCAD, one row each)")->required();

    EvaluateOptions evaluate;
    auto* c_eval = app.add_subcommand("evaluate", "Rank a corpus per query and report mAP");
    c_eval->add_option("--corpus", evaluate.corpus)->required()->check(CLI::ExistingFile);
    c_eval->add_option("--queries", evaluate.queries, "Separate query corpus")->check(CLI::ExistingFile);
    c_eval->add_option("--ground-truth", evaluate.ground_truth)->required()->check(CLI::ExistingFile);
    c_eval->add_option("--measure", measure, "cosine, chamfer or symmetric-chamfer")->capture_default_str();
    c_eval->add_option("-o,--output", evaluate.output, "Report path (default: stdout)");
    c_eval->add_flag("--timing", evaluate.timing, "Include timing totals in the report");

    AttentionOptions attention;
    auto* c_attn = app.add_subcommand("attention", "Export per-frame mean attention response");
    c_attn->add_option("--checkpoint", attention.checkpoint)->required()->check(CLI::ExistingFile);
    c_attn->add_option("--corpus", attention.corpus)->required()->check(CLI::ExistingFile);
    c_attn->add_option("--video", attention.video)->required();
    c_attn->add_option("-o,--output", attention.output, "Output path (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (c_extract->parsed()) {
            extract.mode = parse_pooling_mode(mode);
            extract.threads = global.threads;
            cmd_extract(extract);
        } else if (c_whiten->parsed()) {
            whiten.mode = parse_pooling_mode(mode);
            cmd_fit_whitening(whiten);
        } else if (c_synth->parsed()) {
            synth.spec.seed = global.seed;
            cmd_synth(synth);
        } else if (c_train->parsed()) {
            train.encoder.seed = global.seed;
            train.training.seed = global.seed;
            train.training.threads = global.threads;
            train.training.loss.kind = parse_loss_kind(loss);
            const auto result = cmd_train(train);
            if (!result.epoch_mean_loss.empty())
                std::cerr << "final epoch mean loss " << result.epoch_mean_loss.back() << "\n";
        } else if (c_embed->parsed()) {
            embed.threads = global.threads;
            cmd_embed(embed);
        } else if (c_eval->parsed()) {
            evaluate.measure = parse_measure(measure);
            evaluate.threads = global.threads;
            cmd_evaluate(evaluate);
        } else if (c_attn->parsed()) {
            cmd_attention(attention);
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kUsage;
    } catch (const NumericalFailure& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kNumericalFailure;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kDataError;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kDataError;
    }
    return kSuccess;
}

int run(const std::vector<std::string>& args)
{
    std::vector<const char*> argv;
    argv.reserve(args.size());
    for (const auto& a : args)
        argv.push_back(a.c_str());
    return run(int(argv.size()), argv.data());
}

} // namespace tca::cli
