#pragma once

// Command implementations behind the `tca` executable.

#include "tca/features.hpp"
#include "tca/retrieval.hpp"
#include "tca/synth.hpp"
#include "tca/trainer.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace tca::cli {

enum ExitCode : int { kSuccess = 0, kUsage = 1, kDataError = 2, kNumericalFailure = 3 };

PoolingMode parse_pooling_mode(const std::string& name);

struct ExtractOptions {
    std::vector<std::filesystem::path> inputs;
    PoolingMode mode = PoolingMode::L3IRMac;
    std::filesystem::path whitening;
    std::filesystem::path output;
    unsigned threads = 1;
};

/// One corpus entry per feature-map file, keyed by file stem.
void cmd_extract(const ExtractOptions& options);

struct FitWhiteningOptions {
    std::vector<std::filesystem::path> inputs;
    PoolingMode mode = PoolingMode::L3IRMac;
    Eigen::Index output_dim = 1024;
    std::filesystem::path output;
};

void cmd_fit_whitening(const FitWhiteningOptions& options);

struct SynthOptions {
    SyntheticSpec spec;
    std::filesystem::path output_dir;
};

SyntheticDataset cmd_synth(const SynthOptions& options);

struct TrainOptions {
    std::filesystem::path manifest;
    std::filesystem::path checkpoint;
    std::optional<std::filesystem::path> log;
    std::optional<std::filesystem::path> resume;
    /// dim = 0 takes the descriptor dimension from the data.
    EncoderConfig encoder{0, 8, 2048, 0.5, 0};
    TrainingConfig training;
};

FitResult cmd_train(const TrainOptions& options);

struct EmbedOptions {
    std::filesystem::path checkpoint;
    std::filesystem::path corpus;
    std::filesystem::path frames_output;
    std::filesystem::path videos_output;
    unsigned threads = 1;
};

EmbeddedCorpus cmd_embed(const EmbedOptions& options);

struct EvaluateOptions {
    std::filesystem::path corpus;
    std::optional<std::filesystem::path> queries;
    std::filesystem::path ground_truth;
    Measure measure = Measure::Cosine;
    std::optional<std::filesystem::path> output;
    bool timing = false;
    unsigned threads = 1;
};

EvaluationReport cmd_evaluate(const EvaluateOptions& options);

struct AttentionOptions {
    std::filesystem::path checkpoint;
    std::filesystem::path corpus;
    std::string video;
    std::optional<std::filesystem::path> output;
};

VectorD cmd_attention(const AttentionOptions& options);

/// Parses arguments (argv[0] is the program name) and runs one subcommand.
/// Returns the process exit code.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

} // namespace tca::cli
