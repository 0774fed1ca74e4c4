#pragma once

// Memory-bank contrastive training of the temporal encoder.

#include "tca/encoder.hpp"
#include "tca/losses.hpp"
#include "tca/retrieval.hpp"

#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace tca {

struct DatasetManifest {
    std::vector<std::pair<std::string, std::string>> core_pairs;
    std::vector<std::string> distractors;
    std::map<std::string, std::filesystem::path> features;

    /// Ids unique within each role, core and distractor sets disjoint,
    /// every referenced core id has a feature entry.
    void validate() const;

    std::vector<std::string> core_ids() const;

    static DatasetManifest load(const std::filesystem::path& path);
    std::string to_json() const;
};

/// Loads every referenced descriptor sequence. Missing core videos are an
/// error; missing distractors are dropped from `manifest` with a warning.
RetrievalCorpus load_training_corpus(DatasetManifest& manifest);

/// Fixed-capacity FIFO of unit-norm video descriptors.
class MemoryBank {
public:
    explicit MemoryBank(std::size_t capacity) : capacity_(capacity) {}

    void push(const VectorD& descriptor);
    std::size_t size() const { return store_.size(); }
    std::size_t capacity() const { return capacity_; }
    const std::deque<VectorD>& entries() const { return store_; }
    /// size() x d matrix, oldest entry first.
    SequenceD matrix(Eigen::Index dim) const;

private:
    std::size_t capacity_;
    std::deque<VectorD> store_;
};

struct TrainingConfig {
    std::size_t batch_size = 64;
    std::size_t epochs = 40;
    std::size_t negatives_per_step = 1024;
    std::size_t bank_capacity = 4096;
    Eigen::Index pad_length = 64;
    double base_lr = 1e-5;
    LossSettings loss;
    std::uint64_t seed = 0;
    unsigned threads = 1;

    void validate() const;
};

struct AdamState {
    EncoderParams<double> first_moment;
    EncoderParams<double> second_moment;
    std::uint64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    static AdamState for_params(const EncoderParams<double>& params);
};

/// Cosine annealing from base_lr at step 0 to zero at total_steps.
double lr_at(std::size_t step_index, std::size_t total_steps, double base_lr);

/// One bias-corrected Adam step. Throws NumericalFailure on non-finite
/// gradients, leaving params and state untouched.
void adam_update(AdamState& state, EncoderParams<double>& params, const EncoderParams<double>& grads, double lr);

struct PreparedSequence {
    SequenceD frames;
    FrameMask mask;
};

/// Training: random contiguous window of pad_length frames, or zero padding
/// up to pad_length. Evaluation: the full sequence with an all-true mask.
PreparedSequence prepare_sequence(const SequenceD& x, Eigen::Index pad_length, bool training,
                                  std::mt19937_64& rng);

struct Batch {
    std::vector<std::pair<std::string, std::string>> pairs; // (anchor, positive)
    std::vector<std::string> negatives;
};

/// `n` distinct distractors, uniformly at random.
std::vector<std::string> sample_negatives(const std::vector<std::string>& distractors, std::size_t n,
                                          std::mt19937_64& rng);

/// Every core pair exactly once, shuffled, split into batches; a coin flip
/// picks the anchor side of each pair. Each batch gets fresh negatives.
std::vector<Batch> sample_epoch(const DatasetManifest& manifest, std::mt19937_64& rng,
                                std::size_t batch_size, std::size_t n);

struct StepResult {
    double loss = 0.0;
    std::size_t bank_size = 0;
};

/// Parameters, optimizer, bank and random stream of one training run.
class Trainer {
public:
    Trainer(EncoderConfig encoder, TrainingConfig config, EncoderParams<double> params,
            const RetrievalCorpus& corpus);

    /// Encodes anchors, positives and fresh negatives with the current
    /// parameters, scores every anchor against its positive, all bank
    /// entries and the fresh negatives, backpropagates the batch-mean loss
    /// (bank entries are constants), applies Adam, then pushes the fresh
    /// negatives into the bank.
    StepResult step(const Batch& batch, double lr);

    /// Batch-mean loss and parameter gradients without any state change.
    /// Dropout and cropping draw from `rng`.
    std::pair<double, EncoderParams<double>> loss_and_gradients(const Batch& batch, std::mt19937_64& rng,
                                                                 std::vector<VectorD>* fresh_out = nullptr) const;

    const EncoderConfig& encoder_config() const { return encoder_; }
    const TrainingConfig& config() const { return config_; }
    const EncoderParams<double>& params() const { return params_; }
    EncoderParams<double>& params() { return params_; }
    const AdamState& optimizer() const { return adam_; }
    AdamState& optimizer() { return adam_; }
    MemoryBank& bank() { return bank_; }
    const MemoryBank& bank() const { return bank_; }
    std::mt19937_64& rng() { return rng_; }

private:
    EncoderConfig encoder_;
    TrainingConfig config_;
    EncoderParams<double> params_;
    AdamState adam_;
    MemoryBank bank_;
    std::mt19937_64 rng_;
    const RetrievalCorpus& corpus_;
};

struct LogRecord {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
    std::size_t bank_size = 0;

    std::string to_json() const;
};

struct FitOptions {
    /// Final checkpoint; per-epoch checkpoints and the resume state are
    /// written next to it.
    std::filesystem::path checkpoint;
    std::optional<std::filesystem::path> log;
    std::optional<std::filesystem::path> resume;
    std::function<void(const LogRecord&)> on_step;
};

struct FitResult {
    EncoderParams<double> params;
    std::vector<LogRecord> log;
    std::vector<double> epoch_mean_loss;
};

FitResult fit(DatasetManifest manifest, const EncoderConfig& encoder, const TrainingConfig& config,
              const FitOptions& options);

/// Same as above, on an already-loaded corpus.
FitResult fit(const DatasetManifest& manifest, const RetrievalCorpus& corpus, const EncoderConfig& encoder,
              const TrainingConfig& config, const FitOptions& options);

std::filesystem::path epoch_checkpoint_path(const std::filesystem::path& checkpoint, std::size_t epoch);
std::filesystem::path state_path(const std::filesystem::path& checkpoint);

struct EmbeddedCorpus {
    RetrievalCorpus frames; // refined f x d sequences
    RetrievalCorpus videos; // 1 x d unit-norm descriptors
};

/// Evaluation-mode encoding of every video in the corpus.
EmbeddedCorpus embed_corpus(const EncoderParams<double>& params, const EncoderConfig& config,
                            const RetrievalCorpus& corpus, unsigned threads = 1);

} // namespace tca
