#pragma once

// Synthetic stand-in for a pair-labelled video dataset.
//
// Every video mixes "scene" frames, drawn from a small pool of prototype
// directions shared by the whole dataset, with informative frames that are
// unique to the video. Scene frames dominate the mean descriptor, which
// makes plain mean pooling a weak retrieval signal while frame-level
// matching stays strong. Each event has a base video; its positives are
// noisy contiguous crops of the base. Distractors are generated the same
// way as bases but belong to no event.

#include "tca/retrieval.hpp"
#include "tca/trainer.hpp"

#include <cstdint>
#include <filesystem>

namespace tca {

struct SyntheticSpec {
    std::size_t num_events = 10;
    std::size_t positives_per_event = 3;
    std::size_t num_distractors = 100;
    Eigen::Index min_frames = 20;
    Eigen::Index max_frames = 40;
    Eigen::Index dim = 64;
    /// Expected L2 norm of the isotropic noise added to each positive frame.
    double noise_sigma = 0.05;
    /// Length of a positive relative to its base video.
    double crop_fraction = 0.5;
    std::uint64_t seed = 0;
    std::size_t scene_count = 8;
    double informative_fraction = 0.25;
    /// Expected L2 norm of the perturbation of a scene frame around its
    /// prototype.
    double scene_jitter = 0.3;

    void validate() const;
};

struct SyntheticDataset {
    RetrievalCorpus corpus;
    DatasetManifest manifest;
    GroundTruth ground_truth;
};

std::string event_base_id(std::size_t event);
std::string event_positive_id(std::size_t event, std::size_t positive);
std::string distractor_id(std::size_t index);

/// Manifest feature paths point at "corpus.tcad"; ground truth maps each
/// base video to its positives under the tier "relevant".
SyntheticDataset generate_synthetic(const SyntheticSpec& spec);

/// Writes corpus.tcad, manifest.json and ground_truth.json into `dir`.
void write_synthetic(const SyntheticDataset& data, const std::filesystem::path& dir);

} // namespace tca
