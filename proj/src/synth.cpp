#include "tca/synth.hpp"

#include "tca/io.hpp"

#include <cmath>
#include <cstdio>
#include <random>

namespace tca {

void SyntheticSpec::validate() const
{
    if (num_events < 1 || positives_per_event < 1 || num_distractors < 1 || scene_count < 1)
        throw UsageError("synthetic event, positive, distractor and scene counts must be at least 1");
    if (min_frames < 1 || max_frames < min_frames)
        throw UsageError("synthetic frame range must satisfy 1 <= min <= max");
    if (dim < 2)
        throw UsageError("synthetic descriptor dimension must be at least 2");
    if (!(noise_sigma >= 0.0) || !(scene_jitter >= 0.0))
        throw UsageError("synthetic noise levels must be non-negative");
    if (!(crop_fraction > 0.0 && crop_fraction <= 1.0))
        throw UsageError("crop fraction must lie in (0, 1]");
    if (!(informative_fraction >= 0.0 && informative_fraction <= 1.0))
        throw UsageError("informative fraction must lie in [0, 1]");
}

namespace {

std::string numbered(const char* prefix, std::size_t i)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s%04zu", prefix, i);
    return buf;
}

class Generator {
public:
    explicit Generator(const SyntheticSpec& spec) : spec_(spec), rng_(spec.seed)
    {
        scenes_.resize(Eigen::Index(spec.scene_count), spec.dim);
        for (Eigen::Index s = 0; s < scenes_.rows(); ++s)
            scenes_.row(s) = random_unit().transpose();
    }

    SequenceD video()
    {
        std::uniform_int_distribution<Eigen::Index> length(spec_.min_frames, spec_.max_frames);
        std::uniform_int_distribution<Eigen::Index> scene(0, scenes_.rows() - 1);
        std::uniform_real_distribution<double> coin(0.0, 1.0);
        const Eigen::Index f = length(rng_);
        const Eigen::Index own_scene = scene(rng_);
        SequenceD x(f, spec_.dim);
        for (Eigen::Index t = 0; t < f; ++t) {
            if (coin(rng_) < spec_.informative_fraction) {
                x.row(t) = random_unit().transpose();
            } else {
                const VectorD v = scenes_.row(own_scene).transpose() + spec_.scene_jitter * random_unit();
                x.row(t) = unit_or(v, scenes_.row(own_scene).transpose()).transpose();
            }
        }
        return x;
    }

    SequenceD positive_of(const SequenceD& base)
    {
        const Eigen::Index f = base.rows();
        const Eigen::Index len =
            std::clamp<Eigen::Index>(Eigen::Index(std::lround(spec_.crop_fraction * double(f))), 1, f);
        std::uniform_int_distribution<Eigen::Index> start(0, f - len);
        const Eigen::Index s = start(rng_);
        SequenceD x = base.middleRows(s, len);
        if (spec_.noise_sigma > 0.0) {
            std::normal_distribution<double> gauss(0.0, spec_.noise_sigma / std::sqrt(double(spec_.dim)));
            for (Eigen::Index t = 0; t < len; ++t) {
                VectorD v = x.row(t).transpose();
                for (Eigen::Index k = 0; k < v.size(); ++k)
                    v(k) += gauss(rng_);
                x.row(t) = unit_or(v, x.row(t).transpose()).transpose();
            }
        }
        return x;
    }

private:
    VectorD random_unit()
    {
        std::normal_distribution<double> gauss(0.0, 1.0);
        VectorD v(spec_.dim);
        do {
            for (Eigen::Index k = 0; k < v.size(); ++k)
                v(k) = gauss(rng_);
        } while (!(v.norm() > 1e-6));
        return v / v.norm();
    }

    static VectorD unit_or(const VectorD& v, const VectorD& fallback)
    {
        const double n = v.norm();
        return n > 1e-12 ? VectorD(v / n) : fallback;
    }

    const SyntheticSpec& spec_;
    std::mt19937_64 rng_;
    SequenceD scenes_;
};

} // namespace

std::string event_base_id(std::size_t event) { return numbered("event", event) + "_base"; }

std::string event_positive_id(std::size_t event, std::size_t positive)
{
    return numbered("event", event) + "_pos" + std::to_string(positive);
}

std::string distractor_id(std::size_t index) { return numbered("distractor", index); }

SyntheticDataset generate_synthetic(const SyntheticSpec& spec)
{
    spec.validate();
    Generator gen(spec);
    SyntheticDataset data;
    for (std::size_t e = 0; e < spec.num_events; ++e) {
        const std::string base_id = event_base_id(e);
        SequenceD base = gen.video();
        std::vector<std::string> members{base_id};
        auto& relevant = data.ground_truth[base_id]["relevant"];
        for (std::size_t p = 0; p < spec.positives_per_event; ++p) {
            const std::string id = event_positive_id(e, p);
            data.corpus[id] = gen.positive_of(base);
            members.push_back(id);
            relevant.insert(id);
        }
        data.corpus[base_id] = std::move(base);
        for (std::size_t i = 0; i < members.size(); ++i)
            for (std::size_t j = i + 1; j < members.size(); ++j)
                data.manifest.core_pairs.emplace_back(members[i], members[j]);
    }
    for (std::size_t k = 0; k < spec.num_distractors; ++k) {
        const std::string id = distractor_id(k);
        data.corpus[id] = gen.video();
        data.manifest.distractors.push_back(id);
    }
    for (const auto& [id, seq] : data.corpus)
        data.manifest.features[id] = "corpus.tcad";
    return data;
}

void write_synthetic(const SyntheticDataset& data, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    io::write_corpus(dir / "corpus.tcad", data.corpus);
    io::atomic_write(dir / "manifest.json", data.manifest.to_json());
    io::write_ground_truth(dir / "ground_truth.json", data.ground_truth);
}

} // namespace tca
