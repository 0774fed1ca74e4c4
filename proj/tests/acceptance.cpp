// Acceptance gate. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails.

#include "oracles.hpp"
#include "temp_dir.hpp"

#include <tca/commands.hpp>
#include <tca/io.hpp>

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>

using namespace tca;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void report(int number, const std::string& name, const std::function<Outcome()>& body)
{
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!o.pass)
        ++failures;
    std::printf("%s %2d %-28s %8.2fs  %s\n", o.pass ? "PASS" : "FAIL", number, name.c_str(), secs,
                o.detail.c_str());
    std::fflush(stdout);
}

template <typename T>
std::string fmt(T v)
{
    std::ostringstream s;
    s.precision(4);
    s << v;
    return s.str();
}

double elapsed_since(std::chrono::steady_clock::time_point t)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

std::map<std::string, std::set<std::string>> flatten(const GroundTruth& gt)
{
    std::map<std::string, std::set<std::string>> out;
    for (const auto& [q, tiers] : gt)
        for (const auto& [tier, ids] : tiers)
            out[q].insert(ids.begin(), ids.end());
    return out;
}

Outcome anchor_gradient()
{
    const auto start = std::chrono::steady_clock::now();
    std::mt19937_64 rng(101);
    const Eigen::Index d = 16, n = 8;
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        const VectorD anchor = oracle::random_vector(rng, d);
        const VectorD positive = oracle::random_vector(rng, d);
        const SequenceD negatives = oracle::random_sequence(rng, n - 1, d, false);
        const VectorD g = anchor_gradient_analytic(anchor, positive, negatives);
        auto loss = [&](const VectorD& a) { return softmax_loss(similarity_scores(a, positive, negatives)).value; };
        const double floor = 1e-8 * std::max(1.0, g.cwiseAbs().maxCoeff());
        for (Eigen::Index i = 0; i < d; ++i)
            worst = std::max(worst, oracle::relative_error(g(i), oracle::central_difference(loss, anchor, i, 1e-6), floor));
    }
    const double secs = elapsed_since(start);
    return {worst < 1e-5 && secs < 5.0, "max rel err " + fmt(worst) + " (tol 1e-5), " + fmt(secs) + "s (limit 5s)"};
}

Outcome encoder_gradients()
{
    const auto start = std::chrono::steady_clock::now();
    std::mt19937_64 rng(102);
    const EncoderConfig c{8, 2, 16, 0.0, 7};
    auto p = init_encoder(c);
    // Move normalization parameters away from 1/0 so their gradients are generic.
    for (auto* v : {&p.ln1_gain, &p.ln2_gain})
        *v = VectorD::Ones(8) + 0.3 * oracle::random_vector(rng, 8);
    p.ln1_bias = 0.1 * oracle::random_vector(rng, 8);
    p.ln2_bias = 0.1 * oracle::random_vector(rng, 8);
    p.ffn_b1 = 0.1 * oracle::random_vector(rng, 16);
    p.ffn_b2 = 0.1 * oracle::random_vector(rng, 8);
    const SequenceD x = oracle::random_sequence(rng, 5, 8, true);
    const SequenceD up = oracle::random_sequence(rng, 5, 8, false);
    const FrameMask mask = FrameMask::Constant(5, true);
    const auto g = encoder_backward(p, c, x, mask, up);
    auto objective = [&] { return (encode_frames(p, c, x, mask).array() * up.array()).sum(); };
    const double h = 1e-5;
    double worst = 0.0;
    std::string worst_name;
    int tensors = 0;
    visit_tensors(
        [&](const char* name, auto& tensor, const auto& grad) {
            ++tensors;
            for (Eigen::Index i = 0; i < tensor.size(); ++i) {
                const double orig = tensor.data()[i];
                tensor.data()[i] = orig + h;
                const double hi = objective();
                tensor.data()[i] = orig - h;
                const double lo = objective();
                tensor.data()[i] = orig;
                const double e = oracle::relative_error(grad.data()[i], (hi - lo) / (2 * h), 1e-6);
                if (e > worst) {
                    worst = e;
                    worst_name = name;
                }
            }
        },
        p, g.params);
    const double secs = elapsed_since(start);
    return {worst < 1e-4 && secs < 30.0,
            std::to_string(tensors) + " tensors, max rel err " + fmt(worst) + " in " + worst_name + " (tol 1e-4), "
                + fmt(secs) + "s (limit 30s)"};
}

Outcome hard_negatives()
{
    std::mt19937_64 rng(103);
    int wins = 0, exact_zero = 0;
    const int trials = 1000;
    for (int t = 0; t < trials; ++t) {
        ScoreSet s;
        s.positive = oracle::uniform(rng, -1, 1);
        s.negatives = oracle::random_vector(rng, 7).unaryExpr([&](double) { return oracle::uniform(rng, -1, 1); });
        s.negatives(0) = -1.0;
        exact_zero += negative_contribution(s, 0) == 0.0;
        s.negatives(0) = 0.0;
        const double at_zero = negative_contribution(s, 0);
        s.negatives(0) = -0.99;
        wins += at_zero > negative_contribution(s, 0);
    }
    return {exact_zero == trials && wins >= 990,
            "zero at -1 in " + std::to_string(exact_zero) + "/1000, c(0) > c(-0.99) in " + std::to_string(wins)
                + "/1000 (need 990)"};
}

Outcome lower_bound()
{
    std::mt19937_64 rng(104);
    int violations = 0;
    double worst = -1e300;
    for (int t = 0; t < 1000; ++t) {
        const auto fx = Eigen::Index(1 + rng() % 12), fy = Eigen::Index(1 + rng() % 12);
        const SequenceD x = oracle::random_sequence(rng, fx, 16, true);
        const SequenceD y = oracle::random_sequence(rng, fy, 16, true);
        const double gap = mean_pairwise_similarity(x, y) - chamfer_similarity(x, y);
        worst = std::max(worst, gap);
        violations += gap > 1e-9;
    }
    return {violations == 0, std::to_string(violations) + " violations, max (mean - chamfer) " + fmt(worst)};
}

Outcome oracle_equivalence()
{
    std::mt19937_64 rng(105);
    double worst = 0.0;
    for (int c = 0; c < 50; ++c) {
        const int videos = 2 + int(rng() % 19);
        RetrievalCorpus corpus;
        for (int v = 0; v < videos; ++v)
            corpus["v" + std::to_string(v)] = oracle::random_sequence(rng, Eigen::Index(1 + rng() % 10), 8, true);
        for (const auto& [a, x] : corpus)
            for (const auto& [b, y] : corpus) {
                worst = std::max(worst, std::abs(chamfer_similarity(x, y) - oracle::chamfer(x, y)));
                worst = std::max(worst, std::abs(symmetric_chamfer(x, y) - oracle::symmetric_chamfer(x, y)));
            }
        GroundTruth gt;
        for (int q = 0; q < videos; q += 2)
            for (int v = 0; v < videos; ++v)
                if (v != q && rng() % 3 == 0)
                    gt["v" + std::to_string(q)]["all"].insert("v" + std::to_string(v));
        if (gt.empty())
            gt["v0"]["all"].insert("v1");
        const std::pair<Measure, std::function<double(const SequenceD&, const SequenceD&)>> measures[] = {
            {Measure::Cosine, oracle::cosine_of_means},
            {Measure::Chamfer, oracle::chamfer},
            {Measure::SymmetricChamfer, oracle::symmetric_chamfer},
        };
        for (const auto& [m, sim] : measures) {
            const EvaluationReport r = rank_and_score(corpus, {}, gt, m);
            const double brute = oracle::mean_average_precision(corpus, flatten(gt), sim);
            worst = std::max(worst, std::abs(r.tiers.at("all").mean_ap - brute));
        }
    }
    return {worst <= 1e-6, "50 corpora, max abs diff " + fmt(worst) + " (tol 1e-6)"};
}

Outcome reduction_identity()
{
    std::mt19937_64 rng(106);
    int mismatches = 0;
    for (int t = 0; t < 1000; ++t) {
        ScoreSet s;
        s.positive = oracle::uniform(rng, -1, 1);
        s.negatives.resize(Eigen::Index(1 + rng() % 16));
        for (Eigen::Index j = 0; j < s.negatives.size(); ++j)
            s.negatives(j) = oracle::uniform(rng, -1, 1);
        const LossOutput a = infonce_loss(s, 1.0), b = softmax_loss(s);
        mismatches += a.value != b.value || a.d_positive != b.d_positive || a.d_negatives != b.d_negatives;
    }
    return {mismatches == 0, std::to_string(mismatches) + "/1000 sets differ (exact comparison)"};
}

struct TrainedModel {
    double baseline_cosine = 0.0;
    double cosine = 0.0;
    double chamfer = 0.0;
    double train_seconds = 0.0;
};

// Synthetic dataset: 20 events, 3 positives, 500 distractors, d = 64,
// noise 0.2, crop 0.5. Circle loss with gamma 256 and margin 0.25.
TrainedModel train_synthetic()
{
    TempDir dir("accept-train");
    SyntheticSpec spec;
    spec.num_events = 20;
    spec.positives_per_event = 3;
    spec.num_distractors = 500;
    spec.dim = 64;
    spec.noise_sigma = 0.2;
    spec.crop_fraction = 0.5;
    const SyntheticDataset data = cli::cmd_synth({spec, dir.path()});

    cli::TrainOptions t;
    t.manifest = dir / "manifest.json";
    t.checkpoint = dir / "model.tcae";
    t.encoder = {0, 8, 128, 0.1, 0};
    t.training.batch_size = 16;
    t.training.epochs = 10;
    t.training.negatives_per_step = 128;
    t.training.bank_capacity = 512;
    t.training.base_lr = 1e-2;
    t.training.loss.kind = LossKind::Circle;
    t.training.loss.circle = {256.0, 0.25};
    t.training.threads = 1;

    const RetrievalCorpus stored = io::read_corpus(dir / "corpus.tcad");
    EncoderConfig init_config = t.encoder;
    init_config.dim = spec.dim;
    const auto untrained = embed_corpus(init_encoder(init_config), init_config, stored);

    TrainedModel out;
    out.baseline_cosine = rank_and_score(untrained.videos, {}, data.ground_truth, Measure::Cosine).tiers.at("relevant").mean_ap;
    const auto start = std::chrono::steady_clock::now();
    cli::cmd_train(t);
    out.train_seconds = elapsed_since(start);

    const auto ckpt = io::read_checkpoint(t.checkpoint);
    const auto trained = embed_corpus(ckpt.params, ckpt.config, stored);
    out.cosine = rank_and_score(trained.videos, {}, data.ground_truth, Measure::Cosine).tiers.at("relevant").mean_ap;
    out.chamfer = rank_and_score(trained.frames, {}, data.ground_truth, Measure::Chamfer).tiers.at("relevant").mean_ap;
    return out;
}

Outcome bank_consistency()
{
    SyntheticSpec spec;
    spec.num_events = 6;
    spec.positives_per_event = 2;
    spec.num_distractors = 30;
    spec.min_frames = 5;
    spec.max_frames = 12;
    spec.dim = 16;
    spec.seed = 107;
    const SyntheticDataset data = generate_synthetic(spec);
    // No dropout and a pad length above every video length, so the step sees
    // the same inputs as evaluation-mode encoding of the full sequences.
    const EncoderConfig enc{16, 4, 32, 0.0, 8};
    TrainingConfig cfg;
    cfg.batch_size = 6;
    cfg.negatives_per_step = 10;
    cfg.bank_capacity = 10;
    cfg.pad_length = 16;
    cfg.base_lr = 1e-2;
    cfg.loss.kind = LossKind::Circle;
    cfg.seed = 9;
    Trainer trainer(enc, cfg, init_encoder(enc), data.corpus);
    std::mt19937_64 rng(108);
    const auto batches = sample_epoch(data.manifest, rng, cfg.batch_size, cfg.negatives_per_step);
    trainer.step(batches[0], 1e-2);
    const SequenceD bank = trainer.bank().matrix(enc.dim);

    const auto params = trainer.params();
    auto embed = [&](const std::string& id) {
        const SequenceD& x = data.corpus.at(id);
        return aggregate_video(encode_frames(params, enc, x, FrameMask::Constant(x.rows(), true)));
    };
    const Batch& b = batches[1];
    SequenceD negatives(bank.rows() + Eigen::Index(b.negatives.size()), enc.dim);
    negatives.topRows(bank.rows()) = bank;
    for (std::size_t k = 0; k < b.negatives.size(); ++k)
        negatives.row(bank.rows() + Eigen::Index(k)) = embed(b.negatives[k]).transpose();
    double direct = 0.0;
    for (const auto& [a, p] : b.pairs)
        direct += evaluate_loss(similarity_scores(embed(a), embed(p), negatives), cfg.loss).value;
    direct /= double(b.pairs.size());

    const StepResult r = trainer.step(b, 1e-2);
    const double diff = std::abs(r.loss - direct);
    return {diff <= 1e-6 && bank.rows() == 10,
            "step loss " + fmt(r.loss) + ", direct " + fmt(direct) + ", |diff| " + fmt(diff) + " (tol 1e-6), "
                + std::to_string(bank.rows() + Eigen::Index(b.negatives.size())) + " negatives"};
}

Outcome determinism()
{
    TempDir dir("accept-determinism");
    SyntheticSpec spec;
    spec.num_events = 6;
    spec.num_distractors = 40;
    spec.min_frames = 8;
    spec.max_frames = 16;
    spec.dim = 32;
    spec.seed = 3;
    cli::cmd_synth({spec, dir.path()});
    auto run = [&](const std::string& name) {
        cli::TrainOptions t;
        t.manifest = dir / "manifest.json";
        t.checkpoint = dir / name;
        t.encoder = {0, 4, 64, 0.1, 11};
        t.training.batch_size = 8;
        t.training.epochs = 3;
        t.training.negatives_per_step = 16;
        t.training.bank_capacity = 32;
        t.training.pad_length = 12;
        t.training.base_lr = 1e-3;
        t.training.seed = 11;
        cli::cmd_train(t);
        return io::read_file(t.checkpoint);
    };
    const std::string a = run("a.tcae"), b = run("b.tcae");
    return {a == b, std::string(a == b ? "identical" : "different") + " checkpoints (" + std::to_string(a.size())
                        + " bytes)"};
}

} // namespace

int main()
{
    report(1, "anchor gradient oracle", anchor_gradient);
    report(2, "encoder gradient suite", encoder_gradients);
    report(3, "hard-negative property", hard_negatives);
    report(4, "cosine lower bound", lower_bound);
    report(5, "brute-force equivalence", oracle_equivalence);
    report(6, "InfoNCE reduction at tau=1", reduction_identity);

    TrainedModel model;
    std::string train_error;
    report(7, "synthetic training", [&]() -> Outcome {
        try {
            model = train_synthetic();
        } catch (const std::exception& e) {
            train_error = e.what();
            return {false, "exception: " + train_error};
        }
        const double gain = model.cosine - model.baseline_cosine;
        return {gain >= 0.10 && model.cosine >= 0.90 && model.train_seconds < 600.0,
                "cosine mAP " + fmt(model.baseline_cosine) + " -> " + fmt(model.cosine) + " (gain " + fmt(gain)
                    + ", need >= 0.10 and >= 0.90), training " + fmt(model.train_seconds) + "s (limit 600s)"};
    });
    report(8, "chamfer vs cosine", [&]() -> Outcome {
        if (!train_error.empty())
            return {false, "exception: " + train_error};
        return {model.chamfer >= model.cosine,
                "chamfer mAP " + fmt(model.chamfer) + ", cosine mAP " + fmt(model.cosine)};
    });
    report(9, "bank consistency", bank_consistency);
    report(10, "training determinism", determinism);

    std::printf("%s: %d of 10 criteria failed\n", failures ? "FAIL" : "PASS", failures);
    return failures ? 1 : 0;
}
