#include "oracles.hpp"

#include <tca/retrieval.hpp>

#include <doctest.h>

#include <random>

using namespace tca;

namespace {

SequenceD rows(std::initializer_list<std::initializer_list<double>> data)
{
    SequenceD out(Eigen::Index(data.size()), Eigen::Index(data.begin()->size()));
    Eigen::Index i = 0;
    for (const auto& r : data) {
        Eigen::Index j = 0;
        for (double v : r)
            out(i, j++) = v;
        ++i;
    }
    return out;
}

struct RandomCorpus {
    RetrievalCorpus corpus;
    std::map<std::string, std::set<std::string>> relevant;
    GroundTruth gt;
};

RandomCorpus random_corpus(std::mt19937_64& rng, int videos, int max_frames, int dim)
{
    RandomCorpus rc;
    std::uniform_int_distribution<int> frames(1, max_frames);
    for (int v = 0; v < videos; ++v)
        rc.corpus["v" + std::to_string(100 + v)] = oracle::random_sequence(rng, frames(rng), dim, true);
    std::vector<std::string> ids;
    for (const auto& [id, _] : rc.corpus)
        ids.push_back(id);
    std::uniform_int_distribution<int> pick(0, videos - 1);
    for (int q = 0; q < std::min(videos, 5); ++q) {
        std::set<std::string> rel;
        const int count = 1 + pick(rng) % 4;
        while (int(rel.size()) < count) {
            const std::string& id = ids[pick(rng)];
            if (id != ids[q])
                rel.insert(id);
        }
        rc.relevant[ids[q]] = rel;
        rc.gt[ids[q]]["relevant"] = rel;
    }
    return rc;
}

} // namespace

TEST_SUITE("retrieval")
{
    TEST_CASE("chamfer reference values")
    {
        const SequenceD x = rows({{1, 0}});
        const SequenceD y = rows({{0, 1}, {1, 0}});
        CHECK(chamfer_similarity(x, x) == 1.0);
        CHECK(chamfer_similarity(x, y) == 1.0);
        CHECK(chamfer_similarity(y, x) == 0.5);
        CHECK(symmetric_chamfer(x, y) == 0.75);
        CHECK(symmetric_chamfer(y, y) == 1.0);
        CHECK(cosine_similarity_video(x, x) == doctest::Approx(1.0));
        CHECK(cosine_similarity_video(x, rows({{0, 1}})) == doctest::Approx(0.0));
    }

    TEST_CASE("measures match brute-force loops")
    {
        std::mt19937_64 rng(21);
        for (int t = 0; t < 40; ++t) {
            const SequenceD x = oracle::random_sequence(rng, 1 + t % 9, 8, true);
            const SequenceD y = oracle::random_sequence(rng, 1 + (t * 7) % 11, 8, true);
            CHECK(chamfer_similarity(x, y) == oracle::chamfer(x, y));
            CHECK(symmetric_chamfer(x, y) == doctest::Approx(oracle::symmetric_chamfer(x, y)).epsilon(1e-14));
            CHECK(symmetric_chamfer(x, y) == symmetric_chamfer(y, x));
            CHECK(mean_pairwise_similarity(x, y) == doctest::Approx(oracle::double_mean(x, y)).epsilon(1e-12));
            CHECK(cosine_similarity_video(x, y) == doctest::Approx(oracle::cosine_of_means(x, y)).epsilon(1e-12));
            CHECK(chamfer_similarity(x, x) == doctest::Approx(1.0).epsilon(1e-14));
        }
    }

    TEST_CASE("tiled chamfer is bit-identical to the double loop")
    {
        std::mt19937_64 rng(22);
        // Sizes straddle the tile boundary.
        for (auto [n, m] : std::vector<std::pair<int, int>>{{5, 7}, {31, 33}, {32, 32}, {70, 65}, {1, 100}}) {
            const SequenceD x = oracle::random_sequence(rng, n, 16, true);
            const SequenceD y = oracle::random_sequence(rng, m, 16, true);
            CHECK(chamfer_similarity(x, y) == oracle::chamfer(x, y));
            CHECK(chamfer_similarity(y, x) == oracle::chamfer(y, x));
        }
    }

    TEST_CASE("single precision chamfer stays close to the double loop")
    {
        std::mt19937_64 rng(23);
        for (int t = 0; t < 20; ++t) {
            const SequenceD x = oracle::random_sequence(rng, 40, 32, true);
            const SequenceD y = oracle::random_sequence(rng, 37, 32, true);
            const SequenceF xf = x.cast<float>();
            const SequenceF yf = y.cast<float>();
            CHECK(std::abs(double(chamfer_similarity(xf, yf)) - oracle::chamfer(x, y)) < 1e-6);
        }
    }

    TEST_CASE("chamfer invariances")
    {
        std::mt19937_64 rng(24);
        const SequenceD x = oracle::random_sequence(rng, 6, 5, true);
        const SequenceD y = oracle::random_sequence(rng, 9, 5, true);
        const double base = chamfer_similarity(x, y);

        SequenceD y_rev = y.colwise().reverse();
        CHECK(chamfer_similarity(x, y_rev) == doctest::Approx(base).epsilon(1e-15));
        SequenceD x_rev = x.colwise().reverse();
        CHECK(chamfer_similarity(x_rev, y) == doctest::Approx(base).epsilon(1e-14));
        SequenceD y_dup(2 * y.rows(), y.cols());
        y_dup << y, y;
        CHECK(chamfer_similarity(x, y_dup) == base);
    }

    TEST_CASE("double mean never exceeds chamfer")
    {
        std::mt19937_64 rng(25);
        for (int t = 0; t < 300; ++t) {
            const SequenceD x = oracle::random_sequence(rng, 1 + t % 12, 6, t % 2 == 0);
            const SequenceD y = oracle::random_sequence(rng, 1 + t % 7, 6, t % 2 == 0);
            CHECK(mean_pairwise_similarity(x, y) <= chamfer_similarity(x, y) + 1e-12);
        }
    }

    TEST_CASE("measure errors")
    {
        const SequenceD x = rows({{1, 0}});
        CHECK_THROWS_AS(chamfer_similarity(SequenceD(0, 2), x), DataError);
        CHECK_THROWS_AS(chamfer_similarity(x, rows({{1, 0, 0}})), DimensionMismatch);
        CHECK_THROWS_AS(cosine_similarity_video(x, rows({{1, 0}, {-1, 0}})), DegenerateInput);
        CHECK(parse_measure("chamfer") == Measure::Chamfer);
        CHECK(parse_measure("symmetric-chamfer") == Measure::SymmetricChamfer);
        CHECK(parse_measure("cosine") == Measure::Cosine);
        CHECK_THROWS_AS(parse_measure("euclid"), UsageError);
    }

    TEST_CASE("average precision")
    {
        CHECK(average_precision({"a", "b", "c"}, {"a"}) == 1.0);
        CHECK(average_precision({"a", "x", "b", "y", "z"}, {"a", "b"}) == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0));
        CHECK(average_precision({"x", "y"}, {"a"}) == 0.0);
        CHECK(average_precision({"x", "a"}, {"a", "missing"}) == doctest::Approx(0.25));
    }

    TEST_CASE("ranking breaks ties by ascending id and excludes the query")
    {
        RetrievalCorpus corpus;
        corpus["q"] = rows({{1, 0}});
        corpus["c"] = rows({{1, 0}});
        corpus["a"] = rows({{1, 0}});
        corpus["b"] = rows({{0, 1}});
        corpus["d"] = rows({{0.6, 0.8}});
        const auto ranked = rank_candidates(corpus, "q", corpus["q"], Measure::Chamfer);
        CHECK(ranked == std::vector<std::string>{"a", "c", "d", "b"});
    }

    TEST_CASE("rank and score matches brute-force mAP")
    {
        std::mt19937_64 rng(26);
        for (int t = 0; t < 10; ++t) {
            const RandomCorpus rc = random_corpus(rng, 20, 10, 6);
            for (Measure m : {Measure::Chamfer, Measure::SymmetricChamfer, Measure::Cosine}) {
                const EvaluationReport rep = rank_and_score(rc.corpus, {}, rc.gt, m, 1 + t % 3);
                const double expected = oracle::mean_average_precision(
                    rc.corpus, rc.relevant, [m](const SequenceD& a, const SequenceD& b) {
                        if (m == Measure::Chamfer)
                            return oracle::chamfer(a, b);
                        if (m == Measure::SymmetricChamfer)
                            return oracle::symmetric_chamfer(a, b);
                        return oracle::cosine_of_means(a, b);
                    });
                CHECK(rep.tiers.at("relevant").mean_ap == doctest::Approx(expected).epsilon(1e-9));
                CHECK(rep.tiers.at("relevant").mean_ap >= 0.0);
                CHECK(rep.tiers.at("relevant").mean_ap <= 1.0);
            }
        }
    }

    TEST_CASE("rank and score is independent of the thread count")
    {
        std::mt19937_64 rng(27);
        const RandomCorpus rc = random_corpus(rng, 20, 10, 6);
        const EvaluationReport one = rank_and_score(rc.corpus, {}, rc.gt, Measure::Chamfer, 1);
        const EvaluationReport four = rank_and_score(rc.corpus, {}, rc.gt, Measure::Chamfer, 4);
        CHECK(one.tiers.at("relevant").mean_ap == four.tiers.at("relevant").mean_ap);
        CHECK(one.tiers.at("relevant").average_precision == four.tiers.at("relevant").average_precision);
    }

    TEST_CASE("rank and score tiers, skips and errors")
    {
        RetrievalCorpus corpus;
        corpus["q"] = rows({{1, 0}});
        corpus["near"] = rows({{0.9, 0.1}});
        corpus["far"] = rows({{0, 1}});
        GroundTruth gt;
        gt["q"]["easy"] = {"near"};
        gt["q"]["hard"] = {"far"};
        gt["q"]["none"] = {};
        const EvaluationReport rep = rank_and_score(corpus, {}, gt, Measure::Chamfer);
        CHECK(rep.tiers.at("easy").mean_ap == 1.0);
        CHECK(rep.tiers.at("hard").mean_ap == 0.5);
        CHECK(rep.tiers.at("none").skipped == std::vector<std::string>{"q"});
        CHECK(rep.total_seconds >= rep.similarity_seconds);

        // A separate query set is searched before the corpus.
        RetrievalCorpus queries;
        queries["q"] = rows({{0, 1}});
        const EvaluationReport swapped = rank_and_score(corpus, queries, gt, Measure::Chamfer);
        CHECK(swapped.tiers.at("hard").mean_ap == 1.0);

        GroundTruth unknown;
        unknown["q"]["t"] = {"ghost"};
        CHECK_THROWS_AS(rank_and_score(corpus, {}, unknown, Measure::Chamfer), DataError);
        GroundTruth missing_query;
        missing_query["nobody"]["t"] = {"near"};
        CHECK_THROWS_AS(rank_and_score(corpus, {}, missing_query, Measure::Chamfer), DataError);
    }
}
