#include "tca/retrieval.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <iostream>
#include <thread>
#include <utility>

namespace tca {

Measure parse_measure(const std::string& name)
{
    if (name == "cosine")
        return Measure::Cosine;
    if (name == "chamfer")
        return Measure::Chamfer;
    if (name == "symmetric-chamfer")
        return Measure::SymmetricChamfer;
    throw UsageError("unknown measure '" + name + "' (expected cosine, chamfer or symmetric-chamfer)");
}

std::string to_string(Measure measure)
{
    switch (measure) {
    case Measure::Cosine:
        return "cosine";
    case Measure::Chamfer:
        return "chamfer";
    case Measure::SymmetricChamfer:
        return "symmetric-chamfer";
    }
    return "unknown";
}

double average_precision(const std::vector<std::string>& ranked, const std::set<std::string>& relevant)
{
    if (relevant.empty())
        return 0.0;
    std::size_t hits = 0;
    double sum = 0.0;
    for (std::size_t r = 0; r < ranked.size(); ++r) {
        if (relevant.count(ranked[r])) {
            ++hits;
            sum += double(hits) / double(r + 1);
        }
    }
    return sum / double(relevant.size());
}

std::vector<std::string> rank_candidates(const RetrievalCorpus& corpus,
                                         const std::string& query_id,
                                         const SequenceD& query,
                                         Measure measure)
{
    std::vector<std::pair<double, const std::string*>> scored;
    scored.reserve(corpus.size());
    for (const auto& [id, seq] : corpus) {
        if (id == query_id)
            continue;
        scored.emplace_back(similarity(measure, query, seq), &id);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first)
            return a.first > b.first;
        return *a.second < *b.second;
    });
    std::vector<std::string> ranked;
    ranked.reserve(scored.size());
    for (const auto& s : scored)
        ranked.push_back(*s.second);
    return ranked;
}

EvaluationReport rank_and_score(const RetrievalCorpus& corpus,
                                const RetrievalCorpus& queries,
                                const GroundTruth& ground_truth,
                                Measure measure,
                                unsigned threads)
{
    const auto start = std::chrono::steady_clock::now();

    std::vector<std::pair<const std::string*, const SequenceD*>> jobs;
    for (const auto& [qid, tiers] : ground_truth) {
        const SequenceD* seq = nullptr;
        if (auto it = queries.find(qid); it != queries.end())
            seq = &it->second;
        else if (auto jt = corpus.find(qid); jt != corpus.end())
            seq = &jt->second;
        else
            throw DataError("query '" + qid + "' is neither in the query set nor in the corpus");
        for (const auto& [tier, ids] : tiers)
            for (const auto& id : ids)
                if (!corpus.count(id))
                    throw DataError("ground truth for '" + qid + "' references unknown video '" + id + "'");
        jobs.emplace_back(&qid, seq);
    }

    std::vector<std::vector<std::string>> rankings(jobs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++)
            rankings[i] = rank_candidates(corpus, *jobs[i].first, *jobs[i].second, measure);
    };
    const unsigned n_threads = std::max(1u, std::min<unsigned>(threads, unsigned(jobs.size())));
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < n_threads; ++t)
            pool.emplace_back(worker);
        for (auto& t : pool)
            t.join();
    }
    const auto ranked_at = std::chrono::steady_clock::now();

    EvaluationReport report;
    report.measure = measure;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        const std::string& qid = *jobs[i].first;
        for (const auto& [tier, ids] : ground_truth.at(qid)) {
            TierReport& tr = report.tiers[tier];
            std::set<std::string> relevant = ids;
            relevant.erase(qid);
            if (relevant.empty()) {
                std::cerr << "warning: query '" << qid << "' has no relevant videos in tier '" << tier
                          << "'; skipped\n";
                tr.skipped.push_back(qid);
                continue;
            }
            tr.average_precision[qid] = average_precision(rankings[i], relevant);
        }
    }
    for (auto& [tier, tr] : report.tiers) {
        double sum = 0.0;
        for (const auto& [qid, ap] : tr.average_precision)
            sum += ap;
        tr.mean_ap = tr.average_precision.empty() ? 0.0 : sum / double(tr.average_precision.size());
    }
    const auto end = std::chrono::steady_clock::now();
    report.similarity_seconds = std::chrono::duration<double>(ranked_at - start).count();
    report.total_seconds = std::chrono::duration<double>(end - start).count();
    return report;
}

} // namespace tca
