#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crk/data.hpp"
#include "crk/difficulty.hpp"
#include "crk/errors.hpp"
#include "crk/learner.hpp"
#include "crk/metrics.hpp"
#include "crk/parallel.hpp"
#include "crk/rng.hpp"
#include "crk/scheduler.hpp"

namespace crk::analysis {

// Splits images into difficulty levels by the vanilla model's per-image
// sentence BLEU. Level 1 holds the highest-BLEU (easiest) images; the split
// uses the curriculum's remainder rule and breaks ties by ascending image_id.
inline std::vector<std::vector<int64_t>> divide_by_difficulty(
    const std::map<int64_t, double>& per_image_bleu, size_t levels) {
    const size_t n = per_image_bleu.size();
    if (levels < 2) throw InputError("divide_by_difficulty: levels must be >= 2");
    if (levels > n)
        throw InputError("divide_by_difficulty: more levels than images (" +
                         std::to_string(levels) + " > " + std::to_string(n) + ")");
    std::vector<std::pair<int64_t, double>> items(per_image_bleu.begin(), per_image_bleu.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<std::vector<int64_t>> out;
    out.reserve(levels);
    for (const auto& [begin, end] : sched::equal_buckets(n, levels)) {
        std::vector<int64_t> level;
        level.reserve(end - begin);
        for (size_t i = begin; i < end; ++i) level.push_back(items[i].first);
        out.push_back(std::move(level));
    }
    return out;
}

// Token re-encoding between vocabularies by surface string; unknown strings
// map to UNK. Idempotent once in the target vocabulary.
inline std::vector<int32_t> re_encode(const std::vector<int32_t>& tokens,
                                      const std::vector<std::string>& from_vocab,
                                      const std::map<std::string, int32_t>& to_ids) {
    std::vector<int32_t> out;
    out.reserve(tokens.size());
    for (int32_t t : tokens) {
        auto it = to_ids.find(from_vocab.at(static_cast<size_t>(t)));
        out.push_back(it == to_ids.end() ? data::UNK_ID : it->second);
    }
    return out;
}

inline std::map<std::string, int32_t> vocab_index(const std::vector<std::string>& vocab) {
    std::map<std::string, int32_t> out;
    for (size_t i = 0; i < vocab.size(); ++i) out.emplace(vocab[i], static_cast<int32_t>(i));
    return out;
}

// Decodes every image of a foreign test set with the model and scores against
// the foreign references re-encoded into the model's vocabulary.
inline metrics::MetricReport cross_dataset_eval(const learner::ToyModel& model,
                                                const std::vector<std::string>& model_vocab,
                                                const data::Dataset& foreign,
                                                std::span<const size_t> pair_indices,
                                                size_t decode_max_len = 20, unsigned threads = 1) {
    if (foreign.feature_dim != model.feature_dim)
        throw InputError("cross_dataset_eval: feature-dimension mismatch (dataset " +
                         std::to_string(foreign.feature_dim) + ", model " +
                         std::to_string(model.feature_dim) + ")");
    const auto images = data::distinct_images(foreign, pair_indices);
    const auto to_ids = vocab_index(model_vocab);

    std::vector<std::pair<int64_t, const data::CaptionPair*>> ordered(images.begin(), images.end());
    std::vector<metrics::TokenSeq> decoded(ordered.size());
    parallel_for(ordered.size(), threads, [&](size_t i) {
        decoded[i] = sched::detail::strip_trailing_eos(
            learner::greedy_decode(model, ordered[i].second->features, decode_max_len));
    });

    metrics::Candidates cands;
    metrics::References refs;
    for (size_t i = 0; i < ordered.size(); ++i) {
        const int64_t image_id = ordered[i].first;
        cands[image_id] = decoded[i];
        auto& image_refs = refs[image_id];
        for (const auto& ref : foreign.references.at(image_id))
            image_refs.push_back(re_encode(ref, foreign.vocab, to_ids));
    }
    return metrics::evaluate(cands, refs, /*with_per_example=*/true);
}

struct BootstrapConfig {
    size_t n_resamples = 1000;
    size_t resample_size = 0;  // 0 = size of the test set
    uint64_t seed = 0;
    unsigned threads = 1;
};

struct SignificanceResult {
    double p_bleu4 = 0.0;
    double p_cider = 0.0;
    size_t n_resamples = 0;
    size_t resample_size = 0;
    uint64_t seed = 0;
};

inline nlohmann::json to_json(const SignificanceResult& r) {
    return {{"p_value", {{"bleu4", r.p_bleu4}, {"cider", r.p_cider}}},
            {"n_resamples", r.n_resamples},
            {"resample_size", r.resample_size},
            {"seed", r.seed}};
}

// The with-replacement draw for one replicate; a pure function of (seed,
// replicate), so replicates can be evaluated in parallel and replayed.
inline std::vector<int64_t> resample_image_ids(std::span<const int64_t> ids, uint64_t seed,
                                               size_t replicate, size_t size) {
    Rng rng(seed_stream(seed_stream(seed, 0xb0075ULL), replicate));
    std::vector<int64_t> out(size);
    for (auto& id : out) id = ids[rng.below(ids.size())];
    return out;
}

namespace detail {

// Sparse n-gram vector with interned gram ids, sorted by id.
using SparseVec = std::vector<std::pair<int32_t, double>>;

inline SparseVec to_sparse(const metrics::detail::NgramCounts& counts,
                           std::map<metrics::TokenSeq, int32_t>& intern) {
    SparseVec out;
    out.reserve(counts.size());
    for (const auto& [gram, count] : counts) {
        auto [it, inserted] =
            intern.emplace(gram, static_cast<int32_t>(intern.size()));
        out.emplace_back(it->second, count);
    }
    std::sort(out.begin(), out.end());
    return out;
}

// Per-order, per-image structures shared by all replicates. Recomputing
// corpus metrics from these per resample is what keeps 1000 replicates cheap.
struct PairedCorpus {
    std::vector<int64_t> ids;  // sorted
    std::vector<metrics::detail::BleuStats> bleu_a, bleu_b;
    std::array<std::vector<SparseVec>, 4> cand_a, cand_b, ref_sum;
    std::vector<double> inv_m;                 // 1 / reference count, per image
    std::array<size_t, 4> n_grams = {0, 0, 0, 0};
};

inline PairedCorpus build_paired_corpus(const metrics::Candidates& a,
                                        const metrics::Candidates& b,
                                        const metrics::References& refs) {
    PairedCorpus pc;
    for (const auto& [image_id, cand] : a) pc.ids.push_back(image_id);
    {
        auto it = pc.ids.begin();
        for (const auto& [image_id, cand] : b) {
            if (it == pc.ids.end() || *it != image_id)
                throw InputError("paired bootstrap: candidate image-id sets differ");
            ++it;
        }
        if (it != pc.ids.end() || a.size() != b.size())
            throw InputError("paired bootstrap: candidate image-id sets differ");
    }
    const size_t n = pc.ids.size();
    pc.bleu_a.reserve(n);
    pc.bleu_b.reserve(n);
    pc.inv_m.reserve(n);
    std::array<std::map<metrics::TokenSeq, int32_t>, 4> intern;
    for (int64_t image_id : pc.ids) {
        const auto& image_refs = metrics::detail::refs_for(refs, image_id);
        pc.bleu_a.push_back(metrics::detail::bleu_stats(a.at(image_id), image_refs));
        pc.bleu_b.push_back(metrics::detail::bleu_stats(b.at(image_id), image_refs));
        pc.inv_m.push_back(1.0 / static_cast<double>(image_refs.size()));
        for (size_t order = 0; order < 4; ++order) {
            pc.cand_a[order].push_back(
                to_sparse(metrics::detail::ngram_counts(a.at(image_id), order + 1), intern[order]));
            pc.cand_b[order].push_back(
                to_sparse(metrics::detail::ngram_counts(b.at(image_id), order + 1), intern[order]));
            metrics::detail::NgramCounts sum;
            for (const auto& r : image_refs)
                for (const auto& [gram, count] : metrics::detail::ngram_counts(r, order + 1))
                    sum[gram] += count;
            pc.ref_sum[order].push_back(to_sparse(sum, intern[order]));
        }
    }
    for (size_t order = 0; order < 4; ++order) pc.n_grams[order] = intern[order].size();
    return pc;
}

inline double cosine_sparse(const SparseVec& cand, const SparseVec& ref_sum, double inv_m,
                            const std::vector<double>& idf_by_df, const std::vector<int32_t>& df) {
    double dot = 0.0, cand_norm = 0.0, ref_norm = 0.0;
    auto it = ref_sum.begin();
    for (const auto& [gid, count] : cand) {
        const double w = count * idf_by_df[static_cast<size_t>(df[gid])];
        cand_norm += w * w;
        while (it != ref_sum.end() && it->first < gid) ++it;
        if (it != ref_sum.end() && it->first == gid)
            dot += w * it->second * inv_m * idf_by_df[static_cast<size_t>(df[gid])];
    }
    for (const auto& [gid, count] : ref_sum) {
        const double w = count * inv_m * idf_by_df[static_cast<size_t>(df[gid])];
        ref_norm += w * w;
    }
    if (dot <= 0.0 || cand_norm <= 0.0 || ref_norm <= 0.0) return 0.0;
    return dot / (std::sqrt(cand_norm) * std::sqrt(ref_norm));
}

struct ReplicateScores {
    double bleu_a = 0.0, bleu_b = 0.0, cider_a = 0.0, cider_b = 0.0;
};

// Corpus scores of both systems on one resampled multiset, expressed as image
// multiplicities. A duplicated image is simply a corpus with two identical
// images: document frequency and the image count both include duplicates.
inline ReplicateScores score_replicate(const PairedCorpus& pc,
                                       const std::vector<uint32_t>& multiplicity,
                                       size_t resample_size) {
    ReplicateScores out;
    metrics::detail::BleuStats stats_a, stats_b;
    for (size_t i = 0; i < multiplicity.size(); ++i) {
        if (multiplicity[i] == 0) continue;
        const double c = multiplicity[i];
        for (int n = 0; n < 4; ++n) {
            stats_a.clipped[n] += c * pc.bleu_a[i].clipped[n];
            stats_a.total[n] += c * pc.bleu_a[i].total[n];
            stats_b.clipped[n] += c * pc.bleu_b[i].clipped[n];
            stats_b.total[n] += c * pc.bleu_b[i].total[n];
        }
        stats_a.cand_len += multiplicity[i] * pc.bleu_a[i].cand_len;
        stats_a.ref_len += multiplicity[i] * pc.bleu_a[i].ref_len;
        stats_b.cand_len += multiplicity[i] * pc.bleu_b[i].cand_len;
        stats_b.ref_len += multiplicity[i] * pc.bleu_b[i].ref_len;
    }
    out.bleu_a = metrics::detail::bleu_from_stats(stats_a);
    out.bleu_b = metrics::detail::bleu_from_stats(stats_b);

    const double num_images = static_cast<double>(resample_size);
    std::vector<double> idf_by_df(resample_size + 1);
    idf_by_df[0] = std::log(num_images);  // df floored at 1
    for (size_t d = 1; d <= resample_size; ++d)
        idf_by_df[d] = std::log(num_images / static_cast<double>(d));

    double cider_a = 0.0, cider_b = 0.0;
    std::vector<int32_t> df;
    for (size_t order = 0; order < 4; ++order) {
        df.assign(pc.n_grams[order], 0);
        for (size_t i = 0; i < multiplicity.size(); ++i) {
            if (multiplicity[i] == 0) continue;
            for (const auto& [gid, count] : pc.ref_sum[order][i])
                df[static_cast<size_t>(gid)] += static_cast<int32_t>(multiplicity[i]);
        }
        for (size_t i = 0; i < multiplicity.size(); ++i) {
            if (multiplicity[i] == 0) continue;
            const double weight = 2.5 * multiplicity[i];
            cider_a += weight * cosine_sparse(pc.cand_a[order][i], pc.ref_sum[order][i],
                                              pc.inv_m[i], idf_by_df, df);
            cider_b += weight * cosine_sparse(pc.cand_b[order][i], pc.ref_sum[order][i],
                                              pc.inv_m[i], idf_by_df, df);
        }
    }
    out.cider_a = cider_a / num_images;
    out.cider_b = cider_b / num_images;
    return out;
}

}  // namespace detail

// Paired bootstrap significance test: resample the test images with
// replacement n_resamples times, score both systems on every resample, and
// estimate the probability that A fails to outperform B. Exact ties count
// half, so comparing a system against itself calibrates to p = 0.5.
inline SignificanceResult paired_bootstrap_test(const metrics::Candidates& cands_a,
                                                const metrics::Candidates& cands_b,
                                                const metrics::References& refs,
                                                const BootstrapConfig& cfg) {
    if (cfg.n_resamples < 1) throw InputError("paired bootstrap: n_resamples must be >= 1");
    const detail::PairedCorpus pc = detail::build_paired_corpus(cands_a, cands_b, refs);
    if (pc.ids.empty()) throw InputError("paired bootstrap: empty test set");
    const size_t resample_size = cfg.resample_size == 0 ? pc.ids.size() : cfg.resample_size;

    std::vector<detail::ReplicateScores> scores(cfg.n_resamples);
    parallel_for(cfg.n_resamples, cfg.threads, [&](size_t r) {
        const std::vector<int64_t> drawn =
            resample_image_ids(pc.ids, cfg.seed, r, resample_size);
        std::vector<uint32_t> multiplicity(pc.ids.size(), 0);
        for (int64_t id : drawn) {
            const auto it = std::lower_bound(pc.ids.begin(), pc.ids.end(), id);
            ++multiplicity[static_cast<size_t>(it - pc.ids.begin())];
        }
        scores[r] = detail::score_replicate(pc, multiplicity, resample_size);
    });

    double bleu_losses = 0.0, cider_losses = 0.0;
    for (const auto& s : scores) {
        bleu_losses += s.bleu_a < s.bleu_b ? 1.0 : (s.bleu_a == s.bleu_b ? 0.5 : 0.0);
        cider_losses += s.cider_a < s.cider_b ? 1.0 : (s.cider_a == s.cider_b ? 0.5 : 0.0);
    }
    SignificanceResult result;
    result.p_bleu4 = bleu_losses / static_cast<double>(cfg.n_resamples);
    result.p_cider = cider_losses / static_cast<double>(cfg.n_resamples);
    result.n_resamples = cfg.n_resamples;
    result.resample_size = resample_size;
    result.seed = cfg.seed;
    return result;
}

struct DispersionEntry {
    std::string method;
    difficulty::Dispersion dispersion;
    std::array<size_t, 20> histogram = {};  // counts over [0,1] in 20 bins
};

// Normalizes each method's score table, measures its dispersion, and ranks
// the methods by standard deviation (widest first).
inline std::vector<DispersionEntry> compare_dispersion(
    const std::vector<std::pair<std::string, std::vector<double>>>& tables) {
    if (tables.size() < 2) throw InputError("compare_dispersion: need at least 2 methods");
    std::vector<DispersionEntry> out;
    out.reserve(tables.size());
    for (const auto& [method, scores] : tables) {
        const std::vector<double> normalized = difficulty::normalize_scores(scores);
        DispersionEntry entry;
        entry.method = method;
        entry.dispersion = difficulty::dispersion(normalized);
        for (double v : normalized) {
            const size_t bin = std::min<size_t>(static_cast<size_t>(v * 20.0), 19);
            ++entry.histogram[bin];
        }
        out.push_back(std::move(entry));
    }
    std::stable_sort(out.begin(), out.end(), [](const DispersionEntry& a, const DispersionEntry& b) {
        return a.dispersion.stddev > b.dispersion.stddev;
    });
    return out;
}

inline nlohmann::json to_json(const std::vector<DispersionEntry>& entries) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : entries)
        j.push_back({{"method", e.method},
                     {"stddev", e.dispersion.stddev},
                     {"iqr", e.dispersion.iqr},
                     {"histogram", e.histogram}});
    return j;
}

}  // namespace crk::analysis
