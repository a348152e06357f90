#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "crk/errors.hpp"

namespace crk::metrics {

using TokenSeq = std::vector<int32_t>;
using Candidates = std::map<int64_t, TokenSeq>;
using References = std::map<int64_t, std::vector<TokenSeq>>;

namespace detail {

using NgramCounts = std::map<TokenSeq, double>;

inline NgramCounts ngram_counts(const TokenSeq& tokens, size_t n) {
    NgramCounts counts;
    if (tokens.size() >= n)
        for (size_t i = 0; i + n <= tokens.size(); ++i)
            counts[TokenSeq(tokens.begin() + i, tokens.begin() + i + n)] += 1.0;
    return counts;
}

// Per-image sufficient statistics for corpus BLEU; summing these over any
// sub-corpus reproduces its corpus score exactly.
struct BleuStats {
    double clipped[4] = {0, 0, 0, 0};
    double total[4] = {0, 0, 0, 0};
    int64_t cand_len = 0;
    int64_t ref_len = 0;  // closest reference length, ties to the shorter
};

inline BleuStats bleu_stats(const TokenSeq& cand, const std::vector<TokenSeq>& refs) {
    BleuStats st;
    st.cand_len = static_cast<int64_t>(cand.size());
    int64_t best_len = static_cast<int64_t>(refs.front().size());
    for (const auto& r : refs) {
        const int64_t len = static_cast<int64_t>(r.size());
        const int64_t d = std::abs(len - st.cand_len);
        const int64_t best_d = std::abs(best_len - st.cand_len);
        if (d < best_d || (d == best_d && len < best_len)) best_len = len;
    }
    st.ref_len = best_len;
    for (size_t n = 1; n <= 4; ++n) {
        const NgramCounts cc = ngram_counts(cand, n);
        NgramCounts max_ref;
        for (const auto& r : refs)
            for (const auto& [gram, count] : ngram_counts(r, n))
                max_ref[gram] = std::max(max_ref[gram], count);
        for (const auto& [gram, count] : cc) {
            st.total[n - 1] += count;
            auto it = max_ref.find(gram);
            if (it != max_ref.end()) st.clipped[n - 1] += std::min(count, it->second);
        }
    }
    return st;
}

inline double bleu_from_stats(const BleuStats& st) {
    if (st.cand_len == 0) return 0.0;
    double log_precision = 0.0;
    for (int n = 0; n < 4; ++n) {
        if (st.total[n] <= 0.0 || st.clipped[n] <= 0.0) return 0.0;
        log_precision += std::log(st.clipped[n] / st.total[n]);
    }
    const double bp = st.cand_len > st.ref_len
                          ? 1.0
                          : std::exp(1.0 - double(st.ref_len) / double(st.cand_len));
    return bp * std::exp(0.25 * log_precision);
}

inline const std::vector<TokenSeq>& refs_for(const References& refs, int64_t image_id) {
    auto it = refs.find(image_id);
    if (it == refs.end() || it->second.empty())
        throw InputError("no references for image " + std::to_string(image_id));
    return it->second;
}

}  // namespace detail

// Corpus BLEU-4: clipped modified n-gram precisions pooled over the corpus,
// geometric mean over n=1..4, brevity penalty from closest-reference lengths.
// No smoothing; zero overlap at any order gives 0.
inline double bleu4(const Candidates& cands, const References& refs) {
    if (cands.empty()) throw InputError("bleu4: no candidates");
    detail::BleuStats corpus;
    for (const auto& [image_id, cand] : cands) {
        const detail::BleuStats st = detail::bleu_stats(cand, detail::refs_for(refs, image_id));
        for (int n = 0; n < 4; ++n) {
            corpus.clipped[n] += st.clipped[n];
            corpus.total[n] += st.total[n];
        }
        corpus.cand_len += st.cand_len;
        corpus.ref_len += st.ref_len;
    }
    return detail::bleu_from_stats(corpus);
}

// Sentence BLEU-4 with add-one smoothing on orders 2..4: a zero clipped count
// or zero n-gram total is replaced by 1. Candidates shorter than 2 tokens
// score 0 by convention.
inline double bleu4_sentence(const TokenSeq& cand, const std::vector<TokenSeq>& refs) {
    if (refs.empty()) throw InputError("bleu4_sentence: no references");
    if (cand.size() < 2) return 0.0;
    const detail::BleuStats st = detail::bleu_stats(cand, refs);
    if (st.clipped[0] <= 0.0) return 0.0;
    double log_precision = std::log(st.clipped[0] / st.total[0]);
    for (int n = 1; n < 4; ++n) {
        const double num = st.clipped[n] > 0.0 ? st.clipped[n] : 1.0;
        const double den = st.total[n] > 0.0 ? st.total[n] : 1.0;
        log_precision += std::log(num / den);
    }
    const double bp = st.cand_len > st.ref_len
                          ? 1.0
                          : std::exp(1.0 - double(st.ref_len) / double(st.cand_len));
    return bp * std::exp(0.25 * log_precision);
}

// CIDEr (the original formulation, not CIDEr-D). Per image and per n-gram
// order: cosine between the candidate count*idf vector and the mean of the
// reference vectors; scores average over n=1..4 and scale by 10. Document
// frequency counts the evaluated images whose reference set contains the
// n-gram, floored at 1; idf = log(M / df).
inline std::map<int64_t, double> cider_per_image(const Candidates& cands, const References& refs) {
    if (cands.size() < 2)
        throw InputError("cider: needs at least 2 images (idf is degenerate otherwise)");
    const double num_images = static_cast<double>(cands.size());

    std::map<int64_t, double> scores;
    for (const auto& [image_id, cand] : cands) scores[image_id] = 0.0;

    for (size_t n = 1; n <= 4; ++n) {
        std::map<TokenSeq, double> df;
        std::map<int64_t, detail::NgramCounts> ref_sum;  // per image, counts summed over refs
        std::map<int64_t, size_t> ref_m;
        for (const auto& [image_id, cand] : cands) {
            const auto& image_refs = detail::refs_for(refs, image_id);
            auto& sum = ref_sum[image_id];
            for (const auto& r : image_refs)
                for (const auto& [gram, count] : detail::ngram_counts(r, n)) sum[gram] += count;
            for (const auto& [gram, count] : sum) df[gram] += 1.0;
            ref_m[image_id] = image_refs.size();
        }
        const auto idf = [&](const TokenSeq& gram) {
            auto it = df.find(gram);
            const double d = it == df.end() ? 1.0 : std::max(it->second, 1.0);
            return std::log(num_images / d);
        };
        for (const auto& [image_id, cand] : cands) {
            const detail::NgramCounts cc = detail::ngram_counts(cand, n);
            const auto& sum = ref_sum[image_id];
            const double inv_m = 1.0 / static_cast<double>(ref_m[image_id]);
            double dot = 0.0, cand_norm = 0.0, ref_norm = 0.0;
            for (const auto& [gram, count] : cc) {
                const double w = count * idf(gram);
                cand_norm += w * w;
                auto it = sum.find(gram);
                if (it != sum.end()) dot += w * (it->second * inv_m * idf(gram));
            }
            for (const auto& [gram, count] : sum) {
                const double w = count * inv_m * idf(gram);
                ref_norm += w * w;
            }
            if (dot > 0.0 && cand_norm > 0.0 && ref_norm > 0.0)
                scores[image_id] += 2.5 * dot / (std::sqrt(cand_norm) * std::sqrt(ref_norm));
        }
    }
    return scores;
}

inline double cider(const Candidates& cands, const References& refs) {
    const auto per_image = cider_per_image(cands, refs);
    double sum = 0.0;
    for (const auto& [image_id, score] : per_image) sum += score;
    return sum / static_cast<double>(per_image.size());
}

struct PerExample {
    int64_t image_id = 0;
    double bleu4 = 0.0;
    double cider = 0.0;
};

struct MetricReport {
    double bleu4 = 0.0;
    double cider = 0.0;
    std::vector<PerExample> per_example;  // empty unless requested
};

inline MetricReport evaluate(const Candidates& cands, const References& refs,
                             bool with_per_example) {
    MetricReport report;
    report.bleu4 = bleu4(cands, refs);
    const auto per_image_cider = cider_per_image(cands, refs);
    double cider_sum = 0.0;
    for (const auto& [image_id, score] : per_image_cider) cider_sum += score;
    report.cider = cider_sum / static_cast<double>(per_image_cider.size());
    if (with_per_example) {
        report.per_example.reserve(cands.size());
        for (const auto& [image_id, cand] : cands)
            report.per_example.push_back({image_id,
                                          bleu4_sentence(cand, detail::refs_for(refs, image_id)),
                                          per_image_cider.at(image_id)});
    }
    return report;
}

inline nlohmann::json to_json(const MetricReport& r) {
    nlohmann::json j{{"corpus", {{"bleu4", r.bleu4}, {"cider", r.cider}}}};
    j["per_example"] = nlohmann::json::array();
    for (const auto& e : r.per_example)
        j["per_example"].push_back(
            {{"image_id", e.image_id}, {"bleu4", e.bleu4}, {"cider", e.cider}});
    return j;
}

inline MetricReport report_from_json(const nlohmann::json& j) {
    MetricReport r;
    r.bleu4 = j.at("corpus").at("bleu4").get<double>();
    r.cider = j.at("corpus").at("cider").get<double>();
    for (const auto& e : j.at("per_example"))
        r.per_example.push_back({e.at("image_id").get<int64_t>(), e.at("bleu4").get<double>(),
                                 e.at("cider").get<double>()});
    return r;
}

// Candidates file: JSON-lines {"image_id", "tokens"}.
inline void save_candidates(const std::filesystem::path& path, const Candidates& cands) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw InputError("cannot open candidates file for writing: " + path.string());
    for (const auto& [image_id, tokens] : cands) {
        nlohmann::json j{{"image_id", image_id}, {"tokens", tokens}};
        out << j.dump() << "\n";
    }
    if (!out) throw InputError("failed writing candidates file: " + path.string());
}

inline Candidates load_candidates(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open candidates file: " + path.string());
    Candidates out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const nlohmann::json j = nlohmann::json::parse(line);
            const int64_t image_id = j.at("image_id").get<int64_t>();
            if (!out.emplace(image_id, j.at("tokens").get<TokenSeq>()).second)
                throw InputError("duplicate image_id " + std::to_string(image_id));
        } catch (const nlohmann::json::exception& e) {
            throw InputError("candidates file line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace crk::metrics
