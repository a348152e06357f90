#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crk/data.hpp"
#include "crk/errors.hpp"
#include "crk/learner.hpp"
#include "crk/parallel.hpp"

namespace crk::difficulty {

enum class Method { SimiCosine, SimiSigmoid, Addup, Bootstrap };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::SimiCosine: return "simi-cos";
        case Method::SimiSigmoid: return "simi-sigmoid";
        case Method::Addup: return "addup";
        case Method::Bootstrap: return "bootstrap";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    if (s == "simi-cos") return Method::SimiCosine;
    if (s == "simi-sigmoid") return Method::SimiSigmoid;
    if (s == "addup") return Method::Addup;
    if (s == "bootstrap") return Method::Bootstrap;
    throw InputError("unknown difficulty method: " + s);
}

// Scalar difficulty with canonical orientation: larger = harder. Similarity
// measurements keep their native value in `raw` and are negated into
// `difficulty`; loss-type measurements are already oriented.
struct DifficultyScore {
    int64_t pair_id = 0;
    double raw = 0.0;
    double difficulty = 0.0;
    Method method = Method::SimiCosine;
};

inline DifficultyScore make_score(int64_t pair_id, Method method, double raw) {
    switch (method) {
        case Method::SimiCosine:
            if (!(raw >= -1.0 && raw <= 1.0))
                throw InputError("simi-cos raw score out of [-1, 1]");
            return {pair_id, raw, -raw, method};
        case Method::SimiSigmoid:
            if (!(raw > 0.0 && raw < 1.0))
                throw InputError("simi-sigmoid raw score out of (0, 1)");
            return {pair_id, raw, -raw, method};
        case Method::Addup:
        case Method::Bootstrap:
            if (!(raw >= 0.0)) throw InputError("loss-type raw score must be >= 0");
            return {pair_id, raw, raw, method};
    }
    throw InputError("unknown method");
}

inline double cosine_similarity(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.empty())
        throw InputError("cosine_similarity: dimension mismatch (" + std::to_string(x.size()) +
                         " vs " + std::to_string(y.size()) + ")");
    double dot = 0.0, nx = 0.0, ny = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        dot += x[i] * y[i];
        nx += x[i] * x[i];
        ny += y[i] * y[i];
    }
    if (nx == 0.0 || ny == 0.0) throw InputError("cosine_similarity: zero-norm input");
    return std::clamp(dot / (std::sqrt(nx) * std::sqrt(ny)), -1.0, 1.0);
}

namespace detail {

// Largest double below 1; keeps sigmoid output strictly inside (0, 1) even
// when the logit saturates.
constexpr double ONE_MINUS_ULP = 0x1.fffffffffffffp-1;

inline double stable_sigmoid(double x) {
    double s;
    if (x >= 0.0) {
        s = 1.0 / (1.0 + std::exp(-x));
    } else {
        const double e = std::exp(x);
        s = e / (1.0 + e);
    }
    return std::clamp(s, std::numeric_limits<double>::min(), ONE_MINUS_ULP);
}

}  // namespace detail

inline double sigmoid_head_score(std::span<const double> z, const data::AffineHead& head) {
    if (z.size() != head.w.size())
        throw InputError("sigmoid_head_score: dimension mismatch (" + std::to_string(z.size()) +
                         " vs head " + std::to_string(head.w.size()) + ")");
    double logit = head.b;
    for (size_t i = 0; i < z.size(); ++i) logit += head.w[i] * z[i];
    return detail::stable_sigmoid(logit);
}

// Summed Shannon entropy of the per-box class distributions, natural log,
// with the 0 log 0 = 0 convention.
inline double detection_entropy(const std::vector<std::vector<double>>& det_probs) {
    if (det_probs.empty()) throw InputError("detection_entropy: empty matrix");
    double total = 0.0;
    for (size_t k = 0; k < det_probs.size(); ++k) {
        double sum = 0.0;
        double row_entropy = 0.0;
        for (double p : det_probs[k]) {
            if (p < 0.0)
                throw InputError("detection_entropy: negative entry in row " + std::to_string(k));
            sum += p;
            if (p > 0.0) row_entropy -= p * std::log(std::max(p, 1e-12));
        }
        if (std::abs(sum - 1.0) > 1e-6)
            throw InputError("detection_entropy: row " + std::to_string(k) +
                             " is not row-stochastic (sum=" + std::to_string(sum) + ")");
        total += row_entropy;
    }
    return total;
}

// Total (not per-token-averaged) negative log-likelihood.
inline double token_negloglik(std::span<const double> lm_logprobs) {
    double total = 0.0;
    for (size_t t = 0; t < lm_logprobs.size(); ++t) {
        if (lm_logprobs[t] > 0.0)
            throw InputError("token_negloglik: entry " + std::to_string(t) +
                             " is positive (not a log-probability)");
        total -= lm_logprobs[t];
    }
    return total;
}

struct AddupConfig {
    double lambda = 0.6;
    int top_k = 10;       // K detected boxes
    int n_classes = 1600; // N object classes
};

inline void validate_addup_config(const AddupConfig& cfg) {
    if (!(cfg.lambda >= 0.0 && cfg.lambda <= 1.0))
        throw InputError("addup lambda must be in [0, 1]");
    if (cfg.top_k < 1) throw InputError("addup top_k must be >= 1");
    if (cfg.n_classes < 2) throw InputError("addup n_classes must be >= 2");
}

// Weighted sum of the two mono-modal difficulties; both inputs must already be
// min-max normalized over the training set.
inline double addup_difficulty(double dv, double dt, const AddupConfig& cfg) {
    validate_addup_config(cfg);
    if (!(dv >= 0.0 && dv <= 1.0 && dt >= 0.0 && dt <= 1.0))
        throw InputError("addup_difficulty expects normalized inputs in [0, 1]");
    return cfg.lambda * dv + (1.0 - cfg.lambda) * dt;
}

// Cross-entropy of the pair under a model pre-trained on the same data with
// the regular strategy. Shares the learner's forward pass verbatim.
inline double bootstrap_difficulty(const learner::ToyModel& model, const data::CaptionPair& pair) {
    return learner::caption_nll(model, pair);
}

inline std::vector<double> normalize_scores(std::span<const double> scores) {
    if (scores.size() < 2) throw InputError("normalize_scores: need at least 2 scores");
    double lo = scores[0], hi = scores[0];
    for (double s : scores) {
        lo = std::min(lo, s);
        hi = std::max(hi, s);
    }
    if (lo == hi) throw InputError("normalize_scores: degenerate range (all scores equal)");
    std::vector<double> out(scores.size());
    const double inv = 1.0 / (hi - lo);
    for (size_t i = 0; i < scores.size(); ++i) out[i] = (scores[i] - lo) * inv;
    return out;
}

struct Dispersion {
    double stddev = 0.0;
    double iqr = 0.0;
};

namespace detail {

// Linear-interpolation quantile over a sorted sample.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    if (lo + 1 >= sorted.size()) return sorted.back();
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

}  // namespace detail

inline Dispersion dispersion(std::span<const double> scores) {
    if (scores.size() < 2) throw InputError("dispersion: need at least 2 scores");
    const double n = static_cast<double>(scores.size());
    double mean = 0.0;
    for (double s : scores) mean += s;
    mean /= n;
    double var = 0.0;
    for (double s : scores) var += (s - mean) * (s - mean);
    var /= n;  // population variance
    std::vector<double> sorted(scores.begin(), scores.end());
    std::sort(sorted.begin(), sorted.end());
    return {std::sqrt(var),
            detail::quantile_sorted(sorted, 0.75) - detail::quantile_sorted(sorted, 0.25)};
}

// Easy-to-hard permutation of score positions; ties broken by ascending
// pair_id so the ordering never depends on the input order.
inline std::vector<size_t> rank_by_difficulty(const std::vector<DifficultyScore>& scores) {
    if (scores.empty()) throw InputError("rank_by_difficulty: empty score list");
    std::set<int64_t> ids;
    for (const auto& s : scores) {
        if (s.method != scores.front().method)
            throw InputError("rank_by_difficulty: inconsistent score methods");
        if (!ids.insert(s.pair_id).second)
            throw InputError("rank_by_difficulty: duplicate score for pair " +
                             std::to_string(s.pair_id));
    }
    std::vector<size_t> order(scores.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (scores[a].difficulty != scores[b].difficulty)
            return scores[a].difficulty < scores[b].difficulty;
        return scores[a].pair_id < scores[b].pair_id;
    });
    return order;
}

// ---- whole-dataset scoring pipelines ----

inline std::vector<DifficultyScore> score_simi_cosine(const data::Dataset& ds) {
    std::vector<DifficultyScore> out;
    out.reserve(ds.pairs.size());
    for (const auto& p : ds.pairs) {
        if (!p.has_vis_embed())
            throw InputError("pair " + std::to_string(p.pair_id) +
                             ": missing vis_embed (required by simi-cos)");
        if (!p.has_txt_embed())
            throw InputError("pair " + std::to_string(p.pair_id) +
                             ": missing txt_embed (required by simi-cos)");
        out.push_back(
            make_score(p.pair_id, Method::SimiCosine, cosine_similarity(p.vis_embed, p.txt_embed)));
    }
    return out;
}

inline std::vector<DifficultyScore> score_simi_sigmoid(const data::Dataset& ds,
                                                       const data::AffineHead& head) {
    std::vector<DifficultyScore> out;
    out.reserve(ds.pairs.size());
    for (const auto& p : ds.pairs) {
        if (!p.has_joint_repr())
            throw InputError("pair " + std::to_string(p.pair_id) +
                             ": missing joint_repr (required by simi-sigmoid)");
        out.push_back(
            make_score(p.pair_id, Method::SimiSigmoid, sigmoid_head_score(p.joint_repr, head)));
    }
    return out;
}

// D_v and D_t are min-max normalized over the whole scored set before the
// lambda-weighted sum; the two native scales are incommensurable otherwise.
inline std::vector<DifficultyScore> score_addup(const data::Dataset& ds, const AddupConfig& cfg) {
    validate_addup_config(cfg);
    std::vector<double> dv(ds.pairs.size()), dt(ds.pairs.size());
    for (size_t i = 0; i < ds.pairs.size(); ++i) {
        const auto& p = ds.pairs[i];
        if (!p.has_det_probs())
            throw InputError("pair " + std::to_string(p.pair_id) +
                             ": missing det_probs (required by addup)");
        if (!p.has_lm_logprobs())
            throw InputError("pair " + std::to_string(p.pair_id) +
                             ": missing lm_logprobs (required by addup)");
        if (p.det_probs.size() != static_cast<size_t>(cfg.top_k) ||
            p.det_probs.front().size() != static_cast<size_t>(cfg.n_classes))
            throw InputError("pair " + std::to_string(p.pair_id) + ": det_probs is " +
                             std::to_string(p.det_probs.size()) + "x" +
                             std::to_string(p.det_probs.front().size()) + ", expected " +
                             std::to_string(cfg.top_k) + "x" + std::to_string(cfg.n_classes));
        dv[i] = detection_entropy(p.det_probs);
        dt[i] = token_negloglik(p.lm_logprobs);
    }
    const std::vector<double> dvn = normalize_scores(dv);
    const std::vector<double> dtn = normalize_scores(dt);
    std::vector<DifficultyScore> out;
    out.reserve(ds.pairs.size());
    for (size_t i = 0; i < ds.pairs.size(); ++i)
        out.push_back(
            make_score(ds.pairs[i].pair_id, Method::Addup, addup_difficulty(dvn[i], dtn[i], cfg)));
    return out;
}

inline std::vector<DifficultyScore> score_bootstrap(const data::Dataset& ds,
                                                    const learner::ToyModel& model,
                                                    unsigned threads = 1) {
    if (static_cast<int32_t>(ds.vocab.size()) != model.vocab_size)
        throw InputError("bootstrap scoring: dataset vocab size " +
                         std::to_string(ds.vocab.size()) + " does not match model V " +
                         std::to_string(model.vocab_size));
    if (ds.feature_dim != model.feature_dim)
        throw InputError("bootstrap scoring: feature-dimension mismatch");
    std::vector<double> nll(ds.pairs.size());
    parallel_for(ds.pairs.size(), threads,
                 [&](size_t i) { nll[i] = bootstrap_difficulty(model, ds.pairs[i]); });
    std::vector<DifficultyScore> out;
    out.reserve(ds.pairs.size());
    for (size_t i = 0; i < ds.pairs.size(); ++i)
        out.push_back(make_score(ds.pairs[i].pair_id, Method::Bootstrap, nll[i]));
    return out;
}

// Score table: JSON-lines {"pair_id", "method", "raw", "difficulty"}.
inline void write_scores(const std::filesystem::path& path,
                         const std::vector<DifficultyScore>& scores) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw InputError("cannot open score file for writing: " + path.string());
    for (const auto& s : scores) {
        nlohmann::json j{{"pair_id", s.pair_id},
                         {"method", method_name(s.method)},
                         {"raw", s.raw},
                         {"difficulty", s.difficulty}};
        out << j.dump() << "\n";
    }
    if (!out) throw InputError("failed writing score file: " + path.string());
}

inline std::vector<DifficultyScore> load_scores(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open score file: " + path.string());
    std::vector<DifficultyScore> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const nlohmann::json j = nlohmann::json::parse(line);
            DifficultyScore s = make_score(j.at("pair_id").get<int64_t>(),
                                           parse_method(j.at("method").get<std::string>()),
                                           j.at("raw").get<double>());
            const double stored = j.at("difficulty").get<double>();
            if (stored != s.difficulty)
                throw InputError("difficulty does not match the method's orientation of raw");
            out.push_back(s);
        } catch (const nlohmann::json::exception& e) {
            throw InputError("score file line " + std::to_string(line_no) + ": " + e.what());
        } catch (const InputError& e) {
            throw InputError("score file line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace crk::difficulty
