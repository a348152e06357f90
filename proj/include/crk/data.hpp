#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crk/errors.hpp"
#include "crk/matrix.hpp"
#include "crk/rng.hpp"

namespace crk::data {

// Reserved vocabulary ids.
constexpr int32_t BOS_ID = 0;
constexpr int32_t EOS_ID = 1;
constexpr int32_t UNK_ID = 2;

// One training example. Optional tensors are empty when absent; lm_logprobs
// cannot legitimately be empty (captions have length >= 1), so emptiness is
// an unambiguous absence marker for it too.
struct CaptionPair {
    int64_t pair_id = 0;
    int64_t image_id = 0;
    std::vector<double> features;                 // image representation, dim F
    std::vector<int32_t> tokens;                  // caption ids, ends with EOS
    std::vector<double> vis_embed;                // optional
    std::vector<double> txt_embed;                // optional
    std::vector<double> joint_repr;               // optional
    std::vector<std::vector<double>> det_probs;   // optional, K x N row-stochastic
    std::vector<double> lm_logprobs;              // optional, length T, entries <= 0

    bool has_vis_embed() const { return !vis_embed.empty(); }
    bool has_txt_embed() const { return !txt_embed.empty(); }
    bool has_joint_repr() const { return !joint_repr.empty(); }
    bool has_det_probs() const { return !det_probs.empty(); }
    bool has_lm_logprobs() const { return !lm_logprobs.empty(); }

    bool operator==(const CaptionPair&) const = default;
};

struct Dataset {
    std::string name;
    std::vector<std::string> vocab;  // index = token id; 0/1/2 are BOS/EOS/UNK
    int64_t feature_dim = 0;
    std::vector<CaptionPair> pairs;
    std::map<int64_t, std::vector<std::vector<int32_t>>> references;  // image_id -> gold captions

    int32_t vocab_size() const { return static_cast<int32_t>(vocab.size()); }

    bool operator==(const Dataset&) const = default;
};

// Pretrained fully-connected scoring head: score = sigmoid(w . z + b).
struct AffineHead {
    std::vector<double> w;
    double b = 0.0;
};

namespace detail {

inline std::string pair_tag(int64_t pair_id) {
    return "pair " + std::to_string(pair_id) + ": ";
}

}  // namespace detail

inline void validate_pair(const CaptionPair& p, int64_t vocab_size, int64_t feature_dim) {
    const std::string tag = detail::pair_tag(p.pair_id);
    if (static_cast<int64_t>(p.features.size()) != feature_dim)
        throw InputError(tag + "features have dimension " + std::to_string(p.features.size()) +
                         ", dataset feature_dim is " + std::to_string(feature_dim));
    if (p.tokens.empty()) throw InputError(tag + "tokens must be non-empty");
    for (int32_t t : p.tokens)
        if (t < 0 || t >= vocab_size)
            throw InputError(tag + "token id " + std::to_string(t) +
                             " out of range (vocab size " + std::to_string(vocab_size) + ")");
    if (p.has_det_probs()) {
        const size_t n = p.det_probs.front().size();
        if (n == 0) throw InputError(tag + "det_probs rows must be non-empty");
        for (size_t k = 0; k < p.det_probs.size(); ++k) {
            const auto& row = p.det_probs[k];
            if (row.size() != n)
                throw InputError(tag + "det_probs row " + std::to_string(k) +
                                 " has inconsistent length");
            double sum = 0.0;
            for (double v : row) {
                if (!(v >= 0.0))
                    throw InputError(tag + "det_probs row " + std::to_string(k) +
                                     " has a negative entry");
                sum += v;
            }
            if (std::abs(sum - 1.0) > 1e-6)
                throw InputError(tag + "det_probs row " + std::to_string(k) +
                                 " is not row-stochastic (sum=" + std::to_string(sum) + ")");
        }
    }
    if (p.has_lm_logprobs()) {
        if (p.lm_logprobs.size() != p.tokens.size())
            throw InputError(tag + "lm_logprobs length " + std::to_string(p.lm_logprobs.size()) +
                             " does not match token count " + std::to_string(p.tokens.size()));
        for (size_t t = 0; t < p.lm_logprobs.size(); ++t)
            if (p.lm_logprobs[t] > 0.0)
                throw InputError(tag + "lm_logprobs entry " + std::to_string(t) + " is positive");
    }
    if (p.has_vis_embed() && p.has_txt_embed() && p.vis_embed.size() != p.txt_embed.size())
        throw InputError(tag + "vis_embed and txt_embed dimensions differ (" +
                         std::to_string(p.vis_embed.size()) + " vs " +
                         std::to_string(p.txt_embed.size()) + ")");
}

inline void validate_dataset(const Dataset& ds) {
    if (ds.vocab.size() < 3)
        throw InputError("vocab must have at least 3 entries (ids 0/1/2 are BOS/EOS/UNK)");
    if (ds.feature_dim < 1) throw InputError("feature_dim must be >= 1");
    std::set<int64_t> seen;
    for (const auto& p : ds.pairs) {
        if (!seen.insert(p.pair_id).second)
            throw InputError("duplicate pair_id " + std::to_string(p.pair_id));
        validate_pair(p, ds.vocab_size(), ds.feature_dim);
        auto it = ds.references.find(p.image_id);
        if (it == ds.references.end() || it->second.empty())
            throw InputError(detail::pair_tag(p.pair_id) + "no references for image " +
                             std::to_string(p.image_id));
    }
    for (const auto& [image_id, refs] : ds.references) {
        for (const auto& ref : refs) {
            if (ref.empty())
                throw InputError("references for image " + std::to_string(image_id) +
                                 " contain an empty caption");
            for (int32_t t : ref)
                if (t < 0 || t >= ds.vocab_size())
                    throw InputError("references for image " + std::to_string(image_id) +
                                     ": token id " + std::to_string(t) + " out of range");
        }
    }
}

namespace detail {

inline std::vector<double> as_double_vec(const nlohmann::json& j) {
    std::vector<double> out;
    out.reserve(j.size());
    for (const auto& v : j) out.push_back(v.get<double>());
    return out;
}

inline std::vector<int32_t> as_token_vec(const nlohmann::json& j) {
    std::vector<int32_t> out;
    out.reserve(j.size());
    for (const auto& v : j) out.push_back(v.get<int32_t>());
    return out;
}

}  // namespace detail

// Dataset file: UTF-8 JSON-lines. First line is a header object
// {"name", "vocab", "feature_dim"}; later lines hold one pair object or one
// references object {"ref_image_id", "refs"} each.
inline Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open dataset file: " + path.string());
    Dataset ds;
    bool have_header = false;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw InputError("line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
        }
        try {
            if (!have_header) {
                if (!j.contains("name") || !j.contains("vocab") || !j.contains("feature_dim"))
                    throw InputError("line " + std::to_string(line_no) +
                                     ": first line must be the dataset header "
                                     "{name, vocab, feature_dim}");
                ds.name = j.at("name").get<std::string>();
                ds.vocab = j.at("vocab").get<std::vector<std::string>>();
                ds.feature_dim = j.at("feature_dim").get<int64_t>();
                have_header = true;
            } else if (j.contains("pair_id")) {
                CaptionPair p;
                p.pair_id = j.at("pair_id").get<int64_t>();
                p.image_id = j.at("image_id").get<int64_t>();
                p.features = detail::as_double_vec(j.at("features"));
                p.tokens = detail::as_token_vec(j.at("tokens"));
                if (j.contains("vis_embed")) p.vis_embed = detail::as_double_vec(j.at("vis_embed"));
                if (j.contains("txt_embed")) p.txt_embed = detail::as_double_vec(j.at("txt_embed"));
                if (j.contains("joint_repr"))
                    p.joint_repr = detail::as_double_vec(j.at("joint_repr"));
                if (j.contains("det_probs"))
                    for (const auto& row : j.at("det_probs"))
                        p.det_probs.push_back(detail::as_double_vec(row));
                if (j.contains("lm_logprobs"))
                    p.lm_logprobs = detail::as_double_vec(j.at("lm_logprobs"));
                ds.pairs.push_back(std::move(p));
            } else if (j.contains("ref_image_id")) {
                const int64_t image_id = j.at("ref_image_id").get<int64_t>();
                auto& refs = ds.references[image_id];
                for (const auto& ref : j.at("refs")) refs.push_back(detail::as_token_vec(ref));
            } else {
                throw InputError("line " + std::to_string(line_no) +
                                 ": unrecognized record (expected a pair or references object)");
            }
        } catch (const nlohmann::json::exception& e) {
            throw InputError("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (!have_header) throw InputError("dataset file has no header line: " + path.string());
    validate_dataset(ds);
    return ds;
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw InputError("cannot open dataset file for writing: " + path.string());
    nlohmann::json header{{"name", ds.name}, {"vocab", ds.vocab}, {"feature_dim", ds.feature_dim}};
    out << header.dump() << "\n";
    for (const auto& p : ds.pairs) {
        nlohmann::json j{{"pair_id", p.pair_id},
                         {"image_id", p.image_id},
                         {"features", p.features},
                         {"tokens", p.tokens}};
        if (p.has_vis_embed()) j["vis_embed"] = p.vis_embed;
        if (p.has_txt_embed()) j["txt_embed"] = p.txt_embed;
        if (p.has_joint_repr()) j["joint_repr"] = p.joint_repr;
        if (p.has_det_probs()) j["det_probs"] = p.det_probs;
        if (p.has_lm_logprobs()) j["lm_logprobs"] = p.lm_logprobs;
        out << j.dump() << "\n";
    }
    for (const auto& [image_id, refs] : ds.references) {
        nlohmann::json j{{"ref_image_id", image_id}, {"refs", refs}};
        out << j.dump() << "\n";
    }
    if (!out) throw InputError("failed writing dataset file: " + path.string());
}

// Head file: 1 x (D+1) raw matrix holding [w_0 ... w_{D-1}, b].
inline AffineHead load_head(const std::filesystem::path& path) {
    const Matrix m = load_matrix(path);
    if (m.rows != 1 || m.cols < 2)
        throw InputError("head file must be a 1x(D+1) matrix [w..., b]: " + path.string());
    AffineHead head;
    head.w.assign(m.values.begin(), m.values.end() - 1);
    head.b = m.values.back();
    return head;
}

inline void save_head(const std::filesystem::path& path, const AffineHead& head) {
    Matrix m(1, static_cast<uint32_t>(head.w.size() + 1));
    for (size_t i = 0; i < head.w.size(); ++i) m.values[i] = static_cast<float>(head.w[i]);
    m.values.back() = static_cast<float>(head.b);
    write_matrix(path, m);
}

// Synthetic dataset: a desk-scale corpus with a known difficulty proxy. Each
// pair draws a latent concept (feature centroid + gold caption); the per-pair
// noise probability ramps linearly through [noise_min, noise_max] over pair
// index, corrupts caption tokens, and pushes txt_embed away from vis_embed so
// cross-modal cosine decreases as the injected noise grows.
struct SynthConfig {
    size_t n_pairs = 0;
    int64_t feature_dim = 0;   // F
    int32_t vocab_size = 0;    // V
    double noise_min = 0.0;    // noise schedule endpoints
    double noise_max = 0.9;
    uint64_t seed = 0;
    // Fixture shape knobs.
    size_t n_concepts = 12;
    size_t caption_min = 4;
    size_t caption_max = 8;
    double feature_noise = 0.25;
    // Auxiliary tensors, emitted only when requested.
    size_t det_k = 0;          // >0 together with det_n emits det_probs
    size_t det_n = 0;
    bool with_lm_logprobs = false;
    size_t joint_dim = 0;      // >0 emits joint_repr
};

inline void validate_config(const SynthConfig& cfg) {
    if (cfg.n_pairs < 10) throw InputError("generate_synthetic: n_pairs must be >= 10");
    if (cfg.feature_dim < 2) throw InputError("generate_synthetic: feature_dim must be >= 2");
    if (cfg.vocab_size < 8) throw InputError("generate_synthetic: vocab_size must be >= 8");
    if (!(cfg.noise_min >= 0.0 && cfg.noise_max <= 1.0 && cfg.noise_min <= cfg.noise_max))
        throw InputError("generate_synthetic: need 0 <= noise_min <= noise_max <= 1");
    if (cfg.n_concepts < 1) throw InputError("generate_synthetic: n_concepts must be >= 1");
    if (cfg.caption_min < 1 || cfg.caption_min > cfg.caption_max)
        throw InputError("generate_synthetic: need 1 <= caption_min <= caption_max");
    if ((cfg.det_k == 0) != (cfg.det_n == 0))
        throw InputError("generate_synthetic: det_k and det_n must be set together");
    if (cfg.det_n == 1) throw InputError("generate_synthetic: det_n must be >= 2");
}

// Noise probability assigned to pair i; a pure function of the config.
inline double synthetic_noise_prob(const SynthConfig& cfg, size_t i) {
    if (cfg.n_pairs <= 1) return cfg.noise_min;
    const double t = static_cast<double>(i) / static_cast<double>(cfg.n_pairs - 1);
    return cfg.noise_min + (cfg.noise_max - cfg.noise_min) * t;
}

namespace detail {

inline void normalize_in_place(std::vector<double>& v) {
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
        std::fill(v.begin(), v.end(), 0.0);
        v[0] = 1.0;
        return;
    }
    for (double& x : v) x /= norm;
}

}  // namespace detail

inline Dataset generate_synthetic(const SynthConfig& cfg) {
    validate_config(cfg);
    Rng rng(seed_stream(cfg.seed, 0x5f4e7421));

    Dataset ds;
    ds.name = "synthetic-s" + std::to_string(cfg.seed);
    ds.feature_dim = cfg.feature_dim;
    ds.vocab = {"<bos>", "<eos>", "<unk>"};
    for (int32_t v = 3; v < cfg.vocab_size; ++v) ds.vocab.push_back("w" + std::to_string(v));

    const int32_t content_lo = 3;
    const int32_t content_n = cfg.vocab_size - content_lo;

    struct Concept {
        std::vector<double> centroid;
        std::vector<int32_t> caption;  // content tokens, no EOS
    };
    std::vector<Concept> concepts(cfg.n_concepts);
    for (auto& c : concepts) {
        c.centroid.resize(cfg.feature_dim);
        for (double& x : c.centroid) x = rng.gaussian();
        const size_t len = cfg.caption_min + rng.below(cfg.caption_max - cfg.caption_min + 1);
        c.caption.resize(len);
        for (auto& t : c.caption) t = content_lo + static_cast<int32_t>(rng.below(content_n));
    }

    ds.pairs.reserve(cfg.n_pairs);
    for (size_t i = 0; i < cfg.n_pairs; ++i) {
        const double noise_p = synthetic_noise_prob(cfg, i);
        const Concept& chosen = concepts[rng.below(cfg.n_concepts)];

        CaptionPair p;
        p.pair_id = static_cast<int64_t>(i);
        p.image_id = static_cast<int64_t>(i);
        p.features = chosen.centroid;
        for (double& x : p.features) x += cfg.feature_noise * rng.gaussian();

        std::vector<int32_t> caption = chosen.caption;
        for (auto& t : caption)
            if (rng.uniform() < noise_p) t = content_lo + static_cast<int32_t>(rng.below(content_n));
        p.tokens = caption;
        p.tokens.push_back(EOS_ID);
        ds.references[p.image_id] = {chosen.caption};

        p.vis_embed.resize(cfg.feature_dim);
        for (double& x : p.vis_embed) x = rng.gaussian();
        detail::normalize_in_place(p.vis_embed);
        p.txt_embed = p.vis_embed;
        for (double& x : p.txt_embed) x += noise_p * rng.gaussian();
        detail::normalize_in_place(p.txt_embed);

        if (cfg.det_k > 0) {
            // Flatter rows for noisier pairs, so detection entropy grows with
            // the difficulty proxy.
            const double temperature = 0.25 + 2.5 * noise_p;
            p.det_probs.assign(cfg.det_k, std::vector<double>(cfg.det_n));
            for (auto& row : p.det_probs) {
                double max_logit = -1e300;
                for (double& v : row) {
                    v = rng.gaussian() / temperature;
                    max_logit = std::max(max_logit, v);
                }
                double sum = 0.0;
                for (double& v : row) {
                    v = std::exp(v - max_logit);
                    sum += v;
                }
                for (double& v : row) v /= sum;
            }
        }
        if (cfg.with_lm_logprobs) {
            p.lm_logprobs.resize(p.tokens.size());
            for (double& v : p.lm_logprobs)
                v = -(0.05 + noise_p * (0.2 + std::abs(rng.gaussian())));
        }
        if (cfg.joint_dim > 0) {
            // First coordinate carries the relevance signal: an affine head
            // reading it recovers a noise-decreasing similarity.
            p.joint_repr.resize(cfg.joint_dim);
            p.joint_repr[0] = (1.0 - 2.0 * noise_p) + 0.1 * rng.gaussian();
            for (size_t d = 1; d < cfg.joint_dim; ++d) p.joint_repr[d] = rng.gaussian();
        }
        ds.pairs.push_back(std::move(p));
    }
    validate_dataset(ds);
    return ds;
}

// One representative pair per distinct image (the lowest pair_id wins), used
// wherever decoding happens per image rather than per pair.
inline std::map<int64_t, const CaptionPair*> distinct_images(const Dataset& ds,
                                                             std::span<const size_t> pair_indices) {
    std::map<int64_t, const CaptionPair*> images;
    for (size_t idx : pair_indices) {
        const CaptionPair& p = ds.pairs.at(idx);
        auto it = images.find(p.image_id);
        if (it == images.end() || p.pair_id < it->second->pair_id) images[p.image_id] = &p;
    }
    return images;
}

// Deterministic train/valid/test split over pair positions.
struct Split {
    std::vector<size_t> train;
    std::vector<size_t> valid;
    std::vector<size_t> test;
};

inline Split split_indices(size_t n, uint64_t seed, double train_frac = 0.8,
                           double valid_frac = 0.1) {
    if (!(train_frac >= 0.0 && valid_frac >= 0.0 && train_frac + valid_frac <= 1.0 + 1e-12))
        throw InputError("split fractions must be non-negative and sum to at most 1");
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(seed_stream(seed, 0x51c7));
    rng.shuffle(idx);
    const size_t n_train = static_cast<size_t>(std::llround(double(n) * train_frac));
    const size_t n_valid =
        std::min(n - n_train, static_cast<size_t>(std::llround(double(n) * valid_frac)));
    Split s;
    s.train.assign(idx.begin(), idx.begin() + n_train);
    s.valid.assign(idx.begin() + n_train, idx.begin() + n_train + n_valid);
    s.test.assign(idx.begin() + n_train + n_valid, idx.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.valid.begin(), s.valid.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

}  // namespace crk::data
