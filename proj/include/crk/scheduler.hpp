#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
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
#include "crk/rng.hpp"

namespace crk::sched {

// Baby Step curriculum: an easy-to-hard permutation of score positions cut
// into L near-equal contiguous buckets; `stage` counts the buckets currently
// merged into the training set.
struct Curriculum {
    std::vector<size_t> order;
    size_t num_buckets = 1;  // L
    std::vector<std::pair<size_t, size_t>> buckets;  // [begin, end) into order
    size_t stage = 1;
};

// Cuts [0, n) into L contiguous ranges whose sizes differ by at most one;
// the first n mod L ranges take the extra element.
inline std::vector<std::pair<size_t, size_t>> equal_buckets(size_t n, size_t num_buckets) {
    const size_t base = n / num_buckets;
    const size_t extra = n % num_buckets;
    std::vector<std::pair<size_t, size_t>> out;
    out.reserve(num_buckets);
    size_t begin = 0;
    for (size_t b = 0; b < num_buckets; ++b) {
        const size_t size = base + (b < extra ? 1 : 0);
        out.emplace_back(begin, begin + size);
        begin += size;
    }
    return out;
}

inline Curriculum curriculum_from_order(std::vector<size_t> order, size_t num_buckets) {
    const size_t n = order.size();
    if (num_buckets < 1 || num_buckets > n)
        throw InputError("bucket count " + std::to_string(num_buckets) +
                         " out of range for " + std::to_string(n) + " pairs");
    std::vector<char> seen(n, 0);
    for (size_t i : order) {
        if (i >= n || seen[i]) throw InputError("curriculum order is not a permutation");
        seen[i] = 1;
    }
    Curriculum c;
    c.order = std::move(order);
    c.num_buckets = num_buckets;
    c.buckets = equal_buckets(n, num_buckets);
    c.stage = 1;
    return c;
}

inline Curriculum build_curriculum(const std::vector<difficulty::DifficultyScore>& scores,
                                   size_t num_buckets) {
    return curriculum_from_order(difficulty::rank_by_difficulty(scores), num_buckets);
}

// Positions of the pairs in buckets 1..stage, in curriculum order. Buckets are
// contiguous, so this is always a prefix of `order`.
inline std::vector<size_t> active_set(const Curriculum& c) {
    if (c.stage < 1 || c.stage > c.num_buckets) throw InputError("curriculum stage out of range");
    const size_t end = c.buckets[c.stage - 1].second;
    return std::vector<size_t>(c.order.begin(), c.order.begin() + end);
}

// Convergence heuristic: signals once the validation metric has failed to
// improve by more than min_delta for `patience` consecutive observations,
// then resets the counter (the best value is retained).
struct PlateauDetector {
    static constexpr int INFINITE_PATIENCE = std::numeric_limits<int>::max();

    int patience;
    double min_delta;
    double best = -std::numeric_limits<double>::infinity();
    int epochs_since_best = 0;

    explicit PlateauDetector(int patience_, double min_delta_ = 0.0)
        : patience(patience_), min_delta(min_delta_) {
        if (patience < 1) throw InputError("patience must be >= 1");
        if (min_delta < 0.0) throw InputError("min_delta must be >= 0");
    }

    // Returns true when the plateau fires. Higher metric = better.
    bool observe(double metric) {
        if (!std::isfinite(metric)) throw InputError("plateau detector: non-finite metric");
        if (metric > best + min_delta) {
            best = metric;
            epochs_since_best = 0;
            return false;
        }
        if (patience == INFINITE_PATIENCE) return false;
        ++epochs_since_best;
        if (epochs_since_best >= patience) {
            epochs_since_best = 0;
            return true;
        }
        return false;
    }
};

struct EpochRecord {
    size_t epoch = 0;  // 1-based
    size_t stage = 0;
    size_t active_count = 0;
    double train_loss = 0.0;
    double valid_metric = 0.0;
};

struct TrainReport {
    std::vector<EpochRecord> records;
    std::vector<size_t> stage_advance_epochs;
    std::string termination_reason;  // "max_epochs" | "final_plateau"
    size_t best_epoch = 0;
    double best_metric = 0.0;
};

inline nlohmann::json to_json(const TrainReport& r) {
    nlohmann::json records = nlohmann::json::array();
    for (const auto& e : r.records)
        records.push_back({{"epoch", e.epoch},
                           {"stage", e.stage},
                           {"active_count", e.active_count},
                           {"train_loss", e.train_loss},
                           {"valid_metric", e.valid_metric}});
    return {{"records", records},
            {"stage_advance_epochs", r.stage_advance_epochs},
            {"termination_reason", r.termination_reason},
            {"best_epoch", r.best_epoch},
            {"best_metric", r.best_metric}};
}

enum class ValidationMetric { Cider, Bleu4 };

inline const char* metric_name(ValidationMetric m) {
    return m == ValidationMetric::Cider ? "cider" : "bleu4";
}

inline ValidationMetric parse_metric(const std::string& s) {
    if (s == "cider") return ValidationMetric::Cider;
    if (s == "bleu4") return ValidationMetric::Bleu4;
    throw InputError("unknown validation metric: " + s);
}

struct BabyStepConfig {
    size_t max_epochs = 120;
    int patience = 3;
    double min_delta = 0.0;
    uint64_t seed = 0;
    bool strict_termination = false;  // keep training to max_epochs after the last merge
    ValidationMetric metric = ValidationMetric::Cider;
    size_t decode_max_len = 20;
};

struct TrainResult {
    learner::ToyModel model;  // snapshot with the best validation metric
    TrainReport report;
};

namespace detail {

inline std::vector<int32_t> strip_trailing_eos(std::vector<int32_t> tokens) {
    if (!tokens.empty() && tokens.back() == data::EOS_ID) tokens.pop_back();
    return tokens;
}

inline double validation_score(const learner::ToyModel& model, const data::Dataset& ds,
                               const std::map<int64_t, const data::CaptionPair*>& images,
                               ValidationMetric metric, size_t decode_max_len) {
    metrics::Candidates cands;
    metrics::References refs;
    for (const auto& [image_id, pair] : images) {
        cands[image_id] =
            strip_trailing_eos(learner::greedy_decode(model, pair->features, decode_max_len));
        refs[image_id] = ds.references.at(image_id);
    }
    return metric == ValidationMetric::Cider ? metrics::cider(cands, refs)
                                             : metrics::bleu4(cands, refs);
}

}  // namespace detail

// The Baby Step loop. Each epoch reshuffles the active set with an
// epoch-seeded RNG, trains one epoch, scores the validation images, and feeds
// the plateau detector; a plateau merges the next bucket, or terminates the
// run once every bucket is active (unless strict termination keeps it going
// to max_epochs). Returns the snapshot with the best validation metric seen.
inline TrainResult run_babystep(const data::Dataset& ds, const Curriculum& curriculum,
                                std::span<const size_t> train_pairs,
                                std::span<const size_t> valid_pairs,
                                const learner::LearnerConfig& lcfg, const BabyStepConfig& cfg) {
    if (valid_pairs.empty()) throw InputError("run_babystep: empty validation set");
    if (train_pairs.empty()) throw InputError("run_babystep: empty training set");
    if (curriculum.order.size() != train_pairs.size())
        throw InputError("run_babystep: curriculum does not cover the training pairs");
    if (cfg.max_epochs < 1) throw InputError("run_babystep: max_epochs must be >= 1");

    const auto valid_images = data::distinct_images(ds, valid_pairs);

    Curriculum curr = curriculum;
    curr.stage = 1;
    learner::ToyModel model = learner::init_model(ds.vocab_size(), ds.feature_dim, lcfg);
    PlateauDetector detector(cfg.patience, cfg.min_delta);

    TrainResult result;
    result.report.termination_reason = "max_epochs";
    double best_metric = -std::numeric_limits<double>::infinity();

    for (size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::vector<size_t> active = active_set(curr);
        Rng rng(seed_stream(cfg.seed, epoch));
        rng.shuffle(active);
        for (size_t& pos : active) pos = train_pairs[pos];

        const double train_loss = learner::train_epoch(model, ds, active, lcfg);
        if (!std::isfinite(train_loss))
            throw std::runtime_error("run_babystep: non-finite training loss at epoch " +
                                     std::to_string(epoch));
        const double valid_metric = detail::validation_score(model, ds, valid_images, cfg.metric,
                                                             cfg.decode_max_len);

        result.report.records.push_back(
            {epoch, curr.stage, active.size(), train_loss, valid_metric});
        if (valid_metric > best_metric) {
            best_metric = valid_metric;
            result.model = model;
            result.report.best_epoch = epoch;
            result.report.best_metric = valid_metric;
        }

        if (detector.observe(valid_metric)) {
            if (curr.stage < curr.num_buckets) {
                ++curr.stage;
                result.report.stage_advance_epochs.push_back(epoch);
            } else if (!cfg.strict_termination) {
                result.report.termination_reason = "final_plateau";
                break;
            }
        }
    }
    return result;
}

}  // namespace crk::sched
