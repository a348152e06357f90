#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <set>

#include "crk/analysis.hpp"
#include "helpers.hpp"

using namespace crk;
using metrics::Candidates;
using metrics::References;
using metrics::TokenSeq;

namespace {

std::pair<Candidates, References> noisy_corpus(uint64_t seed, size_t n_images,
                                               double corruption) {
    Rng rng(seed);
    Candidates cands;
    References refs;
    for (size_t i = 0; i < n_images; ++i) {
        TokenSeq ref;
        const size_t len = 4 + rng.below(4);
        for (size_t t = 0; t < len; ++t) ref.push_back(int32_t(3 + rng.below(40)));
        TokenSeq cand = ref;
        for (auto& t : cand)
            if (rng.uniform() < corruption) t = int32_t(3 + rng.below(40));
        refs[int64_t(i)] = {ref};
        cands[int64_t(i)] = cand;
    }
    return {cands, refs};
}

}  // namespace

TEST_CASE("divide_by_difficulty splits evenly with sorted levels") {
    std::map<int64_t, double> bleu;
    for (int64_t i = 0; i < 8; ++i) bleu[i] = double(i) / 10.0;
    const auto levels = analysis::divide_by_difficulty(bleu, 4);
    REQUIRE(levels.size() == 4);
    for (const auto& level : levels) REQUIRE(level.size() == 2);

    // level 1 holds the highest-BLEU images; the chain is non-increasing
    std::set<int64_t> all;
    for (size_t k = 0; k + 1 < levels.size(); ++k) {
        double min_here = 1e300, max_next = -1e300;
        for (int64_t id : levels[k]) min_here = std::min(min_here, bleu[id]);
        for (int64_t id : levels[k + 1]) max_next = std::max(max_next, bleu[id]);
        REQUIRE(min_here >= max_next);
    }
    for (const auto& level : levels)
        for (int64_t id : level) REQUIRE(all.insert(id).second);
    REQUIRE(all.size() == 8);
}

TEST_CASE("divide_by_difficulty validates level count") {
    std::map<int64_t, double> bleu{{0, 0.5}, {1, 0.7}, {2, 0.1}};
    REQUIRE_THROWS_AS(analysis::divide_by_difficulty(bleu, 1), InputError);
    REQUIRE_THROWS_AS(analysis::divide_by_difficulty(bleu, 4), InputError);
}

TEST_CASE("divide_by_difficulty uses the curriculum remainder rule") {
    std::map<int64_t, double> bleu;
    for (int64_t i = 0; i < 11; ++i) bleu[i] = double(i);
    const auto levels = analysis::divide_by_difficulty(bleu, 4);
    REQUIRE(levels[0].size() == 3);
    REQUIRE(levels[1].size() == 3);
    REQUIRE(levels[2].size() == 3);
    REQUIRE(levels[3].size() == 2);
}

TEST_CASE("re_encode maps unknown strings to UNK and is idempotent") {
    const std::vector<std::string> from{"<bos>", "<eos>", "<unk>", "cat", "dog"};
    const std::vector<std::string> to{"<bos>", "<eos>", "<unk>", "dog"};
    const auto to_ids = analysis::vocab_index(to);
    const std::vector<int32_t> tokens{3, 4, 1};
    const auto once = analysis::re_encode(tokens, from, to_ids);
    REQUIRE(once == std::vector<int32_t>{data::UNK_ID, 3, 1});  // cat->UNK, dog->3
    REQUIRE(analysis::re_encode(once, to, to_ids) == once);
}

TEST_CASE("cross_dataset_eval on the training set equals in-domain evaluation") {
    data::SynthConfig cfg;
    cfg.n_pairs = 30;
    cfg.feature_dim = 4;
    cfg.vocab_size = 14;
    cfg.seed = 2;
    const data::Dataset ds = data::generate_synthetic(cfg);
    learner::LearnerConfig lcfg;
    lcfg.embed_dim = 6;
    const learner::ToyModel model = learner::init_model(ds.vocab_size(), ds.feature_dim, lcfg);

    std::vector<size_t> all(ds.pairs.size());
    for (size_t i = 0; i < all.size(); ++i) all[i] = i;

    const metrics::MetricReport cross =
        analysis::cross_dataset_eval(model, ds.vocab, ds, all, 12);

    // in-domain evaluation via the same decode path
    metrics::Candidates cands;
    metrics::References refs;
    for (const auto& [image_id, pair] : data::distinct_images(ds, all)) {
        cands[image_id] = sched::detail::strip_trailing_eos(
            learner::greedy_decode(model, pair->features, 12));
        refs[image_id] = ds.references.at(image_id);
    }
    const metrics::MetricReport direct = metrics::evaluate(cands, refs, true);
    REQUIRE(cross.bleu4 == direct.bleu4);
    REQUIRE(cross.cider == direct.cider);
    REQUIRE(cross.per_example.size() == cands.size());
}

TEST_CASE("cross_dataset_eval rejects mismatched feature dimensions") {
    data::SynthConfig cfg;
    cfg.n_pairs = 12;
    cfg.feature_dim = 4;
    cfg.vocab_size = 10;
    const data::Dataset ds = data::generate_synthetic(cfg);
    learner::LearnerConfig lcfg;
    const learner::ToyModel model = learner::init_model(ds.vocab_size(), 6, lcfg);
    std::vector<size_t> all(ds.pairs.size());
    for (size_t i = 0; i < all.size(); ++i) all[i] = i;
    REQUIRE_THROWS_WITH(analysis::cross_dataset_eval(model, ds.vocab, ds, all),
                        Catch::Matchers::ContainsSubstring("feature-dimension mismatch"));
}

TEST_CASE("paired bootstrap self-comparison calibrates to exactly one half") {
    auto [cands, refs] = noisy_corpus(4, 40, 0.3);
    analysis::BootstrapConfig cfg;
    cfg.n_resamples = 200;
    cfg.seed = 123;
    const auto result = analysis::paired_bootstrap_test(cands, cands, refs, cfg);
    REQUIRE(result.p_bleu4 == 0.5);
    REQUIRE(result.p_cider == 0.5);
    cfg.seed = 999;  // any seed
    const auto result2 = analysis::paired_bootstrap_test(cands, cands, refs, cfg);
    REQUIRE(result2.p_bleu4 == 0.5);
    REQUIRE(result2.p_cider == 0.5);
}

TEST_CASE("paired bootstrap is antisymmetric under the tie-halving convention") {
    auto [cands_a, refs] = noisy_corpus(5, 40, 0.2);
    auto [cands_b, refs_b] = noisy_corpus(6, 40, 0.4);
    analysis::BootstrapConfig cfg;
    cfg.n_resamples = 150;
    cfg.seed = 7;
    const auto ab = analysis::paired_bootstrap_test(cands_a, cands_b, refs, cfg);
    const auto ba = analysis::paired_bootstrap_test(cands_b, cands_a, refs, cfg);
    REQUIRE(ab.p_bleu4 + ba.p_bleu4 == 1.0);
    REQUIRE(ab.p_cider + ba.p_cider == 1.0);
}

TEST_CASE("dominance pins the p-value to zero") {
    Rng rng(11);
    Candidates winner, loser;
    References refs;
    for (int64_t i = 0; i < 30; ++i) {
        TokenSeq ref;
        for (int t = 0; t < 6; ++t) ref.push_back(int32_t(3 + rng.below(30)));
        refs[i] = {ref};
        winner[i] = ref;                      // verbatim reference
        loser[i] = {100, 101, 102, 103, 104};  // zero overlap
    }
    analysis::BootstrapConfig cfg;
    cfg.n_resamples = 300;
    cfg.seed = 3;
    const auto result = analysis::paired_bootstrap_test(winner, loser, refs, cfg);
    REQUIRE(result.p_bleu4 == 0.0);
    REQUIRE(result.p_cider == 0.0);
}

TEST_CASE("resample draws replay per (seed, replicate) and differ across replicates") {
    const std::vector<int64_t> ids{2, 3, 5, 7, 11, 13};
    const auto a = analysis::resample_image_ids(ids, 42, 0, 50);
    const auto b = analysis::resample_image_ids(ids, 42, 0, 50);
    REQUIRE(a == b);
    const auto c = analysis::resample_image_ids(ids, 42, 1, 50);
    REQUIRE_FALSE(a == c);
    const auto d = analysis::resample_image_ids(ids, 43, 0, 50);
    REQUIRE_FALSE(a == d);
    for (int64_t id : a) REQUIRE(std::count(ids.begin(), ids.end(), id) == 1);
}

TEST_CASE("the replicate fast path matches direct corpus metrics") {
    auto [cands_a, refs] = noisy_corpus(8, 25, 0.25);
    auto [cands_b, refs_b] = noisy_corpus(9, 25, 0.5);
    const auto pc = analysis::detail::build_paired_corpus(cands_a, cands_b, refs);

    for (uint64_t seed = 0; seed < 3; ++seed) {
        const size_t resample_size = 25;
        const auto drawn = analysis::resample_image_ids(pc.ids, seed, 0, resample_size);
        std::vector<uint32_t> multiplicity(pc.ids.size(), 0);
        for (int64_t id : drawn) {
            const auto it = std::lower_bound(pc.ids.begin(), pc.ids.end(), id);
            ++multiplicity[size_t(it - pc.ids.begin())];
        }
        const auto fast = analysis::detail::score_replicate(pc, multiplicity, resample_size);

        // materialize the multiset with fresh ids and score it directly
        Candidates da, db;
        References dr;
        int64_t next_id = 0;
        for (int64_t id : drawn) {
            da[next_id] = cands_a.at(id);
            db[next_id] = cands_b.at(id);
            dr[next_id] = refs.at(id);
            ++next_id;
        }
        REQUIRE(fast.bleu_a == Catch::Approx(metrics::bleu4(da, dr)).margin(1e-9));
        REQUIRE(fast.bleu_b == Catch::Approx(metrics::bleu4(db, dr)).margin(1e-9));
        REQUIRE(fast.cider_a == Catch::Approx(metrics::cider(da, dr)).margin(1e-9));
        REQUIRE(fast.cider_b == Catch::Approx(metrics::cider(db, dr)).margin(1e-9));
    }
}

TEST_CASE("bootstrap rejects mismatched id sets and bad config") {
    auto [cands, refs] = noisy_corpus(4, 10, 0.3);
    Candidates other = cands;
    other.erase(other.begin());
    analysis::BootstrapConfig cfg;
    REQUIRE_THROWS_WITH(analysis::paired_bootstrap_test(cands, other, refs, cfg),
                        Catch::Matchers::ContainsSubstring("image-id sets differ"));
    cfg.n_resamples = 0;
    REQUIRE_THROWS_AS(analysis::paired_bootstrap_test(cands, cands, refs, cfg), InputError);
}

TEST_CASE("threaded bootstrap matches the serial result") {
    auto [cands_a, refs] = noisy_corpus(14, 30, 0.2);
    auto [cands_b, refs_b] = noisy_corpus(15, 30, 0.45);
    analysis::BootstrapConfig serial;
    serial.n_resamples = 120;
    serial.seed = 5;
    analysis::BootstrapConfig threaded = serial;
    threaded.threads = 4;
    const auto a = analysis::paired_bootstrap_test(cands_a, cands_b, refs, serial);
    const auto b = analysis::paired_bootstrap_test(cands_a, cands_b, refs, threaded);
    REQUIRE(a.p_bleu4 == b.p_bleu4);
    REQUIRE(a.p_cider == b.p_cider);
}

TEST_CASE("compare_dispersion ranks the wider table first") {
    Rng rng(21);
    std::vector<double> uniform, compressed;
    for (int i = 0; i < 500; ++i) {
        uniform.push_back(rng.uniform());
        compressed.push_back(0.5 + 0.01 * rng.gaussian());
    }
    compressed[0] = 0.0;  // anchor the min-max range
    compressed[1] = 1.0;
    const auto ranked = analysis::compare_dispersion(
        {{"narrow", compressed}, {"wide", uniform}});
    REQUIRE(ranked.size() == 2);
    REQUIRE(ranked[0].method == "wide");
    REQUIRE(ranked[0].dispersion.stddev > ranked[1].dispersion.stddev);

    // histogram counts sum to n per method
    for (const auto& entry : ranked) {
        size_t total = 0;
        for (size_t c : entry.histogram) total += c;
        REQUIRE(total == 500);
    }
}

TEST_CASE("dispersion stddev matches a brute-force two-pass computation") {
    Rng rng(31);
    std::vector<double> scores;
    for (int i = 0; i < 400; ++i) scores.push_back(rng.uniform());
    const auto ranked = analysis::compare_dispersion({{"a", scores}, {"b", scores}});
    const std::vector<double> normalized = difficulty::normalize_scores(scores);
    double mean = 0.0;
    for (double v : normalized) mean += v;
    mean /= double(normalized.size());
    double var = 0.0;
    for (double v : normalized) var += (v - mean) * (v - mean);
    const double expected = std::sqrt(var / double(normalized.size()));
    REQUIRE(ranked[0].dispersion.stddev == Catch::Approx(expected).margin(1e-12));
}
