#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "crk/learner.hpp"
#include "crk/rng.hpp"
#include "helpers.hpp"

using namespace crk;

namespace {

// Central finite differences over every parameter coordinate; the oracle for
// the analytic gradient.
learner::Gradients fd_grad(learner::ToyModel m, const data::CaptionPair& pair, double eps) {
    learner::Gradients g(m);
    auto probe = [&](std::vector<double>& block, std::vector<double>& out) {
        for (size_t i = 0; i < block.size(); ++i) {
            const double saved = block[i];
            block[i] = saved + eps;
            const double up = learner::caption_nll(m, pair);
            block[i] = saved - eps;
            const double down = learner::caption_nll(m, pair);
            block[i] = saved;
            out[i] = (up - down) / (2.0 * eps);
        }
    };
    probe(m.wy, g.wy);
    probe(m.wx, g.wx);
    probe(m.wo, g.wo);
    probe(m.bo, g.bo);
    return g;
}

double max_rel_error(const std::vector<double>& a, const std::vector<double>& b) {
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(a[i]), std::abs(b[i]), 1e-4});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

data::CaptionPair random_pair(Rng& rng, int32_t vocab_size, int64_t feature_dim) {
    data::CaptionPair p;
    p.pair_id = int64_t(rng.below(1000));
    p.image_id = p.pair_id;
    p.features.resize(size_t(feature_dim));
    for (auto& f : p.features) f = rng.gaussian();
    const size_t len = 1 + rng.below(5);
    for (size_t t = 0; t < len; ++t)
        p.tokens.push_back(2 + int32_t(rng.below(uint64_t(vocab_size - 2))));
    p.tokens.push_back(data::EOS_ID);
    return p;
}

}  // namespace

TEST_CASE("init_model is deterministic per seed with exact shapes") {
    learner::LearnerConfig cfg;
    cfg.seed = 42;
    cfg.embed_dim = 8;
    const learner::ToyModel a = learner::init_model(20, 6, cfg);
    const learner::ToyModel b = learner::init_model(20, 6, cfg);
    REQUIRE(a.wy == b.wy);
    REQUIRE(a.wx == b.wx);
    REQUIRE(a.wo == b.wo);
    REQUIRE(a.bo == b.bo);
    REQUIRE(a.wy.size() == 20 * 8);
    REQUIRE(a.wx.size() == 8 * 6);
    REQUIRE(a.wo.size() == 20 * 8);
    REQUIRE(a.bo.size() == 20);

    cfg.seed = 43;
    const learner::ToyModel c = learner::init_model(20, 6, cfg);
    REQUIRE_FALSE(a.wy == c.wy);
}

TEST_CASE("caption_nll of the all-zero model is T ln V") {
    learner::LearnerConfig cfg;
    cfg.embed_dim = 4;
    learner::ToyModel m = learner::init_model(9, 3, cfg);
    std::fill(m.wy.begin(), m.wy.end(), 0.0);
    std::fill(m.wx.begin(), m.wx.end(), 0.0);
    std::fill(m.wo.begin(), m.wo.end(), 0.0);
    std::fill(m.bo.begin(), m.bo.end(), 0.0);
    data::CaptionPair p;
    p.features = {1.0, -1.0, 0.5};
    p.tokens = {3, 4, 5, data::EOS_ID};
    REQUIRE(learner::caption_nll(m, p) == Catch::Approx(4.0 * std::log(9.0)).margin(1e-12));
}

TEST_CASE("caption_nll validates tokens") {
    learner::LearnerConfig cfg;
    learner::ToyModel m = learner::init_model(6, 2, cfg);
    data::CaptionPair p;
    p.features = {0.0, 0.0};
    p.tokens = {9, data::EOS_ID};
    REQUIRE_THROWS_AS(learner::caption_nll(m, p), InputError);
    p.tokens = {3, 4};  // no EOS
    REQUIRE_THROWS_AS(learner::caption_nll(m, p), InputError);
    p.tokens = {3, data::EOS_ID};
    p.features = {0.0};
    REQUIRE_THROWS_AS(learner::caption_nll(m, p), InputError);
}

TEST_CASE("analytic gradient matches finite differences on a downsized model") {
    Rng rng(100);
    learner::LearnerConfig cfg;
    cfg.embed_dim = 4;
    cfg.seed = 5;
    const learner::ToyModel m = learner::init_model(5, 5, cfg);
    const data::CaptionPair p = random_pair(rng, 5, 5);
    const data::CaptionPair* batch[] = {&p};
    const learner::Gradients g = learner::grad(m, batch);
    const learner::Gradients fd = fd_grad(m, p, 1e-4);
    REQUIRE(max_rel_error(g.wy, fd.wy) < 1e-4);
    REQUIRE(max_rel_error(g.wx, fd.wx) < 1e-4);
    REQUIRE(max_rel_error(g.wo, fd.wo) < 1e-4);
    REQUIRE(max_rel_error(g.bo, fd.bo) < 1e-4);
}

TEST_CASE("duplicating a pair doubles its contribution before the mean") {
    Rng rng(7);
    learner::LearnerConfig cfg;
    cfg.embed_dim = 4;
    const learner::ToyModel m = learner::init_model(8, 3, cfg);
    const data::CaptionPair p = random_pair(rng, 8, 3);
    const data::CaptionPair* single[] = {&p};
    const data::CaptionPair* doubled[] = {&p, &p};
    const learner::Gradients g1 = learner::grad(m, single);
    const learner::Gradients g2 = learner::grad(m, doubled);
    for (size_t i = 0; i < g1.wy.size(); ++i)
        REQUIRE(g2.wy[i] == Catch::Approx(g1.wy[i]).margin(1e-15));
    for (size_t i = 0; i < g1.bo.size(); ++i)
        REQUIRE(g2.bo[i] == Catch::Approx(g1.bo[i]).margin(1e-15));
}

TEST_CASE("bias gradients of unused tokens coincide under the zero model") {
    learner::LearnerConfig cfg;
    cfg.embed_dim = 4;
    learner::ToyModel m = learner::init_model(10, 2, cfg);
    std::fill(m.wy.begin(), m.wy.end(), 0.0);
    std::fill(m.wx.begin(), m.wx.end(), 0.0);
    std::fill(m.wo.begin(), m.wo.end(), 0.0);
    std::fill(m.bo.begin(), m.bo.end(), 0.0);
    data::CaptionPair p;
    p.features = {0.4, -0.4};
    p.tokens = {3, data::EOS_ID};
    const data::CaptionPair* batch[] = {&p};
    const learner::Gradients g = learner::grad(m, batch);
    // tokens 4..9 never appear: identical softmax pull at every step
    for (int v = 5; v < 10; ++v) REQUIRE(g.bo[v] == g.bo[4]);
}

TEST_CASE("train_epoch with lr 0 leaves parameters and reports the evaluation loss") {
    const data::Dataset ds = testutil::tiny_dataset(20, 12, 4);
    learner::LearnerConfig cfg;
    cfg.lr = 0.0;
    cfg.embed_dim = 6;
    learner::ToyModel m = learner::init_model(ds.vocab_size(), ds.feature_dim, cfg);
    const learner::ToyModel before = m;
    std::vector<size_t> order(ds.pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    const double mean_loss = learner::train_epoch(m, ds, order, cfg);
    REQUIRE(m.wy == before.wy);
    REQUIRE(m.wo == before.wo);
    double expected = 0.0;
    for (const auto& p : ds.pairs) expected += learner::caption_nll(before, p);
    REQUIRE(mean_loss == Catch::Approx(expected / double(ds.pairs.size())).margin(1e-12));
}

TEST_CASE("loss strictly decreases over the first epochs at lr 3e-4") {
    const data::Dataset ds = testutil::tiny_dataset(50, 12, 4);
    learner::LearnerConfig cfg;  // lr defaults to 3e-4
    learner::ToyModel m = learner::init_model(ds.vocab_size(), ds.feature_dim, cfg);
    std::vector<size_t> order(ds.pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    double prev = 1e300;
    for (int epoch = 0; epoch < 5; ++epoch) {
        const double loss = learner::train_epoch(m, ds, order, cfg);
        REQUIRE(loss < prev);
        prev = loss;
    }
}

TEST_CASE("training replays deterministically") {
    const data::Dataset ds = testutil::tiny_dataset(30, 10, 3);
    learner::LearnerConfig cfg;
    cfg.lr = 0.05;
    std::vector<size_t> order(ds.pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    learner::ToyModel a = learner::init_model(ds.vocab_size(), ds.feature_dim, cfg);
    learner::ToyModel b = learner::init_model(ds.vocab_size(), ds.feature_dim, cfg);
    for (int epoch = 0; epoch < 3; ++epoch) {
        learner::train_epoch(a, ds, order, cfg);
        learner::train_epoch(b, ds, order, cfg);
    }
    REQUIRE(a.wy == b.wy);
    REQUIRE(a.wx == b.wx);
    REQUIRE(a.wo == b.wo);
    REQUIRE(a.bo == b.bo);
}

TEST_CASE("a memorizable fixture trains below 0.5 NLL within 200 epochs") {
    const data::Dataset ds = testutil::tiny_dataset(20, 12, 4);
    learner::LearnerConfig cfg;
    cfg.lr = 0.3;
    cfg.embed_dim = 8;
    learner::ToyModel m = learner::init_model(ds.vocab_size(), ds.feature_dim, cfg);
    std::vector<size_t> order(ds.pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    double loss = 1e300;
    for (int epoch = 0; epoch < 200 && loss >= 0.5; ++epoch)
        loss = learner::train_epoch(m, ds, order, cfg);
    REQUIRE(loss < 0.5);
}

TEST_CASE("greedy decode basics") {
    learner::LearnerConfig cfg;
    cfg.embed_dim = 4;
    learner::ToyModel m = learner::init_model(8, 2, cfg);
    m.bo.assign(8, -50.0);
    m.bo[data::EOS_ID] = 50.0;
    const std::vector<double> features{0.1, 0.2};

    // forced EOS at step 1: the caption is empty (EOS only)
    REQUIRE(learner::greedy_decode(m, features, 10) == std::vector<int32_t>{data::EOS_ID});

    // never emits BOS, respects max_len, and is a pure function
    Rng rng(8);
    for (int round = 0; round < 20; ++round) {
        learner::LearnerConfig rcfg;
        rcfg.seed = uint64_t(round);
        rcfg.embed_dim = 4;
        const learner::ToyModel rm = learner::init_model(8, 2, rcfg);
        std::vector<double> f{rng.gaussian(), rng.gaussian()};
        const auto tokens = learner::greedy_decode(rm, f, 7);
        REQUIRE(tokens.size() <= 7);
        for (int32_t t : tokens) REQUIRE(t != data::BOS_ID);
        REQUIRE(learner::greedy_decode(rm, f, 7) == tokens);
    }
}

TEST_CASE("caption_nll is never negative") {
    Rng rng(19);
    for (int round = 0; round < 30; ++round) {
        learner::LearnerConfig cfg;
        cfg.seed = uint64_t(round);
        cfg.embed_dim = 4;
        const learner::ToyModel m = learner::init_model(9, 3, cfg);
        const data::CaptionPair p = random_pair(rng, 9, 3);
        REQUIRE(learner::caption_nll(m, p) >= 0.0);
    }
}

TEST_CASE("checkpoints restore the model to float precision") {
    testutil::TempDir dir("ckpt");
    learner::LearnerConfig cfg;
    cfg.seed = 77;
    cfg.embed_dim = 5;
    const learner::ToyModel m = learner::init_model(10, 4, cfg);
    const std::vector<std::string> vocab = testutil::tiny_dataset(10, 10, 4).vocab;
    learner::save_checkpoint(dir.file("ck"), m, vocab, 77);
    const learner::Checkpoint back = learner::load_checkpoint(dir.file("ck"));
    REQUIRE(back.model.vocab_size == 10);
    REQUIRE(back.model.feature_dim == 4);
    REQUIRE(back.model.embed_dim == 5);
    REQUIRE(back.seed == 77);
    REQUIRE(back.vocab == vocab);
    for (size_t i = 0; i < m.wy.size(); ++i)
        REQUIRE(back.model.wy[i] == double(float(m.wy[i])));
    // saving the reloaded model reproduces identical parameter files
    learner::save_checkpoint(dir.file("ck2"), back.model, vocab, 77);
    REQUIRE(testutil::read_text(dir.file("ck") / "wy.mat") ==
            testutil::read_text(dir.file("ck2") / "wy.mat"));
}
