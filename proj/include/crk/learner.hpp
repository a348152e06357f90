#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crk/data.hpp"
#include "crk/errors.hpp"
#include "crk/matrix.hpp"
#include "crk/rng.hpp"

namespace crk::learner {

// Feature-conditioned mean-of-embeddings autoregressive softmax model.
//
// For a caption y_1..y_T (EOS-terminated) over image features f, step t sees
// the context c_t = (BOS, y_1, ..., y_{t-1}) and computes
//
//   h_t      = tanh(Wx f + mean_{j in c_t} Wy[j])
//   logits_t = Wo h_t + bo
//   p_t      = softmax(logits_t)
//
// and the caption NLL is -sum_t log p_t[y_t].
struct ToyModel {
    int32_t vocab_size = 0;  // V
    int64_t feature_dim = 0; // F
    int32_t embed_dim = 0;   // E
    std::vector<double> wy;  // V x E token embeddings
    std::vector<double> wx;  // E x F feature projection
    std::vector<double> wo;  // V x E output projection
    std::vector<double> bo;  // V output bias
};

struct LearnerConfig {
    double lr = 3e-4;
    int batch_size = 10;
    uint64_t seed = 0;
    int32_t embed_dim = 16;  // E
};

inline ToyModel init_model(int32_t vocab_size, int64_t feature_dim, const LearnerConfig& cfg) {
    if (vocab_size < 4) throw InputError("init_model: vocab_size must be >= 4");
    if (feature_dim < 1) throw InputError("init_model: feature_dim must be >= 1");
    if (cfg.embed_dim < 1) throw InputError("init_model: embed_dim must be >= 1");
    ToyModel m;
    m.vocab_size = vocab_size;
    m.feature_dim = feature_dim;
    m.embed_dim = cfg.embed_dim;
    m.wy.resize(size_t(vocab_size) * cfg.embed_dim);
    m.wx.resize(size_t(cfg.embed_dim) * feature_dim);
    m.wo.resize(size_t(vocab_size) * cfg.embed_dim);
    m.bo.resize(vocab_size);
    Rng rng(seed_stream(cfg.seed, 0x70b0));
    for (double& v : m.wy) v = 0.1 * rng.gaussian();
    for (double& v : m.wx) v = 0.1 * rng.gaussian();
    for (double& v : m.wo) v = 0.1 * rng.gaussian();
    for (double& v : m.bo) v = 0.1 * rng.gaussian();
    return m;
}

struct Gradients {
    std::vector<double> wy, wx, wo, bo;

    explicit Gradients(const ToyModel& m)
        : wy(m.wy.size(), 0.0), wx(m.wx.size(), 0.0), wo(m.wo.size(), 0.0), bo(m.bo.size(), 0.0) {}
};

namespace detail {

// Scratch buffers reused across forward/backward passes to keep the training
// loop allocation-free.
struct Workspace {
    std::vector<double> proj;       // E: Wx f
    std::vector<double> embed_sum;  // E: running sum of context embeddings
    std::vector<double> hs;         // T x E
    std::vector<double> probs;      // T x V
};

constexpr double PROB_FLOOR = 1e-12;

inline void check_pair(const ToyModel& m, const data::CaptionPair& pair) {
    if (static_cast<int64_t>(pair.features.size()) != m.feature_dim)
        throw InputError("pair " + std::to_string(pair.pair_id) + ": feature dimension " +
                         std::to_string(pair.features.size()) + " does not match model (" +
                         std::to_string(m.feature_dim) + ")");
    if (pair.tokens.empty())
        throw InputError("pair " + std::to_string(pair.pair_id) + ": empty caption");
    for (int32_t t : pair.tokens)
        if (t < 0 || t >= m.vocab_size)
            throw InputError("pair " + std::to_string(pair.pair_id) + ": token id " +
                             std::to_string(t) + " >= vocab size " +
                             std::to_string(m.vocab_size));
    if (pair.tokens.back() != data::EOS_ID)
        throw InputError("pair " + std::to_string(pair.pair_id) + ": caption must end with EOS");
}

// Runs the forward recurrence; fills ws.hs and ws.probs (one row per step)
// and returns the caption NLL. Shared verbatim by scoring and training so the
// two agree bit for bit.
inline double forward(const ToyModel& m, const data::CaptionPair& pair, Workspace& ws) {
    const size_t E = m.embed_dim;
    const size_t V = m.vocab_size;
    const size_t F = m.feature_dim;
    const size_t T = pair.tokens.size();

    ws.proj.assign(E, 0.0);
    for (size_t e = 0; e < E; ++e) {
        const double* wxe = &m.wx[e * F];
        double acc = 0.0;
        for (size_t f = 0; f < F; ++f) acc += wxe[f] * pair.features[f];
        ws.proj[e] = acc;
    }
    ws.embed_sum.assign(m.wy.begin() + size_t(data::BOS_ID) * E,
                        m.wy.begin() + size_t(data::BOS_ID) * E + E);
    ws.hs.resize(T * E);
    ws.probs.resize(T * V);

    double nll = 0.0;
    for (size_t t = 0; t < T; ++t) {
        double* h = &ws.hs[t * E];
        const double inv_count = 1.0 / static_cast<double>(t + 1);
        for (size_t e = 0; e < E; ++e) h[e] = std::tanh(ws.proj[e] + ws.embed_sum[e] * inv_count);

        double* p = &ws.probs[t * V];
        double max_logit = -1e300;
        for (size_t v = 0; v < V; ++v) {
            const double* wov = &m.wo[v * E];
            double acc = m.bo[v];
            for (size_t e = 0; e < E; ++e) acc += wov[e] * h[e];
            p[v] = acc;
            max_logit = std::max(max_logit, acc);
        }
        double sum = 0.0;
        for (size_t v = 0; v < V; ++v) {
            p[v] = std::exp(p[v] - max_logit);
            sum += p[v];
        }
        const double inv_sum = 1.0 / sum;
        for (size_t v = 0; v < V; ++v) p[v] *= inv_sum;

        nll -= std::log(std::max(p[pair.tokens[t]], PROB_FLOOR));

        if (t + 1 < T) {
            const double* wyt = &m.wy[size_t(pair.tokens[t]) * E];
            for (size_t e = 0; e < E; ++e) ws.embed_sum[e] += wyt[e];
        }
    }
    return nll;
}

// Backward pass for one pair; accumulates (unscaled) parameter gradients.
inline void backward(const ToyModel& m, const data::CaptionPair& pair, const Workspace& ws,
                     Gradients& g) {
    const size_t E = m.embed_dim;
    const size_t V = m.vocab_size;
    const size_t F = m.feature_dim;
    const size_t T = pair.tokens.size();

    std::vector<double> dh(E);
    for (size_t t = 0; t < T; ++t) {
        const double* h = &ws.hs[t * E];
        const double* p = &ws.probs[t * V];
        std::fill(dh.begin(), dh.end(), 0.0);
        for (size_t v = 0; v < V; ++v) {
            const double dlogit = p[v] - (pair.tokens[t] == static_cast<int32_t>(v) ? 1.0 : 0.0);
            g.bo[v] += dlogit;
            double* gwo = &g.wo[v * E];
            const double* wov = &m.wo[v * E];
            for (size_t e = 0; e < E; ++e) {
                gwo[e] += dlogit * h[e];
                dh[e] += dlogit * wov[e];
            }
        }
        const double inv_count = 1.0 / static_cast<double>(t + 1);
        for (size_t e = 0; e < E; ++e) {
            const double da = dh[e] * (1.0 - h[e] * h[e]);
            dh[e] = da;  // reuse as d(pre-activation)
            double* gwx = &g.wx[e * F];
            for (size_t f = 0; f < F; ++f) gwx[f] += da * pair.features[f];
        }
        // Context embedding mean: BOS plus the first t caption tokens.
        double* gbos = &g.wy[size_t(data::BOS_ID) * E];
        for (size_t e = 0; e < E; ++e) gbos[e] += dh[e] * inv_count;
        for (size_t j = 0; j < t; ++j) {
            double* gwy = &g.wy[size_t(pair.tokens[j]) * E];
            for (size_t e = 0; e < E; ++e) gwy[e] += dh[e] * inv_count;
        }
    }
}

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace detail

// Total (not length-normalized) autoregressive NLL of the caption.
inline double caption_nll(const ToyModel& m, const data::CaptionPair& pair) {
    detail::check_pair(m, pair);
    detail::Workspace ws;
    return detail::forward(m, pair, ws);
}

// Exact gradient of the mean caption NLL over the batch, accumulated in batch
// index order.
inline Gradients grad(const ToyModel& m, std::span<const data::CaptionPair* const> batch) {
    if (batch.empty()) throw InputError("grad: empty batch");
    Gradients g(m);
    detail::Workspace ws;
    for (const data::CaptionPair* pair : batch) {
        detail::check_pair(m, *pair);
        const double nll = detail::forward(m, *pair, ws);
        if (!std::isfinite(nll))
            throw std::runtime_error("grad: non-finite loss for pair " +
                                     std::to_string(pair->pair_id));
        detail::backward(m, *pair, ws, g);
    }
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    for (double& v : g.wy) v *= inv_n;
    for (double& v : g.wx) v *= inv_n;
    for (double& v : g.wo) v *= inv_n;
    for (double& v : g.bo) v *= inv_n;
    if (!detail::all_finite(g.wy)) throw std::runtime_error("grad: non-finite gradient in block wy");
    if (!detail::all_finite(g.wx)) throw std::runtime_error("grad: non-finite gradient in block wx");
    if (!detail::all_finite(g.wo)) throw std::runtime_error("grad: non-finite gradient in block wo");
    if (!detail::all_finite(g.bo)) throw std::runtime_error("grad: non-finite gradient in block bo");
    return g;
}

// One pass of plain SGD over fixed-order mini-batches. Returns the mean
// per-pair NLL at the time each batch was visited (pre-update values).
inline double train_epoch(ToyModel& m, const data::Dataset& ds, std::span<const size_t> order,
                          const LearnerConfig& cfg) {
    if (order.empty()) throw InputError("train_epoch: no training pairs");
    if (cfg.batch_size < 1) throw InputError("train_epoch: batch_size must be >= 1");
    if (!(cfg.lr >= 0.0)) throw InputError("train_epoch: learning rate must be non-negative");

    detail::Workspace ws;
    Gradients g(m);
    double total_nll = 0.0;
    size_t done = 0;
    while (done < order.size()) {
        const size_t batch_n = std::min<size_t>(cfg.batch_size, order.size() - done);
        std::fill(g.wy.begin(), g.wy.end(), 0.0);
        std::fill(g.wx.begin(), g.wx.end(), 0.0);
        std::fill(g.wo.begin(), g.wo.end(), 0.0);
        std::fill(g.bo.begin(), g.bo.end(), 0.0);
        for (size_t b = 0; b < batch_n; ++b) {
            const data::CaptionPair& pair = ds.pairs[order[done + b]];
            detail::check_pair(m, pair);
            const double nll = detail::forward(m, pair, ws);
            total_nll += nll;
            detail::backward(m, pair, ws, g);
        }
        const double step = cfg.lr / static_cast<double>(batch_n);
        for (size_t i = 0; i < m.wy.size(); ++i) m.wy[i] -= step * g.wy[i];
        for (size_t i = 0; i < m.wx.size(); ++i) m.wx[i] -= step * g.wx[i];
        for (size_t i = 0; i < m.wo.size(); ++i) m.wo[i] -= step * g.wo[i];
        for (size_t i = 0; i < m.bo.size(); ++i) m.bo[i] -= step * g.bo[i];
        done += batch_n;
    }
    return total_nll / static_cast<double>(order.size());
}

// Greedy argmax decoding; BOS is never emitted and ties pick the lowest id.
// The returned sequence includes the terminating EOS when one is produced.
inline std::vector<int32_t> greedy_decode(const ToyModel& m, std::span<const double> features,
                                          size_t max_len) {
    if (max_len < 1) throw InputError("greedy_decode: max_len must be >= 1");
    if (static_cast<int64_t>(features.size()) != m.feature_dim)
        throw InputError("greedy_decode: feature dimension mismatch");

    const size_t E = m.embed_dim;
    const size_t V = m.vocab_size;
    const size_t F = m.feature_dim;

    std::vector<double> proj(E, 0.0);
    for (size_t e = 0; e < E; ++e) {
        const double* wxe = &m.wx[e * F];
        double acc = 0.0;
        for (size_t f = 0; f < F; ++f) acc += wxe[f] * features[f];
        proj[e] = acc;
    }
    std::vector<double> embed_sum(m.wy.begin() + size_t(data::BOS_ID) * E,
                                  m.wy.begin() + size_t(data::BOS_ID) * E + E);
    std::vector<double> h(E);
    std::vector<int32_t> out;
    for (size_t step = 0; step < max_len; ++step) {
        const double inv_count = 1.0 / static_cast<double>(step + 1);
        for (size_t e = 0; e < E; ++e) h[e] = std::tanh(proj[e] + embed_sum[e] * inv_count);
        int32_t best = -1;
        double best_logit = 0.0;
        for (size_t v = 1; v < V; ++v) {  // skip BOS
            const double* wov = &m.wo[v * E];
            double acc = m.bo[v];
            for (size_t e = 0; e < E; ++e) acc += wov[e] * h[e];
            if (best < 0 || acc > best_logit) {
                best = static_cast<int32_t>(v);
                best_logit = acc;
            }
        }
        out.push_back(best);
        if (best == data::EOS_ID) break;
        const double* wyt = &m.wy[size_t(best) * E];
        for (size_t e = 0; e < E; ++e) embed_sum[e] += wyt[e];
    }
    return out;
}

// Checkpoint: one raw-matrix file per parameter block plus a JSON manifest.
struct Checkpoint {
    ToyModel model;
    std::vector<std::string> vocab;
    uint64_t seed = 0;
};

namespace detail {

inline Matrix to_matrix(const std::vector<double>& values, uint32_t rows, uint32_t cols) {
    Matrix m(rows, cols);
    for (size_t i = 0; i < values.size(); ++i) m.values[i] = static_cast<float>(values[i]);
    return m;
}

inline std::vector<double> from_matrix(const Matrix& m, uint32_t rows, uint32_t cols,
                                       const std::string& block) {
    if (m.rows != rows || m.cols != cols)
        throw InputError("checkpoint block " + block + " has shape " + std::to_string(m.rows) +
                         "x" + std::to_string(m.cols) + ", expected " + std::to_string(rows) +
                         "x" + std::to_string(cols));
    for (float v : m.values)
        if (!std::isfinite(v))
            throw InputError("checkpoint block " + block + " has a non-finite parameter");
    return std::vector<double>(m.values.begin(), m.values.end());
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& dir, const ToyModel& m,
                            const std::vector<std::string>& vocab, uint64_t seed) {
    if (static_cast<int32_t>(vocab.size()) != m.vocab_size)
        throw InputError("save_checkpoint: vocab size does not match model");
    std::filesystem::create_directories(dir);
    const uint32_t V = m.vocab_size;
    const uint32_t E = m.embed_dim;
    const uint32_t F = static_cast<uint32_t>(m.feature_dim);
    write_matrix(dir / "wy.mat", detail::to_matrix(m.wy, V, E));
    write_matrix(dir / "wx.mat", detail::to_matrix(m.wx, E, F));
    write_matrix(dir / "wo.mat", detail::to_matrix(m.wo, V, E));
    write_matrix(dir / "bo.mat", detail::to_matrix(m.bo, 1, V));
    nlohmann::json manifest{
        {"V", m.vocab_size},
        {"F", m.feature_dim},
        {"E", m.embed_dim},
        {"seed", seed},
        {"vocab", vocab},
        {"blocks",
         {{"wy", "wy.mat"}, {"wx", "wx.mat"}, {"wo", "wo.mat"}, {"bo", "bo.mat"}}}};
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw InputError("cannot write checkpoint manifest in " + dir.string());
    out << manifest.dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw InputError("cannot open checkpoint manifest: " + (dir / "manifest.json").string());
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw InputError("malformed checkpoint manifest: " + std::string(e.what()));
    }
    Checkpoint ckpt;
    try {
        ckpt.model.vocab_size = manifest.at("V").get<int32_t>();
        ckpt.model.feature_dim = manifest.at("F").get<int64_t>();
        ckpt.model.embed_dim = manifest.at("E").get<int32_t>();
        ckpt.seed = manifest.at("seed").get<uint64_t>();
        ckpt.vocab = manifest.at("vocab").get<std::vector<std::string>>();
        const auto& blocks = manifest.at("blocks");
        const uint32_t V = ckpt.model.vocab_size;
        const uint32_t E = ckpt.model.embed_dim;
        const uint32_t F = static_cast<uint32_t>(ckpt.model.feature_dim);
        ckpt.model.wy = detail::from_matrix(
            load_matrix(dir / blocks.at("wy").get<std::string>()), V, E, "wy");
        ckpt.model.wx = detail::from_matrix(
            load_matrix(dir / blocks.at("wx").get<std::string>()), E, F, "wx");
        ckpt.model.wo = detail::from_matrix(
            load_matrix(dir / blocks.at("wo").get<std::string>()), V, E, "wo");
        ckpt.model.bo = detail::from_matrix(
            load_matrix(dir / blocks.at("bo").get<std::string>()), 1, V, "bo");
    } catch (const nlohmann::json::exception& e) {
        throw InputError("checkpoint manifest missing field: " + std::string(e.what()));
    }
    if (static_cast<int32_t>(ckpt.vocab.size()) != ckpt.model.vocab_size)
        throw InputError("checkpoint vocab size does not match V");
    return ckpt;
}

}  // namespace crk::learner
