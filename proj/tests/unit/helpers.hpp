#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "crk/data.hpp"

namespace testutil {

// Scratch directory removed on scope exit.
struct TempDir {
    std::filesystem::path path;

    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path = std::filesystem::temp_directory_path() /
               ("crk-test-" + tag + "-" + std::to_string(::getpid()) + "-" +
                std::to_string(counter++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::filesystem::path file(const std::string& name) const { return path / name; }
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    out << text;
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Average ranks with ties, brute force.
inline std::vector<double> ranks(const std::vector<double>& values) {
    const size_t n = values.size();
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return values[a] < values[b]; });
    std::vector<double> out(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && values[idx[j + 1]] == values[idx[i]]) ++j;
        const double avg_rank = (double(i) + double(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) out[idx[k]] = avg_rank;
        i = j + 1;
    }
    return out;
}

// Spearman rank correlation via Pearson on brute-force ranks.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    const std::vector<double> rx = ranks(x);
    const std::vector<double> ry = ranks(y);
    const double n = double(x.size());
    double mx = 0, my = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double cov = 0, vx = 0, vy = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    return cov / std::sqrt(vx * vy);
}

// Small hand-rolled dataset: n pairs, one image each. The caption is a pure
// function of the (one-hot) features, so the mapping is memorizable, and it
// has four content tokens so an exact match carries 4-grams.
inline crk::data::Dataset tiny_dataset(size_t n_pairs, int32_t vocab_size, int64_t feature_dim) {
    crk::data::Dataset ds;
    ds.name = "tiny";
    ds.feature_dim = feature_dim;
    ds.vocab = {"<bos>", "<eos>", "<unk>"};
    for (int32_t v = 3; v < vocab_size; ++v) ds.vocab.push_back("w" + std::to_string(v));
    const int32_t content = vocab_size - 3;
    for (size_t i = 0; i < n_pairs; ++i) {
        crk::data::CaptionPair p;
        p.pair_id = int64_t(i);
        p.image_id = int64_t(i);
        const size_t group = i % size_t(feature_dim);
        p.features.assign(size_t(feature_dim), 0.0);
        p.features[group] = 1.0;
        const int32_t g = int32_t(group);
        const std::vector<int32_t> caption{3 + g % content, 3 + (g + 1) % content,
                                           3 + (g + 2) % content, 3 + g % content};
        p.tokens = caption;
        p.tokens.push_back(crk::data::EOS_ID);
        ds.references[p.image_id] = {caption};
        ds.pairs.push_back(std::move(p));
    }
    return ds;
}

}  // namespace testutil
