#include "dtem/embedding.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "dtem/checkpoint.hpp"

namespace dtem::embed {

std::size_t EmbeddingParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& w : weights) n += w.numel();
    for (const auto& b : biases) n += b.numel();
    return n;
}

EmbeddingParams init(std::uint64_t seed, std::size_t d, std::size_t d_prime, std::size_t depth,
                     std::size_t hidden) {
    if (d_prime < 1) throw std::invalid_argument("embedding init: d' must be >= 1");
    if (depth > 0 && hidden == 0) hidden = d_prime;
    EmbeddingParams p;
    p.d = d;
    p.d_prime = d_prime;
    p.depth = depth;
    p.hidden = depth > 0 ? hidden : 0;
    p.seed = seed;
    std::mt19937_64 rng(seed);
    std::size_t in = d;
    for (std::size_t l = 0; l <= depth; ++l) {
        std::size_t out = (l == depth) ? d_prime : hidden;
        double bound = 1.0 / std::sqrt(static_cast<double>(in));
        std::uniform_real_distribution<double> u(-bound, bound);
        DenseArray w({in, out});
        for (double& v : w.data) v = u(rng);
        p.weights.push_back(std::move(w));
        p.biases.push_back(DenseArray::zeros({out}));
        in = out;
    }
    return p;
}

BoundEmbedding bind(Tape& tape, const EmbeddingParams& params, bool trainable) {
    BoundEmbedding b;
    for (const auto& w : params.weights) b.weights.push_back(tape.leaf(w, trainable));
    for (const auto& bias : params.biases) b.biases.push_back(tape.leaf(bias, trainable));
    return b;
}

Var embed(Tape& tape, Var x, const BoundEmbedding& b) {
    Var h = tape.stop_gradient(x);
    for (std::size_t l = 0; l < b.weights.size(); ++l) {
        h = tape.add(tape.matmul(h, b.weights[l]), b.biases[l]);
        if (l + 1 < b.weights.size()) h = tape.tanh_(h);
    }
    return h;
}

void save(const EmbeddingParams& p, const std::string& path) {
    checkpoint::Checkpoint c;
    c.kind = "embedding";
    c.meta["d"] = static_cast<std::int64_t>(p.d);
    c.meta["d_prime"] = static_cast<std::int64_t>(p.d_prime);
    c.meta["depth"] = static_cast<std::int64_t>(p.depth);
    c.meta["hidden"] = static_cast<std::int64_t>(p.hidden);
    c.meta["seed"] = static_cast<std::int64_t>(p.seed);
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
        c.arrays.emplace_back("w" + std::to_string(l), p.weights[l]);
        c.arrays.emplace_back("b" + std::to_string(l), p.biases[l]);
    }
    checkpoint::save(c, path);
}

EmbeddingParams load(const std::string& path) {
    checkpoint::Checkpoint c = checkpoint::load(path);
    if (c.kind != "embedding") throw std::runtime_error("not an embedding checkpoint: " + path);
    EmbeddingParams p;
    p.d = static_cast<std::size_t>(c.meta_at("d"));
    p.d_prime = static_cast<std::size_t>(c.meta_at("d_prime"));
    p.depth = static_cast<std::size_t>(c.meta_at("depth"));
    p.hidden = static_cast<std::size_t>(c.meta_at("hidden"));
    p.seed = static_cast<std::uint64_t>(c.meta_at("seed"));
    for (std::size_t l = 0; l <= p.depth; ++l) {
        p.weights.push_back(c.array("w" + std::to_string(l)));
        p.biases.push_back(c.array("b" + std::to_string(l)));
    }
    return p;
}

}  // namespace dtem::embed
