#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dtem/tape.hpp"

namespace dtem::embed {

// Per-block affine stack mapping backbone features [N x d] to merge
// embeddings [N x d']. depth counts hidden layers; depth 0 is a single
// affine map. Inputs are always detached, so merge losses reach these
// parameters and never the backbone features.
struct EmbeddingParams {
    std::size_t d = 0, d_prime = 0, depth = 0, hidden = 0;
    std::uint64_t seed = 0;
    std::vector<DenseArray> weights;  // depth+1 matrices
    std::vector<DenseArray> biases;   // depth+1 vectors

    std::size_t parameter_count() const;
};

// Zero-mean uniform init scaled by 1/sqrt(fan-in); biases zero.
EmbeddingParams init(std::uint64_t seed, std::size_t d, std::size_t d_prime,
                     std::size_t depth = 0, std::size_t hidden = 0);

// Bound to a tape: trainable leaves for one forward/backward pass.
struct BoundEmbedding {
    std::vector<Var> weights;
    std::vector<Var> biases;
};
BoundEmbedding bind(Tape& tape, const EmbeddingParams& params, bool trainable);

// z = f(stop_gradient(x); phi). tanh between hidden layers.
Var embed(Tape& tape, Var x, const BoundEmbedding& b);

// Flat binary checkpoint (text header + 64-bit reals), shared with the toy
// model checkpoints.
void save(const EmbeddingParams& p, const std::string& path);
EmbeddingParams load(const std::string& path);

}  // namespace dtem::embed
