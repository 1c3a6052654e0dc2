#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "dtem/tape.hpp"

namespace dtem::merge {

// Batch of token feature vectors with per-token effective sizes and flags.
// Sizes start at 1 and are conserved by every merge operation. Excluded
// tokens sit out of relaxed merging; protected tokens (e.g. the class
// token) are never excluded and never merged away.
struct TokenState {
    Var features;                   // [N x d]
    Var sizes;                      // [N]
    std::vector<std::uint8_t> excluded;
    std::vector<std::uint8_t> protected_;

    std::size_t count() const { return excluded.size(); }
};

TokenState make_token_state(Tape& tape, DenseArray features,
                            std::vector<std::uint8_t> protected_tokens = {});

struct BipartitePartition {
    std::vector<std::size_t> index_a;
    std::vector<std::size_t> index_b;
};

struct SimilarityMatrix {
    Var values;       // [|A| x |B|]
    DenseArray mask;  // 1 = valid pair
};

struct SoftAdjacency {
    Var values;                         // [|A| x |B|], entries in [0,1]
    std::vector<DenseArray> per_step;   // A^t history, kept only when requested
};

struct HardMatching {
    std::vector<std::pair<std::size_t, std::size_t>> edges;  // (a-index, b-index)
};

// Alternating split over non-excluded tokens: even rank -> A, odd rank -> B;
// protected tokens always land in B.
BipartitePartition partition(const TokenState& state);

// Pairwise cosine similarity scaled by 1/pre_scale (default 0.1, i.e. x10).
SimilarityMatrix similarity(Tape& tape, Var emb_a, Var emb_b, double pre_scale = 0.1);

// BSM: per-row argmax candidates, then the r globally most similar of them.
// Ties break toward lower a-index, then lower b-index.
HardMatching hard_group(const DenseArray& values, const DenseArray& mask, std::size_t r);
inline HardMatching hard_group(Tape& tape, const SimilarityMatrix& s, std::size_t r) {
    return hard_group(tape.value(s.values), s.mask, r);
}

// Size-weighted pooling of each matched source into its destination; source
// tokens are removed (token count drops by |edges|). Differentiable w.r.t.
// features and sizes; the matching itself is fixed.
TokenState hard_merge(Tape& tape, const TokenState& state, const BipartitePartition& p,
                      const HardMatching& m);

// Iterated masked global softmax with log-space suppression, then row
// clipping through a stop-gradient denominator. Differentiable w.r.t. the
// similarity values except through that denominator.
SoftAdjacency soft_group(Tape& tape, const SimilarityMatrix& s, std::size_t r, double tau,
                         bool keep_steps = false);

// Continuous-weight feature/size update; keeps all N tokens.
TokenState soft_merge(Tape& tape, const TokenState& state, const BipartitePartition& p,
                      const SoftAdjacency& adj);

// Flags the r smallest-size non-protected, non-excluded tokens as excluded
// (ties toward lower index).
TokenState exclude_minimum(Tape& tape, const TokenState& state, std::size_t r);

// Pre-softmax attention bias log(m) per token, plus a key mask that removes
// zero-size and excluded tokens from attention entirely.
struct AttentionBias {
    Var log_sizes;       // [N]
    DenseArray key_mask; // [N], 1 = participates
};
AttentionBias proportional_bias(Tape& tape, const TokenState& state);

// Hard-merge, apply a token-count-preserving component, then copy each merged
// output back to all constituent slots. The caller adds the residual.
TokenState merge_unmerge(Tape& tape, const std::function<Var(Tape&, Var)>& component,
                         const TokenState& state, const BipartitePartition& p,
                         const HardMatching& m);

}  // namespace dtem::merge
