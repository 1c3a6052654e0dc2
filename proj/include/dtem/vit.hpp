#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dtem/embedding.hpp"
#include "dtem/merge.hpp"
#include "dtem/tape.hpp"

namespace dtem::vit {

enum class MergeMode { none, hard_keys, hard_decoupled, soft_decoupled };

std::string to_string(MergeMode m);
MergeMode merge_mode_from_string(const std::string& s);

struct ViTConfig {
    std::size_t image = 16, patch = 2, channels = 1;
    std::size_t d = 32, heads = 2, blocks = 4, mlp_ratio = 4, classes = 4;
    std::size_t r = 8;
    MergeMode mode = MergeMode::none;
    double tau = 0.1;
    double sim_scale = 0.1;
    std::size_t d_prime = 8;
    bool prop_attn = true;

    std::size_t grid() const { return image / patch; }
    std::size_t patches() const { return grid() * grid(); }
    std::size_t tokens() const { return patches() + 1; }  // + class token
    std::size_t patch_dim() const { return patch * patch * channels; }
    std::size_t head_dim() const { return d / heads; }
    void validate() const;
};

struct BlockParams {
    DenseArray ln1_g, ln1_b, ln2_g, ln2_b;
    std::vector<DenseArray> wq, wk, wv;  // per head [d x d/h]
    std::vector<DenseArray> bq, bk, bv;
    DenseArray wo, bo;        // [d x d], [d]
    DenseArray w1, b1, w2, b2;  // MLP
};

struct ViTParams {
    DenseArray patch_w, patch_b;  // [patch_dim x d], [d]
    DenseArray cls, pos;          // [1 x d], [N x d]
    std::vector<BlockParams> block;
    DenseArray lnf_g, lnf_b;
    DenseArray head_w, head_b;  // [d x classes], [classes]

    std::size_t parameter_count() const;
};

ViTParams init_params(std::uint64_t seed, const ViTConfig& cfg);

void save(const ViTParams& p, const ViTConfig& cfg, const std::string& path);
ViTParams load(const std::string& path, ViTConfig& cfg_out);

// One decoupled embedding per block.
using EmbeddingStack = std::vector<embed::EmbeddingParams>;
EmbeddingStack init_embeddings(std::uint64_t seed, const ViTConfig& cfg);

struct BoundBlock {
    Var ln1_g, ln1_b, ln2_g, ln2_b;
    std::vector<Var> wq, wk, wv, bq, bk, bv;
    Var wo, bo, w1, b1, w2, b2;
};
struct BoundViT {
    Var patch_w, patch_b, cls, pos;
    std::vector<BoundBlock> block;
    Var lnf_g, lnf_b, head_w, head_b;
    std::vector<Var> all() const;
};
BoundViT bind(Tape& tape, const ViTParams& p, bool trainable);

struct BoundEmbeddings {
    std::vector<embed::BoundEmbedding> block;
};
BoundEmbeddings bind(Tape& tape, const EmbeddingStack& e, bool trainable);

// Per-forward bookkeeping: token counts seen by attention, the hard matchings
// taken (as original-token-index pairs), and the final merge-group id of each
// original token (hard modes only).
struct ForwardTrace {
    std::vector<std::size_t> attn_tokens;
    std::vector<std::vector<std::pair<std::size_t, std::size_t>>> merges;
    std::vector<std::size_t> group_of_token;  // empty in soft/none modes with r=0
    std::size_t group_count = 0;
};

struct ForwardResult {
    Var logits;  // [1 x classes]
    ForwardTrace trace;
};

// image: [image x image] (single channel).
ForwardResult forward(Tape& tape, const ViTConfig& cfg, const BoundViT& params,
                      const BoundEmbeddings* embeddings, const DenseArray& image,
                      bool want_trace = false);

// Token counts under the uniform hard reduction schedule: attention at block
// l sees N - r(l-1) tokens, the MLP sees N - r*l.
struct CountTrace {
    std::vector<std::size_t> attn;
    std::vector<std::size_t> mlp;
};
CountTrace count_trace(const ViTConfig& cfg);

}  // namespace dtem::vit
