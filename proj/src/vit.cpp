#include "dtem/vit.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "dtem/checkpoint.hpp"

namespace dtem::vit {

std::string to_string(MergeMode m) {
    switch (m) {
        case MergeMode::none: return "none";
        case MergeMode::hard_keys: return "hard-keys";
        case MergeMode::hard_decoupled: return "hard-decoupled";
        case MergeMode::soft_decoupled: return "soft-decoupled";
    }
    return "none";
}

MergeMode merge_mode_from_string(const std::string& s) {
    if (s == "none") return MergeMode::none;
    if (s == "hard-keys") return MergeMode::hard_keys;
    if (s == "hard-decoupled") return MergeMode::hard_decoupled;
    if (s == "soft-decoupled") return MergeMode::soft_decoupled;
    throw std::invalid_argument("unknown merge mode: " + s);
}

void ViTConfig::validate() const {
    if (d % heads != 0) throw std::invalid_argument("ViTConfig: d must be divisible by heads");
    if (image % patch != 0) throw std::invalid_argument("ViTConfig: image not divisible by patch");
    if (mode != MergeMode::none && r * blocks >= tokens())
        throw std::invalid_argument("ViTConfig: r*blocks must leave at least one token");
}

std::size_t ViTParams::parameter_count() const {
    std::size_t n = patch_w.numel() + patch_b.numel() + cls.numel() + pos.numel() +
                    lnf_g.numel() + lnf_b.numel() + head_w.numel() + head_b.numel();
    for (const auto& b : block) {
        n += b.ln1_g.numel() + b.ln1_b.numel() + b.ln2_g.numel() + b.ln2_b.numel();
        for (const auto& w : b.wq) n += w.numel();
        for (const auto& w : b.wk) n += w.numel();
        for (const auto& w : b.wv) n += w.numel();
        for (const auto& w : b.bq) n += w.numel();
        for (const auto& w : b.bk) n += w.numel();
        for (const auto& w : b.bv) n += w.numel();
        n += b.wo.numel() + b.bo.numel() + b.w1.numel() + b.b1.numel() + b.w2.numel() +
             b.b2.numel();
    }
    return n;
}

namespace {

DenseArray uniform_init(std::mt19937_64& rng, std::vector<std::size_t> shape, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    DenseArray a(std::move(shape));
    for (double& v : a.data) v = u(rng);
    return a;
}

}  // namespace

ViTParams init_params(std::uint64_t seed, const ViTConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = cfg.d, dh = cfg.head_dim(), hid = cfg.mlp_ratio * d;
    ViTParams p;
    p.patch_w = uniform_init(rng, {cfg.patch_dim(), d}, 1.0 / std::sqrt((double)cfg.patch_dim()));
    p.patch_b = DenseArray::zeros({d});
    p.cls = uniform_init(rng, {1, d}, 0.02);
    p.pos = uniform_init(rng, {cfg.tokens(), d}, 0.02);
    const double wd = 1.0 / std::sqrt((double)d);
    for (std::size_t l = 0; l < cfg.blocks; ++l) {
        BlockParams b;
        b.ln1_g = DenseArray::ones({d});
        b.ln1_b = DenseArray::zeros({d});
        b.ln2_g = DenseArray::ones({d});
        b.ln2_b = DenseArray::zeros({d});
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            b.wq.push_back(uniform_init(rng, {d, dh}, wd));
            b.wk.push_back(uniform_init(rng, {d, dh}, wd));
            b.wv.push_back(uniform_init(rng, {d, dh}, wd));
            b.bq.push_back(DenseArray::zeros({dh}));
            b.bk.push_back(DenseArray::zeros({dh}));
            b.bv.push_back(DenseArray::zeros({dh}));
        }
        b.wo = uniform_init(rng, {d, d}, wd);
        b.bo = DenseArray::zeros({d});
        b.w1 = uniform_init(rng, {d, hid}, wd);
        b.b1 = DenseArray::zeros({hid});
        b.w2 = uniform_init(rng, {hid, d}, 1.0 / std::sqrt((double)hid));
        b.b2 = DenseArray::zeros({d});
        p.block.push_back(std::move(b));
    }
    p.lnf_g = DenseArray::ones({d});
    p.lnf_b = DenseArray::zeros({d});
    p.head_w = uniform_init(rng, {d, cfg.classes}, wd);
    p.head_b = DenseArray::zeros({cfg.classes});
    return p;
}

EmbeddingStack init_embeddings(std::uint64_t seed, const ViTConfig& cfg) {
    EmbeddingStack e;
    for (std::size_t l = 0; l < cfg.blocks; ++l)
        e.push_back(embed::init(seed + 7919 * (l + 1), cfg.d, cfg.d_prime));
    return e;
}

std::vector<Var> BoundViT::all() const {
    std::vector<Var> v{patch_w, patch_b, cls, pos, lnf_g, lnf_b, head_w, head_b};
    for (const auto& b : block) {
        v.insert(v.end(), {b.ln1_g, b.ln1_b, b.ln2_g, b.ln2_b, b.wo, b.bo, b.w1, b.b1, b.w2,
                           b.b2});
        for (auto x : b.wq) v.push_back(x);
        for (auto x : b.wk) v.push_back(x);
        for (auto x : b.wv) v.push_back(x);
        for (auto x : b.bq) v.push_back(x);
        for (auto x : b.bk) v.push_back(x);
        for (auto x : b.bv) v.push_back(x);
    }
    return v;
}

BoundViT bind(Tape& t, const ViTParams& p, bool trainable) {
    BoundViT b;
    b.patch_w = t.leaf(p.patch_w, trainable);
    b.patch_b = t.leaf(p.patch_b, trainable);
    b.cls = t.leaf(p.cls, trainable);
    b.pos = t.leaf(p.pos, trainable);
    for (const auto& bp : p.block) {
        BoundBlock bb;
        bb.ln1_g = t.leaf(bp.ln1_g, trainable);
        bb.ln1_b = t.leaf(bp.ln1_b, trainable);
        bb.ln2_g = t.leaf(bp.ln2_g, trainable);
        bb.ln2_b = t.leaf(bp.ln2_b, trainable);
        for (std::size_t h = 0; h < bp.wq.size(); ++h) {
            bb.wq.push_back(t.leaf(bp.wq[h], trainable));
            bb.wk.push_back(t.leaf(bp.wk[h], trainable));
            bb.wv.push_back(t.leaf(bp.wv[h], trainable));
            bb.bq.push_back(t.leaf(bp.bq[h], trainable));
            bb.bk.push_back(t.leaf(bp.bk[h], trainable));
            bb.bv.push_back(t.leaf(bp.bv[h], trainable));
        }
        bb.wo = t.leaf(bp.wo, trainable);
        bb.bo = t.leaf(bp.bo, trainable);
        bb.w1 = t.leaf(bp.w1, trainable);
        bb.b1 = t.leaf(bp.b1, trainable);
        bb.w2 = t.leaf(bp.w2, trainable);
        bb.b2 = t.leaf(bp.b2, trainable);
        b.block.push_back(std::move(bb));
    }
    b.lnf_g = t.leaf(p.lnf_g, trainable);
    b.lnf_b = t.leaf(p.lnf_b, trainable);
    b.head_w = t.leaf(p.head_w, trainable);
    b.head_b = t.leaf(p.head_b, trainable);
    return b;
}

BoundEmbeddings bind(Tape& t, const EmbeddingStack& e, bool trainable) {
    BoundEmbeddings b;
    for (const auto& ep : e) b.block.push_back(embed::bind(t, ep, trainable));
    return b;
}

namespace {

// Column concat via row concat of transposes.
Var concat_cols(Tape& t, const std::vector<Var>& parts) {
    std::vector<Var> tr;
    tr.reserve(parts.size());
    for (Var p : parts) tr.push_back(t.transpose(p));
    return t.transpose(t.concat_rows(tr));
}

DenseArray patchify(const ViTConfig& cfg, const DenseArray& image) {
    if (image.rows() != cfg.image || image.cols() != cfg.image)
        throw std::invalid_argument("forward: image shape mismatch");
    DenseArray out({cfg.patches(), cfg.patch_dim()});
    const std::size_t g = cfg.grid(), ps = cfg.patch;
    for (std::size_t py = 0; py < g; ++py)
        for (std::size_t px = 0; px < g; ++px) {
            std::size_t row = py * g + px;
            std::size_t k = 0;
            for (std::size_t y = 0; y < ps; ++y)
                for (std::size_t x = 0; x < ps; ++x)
                    out.at(row, k++) = image.at(py * ps + y, px * ps + x);
        }
    return out;
}

// Union-find over original token ids, used to derive the merge-group map.
struct Groups {
    std::vector<std::size_t> parent;
    explicit Groups(std::size_t n) : parent(n) {
        for (std::size_t i = 0; i < n; ++i) parent[i] = i;
    }
    std::size_t find(std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    }
    void merge_into(std::size_t src, std::size_t dst) { parent[find(src)] = find(dst); }
};

struct AttentionOut {
    Var features;   // post-residual
    Var mean_keys;  // per-head-averaged keys [N x d/h]
};

AttentionOut attention_block(Tape& t, const ViTConfig& cfg, const BoundBlock& b, Var x,
                             const merge::TokenState& state) {
    const std::size_t n = t.value(x).rows();
    merge::AttentionBias bias = merge::proportional_bias(t, state);
    DenseArray mask2d({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) mask2d.at(i, j) = bias.key_mask.data[j];

    Var x_ln = t.layer_norm(x, b.ln1_g, b.ln1_b);
    std::vector<Var> head_out, keys;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        Var q = t.add(t.matmul(x_ln, b.wq[h]), b.bq[h]);
        Var k = t.add(t.matmul(x_ln, b.wk[h]), b.bk[h]);
        Var v = t.add(t.matmul(x_ln, b.wv[h]), b.bv[h]);
        keys.push_back(k);
        Var logits = t.scale(t.matmul(q, t.transpose(k)), 1.0 / std::sqrt((double)cfg.head_dim()));
        if (cfg.prop_attn) logits = t.add(logits, bias.log_sizes);  // row broadcast over keys
        Var attn = t.row_softmax(logits, mask2d);
        head_out.push_back(t.matmul(attn, v));
    }
    AttentionOut out;
    Var proj = t.add(t.matmul(concat_cols(t, head_out), b.wo), b.bo);
    out.features = t.add(x, proj);
    Var ksum = keys[0];
    for (std::size_t h = 1; h < keys.size(); ++h) ksum = t.add(ksum, keys[h]);
    out.mean_keys = t.scale(ksum, 1.0 / (double)cfg.heads);
    return out;
}

}  // namespace

ForwardResult forward(Tape& t, const ViTConfig& cfg, const BoundViT& params,
                      const BoundEmbeddings* embeddings, const DenseArray& image,
                      bool want_trace) {
    cfg.validate();
    const bool decoupled =
        cfg.mode == MergeMode::hard_decoupled || cfg.mode == MergeMode::soft_decoupled;
    if (decoupled && (embeddings == nullptr || embeddings->block.size() != cfg.blocks))
        throw std::invalid_argument("forward: decoupled mode needs one embedding per block");

    Var patches = t.constant(patchify(cfg, image));
    Var x = t.add(t.matmul(patches, params.patch_w), params.patch_b);
    x = t.add(t.concat_rows({params.cls, x}), params.pos);

    const std::size_t n0 = cfg.tokens();
    merge::TokenState state;
    state.features = x;
    state.sizes = t.constant(DenseArray::ones({n0}));
    state.excluded.assign(n0, 0);
    state.protected_.assign(n0, 0);
    state.protected_[0] = 1;  // class token

    // Original token id of each current slot (hard modes shrink the state).
    std::vector<std::size_t> orig(n0);
    for (std::size_t i = 0; i < n0; ++i) orig[i] = i;
    Groups groups(n0);

    ForwardResult res;
    res.trace.merges.resize(cfg.blocks);

    for (std::size_t l = 0; l < cfg.blocks; ++l) {
        res.trace.attn_tokens.push_back(state.count());
        Var block_input = state.features;
        AttentionOut att = attention_block(t, cfg, params.block[l], state.features, state);
        state.features = att.features;

        if (cfg.mode != MergeMode::none && cfg.r > 0) {
            merge::BipartitePartition p = merge::partition(state);
            Var emb_full{};
            if (decoupled)
                emb_full = embed::embed(t, block_input, embeddings->block[l]);
            else
                emb_full = att.mean_keys;
            Var ea = t.gather_rows(emb_full, p.index_a);
            Var eb = t.gather_rows(emb_full, p.index_b);
            merge::SimilarityMatrix sim = merge::similarity(t, ea, eb, cfg.sim_scale);

            if (cfg.mode == MergeMode::soft_decoupled) {
                merge::SoftAdjacency adj = merge::soft_group(t, sim, cfg.r, cfg.tau);
                state = merge::soft_merge(t, state, p, adj);
                state = merge::exclude_minimum(t, state, cfg.r);
            } else {
                merge::HardMatching m = merge::hard_group(t, sim, cfg.r);
                if (want_trace)
                    for (auto [i, j] : m.edges) {
                        std::size_t src = orig[p.index_a[i]], dst = orig[p.index_b[j]];
                        res.trace.merges[l].emplace_back(src, dst);
                        groups.merge_into(src, dst);
                    }
                // Keep the original-id map aligned with hard_merge's survivor order.
                std::vector<std::uint8_t> is_source(state.count(), 0);
                for (auto [i, j] : m.edges) is_source[p.index_a[i]] = 1;
                std::vector<std::size_t> new_orig;
                for (std::size_t g = 0; g < state.count(); ++g)
                    if (!is_source[g]) new_orig.push_back(orig[g]);
                state = merge::hard_merge(t, state, p, m);
                orig = std::move(new_orig);
            }
        }

        Var x_ln2 = t.layer_norm(state.features, params.block[l].ln2_g, params.block[l].ln2_b);
        Var h = t.gelu(t.add(t.matmul(x_ln2, params.block[l].w1), params.block[l].b1));
        Var mlp = t.add(t.matmul(h, params.block[l].w2), params.block[l].b2);
        state.features = t.add(state.features, mlp);
    }

    Var final_ln = t.layer_norm(state.features, params.lnf_g, params.lnf_b);
    Var cls_row = t.slice_rows(final_ln, 0, 1);
    res.logits = t.add(t.matmul(cls_row, params.head_w), params.head_b);

    if (want_trace) {
        res.trace.group_of_token.assign(n0, 0);
        std::vector<std::size_t> root_to_group(n0, SIZE_MAX);
        std::size_t next = 0;
        for (std::size_t i = 0; i < n0; ++i) {
            std::size_t rt = groups.find(i);
            if (root_to_group[rt] == SIZE_MAX) root_to_group[rt] = next++;
            res.trace.group_of_token[i] = root_to_group[rt];
        }
        res.trace.group_count = next;
    }
    return res;
}

CountTrace count_trace(const ViTConfig& cfg) {
    cfg.validate();
    if (cfg.r * cfg.blocks >= cfg.tokens())
        throw std::invalid_argument("count_trace: r*blocks >= token count");
    CountTrace ct;
    for (std::size_t l = 1; l <= cfg.blocks; ++l) {
        ct.attn.push_back(cfg.tokens() - cfg.r * (l - 1));
        ct.mlp.push_back(cfg.tokens() - cfg.r * l);
    }
    return ct;
}

void save(const ViTParams& p, const ViTConfig& cfg, const std::string& path) {
    checkpoint::Checkpoint c;
    c.kind = "vit";
    c.meta["image"] = (std::int64_t)cfg.image;
    c.meta["patch"] = (std::int64_t)cfg.patch;
    c.meta["d"] = (std::int64_t)cfg.d;
    c.meta["heads"] = (std::int64_t)cfg.heads;
    c.meta["blocks"] = (std::int64_t)cfg.blocks;
    c.meta["mlp_ratio"] = (std::int64_t)cfg.mlp_ratio;
    c.meta["classes"] = (std::int64_t)cfg.classes;
    c.arrays.emplace_back("patch_w", p.patch_w);
    c.arrays.emplace_back("patch_b", p.patch_b);
    c.arrays.emplace_back("cls", p.cls);
    c.arrays.emplace_back("pos", p.pos);
    for (std::size_t l = 0; l < p.block.size(); ++l) {
        const auto& b = p.block[l];
        auto tag = [&](const std::string& s) { return "blk" + std::to_string(l) + "." + s; };
        c.arrays.emplace_back(tag("ln1_g"), b.ln1_g);
        c.arrays.emplace_back(tag("ln1_b"), b.ln1_b);
        c.arrays.emplace_back(tag("ln2_g"), b.ln2_g);
        c.arrays.emplace_back(tag("ln2_b"), b.ln2_b);
        for (std::size_t h = 0; h < b.wq.size(); ++h) {
            auto ht = [&](const std::string& s) { return tag(s + std::to_string(h)); };
            c.arrays.emplace_back(ht("wq"), b.wq[h]);
            c.arrays.emplace_back(ht("wk"), b.wk[h]);
            c.arrays.emplace_back(ht("wv"), b.wv[h]);
            c.arrays.emplace_back(ht("bq"), b.bq[h]);
            c.arrays.emplace_back(ht("bk"), b.bk[h]);
            c.arrays.emplace_back(ht("bv"), b.bv[h]);
        }
        c.arrays.emplace_back(tag("wo"), b.wo);
        c.arrays.emplace_back(tag("bo"), b.bo);
        c.arrays.emplace_back(tag("w1"), b.w1);
        c.arrays.emplace_back(tag("b1"), b.b1);
        c.arrays.emplace_back(tag("w2"), b.w2);
        c.arrays.emplace_back(tag("b2"), b.b2);
    }
    c.arrays.emplace_back("lnf_g", p.lnf_g);
    c.arrays.emplace_back("lnf_b", p.lnf_b);
    c.arrays.emplace_back("head_w", p.head_w);
    c.arrays.emplace_back("head_b", p.head_b);
    checkpoint::save(c, path);
}

ViTParams load(const std::string& path, ViTConfig& cfg_out) {
    checkpoint::Checkpoint c = checkpoint::load(path);
    if (c.kind != "vit") throw std::runtime_error("not a vit checkpoint: " + path);
    cfg_out.image = (std::size_t)c.meta_at("image");
    cfg_out.patch = (std::size_t)c.meta_at("patch");
    cfg_out.d = (std::size_t)c.meta_at("d");
    cfg_out.heads = (std::size_t)c.meta_at("heads");
    cfg_out.blocks = (std::size_t)c.meta_at("blocks");
    cfg_out.mlp_ratio = (std::size_t)c.meta_at("mlp_ratio");
    cfg_out.classes = (std::size_t)c.meta_at("classes");
    ViTParams p;
    p.patch_w = c.array("patch_w");
    p.patch_b = c.array("patch_b");
    p.cls = c.array("cls");
    p.pos = c.array("pos");
    for (std::size_t l = 0; l < cfg_out.blocks; ++l) {
        BlockParams b;
        auto tag = [&](const std::string& s) { return "blk" + std::to_string(l) + "." + s; };
        b.ln1_g = c.array(tag("ln1_g"));
        b.ln1_b = c.array(tag("ln1_b"));
        b.ln2_g = c.array(tag("ln2_g"));
        b.ln2_b = c.array(tag("ln2_b"));
        for (std::size_t h = 0; h < cfg_out.heads; ++h) {
            auto ht = [&](const std::string& s) { return tag(s + std::to_string(h)); };
            b.wq.push_back(c.array(ht("wq")));
            b.wk.push_back(c.array(ht("wk")));
            b.wv.push_back(c.array(ht("wv")));
            b.bq.push_back(c.array(ht("bq")));
            b.bk.push_back(c.array(ht("bk")));
            b.bv.push_back(c.array(ht("bv")));
        }
        b.wo = c.array(tag("wo"));
        b.bo = c.array(tag("bo"));
        b.w1 = c.array(tag("w1"));
        b.b1 = c.array(tag("b1"));
        b.w2 = c.array(tag("w2"));
        b.b2 = c.array(tag("b2"));
        p.block.push_back(std::move(b));
    }
    p.lnf_g = c.array("lnf_g");
    p.lnf_b = c.array("lnf_b");
    p.head_w = c.array("head_w");
    p.head_b = c.array("head_b");
    return p;
}

}  // namespace dtem::vit
