#include "dtem/merge.hpp"

#include <algorithm>
#include <stdexcept>

namespace dtem::merge {

namespace {
constexpr double kZeroSizeTol = 1e-12;
}

TokenState make_token_state(Tape& tape, DenseArray features,
                            std::vector<std::uint8_t> protected_tokens) {
    const std::size_t n = features.rows();
    if (protected_tokens.empty()) protected_tokens.assign(n, 0);
    if (protected_tokens.size() != n)
        throw std::invalid_argument("make_token_state: flag length mismatch");
    TokenState s;
    s.features = tape.constant(std::move(features));
    s.sizes = tape.constant(DenseArray::ones({n}));
    s.excluded.assign(n, 0);
    s.protected_ = std::move(protected_tokens);
    return s;
}

BipartitePartition partition(const TokenState& state) {
    BipartitePartition p;
    std::size_t rank = 0;
    for (std::size_t i = 0; i < state.count(); ++i) {
        if (state.excluded[i]) continue;
        if (state.protected_[i]) {
            p.index_b.push_back(i);
        } else {
            (rank % 2 == 0 ? p.index_a : p.index_b).push_back(i);
            ++rank;
        }
    }
    if (p.index_a.size() + p.index_b.size() < 2)
        throw std::invalid_argument("partition: need at least 2 non-excluded tokens");
    return p;
}

SimilarityMatrix similarity(Tape& tape, Var emb_a, Var emb_b, double pre_scale) {
    if (pre_scale == 0.0) throw std::invalid_argument("similarity: pre_scale must be nonzero");
    SimilarityMatrix s;
    s.values = tape.scale(tape.cosine_similarity(emb_a, emb_b), 1.0 / pre_scale);
    s.mask = DenseArray::ones(tape.value(s.values).shape);
    return s;
}

HardMatching hard_group(const DenseArray& values, const DenseArray& mask, std::size_t r) {
    if (!mask.same_shape(values)) throw std::invalid_argument("hard_group: mask shape mismatch");
    struct Cand {
        double score;
        std::size_t i, j;
    };
    std::vector<Cand> cands;
    for (std::size_t i = 0; i < values.rows(); ++i) {
        bool found = false;
        Cand best{0.0, i, 0};
        for (std::size_t j = 0; j < values.cols(); ++j) {
            if (mask.at(i, j) == 0.0) continue;
            if (!found || values.at(i, j) > best.score) {
                best = {values.at(i, j), i, j};
                found = true;
            }
        }
        if (found) cands.push_back(best);
    }
    if (r > cands.size())
        throw std::invalid_argument("hard_group: r exceeds number of valid candidate rows");
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) {
        if (x.score != y.score) return x.score > y.score;
        if (x.i != y.i) return x.i < y.i;
        return x.j < y.j;
    });
    HardMatching m;
    for (std::size_t k = 0; k < r; ++k) m.edges.emplace_back(cands[k].i, cands[k].j);
    return m;
}

namespace {

// Shared weighted-pooling core of hard and soft merging: given the adjacency
// (binary or continuous) over the partition, returns the updated B-side
// features/sizes and the A-side size multipliers.
struct MergeCore {
    Var new_xb;  // [|B| x d]
    Var new_mb;  // [|B|]
    Var new_ma;  // [|A|]
};

MergeCore merge_core(Tape& t, const TokenState& s, const BipartitePartition& p, Var adj) {
    const std::size_t na = p.index_a.size(), nb = p.index_b.size();
    Var xa = t.gather_rows(s.features, p.index_a);
    Var xb = t.gather_rows(s.features, p.index_b);
    Var ma = t.gather_rows(s.sizes, p.index_a);
    Var mb = t.gather_rows(s.sizes, p.index_b);

    Var adj_t = t.transpose(adj);
    Var contrib_x = t.matmul(adj_t, t.scale_rows(xa, ma));                      // [|B| x d]
    Var contrib_m = t.reshape(t.matmul(adj_t, t.reshape(ma, {na, 1})), {nb});   // [|B|]

    MergeCore out;
    out.new_mb = t.add(mb, contrib_m);
    Var numer = t.add(t.scale_rows(xb, mb), contrib_x);
    Var inv = t.div(t.constant(DenseArray::ones({nb})), out.new_mb);  // floored at kLogFloor
    out.new_xb = t.scale_rows(numer, inv);
    out.new_ma = t.mul(ma, t.sub(t.constant(DenseArray::ones({na})), t.row_sum(adj)));
    return out;
}

// Reassembles a full-length token array from the original plus replacement
// rows appended at the end, using a per-token source index.
Var reassemble(Tape& t, Var original, const std::vector<Var>& extra,
               const std::vector<std::size_t>& src) {
    std::vector<Var> parts{original};
    parts.insert(parts.end(), extra.begin(), extra.end());
    return t.gather_rows(t.concat_rows(parts), src);
}

}  // namespace

TokenState hard_merge(Tape& tape, const TokenState& state, const BipartitePartition& p,
                      const HardMatching& m) {
    const std::size_t n = state.count();
    const std::size_t na = p.index_a.size(), nb = p.index_b.size();
    DenseArray adj({na, nb});
    std::vector<std::uint8_t> is_source(n, 0);
    for (auto [i, j] : m.edges) {
        if (i >= na || j >= nb) throw std::invalid_argument("hard_merge: edge out of range");
        if (is_source[p.index_a[i]])
            throw std::invalid_argument("hard_merge: duplicate a-index in matching");
        adj.at(i, j) = 1.0;
        is_source[p.index_a[i]] = 1;
    }
    MergeCore core = merge_core(tape, state, p, tape.constant(adj));

    // Survivors keep their original order; merged-away sources are dropped.
    std::vector<std::size_t> b_slot(n, 0);
    for (std::size_t j = 0; j < nb; ++j) b_slot[p.index_b[j]] = j;
    std::vector<std::uint8_t> in_b(n, 0);
    for (auto g : p.index_b) in_b[g] = 1;

    TokenState out;
    std::vector<std::size_t> feat_src, size_src;
    for (std::size_t g = 0; g < n; ++g) {
        if (is_source[g]) continue;
        if (in_b[g]) {
            feat_src.push_back(n + b_slot[g]);
            size_src.push_back(n + b_slot[g]);
        } else {
            feat_src.push_back(g);
            size_src.push_back(g);
        }
        out.excluded.push_back(state.excluded[g]);
        out.protected_.push_back(state.protected_[g]);
    }
    out.features = reassemble(tape, state.features, {core.new_xb}, feat_src);
    out.sizes = reassemble(tape, state.sizes, {core.new_mb}, size_src);
    return out;
}

SoftAdjacency soft_group(Tape& tape, const SimilarityMatrix& s, std::size_t r, double tau,
                         bool keep_steps) {
    if (tau <= 0.0) throw std::invalid_argument("soft_group: tau must be positive");
    const DenseArray& sv = tape.value(s.values);
    if (r > sv.rows()) throw std::invalid_argument("soft_group: r exceeds |A|");
    if (tape.precision() == Precision::f32 && tau < 1e-6)
        throw std::runtime_error(
            "soft_group: tau too small for 32-bit mode -- rerun in 64-bit");

    const std::size_t na = sv.rows(), nb = sv.cols();
    SoftAdjacency out;
    Var st = s.values;
    Var a_star{};
    for (std::size_t t = 0; t < r; ++t) {
        Var at = tape.global_softmax(tape.scale(st, 1.0 / tau), s.mask);
        if (keep_steps) out.per_step.push_back(tape.value(at));
        a_star = t == 0 ? at : tape.add(a_star, at);
        if (t + 1 < r) {
            Var suppress = tape.log_(
                tape.sub(tape.constant(DenseArray::ones({na})), tape.row_sum(at)));
            st = tape.add_to_rows(st, suppress);
        }
    }
    if (r == 0) {
        out.values = tape.constant(DenseArray::zeros({na, nb}));
        return out;
    }
    Var denom = tape.clamp_min(tape.stop_gradient(tape.row_sum(a_star)), 1.0);
    Var inv = tape.div(tape.constant(DenseArray::ones({na})), denom);
    out.values = tape.scale_rows(a_star, inv);
    return out;
}

TokenState soft_merge(Tape& tape, const TokenState& state, const BipartitePartition& p,
                      const SoftAdjacency& adj) {
    const DenseArray& ev = tape.value(adj.values);
    if (ev.rows() != p.index_a.size() || ev.cols() != p.index_b.size())
        throw std::invalid_argument("soft_merge: adjacency shape mismatch");
    const std::size_t n = state.count();
    MergeCore core = merge_core(tape, state, p, adj.values);

    std::vector<std::size_t> feat_src(n), size_src(n);
    for (std::size_t g = 0; g < n; ++g) {
        feat_src[g] = g;
        size_src[g] = g;
    }
    for (std::size_t i = 0; i < p.index_a.size(); ++i) size_src[p.index_a[i]] = n + i;
    for (std::size_t j = 0; j < p.index_b.size(); ++j) {
        feat_src[p.index_b[j]] = n + j;
        size_src[p.index_b[j]] = n + p.index_a.size() + j;
    }
    TokenState out;
    out.features = reassemble(tape, state.features, {core.new_xb}, feat_src);
    out.sizes = reassemble(tape, state.sizes, {core.new_ma, core.new_mb}, size_src);
    out.excluded = state.excluded;
    out.protected_ = state.protected_;
    return out;
}

TokenState exclude_minimum(Tape& tape, const TokenState& state, std::size_t r) {
    const DenseArray& sz = tape.value(state.sizes);
    std::vector<std::size_t> cand;
    for (std::size_t i = 0; i < state.count(); ++i)
        if (!state.protected_[i] && !state.excluded[i]) cand.push_back(i);
    if (cand.size() < r)
        throw std::invalid_argument("exclude_minimum: fewer eligible tokens than r");
    std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) {
        if (sz.data[a] != sz.data[b]) return sz.data[a] < sz.data[b];
        return a < b;
    });
    TokenState out = state;
    for (std::size_t k = 0; k < r; ++k) out.excluded[cand[k]] = 1;
    return out;
}

AttentionBias proportional_bias(Tape& tape, const TokenState& state) {
    AttentionBias b;
    b.log_sizes = tape.log_(state.sizes);
    b.key_mask = DenseArray::ones({state.count()});
    const DenseArray& sz = tape.value(state.sizes);
    for (std::size_t i = 0; i < state.count(); ++i)
        if (state.excluded[i] || sz.data[i] < kZeroSizeTol) b.key_mask.data[i] = 0.0;
    return b;
}

TokenState merge_unmerge(Tape& tape, const std::function<Var(Tape&, Var)>& component,
                         const TokenState& state, const BipartitePartition& p,
                         const HardMatching& m) {
    TokenState merged = hard_merge(tape, state, p, m);

    // Representative of each original token in the merged state.
    const std::size_t n = state.count();
    std::vector<std::size_t> rep(n);
    for (std::size_t g = 0; g < n; ++g) rep[g] = g;
    for (auto [i, j] : m.edges) rep[p.index_a[i]] = p.index_b[j];
    std::vector<std::size_t> merged_slot(n, SIZE_MAX);
    {
        std::vector<std::uint8_t> is_source(n, 0);
        for (auto [i, j] : m.edges) is_source[p.index_a[i]] = 1;
        std::size_t k = 0;
        for (std::size_t g = 0; g < n; ++g)
            if (!is_source[g]) merged_slot[g] = k++;
    }

    Var processed = component(tape, merged.features);
    if (tape.value(processed).rows() != merged.count())
        throw std::invalid_argument("merge_unmerge: component must preserve token count");

    std::vector<std::size_t> dup(n);
    for (std::size_t g = 0; g < n; ++g) dup[g] = merged_slot[rep[g]];
    TokenState out;
    out.features = tape.gather_rows(processed, dup);
    out.sizes = state.sizes;
    out.excluded = state.excluded;
    out.protected_ = state.protected_;
    return out;
}

}  // namespace dtem::merge
