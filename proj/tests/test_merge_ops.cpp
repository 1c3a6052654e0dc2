#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "dtem/merge.hpp"

using namespace dtem;
using merge::BipartitePartition;
using merge::HardMatching;
using merge::SimilarityMatrix;
using merge::SoftAdjacency;
using merge::TokenState;

namespace {

DenseArray randn(std::vector<std::size_t> shape, std::mt19937_64& rng, double scale = 1.0) {
    DenseArray a(std::move(shape));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (double& v : a.data) v = scale * dist(rng);
    return a;
}

TokenState random_state(Tape& t, std::size_t n, std::size_t d, std::mt19937_64& rng,
                        bool random_sizes = false) {
    TokenState s;
    s.features = t.leaf(randn({n, d}, rng), true);
    DenseArray sizes = DenseArray::ones({n});
    if (random_sizes) {
        std::uniform_real_distribution<double> dist(0.2, 3.0);
        for (double& v : sizes.data) v = dist(rng);
    }
    s.sizes = t.leaf(sizes, true);
    s.excluded.assign(n, 0);
    s.protected_.assign(n, 0);
    return s;
}

// Independent selection-based BSM oracle: per-row best edge (ties toward
// lower column), then repeatedly pick the best remaining candidate by
// (score desc, row asc, col asc).
HardMatching bsm_oracle(const DenseArray& s, const DenseArray& mask, std::size_t r) {
    struct Cand { double score; std::size_t a, b; };
    std::vector<Cand> cands;
    for (std::size_t i = 0; i < s.rows(); ++i) {
        bool any = false;
        Cand best{0, i, 0};
        for (std::size_t j = 0; j < s.cols(); ++j) {
            if (mask.at(i, j) == 0.0) continue;
            if (!any || s.at(i, j) > best.score) { best = {s.at(i, j), i, j}; any = true; }
        }
        if (any) cands.push_back(best);
    }
    if (r > cands.size()) throw std::invalid_argument("oracle: r too large");
    HardMatching m;
    std::vector<bool> used(cands.size(), false);
    for (std::size_t k = 0; k < r; ++k) {
        std::size_t pick = SIZE_MAX;
        for (std::size_t c = 0; c < cands.size(); ++c) {
            if (used[c]) continue;
            if (pick == SIZE_MAX || cands[c].score > cands[pick].score) pick = c;
        }
        used[pick] = true;
        m.edges.emplace_back(cands[pick].a, cands[pick].b);
    }
    std::sort(m.edges.begin(), m.edges.end());
    return m;
}

std::vector<std::pair<std::size_t, std::size_t>> sorted_edges(HardMatching m) {
    std::sort(m.edges.begin(), m.edges.end());
    return m.edges;
}

double sum_sizes(Tape& t, const TokenState& s) {
    double out = 0.0;
    for (double v : t.value(s.sizes).data) out += v;
    return out;
}

DenseArray weighted_feature_sum(Tape& t, const TokenState& s) {
    const DenseArray& f = t.value(s.features);
    const DenseArray& m = t.value(s.sizes);
    DenseArray out({f.cols()});
    for (std::size_t i = 0; i < f.rows(); ++i)
        for (std::size_t j = 0; j < f.cols(); ++j) out.data[j] += m.data[i] * f.at(i, j);
    return out;
}

}  // namespace

TEST_CASE("partition: parity over non-excluded tokens") {
    Tape t;
    std::mt19937_64 rng(0);
    TokenState s = random_state(t, 5, 3, rng);
    BipartitePartition p = merge::partition(s);
    CHECK(p.index_a == std::vector<std::size_t>{0, 2, 4});
    CHECK(p.index_b == std::vector<std::size_t>{1, 3});
}

TEST_CASE("partition: protected class token forced into B") {
    Tape t;
    std::mt19937_64 rng(0);
    TokenState s = random_state(t, 5, 3, rng);
    s.protected_[0] = 1;
    BipartitePartition p = merge::partition(s);
    CHECK(p.index_a == std::vector<std::size_t>{1, 3});
    CHECK(p.index_b == std::vector<std::size_t>{0, 2, 4});
}

TEST_CASE("partition: exclusion shrinks to one-and-one") {
    Tape t;
    std::mt19937_64 rng(0);
    TokenState s = random_state(t, 5, 3, rng);
    s.excluded = {1, 0, 1, 0, 1};
    BipartitePartition p = merge::partition(s);
    CHECK(p.index_a.size() == 1);
    CHECK(p.index_b.size() == 1);
    CHECK(p.index_a[0] == 1);
    CHECK(p.index_b[0] == 3);
}

TEST_CASE("similarity: identical / orthogonal rows, pre-scale") {
    Tape t;
    Var a = t.constant(DenseArray::matrix(2, 2, {1, 0, 0, 1}));
    Var b = t.constant(DenseArray::matrix(1, 2, {1, 0}));
    SimilarityMatrix s1 = merge::similarity(t, a, b, 1.0);
    CHECK(t.value(s1.values).at(0, 0) == doctest::Approx(1.0));
    CHECK(t.value(s1.values).at(1, 0) == doctest::Approx(0.0));
    SimilarityMatrix s2 = merge::similarity(t, a, b, 0.1);
    CHECK(t.value(s2.values).at(0, 0) == doctest::Approx(10.0));
}

TEST_CASE("hard_group: worked examples and r=0") {
    DenseArray s = DenseArray::matrix(2, 2, {0.9, 0.1, 0.2, 0.8});
    DenseArray mask = DenseArray::ones({2, 2});
    CHECK(merge::hard_group(s, mask, 1).edges ==
          std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}});
    CHECK(sorted_edges(merge::hard_group(s, mask, 2)) ==
          std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 1}});
    CHECK(merge::hard_group(s, mask, 0).edges.empty());
}

TEST_CASE("hard_group matches the brute-force oracle on the full 3-value grid, |A|,|B| <= 3") {
    const double vals[3] = {0.0, 0.5, 1.0};
    for (std::size_t na = 1; na <= 3; ++na)
        for (std::size_t nb = 1; nb <= 3; ++nb) {
            const std::size_t cells = na * nb;
            std::size_t total = 1;
            for (std::size_t c = 0; c < cells; ++c) total *= 3;
            DenseArray s({na, nb});
            DenseArray mask = DenseArray::ones({na, nb});
            std::vector<std::size_t> digit(cells, 0);
            for (std::size_t idx = 0; idx < total; ++idx) {
                for (std::size_t c = 0; c < cells; ++c) s.data[c] = vals[digit[c]];
                for (std::size_t r = 0; r <= na; ++r) {
                    auto got = sorted_edges(merge::hard_group(s, mask, r));
                    auto want = sorted_edges(bsm_oracle(s, mask, r));
                    REQUIRE(got == want);
                }
                for (std::size_t c = 0; c < cells; ++c) {
                    if (++digit[c] < 3) break;
                    digit[c] = 0;
                }
            }
        }
}

TEST_CASE("hard_group: random 4x4 spot checks against the oracle") {
    std::mt19937_64 rng(21);
    std::uniform_int_distribution<int> pick(0, 2);
    const double vals[3] = {0.0, 0.5, 1.0};
    DenseArray mask = DenseArray::ones({4, 4});
    for (int it = 0; it < 20000; ++it) {
        DenseArray s({4, 4});
        for (double& v : s.data) v = vals[pick(rng)];
        std::size_t r = (std::size_t)(it % 5);
        CHECK(sorted_edges(merge::hard_group(s, mask, r)) == sorted_edges(bsm_oracle(s, mask, r)));
    }
}

TEST_CASE("hard_group: positive scaling leaves the edge set unchanged") {
    std::mt19937_64 rng(22);
    for (int it = 0; it < 50; ++it) {
        DenseArray s = randn({4, 5}, rng);
        DenseArray s2 = s;
        for (double& v : s2.data) v *= 7.5;
        DenseArray mask = DenseArray::ones({4, 5});
        CHECK(merge::hard_group(s, mask, 3).edges == merge::hard_group(s2, mask, 3).edges);
    }
}

TEST_CASE("hard_merge: weighted-mean examples") {
    Tape t;
    TokenState s;
    s.features = t.constant(DenseArray::matrix(2, 2, {1, 3, 3, 5}));
    s.sizes = t.constant(DenseArray::vec({1, 1}));
    s.excluded = {0, 0};
    s.protected_ = {0, 0};
    BipartitePartition p = merge::partition(s);  // A={0}, B={1}
    HardMatching m{{{0, 0}}};
    TokenState out = merge::hard_merge(t, s, p, m);
    CHECK(out.count() == 1);
    CHECK(t.value(out.features).at(0, 0) == doctest::Approx(2.0));
    CHECK(t.value(out.features).at(0, 1) == doctest::Approx(4.0));
    CHECK(t.value(out.sizes).data[0] == doctest::Approx(2.0));

    Tape t2;
    TokenState s2;
    s2.features = t2.constant(DenseArray::matrix(2, 1, {8.0, 4.0}));
    s2.sizes = t2.constant(DenseArray::vec({3.0, 1.0}));
    s2.excluded = {0, 0};
    s2.protected_ = {0, 0};
    TokenState out2 = merge::hard_merge(t2, s2, merge::partition(s2), m);
    CHECK(t2.value(out2.features).at(0, 0) == doctest::Approx((3.0 * 8.0 + 4.0) / 4.0));
    CHECK(t2.value(out2.sizes).data[0] == doctest::Approx(4.0));
}

TEST_CASE("conservation: hard and soft merging, 200 random instances each") {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        std::mt19937_64 rng(seed);
        std::size_t n = 4 + seed % 29;  // up to 32 tokens
        std::size_t d = 1 + seed % 16;
        Tape t;
        TokenState s = random_state(t, n, d, rng, /*random_sizes=*/true);
        BipartitePartition p = merge::partition(s);
        std::size_t r = seed % (p.index_a.size() + 1);
        double m0 = sum_sizes(t, s);
        DenseArray mx0 = weighted_feature_sum(t, s);

        SimilarityMatrix sim = merge::similarity(
            t, t.gather_rows(s.features, p.index_a), t.gather_rows(s.features, p.index_b));

        TokenState hard = merge::hard_merge(t, s, p, merge::hard_group(t, sim, r));
        CHECK(std::abs(sum_sizes(t, hard) - m0) < 1e-10);
        DenseArray mxh = weighted_feature_sum(t, hard);
        for (std::size_t k = 0; k < d; ++k) CHECK(std::abs(mxh.data[k] - mx0.data[k]) < 1e-10);

        double tau = 0.1 + 0.3 * (double)(seed % 4);
        TokenState soft = merge::soft_merge(t, s, p, merge::soft_group(t, sim, r, tau));
        CHECK(soft.count() == n);
        CHECK(std::abs(sum_sizes(t, soft) - m0) < 1e-10);
        DenseArray mxs = weighted_feature_sum(t, soft);
        for (std::size_t k = 0; k < d; ++k) CHECK(std::abs(mxs.data[k] - mx0.data[k]) < 1e-10);
    }
}

TEST_CASE("soft_group: sharpness-limit examples") {
    Tape t;
    DenseArray mask = DenseArray::ones({2, 2});
    SimilarityMatrix s1{t.constant(DenseArray::matrix(2, 2, {5, 0, 0, 1})), mask};
    SoftAdjacency a1 = merge::soft_group(t, s1, 1, 1e-3);
    CHECK(std::abs(t.value(a1.values).at(0, 0) - 1.0) < 1e-3);
    CHECK(std::abs(t.value(a1.values).at(1, 1)) < 1e-3);

    SimilarityMatrix s2{t.constant(DenseArray::matrix(2, 2, {5, 0, 0, 4})), mask};
    SoftAdjacency a2 = merge::soft_group(t, s2, 2, 1e-3);
    CHECK(std::abs(t.value(a2.values).at(0, 0) - 1.0) < 1e-3);
    CHECK(std::abs(t.value(a2.values).at(1, 1) - 1.0) < 1e-3);
}

TEST_CASE("soft_group: row sums <= 1 and total <= r") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(900 + seed);
        std::size_t na = 2 + seed % 5, nb = 2 + seed % 4;
        std::size_t r = 1 + seed % na;
        double tau = (seed % 3 == 0) ? 0.1 : (seed % 3 == 1 ? 0.5 : 1.0);
        Tape t;
        SimilarityMatrix s{t.constant(randn({na, nb}, rng, 5.0)), DenseArray::ones({na, nb})};
        const DenseArray& e = t.value(merge::soft_group(t, s, r, tau).values);
        double total = 0.0;
        for (std::size_t i = 0; i < na; ++i) {
            double rs = 0.0;
            for (std::size_t j = 0; j < nb; ++j) {
                CHECK(e.at(i, j) >= 0.0);
                CHECK(e.at(i, j) <= 1.0 + 1e-12);
                rs += e.at(i, j);
            }
            CHECK(rs <= 1.0 + 1e-12);
            total += rs;
        }
        CHECK(total <= (double)r + 1e-10);
    }
}

TEST_CASE("discrete-limit equivalence: soft at tau=1e-3 matches hard BSM, 200 seeds") {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        std::mt19937_64 rng(3000 + seed);
        std::size_t na = 2 + seed % 5, nb = 2 + seed % 5;
        std::size_t d = 4;
        std::size_t r = 1 + seed % na;
        Tape t;
        DenseArray sims = randn({na, nb}, rng, 2.0);
        // All pairwise similarities distinct with a safe margin.
        std::vector<double> sorted(sims.data);
        std::sort(sorted.begin(), sorted.end());
        bool distinct = true;
        for (std::size_t k = 1; k < sorted.size(); ++k)
            if (sorted[k] - sorted[k - 1] < 0.05) distinct = false;
        if (!distinct) continue;

        DenseArray mask = DenseArray::ones({na, nb});
        SimilarityMatrix sm{t.constant(sims), mask};
        SoftAdjacency soft = merge::soft_group(t, sm, r, 1e-3);
        HardMatching hard = merge::hard_group(sims, mask, r);
        DenseArray binary = DenseArray::zeros({na, nb});
        for (auto [a, b] : hard.edges) binary.at(a, b) = 1.0;
        const DenseArray& e = t.value(soft.values);
        for (std::size_t k = 0; k < e.numel(); ++k)
            CHECK(std::abs(e.data[k] - binary.data[k]) < 1e-3);

        // Merged B-side features agree within 1e-3.
        TokenState state = random_state(t, na + nb, d, rng);
        BipartitePartition p = merge::partition(state);
        REQUIRE(p.index_a.size() == na);
        REQUIRE(p.index_b.size() == nb);
        TokenState sres = merge::soft_merge(t, state, p, soft);
        TokenState hres = merge::hard_merge(t, state, p, hard);
        // Survivor order in hard output: non-source tokens in original order.
        std::vector<std::uint8_t> is_source(state.count(), 0);
        for (auto [a, b] : hard.edges) is_source[p.index_a[a]] = 1;
        std::size_t hrow = 0;
        for (std::size_t orig = 0; orig < state.count(); ++orig) {
            if (is_source[orig]) continue;
            bool in_b =
                std::find(p.index_b.begin(), p.index_b.end(), orig) != p.index_b.end();
            if (in_b)
                for (std::size_t k = 0; k < d; ++k)
                    CHECK(std::abs(t.value(hres.features).at(hrow, k) -
                                   t.value(sres.features).at(orig, k)) < 1e-3);
            ++hrow;
        }
    }
}

TEST_CASE("soft_merge: zero adjacency is the identity") {
    std::mt19937_64 rng(31);
    Tape t;
    TokenState s = random_state(t, 6, 3, rng, true);
    BipartitePartition p = merge::partition(s);
    SoftAdjacency adj;
    adj.values = t.constant(DenseArray::zeros({p.index_a.size(), p.index_b.size()}));
    TokenState out = merge::soft_merge(t, s, p, adj);
    for (std::size_t k = 0; k < t.value(s.features).numel(); ++k)
        CHECK(t.value(out.features).data[k] == doctest::Approx(t.value(s.features).data[k]));
    for (std::size_t k = 0; k < 6; ++k)
        CHECK(t.value(out.sizes).data[k] == doctest::Approx(t.value(s.sizes).data[k]));
}

TEST_CASE("soft_merge with binary adjacency equals hard_merge on the B side") {
    std::mt19937_64 rng(32);
    Tape t;
    TokenState s = random_state(t, 8, 3, rng, true);
    BipartitePartition p = merge::partition(s);
    HardMatching m{{{0, 1}, {2, 3}}};
    DenseArray binary = DenseArray::zeros({p.index_a.size(), p.index_b.size()});
    for (auto [a, b] : m.edges) binary.at(a, b) = 1.0;
    SoftAdjacency adj;
    adj.values = t.constant(binary);
    TokenState sres = merge::soft_merge(t, s, p, adj);
    TokenState hres = merge::hard_merge(t, s, p, m);
    // Sources end at size 0 in the soft output.
    for (auto [a, b] : m.edges)
        CHECK(t.value(sres.sizes).data[p.index_a[a]] == doctest::Approx(0.0));
    std::vector<std::uint8_t> is_source(s.count(), 0);
    for (auto [a, b] : m.edges) is_source[p.index_a[a]] = 1;
    std::size_t hrow = 0;
    for (std::size_t orig = 0; orig < s.count(); ++orig) {
        if (is_source[orig]) continue;
        for (std::size_t k = 0; k < 3; ++k)
            CHECK(t.value(hres.features).at(hrow, k) ==
                  doctest::Approx(t.value(sres.features).at(orig, k)));
        CHECK(t.value(hres.sizes).data[hrow] ==
              doctest::Approx(t.value(sres.sizes).data[orig]));
        ++hrow;
    }
}

TEST_CASE("permutation equivariance of soft grouping/merging over A") {
    std::mt19937_64 rng(33);
    Tape t;
    std::size_t n = 8, d = 3;
    DenseArray feats = randn({n, d}, rng);
    auto make = [&](const DenseArray& f) {
        TokenState s;
        s.features = t.constant(f);
        s.sizes = t.constant(DenseArray::ones({n}));
        s.excluded.assign(n, 0);
        s.protected_.assign(n, 0);
        return s;
    };
    TokenState s1 = make(feats);
    BipartitePartition p = merge::partition(s1);  // A = {0,2,4,6}
    // Swap the contents of A slots 0 and 2 (token indices 0 and 4).
    DenseArray permuted = feats;
    for (std::size_t k = 0; k < d; ++k) std::swap(permuted.at(0, k), permuted.at(4, k));
    TokenState s2 = make(permuted);

    auto run = [&](TokenState& s) {
        SimilarityMatrix sim = merge::similarity(
            t, t.gather_rows(s.features, p.index_a), t.gather_rows(s.features, p.index_b));
        return merge::soft_merge(t, s, p, merge::soft_group(t, sim, 2, 0.5));
    };
    TokenState o1 = run(s1), o2 = run(s2);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t src = i == 0 ? 4 : (i == 4 ? 0 : i);  // where token i of o2 lives in o1
        for (std::size_t k = 0; k < d; ++k)
            CHECK(t.value(o2.features).at(i, k) ==
                  doctest::Approx(t.value(o1.features).at(src, k)));
        CHECK(t.value(o2.sizes).data[i] == doctest::Approx(t.value(o1.sizes).data[src]));
    }
}

TEST_CASE("composite gradient: soft_group + soft_merge sum-of-squares vs finite differences") {
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        std::mt19937_64 rng(4000 + seed);
        std::size_t n = 6 + seed % 7;  // <= 12 tokens
        std::size_t d = 3;
        std::size_t r = 1 + seed % 3;
        double tau = (seed % 3 == 0) ? 0.1 : (seed % 3 == 1 ? 0.5 : 1.0);
        DenseArray feats = randn({n, d}, rng);

        // The clipping denominator max(1, rowsum(A*)) is detached, so the finite
        // difference oracle must hold it frozen at the base point; otherwise the
        // comparison probes a different function wherever the clamp is active.
        auto loss_of = [&](const DenseArray& f, DenseArray* grad,
                           DenseArray* denom_out, const DenseArray* denom_frozen) {
            Tape t;
            TokenState s;
            s.features = t.leaf(f, true);
            s.sizes = t.constant(DenseArray::ones({n}));
            s.excluded.assign(n, 0);
            s.protected_.assign(n, 0);
            BipartitePartition p = merge::partition(s);
            SimilarityMatrix sim = merge::similarity(
                t, t.gather_rows(s.features, p.index_a), t.gather_rows(s.features, p.index_b));
            SoftAdjacency adj = merge::soft_group(t, sim, r, tau, /*keep_steps=*/true);
            const std::size_t na = p.index_a.size(), nb = p.index_b.size();
            if (denom_out) {
                *denom_out = DenseArray::zeros({na});
                for (std::size_t i = 0; i < na; ++i) {
                    double rs = 0.0;
                    for (const auto& st : adj.per_step)
                        for (std::size_t j = 0; j < nb; ++j) rs += st.at(i, j);
                    denom_out->data[i] = std::max(1.0, rs);
                }
            }
            if (denom_frozen) {
                DenseArray raw = DenseArray::zeros({na, nb});
                for (const auto& st : adj.per_step)
                    for (std::size_t k = 0; k < raw.data.size(); ++k)
                        raw.data[k] += st.data[k];
                for (std::size_t i = 0; i < na; ++i)
                    for (std::size_t j = 0; j < nb; ++j)
                        raw.at(i, j) /= denom_frozen->data[i];
                adj.values = t.constant(raw);
            }
            TokenState out = merge::soft_merge(t, s, p, adj);
            Var loss = t.add(t.sum(t.mul(out.features, out.features)),
                             t.sum(t.mul(out.sizes, out.sizes)));
            double v = t.value(loss).data[0];
            if (grad) {
                t.backward(loss);
                *grad = t.grad(s.features);
            }
            return v;
        };
        DenseArray grad, denom0;
        loss_of(feats, &grad, &denom0, nullptr);
        double err = finite_difference_check(
            [&](const DenseArray& f) { return loss_of(f, nullptr, nullptr, &denom0); },
            feats, grad);
        INFO("seed ", seed);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("clipping denominator carries no gradient (bitwise)") {
    // Gradient w.r.t. similarities of sum(E~) with the denominator detached:
    // compare against an explicit construction where the denominator is a
    // constant; the gradients must match bitwise.
    std::mt19937_64 rng(41);
    DenseArray sims = randn({3, 4}, rng, 3.0);
    DenseArray mask = DenseArray::ones({3, 4});

    Tape t1;
    Var s1 = t1.leaf(sims, true);
    SoftAdjacency a1 = merge::soft_group(t1, {s1, mask}, 2, 0.5);
    t1.backward(t1.sum(t1.mul(a1.values, a1.values)));
    DenseArray g1 = t1.grad(s1);

    // Re-derive E~ with the denominator baked in as numbers.
    Tape t2;
    Var s2 = t2.leaf(sims, true);
    Var st = s2;
    Var a_star{};
    const std::size_t na = 3;
    for (std::size_t step = 0; step < 2; ++step) {
        Var at = t2.global_softmax(t2.scale(st, 1.0 / 0.5), mask);
        a_star = step == 0 ? at : t2.add(a_star, at);
        if (step + 1 < 2) {
            Var sup = t2.log_(t2.sub(t2.constant(DenseArray::ones({na})), t2.row_sum(at)));
            st = t2.add_to_rows(st, sup);
        }
    }
    DenseArray denom_const({na});
    {
        const DenseArray& av = t2.value(a_star);
        for (std::size_t i = 0; i < na; ++i) {
            double rs = 0.0;
            for (std::size_t j = 0; j < 4; ++j) rs += av.at(i, j);
            denom_const.data[i] = 1.0 / std::max(1.0, rs);
        }
    }
    Var e2 = t2.scale_rows(a_star, t2.constant(denom_const));
    t2.backward(t2.sum(t2.mul(e2, e2)));
    DenseArray g2 = t2.grad(s2);

    REQUIRE(g1.numel() == g2.numel());
    for (std::size_t k = 0; k < g1.numel(); ++k) CHECK(g1.data[k] == g2.data[k]);
}

TEST_CASE("exclude_minimum: examples and tie-break") {
    std::mt19937_64 rng(51);
    Tape t;
    TokenState s;
    s.features = t.constant(randn({4, 2}, rng));
    s.sizes = t.constant(DenseArray::vec({1, 0.1, 1, 0.05}));
    s.excluded = {0, 0, 0, 0};
    s.protected_ = {0, 0, 0, 0};
    TokenState out = merge::exclude_minimum(t, s, 2);
    CHECK(out.excluded == std::vector<std::uint8_t>{0, 1, 0, 1});

    TokenState unchanged = merge::exclude_minimum(t, s, 0);
    CHECK(unchanged.excluded == s.excluded);

    TokenState ties;
    ties.features = s.features;
    ties.sizes = t.constant(DenseArray::ones({4}));
    ties.excluded = {0, 0, 0, 0};
    ties.protected_ = {0, 0, 0, 0};
    TokenState tout = merge::exclude_minimum(t, ties, 1);
    CHECK(tout.excluded == std::vector<std::uint8_t>{1, 0, 0, 0});
}

TEST_CASE("exclude_minimum never excludes protected tokens") {
    std::mt19937_64 rng(52);
    Tape t;
    TokenState s;
    s.features = t.constant(randn({3, 2}, rng));
    s.sizes = t.constant(DenseArray::vec({0.01, 5, 5}));
    s.excluded = {0, 0, 0};
    s.protected_ = {1, 0, 0};
    TokenState out = merge::exclude_minimum(t, s, 1);
    CHECK(out.excluded == std::vector<std::uint8_t>{0, 1, 0});
}

TEST_CASE("proportional_bias: log sizes; zero-size and excluded tokens masked") {
    Tape t;
    TokenState s;
    s.features = t.constant(DenseArray::zeros({3, 2}));
    s.sizes = t.constant(DenseArray::vec({2.0, 1.0, 0.0}));
    s.excluded = {0, 1, 0};
    s.protected_ = {0, 0, 0};
    merge::AttentionBias bias = merge::proportional_bias(t, s);
    CHECK(t.value(bias.log_sizes).data[0] == doctest::Approx(std::log(2.0)));
    CHECK(t.value(bias.log_sizes).data[1] == doctest::Approx(0.0));
    CHECK(bias.key_mask.data[0] == 1.0);
    CHECK(bias.key_mask.data[1] == 0.0);  // excluded
    CHECK(bias.key_mask.data[2] == 0.0);  // zero size
}

TEST_CASE("merge_unmerge: identity component broadcasts group means") {
    Tape t;
    TokenState s;
    s.features = t.constant(DenseArray::matrix(4, 1, {1, 2, 3, 4}));
    s.sizes = t.constant(DenseArray::ones({4}));
    s.excluded = {0, 0, 0, 0};
    s.protected_ = {0, 0, 0, 0};
    BipartitePartition p = merge::partition(s);  // A={0,2}, B={1,3}
    HardMatching m{{{0, 0}}};                    // token 0 -> token 1
    auto identity = [](Tape&, Var x) { return x; };
    TokenState out = merge::merge_unmerge(t, identity, s, p, m);
    CHECK(out.count() == 4);
    CHECK(t.value(out.features).at(0, 0) == doctest::Approx(1.5));
    CHECK(t.value(out.features).at(1, 0) == doctest::Approx(1.5));
    CHECK(t.value(out.features).at(2, 0) == doctest::Approx(3.0));
    CHECK(t.value(out.features).at(3, 0) == doctest::Approx(4.0));

    HardMatching empty;
    TokenState out2 = merge::merge_unmerge(t, identity, s, p, empty);
    for (std::size_t k = 0; k < 4; ++k)
        CHECK(t.value(out2.features).data[k] == doctest::Approx(t.value(s.features).data[k]));
}

TEST_CASE("soft_group rejects tiny tau in 32-bit mode with a clear diagnostic") {
    Tape t(Precision::f32);
    DenseArray mask = DenseArray::ones({2, 2});
    SimilarityMatrix s{t.constant(DenseArray::matrix(2, 2, {1, 0, 0, 1})), mask};
    CHECK_THROWS_WITH_AS(merge::soft_group(t, s, 1, 1e-9),
                         doctest::Contains("rerun in 64-bit"), std::runtime_error);
}
