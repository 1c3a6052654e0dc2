#include "dtem/tape.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "dtem/kernels.hpp"

namespace dtem {

bool all_finite(const DenseArray& a) {
    for (double v : a.data)
        if (!std::isfinite(v)) return false;
    return true;
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

enum class Bcast { same, b_scalar, a_scalar, b_row, a_row };

Bcast broadcast_mode(const DenseArray& a, const DenseArray& b) {
    if (a.same_shape(b)) return Bcast::same;
    if (b.is_scalar()) return Bcast::b_scalar;
    if (a.is_scalar()) return Bcast::a_scalar;
    if (a.rank() == 2 && b.numel() == a.cols() && b.rank() <= 2 && b.rows() * b.cols() == b.numel() &&
        (b.rank() == 1 || b.rows() == 1))
        return Bcast::b_row;
    if (b.rank() == 2 && a.numel() == b.cols() && (a.rank() == 1 || a.rows() == 1))
        return Bcast::a_row;
    throw std::invalid_argument("elementwise op: incompatible shapes " + a.shape_str() +
                                " vs " + b.shape_str());
}

// Index of the broadcast operand element matching flat output index i.
inline std::size_t bidx(Bcast m, bool is_a, std::size_t i, std::size_t out_cols) {
    switch (m) {
        case Bcast::same: return i;
        case Bcast::b_scalar: return is_a ? i : 0;
        case Bcast::a_scalar: return is_a ? 0 : i;
        case Bcast::b_row: return is_a ? i : i % out_cols;
        case Bcast::a_row: return is_a ? i % out_cols : i;
    }
    return i;
}

inline double clamp_floor_signed(double d) {
    if (std::fabs(d) >= kLogFloor) return d;
    return d < 0 ? -kLogFloor : kLogFloor;
}

}  // namespace

Var Tape::record(DenseArray value, std::function<void(Tape&, const DenseArray&)> back) {
    if (prec_ == Precision::f32)
        for (double& v : value.data) v = static_cast<double>(static_cast<float>(v));
    if (!all_finite(value))
        throw std::runtime_error("Tape: non-finite value produced (op #" +
                                 std::to_string(nodes_.size()) + ")");
    Node n;
    n.value = std::move(value);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(DenseArray value, bool trainable) {
    Var v = record(std::move(value), nullptr);
    nodes_[v.id].trainable = trainable;
    return v;
}

void Tape::check(Var v) const {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
        throw std::invalid_argument("Var does not belong to this tape");
}

const DenseArray& Tape::value(Var v) const {
    check(v);
    return nodes_[v.id].value;
}

const DenseArray& Tape::grad(Var v) const {
    check(v);
    return nodes_[v.id].grad;
}

void Tape::accumulate(int id, const DenseArray& g) {
    DenseArray& dst = nodes_[id].grad;
    for (std::size_t i = 0; i < g.numel(); ++i) dst.data[i] += g.data[i];
}

void Tape::accumulate_scaled(int id, const DenseArray& g, double c) {
    DenseArray& dst = nodes_[id].grad;
    for (std::size_t i = 0; i < g.numel(); ++i) dst.data[i] += c * g.data[i];
}

// ---- elementwise binary ----

template <int Kind>  // 0 add, 1 sub, 2 mul, 3 div
static Var binary_op(Tape& t, Var a, Var b, const DenseArray& av, const DenseArray& bv) {
    Bcast m = broadcast_mode(av, bv);
    const DenseArray& big = (m == Bcast::a_scalar || m == Bcast::a_row) ? bv : av;
    DenseArray out(big.shape);
    const std::size_t oc = big.cols();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        double x = av.data[bidx(m, true, i, oc)];
        double y = bv.data[bidx(m, false, i, oc)];
        if constexpr (Kind == 0) out.data[i] = x + y;
        if constexpr (Kind == 1) out.data[i] = x - y;
        if constexpr (Kind == 2) out.data[i] = x * y;
        if constexpr (Kind == 3) out.data[i] = x / clamp_floor_signed(y);
    }
    return t.record(std::move(out), [a, b, m, oc](Tape& tp, const DenseArray& g) {
        const DenseArray& av2 = tp.value(a);
        const DenseArray& bv2 = tp.value(b);
        DenseArray ga(av2.shape), gb(bv2.shape);
        for (std::size_t i = 0; i < g.numel(); ++i) {
            std::size_t ia = bidx(m, true, i, oc);
            std::size_t ib = bidx(m, false, i, oc);
            double x = av2.data[ia];
            double y = bv2.data[ib];
            if constexpr (Kind == 0) {
                ga.data[ia] += g.data[i];
                gb.data[ib] += g.data[i];
            }
            if constexpr (Kind == 1) {
                ga.data[ia] += g.data[i];
                gb.data[ib] -= g.data[i];
            }
            if constexpr (Kind == 2) {
                ga.data[ia] += g.data[i] * y;
                gb.data[ib] += g.data[i] * x;
            }
            if constexpr (Kind == 3) {
                double yc = clamp_floor_signed(y);
                ga.data[ia] += g.data[i] / yc;
                if (std::fabs(y) >= kLogFloor) gb.data[ib] -= g.data[i] * x / (yc * yc);
            }
        }
        tp.accumulate(a.id, ga);
        tp.accumulate(b.id, gb);
    });
}

Var Tape::add(Var a, Var b) { check(a); check(b); return binary_op<0>(*this, a, b, value(a), value(b)); }
Var Tape::sub(Var a, Var b) { check(a); check(b); return binary_op<1>(*this, a, b, value(a), value(b)); }
Var Tape::mul(Var a, Var b) { check(a); check(b); return binary_op<2>(*this, a, b, value(a), value(b)); }
Var Tape::div(Var a, Var b) { check(a); check(b); return binary_op<3>(*this, a, b, value(a), value(b)); }

Var Tape::scale(Var a, double c) {
    check(a);
    DenseArray out = value(a);
    for (double& v : out.data) v *= c;
    return record(std::move(out), [a, c](Tape& tp, const DenseArray& g) {
        tp.accumulate_scaled(a.id, g, c);
    });
}

Var Tape::add_scalar(Var a, double c) {
    check(a);
    DenseArray out = value(a);
    for (double& v : out.data) v += c;
    return record(std::move(out), [a](Tape& tp, const DenseArray& g) { tp.accumulate(a.id, g); });
}

Var Tape::add_to_rows(Var a, Var v) {
    check(a); check(v);
    const DenseArray& av = value(a);
    const DenseArray& vv = value(v);
    if (av.rank() != 2 || vv.numel() != av.rows())
        throw std::invalid_argument("add_to_rows: need [n x m] and [n]");
    DenseArray out = av;
    for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = 0; j < av.cols(); ++j) out.at(i, j) += vv.data[i];
    return record(std::move(out), [a, v](Tape& tp, const DenseArray& g) {
        tp.accumulate(a.id, g);
        DenseArray gv(tp.value(v).shape);
        for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) gv.data[i] += g.at(i, j);
        tp.accumulate(v.id, gv);
    });
}

Var Tape::scale_rows(Var a, Var v) {
    check(a); check(v);
    const DenseArray& av = value(a);
    const DenseArray& vv = value(v);
    if (av.rank() != 2 || vv.numel() != av.rows())
        throw std::invalid_argument("scale_rows: need [n x m] and [n]");
    DenseArray out = av;
    for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = 0; j < av.cols(); ++j) out.at(i, j) *= vv.data[i];
    return record(std::move(out), [a, v](Tape& tp, const DenseArray& g) {
        const DenseArray& av2 = tp.value(a);
        const DenseArray& vv2 = tp.value(v);
        DenseArray ga(av2.shape), gv(vv2.shape);
        for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) {
                ga.at(i, j) += g.at(i, j) * vv2.data[i];
                gv.data[i] += g.at(i, j) * av2.at(i, j);
            }
        tp.accumulate(a.id, ga);
        tp.accumulate(v.id, gv);
    });
}

// ---- linear algebra ----

Var Tape::matmul(Var a, Var b) {
    check(a); check(b);
    const DenseArray& av = value(a);
    const DenseArray& bv = value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows())
        throw std::invalid_argument("matmul: shapes " + av.shape_str() + " x " + bv.shape_str());
    DenseArray out({av.rows(), bv.cols()});
    kernels::matmul(av.data.data(), bv.data.data(), out.data.data(), av.rows(), av.cols(),
                    bv.cols());
    return record(std::move(out), [a, b](Tape& tp, const DenseArray& g) {
        const DenseArray& av2 = tp.value(a);
        const DenseArray& bv2 = tp.value(b);
        const std::size_t m = av2.rows(), k = av2.cols(), n = bv2.cols();
        // dA = g * B^T
        DenseArray ga({m, k});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j) s += g.at(i, j) * bv2.at(p, j);
                ga.at(i, p) = s;
            }
        // dB = A^T * g
        DenseArray gb({k, n});
        for (std::size_t p = 0; p < k; ++p)
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t i = 0; i < m; ++i) s += av2.at(i, p) * g.at(i, j);
                gb.at(p, j) = s;
            }
        tp.accumulate(a.id, ga);
        tp.accumulate(b.id, gb);
    });
}

Var Tape::transpose(Var a) {
    check(a);
    const DenseArray& av = value(a);
    if (av.rank() != 2) throw std::invalid_argument("transpose: rank-2 only");
    DenseArray out({av.cols(), av.rows()});
    for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = 0; j < av.cols(); ++j) out.at(j, i) = av.at(i, j);
    return record(std::move(out), [a](Tape& tp, const DenseArray& g) {
        DenseArray ga(tp.value(a).shape);
        for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) ga.at(j, i) = g.at(i, j);
        tp.accumulate(a.id, ga);
    });
}

// ---- elementwise unary ----

Var Tape::exp_(Var a) {
    check(a);
    DenseArray out = value(a);
    for (double& v : out.data) v = std::exp(v);
    Var r = record(std::move(out), nullptr);
    nodes_[r.id].back = [a, r](Tape& tp, const DenseArray& g) {
        const DenseArray& y = tp.value(r);
        DenseArray ga(y.shape);
        for (std::size_t i = 0; i < g.numel(); ++i) ga.data[i] = g.data[i] * y.data[i];
        tp.accumulate(a.id, ga);
    };
    return r;
}

Var Tape::log_(Var a) {
    check(a);
    DenseArray out = value(a);
    for (double& v : out.data) v = std::log(v < kLogFloor ? kLogFloor : v);
    return record(std::move(out), [a](Tape& tp, const DenseArray& g) {
        const DenseArray& x = tp.value(a);
        DenseArray ga(x.shape);
        for (std::size_t i = 0; i < g.numel(); ++i)
            ga.data[i] = x.data[i] > kLogFloor ? g.data[i] / x.data[i] : 0.0;
        tp.accumulate(a.id, ga);
    });
}

Var Tape::sqrt_(Var a) {
    check(a);
    DenseArray out = value(a);
    for (double& v : out.data) v = std::sqrt(v < 0 ? 0 : v);
    Var r = record(std::move(out), nullptr);
    nodes_[r.id].back = [a, r](Tape& tp, const DenseArray& g) {
        const DenseArray& y = tp.value(r);
        DenseArray ga(y.shape);
        for (std::size_t i = 0; i < g.numel(); ++i)
            ga.data[i] = y.data[i] > 0 ? g.data[i] / (2.0 * y.data[i]) : 0.0;
        tp.accumulate(a.id, ga);
    };
    return r;
}

Var Tape::tanh_(Var a) {
    check(a);
    DenseArray out = value(a);
    for (double& v : out.data) v = std::tanh(v);
    Var r = record(std::move(out), nullptr);
    nodes_[r.id].back = [a, r](Tape& tp, const DenseArray& g) {
        const DenseArray& y = tp.value(r);
        DenseArray ga(y.shape);
        for (std::size_t i = 0; i < g.numel(); ++i)
            ga.data[i] = g.data[i] * (1.0 - y.data[i] * y.data[i]);
        tp.accumulate(a.id, ga);
    };
    return r;
}

Var Tape::gelu(Var a) {
    check(a);
    DenseArray out = value(a);
    for (double& v : out.data) {
        double u = kGeluC * (v + kGeluA * v * v * v);
        v = 0.5 * v * (1.0 + std::tanh(u));
    }
    return record(std::move(out), [a](Tape& tp, const DenseArray& g) {
        const DenseArray& x = tp.value(a);
        DenseArray ga(x.shape);
        for (std::size_t i = 0; i < g.numel(); ++i) {
            double v = x.data[i];
            double u = kGeluC * (v + kGeluA * v * v * v);
            double t = std::tanh(u);
            double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
            ga.data[i] = g.data[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
        }
        tp.accumulate(a.id, ga);
    });
}

Var Tape::clamp_min(Var a, double floor) {
    check(a);
    DenseArray out = value(a);
    for (double& v : out.data) v = v < floor ? floor : v;
    return record(std::move(out), [a, floor](Tape& tp, const DenseArray& g) {
        const DenseArray& x = tp.value(a);
        DenseArray ga(x.shape);
        for (std::size_t i = 0; i < g.numel(); ++i)
            ga.data[i] = x.data[i] > floor ? g.data[i] : 0.0;
        tp.accumulate(a.id, ga);
    });
}

// ---- reductions ----

Var Tape::sum(Var a) {
    check(a);
    double s = 0.0;
    for (double v : value(a).data) s += v;
    return record(DenseArray::scalar(s), [a](Tape& tp, const DenseArray& g) {
        DenseArray ga(tp.value(a).shape, g.data[0]);
        tp.accumulate(a.id, ga);
    });
}

Var Tape::row_sum(Var a) {
    check(a);
    const DenseArray& av = value(a);
    if (av.rank() != 2) throw std::invalid_argument("row_sum: rank-2 only");
    DenseArray out({av.rows()});
    for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = 0; j < av.cols(); ++j) out.data[i] += av.at(i, j);
    return record(std::move(out), [a](Tape& tp, const DenseArray& g) {
        const DenseArray& x = tp.value(a);
        DenseArray ga(x.shape);
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < x.cols(); ++j) ga.at(i, j) = g.data[i];
        tp.accumulate(a.id, ga);
    });
}

Var Tape::col_sum(Var a) {
    check(a);
    const DenseArray& av = value(a);
    if (av.rank() != 2) throw std::invalid_argument("col_sum: rank-2 only");
    DenseArray out({av.cols()});
    for (std::size_t i = 0; i < av.rows(); ++i)
        for (std::size_t j = 0; j < av.cols(); ++j) out.data[j] += av.at(i, j);
    return record(std::move(out), [a](Tape& tp, const DenseArray& g) {
        const DenseArray& x = tp.value(a);
        DenseArray ga(x.shape);
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < x.cols(); ++j) ga.at(i, j) = g.data[j];
        tp.accumulate(a.id, ga);
    });
}

// ---- softmaxes ----

Var Tape::global_softmax(Var a, const DenseArray& mask) {
    check(a);
    const DenseArray& av = value(a);
    if (!mask.same_shape(av)) throw std::invalid_argument("global_softmax: mask shape mismatch");
    double mx = -1e300;
    bool any = false;
    for (std::size_t i = 0; i < av.numel(); ++i)
        if (mask.data[i] != 0.0) {
            any = true;
            if (av.data[i] > mx) mx = av.data[i];
        }
    DenseArray out(av.shape);
    if (any) {
        double z = 0.0;
        for (std::size_t i = 0; i < av.numel(); ++i)
            if (mask.data[i] != 0.0) {
                out.data[i] = std::exp(av.data[i] - mx);
                z += out.data[i];
            }
        for (std::size_t i = 0; i < av.numel(); ++i)
            if (mask.data[i] != 0.0) out.data[i] /= z;
    }
    Var r = record(std::move(out), nullptr);
    DenseArray msk = mask;
    nodes_[r.id].back = [a, r, msk](Tape& tp, const DenseArray& g) {
        const DenseArray& y = tp.value(r);
        double dot = 0.0;
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (msk.data[i] != 0.0) dot += g.data[i] * y.data[i];
        DenseArray ga(y.shape);
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (msk.data[i] != 0.0) ga.data[i] = y.data[i] * (g.data[i] - dot);
        tp.accumulate(a.id, ga);
    };
    return r;
}

Var Tape::row_softmax(Var a, const DenseArray& mask) {
    check(a);
    const DenseArray& av = value(a);
    if (!mask.same_shape(av)) throw std::invalid_argument("row_softmax: mask shape mismatch");
    DenseArray out(av.shape);
    const std::size_t n = av.rows(), m = av.cols();
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -1e300;
        bool any = false;
        for (std::size_t j = 0; j < m; ++j)
            if (mask.at(i, j) != 0.0) {
                any = true;
                if (av.at(i, j) > mx) mx = av.at(i, j);
            }
        if (!any) continue;
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j)
            if (mask.at(i, j) != 0.0) {
                out.at(i, j) = std::exp(av.at(i, j) - mx);
                z += out.at(i, j);
            }
        for (std::size_t j = 0; j < m; ++j)
            if (mask.at(i, j) != 0.0) out.at(i, j) /= z;
    }
    Var r = record(std::move(out), nullptr);
    DenseArray msk = mask;
    nodes_[r.id].back = [a, r, msk](Tape& tp, const DenseArray& g) {
        const DenseArray& y = tp.value(r);
        DenseArray ga(y.shape);
        for (std::size_t i = 0; i < y.rows(); ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < y.cols(); ++j)
                if (msk.at(i, j) != 0.0) dot += g.at(i, j) * y.at(i, j);
            for (std::size_t j = 0; j < y.cols(); ++j)
                if (msk.at(i, j) != 0.0) ga.at(i, j) = y.at(i, j) * (g.at(i, j) - dot);
        }
        tp.accumulate(a.id, ga);
    };
    return r;
}

// ---- cosine similarity ----

Var Tape::cosine_similarity(Var a, Var b) {
    check(a); check(b);
    const DenseArray& av = value(a);
    const DenseArray& bv = value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols())
        throw std::invalid_argument("cosine_similarity: need [na x d], [nb x d]");
    const std::size_t na = av.rows(), nb = bv.rows(), d = av.cols();
    std::vector<double> ra(na), rb(nb);
    for (std::size_t i = 0; i < na; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += av.at(i, k) * av.at(i, k);
        ra[i] = std::max(std::sqrt(s), kNormFloor);
    }
    for (std::size_t j = 0; j < nb; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += bv.at(j, k) * bv.at(j, k);
        rb[j] = std::max(std::sqrt(s), kNormFloor);
    }
    DenseArray out({na, nb});
    for (std::size_t i = 0; i < na; ++i)
        for (std::size_t j = 0; j < nb; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) dot += av.at(i, k) * bv.at(j, k);
            out.at(i, j) = dot / (ra[i] * rb[j]);
        }
    Var r = record(std::move(out), nullptr);
    nodes_[r.id].back = [a, b, r, ra, rb](Tape& tp, const DenseArray& g) {
        const DenseArray& av2 = tp.value(a);
        const DenseArray& bv2 = tp.value(b);
        const DenseArray& s = tp.value(r);
        const std::size_t na2 = av2.rows(), nb2 = bv2.rows(), d2 = av2.cols();
        DenseArray ga(av2.shape), gb(bv2.shape);
        for (std::size_t i = 0; i < na2; ++i)
            for (std::size_t j = 0; j < nb2; ++j) {
                double gij = g.at(i, j);
                if (gij == 0.0) continue;
                double sij = s.at(i, j);
                for (std::size_t k = 0; k < d2; ++k) {
                    ga.at(i, k) += gij * (bv2.at(j, k) / (ra[i] * rb[j]) -
                                          sij * av2.at(i, k) / (ra[i] * ra[i]));
                    gb.at(j, k) += gij * (av2.at(i, k) / (ra[i] * rb[j]) -
                                          sij * bv2.at(j, k) / (rb[j] * rb[j]));
                }
            }
        tp.accumulate(a.id, ga);
        tp.accumulate(b.id, gb);
    };
    return r;
}

// ---- structural ----

Var Tape::reshape(Var a, std::vector<std::size_t> shape) {
    check(a);
    if (DenseArray::numel_of(shape) != value(a).numel())
        throw std::invalid_argument("reshape: element count mismatch");
    DenseArray out(shape, value(a).data);
    return record(std::move(out), [a](Tape& tp, const DenseArray& g) {
        DenseArray ga(tp.value(a).shape, g.data);
        tp.accumulate(a.id, ga);
    });
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    for (Var p : parts) check(p);
    bool rank1 = value(parts[0]).rank() == 1;
    std::size_t cols = rank1 ? 1 : value(parts[0]).cols();
    std::size_t rows = 0;
    for (Var p : parts) {
        const DenseArray& v = value(p);
        if ((v.rank() == 1) != rank1 || (!rank1 && v.cols() != cols))
            throw std::invalid_argument("concat_rows: inconsistent shapes");
        rows += v.rows();
    }
    DenseArray out(rank1 ? std::vector<std::size_t>{rows} : std::vector<std::size_t>{rows, cols});
    std::size_t off = 0;
    for (Var p : parts) {
        const DenseArray& v = value(p);
        std::memcpy(out.data.data() + off, v.data.data(), v.numel() * sizeof(double));
        off += v.numel();
    }
    std::vector<Var> ps = parts;
    return record(std::move(out), [ps](Tape& tp, const DenseArray& g) {
        std::size_t off2 = 0;
        for (Var p : ps) {
            const DenseArray& v = tp.value(p);
            DenseArray gp(v.shape);
            std::memcpy(gp.data.data(), g.data.data() + off2, v.numel() * sizeof(double));
            tp.accumulate(p.id, gp);
            off2 += v.numel();
        }
    });
}

Var Tape::slice_rows(Var a, std::size_t begin, std::size_t end) {
    check(a);
    const DenseArray& av = value(a);
    if (begin > end || end > av.rows()) throw std::invalid_argument("slice_rows: bad range");
    const std::size_t c = av.rank() == 1 ? 1 : av.cols();
    DenseArray out(av.rank() == 1 ? std::vector<std::size_t>{end - begin}
                                  : std::vector<std::size_t>{end - begin, c});
    std::memcpy(out.data.data(), av.data.data() + begin * c, (end - begin) * c * sizeof(double));
    return record(std::move(out), [a, begin, c](Tape& tp, const DenseArray& g) {
        DenseArray ga(tp.value(a).shape);
        std::memcpy(ga.data.data() + begin * c, g.data.data(), g.numel() * sizeof(double));
        tp.accumulate(a.id, ga);
    });
}

Var Tape::gather_rows(Var a, const std::vector<std::size_t>& idx) {
    check(a);
    const DenseArray& av = value(a);
    const std::size_t c = av.rank() == 1 ? 1 : av.cols();
    for (auto i : idx)
        if (i >= av.rows()) throw std::invalid_argument("gather_rows: index out of range");
    DenseArray out(av.rank() == 1 ? std::vector<std::size_t>{idx.size()}
                                  : std::vector<std::size_t>{idx.size(), c});
    for (std::size_t k = 0; k < idx.size(); ++k)
        std::memcpy(out.data.data() + k * c, av.data.data() + idx[k] * c, c * sizeof(double));
    std::vector<std::size_t> ix = idx;
    return record(std::move(out), [a, ix, c](Tape& tp, const DenseArray& g) {
        DenseArray ga(tp.value(a).shape);
        for (std::size_t k = 0; k < ix.size(); ++k)
            for (std::size_t j = 0; j < c; ++j) ga.data[ix[k] * c + j] += g.data[k * c + j];
        tp.accumulate(a.id, ga);
    });
}

Var Tape::stop_gradient(Var a) {
    check(a);
    return record(value(a), nullptr);  // no backward: contributes exactly zero
}

// ---- layer norm ----

Var Tape::layer_norm(Var x, Var gamma, Var beta, double eps) {
    check(x); check(gamma); check(beta);
    const DenseArray& xv = value(x);
    if (xv.rank() != 2 || value(gamma).numel() != xv.cols() || value(beta).numel() != xv.cols())
        throw std::invalid_argument("layer_norm: shape mismatch");
    const std::size_t n = xv.rows(), m = xv.cols();
    std::vector<double> mu(n), sig(n);
    DenseArray xhat({n, m});
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += xv.at(i, j);
        mu[i] = s / m;
        double v = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            double c = xv.at(i, j) - mu[i];
            v += c * c;
        }
        sig[i] = std::sqrt(v / m + eps);
        for (std::size_t j = 0; j < m; ++j) xhat.at(i, j) = (xv.at(i, j) - mu[i]) / sig[i];
    }
    const DenseArray& gv = value(gamma);
    const DenseArray& bv = value(beta);
    DenseArray out({n, m});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out.at(i, j) = gv.data[j] * xhat.at(i, j) + bv.data[j];
    return record(std::move(out), [x, gamma, beta, xhat, sig](Tape& tp, const DenseArray& g) {
        const DenseArray& gv2 = tp.value(gamma);
        const std::size_t n2 = g.rows(), m2 = g.cols();
        DenseArray gx({n2, m2});
        DenseArray gg(tp.value(gamma).shape), gb(tp.value(beta).shape);
        for (std::size_t i = 0; i < n2; ++i) {
            double mean_h = 0.0, mean_hx = 0.0;
            for (std::size_t j = 0; j < m2; ++j) {
                double h = gv2.data[j] * g.at(i, j);
                mean_h += h;
                mean_hx += h * xhat.at(i, j);
                gg.data[j] += g.at(i, j) * xhat.at(i, j);
                gb.data[j] += g.at(i, j);
            }
            mean_h /= m2;
            mean_hx /= m2;
            for (std::size_t j = 0; j < m2; ++j) {
                double h = gv2.data[j] * g.at(i, j);
                gx.at(i, j) = (h - mean_h - xhat.at(i, j) * mean_hx) / sig[i];
            }
        }
        tp.accumulate(x.id, gx);
        tp.accumulate(gamma.id, gg);
        tp.accumulate(beta.id, gb);
    });
}

// ---- classification loss ----

Var Tape::softmax_cross_entropy(Var logits, const DenseArray& targets) {
    check(logits);
    const DenseArray& lv = value(logits);
    if (!targets.same_shape(lv))
        throw std::invalid_argument("softmax_cross_entropy: target shape mismatch");
    const std::size_t n = lv.rows(), m = lv.cols();
    DenseArray probs({n, m});
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double mx = lv.at(i, 0);
        for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, lv.at(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            probs.at(i, j) = std::exp(lv.at(i, j) - mx);
            z += probs.at(i, j);
        }
        for (std::size_t j = 0; j < m; ++j) {
            probs.at(i, j) /= z;
            if (targets.at(i, j) != 0.0)
                loss -= targets.at(i, j) * std::log(std::max(probs.at(i, j), 1e-300));
        }
    }
    loss /= static_cast<double>(n);
    DenseArray tgt = targets;
    return record(DenseArray::scalar(loss), [logits, probs, tgt, n](Tape& tp, const DenseArray& g) {
        DenseArray gl(probs.shape);
        const double c = g.data[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < gl.numel(); ++i)
            gl.data[i] = c * (probs.data[i] - tgt.data[i]);
        tp.accumulate(logits.id, gl);
    });
}

// ---- backward ----

std::unordered_map<int, DenseArray> Tape::backward(Var loss) {
    check(loss);
    if (!value(loss).is_scalar()) throw std::invalid_argument("backward: loss must be scalar");
    for (auto& n : nodes_) n.grad = DenseArray(n.value.shape);
    nodes_[loss.id].grad.data[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.back) n.back(*this, n.grad);
    }
    std::unordered_map<int, DenseArray> out;
    for (int i = 0; i <= loss.id; ++i)
        if (nodes_[i].trainable) out.emplace(i, nodes_[i].grad);
    return out;
}

// ---- finite differences ----

double finite_difference_check(const std::function<double(const DenseArray&)>& f,
                               const DenseArray& x, const DenseArray& analytic_grad,
                               double step) {
    if (!analytic_grad.same_shape(x))
        throw std::invalid_argument("finite_difference_check: gradient shape mismatch");
    DenseArray xp = x;
    double worst = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double orig = x.data[i];
        xp.data[i] = orig + step;
        double fp = f(xp);
        xp.data[i] = orig - step;
        double fm = f(xp);
        xp.data[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error("finite_difference_check: non-finite function value");
        double numeric = (fp - fm) / (2.0 * step);
        double analytic = analytic_grad.data[i];
        double err = std::fabs(analytic - numeric) /
                     std::max(1e-12, std::fabs(analytic) + std::fabs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace dtem
