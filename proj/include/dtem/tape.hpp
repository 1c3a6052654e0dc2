#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "dtem/array.hpp"

namespace dtem {

class Tape;

// Handle to a value recorded on a tape.
struct Var {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

enum class Precision { f64, f32 };

// Floor applied to log and division inputs so the sharp-temperature limit
// of the suppression term stays finite.
inline constexpr double kLogFloor = 1e-6;
inline constexpr double kNormFloor = 1e-8;

// Reverse-mode tape over DenseArray. Nodes are recorded in creation order,
// which is a topological order of the graph, so backward is a single
// reverse sweep visiting each node exactly once. A tape and its arrays are
// confined to one thread; independent tapes may run concurrently.
class Tape {
public:
    explicit Tape(Precision prec = Precision::f64) : prec_(prec) {}

    Precision precision() const { return prec_; }
    std::size_t size() const { return nodes_.size(); }

    // Leaves.
    Var leaf(DenseArray value, bool trainable = false);
    Var constant(DenseArray value) { return leaf(std::move(value), false); }
    Var scalar(double v) { return constant(DenseArray::scalar(v)); }

    const DenseArray& value(Var v) const;
    const DenseArray& grad(Var v) const;

    // Elementwise binary ops. Broadcasting: same shape, scalar-vs-array,
    // or row-vector-vs-matrix (vector length == matrix columns).
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);  // denominator magnitude floored at kLogFloor

    Var scale(Var a, double c);
    Var add_scalar(Var a, double c);

    // Adds v[i] to every entry of row i of a.
    Var add_to_rows(Var a, Var v);
    // Multiplies row i of a by v[i].
    Var scale_rows(Var a, Var v);

    Var matmul(Var a, Var b);
    Var transpose(Var a);

    Var exp_(Var a);
    Var log_(Var a);  // input floored at kLogFloor
    Var sqrt_(Var a);
    Var tanh_(Var a);
    Var gelu(Var a);
    Var clamp_min(Var a, double floor);

    Var sum(Var a);       // -> [1]
    Var row_sum(Var a);   // [n x m] -> [n]
    Var col_sum(Var a);   // [n x m] -> [m]

    // Softmax over every unmasked entry of the whole array; masked entries
    // (mask == 0) are exactly zero in the output and excluded from the
    // normalization.
    Var global_softmax(Var a, const DenseArray& mask);
    // Per-row softmax with the same masking convention. A fully masked row
    // is all zeros.
    Var row_softmax(Var a, const DenseArray& mask);

    // [na x d], [nb x d] -> [na x nb] of cos(a_i, b_j); norms floored at
    // kNormFloor.
    Var cosine_similarity(Var a, Var b);

    Var reshape(Var a, std::vector<std::size_t> shape);
    Var concat_rows(const std::vector<Var>& parts);
    Var slice_rows(Var a, std::size_t begin, std::size_t end);
    Var gather_rows(Var a, const std::vector<std::size_t>& idx);

    Var stop_gradient(Var a);

    // Per-row layer norm with affine parameters gamma, beta (length = cols).
    Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6);

    // Mean over rows of -sum_c target * log(softmax(logits)); targets are
    // one-hot (or any distribution summing to 1 per row).
    Var softmax_cross_entropy(Var logits, const DenseArray& targets);

    // Runs the reverse sweep from a scalar loss; gradients of all nodes are
    // then readable via grad(). Returns gradients of the trainable leaves.
    std::unordered_map<int, DenseArray> backward(Var loss);

    // Op-implementation hooks.
    Var record(DenseArray value, std::function<void(Tape&, const DenseArray&)> back);
    void accumulate(int id, const DenseArray& g);
    void accumulate_scaled(int id, const DenseArray& g, double c);

private:
    struct Node {
        DenseArray value;
        DenseArray grad;
        std::function<void(Tape&, const DenseArray&)> back;  // adds into input grads
        bool trainable = false;
    };

    void check(Var v) const;

    Precision prec_;
    std::vector<Node> nodes_;
};

// Gradient checking oracle: max over coordinates of
// |analytic - central difference| / max(1e-12, |analytic| + |numeric|).
// f must evaluate to a scalar; it is re-run at x +- step * e_i.
double finite_difference_check(const std::function<double(const DenseArray&)>& f,
                               const DenseArray& x, const DenseArray& analytic_grad,
                               double step = 1e-5);

}  // namespace dtem
