#pragma once

#include <functional>
#include <vector>

#include "dcglr/tensor.hpp"

namespace dcglr::ad {

// Handle into a Tape. Cheap to copy; only meaningful together with the tape
// that produced it.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Append-only record of one forward computation. Operand nodes always precede
// their consumers, so one reverse sweep is a valid backward pass.
class Tape {
public:
    Var leaf(Tensor value);

    const Tensor& value(Var v) const { return nodes_[v.id].value; }
    const Tensor& grad(Var v) const;
    size_t size() const { return nodes_.size(); }

    // Reverse sweep from a scalar root. Gradients accumulate additively
    // across fan-out; may be called once per tape.
    void backward(Var root);

    // --- internal: used by op builders ---
    using PullFn = std::function<void(Tape&, const Tensor& g)>;
    Var record(Tensor value, PullFn pull);
    void accumulate(Var v, const Tensor& g);

private:
    struct Node {
        Tensor value;
        PullFn pull;  // empty for leaves
    };
    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::vector<char> touched_;
};

// Elementwise / scalar ops.
Var add(Tape& t, Var a, Var b);
Var subtract(Tape& t, Var a, Var b);
Var elementwise_multiply(Tape& t, Var a, Var b);
Var scalar_multiply(Tape& t, Var a, double s);

// a [m x n] plus row vector b [n], broadcast over rows.
Var add_rowvec(Tape& t, Var a, Var b);

// Linear algebra and shape ops.
Var matmul(Tape& t, Var a, Var b);
Var transpose(Tape& t, Var a);
Var reshape(Tape& t, Var a, std::vector<int> shape);
Var concat_rows(Tape& t, const std::vector<Var>& parts);
Var concat_cols(Tape& t, const std::vector<Var>& parts);
Var slice_rows(Tape& t, Var a, int r0, int r1);
Var slice_cols(Tape& t, Var a, int c0, int c1);

// Reductions. Axis-0 reductions of a 2-D input; sum_all flattens anything.
Var sum_all(Tape& t, Var a);
Var mean_over_axis(Tape& t, Var a);
Var max_over_axis(Tape& t, Var a);

// Nonlinearities.
Var gelu(Tape& t, Var a);
Var layer_norm(Tape& t, Var a, Var gain, Var bias);

// Row-wise softmax with temperature (last axis of a 1-D or 2-D input).
Var softmax(Tape& t, Var a, double temperature);

// -sum(p * log q) with q clamped at 1e-12. p is a constant (detached);
// gradient flows into q only.
Var cross_entropy(Tape& t, const Tensor& p, Var q);

constexpr double kLogClamp = 1e-12;

}  // namespace dcglr::ad
