#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A Graph is an append-only arena of nodes. Builder methods validate shapes,
// compute the forward value eagerly and return the node's id; backward() seeds
// the (scalar) root with gradient 1 and sweeps the arena in reverse insertion
// order, which makes gradient accumulation order deterministic. A graph is
// intended to be built per evaluation (e.g. per training mini-batch) and
// discarded; leaves hold copies of their input tensors.
//
// The op set covers the protection and perception losses plus what model
// training needs: elementwise arithmetic, matmul, valid-mode strided conv,
// relu, reductions, straight-through clamp and 8-bit quantize, L2
// normalization, dot, clamped arccos, square, sqrt, max-against-constant,
// corner-aligned bilinear resize, and a fused softmax cross-entropy head.

#include <cstdint>
#include <functional>
#include <vector>

#include "p3mask/tensor.hpp"

namespace p3mask {

class Graph {
public:
    using NodeId = int;

    /// Inserts a leaf holding a copy of `value`. Leaves with requires_grad
    /// receive a gradient tensor during backward(); constant leaves do not.
    NodeId input(Tensor value, bool requires_grad);
    NodeId constant(Tensor value) { return input(std::move(value), false); }
    NodeId constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    // Elementwise binary ops. Operands must have equal shapes, or one side may
    // be a scalar (broadcast). add() additionally accepts a rank-1 [C] right
    // operand against a [C,H,W] left operand (per-channel bias).
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId div(NodeId a, NodeId b);

    /// [M,K] x [K,N] -> [M,N]; a rank-1 [K] left operand is treated as [1,K]
    /// and yields a rank-1 [N] result.
    NodeId matmul(NodeId a, NodeId b);

    /// Valid-mode 2-D convolution: input [Cin,H,W], weight [Cout,Cin,kh,kw],
    /// stride >= 1, output [Cout,(H-kh)/stride+1,(W-kw)/stride+1].
    NodeId conv2d(NodeId x, NodeId w, int stride);

    NodeId relu(NodeId x);

    NodeId sum(NodeId x);   // -> scalar
    NodeId mean(NodeId x);  // -> scalar

    /// Global average pool: [C,H,W] -> [C].
    NodeId spatial_mean(NodeId x);

    /// Clamp to [lo, hi] with a straight-through gradient: the gradient passes
    /// where lo <= x <= hi and is zero outside.
    NodeId clamp(NodeId x, double lo, double hi);

    /// Snap every value to the nearest multiple of 1/255 (ties round away from
    /// zero). Straight-through gradient.
    NodeId quantize8(NodeId x);

    /// Normalizes along the last axis to unit L2 norm. A zero slice stays zero
    /// and receives zero gradient.
    NodeId l2_normalize(NodeId x);

    /// Dot product of two rank-1 tensors of equal length -> scalar.
    NodeId dot(NodeId a, NodeId b);

    /// Elementwise arccos. The input is clamped to [-1+1e-7, 1-1e-7] before
    /// acos, and the backward pass evaluates the derivative at the clamped
    /// value, so the gradient is finite everywhere.
    NodeId arccos(NodeId x);

    NodeId square(NodeId x);

    /// Elementwise square root. The derivative at x == 0 is taken as 0 (the
    /// same one-sided convention as relu) to keep gradients finite.
    NodeId sqrt_op(NodeId x);

    /// Elementwise max(x, c); the gradient passes where x > c.
    NodeId max_const(NodeId x, double c);

    /// Corner-aligned bilinear resize of a [C,H,W] tensor to [C,out_h,out_w].
    /// A same-size resize reproduces the input bit-for-bit.
    NodeId resize_bilinear(NodeId x, int out_h, int out_w);

    /// Fused softmax + cross-entropy for a rank-1 logits vector and an integer
    /// class label; returns the scalar loss -log softmax(logits)[label]. The
    /// backward pass uses the exact softmax - onehot gradient.
    NodeId softmax_cross_entropy(NodeId logits, int label);

    /// Runs reverse-mode accumulation from a scalar root. Gradients of all
    /// grad-requiring nodes are reset to zero first, so calling backward twice
    /// on the same graph yields bit-identical results. Leaves that do not
    /// reach the root keep zero gradients.
    void backward(NodeId root);

    const Tensor& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }

    /// Gradient of the last backward() root with respect to node `id`. Only
    /// meaningful for nodes that require gradients.
    const Tensor& grad(NodeId id) const;

    std::size_t node_count() const { return nodes_.size(); }

private:
    enum class Op {
        Leaf, Add, Sub, Mul, Div, MatMul, Conv2d, Relu, Sum, Mean, SpatialMean,
        Clamp, Quantize8, L2Normalize, Dot, Arccos, Square, Sqrt, MaxConst,
        ResizeBilinear, SoftmaxCE,
    };

    struct Node {
        Op op;
        int in0 = -1;
        int in1 = -1;
        Tensor value;
        Tensor grad;
        Tensor aux;          // op-specific forward cache (softmax probs, slice norms)
        bool requires_grad = false;
        double p0 = 0.0;     // clamp lo / max_const threshold
        double p1 = 0.0;     // clamp hi
        int i0 = 0;          // stride / out_h / label
        int i1 = 0;          // out_w
    };

    NodeId push(Node node);
    Node& at(NodeId id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& at(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
    void check_id(NodeId id, const char* op) const;
    void propagate(Node& n);

    std::vector<Node> nodes_;
};

/// Builds a scalar function of one tensor leaf inside a fresh graph and
/// returns the root id. Used by grad_check and the loss assemblers.
using GraphBuilder = std::function<Graph::NodeId(Graph&, Graph::NodeId)>;

/// Compares the analytic gradient of `f` at `point` against central finite
/// differences with step `h`. Returns the maximum over coordinates of
/// |analytic - numeric| / max(1, |analytic|); any non-finite comparison yields
/// +infinity so thresholds treat it as a failure.
double grad_check(const GraphBuilder& f, const Tensor& point, double h);

} // namespace p3mask
