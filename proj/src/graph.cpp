#include "p3mask/graph.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "p3mask/interp.hpp"

namespace p3mask {

namespace {

constexpr double kAcosClamp = 1e-7;

bool is_scalar(const Tensor& t) { return t.size() == 1; }

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

} // namespace

Graph::NodeId Graph::push(Node node) {
    nodes_.push_back(std::move(node));
    return static_cast<NodeId>(nodes_.size() - 1);
}

void Graph::check_id(NodeId id, const char* op) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
        throw std::invalid_argument(std::string(op) + ": node id " + std::to_string(id) +
                                    " out of range");
    }
}

Graph::NodeId Graph::input(Tensor value, bool requires_grad) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::add(NodeId a, NodeId b) {
    check_id(a, "add");
    check_id(b, "add");
    const Tensor& va = at(a).value;
    const Tensor& vb = at(b).value;
    Tensor out;
    if (va.same_shape(vb)) {
        out = Tensor(va.shape());
        for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] + vb[i];
    } else if (is_scalar(vb)) {
        out = Tensor(va.shape());
        for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] + vb[0];
    } else if (is_scalar(va)) {
        out = Tensor(vb.shape());
        for (std::size_t i = 0; i < vb.size(); ++i) out[i] = va[0] + vb[i];
    } else if (va.rank() == 3 && vb.rank() == 1 && vb.dim(0) == va.dim(0)) {
        // Per-channel bias over a [C,H,W] tensor.
        out = Tensor(va.shape());
        const std::size_t plane = static_cast<std::size_t>(va.dim(1)) * va.dim(2);
        for (int c = 0; c < va.dim(0); ++c) {
            const std::size_t base = static_cast<std::size_t>(c) * plane;
            for (std::size_t i = 0; i < plane; ++i) out[base + i] = va[base + i] + vb[static_cast<std::size_t>(c)];
        }
    } else {
        shape_error("add", va, vb);
    }
    Node n;
    n.op = Op::Add;
    n.in0 = a;
    n.in1 = b;
    n.value = std::move(out);
    n.requires_grad = at(a).requires_grad || at(b).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::sub(NodeId a, NodeId b) {
    check_id(a, "sub");
    check_id(b, "sub");
    const Tensor& va = at(a).value;
    const Tensor& vb = at(b).value;
    Tensor out;
    if (va.same_shape(vb)) {
        out = Tensor(va.shape());
        for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] - vb[i];
    } else if (is_scalar(vb)) {
        out = Tensor(va.shape());
        for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] - vb[0];
    } else if (is_scalar(va)) {
        out = Tensor(vb.shape());
        for (std::size_t i = 0; i < vb.size(); ++i) out[i] = va[0] - vb[i];
    } else {
        shape_error("sub", va, vb);
    }
    Node n;
    n.op = Op::Sub;
    n.in0 = a;
    n.in1 = b;
    n.value = std::move(out);
    n.requires_grad = at(a).requires_grad || at(b).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::mul(NodeId a, NodeId b) {
    check_id(a, "mul");
    check_id(b, "mul");
    const Tensor& va = at(a).value;
    const Tensor& vb = at(b).value;
    Tensor out;
    if (va.same_shape(vb)) {
        out = Tensor(va.shape());
        for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] * vb[i];
    } else if (is_scalar(vb)) {
        out = Tensor(va.shape());
        for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] * vb[0];
    } else if (is_scalar(va)) {
        out = Tensor(vb.shape());
        for (std::size_t i = 0; i < vb.size(); ++i) out[i] = va[0] * vb[i];
    } else {
        shape_error("mul", va, vb);
    }
    Node n;
    n.op = Op::Mul;
    n.in0 = a;
    n.in1 = b;
    n.value = std::move(out);
    n.requires_grad = at(a).requires_grad || at(b).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::div(NodeId a, NodeId b) {
    check_id(a, "div");
    check_id(b, "div");
    const Tensor& va = at(a).value;
    const Tensor& vb = at(b).value;
    Tensor out;
    if (va.same_shape(vb)) {
        out = Tensor(va.shape());
        for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] / vb[i];
    } else if (is_scalar(vb)) {
        out = Tensor(va.shape());
        for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] / vb[0];
    } else if (is_scalar(va)) {
        out = Tensor(vb.shape());
        for (std::size_t i = 0; i < vb.size(); ++i) out[i] = va[0] / vb[i];
    } else {
        shape_error("div", va, vb);
    }
    Node n;
    n.op = Op::Div;
    n.in0 = a;
    n.in1 = b;
    n.value = std::move(out);
    n.requires_grad = at(a).requires_grad || at(b).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::matmul(NodeId a, NodeId b) {
    check_id(a, "matmul");
    check_id(b, "matmul");
    const Tensor& va = at(a).value;
    const Tensor& vb = at(b).value;
    const bool a_vec = va.rank() == 1;
    if ((va.rank() != 2 && !a_vec) || vb.rank() != 2) shape_error("matmul", va, vb);
    const int m = a_vec ? 1 : va.dim(0);
    const int k = a_vec ? va.dim(0) : va.dim(1);
    if (vb.dim(0) != k) shape_error("matmul", va, vb);
    const int ncol = vb.dim(1);
    Tensor out(a_vec ? std::vector<int>{ncol} : std::vector<int>{m, ncol});
    for (int i = 0; i < m; ++i) {
        for (int kk = 0; kk < k; ++kk) {
            const double av = va[static_cast<std::size_t>(i) * k + kk];
            if (av == 0.0) continue;
            for (int j = 0; j < ncol; ++j) {
                out[static_cast<std::size_t>(i) * ncol + j] += av * vb.at2(kk, j);
            }
        }
    }
    Node n;
    n.op = Op::MatMul;
    n.in0 = a;
    n.in1 = b;
    n.value = std::move(out);
    n.requires_grad = at(a).requires_grad || at(b).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::conv2d(NodeId x, NodeId w, int stride) {
    check_id(x, "conv2d");
    check_id(w, "conv2d");
    const Tensor& vx = at(x).value;
    const Tensor& vw = at(w).value;
    if (vx.rank() != 3 || vw.rank() != 4 || vw.dim(1) != vx.dim(0)) shape_error("conv2d", vx, vw);
    if (stride < 1) {
        throw std::invalid_argument("conv2d: stride must be >= 1, got " + std::to_string(stride));
    }
    const int cin = vx.dim(0), h = vx.dim(1), wd = vx.dim(2);
    const int cout = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
    if (h < kh || wd < kw) {
        throw std::invalid_argument("conv2d: input " + shape_str(vx.shape()) +
                                    " smaller than kernel " + shape_str(vw.shape()));
    }
    const int ho = (h - kh) / stride + 1;
    const int wo = (wd - kw) / stride + 1;
    Tensor out({cout, ho, wo});
    for (int o = 0; o < cout; ++o) {
        for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
                double acc = 0.0;
                for (int c = 0; c < cin; ++c) {
                    for (int p = 0; p < kh; ++p) {
                        const int iy = oy * stride + p;
                        for (int q = 0; q < kw; ++q) {
                            acc += vx.at3(c, iy, ox * stride + q) *
                                   vw[((static_cast<std::size_t>(o) * cin + c) * kh + p) * kw + q];
                        }
                    }
                }
                out.at3(o, oy, ox) = acc;
            }
        }
    }
    Node n;
    n.op = Op::Conv2d;
    n.in0 = x;
    n.in1 = w;
    n.value = std::move(out);
    n.i0 = stride;
    n.requires_grad = at(x).requires_grad || at(w).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::relu(NodeId x) {
    check_id(x, "relu");
    const Tensor& vx = at(x).value;
    Tensor out(vx.shape());
    for (std::size_t i = 0; i < vx.size(); ++i) out[i] = vx[i] > 0.0 ? vx[i] : 0.0;
    Node n;
    n.op = Op::Relu;
    n.in0 = x;
    n.value = std::move(out);
    n.requires_grad = at(x).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::sum(NodeId x) {
    check_id(x, "sum");
    const Tensor& vx = at(x).value;
    double acc = 0.0;
    for (std::size_t i = 0; i < vx.size(); ++i) acc += vx[i];
    Node n;
    n.op = Op::Sum;
    n.in0 = x;
    n.value = Tensor::scalar(acc);
    n.requires_grad = at(x).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::mean(NodeId x) {
    check_id(x, "mean");
    const Tensor& vx = at(x).value;
    double acc = 0.0;
    for (std::size_t i = 0; i < vx.size(); ++i) acc += vx[i];
    Node n;
    n.op = Op::Mean;
    n.in0 = x;
    n.value = Tensor::scalar(acc / static_cast<double>(vx.size()));
    n.requires_grad = at(x).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::spatial_mean(NodeId x) {
    check_id(x, "spatial_mean");
    const Tensor& vx = at(x).value;
    if (vx.rank() != 3) {
        throw std::invalid_argument("spatial_mean: expected a [C,H,W] tensor, got " +
                                    shape_str(vx.shape()));
    }
    const int c = vx.dim(0);
    const std::size_t plane = static_cast<std::size_t>(vx.dim(1)) * vx.dim(2);
    Tensor out({c});
    for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        const std::size_t base = static_cast<std::size_t>(ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += vx[base + i];
        out[static_cast<std::size_t>(ch)] = acc / static_cast<double>(plane);
    }
    Node n;
    n.op = Op::SpatialMean;
    n.in0 = x;
    n.value = std::move(out);
    n.requires_grad = at(x).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::clamp(NodeId x, double lo, double hi) {
    check_id(x, "clamp");
    if (!(lo <= hi)) {
        throw std::invalid_argument("clamp: lo " + std::to_string(lo) + " exceeds hi " +
                                    std::to_string(hi));
    }
    const Tensor& vx = at(x).value;
    Tensor out(vx.shape());
    for (std::size_t i = 0; i < vx.size(); ++i) {
        out[i] = vx[i] < lo ? lo : (vx[i] > hi ? hi : vx[i]);
    }
    Node n;
    n.op = Op::Clamp;
    n.in0 = x;
    n.value = std::move(out);
    n.p0 = lo;
    n.p1 = hi;
    n.requires_grad = at(x).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::quantize8(NodeId x) {
    check_id(x, "quantize8");
    const Tensor& vx = at(x).value;
    Tensor out(vx.shape());
    for (std::size_t i = 0; i < vx.size(); ++i) out[i] = std::round(vx[i] * 255.0) / 255.0;
    Node n;
    n.op = Op::Quantize8;
    n.in0 = x;
    n.value = std::move(out);
    n.requires_grad = at(x).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::l2_normalize(NodeId x) {
    check_id(x, "l2_normalize");
    const Tensor& vx = at(x).value;
    const int d = vx.dim(vx.rank() - 1);
    const std::size_t slices = vx.size() / static_cast<std::size_t>(d);
    Tensor out(vx.shape());
    Tensor norms({static_cast<int>(slices)});
    for (std::size_t s = 0; s < slices; ++s) {
        const std::size_t base = s * static_cast<std::size_t>(d);
        double sq = 0.0;
        for (int i = 0; i < d; ++i) sq += vx[base + i] * vx[base + i];
        const double norm = std::sqrt(sq);
        norms[s] = norm;
        if (norm > 0.0) {
            for (int i = 0; i < d; ++i) out[base + i] = vx[base + i] / norm;
        }
    }
    Node n;
    n.op = Op::L2Normalize;
    n.in0 = x;
    n.value = std::move(out);
    n.aux = std::move(norms);
    n.requires_grad = at(x).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::dot(NodeId a, NodeId b) {
    check_id(a, "dot");
    check_id(b, "dot");
    const Tensor& va = at(a).value;
    const Tensor& vb = at(b).value;
    if (va.rank() != 1 || vb.rank() != 1 || va.dim(0) != vb.dim(0)) shape_error("dot", va, vb);
    double acc = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) acc += va[i] * vb[i];
    Node n;
    n.op = Op::Dot;
    n.in0 = a;
    n.in1 = b;
    n.value = Tensor::scalar(acc);
    n.requires_grad = at(a).requires_grad || at(b).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::arccos(NodeId x) {
    check_id(x, "arccos");
    const Tensor& vx = at(x).value;
    Tensor out(vx.shape());
    Tensor clamped(vx.shape());
    for (std::size_t i = 0; i < vx.size(); ++i) {
        double c = vx[i];
        if (c > 1.0 - kAcosClamp) c = 1.0 - kAcosClamp;
        if (c < -1.0 + kAcosClamp) c = -1.0 + kAcosClamp;
        clamped[i] = c;
        out[i] = std::acos(c);
    }
    Node n;
    n.op = Op::Arccos;
    n.in0 = x;
    n.value = std::move(out);
    n.aux = std::move(clamped);
    n.requires_grad = at(x).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::square(NodeId x) {
    check_id(x, "square");
    const Tensor& vx = at(x).value;
    Tensor out(vx.shape());
    for (std::size_t i = 0; i < vx.size(); ++i) out[i] = vx[i] * vx[i];
    Node n;
    n.op = Op::Square;
    n.in0 = x;
    n.value = std::move(out);
    n.requires_grad = at(x).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::sqrt_op(NodeId x) {
    check_id(x, "sqrt");
    const Tensor& vx = at(x).value;
    Tensor out(vx.shape());
    for (std::size_t i = 0; i < vx.size(); ++i) {
        if (vx[i] < 0.0) {
            throw std::invalid_argument("sqrt: negative input " + std::to_string(vx[i]));
        }
        out[i] = std::sqrt(vx[i]);
    }
    Node n;
    n.op = Op::Sqrt;
    n.in0 = x;
    n.value = std::move(out);
    n.requires_grad = at(x).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::max_const(NodeId x, double c) {
    check_id(x, "max_const");
    const Tensor& vx = at(x).value;
    Tensor out(vx.shape());
    for (std::size_t i = 0; i < vx.size(); ++i) out[i] = vx[i] > c ? vx[i] : c;
    Node n;
    n.op = Op::MaxConst;
    n.in0 = x;
    n.value = std::move(out);
    n.p0 = c;
    n.requires_grad = at(x).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::resize_bilinear(NodeId x, int out_h, int out_w) {
    check_id(x, "resize_bilinear");
    const Tensor& vx = at(x).value;
    if (vx.rank() != 3) {
        throw std::invalid_argument("resize_bilinear: expected a [C,H,W] tensor, got " +
                                    shape_str(vx.shape()));
    }
    if (out_h < 1 || out_w < 1) {
        throw std::invalid_argument("resize_bilinear: output size " + std::to_string(out_h) + "x" +
                                    std::to_string(out_w) + " must be positive");
    }
    const int c = vx.dim(0), h = vx.dim(1), w = vx.dim(2);
    std::vector<AxisTap> rows(static_cast<std::size_t>(out_h));
    std::vector<AxisTap> cols(static_cast<std::size_t>(out_w));
    for (int i = 0; i < out_h; ++i) rows[static_cast<std::size_t>(i)] = axis_tap(i, h, out_h);
    for (int i = 0; i < out_w; ++i) cols[static_cast<std::size_t>(i)] = axis_tap(i, w, out_w);
    Tensor out({c, out_h, out_w});
    for (int ch = 0; ch < c; ++ch) {
        for (int oy = 0; oy < out_h; ++oy) {
            const AxisTap& ry = rows[static_cast<std::size_t>(oy)];
            for (int ox = 0; ox < out_w; ++ox) {
                const AxisTap& cx = cols[static_cast<std::size_t>(ox)];
                if (ry.w1 == 0.0 && cx.w1 == 0.0) {
                    out.at3(ch, oy, ox) = vx.at3(ch, ry.i0, cx.i0);
                } else {
                    out.at3(ch, oy, ox) =
                        ry.w0 * (cx.w0 * vx.at3(ch, ry.i0, cx.i0) + cx.w1 * vx.at3(ch, ry.i0, cx.i1)) +
                        ry.w1 * (cx.w0 * vx.at3(ch, ry.i1, cx.i0) + cx.w1 * vx.at3(ch, ry.i1, cx.i1));
                }
            }
        }
    }
    Node n;
    n.op = Op::ResizeBilinear;
    n.in0 = x;
    n.value = std::move(out);
    n.i0 = out_h;
    n.i1 = out_w;
    n.requires_grad = at(x).requires_grad;
    return push(std::move(n));
}

Graph::NodeId Graph::softmax_cross_entropy(NodeId logits, int label) {
    check_id(logits, "softmax_cross_entropy");
    const Tensor& vx = at(logits).value;
    if (vx.rank() != 1) {
        throw std::invalid_argument("softmax_cross_entropy: expected rank-1 logits, got " +
                                    shape_str(vx.shape()));
    }
    const int k = vx.dim(0);
    if (label < 0 || label >= k) {
        throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(label) +
                                    " out of range for " + std::to_string(k) + " classes");
    }
    double maxv = vx[0];
    for (std::size_t i = 1; i < vx.size(); ++i) maxv = std::max(maxv, vx[i]);
    double sumexp = 0.0;
    Tensor probs(vx.shape());
    for (std::size_t i = 0; i < vx.size(); ++i) {
        probs[i] = std::exp(vx[i] - maxv);
        sumexp += probs[i];
    }
    for (std::size_t i = 0; i < vx.size(); ++i) probs[i] /= sumexp;
    const double loss = std::log(sumexp) - (vx[static_cast<std::size_t>(label)] - maxv);
    Node n;
    n.op = Op::SoftmaxCE;
    n.in0 = logits;
    n.value = Tensor::scalar(loss);
    n.aux = std::move(probs);
    n.i0 = label;
    n.requires_grad = at(logits).requires_grad;
    return push(std::move(n));
}

const Tensor& Graph::grad(NodeId id) const {
    check_id(id, "grad");
    const Node& n = at(id);
    if (!n.requires_grad) {
        throw std::invalid_argument("grad: node " + std::to_string(id) +
                                    " does not require gradients");
    }
    if (n.grad.empty()) {
        throw std::runtime_error("grad: backward() has not been run on this graph");
    }
    return n.grad;
}

void Graph::backward(NodeId root) {
    check_id(root, "backward");
    if (at(root).value.size() != 1) {
        throw std::invalid_argument("backward: root must be scalar, got shape " +
                                    shape_str(at(root).value.shape()));
    }
    for (Node& n : nodes_) {
        if (n.requires_grad) {
            n.grad = Tensor(n.value.shape());
        } else {
            n.grad = Tensor();
        }
    }
    Node& r = at(root);
    if (!r.requires_grad) {
        return; // no grad-requiring leaf reaches the root; all gradients stay zero
    }
    r.grad[0] = 1.0;
    for (NodeId i = root; i >= 0; --i) {
        Node& n = at(i);
        if (n.requires_grad && n.op != Op::Leaf) propagate(n);
    }
}

void Graph::propagate(Node& n) {
    const Tensor& g = n.grad;
    switch (n.op) {
    case Op::Leaf:
        break;
    case Op::Add: {
        Node& a = at(n.in0);
        Node& b = at(n.in1);
        const Tensor& va = a.value;
        const Tensor& vb = b.value;
        if (a.requires_grad) {
            if (va.same_shape(n.value)) {
                for (std::size_t i = 0; i < g.size(); ++i) a.grad[i] += g[i];
            } else { // scalar left operand
                for (std::size_t i = 0; i < g.size(); ++i) a.grad[0] += g[i];
            }
        }
        if (b.requires_grad) {
            if (vb.same_shape(n.value)) {
                for (std::size_t i = 0; i < g.size(); ++i) b.grad[i] += g[i];
            } else if (is_scalar(vb)) {
                for (std::size_t i = 0; i < g.size(); ++i) b.grad[0] += g[i];
            } else { // per-channel bias
                const std::size_t plane = static_cast<std::size_t>(va.dim(1)) * va.dim(2);
                for (int c = 0; c < va.dim(0); ++c) {
                    const std::size_t base = static_cast<std::size_t>(c) * plane;
                    for (std::size_t i = 0; i < plane; ++i) b.grad[static_cast<std::size_t>(c)] += g[base + i];
                }
            }
        }
        break;
    }
    case Op::Sub: {
        Node& a = at(n.in0);
        Node& b = at(n.in1);
        if (a.requires_grad) {
            if (a.value.same_shape(n.value)) {
                for (std::size_t i = 0; i < g.size(); ++i) a.grad[i] += g[i];
            } else {
                for (std::size_t i = 0; i < g.size(); ++i) a.grad[0] += g[i];
            }
        }
        if (b.requires_grad) {
            if (b.value.same_shape(n.value)) {
                for (std::size_t i = 0; i < g.size(); ++i) b.grad[i] -= g[i];
            } else {
                for (std::size_t i = 0; i < g.size(); ++i) b.grad[0] -= g[i];
            }
        }
        break;
    }
    case Op::Mul: {
        Node& a = at(n.in0);
        Node& b = at(n.in1);
        const Tensor& va = a.value;
        const Tensor& vb = b.value;
        const bool a_scalar = !va.same_shape(n.value);
        const bool b_scalar = !vb.same_shape(n.value);
        if (a.requires_grad) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                a.grad[a_scalar ? 0 : i] += g[i] * vb[b_scalar ? 0 : i];
            }
        }
        if (b.requires_grad) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                b.grad[b_scalar ? 0 : i] += g[i] * va[a_scalar ? 0 : i];
            }
        }
        break;
    }
    case Op::Div: {
        Node& a = at(n.in0);
        Node& b = at(n.in1);
        const Tensor& va = a.value;
        const Tensor& vb = b.value;
        const bool a_scalar = !va.same_shape(n.value);
        const bool b_scalar = !vb.same_shape(n.value);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double bv = vb[b_scalar ? 0 : i];
            if (a.requires_grad) a.grad[a_scalar ? 0 : i] += g[i] / bv;
            if (b.requires_grad) {
                b.grad[b_scalar ? 0 : i] -= g[i] * va[a_scalar ? 0 : i] / (bv * bv);
            }
        }
        break;
    }
    case Op::MatMul: {
        Node& a = at(n.in0);
        Node& b = at(n.in1);
        const Tensor& va = a.value;
        const Tensor& vb = b.value;
        const bool a_vec = va.rank() == 1;
        const int m = a_vec ? 1 : va.dim(0);
        const int k = a_vec ? va.dim(0) : va.dim(1);
        const int ncol = vb.dim(1);
        for (int i = 0; i < m; ++i) {
            for (int kk = 0; kk < k; ++kk) {
                const std::size_t ai = static_cast<std::size_t>(i) * k + kk;
                double acc = 0.0;
                for (int j = 0; j < ncol; ++j) {
                    const double gv = g[static_cast<std::size_t>(i) * ncol + j];
                    acc += gv * vb.at2(kk, j);
                    if (b.requires_grad) b.grad[static_cast<std::size_t>(kk) * ncol + j] += va[ai] * gv;
                }
                if (a.requires_grad) a.grad[ai] += acc;
            }
        }
        break;
    }
    case Op::Conv2d: {
        Node& x = at(n.in0);
        Node& w = at(n.in1);
        const Tensor& vx = x.value;
        const Tensor& vw = w.value;
        const int stride = n.i0;
        const int cin = vx.dim(0), cout = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
        const int ho = n.value.dim(1), wo = n.value.dim(2);
        for (int o = 0; o < cout; ++o) {
            for (int oy = 0; oy < ho; ++oy) {
                for (int ox = 0; ox < wo; ++ox) {
                    const double gv = g.at3(o, oy, ox);
                    if (gv == 0.0) continue;
                    for (int c = 0; c < cin; ++c) {
                        for (int p = 0; p < kh; ++p) {
                            const int iy = oy * stride + p;
                            for (int q = 0; q < kw; ++q) {
                                const std::size_t wi =
                                    ((static_cast<std::size_t>(o) * cin + c) * kh + p) * kw + q;
                                if (x.requires_grad) x.grad.at3(c, iy, ox * stride + q) += gv * vw[wi];
                                if (w.requires_grad) w.grad[wi] += gv * vx.at3(c, iy, ox * stride + q);
                            }
                        }
                    }
                }
            }
        }
        break;
    }
    case Op::Relu: {
        Node& x = at(n.in0);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (x.value[i] > 0.0) x.grad[i] += g[i];
        }
        break;
    }
    case Op::Sum: {
        Node& x = at(n.in0);
        for (std::size_t i = 0; i < x.grad.size(); ++i) x.grad[i] += g[0];
        break;
    }
    case Op::Mean: {
        Node& x = at(n.in0);
        const double gv = g[0] / static_cast<double>(x.value.size());
        for (std::size_t i = 0; i < x.grad.size(); ++i) x.grad[i] += gv;
        break;
    }
    case Op::SpatialMean: {
        Node& x = at(n.in0);
        const std::size_t plane = static_cast<std::size_t>(x.value.dim(1)) * x.value.dim(2);
        for (int c = 0; c < x.value.dim(0); ++c) {
            const double gv = g[static_cast<std::size_t>(c)] / static_cast<double>(plane);
            const std::size_t base = static_cast<std::size_t>(c) * plane;
            for (std::size_t i = 0; i < plane; ++i) x.grad[base + i] += gv;
        }
        break;
    }
    case Op::Clamp: {
        Node& x = at(n.in0);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = x.value[i];
            if (v >= n.p0 && v <= n.p1) x.grad[i] += g[i];
        }
        break;
    }
    case Op::Quantize8: {
        Node& x = at(n.in0);
        for (std::size_t i = 0; i < g.size(); ++i) x.grad[i] += g[i];
        break;
    }
    case Op::L2Normalize: {
        Node& x = at(n.in0);
        const int d = x.value.dim(x.value.rank() - 1);
        const std::size_t slices = x.value.size() / static_cast<std::size_t>(d);
        for (std::size_t s = 0; s < slices; ++s) {
            const double norm = n.aux[s];
            if (norm == 0.0) continue;
            const std::size_t base = s * static_cast<std::size_t>(d);
            double gy = 0.0;
            for (int i = 0; i < d; ++i) gy += g[base + i] * n.value[base + i];
            for (int i = 0; i < d; ++i) {
                x.grad[base + i] += (g[base + i] - n.value[base + i] * gy) / norm;
            }
        }
        break;
    }
    case Op::Dot: {
        Node& a = at(n.in0);
        Node& b = at(n.in1);
        for (std::size_t i = 0; i < a.value.size(); ++i) {
            if (a.requires_grad) a.grad[i] += g[0] * b.value[i];
            if (b.requires_grad) b.grad[i] += g[0] * a.value[i];
        }
        break;
    }
    case Op::Arccos: {
        Node& x = at(n.in0);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double c = n.aux[i];
            x.grad[i] += g[i] * (-1.0 / std::sqrt(1.0 - c * c));
        }
        break;
    }
    case Op::Square: {
        Node& x = at(n.in0);
        for (std::size_t i = 0; i < g.size(); ++i) x.grad[i] += g[i] * 2.0 * x.value[i];
        break;
    }
    case Op::Sqrt: {
        Node& x = at(n.in0);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (x.value[i] > 0.0) x.grad[i] += g[i] * 0.5 / n.value[i];
        }
        break;
    }
    case Op::MaxConst: {
        Node& x = at(n.in0);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (x.value[i] > n.p0) x.grad[i] += g[i];
        }
        break;
    }
    case Op::ResizeBilinear: {
        Node& x = at(n.in0);
        const int h = x.value.dim(1), w = x.value.dim(2);
        const int out_h = n.i0, out_w = n.i1;
        for (int ch = 0; ch < x.value.dim(0); ++ch) {
            for (int oy = 0; oy < out_h; ++oy) {
                const AxisTap ry = axis_tap(oy, h, out_h);
                for (int ox = 0; ox < out_w; ++ox) {
                    const AxisTap cx = axis_tap(ox, w, out_w);
                    const double gv = g.at3(ch, oy, ox);
                    x.grad.at3(ch, ry.i0, cx.i0) += gv * ry.w0 * cx.w0;
                    if (cx.w1 != 0.0) x.grad.at3(ch, ry.i0, cx.i1) += gv * ry.w0 * cx.w1;
                    if (ry.w1 != 0.0) {
                        x.grad.at3(ch, ry.i1, cx.i0) += gv * ry.w1 * cx.w0;
                        if (cx.w1 != 0.0) x.grad.at3(ch, ry.i1, cx.i1) += gv * ry.w1 * cx.w1;
                    }
                }
            }
        }
        break;
    }
    case Op::SoftmaxCE: {
        Node& x = at(n.in0);
        const int label = n.i0;
        for (std::size_t i = 0; i < x.value.size(); ++i) {
            const double onehot = (static_cast<int>(i) == label) ? 1.0 : 0.0;
            x.grad[i] += g[0] * (n.aux[i] - onehot);
        }
        break;
    }
    }
}

double grad_check(const GraphBuilder& f, const Tensor& point, double h) {
    if (!(h > 0.0)) {
        throw std::invalid_argument("grad_check: step must be positive");
    }
    Graph g;
    const Graph::NodeId leaf = g.input(point, true);
    const Graph::NodeId root = f(g, leaf);
    if (g.value(root).size() != 1) {
        throw std::invalid_argument("grad_check: function must produce a scalar");
    }
    g.backward(root);
    const Tensor analytic = g.grad(leaf);

    const auto eval_at = [&](const Tensor& p) {
        Graph gp;
        const Graph::NodeId lp = gp.input(p, false);
        return gp.value(f(gp, lp)).item();
    };

    double max_err = 0.0;
    Tensor shifted = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        shifted[i] = point[i] + h;
        const double fp = eval_at(shifted);
        shifted[i] = point[i] - h;
        const double fm = eval_at(shifted);
        shifted[i] = point[i];
        const double numeric = (fp - fm) / (2.0 * h);
        const double denom = std::max(1.0, std::abs(analytic[i]));
        const double err = std::abs(analytic[i] - numeric) / denom;
        if (!std::isfinite(err)) {
            return std::numeric_limits<double>::infinity();
        }
        max_err = std::max(max_err, err);
    }
    return max_err;
}

} // namespace p3mask
