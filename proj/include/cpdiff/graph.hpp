#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cpdiff/array.hpp"
#include "cpdiff/parallel.hpp"

namespace cpdiff {

enum class Op : uint8_t {
    kParam,
    kInput,
    kMatmul,
    kConv1d,
    kConv1dTranspose,
    kAdd,
    kMul,
    kRelu,
    kGelu,
    kTanh,
    kLayerNorm,
    kMeanPool,
    kReshape,
    kMse,
    kSoftmaxCrossEntropy,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::kParam: return "param";
        case Op::kInput: return "input";
        case Op::kMatmul: return "matmul";
        case Op::kConv1d: return "conv1d";
        case Op::kConv1dTranspose: return "conv1d_transpose";
        case Op::kAdd: return "add";
        case Op::kMul: return "mul";
        case Op::kRelu: return "relu";
        case Op::kGelu: return "gelu";
        case Op::kTanh: return "tanh";
        case Op::kLayerNorm: return "layer_norm";
        case Op::kMeanPool: return "mean_pool";
        case Op::kReshape: return "flatten_reshape";
        case Op::kMse: return "mse";
        case Op::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    }
    return "?";
}

// Broadcast flavors resolved at build time (see add/mul).
enum class Bcast : uint8_t { kSame, kScalarA, kScalarB, kAxis1Vec, kChanMat };

// Reverse-mode tape. Parameters are registered once and survive
// start_tape(); everything appended afterwards is rebuilt each step.
template <typename T>
class GraphT {
  public:
    using NodeId = int32_t;

    struct Node {
        Op op = Op::kInput;
        std::array<NodeId, 2> in{-1, -1};
        ArrayT<T> val;
        ArrayT<T> grad;  // allocated during backward
        int stride = 1, pad = 0, out_pad = 0, axis = 0;
        T eps{};
        Bcast bcast = Bcast::kSame;
        std::string name;  // params only
    };

    NodeId param(std::string name, ArrayT<T> init) {
        if (frozen_) throw std::logic_error("graph: params must be registered before the first tape");
        Node n;
        n.op = Op::kParam;
        n.val = std::move(init);
        n.name = std::move(name);
        nodes_.push_back(std::move(n));
        NodeId id = static_cast<NodeId>(nodes_.size() - 1);
        param_ids_.push_back(id);
        return id;
    }

    NodeId input(ArrayT<T> v) {
        Node n;
        n.op = Op::kInput;
        n.val = std::move(v);
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    // Marks the persistent prefix and clears any leftover tape.
    void start_tape() {
        frozen_ = true;
        nodes_.resize(param_ids_.size());
        for (auto& n : nodes_) n.grad = ArrayT<T>{};
    }

    const std::vector<NodeId>& param_ids() const { return param_ids_; }

    const ArrayT<T>& val(NodeId id) const { return nodes_[static_cast<size_t>(id)].val; }

    ArrayT<T>& param_value(NodeId id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.op != Op::kParam) throw std::invalid_argument("graph: not a parameter node");
        return n.val;
    }

    const std::string& param_name(NodeId id) const { return nodes_[static_cast<size_t>(id)].name; }

    const ArrayT<T>& grad(NodeId id) const {
        const Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.data.empty()) throw std::logic_error("graph: gradient not computed for node");
        return n.grad;
    }

    bool has_grad(NodeId id) const { return !nodes_[static_cast<size_t>(id)].grad.data.empty(); }

    // ------------------------------------------------------------------
    // operators
    // ------------------------------------------------------------------

    NodeId matmul(NodeId a, NodeId b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
            fail_shapes(Op::kMatmul, A.shape, B.shape);
        }
        const int64_t M = A.dim(0), K = A.dim(1), N = B.dim(1);
        ArrayT<T> out({M, N});
        const T* pa = A.ptr();
        const T* pb = B.ptr();
        T* pc = out.ptr();
        maybe_parallel(M, M * K * N, [&](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i) {
                T* crow = pc + i * N;
                const T* arow = pa + i * K;
                for (int64_t k = 0; k < K; ++k) {
                    const T av = arow[k];
                    const T* brow = pb + k * N;
                    for (int64_t j = 0; j < N; ++j) crow[j] += av * brow[j];
                }
            }
        });
        return push(Op::kMatmul, std::move(out), a, b);
    }

    NodeId conv1d(NodeId x, NodeId w, int stride, int pad) {
        const auto& X = val(x);
        const auto& W = val(w);
        if (X.rank() != 3 || W.rank() != 3 || X.dim(1) != W.dim(1) || stride < 1 || pad < 0) {
            fail_shapes(Op::kConv1d, X.shape, W.shape);
        }
        const int64_t B = X.dim(0), Ci = X.dim(1), L = X.dim(2);
        const int64_t Co = W.dim(0), K = W.dim(2);
        const int64_t Lo = (L + 2 * pad - K) / stride + 1;
        if (L + 2 * pad < K || Lo < 1) fail_shapes(Op::kConv1d, X.shape, W.shape);
        ArrayT<T> out({B, Co, Lo});
        conv1d_fwd(X, W, out, stride, pad);
        NodeId id = push(Op::kConv1d, std::move(out), x, w);
        nodes_.back().stride = stride;
        nodes_.back().pad = pad;
        return id;
    }

    NodeId conv1d_transpose(NodeId x, NodeId w, int stride, int pad, int out_pad = 0) {
        const auto& X = val(x);
        const auto& W = val(w);
        if (X.rank() != 3 || W.rank() != 3 || X.dim(1) != W.dim(0) || stride < 1 || pad < 0 ||
            out_pad < 0 || out_pad >= stride) {
            fail_shapes(Op::kConv1dTranspose, X.shape, W.shape);
        }
        const int64_t B = X.dim(0), Ci = X.dim(1), L = X.dim(2);
        const int64_t Co = W.dim(1), K = W.dim(2);
        const int64_t Lo = (L - 1) * stride - 2 * pad + K + out_pad;
        if (Lo < 1) fail_shapes(Op::kConv1dTranspose, X.shape, W.shape);
        ArrayT<T> out({B, Co, Lo});
        convt_fwd(X, W, out, stride, pad);
        NodeId id = push(Op::kConv1dTranspose, std::move(out), x, w);
        nodes_.back().stride = stride;
        nodes_.back().pad = pad;
        nodes_.back().out_pad = out_pad;
        return id;
    }

    NodeId add(NodeId a, NodeId b) { return binary(Op::kAdd, a, b); }
    NodeId mul(NodeId a, NodeId b) { return binary(Op::kMul, a, b); }

    NodeId relu(NodeId x) {
        ArrayT<T> out = val(x);
        for (auto& v : out.data) v = v > T(0) ? v : T(0);
        return push(Op::kRelu, std::move(out), x);
    }

    NodeId gelu(NodeId x) {
        ArrayT<T> out = val(x);
        for (auto& v : out.data) {
            v = T(0.5) * v * (T(1) + std::erf(v * T(0.70710678118654752440)));
        }
        return push(Op::kGelu, std::move(out), x);
    }

    NodeId tanh_(NodeId x) {
        ArrayT<T> out = val(x);
        for (auto& v : out.data) v = std::tanh(v);
        return push(Op::kTanh, std::move(out), x);
    }

    // Normalizes the trailing axis; gain/bias have that axis's length.
    NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, T eps = T(1e-5)) {
        const auto& X = val(x);
        const auto& G = val(gain);
        const auto& Bb = val(bias);
        if (X.rank() < 2) fail_shapes(Op::kLayerNorm, X.shape, G.shape);
        const int64_t D = X.shape.back();
        if (G.numel() != D || Bb.numel() != D) fail_shapes(Op::kLayerNorm, X.shape, G.shape);
        const int64_t rows = X.numel() / D;
        ArrayT<T> out(X.shape);
        const T* px = X.ptr();
        const T* pg = G.ptr();
        const T* pb = Bb.ptr();
        T* po = out.ptr();
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = px + r * D;
            T* yr = po + r * D;
            T mu = 0;
            for (int64_t i = 0; i < D; ++i) mu += xr[i];
            mu /= T(D);
            T var = 0;
            for (int64_t i = 0; i < D; ++i) var += (xr[i] - mu) * (xr[i] - mu);
            var /= T(D);
            const T inv = T(1) / std::sqrt(var + eps);
            for (int64_t i = 0; i < D; ++i) yr[i] = (xr[i] - mu) * inv * pg[i] + pb[i];
        }
        NodeId id = push(Op::kLayerNorm, std::move(out), x, gain);
        nodes_.back().eps = eps;
        nodes_.back().axis = static_cast<int>(bias);  // third operand stashed in axis
        return id;
    }

    NodeId mean_pool(NodeId x, int axis) {
        const auto& X = val(x);
        if (axis < 0 || axis >= X.rank()) fail_shapes(Op::kMeanPool, X.shape, {});
        std::vector<int64_t> oshape;
        for (int i = 0; i < X.rank(); ++i) {
            if (i != axis) oshape.push_back(X.dim(i));
        }
        if (oshape.empty()) oshape.push_back(1);
        ArrayT<T> out(oshape);
        int64_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= X.dim(i);
        for (int i = axis + 1; i < X.rank(); ++i) inner *= X.dim(i);
        const int64_t n = X.dim(axis);
        const T* px = X.ptr();
        T* po = out.ptr();
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t a = 0; a < n; ++a) {
                const T* src = px + (o * n + a) * inner;
                T* dst = po + o * inner;
                for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
        }
        const T scale = T(1) / T(n);
        for (auto& v : out.data) v *= scale;
        NodeId id = push(Op::kMeanPool, std::move(out), x);
        nodes_.back().axis = axis;
        return id;
    }

    NodeId reshape(NodeId x, std::vector<int64_t> new_shape) {
        const auto& X = val(x);
        if (ArrayT<T>::numel_of(new_shape) != X.numel()) fail_shapes(Op::kReshape, X.shape, new_shape);
        ArrayT<T> out(std::move(new_shape), X.data);
        return push(Op::kReshape, std::move(out), x);
    }

    NodeId mse(NodeId a, NodeId b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (!A.same_shape(B)) fail_shapes(Op::kMse, A.shape, B.shape);
        T acc = 0;
        for (int64_t i = 0; i < A.numel(); ++i) {
            const T d = A.data[static_cast<size_t>(i)] - B.data[static_cast<size_t>(i)];
            acc += d * d;
        }
        acc /= T(A.numel());
        return push(Op::kMse, ArrayT<T>::scalar(acc), a, b);
    }

    // logits (B, C), labels (B) holding integral class indices
    NodeId softmax_cross_entropy(NodeId logits, NodeId labels) {
        const auto& X = val(logits);
        const auto& Y = val(labels);
        if (X.rank() != 2 || Y.rank() != 1 || Y.dim(0) != X.dim(0)) {
            fail_shapes(Op::kSoftmaxCrossEntropy, X.shape, Y.shape);
        }
        const int64_t B = X.dim(0), C = X.dim(1);
        T acc = 0;
        for (int64_t i = 0; i < B; ++i) {
            const T* row = X.ptr() + i * C;
            const int64_t y = static_cast<int64_t>(Y.data[static_cast<size_t>(i)]);
            if (y < 0 || y >= C) {
                throw std::invalid_argument("softmax_cross_entropy: label out of range");
            }
            T m = row[0];
            for (int64_t j = 1; j < C; ++j) m = std::max(m, row[j]);
            T lse = 0;
            for (int64_t j = 0; j < C; ++j) lse += std::exp(row[j] - m);
            acc += m + std::log(lse) - row[y];
        }
        acc /= T(B);
        return push(Op::kSoftmaxCrossEntropy, ArrayT<T>::scalar(acc), logits, labels);
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    void backward(NodeId loss) {
        Node& ln = nodes_[static_cast<size_t>(loss)];
        if (ln.val.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
        for (auto& n : nodes_) n.grad = ArrayT<T>{};
        ln.grad = ArrayT<T>::scalar(T(1));
        for (NodeId id = loss; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.grad.data.empty()) continue;
            dispatch_backward(id, n);
        }
    }

    // Smallest |pre-activation| over all relu nodes in the current tape;
    // audits use it to stay away from the kink.
    T relu_min_abs_input() const {
        T best = std::numeric_limits<T>::infinity();
        for (const auto& n : nodes_) {
            if (n.op != Op::kRelu) continue;
            const auto& x = nodes_[static_cast<size_t>(n.in[0])].val;
            for (const T v : x.data) best = std::min(best, std::abs(v));
        }
        return best;
    }

    bool all_finite(NodeId id) const {
        for (const T v : val(id).data) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    size_t tape_size() const { return nodes_.size(); }

  private:
    std::vector<Node> nodes_;
    std::vector<NodeId> param_ids_;
    bool frozen_ = false;

    NodeId push(Op op, ArrayT<T> out, NodeId a, NodeId b = -1) {
        Node n;
        n.op = op;
        n.val = std::move(out);
        n.in = {a, b};
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    [[noreturn]] void fail_shapes(Op op, const std::vector<int64_t>& a,
                                  const std::vector<int64_t>& b) const {
        throw std::invalid_argument(std::string(op_name(op)) + ": invalid shapes " + shape_str(a) +
                                    " and " + shape_str(b));
    }

    ArrayT<T>& grad_buf(NodeId id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.data.empty()) n.grad = ArrayT<T>(n.val.shape);
        return n.grad;
    }

    static void maybe_parallel(int64_t n, int64_t work, const std::function<void(int64_t, int64_t)>& body) {
        if (work >= 1 << 15) {
            parallel_for(n, body);
        } else {
            body(0, n);
        }
    }

    // --- binary broadcast resolution -----------------------------------

    Bcast resolve_bcast(Op op, const ArrayT<T>& A, const ArrayT<T>& B) const {
        if (A.same_shape(B)) return Bcast::kSame;
        if (B.numel() == 1) return Bcast::kScalarB;
        if (A.numel() == 1) return Bcast::kScalarA;
        if (B.rank() == 1 && A.rank() >= 2 && B.dim(0) == A.dim(1)) return Bcast::kAxis1Vec;
        if (op == Op::kAdd && A.rank() == 3 && B.rank() == 2 && B.dim(0) == A.dim(0) &&
            B.dim(1) == A.dim(1)) {
            return Bcast::kChanMat;
        }
        fail_shapes(op, A.shape, B.shape);
    }

    NodeId binary(Op op, NodeId a, NodeId b) {
        const auto& A = val(a);
        const auto& B = val(b);
        const Bcast bc = resolve_bcast(op, A, B);
        const bool is_add = op == Op::kAdd;
        ArrayT<T> out = bc == Bcast::kScalarA ? B : A;
        switch (bc) {
            case Bcast::kSame:
                for (int64_t i = 0; i < out.numel(); ++i) {
                    const size_t s = static_cast<size_t>(i);
                    out.data[s] = is_add ? A.data[s] + B.data[s] : A.data[s] * B.data[s];
                }
                break;
            case Bcast::kScalarB: {
                const T s = B.data[0];
                for (auto& v : out.data) v = is_add ? v + s : v * s;
                break;
            }
            case Bcast::kScalarA: {
                const T s = A.data[0];
                for (auto& v : out.data) v = is_add ? s + v : s * v;
                break;
            }
            case Bcast::kAxis1Vec: {
                const int64_t C = A.dim(1);
                const int64_t outer = A.dim(0);
                const int64_t inner = A.numel() / (outer * C);
                T* po = out.ptr();
                for (int64_t o = 0; o < outer; ++o) {
                    for (int64_t c = 0; c < C; ++c) {
                        const T bv = B.data[static_cast<size_t>(c)];
                        T* row = po + (o * C + c) * inner;
                        for (int64_t i = 0; i < inner; ++i) {
                            row[i] = is_add ? row[i] + bv : row[i] * bv;
                        }
                    }
                }
                break;
            }
            case Bcast::kChanMat: {
                const int64_t Bn = A.dim(0), C = A.dim(1), L = A.dim(2);
                T* po = out.ptr();
                for (int64_t bi = 0; bi < Bn; ++bi) {
                    for (int64_t c = 0; c < C; ++c) {
                        const T bv = B.data[static_cast<size_t>(bi * C + c)];
                        T* row = po + (bi * C + c) * L;
                        for (int64_t i = 0; i < L; ++i) row[i] += bv;
                    }
                }
                break;
            }
        }
        NodeId id = push(op, std::move(out), a, b);
        nodes_.back().bcast = bc;
        return id;
    }

    // --- conv kernels ---------------------------------------------------

    void conv1d_fwd(const ArrayT<T>& X, const ArrayT<T>& W, ArrayT<T>& Y, int stride, int pad) {
        const int64_t B = X.dim(0), Ci = X.dim(1), L = X.dim(2);
        const int64_t Co = W.dim(0), K = W.dim(2), Lo = Y.dim(2);
        const T* px = X.ptr();
        const T* pw = W.ptr();
        T* py = Y.ptr();
        maybe_parallel(B * Co, B * Co * Ci * K * Lo, [&](int64_t lo_i, int64_t hi_i) {
            for (int64_t bc = lo_i; bc < hi_i; ++bc) {
                const int64_t b = bc / Co, co = bc % Co;
                T* yrow = py + (b * Co + co) * Lo;
                for (int64_t ci = 0; ci < Ci; ++ci) {
                    const T* xrow = px + (b * Ci + ci) * L;
                    const T* wrow = pw + (co * Ci + ci) * K;
                    for (int64_t k = 0; k < K; ++k) {
                        const T wv = wrow[k];
                        if (wv == T(0)) continue;
                        const int64_t off = k - pad;
                        if (stride == 1) {
                            const int64_t o0 = std::max<int64_t>(0, -off);
                            const int64_t o1 = std::min<int64_t>(Lo, L - off);
                            const T* xs = xrow + o0 + off;
                            T* ys = yrow + o0;
                            for (int64_t o = 0; o < o1 - o0; ++o) ys[o] += wv * xs[o];
                        } else {
                            for (int64_t o = 0; o < Lo; ++o) {
                                const int64_t i = o * stride + off;
                                if (i >= 0 && i < L) yrow[o] += wv * xrow[i];
                            }
                        }
                    }
                }
            }
        });
    }

    void conv1d_bwd(const Node& n) {
        const auto& X = nodes_[static_cast<size_t>(n.in[0])].val;
        const auto& W = nodes_[static_cast<size_t>(n.in[1])].val;
        const auto& dY = n.grad;
        const int stride = n.stride, pad = n.pad;
        const int64_t B = X.dim(0), Ci = X.dim(1), L = X.dim(2);
        const int64_t Co = W.dim(0), K = W.dim(2), Lo = dY.dim(2);

        ArrayT<T>& dX = grad_buf(n.in[0]);
        const T* pw = W.ptr();
        const T* pdy = dY.ptr();
        T* pdx = dX.ptr();
        maybe_parallel(B * Ci, B * Ci * Co * K * Lo, [&](int64_t lo_i, int64_t hi_i) {
            for (int64_t bc = lo_i; bc < hi_i; ++bc) {
                const int64_t b = bc / Ci, ci = bc % Ci;
                T* dxrow = pdx + (b * Ci + ci) * L;
                for (int64_t co = 0; co < Co; ++co) {
                    const T* dyrow = pdy + (b * Co + co) * Lo;
                    const T* wrow = pw + (co * Ci + ci) * K;
                    for (int64_t k = 0; k < K; ++k) {
                        const T wv = wrow[k];
                        if (wv == T(0)) continue;
                        const int64_t off = k - pad;
                        if (stride == 1) {
                            const int64_t o0 = std::max<int64_t>(0, -off);
                            const int64_t o1 = std::min<int64_t>(Lo, L - off);
                            T* dxs = dxrow + o0 + off;
                            const T* dys = dyrow + o0;
                            for (int64_t o = 0; o < o1 - o0; ++o) dxs[o] += wv * dys[o];
                        } else {
                            for (int64_t o = 0; o < Lo; ++o) {
                                const int64_t i = o * stride + off;
                                if (i >= 0 && i < L) dxrow[i] += wv * dyrow[o];
                            }
                        }
                    }
                }
            }
        });

        ArrayT<T>& dW = grad_buf(n.in[1]);
        const T* px = X.ptr();
        T* pdw = dW.ptr();
        maybe_parallel(Co, B * Ci * Co * K * Lo, [&](int64_t lo_i, int64_t hi_i) {
            for (int64_t co = lo_i; co < hi_i; ++co) {
                for (int64_t b = 0; b < B; ++b) {
                    const T* dyrow = pdy + (b * Co + co) * Lo;
                    for (int64_t ci = 0; ci < Ci; ++ci) {
                        const T* xrow = px + (b * Ci + ci) * L;
                        T* dwrow = pdw + (co * Ci + ci) * K;
                        for (int64_t k = 0; k < K; ++k) {
                            const int64_t off = k - pad;
                            T acc = 0;
                            if (stride == 1) {
                                const int64_t o0 = std::max<int64_t>(0, -off);
                                const int64_t o1 = std::min<int64_t>(Lo, L - off);
                                const T* xs = xrow + o0 + off;
                                const T* dys = dyrow + o0;
                                for (int64_t o = 0; o < o1 - o0; ++o) acc += xs[o] * dys[o];
                            } else {
                                for (int64_t o = 0; o < Lo; ++o) {
                                    const int64_t i = o * stride + off;
                                    if (i >= 0 && i < L) acc += xrow[i] * dyrow[o];
                                }
                            }
                            dwrow[k] += acc;
                        }
                    }
                }
            }
        });
    }

    void convt_fwd(const ArrayT<T>& X, const ArrayT<T>& W, ArrayT<T>& Y, int stride, int pad) {
        const int64_t B = X.dim(0), Ci = X.dim(1), L = X.dim(2);
        const int64_t Co = W.dim(1), K = W.dim(2), Lo = Y.dim(2);
        const T* px = X.ptr();
        const T* pw = W.ptr();
        T* py = Y.ptr();
        maybe_parallel(B * Co, B * Co * Ci * K * L, [&](int64_t lo_i, int64_t hi_i) {
            for (int64_t bc = lo_i; bc < hi_i; ++bc) {
                const int64_t b = bc / Co, co = bc % Co;
                T* yrow = py + (b * Co + co) * Lo;
                for (int64_t ci = 0; ci < Ci; ++ci) {
                    const T* xrow = px + (b * Ci + ci) * L;
                    const T* wrow = pw + (ci * Co + co) * K;
                    for (int64_t k = 0; k < K; ++k) {
                        const T wv = wrow[k];
                        if (wv == T(0)) continue;
                        const int64_t off = k - pad;
                        for (int64_t l = 0; l < L; ++l) {
                            const int64_t j = l * stride + off;
                            if (j >= 0 && j < Lo) yrow[j] += wv * xrow[l];
                        }
                    }
                }
            }
        });
    }

    void convt_bwd(const Node& n) {
        const auto& X = nodes_[static_cast<size_t>(n.in[0])].val;
        const auto& W = nodes_[static_cast<size_t>(n.in[1])].val;
        const auto& dY = n.grad;
        const int stride = n.stride, pad = n.pad;
        const int64_t B = X.dim(0), Ci = X.dim(1), L = X.dim(2);
        const int64_t Co = W.dim(1), K = W.dim(2), Lo = dY.dim(2);

        ArrayT<T>& dX = grad_buf(n.in[0]);
        const T* pw = W.ptr();
        const T* pdy = dY.ptr();
        T* pdx = dX.ptr();
        maybe_parallel(B * Ci, B * Ci * Co * K * L, [&](int64_t lo_i, int64_t hi_i) {
            for (int64_t bc = lo_i; bc < hi_i; ++bc) {
                const int64_t b = bc / Ci, ci = bc % Ci;
                T* dxrow = pdx + (b * Ci + ci) * L;
                for (int64_t co = 0; co < Co; ++co) {
                    const T* dyrow = pdy + (b * Co + co) * Lo;
                    const T* wrow = pw + (ci * Co + co) * K;
                    for (int64_t k = 0; k < K; ++k) {
                        const T wv = wrow[k];
                        if (wv == T(0)) continue;
                        const int64_t off = k - pad;
                        for (int64_t l = 0; l < L; ++l) {
                            const int64_t j = l * stride + off;
                            if (j >= 0 && j < Lo) dxrow[l] += wv * dyrow[j];
                        }
                    }
                }
            }
        });

        ArrayT<T>& dW = grad_buf(n.in[1]);
        const T* px = X.ptr();
        T* pdw = dW.ptr();
        maybe_parallel(Ci * Co, B * Ci * Co * K * L, [&](int64_t lo_i, int64_t hi_i) {
            for (int64_t cc = lo_i; cc < hi_i; ++cc) {
                const int64_t ci = cc / Co, co = cc % Co;
                T* dwrow = pdw + (ci * Co + co) * K;
                for (int64_t b = 0; b < B; ++b) {
                    const T* xrow = px + (b * Ci + ci) * L;
                    const T* dyrow = pdy + (b * Co + co) * Lo;
                    for (int64_t k = 0; k < K; ++k) {
                        const int64_t off = k - pad;
                        T acc = 0;
                        for (int64_t l = 0; l < L; ++l) {
                            const int64_t j = l * stride + off;
                            if (j >= 0 && j < Lo) acc += xrow[l] * dyrow[j];
                        }
                        dwrow[k] += acc;
                    }
                }
            }
        });
    }

    // --- backward dispatch ----------------------------------------------

    void dispatch_backward(NodeId id, Node& n) {
        switch (n.op) {
            case Op::kParam:
            case Op::kInput:
                return;
            case Op::kMatmul: {
                const auto& A = nodes_[static_cast<size_t>(n.in[0])].val;
                const auto& B = nodes_[static_cast<size_t>(n.in[1])].val;
                const auto& dC = n.grad;
                const int64_t M = A.dim(0), K = A.dim(1), N = B.dim(1);
                ArrayT<T>& dA = grad_buf(n.in[0]);
                const T* pb = B.ptr();
                const T* pdc = dC.ptr();
                T* pda = dA.ptr();
                maybe_parallel(M, M * K * N, [&](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i) {
                        const T* dcrow = pdc + i * N;
                        T* darow = pda + i * K;
                        for (int64_t k = 0; k < K; ++k) {
                            const T* brow = pb + k * N;
                            T acc = 0;
                            for (int64_t j = 0; j < N; ++j) acc += dcrow[j] * brow[j];
                            darow[k] += acc;
                        }
                    }
                });
                ArrayT<T>& dB = grad_buf(n.in[1]);
                const T* pa = A.ptr();
                T* pdb = dB.ptr();
                maybe_parallel(K, M * K * N, [&](int64_t lo, int64_t hi) {
                    for (int64_t k = lo; k < hi; ++k) {
                        T* dbrow = pdb + k * N;
                        for (int64_t i = 0; i < M; ++i) {
                            const T av = pa[i * K + k];
                            if (av == T(0)) continue;
                            const T* dcrow = pdc + i * N;
                            for (int64_t j = 0; j < N; ++j) dbrow[j] += av * dcrow[j];
                        }
                    }
                });
                return;
            }
            case Op::kConv1d:
                conv1d_bwd(n);
                return;
            case Op::kConv1dTranspose:
                convt_bwd(n);
                return;
            case Op::kAdd:
                bcast_backward(n, true);
                return;
            case Op::kMul:
                bcast_backward(n, false);
                return;
            case Op::kRelu: {
                const auto& X = nodes_[static_cast<size_t>(n.in[0])].val;
                ArrayT<T>& dX = grad_buf(n.in[0]);
                for (int64_t i = 0; i < X.numel(); ++i) {
                    const size_t s = static_cast<size_t>(i);
                    if (X.data[s] > T(0)) dX.data[s] += n.grad.data[s];
                }
                return;
            }
            case Op::kGelu: {
                const auto& X = nodes_[static_cast<size_t>(n.in[0])].val;
                ArrayT<T>& dX = grad_buf(n.in[0]);
                constexpr T kInvSqrt2 = T(0.70710678118654752440);
                constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
                for (int64_t i = 0; i < X.numel(); ++i) {
                    const size_t s = static_cast<size_t>(i);
                    const T x = X.data[s];
                    const T cdf = T(0.5) * (T(1) + std::erf(x * kInvSqrt2));
                    const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * x * x);
                    dX.data[s] += n.grad.data[s] * (cdf + x * pdf);
                }
                return;
            }
            case Op::kTanh: {
                const auto& Y = n.val;
                ArrayT<T>& dX = grad_buf(n.in[0]);
                for (int64_t i = 0; i < Y.numel(); ++i) {
                    const size_t s = static_cast<size_t>(i);
                    dX.data[s] += n.grad.data[s] * (T(1) - Y.data[s] * Y.data[s]);
                }
                return;
            }
            case Op::kLayerNorm: {
                const NodeId bias_id = static_cast<NodeId>(n.axis);
                const auto& X = nodes_[static_cast<size_t>(n.in[0])].val;
                const auto& G = nodes_[static_cast<size_t>(n.in[1])].val;
                const int64_t D = X.shape.back();
                const int64_t rows = X.numel() / D;
                ArrayT<T>& dX = grad_buf(n.in[0]);
                ArrayT<T>& dG = grad_buf(n.in[1]);
                ArrayT<T>& dB = grad_buf(bias_id);
                for (int64_t r = 0; r < rows; ++r) {
                    const T* xr = X.ptr() + r * D;
                    const T* dyr = n.grad.ptr() + r * D;
                    T* dxr = dX.ptr() + r * D;
                    T mu = 0;
                    for (int64_t i = 0; i < D; ++i) mu += xr[i];
                    mu /= T(D);
                    T var = 0;
                    for (int64_t i = 0; i < D; ++i) var += (xr[i] - mu) * (xr[i] - mu);
                    var /= T(D);
                    const T inv = T(1) / std::sqrt(var + n.eps);
                    T sum_dxhat = 0, sum_dxhat_xhat = 0;
                    for (int64_t i = 0; i < D; ++i) {
                        const T xhat = (xr[i] - mu) * inv;
                        const T dxhat = dyr[i] * G.data[static_cast<size_t>(i)];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dG.data[static_cast<size_t>(i)] += dyr[i] * xhat;
                        dB.data[static_cast<size_t>(i)] += dyr[i];
                    }
                    for (int64_t i = 0; i < D; ++i) {
                        const T xhat = (xr[i] - mu) * inv;
                        const T dxhat = dyr[i] * G.data[static_cast<size_t>(i)];
                        dxr[i] += inv * (dxhat - sum_dxhat / T(D) - xhat * sum_dxhat_xhat / T(D));
                    }
                }
                return;
            }
            case Op::kMeanPool: {
                const auto& X = nodes_[static_cast<size_t>(n.in[0])].val;
                ArrayT<T>& dX = grad_buf(n.in[0]);
                const int axis = n.axis;
                int64_t outer = 1, inner = 1;
                for (int i = 0; i < axis; ++i) outer *= X.dim(i);
                for (int i = axis + 1; i < X.rank(); ++i) inner *= X.dim(i);
                const int64_t cnt = X.dim(axis);
                const T scale = T(1) / T(cnt);
                for (int64_t o = 0; o < outer; ++o) {
                    const T* gsrc = n.grad.ptr() + o * inner;
                    for (int64_t a = 0; a < cnt; ++a) {
                        T* dst = dX.ptr() + (o * cnt + a) * inner;
                        for (int64_t i = 0; i < inner; ++i) dst[i] += gsrc[i] * scale;
                    }
                }
                return;
            }
            case Op::kReshape: {
                ArrayT<T>& dX = grad_buf(n.in[0]);
                for (int64_t i = 0; i < dX.numel(); ++i) {
                    dX.data[static_cast<size_t>(i)] += n.grad.data[static_cast<size_t>(i)];
                }
                return;
            }
            case Op::kMse: {
                const auto& A = nodes_[static_cast<size_t>(n.in[0])].val;
                const auto& B = nodes_[static_cast<size_t>(n.in[1])].val;
                const T g = n.grad.data[0] * T(2) / T(A.numel());
                ArrayT<T>& dA = grad_buf(n.in[0]);
                ArrayT<T>& dB = grad_buf(n.in[1]);
                for (int64_t i = 0; i < A.numel(); ++i) {
                    const size_t s = static_cast<size_t>(i);
                    const T d = g * (A.data[s] - B.data[s]);
                    dA.data[s] += d;
                    dB.data[s] -= d;
                }
                return;
            }
            case Op::kSoftmaxCrossEntropy: {
                const auto& X = nodes_[static_cast<size_t>(n.in[0])].val;
                const auto& Y = nodes_[static_cast<size_t>(n.in[1])].val;
                const int64_t B = X.dim(0), C = X.dim(1);
                const T g = n.grad.data[0] / T(B);
                ArrayT<T>& dX = grad_buf(n.in[0]);
                for (int64_t i = 0; i < B; ++i) {
                    const T* row = X.ptr() + i * C;
                    T* drow = dX.ptr() + i * C;
                    const int64_t y = static_cast<int64_t>(Y.data[static_cast<size_t>(i)]);
                    T m = row[0];
                    for (int64_t j = 1; j < C; ++j) m = std::max(m, row[j]);
                    T z = 0;
                    for (int64_t j = 0; j < C; ++j) z += std::exp(row[j] - m);
                    for (int64_t j = 0; j < C; ++j) {
                        const T p = std::exp(row[j] - m) / z;
                        drow[j] += g * (p - (j == y ? T(1) : T(0)));
                    }
                }
                return;
            }
        }
    }

    void bcast_backward(Node& n, bool is_add) {
        const auto& A = nodes_[static_cast<size_t>(n.in[0])].val;
        const auto& B = nodes_[static_cast<size_t>(n.in[1])].val;
        const auto& dY = n.grad;
        ArrayT<T>& dA = grad_buf(n.in[0]);
        ArrayT<T>& dB = grad_buf(n.in[1]);
        switch (n.bcast) {
            case Bcast::kSame:
                for (int64_t i = 0; i < dY.numel(); ++i) {
                    const size_t s = static_cast<size_t>(i);
                    if (is_add) {
                        dA.data[s] += dY.data[s];
                        dB.data[s] += dY.data[s];
                    } else {
                        dA.data[s] += dY.data[s] * B.data[s];
                        dB.data[s] += dY.data[s] * A.data[s];
                    }
                }
                break;
            case Bcast::kScalarB: {
                T acc = 0;
                for (int64_t i = 0; i < dY.numel(); ++i) {
                    const size_t s = static_cast<size_t>(i);
                    if (is_add) {
                        dA.data[s] += dY.data[s];
                        acc += dY.data[s];
                    } else {
                        dA.data[s] += dY.data[s] * B.data[0];
                        acc += dY.data[s] * A.data[s];
                    }
                }
                dB.data[0] += acc;
                break;
            }
            case Bcast::kScalarA: {
                T acc = 0;
                for (int64_t i = 0; i < dY.numel(); ++i) {
                    const size_t s = static_cast<size_t>(i);
                    if (is_add) {
                        dB.data[s] += dY.data[s];
                        acc += dY.data[s];
                    } else {
                        dB.data[s] += dY.data[s] * A.data[0];
                        acc += dY.data[s] * B.data[s];
                    }
                }
                dA.data[0] += acc;
                break;
            }
            case Bcast::kAxis1Vec: {
                const int64_t C = A.dim(1);
                const int64_t outer = A.dim(0);
                const int64_t inner = A.numel() / (outer * C);
                for (int64_t o = 0; o < outer; ++o) {
                    for (int64_t c = 0; c < C; ++c) {
                        const int64_t base = (o * C + c) * inner;
                        T acc = 0;
                        for (int64_t i = 0; i < inner; ++i) {
                            const size_t s = static_cast<size_t>(base + i);
                            if (is_add) {
                                dA.data[s] += dY.data[s];
                                acc += dY.data[s];
                            } else {
                                dA.data[s] += dY.data[s] * B.data[static_cast<size_t>(c)];
                                acc += dY.data[s] * A.data[s];
                            }
                        }
                        dB.data[static_cast<size_t>(c)] += acc;
                    }
                }
                break;
            }
            case Bcast::kChanMat: {
                const int64_t Bn = A.dim(0), C = A.dim(1), L = A.dim(2);
                for (int64_t bi = 0; bi < Bn; ++bi) {
                    for (int64_t c = 0; c < C; ++c) {
                        const int64_t base = (bi * C + c) * L;
                        T acc = 0;
                        for (int64_t i = 0; i < L; ++i) {
                            const size_t s = static_cast<size_t>(base + i);
                            dA.data[s] += dY.data[s];
                            acc += dY.data[s];
                        }
                        dB.data[static_cast<size_t>(bi * C + c)] += acc;
                    }
                }
                break;
            }
        }
    }
};

using Graph = GraphT<float>;
using GraphD = GraphT<double>;
using NodeId = Graph::NodeId;

}  // namespace cpdiff
