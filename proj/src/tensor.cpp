#include "vstain/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "vstain/errors.hpp"

namespace vstain {

Tensor::Tensor(std::vector<int> s, float fill) : shape(std::move(s)) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ContractError("tensor dims must be positive");
        n *= d;
    }
    data.assign(static_cast<std::size_t>(n), fill);
}

Tensor Tensor::scalar(float v) {
    Tensor t;
    t.data.assign(1, v);
    return t;
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(data.size()); }

bool Tensor::all_finite() const {
    for (float v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

int Tensor::dim(int i) const {
    if (i < 0) i += rank();
    if (i < 0 || i >= rank()) throw ContractError("tensor dim index out of range");
    return shape[static_cast<std::size_t>(i)];
}

namespace ad {

namespace {

constexpr int kMaxRank = 4;

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

std::vector<int> pad_shape(const std::vector<int>& s, int rank) {
    std::vector<int> out(static_cast<std::size_t>(rank), 1);
    int off = rank - static_cast<int>(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) out[static_cast<std::size_t>(off) + i] = s[i];
    return out;
}

std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b) {
    int rank = std::max(static_cast<int>(a.size()), static_cast<int>(b.size()));
    if (rank > kMaxRank) throw ContractError("tensor rank exceeds 4");
    auto pa = pad_shape(a, rank), pb = pad_shape(b, rank);
    std::vector<int> out(static_cast<std::size_t>(rank));
    for (int i = 0; i < rank; ++i) {
        int da = pa[static_cast<std::size_t>(i)], db = pb[static_cast<std::size_t>(i)];
        if (da != db && da != 1 && db != 1)
            throw ContractError("tensor shapes are not broadcastable");
        out[static_cast<std::size_t>(i)] = std::max(da, db);
    }
    return out;
}

std::array<std::int64_t, kMaxRank> strides_for(const std::vector<int>& padded,
                                               const std::vector<int>& out) {
    std::array<std::int64_t, kMaxRank> st{};
    std::int64_t acc = 1;
    int rank = static_cast<int>(out.size());
    for (int i = rank - 1; i >= 0; --i) {
        std::size_t ui = static_cast<std::size_t>(i);
        st[ui] = (padded[ui] == 1 && out[ui] != 1) ? 0 : acc;
        acc *= padded[ui];
    }
    return st;
}

/// Apply f over the broadcast of a and b into a fresh tensor.
template <class F>
Tensor broadcast_apply(const Tensor& a, const Tensor& b, F&& f) {
    auto os = broadcast_shape(a.shape, b.shape);
    Tensor out(os);
    if (a.shape == b.shape) {  // fast path
        for (std::int64_t i = 0; i < out.numel(); ++i) out.at(i) = f(a.at(i), b.at(i));
        return out;
    }
    int rank = static_cast<int>(os.size());
    auto sa = strides_for(pad_shape(a.shape, rank), os);
    auto sb = strides_for(pad_shape(b.shape, rank), os);
    std::array<int, kMaxRank> idx{};
    std::array<int, kMaxRank> dims{};
    for (int i = 0; i < rank; ++i) dims[static_cast<std::size_t>(i)] = os[static_cast<std::size_t>(i)];
    std::int64_t ia = 0, ib = 0;
    for (std::int64_t o = 0; o < out.numel(); ++o) {
        out.at(o) = f(a.at(ia), b.at(ib));
        for (int d = rank - 1; d >= 0; --d) {
            std::size_t ud = static_cast<std::size_t>(d);
            if (++idx[ud] < dims[ud]) {
                ia += sa[ud];
                ib += sb[ud];
                break;
            }
            idx[ud] = 0;
            ia -= sa[ud] * (dims[ud] - 1);
            ib -= sb[ud] * (dims[ud] - 1);
        }
    }
    return out;
}

/// Sum g down to `shape` (inverse of broadcasting) for gradient accumulation.
Tensor reduce_to_shape(const Tensor& g, const std::vector<int>& shape) {
    if (g.shape == shape) return g;
    int rank = static_cast<int>(g.shape.size());
    auto padded = pad_shape(shape, rank);
    Tensor out(padded.empty() ? std::vector<int>{} : padded, 0.0f);
    if (out.data.empty()) out.data.assign(1, 0.0f);
    auto st = strides_for(padded, g.shape);
    std::array<int, kMaxRank> idx{};
    std::array<int, kMaxRank> dims{};
    for (int i = 0; i < rank; ++i) dims[static_cast<std::size_t>(i)] = g.shape[static_cast<std::size_t>(i)];
    std::int64_t io = 0;
    for (std::int64_t ig = 0; ig < g.numel(); ++ig) {
        out.at(io) += g.at(ig);
        for (int d = rank - 1; d >= 0; --d) {
            std::size_t ud = static_cast<std::size_t>(d);
            if (++idx[ud] < dims[ud]) {
                io += st[ud];
                break;
            }
            idx[ud] = 0;
            io -= st[ud] * (dims[ud] - 1);
        }
    }
    out.shape = shape;
    return out;
}

NodePtr make_node(Tensor value, std::vector<NodePtr> parents,
                  std::function<void(Node&)> backward_op) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    for (const auto& p : parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward_op = std::move(backward_op);
    }
    return n;
}

template <class FWD, class DA, class DB>
NodePtr binary_op(NodePtr a, NodePtr b, FWD fwd, DA da, DB db) {
    Tensor v = broadcast_apply(a->value, b->value, fwd);
    auto bk = [a, b, da, db](Node& n) {
        if (a->requires_grad) {
            Tensor ga = broadcast_apply(a->value, b->value, da);
            for (std::int64_t i = 0; i < ga.numel(); ++i) ga.at(i) *= n.grad.at(i);
            a->accum(reduce_to_shape(ga, a->value.shape));
        }
        if (b->requires_grad) {
            Tensor gb = broadcast_apply(a->value, b->value, db);
            for (std::int64_t i = 0; i < gb.numel(); ++i) gb.at(i) *= n.grad.at(i);
            b->accum(reduce_to_shape(gb, b->value.shape));
        }
    };
    return make_node(std::move(v), {a, b}, bk);
}

template <class FWD, class BWD>
NodePtr unary_op(NodePtr a, FWD fwd, BWD dfdx_from_xy) {
    Tensor v = a->value;
    for (auto& x : v.data) x = fwd(x);
    auto vshape = v.shape;
    auto bk = [a, dfdx_from_xy](Node& n) {
        if (!a->requires_grad) return;
        Tensor g = n.grad;
        for (std::int64_t i = 0; i < g.numel(); ++i)
            g.at(i) *= dfdx_from_xy(a->value.at(i), n.value.at(i));
        a->accum(g);
    };
    return make_node(std::move(v), {a}, bk);
}

}  // namespace

void Node::accum(const Tensor& g) {
    if (grad.data.empty()) {
        grad = Tensor(value.shape.empty() ? std::vector<int>{} : value.shape, 0.0f);
        if (grad.data.empty()) grad.data.assign(value.data.size(), 0.0f);
        grad.shape = value.shape;
    }
    for (std::int64_t i = 0; i < grad.numel(); ++i) grad.at(i) += g.at(i);
}

NodePtr make_leaf(Tensor v, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return n;
}

NodePtr constant(Tensor v) { return make_leaf(std::move(v), false); }
NodePtr constant_scalar(float v) { return constant(Tensor::scalar(v)); }

NodePtr add(NodePtr a, NodePtr b) {
    return binary_op(
        std::move(a), std::move(b), [](float x, float y) { return x + y; },
        [](float, float) { return 1.0f; }, [](float, float) { return 1.0f; });
}

NodePtr sub(NodePtr a, NodePtr b) {
    return binary_op(
        std::move(a), std::move(b), [](float x, float y) { return x - y; },
        [](float, float) { return 1.0f; }, [](float, float) { return -1.0f; });
}

NodePtr mul(NodePtr a, NodePtr b) {
    return binary_op(
        std::move(a), std::move(b), [](float x, float y) { return x * y; },
        [](float, float y) { return y; }, [](float x, float) { return x; });
}

NodePtr div(NodePtr a, NodePtr b) {
    return binary_op(
        std::move(a), std::move(b), [](float x, float y) { return x / y; },
        [](float, float y) { return 1.0f / y; },
        [](float x, float y) { return -x / (y * y); });
}

NodePtr add_scalar(NodePtr a, float s) { return add(std::move(a), constant_scalar(s)); }
NodePtr mul_scalar(NodePtr a, float s) { return mul(std::move(a), constant_scalar(s)); }

NodePtr exp(NodePtr a) {
    return unary_op(std::move(a), [](float x) { return std::exp(x); },
                    [](float, float y) { return y; });
}

NodePtr log(NodePtr a) {
    return unary_op(std::move(a), [](float x) { return std::log(x); },
                    [](float x, float) { return 1.0f / x; });
}

NodePtr sqrt(NodePtr a) {
    return unary_op(std::move(a), [](float x) { return std::sqrt(x); },
                    [](float, float y) { return 0.5f / y; });
}

NodePtr square(NodePtr a) {
    return unary_op(std::move(a), [](float x) { return x * x; },
                    [](float x, float) { return 2.0f * x; });
}

NodePtr sigmoid(NodePtr a) {
    return unary_op(std::move(a),
                    [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
                    [](float, float y) { return y * (1.0f - y); });
}

NodePtr silu(NodePtr a) {
    return unary_op(std::move(a),
                    [](float x) { return x / (1.0f + std::exp(-x)); },
                    [](float x, float) {
                        float s = 1.0f / (1.0f + std::exp(-x));
                        return s * (1.0f + x * (1.0f - s));
                    });
}

NodePtr sum(NodePtr a, const std::vector<int>& axes, bool keepdim) {
    const auto& is = a->value.shape;
    int rank = static_cast<int>(is.size());
    std::vector<bool> reduce(static_cast<std::size_t>(rank), false);
    for (int ax : axes) {
        if (ax < 0) ax += rank;
        if (ax < 0 || ax >= rank) throw ContractError("reduce axis out of range");
        reduce[static_cast<std::size_t>(ax)] = true;
    }
    std::vector<int> kshape(is);  // kept-dims shape (size-1 on reduced axes)
    for (int i = 0; i < rank; ++i)
        if (reduce[static_cast<std::size_t>(i)]) kshape[static_cast<std::size_t>(i)] = 1;

    Tensor acc64_shapeholder(kshape, 0.0f);
    std::vector<double> acc(acc64_shapeholder.data.size(), 0.0);
    auto st = strides_for(kshape, is);
    std::array<int, kMaxRank> idx{};
    std::array<int, kMaxRank> dims{};
    for (int i = 0; i < rank; ++i) dims[static_cast<std::size_t>(i)] = is[static_cast<std::size_t>(i)];
    std::int64_t io = 0;
    for (std::int64_t ii = 0; ii < a->value.numel(); ++ii) {
        acc[static_cast<std::size_t>(io)] += static_cast<double>(a->value.at(ii));
        for (int d = rank - 1; d >= 0; --d) {
            std::size_t ud = static_cast<std::size_t>(d);
            if (++idx[ud] < dims[ud]) {
                io += st[ud];
                break;
            }
            idx[ud] = 0;
            io -= st[ud] * (dims[ud] - 1);
        }
    }
    Tensor out(kshape, 0.0f);
    for (std::size_t i = 0; i < acc.size(); ++i) out.data[i] = static_cast<float>(acc[i]);
    if (!keepdim) {
        std::vector<int> squeezed;
        for (int i = 0; i < rank; ++i)
            if (!reduce[static_cast<std::size_t>(i)]) squeezed.push_back(is[static_cast<std::size_t>(i)]);
        out.shape = squeezed;  // data order unchanged
    }
    auto bk = [a, kshape](Node& n) {
        if (!a->requires_grad) return;
        Tensor g = n.grad;
        g.shape = kshape;  // restore kept dims for broadcast
        Tensor expanded = broadcast_apply(Tensor(a->value.shape, 0.0f), g,
                                          [](float, float y) { return y; });
        a->accum(expanded);
    };
    return make_node(std::move(out), {a}, bk);
}

NodePtr mean(NodePtr a, const std::vector<int>& axes, bool keepdim) {
    std::int64_t count = 1;
    int rank = a->value.rank();
    for (int ax : axes) {
        int x = ax < 0 ? ax + rank : ax;
        count *= a->value.shape[static_cast<std::size_t>(x)];
    }
    return mul_scalar(sum(std::move(a), axes, keepdim), 1.0f / static_cast<float>(count));
}

NodePtr sum_all(NodePtr a) {
    std::vector<int> axes;
    for (int i = 0; i < a->value.rank(); ++i) axes.push_back(i);
    if (axes.empty()) return a;  // already scalar
    return sum(std::move(a), axes, false);
}

NodePtr mean_all(NodePtr a) {
    float inv = 1.0f / static_cast<float>(a->value.numel());
    return mul_scalar(sum_all(std::move(a)), inv);
}

NodePtr logsumexp_rows(NodePtr a) {
    if (a->value.rank() != 2) throw ContractError("logsumexp_rows expects rank-2 input");
    int rows = a->value.shape[0], cols = a->value.shape[1];
    Tensor out({rows, 1});
    Tensor softmax({rows, cols});  // cached for backward
    for (int r = 0; r < rows; ++r) {
        float m = a->value.at(static_cast<std::int64_t>(r) * cols);
        for (int c = 1; c < cols; ++c) m = std::max(m, a->value.at(static_cast<std::int64_t>(r) * cols + c));
        double s = 0.0;
        for (int c = 0; c < cols; ++c)
            s += std::exp(static_cast<double>(a->value.at(static_cast<std::int64_t>(r) * cols + c) - m));
        float lse = m + static_cast<float>(std::log(s));
        out.at(r) = lse;
        for (int c = 0; c < cols; ++c)
            softmax.at(static_cast<std::int64_t>(r) * cols + c) =
                std::exp(a->value.at(static_cast<std::int64_t>(r) * cols + c) - lse);
    }
    auto bk = [a, softmax, rows, cols](Node& n) {
        if (!a->requires_grad) return;
        Tensor g({rows, cols});
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c)
                g.at(static_cast<std::int64_t>(r) * cols + c) =
                    n.grad.at(r) * softmax.at(static_cast<std::int64_t>(r) * cols + c);
        a->accum(g);
    };
    return make_node(std::move(out), {a}, bk);
}

NodePtr matmul(NodePtr a, NodePtr b) {
    if (a->value.rank() != 2 || b->value.rank() != 2)
        throw ContractError("matmul expects rank-2 tensors");
    int m = a->value.shape[0], k = a->value.shape[1];
    int k2 = b->value.shape[0], n = b->value.shape[1];
    if (k != k2) throw ContractError("matmul inner dims mismatch");
    Tensor out({m, n});
    ECMap A(a->value.data.data(), m, k);
    ECMap B(b->value.data.data(), k, n);
    EMap(out.data.data(), m, n).noalias() = A * B;
    auto bk = [a, b, m, k, n](Node& nd) {
        ECMap G(nd.grad.data.data(), m, n);
        if (a->requires_grad) {
            Tensor ga({m, k});
            ECMap B(b->value.data.data(), k, n);
            EMap(ga.data.data(), m, k).noalias() = G * B.transpose();
            a->accum(ga);
        }
        if (b->requires_grad) {
            Tensor gb({k, n});
            ECMap A(a->value.data.data(), m, k);
            EMap(gb.data.data(), k, n).noalias() = A.transpose() * G;
            b->accum(gb);
        }
    };
    return make_node(std::move(out), {a, b}, bk);
}

NodePtr transpose(NodePtr a) {
    if (a->value.rank() != 2) throw ContractError("transpose expects rank-2 tensor");
    int r = a->value.shape[0], c = a->value.shape[1];
    Tensor out({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out.at(static_cast<std::int64_t>(j) * r + i) = a->value.at(static_cast<std::int64_t>(i) * c + j);
    auto bk = [a, r, c](Node& n) {
        if (!a->requires_grad) return;
        Tensor g({r, c});
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                g.at(static_cast<std::int64_t>(i) * c + j) = n.grad.at(static_cast<std::int64_t>(j) * r + i);
        a->accum(g);
    };
    return make_node(std::move(out), {a}, bk);
}

NodePtr reshape(NodePtr a, std::vector<int> shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    if (n != a->value.numel()) throw ContractError("reshape element count mismatch");
    Tensor out = a->value;
    out.shape = shape;
    auto in_shape = a->value.shape;
    auto bk = [a, in_shape](Node& nd) {
        if (!a->requires_grad) return;
        Tensor g = nd.grad;
        g.shape = in_shape;
        a->accum(g);
    };
    return make_node(std::move(out), {a}, bk);
}

NodePtr concat(NodePtr a, NodePtr b, int axis) {
    const auto& sa = a->value.shape;
    const auto& sb = b->value.shape;
    if (sa.size() != sb.size()) throw ContractError("concat rank mismatch");
    int rank = static_cast<int>(sa.size());
    if (axis < 0) axis += rank;
    for (int i = 0; i < rank; ++i)
        if (i != axis && sa[static_cast<std::size_t>(i)] != sb[static_cast<std::size_t>(i)])
            throw ContractError("concat non-axis dims mismatch");
    std::vector<int> os = sa;
    os[static_cast<std::size_t>(axis)] += sb[static_cast<std::size_t>(axis)];

    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= sa[static_cast<std::size_t>(i)];
    for (int i = axis + 1; i < rank; ++i) inner *= sa[static_cast<std::size_t>(i)];
    std::int64_t wa = sa[static_cast<std::size_t>(axis)] * inner;
    std::int64_t wb = sb[static_cast<std::size_t>(axis)] * inner;

    Tensor out(os);
    for (std::int64_t o = 0; o < outer; ++o) {
        std::copy_n(a->value.data.begin() + o * wa, wa, out.data.begin() + o * (wa + wb));
        std::copy_n(b->value.data.begin() + o * wb, wb, out.data.begin() + o * (wa + wb) + wa);
    }
    auto bk = [a, b, outer, wa, wb](Node& n) {
        if (a->requires_grad) {
            Tensor g(a->value.shape);
            for (std::int64_t o = 0; o < outer; ++o)
                std::copy_n(n.grad.data.begin() + o * (wa + wb), wa, g.data.begin() + o * wa);
            a->accum(g);
        }
        if (b->requires_grad) {
            Tensor g(b->value.shape);
            for (std::int64_t o = 0; o < outer; ++o)
                std::copy_n(n.grad.data.begin() + o * (wa + wb) + wa, wb, g.data.begin() + o * wb);
            b->accum(g);
        }
    };
    return make_node(std::move(out), {a, b}, bk);
}

namespace {

// im2col: x (C,H,W) -> col (C*kh*kw, OH*OW)
void im2col(const float* x, int C, int H, int W, int k, int stride, int pad, int OH, int OW,
            float* col) {
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                float* dst = col + ((static_cast<std::int64_t>(c) * k + ki) * k + kj) *
                                       (static_cast<std::int64_t>(OH) * OW);
                for (int oh = 0; oh < OH; ++oh) {
                    int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) {
                        std::fill_n(dst + static_cast<std::int64_t>(oh) * OW, OW, 0.0f);
                        continue;
                    }
                    const float* src = x + (static_cast<std::int64_t>(c) * H + ih) * W;
                    for (int ow = 0; ow < OW; ++ow) {
                        int iw = ow * stride - pad + kj;
                        dst[static_cast<std::int64_t>(oh) * OW + ow] =
                            (iw >= 0 && iw < W) ? src[iw] : 0.0f;
                    }
                }
            }
        }
    }
}

// col2im: accumulate col (C*kh*kw, OH*OW) back into dx (C,H,W)
void col2im(const float* col, int C, int H, int W, int k, int stride, int pad, int OH, int OW,
            float* dx) {
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const float* src = col + ((static_cast<std::int64_t>(c) * k + ki) * k + kj) *
                                             (static_cast<std::int64_t>(OH) * OW);
                for (int oh = 0; oh < OH; ++oh) {
                    int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) continue;
                    float* dst = dx + (static_cast<std::int64_t>(c) * H + ih) * W;
                    for (int ow = 0; ow < OW; ++ow) {
                        int iw = ow * stride - pad + kj;
                        if (iw >= 0 && iw < W) dst[iw] += src[static_cast<std::int64_t>(oh) * OW + ow];
                    }
                }
            }
        }
    }
}

}  // namespace

NodePtr conv2d(NodePtr x, NodePtr w, NodePtr b, int stride, int pad) {
    if (x->value.rank() != 4 || w->value.rank() != 4)
        throw ContractError("conv2d expects (N,C,H,W) input and (F,C,kh,kw) weight");
    int N = x->value.shape[0], C = x->value.shape[1], H = x->value.shape[2], W = x->value.shape[3];
    int F = w->value.shape[0], Cw = w->value.shape[1], k = w->value.shape[2];
    if (Cw != C || w->value.shape[3] != k) throw ContractError("conv2d weight shape mismatch");
    int OH = (H + 2 * pad - k) / stride + 1;
    int OW = (W + 2 * pad - k) / stride + 1;
    if (OH <= 0 || OW <= 0) throw ContractError("conv2d output would be empty");

    std::int64_t colrows = static_cast<std::int64_t>(C) * k * k;
    std::int64_t colcols = static_cast<std::int64_t>(OH) * OW;
    Tensor out({N, F, OH, OW});
    std::vector<float> col(static_cast<std::size_t>(colrows * colcols));
    ECMap Wm(w->value.data.data(), F, static_cast<int>(colrows));
    for (int n = 0; n < N; ++n) {
        im2col(x->value.data.data() + static_cast<std::int64_t>(n) * C * H * W, C, H, W, k, stride,
               pad, OH, OW, col.data());
        ECMap Cm(col.data(), static_cast<int>(colrows), static_cast<int>(colcols));
        EMap Om(out.data.data() + static_cast<std::int64_t>(n) * F * OH * OW, F,
                static_cast<int>(colcols));
        Om.noalias() = Wm * Cm;
    }
    if (b) {
        if (b->value.numel() != F) throw ContractError("conv2d bias size mismatch");
        for (int n = 0; n < N; ++n)
            for (int f = 0; f < F; ++f) {
                float bias = b->value.at(f);
                float* p = out.data.data() + ((static_cast<std::int64_t>(n) * F + f) * OH) * OW;
                for (std::int64_t i = 0; i < colcols; ++i) p[i] += bias;
            }
    }

    std::vector<NodePtr> parents = b ? std::vector<NodePtr>{x, w, b} : std::vector<NodePtr>{x, w};
    auto bk = [x, w, b, N, C, H, W, F, k, stride, pad, OH, OW, colrows, colcols](Node& nd) {
        std::vector<float> col(static_cast<std::size_t>(colrows * colcols));
        Tensor gw({F, C, k, k}, 0.0f);
        Tensor gx;
        if (x->requires_grad) gx = Tensor({N, C, H, W}, 0.0f);
        EMap GW(gw.data.data(), F, static_cast<int>(colrows));
        ECMap Wm(w->value.data.data(), F, static_cast<int>(colrows));
        std::vector<float> dcol(static_cast<std::size_t>(colrows * colcols));
        for (int n = 0; n < N; ++n) {
            ECMap G(nd.grad.data.data() + static_cast<std::int64_t>(n) * F * OH * OW, F,
                    static_cast<int>(colcols));
            if (w->requires_grad) {
                im2col(x->value.data.data() + static_cast<std::int64_t>(n) * C * H * W, C, H, W, k,
                       stride, pad, OH, OW, col.data());
                ECMap Cm(col.data(), static_cast<int>(colrows), static_cast<int>(colcols));
                GW.noalias() += G * Cm.transpose();
            }
            if (x->requires_grad) {
                EMap DC(dcol.data(), static_cast<int>(colrows), static_cast<int>(colcols));
                DC.noalias() = Wm.transpose() * G;
                col2im(dcol.data(), C, H, W, k, stride, pad, OH, OW,
                       gx.data.data() + static_cast<std::int64_t>(n) * C * H * W);
            }
        }
        if (w->requires_grad) w->accum(gw);
        if (x->requires_grad) x->accum(gx);
        if (b && b->requires_grad) {
            Tensor gb({F}, 0.0f);
            for (int n = 0; n < N; ++n)
                for (int f = 0; f < F; ++f) {
                    double s = 0.0;
                    const float* p =
                        nd.grad.data.data() + ((static_cast<std::int64_t>(n) * F + f) * OH) * OW;
                    for (std::int64_t i = 0; i < colcols; ++i) s += p[i];
                    gb.at(f) += static_cast<float>(s);
                }
            b->accum(gb);
        }
    };
    return make_node(std::move(out), std::move(parents), bk);
}

NodePtr upsample_nearest2(NodePtr x) {
    if (x->value.rank() != 4) throw ContractError("upsample expects (N,C,H,W)");
    int N = x->value.shape[0], C = x->value.shape[1], H = x->value.shape[2], W = x->value.shape[3];
    Tensor out({N, C, 2 * H, 2 * W});
    for (int nc = 0; nc < N * C; ++nc) {
        const float* src = x->value.data.data() + static_cast<std::int64_t>(nc) * H * W;
        float* dst = out.data.data() + static_cast<std::int64_t>(nc) * 4 * H * W;
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                float v = src[static_cast<std::int64_t>(i) * W + j];
                std::int64_t o = (static_cast<std::int64_t>(2 * i) * 2 * W) + 2 * j;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + 2 * W] = v;
                dst[o + 2 * W + 1] = v;
            }
    }
    auto bk = [x, N, C, H, W](Node& n) {
        if (!x->requires_grad) return;
        Tensor g({N, C, H, W});
        for (int nc = 0; nc < N * C; ++nc) {
            const float* src = n.grad.data.data() + static_cast<std::int64_t>(nc) * 4 * H * W;
            float* dst = g.data.data() + static_cast<std::int64_t>(nc) * H * W;
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    std::int64_t o = (static_cast<std::int64_t>(2 * i) * 2 * W) + 2 * j;
                    dst[static_cast<std::int64_t>(i) * W + j] =
                        src[o] + src[o + 1] + src[o + 2 * W] + src[o + 2 * W + 1];
                }
        }
        x->accum(g);
    };
    return make_node(std::move(out), {x}, bk);
}

NodePtr gather_pixels(NodePtr x, const std::vector<std::array<int, 3>>& idx) {
    if (x->value.rank() != 4) throw ContractError("gather_pixels expects (N,C,H,W)");
    int N = x->value.shape[0], C = x->value.shape[1], H = x->value.shape[2], W = x->value.shape[3];
    int P = static_cast<int>(idx.size());
    Tensor out({P, C});
    for (int p = 0; p < P; ++p) {
        auto [n, h, w] = idx[static_cast<std::size_t>(p)];
        if (n < 0 || n >= N || h < 0 || h >= H || w < 0 || w >= W)
            throw ContractError("gather_pixels index out of bounds");
        for (int c = 0; c < C; ++c)
            out.at(static_cast<std::int64_t>(p) * C + c) =
                x->value.at(((static_cast<std::int64_t>(n) * C + c) * H + h) * W + w);
    }
    auto bk = [x, idx, C, H, W](Node& nd) {
        if (!x->requires_grad) return;
        Tensor g(x->value.shape, 0.0f);
        for (std::size_t p = 0; p < idx.size(); ++p) {
            auto [n, h, w] = idx[p];
            for (int c = 0; c < C; ++c)
                g.at(((static_cast<std::int64_t>(n) * C + c) * H + h) * W + w) +=
                    nd.grad.at(static_cast<std::int64_t>(p) * C + c);
        }
        x->accum(g);
    };
    return make_node(std::move(out), {x}, bk);
}

NodePtr gather_patches(NodePtr x, const std::vector<std::array<int, 3>>& locs, int ps) {
    if (x->value.rank() != 4) throw ContractError("gather_patches expects (N,C,H,W)");
    int N = x->value.shape[0], C = x->value.shape[1], H = x->value.shape[2], W = x->value.shape[3];
    int L = static_cast<int>(locs.size());
    Tensor out({L, C, ps, ps});
    for (int l = 0; l < L; ++l) {
        auto [n, top, left] = locs[static_cast<std::size_t>(l)];
        if (n < 0 || n >= N || top < 0 || top + ps > H || left < 0 || left + ps > W)
            throw ContractError("gather_patches window out of bounds");
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < ps; ++i)
                std::copy_n(
                    x->value.data.begin() + ((static_cast<std::int64_t>(n) * C + c) * H + top + i) * W + left,
                    ps,
                    out.data.begin() + ((static_cast<std::int64_t>(l) * C + c) * ps + i) * ps);
    }
    auto bk = [x, locs, ps, C, H, W](Node& nd) {
        if (!x->requires_grad) return;
        Tensor g(x->value.shape, 0.0f);
        for (std::size_t l = 0; l < locs.size(); ++l) {
            auto [n, top, left] = locs[l];
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < ps; ++i)
                    for (int j = 0; j < ps; ++j)
                        g.at(((static_cast<std::int64_t>(n) * C + c) * H + top + i) * W + left + j) +=
                            nd.grad.at(((static_cast<std::int64_t>(l) * C + c) * ps + i) * ps + j);
        }
        x->accum(g);
    };
    return make_node(std::move(out), {x}, bk);
}

NodePtr diag2d(NodePtr a) {
    if (a->value.rank() != 2 || a->value.shape[0] != a->value.shape[1])
        throw ContractError("diag2d expects a square rank-2 tensor");
    int P = a->value.shape[0];
    Tensor out({P, 1});
    for (int i = 0; i < P; ++i) out.at(i) = a->value.at(static_cast<std::int64_t>(i) * P + i);
    auto bk = [a, P](Node& n) {
        if (!a->requires_grad) return;
        Tensor g({P, P}, 0.0f);
        for (int i = 0; i < P; ++i) g.at(static_cast<std::int64_t>(i) * P + i) = n.grad.at(i);
        a->accum(g);
    };
    return make_node(std::move(out), {a}, bk);
}

NodePtr row_l2_normalize(NodePtr a, float eps) {
    auto norm2 = sum(square(a), {1}, true);          // (R,1)
    auto inv = div(constant_scalar(1.0f), sqrt(add_scalar(norm2, eps)));
    return mul(a, inv);
}

void backward(const NodePtr& root) {
    if (root->value.numel() != 1) throw ContractError("backward root must be scalar");
    // Iterative postorder topo sort over the requires_grad subgraph.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node* p = n->parents[i++].get();
            if (p->requires_grad && !visited.count(p) && !p->parents.empty()) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    Tensor seed(root->value.shape.empty() ? std::vector<int>{} : root->value.shape, 1.0f);
    if (seed.data.empty()) seed.data.assign(1, 1.0f);
    seed.shape = root->value.shape;
    root->accum(seed);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_op && n->requires_grad && !n->grad.data.empty()) n->backward_op(*n);
    }
}

}  // namespace ad
}  // namespace vstain
