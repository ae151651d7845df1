#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

namespace vstain {

/// Dense row-major float tensor, rank 0..4. Rank 0 is a scalar with one
/// element. Plain value type; copies copy the buffer.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, float fill = 0.0f);
    static Tensor scalar(float v);

    std::int64_t numel() const;
    int rank() const { return static_cast<int>(shape.size()); }
    bool empty() const { return data.empty(); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;

    float& at(std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    float at(std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    /// Element count along dim `i`, counting from the right if negative.
    int dim(int i) const;
};

namespace ad {

/// Node in the dynamically built reverse-mode graph. Parameter and input
/// leaves are created with make_leaf / constant; ops produce interior nodes
/// whose backward_op scatters this node's grad into its parents.
class Node {
public:
    Tensor value;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_op;

    void accum(const Tensor& g);
};

using NodePtr = std::shared_ptr<Node>;

NodePtr make_leaf(Tensor v, bool requires_grad = true);
NodePtr constant(Tensor v);
NodePtr constant_scalar(float v);

// Elementwise with numpy-style broadcasting.
NodePtr add(NodePtr a, NodePtr b);
NodePtr sub(NodePtr a, NodePtr b);
NodePtr mul(NodePtr a, NodePtr b);
NodePtr div(NodePtr a, NodePtr b);
NodePtr add_scalar(NodePtr a, float s);
NodePtr mul_scalar(NodePtr a, float s);

// Elementwise unary.
NodePtr exp(NodePtr a);
NodePtr log(NodePtr a);
NodePtr sqrt(NodePtr a);
NodePtr square(NodePtr a);
NodePtr sigmoid(NodePtr a);
NodePtr silu(NodePtr a);

// Reductions. `axes` index into the input's shape; keepdim keeps size-1 dims.
NodePtr sum(NodePtr a, const std::vector<int>& axes, bool keepdim);
NodePtr mean(NodePtr a, const std::vector<int>& axes, bool keepdim);
NodePtr sum_all(NodePtr a);
NodePtr mean_all(NodePtr a);

/// Row-wise log(sum(exp)) with max subtraction: (R, C) -> (R, 1).
NodePtr logsumexp_rows(NodePtr a);

// Linear algebra on rank-2 tensors.
NodePtr matmul(NodePtr a, NodePtr b);
NodePtr transpose(NodePtr a);

NodePtr reshape(NodePtr a, std::vector<int> shape);
NodePtr concat(NodePtr a, NodePtr b, int axis);

/// 2-D convolution on (N, C, H, W) with weight (F, C, kh, kw), optional bias
/// (F), zero padding. Backed by im2col + GEMM.
NodePtr conv2d(NodePtr x, NodePtr w, NodePtr b, int stride, int pad);

NodePtr upsample_nearest2(NodePtr x);

/// Rows of feature vectors at given (n, h, w) positions: (N,C,H,W) -> (P, C).
NodePtr gather_pixels(NodePtr x, const std::vector<std::array<int, 3>>& idx);

/// Stack of patches at (n, top, left): (N,C,H,W) -> (L, C, ps, ps).
/// Overlapping windows are allowed; backward accumulates.
NodePtr gather_patches(NodePtr x, const std::vector<std::array<int, 3>>& locs, int ps);

/// Main diagonal of a square rank-2 tensor: (P, P) -> (P, 1).
NodePtr diag2d(NodePtr a);

/// L2-normalized rows of a (R, C) tensor (composed from primitives).
NodePtr row_l2_normalize(NodePtr a, float eps = 1e-12f);

/// Reverse pass from a scalar root (numel == 1). Seeds d(root)/d(root) = 1.
void backward(const NodePtr& root);

}  // namespace ad
}  // namespace vstain
