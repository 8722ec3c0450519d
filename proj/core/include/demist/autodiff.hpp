#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "demist/tensor.hpp"

namespace demist {

// Reverse-mode automatic differentiation over float32 tensors.
//
// Ops execute eagerly and record a backward closure on the result node.
// backward(root) topologically sorts the graph reachable from a scalar
// root and runs the closures in reverse, accumulating into .grad of
// every node with requires_grad. Nodes without requires_grad act as
// detached constants: gradient never propagates into them, which is how
// frozen parameters and loss targets are expressed.

class Node;
using Var = std::shared_ptr<Node>;

class Node {
 public:
  Tensor value;
  Tensor grad;  // allocated on first accumulation, same shape as value
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backprop;  // null on leaves

  void accumulate(const float* g, std::int64_t n);
  void accumulate_scaled(const float* g, std::int64_t n, float scale);
  void ensure_grad();
};

Var make_leaf(Tensor value);      // trainable / differentiable input
Var make_constant(Tensor value);  // detached data

// Runs reverse-mode accumulation from a scalar root (size 1).
void backward(const Var& root);

// Per-head attention probabilities captured during forward, one matrix
// [Lq, Lk] per (batch, head) in batch-major order. Rows sum to one.
struct AttnProbe {
  std::vector<Tensor> probs;
};

// --- elementwise ------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var relu(const Var& x);
Var tanh_op(const Var& x);
Var softplus(const Var& x);
Var affine(const Var& x, float scale, float shift);  // scale*x + shift

// --- structure --------------------------------------------------------
Var reshape(const Var& x, std::vector<int> shape);
Var broadcast_batch(const Var& x, int batch);          // [..] -> [B, ..]
Var add_rows(const Var& x, const Var& rows);           // [B,N,C] + [N,C]
Var upsample_nearest2(const Var& x);                   // [B,H,W,C] -> [B,2H,2W,C]

// --- linear algebra ---------------------------------------------------
Var matmul(const Var& a, const Var& b);                 // [m,k] x [k,n]
Var linear(const Var& x, const Var& w, const Var& b);   // last dim: x.W + b
Var softmax_rows(const Var& x);                         // [m,n], row softmax

// Multi-head scaled dot-product attention. q [B,Lq,C], k/v [B,Lk,C].
// scale multiplies the logits (the caller passes 1/sqrt(model_dim)).
Var multihead_attention(const Var& q, const Var& k, const Var& v, int heads,
                        float scale, AttnProbe* probe = nullptr);

// --- convolution ------------------------------------------------------
// x [B,H,W,Cin], w [KH,KW,Cin,Cout], b [Cout]; zero padding.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
// x [B,H,W,C], w [K,K,C]; stride 1, same-size zero padding.
Var depthwise_conv2d(const Var& x, const Var& w);

// --- normalization / gating -------------------------------------------
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-6f);
Var simple_gate(const Var& x);          // split last dim in half, multiply
Var global_avg_pool(const Var& x);      // [B,H,W,C] -> [B,C]
Var l2_normalize_rows(const Var& x);    // [B,D], rows to unit length

// --- reductions -------------------------------------------------------
Var mean_all(const Var& x);                              // -> scalar
Var weighted_sum_all(const Var& x, const Tensor& weights);  // sum(x*w) -> scalar
// total = sum_i coeffs[i] * scalars[i]; every scalar must have size 1.
Var weighted_scalar_sum(const std::vector<Var>& scalars, const std::vector<double>& coeffs);

// --- fused losses -----------------------------------------------------
// mean(sqrt((pred-target)^2 + eps^2)); target is detached data.
Var charbonnier_node(const Var& pred, const Tensor& target, float eps);
// mean(|pred - target|), subgradient 0 at equality.
Var l1_mean_node(const Var& pred, const Tensor& target);
// InfoNCE over unit embeddings: anchors [B,D] (grad flows), positives
// [B,D], negatives [N,D] (both detached); mean over anchors.
Var contrastive_node(const Var& anchor_emb, const Tensor& positive_emb,
                     const Tensor& negative_embs, float tau);

}  // namespace demist
