#pragma once

#include <string>
#include <vector>

#include "demist/autodiff.hpp"
#include "demist/rng.hpp"
#include "demist/tensor.hpp"

namespace demist {

// Ordered, named registry of trainable parameters. Construction order is
// deterministic, which makes init, checkpoints and the optimizer agree
// on parameter identity by position as well as by name.
class ParamStore {
 public:
  Var create(const std::string& name, Tensor init);
  Var find(const std::string& name) const;  // throws DataError if missing

  std::size_t count() const { return params_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const Var& var(std::size_t i) const { return params_[i]; }

  void zero_grads();
  std::int64_t total_size() const;

 private:
  std::vector<std::string> names_;
  std::vector<Var> params_;
};

// Weight init helpers.
Tensor he_conv_init(int k, int cin, int cout, Rng& rng, float gain = 1.f);
Tensor he_depthwise_init(int k, int c, Rng& rng);
Tensor linear_init(int cin, int cout, Rng& rng, float gain = 1.f);

struct Conv2dLayer {
  Var w, b;
  int stride = 1, pad = 1;

  Conv2dLayer() = default;
  // gain < 1 shrinks the init so deep residual stacks stay near identity.
  Conv2dLayer(ParamStore& store, const std::string& name, int k, int cin, int cout,
              int stride, int pad, Rng& rng, float gain = 1.f);
  Var operator()(const Var& x) const { return conv2d(x, w, b, stride, pad); }
};

struct DepthwiseLayer {
  Var w;
  DepthwiseLayer() = default;
  DepthwiseLayer(ParamStore& store, const std::string& name, int k, int c, Rng& rng);
  Var operator()(const Var& x) const { return depthwise_conv2d(x, w); }
};

struct LinearLayer {
  Var w, b;
  LinearLayer() = default;
  LinearLayer(ParamStore& store, const std::string& name, int cin, int cout, Rng& rng,
              float gain = 1.f);
  Var operator()(const Var& x) const { return linear(x, w, b); }
};

struct LayerNormLayer {
  Var gamma, beta;
  LayerNormLayer() = default;
  LayerNormLayer(ParamStore& store, const std::string& name, int c);
  Var operator()(const Var& x) const { return layer_norm(x, gamma, beta); }
};

// Pre-norm residual block: x + project(gate(sum of multi-scale depthwise
// convs applied in the expanded channel space)).
struct MsfmBlock {
  LayerNormLayer norm;
  LinearLayer expand;    // C -> expansion*C (pointwise)
  std::vector<DepthwiseLayer> branches;
  LinearLayer project;   // expansion*C/2 -> C (after the gate halves)

  MsfmBlock() = default;
  MsfmBlock(ParamStore& store, const std::string& name, int channels, int expansion,
            const std::vector<int>& kernel_sizes, Rng& rng);
  Var operator()(const Var& x) const;
};

// conv-relu-conv with identity skip; second conv init is damped.
struct ResidualBlock {
  Conv2dLayer conv1, conv2;
  ResidualBlock() = default;
  ResidualBlock(ParamStore& store, const std::string& name, int channels, Rng& rng);
  Var operator()(const Var& x) const;
};

// Fixed sinusoidal position table for a flattened length-N sequence.
Tensor sinusoidal_position_embedding(int n, int c);

}  // namespace demist
