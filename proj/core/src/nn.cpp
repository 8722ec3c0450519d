#include "demist/nn.hpp"

#include <cmath>

#include "demist/errors.hpp"

namespace demist {

Var ParamStore::create(const std::string& name, Tensor init) {
  for (const auto& existing : names_) {
    if (existing == name) throw DataError("param store: duplicate name " + name);
  }
  Var v = make_leaf(std::move(init));
  names_.push_back(name);
  params_.push_back(v);
  return v;
}

Var ParamStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return params_[i];
  }
  throw DataError("param store: unknown parameter " + name);
}

void ParamStore::zero_grads() {
  for (auto& p : params_) {
    if (!p->grad.empty()) p->grad.fill(0.f);
  }
}

std::int64_t ParamStore::total_size() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

Tensor he_conv_init(int k, int cin, int cout, Rng& rng, float gain) {
  const float stddev = gain * std::sqrt(2.f / static_cast<float>(k * k * cin));
  return Tensor::randn({k, k, cin, cout}, rng, stddev);
}

Tensor he_depthwise_init(int k, int c, Rng& rng) {
  const float stddev = std::sqrt(2.f / static_cast<float>(k * k));
  return Tensor::randn({k, k, c}, rng, stddev);
}

Tensor linear_init(int cin, int cout, Rng& rng, float gain) {
  const float stddev = gain * std::sqrt(1.f / static_cast<float>(cin));
  return Tensor::randn({cin, cout}, rng, stddev);
}

Conv2dLayer::Conv2dLayer(ParamStore& store, const std::string& name, int k, int cin, int cout,
                         int stride_, int pad_, Rng& rng, float gain) {
  w = store.create(name + ".w", he_conv_init(k, cin, cout, rng, gain));
  b = store.create(name + ".b", Tensor::zeros({cout}));
  stride = stride_;
  pad = pad_;
}

DepthwiseLayer::DepthwiseLayer(ParamStore& store, const std::string& name, int k, int c,
                               Rng& rng) {
  w = store.create(name + ".w", he_depthwise_init(k, c, rng));
}

LinearLayer::LinearLayer(ParamStore& store, const std::string& name, int cin, int cout, Rng& rng,
                         float gain) {
  w = store.create(name + ".w", linear_init(cin, cout, rng, gain));
  b = store.create(name + ".b", Tensor::zeros({cout}));
}

LayerNormLayer::LayerNormLayer(ParamStore& store, const std::string& name, int c) {
  gamma = store.create(name + ".gamma", Tensor::full({c}, 1.f));
  beta = store.create(name + ".beta", Tensor::zeros({c}));
}

MsfmBlock::MsfmBlock(ParamStore& store, const std::string& name, int channels, int expansion,
                     const std::vector<int>& kernel_sizes, Rng& rng) {
  require(expansion >= 1, "msfm: expansion must be >= 1");
  const int wide = channels * expansion;
  require(wide % 2 == 0, "msfm: expanded channels must be even for the gate");
  for (int k : kernel_sizes) require(k % 2 == 1, "msfm: kernel sizes must be odd");
  norm = LayerNormLayer(store, name + ".norm", channels);
  expand = LinearLayer(store, name + ".expand", channels, wide, rng);
  for (std::size_t i = 0; i < kernel_sizes.size(); ++i) {
    branches.emplace_back(store, name + ".dw" + std::to_string(kernel_sizes[i]), kernel_sizes[i],
                          wide, rng);
  }
  // Damped init keeps the residual branch small at depth.
  project = LinearLayer(store, name + ".project", wide / 2, channels, rng, 0.1f);
}

Var MsfmBlock::operator()(const Var& x) const {
  Var u = norm(x);
  u = expand(u);
  Var summed;
  for (const auto& branch : branches) {
    Var r = branch(u);
    summed = summed ? add(summed, r) : r;
  }
  u = simple_gate(summed);
  u = project(u);
  return add(x, u);
}

ResidualBlock::ResidualBlock(ParamStore& store, const std::string& name, int channels, Rng& rng) {
  conv1 = Conv2dLayer(store, name + ".conv1", 3, channels, channels, 1, 1, rng);
  conv2 = Conv2dLayer(store, name + ".conv2", 3, channels, channels, 1, 1, rng, 0.1f);
}

Var ResidualBlock::operator()(const Var& x) const {
  Var r = conv1(x);
  r = relu(r);
  r = conv2(r);
  return add(x, r);
}

Tensor sinusoidal_position_embedding(int n, int c) {
  Tensor pe({n, c});
  for (int pos = 0; pos < n; ++pos) {
    for (int i = 0; i < c; i += 2) {
      const double rate = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(c));
      pe[static_cast<std::int64_t>(pos) * c + i] = static_cast<float>(std::sin(pos * rate));
      if (i + 1 < c) {
        pe[static_cast<std::int64_t>(pos) * c + i + 1] = static_cast<float>(std::cos(pos * rate));
      }
    }
  }
  return pe;
}

}  // namespace demist
