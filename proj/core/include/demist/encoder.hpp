#pragma once

#include <array>
#include <vector>

#include "demist/nn.hpp"

namespace demist {

// Four-stage convolutional encoder. Each stage halves the spatial dims
// with an overlapped patch merge (3x3, stride 2, pad 1) and refines with
// a fixed number of MSFM blocks. A 3x3 stem lifts RGB to the first
// channel width before stage 1.
struct EncoderConfig {
  int stages = 4;
  int blocks_per_stage = 2;
  std::vector<int> channels = {32, 64, 128, 256};
  int expansion = 2;
  std::vector<int> kernel_sizes = {3, 5, 7};

  void validate() const;
  int final_channels() const { return channels.back(); }
};

// Stage i output is H/2^i x W/2^i x C_i. The stem feature (full
// resolution, C_1 channels) rides along for the decoders' last skip.
struct FeaturePyramid {
  Var stem;
  std::vector<Var> stages;
};

class Encoder {
 public:
  Encoder() = default;
  Encoder(ParamStore& store, const EncoderConfig& cfg, Rng& rng);

  // Input [B,H,W,3] with H, W divisible by 2^stages.
  FeaturePyramid operator()(const Var& image) const;

  const EncoderConfig& config() const { return cfg_; }

 private:
  struct Stage {
    Conv2dLayer merge;
    std::vector<MsfmBlock> blocks;
  };
  EncoderConfig cfg_;
  Conv2dLayer stem_;
  std::vector<Stage> stages_;
};

}  // namespace demist
