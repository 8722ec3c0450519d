#include "demist/encoder.hpp"

#include "demist/errors.hpp"

namespace demist {

void EncoderConfig::validate() const {
  require(stages >= 1, "encoder config: stages must be >= 1");
  require(static_cast<int>(channels.size()) == stages,
          "encoder config: need one channel count per stage");
  for (std::size_t i = 1; i < channels.size(); ++i) {
    require(channels[i] > channels[i - 1], "encoder config: channels must be strictly increasing");
  }
  require(blocks_per_stage >= 1, "encoder config: blocks_per_stage must be >= 1");
  require(expansion >= 1, "encoder config: expansion must be >= 1");
  require(!kernel_sizes.empty(), "encoder config: kernel_sizes must not be empty");
  for (int k : kernel_sizes) require(k % 2 == 1, "encoder config: kernel sizes must be odd");
}

Encoder::Encoder(ParamStore& store, const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  stem_ = Conv2dLayer(store, "encoder.stem", 3, 3, cfg.channels[0], 1, 1, rng);
  int cin = cfg.channels[0];
  for (int s = 0; s < cfg.stages; ++s) {
    Stage stage;
    const std::string base = "encoder.stage" + std::to_string(s + 1);
    stage.merge = Conv2dLayer(store, base + ".merge", 3, cin, cfg.channels[s], 2, 1, rng);
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      stage.blocks.emplace_back(store, base + ".block" + std::to_string(b), cfg.channels[s],
                                cfg.expansion, cfg.kernel_sizes, rng);
    }
    cin = cfg.channels[s];
    stages_.push_back(std::move(stage));
  }
}

FeaturePyramid Encoder::operator()(const Var& image) const {
  require(image->value.rank() == 4 && image->value.dim(3) == 3,
          "encode: expected [B,H,W,3] input");
  const int h = image->value.dim(1), w = image->value.dim(2);
  const int divisor = 1 << cfg_.stages;
  if (h % divisor != 0 || w % divisor != 0) {
    throw ShapeError("encode: input dims must be divisible by " + std::to_string(divisor) +
                     ", got " + image->value.shape_str() + " (pad before encoding)");
  }
  FeaturePyramid pyr;
  pyr.stem = stem_(image);
  Var x = pyr.stem;
  for (const auto& stage : stages_) {
    require(x->value.dim(1) % 2 == 0 && x->value.dim(2) % 2 == 0,
            "patch merge: even spatial dims required");
    x = stage.merge(x);
    for (const auto& block : stage.blocks) x = block(x);
    pyr.stages.push_back(x);
  }
  return pyr;
}

}  // namespace demist
