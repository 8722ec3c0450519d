#pragma once

#include <cstdint>
#include <map>

#include "demist/decoder.hpp"
#include "demist/encoder.hpp"
#include "demist/image.hpp"

namespace demist {

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  std::uint64_t init_seed = 1234;

  void validate() const;
};

// Graph-producing forward results; values live on the autodiff tape so
// losses can backpropagate into the parameters.
struct ModelOutputs {
  Var dehazed;        // [B,H,W,3] in [0,1]
  Var depth;          // [B,H,W,1] >= 0
  Var dehaze_feature; // [B,N,C4] sequence (X_h')
  FeaturePyramid pyramid;
};

// Plain-array outputs for inference callers.
struct DecodedOutputs {
  Image dehazed;
  DepthMap depth;
  Tensor dehaze_feature;
};

// Single encoder, serial task decoders: the depth decoder reads the
// dehazing feature rather than the encoder feature.
class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  ModelOutputs forward(const Tensor& images, AttnProbe* probe = nullptr) const;
  DecodedOutputs infer(const Image& image) const;

  // Depth decoding with an externally supplied dehazing feature; used to
  // probe the serial dependency.
  Var decode_depth_from_feature(const Var& feature_seq, const FeaturePyramid& pyramid,
                                int h16, int w16) const;

  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const ModelConfig& config() const { return cfg_; }
  const QueryBank& haze_queries() const { return haze_queries_; }
  const QueryBank& depth_queries() const { return depth_queries_; }

 private:
  ModelConfig cfg_;
  ParamStore store_;
  Encoder encoder_;
  QueryBank haze_queries_;
  QueryBank depth_queries_;
  TaskDecoder dehaze_decoder_;
  TaskDecoder depth_decoder_;
  mutable std::map<std::int64_t, Tensor> pe_cache_;

  const Tensor& position_embedding(int n, int c) const;
};

}  // namespace demist
