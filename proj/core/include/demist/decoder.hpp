#pragma once

#include <string>
#include <vector>

#include "demist/encoder.hpp"
#include "demist/nn.hpp"

namespace demist {

struct DecoderConfig {
  int num_queries = 64;
  int blocks_per_scale = 5;  // M
  int heads = 4;
  bool learnable_queries = true;  // false: bank frozen at a constant
  float constant_query_value = 0.02f;

  void validate(int model_dim) const;
};

enum class DecoderHead { kDehaze, kDepth };

// Learnable task queries, one bank per decoder.
struct QueryBank {
  Var queries;  // [L, C4]

  QueryBank() = default;
  QueryBank(ParamStore& store, const std::string& name, int count, int dim, Rng& rng,
            bool learnable, float constant_value);
};

// Query read-out restoring the spatial layout, done in two attention
// steps: the queries summarize the sequence, then the sequence reads the
// updated queries back, with a residual from the input sequence.
//   U  = Q + MHA(proj(Q), proj(S), proj(S))
//   S' = S + MHA(proj(S), proj(U), proj(U))
struct CrossAttend {
  LinearLayer q1, k1, v1, o1;
  LinearLayer q2, k2, v2, o2;
  int heads = 4;
  float scale = 1.f;

  CrossAttend() = default;
  CrossAttend(ParamStore& store, const std::string& name, int dim, int heads, Rng& rng);
  // sequence [B,N,C], queries [L,C]; probe (optional) collects every
  // attention matrix from both steps.
  Var operator()(const Var& sequence, const Var& queries, AttnProbe* probe = nullptr) const;
};

// One task decoder: cross-attend, then a 4-level upsampling path with M
// residual blocks per level, 2x nearest upsampling plus 3x3 conv, and an
// additive skip from the matching encoder feature. Heads:
//   dehaze: 3 channels, 0.5 + 0.5*tanh(raw)  -> [0,1]
//   depth:  1 channel, softplus(raw)         -> [0, inf)
class TaskDecoder {
 public:
  TaskDecoder() = default;
  TaskDecoder(ParamStore& store, const std::string& name, const EncoderConfig& enc_cfg,
              const DecoderConfig& cfg, DecoderHead head, Rng& rng);

  struct Result {
    Var output;       // [B,H,W,3] or [B,H,W,1]
    Var feature_seq;  // [B,N,C4] sequence after cross-attend
  };

  // sequence: flattened stage-4 feature (dehaze) or the dehazing feature
  // X_h' (depth). The pyramid supplies the skip connections.
  Result decode(const Var& sequence, const QueryBank& bank, const FeaturePyramid& pyramid,
                int h16, int w16, AttnProbe* probe = nullptr) const;

 private:
  struct Level {
    std::vector<ResidualBlock> blocks;
    Conv2dLayer up_conv;  // applied after 2x nearest upsample
  };
  DecoderConfig cfg_;
  EncoderConfig enc_cfg_;
  DecoderHead head_;
  CrossAttend attend_;
  std::vector<Level> levels_;
  Conv2dLayer head_conv_;
};

}  // namespace demist
