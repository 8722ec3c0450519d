#include "demist/decoder.hpp"

#include <cmath>

#include "demist/errors.hpp"

namespace demist {

void DecoderConfig::validate(int model_dim) const {
  require(num_queries >= 1, "decoder config: num_queries must be >= 1");
  require(blocks_per_scale >= 1, "decoder config: blocks_per_scale must be >= 1");
  require(heads >= 1 && model_dim % heads == 0,
          "decoder config: heads must divide the final channel count");
}

QueryBank::QueryBank(ParamStore& store, const std::string& name, int count, int dim, Rng& rng,
                     bool learnable, float constant_value) {
  if (learnable) {
    queries = store.create(name, Tensor::randn({count, dim}, rng, 0.02f));
  } else {
    // Non-learned constant bank: all entries equal, detached from the
    // optimizer and from gradient flow.
    queries = make_constant(Tensor::full({count, dim}, constant_value));
  }
}

CrossAttend::CrossAttend(ParamStore& store, const std::string& name, int dim, int heads_,
                         Rng& rng) {
  const float gain = 1.f;
  q1 = LinearLayer(store, name + ".q1", dim, dim, rng, gain);
  k1 = LinearLayer(store, name + ".k1", dim, dim, rng, gain);
  v1 = LinearLayer(store, name + ".v1", dim, dim, rng, gain);
  o1 = LinearLayer(store, name + ".o1", dim, dim, rng, 0.1f);
  q2 = LinearLayer(store, name + ".q2", dim, dim, rng, gain);
  k2 = LinearLayer(store, name + ".k2", dim, dim, rng, gain);
  v2 = LinearLayer(store, name + ".v2", dim, dim, rng, gain);
  o2 = LinearLayer(store, name + ".o2", dim, dim, rng, 0.1f);
  heads = heads_;
  scale = 1.f / std::sqrt(static_cast<float>(dim));
}

Var CrossAttend::operator()(const Var& sequence, const Var& queries, AttnProbe* probe) const {
  require(sequence->value.rank() == 3, "cross_attend: sequence must be [B,N,C]");
  require(queries->value.rank() == 2, "cross_attend: queries must be [L,C]");
  require(queries->value.dim(1) == sequence->value.dim(2),
          "cross_attend: query dim must match sequence channels");
  const int batch = sequence->value.dim(0);

  Var q_b = broadcast_batch(queries, batch);  // [B,L,C]
  AttnProbe probe1, probe2;
  Var summary = multihead_attention(q1(q_b), k1(sequence), v1(sequence), heads, scale,
                                    probe ? &probe1 : nullptr);
  Var updated = add(q_b, o1(summary));  // [B,L,C]
  Var readout = multihead_attention(q2(sequence), k2(updated), v2(updated), heads, scale,
                                    probe ? &probe2 : nullptr);
  Var out = add(sequence, o2(readout));  // [B,N,C]
  if (probe) {
    probe->probs.clear();
    for (auto& p : probe1.probs) probe->probs.push_back(std::move(p));
    for (auto& p : probe2.probs) probe->probs.push_back(std::move(p));
  }
  return out;
}

TaskDecoder::TaskDecoder(ParamStore& store, const std::string& name, const EncoderConfig& enc_cfg,
                         const DecoderConfig& cfg, DecoderHead head, Rng& rng)
    : cfg_(cfg), enc_cfg_(enc_cfg), head_(head) {
  const int dim = enc_cfg.final_channels();
  cfg.validate(dim);
  attend_ = CrossAttend(store, name + ".attend", dim, cfg.heads, rng);

  // Levels walk the channel schedule backwards: C4 -> C3 -> C2 -> C1 -> C1.
  const auto& ch = enc_cfg.channels;
  const int n = static_cast<int>(ch.size());
  for (int lvl = 0; lvl < n; ++lvl) {
    Level level;
    const int c_here = ch[n - 1 - lvl];
    const int c_next = (lvl + 1 < n) ? ch[n - 2 - lvl] : ch[0];
    const std::string base = name + ".level" + std::to_string(lvl);
    for (int b = 0; b < cfg.blocks_per_scale; ++b) {
      level.blocks.emplace_back(store, base + ".res" + std::to_string(b), c_here, rng);
    }
    level.up_conv = Conv2dLayer(store, base + ".up", 3, c_here, c_next, 1, 1, rng);
    levels_.push_back(std::move(level));
  }
  const int out_channels = head == DecoderHead::kDehaze ? 3 : 1;
  head_conv_ = Conv2dLayer(store, name + ".head", 3, ch[0], out_channels, 1, 1, rng);
}

TaskDecoder::Result TaskDecoder::decode(const Var& sequence, const QueryBank& bank,
                                        const FeaturePyramid& pyramid, int h16, int w16,
                                        AttnProbe* probe) const {
  require(sequence->value.dim(1) == h16 * w16,
          "decode: sequence length does not match the spatial layout");
  Var seq = attend_(sequence, bank.queries, probe);
  const int dim = enc_cfg_.final_channels();
  const int batch = seq->value.dim(0);
  Var x = reshape(seq, {batch, h16, w16, dim});

  const int n = static_cast<int>(levels_.size());
  for (int lvl = 0; lvl < n; ++lvl) {
    for (const auto& block : levels_[lvl].blocks) x = block(x);
    x = upsample_nearest2(x);
    x = levels_[lvl].up_conv(x);
    // Matching skip: stage n-2-lvl features, then the stem at full size.
    const int skip_stage = n - 2 - lvl;
    const Var& skip = skip_stage >= 0 ? pyramid.stages[static_cast<std::size_t>(skip_stage)]
                                      : pyramid.stem;
    x = add(x, skip);
  }

  Var raw = head_conv_(x);
  Result result;
  result.feature_seq = seq;
  if (head_ == DecoderHead::kDehaze) {
    result.output = affine(tanh_op(raw), 0.5f, 0.5f);
  } else {
    result.output = softplus(raw);
  }
  return result;
}

}  // namespace demist
