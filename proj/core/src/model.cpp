#include "demist/model.hpp"

#include "demist/errors.hpp"

namespace demist {

void ModelConfig::validate() const {
  encoder.validate();
  decoder.validate(encoder.final_channels());
}

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng = Rng(Rng::derive(cfg.init_seed, rng_tag::kInit));
  encoder_ = Encoder(store_, cfg.encoder, rng);
  const int dim = cfg.encoder.final_channels();
  haze_queries_ = QueryBank(store_, "dehaze.queries", cfg.decoder.num_queries, dim, rng,
                            cfg.decoder.learnable_queries, cfg.decoder.constant_query_value);
  depth_queries_ = QueryBank(store_, "depth.queries", cfg.decoder.num_queries, dim, rng,
                             cfg.decoder.learnable_queries, cfg.decoder.constant_query_value);
  dehaze_decoder_ = TaskDecoder(store_, "dehaze", cfg.encoder, cfg.decoder, DecoderHead::kDehaze, rng);
  depth_decoder_ = TaskDecoder(store_, "depth", cfg.encoder, cfg.decoder, DecoderHead::kDepth, rng);
}

const Tensor& Model::position_embedding(int n, int c) const {
  const std::int64_t key = static_cast<std::int64_t>(n) * 100000 + c;
  auto it = pe_cache_.find(key);
  if (it == pe_cache_.end()) {
    it = pe_cache_.emplace(key, sinusoidal_position_embedding(n, c)).first;
  }
  return it->second;
}

ModelOutputs Model::forward(const Tensor& images, AttnProbe* probe) const {
  require(images.rank() == 4 && images.dim(3) == 3, "model: expected [B,H,W,3] input");
  Var input = make_constant(images);
  FeaturePyramid pyr = encoder_(input);

  const Var& x4 = pyr.stages.back();
  const int batch = x4->value.dim(0);
  const int h16 = x4->value.dim(1), w16 = x4->value.dim(2);
  const int dim = x4->value.dim(3);
  const int n = h16 * w16;

  Var seq = reshape(x4, {batch, n, dim});
  seq = add_rows(seq, make_constant(position_embedding(n, dim)));

  AttnProbe probe_dehaze, probe_depth;
  auto dehaze = dehaze_decoder_.decode(seq, haze_queries_, pyr, h16, w16,
                                       probe ? &probe_dehaze : nullptr);
  auto depth = depth_decoder_.decode(dehaze.feature_seq, depth_queries_, pyr, h16, w16,
                                     probe ? &probe_depth : nullptr);
  if (probe) {
    probe->probs.clear();
    for (auto& p : probe_dehaze.probs) probe->probs.push_back(std::move(p));
    for (auto& p : probe_depth.probs) probe->probs.push_back(std::move(p));
  }

  ModelOutputs out;
  out.dehazed = dehaze.output;
  out.depth = depth.output;
  out.dehaze_feature = dehaze.feature_seq;
  out.pyramid = std::move(pyr);
  return out;
}

DecodedOutputs Model::infer(const Image& image) const {
  ModelOutputs graph = forward(to_tensor(image));
  DecodedOutputs out;
  out.dehazed = to_image(graph.dehazed->value, 0);
  out.depth = to_image(graph.depth->value, 0);
  out.dehaze_feature = graph.dehaze_feature->value;
  return out;
}

Var Model::decode_depth_from_feature(const Var& feature_seq, const FeaturePyramid& pyramid,
                                     int h16, int w16) const {
  return depth_decoder_.decode(feature_seq, depth_queries_, pyramid, h16, w16).output;
}

}  // namespace demist
