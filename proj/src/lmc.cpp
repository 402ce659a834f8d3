#include "ean/lmc.hpp"

#include <stdexcept>
#include <string>

#include "ean/ops.hpp"

namespace ean {

void LmcConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("LmcConfig: " + msg); };
  if (patch <= 0 || patch % 4 != 0) fail("patch size must be a positive multiple of 4");
  if (latent_dim <= 0 || latent_dim % reason_groups != 0)
    fail("latent_dim " + std::to_string(latent_dim) + " not divisible by reason_groups " +
         std::to_string(reason_groups));
  if (out_channels <= 0 || out_channels % steps() != 0)
    fail("out_channels " + std::to_string(out_channels) + " not divisible by the " +
         std::to_string(steps()) + " diff steps");
}

LatentMotionCode::LatentMotionCode(LmcConfig cfg_, DType dt, Rng& rng) : cfg(cfg_) {
  cfg.validate();
  const std::int64_t in_dim = 3 * cfg.patch * cfg.patch;
  const std::int64_t out_dim = (cfg.out_channels / cfg.steps()) * cfg.tile() * cfg.tile();
  encoder = register_module(
      "encoder", std::make_shared<Linear>(in_dim, cfg.latent_dim, /*with_bias=*/true, dt, rng));
  ConvSpec spec = conv_spec(ConvKind::Full3D, {3, 3, 3}, {}, {}, cfg.reason_groups);
  reason1 = register_module("reason1", std::make_shared<Conv>(cfg.latent_dim, cfg.latent_dim,
                                                              spec, /*with_bias=*/true, dt, rng));
  reason_bn = register_module("reason_bn", std::make_shared<BatchNorm>(cfg.latent_dim, 1, dt));
  reason2 = register_module("reason2", std::make_shared<Conv>(cfg.latent_dim, cfg.latent_dim,
                                                              spec, /*with_bias=*/true, dt, rng));
  decoder = register_module("decoder",
                            std::make_shared<Linear>(cfg.latent_dim, out_dim, /*with_bias=*/true,
                                                     dt, rng, /*zero_init=*/true));
}

Tensor LatentMotionCode::rgb_diff(const Tensor& frames) {
  if (frames.rank() != 5) throw std::invalid_argument("rgb_diff: expected [B, S, 3, H, W]");
  const std::int64_t S = frames.dim(1);
  if (S < 2) throw std::invalid_argument("rgb_diff: need at least two frames");
  return sub(slice(frames, 1, 1, S - 1), slice(frames, 1, 0, S - 1));
}

Tensor LatentMotionCode::encode(const Tensor& diffs) {
  const std::int64_t B = diffs.dim(0), S = diffs.dim(1), C = diffs.dim(2);
  const std::int64_t H = diffs.dim(3), W = diffs.dim(4);
  if (C != 3) throw std::invalid_argument("encode: expected 3 diff channels");
  if (H % cfg.patch != 0 || W % cfg.patch != 0)
    throw std::invalid_argument("encode: spatial extents " + std::to_string(H) + "x" +
                                std::to_string(W) + " must be divisible by the patch size " +
                                std::to_string(cfg.patch));
  const std::int64_t ph = H / cfg.patch, pw = W / cfg.patch;
  // Gather the non-overlapping patches with a stride = kernel unfold, then map
  // every 3*patch^2 column through the shared encoder.
  Tensor cols = unfold(reshape(diffs, {B * S, C, H, W}), {cfg.patch, cfg.patch},
                       {cfg.patch, cfg.patch}, {1, 1}, {0, 0}, {ph, pw});
  Tensor v = encoder->forward(permute(cols, {0, 2, 1}));       // [B*S, ph*pw, latent]
  v = reshape(permute(v, {0, 2, 1}), {B, S, cfg.latent_dim, ph, pw});
  return permute(v, {0, 2, 1, 3, 4});  // [B, latent, S, ph, pw]
}

Tensor LatentMotionCode::reason(const Tensor& v) {
  Tensor h = reason1->forward(v);
  if (cfg.reason_nonlinearity) h = relu(reason_bn->forward(h));
  return reason2->forward(h);
}

Tensor LatentMotionCode::decode(const Tensor& codes) {
  const std::int64_t B = codes.dim(0), S = codes.dim(2);
  const std::int64_t ph = codes.dim(3), pw = codes.dim(4);
  const std::int64_t c4 = cfg.out_channels / cfg.steps(), t = cfg.tile();
  if (codes.dim(1) != cfg.latent_dim || S != cfg.steps())
    throw std::invalid_argument("decode: expected [B, latent_dim, steps, ph, pw] codes");
  Tensor cells = reshape(permute(codes, {0, 2, 3, 4, 1}), {B * S * ph * pw, cfg.latent_dim});
  Tensor patches = reshape(decoder->forward(cells), {B, S, ph, pw, c4, t, t});
  // Tile the per-cell patches back onto the grid; steps stack on channels.
  Tensor m = permute(patches, {0, 1, 4, 2, 5, 3, 6});  // [B, S, c4, ph, t, pw, t]
  return reshape(m, {B, cfg.out_channels, ph * t, pw * t});
}

Tensor LatentMotionCode::fuse(const Tensor& motion, const Tensor& stem_feat) {
  if (motion.shape() != stem_feat.shape())
    throw std::invalid_argument("fuse: motion and stem feature shapes differ");
  return add(motion, stem_feat);
}

Tensor LatentMotionCode::forward(const Tensor& frames) {
  if (frames.rank() != 5 || frames.dim(1) != cfg.steps() + 1)
    throw std::invalid_argument("forward: expected [B, 5, 3, H, W] segment frames");
  return decode(reason(encode(rgb_diff(frames))));
}

}  // namespace ean
