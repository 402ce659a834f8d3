#pragma once

#include "ean/nn.hpp"

namespace ean {

struct LmcConfig {
  std::int64_t patch = 32;        // side of a square input patch
  std::int64_t latent_dim = 128;  // latent width per patch
  std::int64_t reason_groups = 16;
  std::int64_t out_channels = 64;  // stem width the motion feature fuses into
  bool reason_nonlinearity = true;  // BN+ReLU between the two reasoning convs

  std::int64_t steps() const { return 4; }          // diffs per 5-frame segment
  std::int64_t tile() const { return patch / 4; }   // decoded patch side
  void validate() const;
};

// Latent motion code: per 5-frame segment, consecutive-frame RGB differences
// are patch-encoded into a latent grid, refined by two grouped 3D convolutions
// over (diff step, grid row, grid col), and decoded into a motion feature map
// matching the backbone stem output (stride-4 spatial, stem channel count).
// The decoder is zero-initialized, so the motion feature starts at zero and
// fusing it into the stem is transparent at init.
class LatentMotionCode : public Module {
 public:
  LatentMotionCode(LmcConfig cfg, DType dt, Rng& rng);

  // frames [B, 5, 3, H, W] -> motion feature [B, out_channels, H/4, W/4]
  Tensor forward(const Tensor& frames);

  // Consecutive differences along the frame axis: [B, S, 3, H, W] -> S-1 diffs.
  static Tensor rgb_diff(const Tensor& frames);
  // Non-overlapping patch flattening + shared linear map onto the latent grid:
  // diffs [B, S, 3, H, W] -> [B, latent_dim, S, H/patch, W/patch].
  Tensor encode(const Tensor& diffs);
  Tensor reason(const Tensor& v);  // shape-preserving refinement
  // Shared linear per grid cell to an (out/4, tile, tile) patch; steps are
  // stacked on channels: [B, latent, S, Ph, Pw] -> [B, out, tile*Ph, tile*Pw].
  Tensor decode(const Tensor& codes);
  // Elementwise sum with the stem feature of the segment's first frame.
  static Tensor fuse(const Tensor& motion, const Tensor& stem_feat);

  LmcConfig cfg;
  std::shared_ptr<Linear> encoder;  // 3*patch^2 -> latent_dim
  std::shared_ptr<Conv> reason1, reason2;
  std::shared_ptr<BatchNorm> reason_bn;
  std::shared_ptr<Linear> decoder;  // latent_dim -> (out/4)*tile^2, zero-init
};

}  // namespace ean
