#pragma once

#include "ean/nn.hpp"

namespace ean {

struct EabConfig {
  std::int64_t in_channels = 0;
  // Branch count G: spatial kernels {1, 3, .., 2G-1} and likewise temporal.
  // Sizes >= 5 are realized as 3-tap kernels with dilation (k-1)/2, which
  // covers the same receptive field with fewer taps.
  std::int64_t groups = 3;
  // Channel grouping of the 1x1x1 down/up projections (cost control; the
  // branches and the mixing matrix still span all bottleneck channels).
  std::int64_t projection_groups = 4;
  std::int64_t bottleneck_factor = 4;   // C' = C / 4
  std::int64_t scale_reduction = 16;    // perceiver channel shrink (min 1)
  bool include_maxpool_branch = true;
  // When false the mixing matrix is pinned to the identity (the static
  // ablation arm). The perceiver is still constructed so both arms are
  // weight-matched, but it is never evaluated.
  bool dynamic = true;

  std::int64_t bottleneck() const { return in_channels / bottleneck_factor; }
  std::int64_t perceiver_channels() const {
    return std::max<std::int64_t>(1, in_channels / scale_reduction);
  }
  void validate() const;
};

// Residual block that fuses fixed-scale spatial and temporal convolution
// branches through a per-sample channel-mixing matrix M predicted from the
// input, emulating a video-adaptive spatial-temporal kernel.
//
//   x -> down 1x1x1 + BN + ReLU -> h
//   h -> G spatial branches (BN+ReLU) -> concat
//     -> per-sample mixing: every (t,h,w) channel vector multiplied by M
//     -> G temporal branches -> concat -> (+ 3x3x3 max-pool of h)
//     -> up 1x1x1 (zero-initialized) -> + x
//
// M is produced fresh per forward pass by the scale perceiver; at init the
// perceiver's final linear layer is zero so M = I, and the zero up-projection
// makes the whole block an exact identity map.
class EventAdaptiveBlock : public Module {
 public:
  EventAdaptiveBlock(EabConfig cfg, DType dt, Rng& rng);

  Tensor forward(const Tensor& x);

  // Scale perceiver: [B, C, T, H, W] -> M [B, C', C'].
  // 1x1x1 reduce (C -> max(1, C/16)) -> two depthwise 5x5x5 stride-2 convs
  // (BN+ReLU; stride degrades to 1 on axes shorter than the kernel) -> global
  // average pool -> zero-init linear to C'^2 -> + I.
  Tensor perceive_scale(const Tensor& x);

  // Branch stack on the down-projected tensor h given a mixing matrix M.
  // M = I makes this a static parallel (2+1)D branch stack; M = 0 annihilates
  // the output.
  Tensor synthesize_and_apply(const Tensor& h, const Tensor& M);

  EabConfig cfg;
  // Detached copy of the most recent mixing matrix [B, C', C'], kept for
  // inspection tooling (kernel-weight reports).
  Tensor last_mixing;
  std::shared_ptr<Conv> down, up;
  std::shared_ptr<BatchNorm> down_bn;
  std::shared_ptr<Conv> scale_reduce, scale_conv_a, scale_conv_b;
  std::shared_ptr<BatchNorm> scale_bn_a, scale_bn_b;
  std::shared_ptr<Linear> scale_fc;
  std::vector<std::shared_ptr<Conv>> spatial;        // one per group
  std::vector<std::shared_ptr<BatchNorm>> spatial_bn;
  std::vector<std::shared_ptr<Conv>> temporal;       // one per group
};

// Conv specs used for the fixed-scale branches (3-tap dilated form for k >= 5).
ConvSpec spatial_branch_spec(std::int64_t k);
ConvSpec temporal_branch_spec(std::int64_t k);

// Per-sample branch weights read off |M|: spatial branch j sums the absolute
// values of M's columns in channel group j; temporal branch i sums the rows in
// group i. Branches are labeled by kernel size: S-1, S-3, S-5, T-1, T-3, T-5.
struct BranchWeight {
  std::string branch;
  double weight = 0;
};
std::vector<std::vector<BranchWeight>> kernel_weights(const Tensor& M,
                                                      const EabConfig& cfg);

}  // namespace ean
