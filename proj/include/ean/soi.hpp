#pragma once

#include "ean/nn.hpp"

namespace ean {

struct SoiTrConfig {
  std::int64_t in_channels = 0;  // stage-5 feature channels C
  std::int64_t frames = 0;       // T
  std::int64_t height = 0;       // stage-5 spatial extent
  std::int64_t width = 0;
  std::int64_t num_objects = 4;         // saliency maps per frame
  std::int64_t reduction = 4;           // token width C'' = C / 4
  std::int64_t saliency_reduction = 8;  // saliency-net hidden width C'' / 8
  std::int64_t heads = 4;
  std::int64_t blocks = 2;
  std::int64_t ff_expansion = 2;
  bool with_ff = true;     // feed-forward sublayer in each transformer block
  std::int64_t up_groups = 2;  // grouping of the zero-init output projection

  std::int64_t bottleneck() const { return in_channels / reduction; }
  void validate() const;
};

// Pre-norm transformer block over tokens [B, L, C]: BN -> attention ->
// residual, then BN -> 2-layer feed-forward -> residual. Normalization is
// batch norm over (batch x tokens) per channel. The attention output
// projection and the second feed-forward layer are zero-initialized, so the
// block starts as an identity map.
class TransformerBlock : public Module {
 public:
  TransformerBlock(std::int64_t dim, std::int64_t heads, std::int64_t ff_expansion,
                   bool with_ff, DType dt, Rng& rng);
  Tensor forward(const Tensor& tokens);

  std::shared_ptr<BatchNorm> bn1, bn2;
  std::shared_ptr<MultiheadSelfAttention> attn;
  std::shared_ptr<Linear> ff1, ff2;
  bool with_ff = true;
};

// Sparse object interaction head for stage-5 features [B, C, T, H, W]:
//   (1) down-project to C'' channels;
//   (2) a light 4-layer saliency net regresses N spatially-softmaxed object
//       location maps per frame (no external detector);
//   (3) saliency-weighted spatial pooling of (features + learnable per-frame
//       positional embedding) yields N*T object tokens, object-major;
//   (4) a small transformer models token interactions;
//   (5) fuse: global average of x plus a zero-initialized grouped projection
//       of the mean token, so the module is transparent at init.
class SparseObjectTransformer : public Module {
 public:
  SparseObjectTransformer(SoiTrConfig cfg, DType dt, Rng& rng);

  Tensor forward(const Tensor& x);                 // -> [B, C]
  Tensor reduce(const Tensor& x);                  // -> [B, C'', T, H, W]
  // Saliency maps over the reduced features; nonnegative, each (b, n, t)
  // slice sums to 1 over (H, W).
  Tensor saliency(const Tensor& x_reduced);        // -> [B, N, T, H, W]
  // Object tokens F: token (n, t) = sum over sites of (E_t + x) * O_(n,t).
  Tensor pool_tokens(const Tensor& x_reduced, const Tensor& maps);  // [B, N*T, C'']
  Tensor interact(const Tensor& tokens);           // transformer stack
  Tensor fuse(const Tensor& x, const Tensor& tokens);  // -> [B, C]

  SoiTrConfig cfg;
  // Detached copy of the most recent saliency maps [B, N, T, H, W], kept for
  // inspection tooling.
  Tensor last_saliency;
  std::shared_ptr<Conv> down;
  std::shared_ptr<Conv> sal1, sal2, sal3, sal4;
  Tensor pos_embed;  // [T, C'', H, W]
  std::vector<std::shared_ptr<TransformerBlock>> stack;
  std::shared_ptr<Conv> up;
};

}  // namespace ean
