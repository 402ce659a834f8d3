#include "ean/soi.hpp"

#include <stdexcept>
#include <string>

#include "ean/ops.hpp"

namespace ean {

void SoiTrConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("SoiTrConfig: " + msg); };
  if (in_channels <= 0 || frames <= 0 || height <= 0 || width <= 0)
    fail("in_channels, frames, height and width must be positive");
  if (num_objects <= 0) fail("num_objects must be positive");
  if (in_channels % reduction != 0)
    fail("in_channels " + std::to_string(in_channels) + " not divisible by reduction " +
         std::to_string(reduction));
  const std::int64_t c = bottleneck();
  if (c % saliency_reduction != 0)
    fail("token width " + std::to_string(c) + " not divisible by saliency_reduction " +
         std::to_string(saliency_reduction));
  if (c % heads != 0)
    fail("token width " + std::to_string(c) + " not divisible by head count " +
         std::to_string(heads));
  if (c % up_groups != 0 || in_channels % up_groups != 0)
    fail("up_groups " + std::to_string(up_groups) + " must divide both " + std::to_string(c) +
         " and " + std::to_string(in_channels));
}

namespace {

// Replicate the outermost rows/columns of the two spatial axes `pad` times on
// each side. Unlike zero padding this keeps spatially constant inputs exactly
// constant, so a constant feature map yields uniform saliency maps.
Tensor replicate_pad_spatial(const Tensor& x, std::int64_t pad) {
  Tensor y = x;
  for (std::int64_t axis : {std::int64_t{3}, std::int64_t{4}}) {
    const std::int64_t n = y.dim(axis);
    std::vector<Tensor> parts;
    Tensor lo = slice(y, axis, 0, 1);
    Tensor hi = slice(y, axis, n - 1, 1);
    for (std::int64_t i = 0; i < pad; ++i) parts.push_back(lo);
    parts.push_back(y);
    for (std::int64_t i = 0; i < pad; ++i) parts.push_back(hi);
    y = concat(parts, axis);
  }
  return y;
}

}  // namespace

TransformerBlock::TransformerBlock(std::int64_t dim, std::int64_t heads,
                                   std::int64_t ff_expansion, bool with_ff_, DType dt, Rng& rng)
    : with_ff(with_ff_) {
  bn1 = register_module("bn1", std::make_shared<BatchNorm>(dim, /*channel_axis=*/2, dt));
  attn = register_module("attn", std::make_shared<MultiheadSelfAttention>(
                                     dim, heads, dt, rng, /*zero_init_out=*/true));
  if (with_ff) {
    bn2 = register_module("bn2", std::make_shared<BatchNorm>(dim, /*channel_axis=*/2, dt));
    ff1 = register_module("ff1", std::make_shared<Linear>(dim, dim * ff_expansion,
                                                          /*with_bias=*/true, dt, rng));
    ff2 = register_module("ff2", std::make_shared<Linear>(dim * ff_expansion, dim,
                                                          /*with_bias=*/true, dt, rng,
                                                          /*zero_init=*/true));
  }
}

Tensor TransformerBlock::forward(const Tensor& tokens) {
  Tensor h = add(tokens, attn->forward(bn1->forward(tokens)));
  if (with_ff) h = add(h, ff2->forward(relu(ff1->forward(bn2->forward(h)))));
  return h;
}

SparseObjectTransformer::SparseObjectTransformer(SoiTrConfig cfg_, DType dt, Rng& rng)
    : cfg(cfg_) {
  cfg.validate();
  const std::int64_t C = cfg.in_channels;
  const std::int64_t c = cfg.bottleneck();
  const std::int64_t s = c / cfg.saliency_reduction;

  down = register_module("down", std::make_shared<Conv>(C, c, conv_spec(ConvKind::Full3D, {1, 1, 1}),
                                                        /*with_bias=*/true, dt, rng));
  sal1 = register_module("sal1", std::make_shared<Conv>(c, s, conv_spec(ConvKind::Spatial2D, {1, 1}),
                                                        /*with_bias=*/true, dt, rng));
  sal2 = register_module("sal2", std::make_shared<Conv>(s, s, conv_spec(ConvKind::Temporal1D, {3}),
                                                        /*with_bias=*/true, dt, rng));
  // The 5x5 layer runs on replicate-padded input with no implicit padding.
  ConvSpec spec5 = conv_spec(ConvKind::Spatial2D, {5, 5});
  spec5.padding = {0, 0};
  sal3 = register_module("sal3", std::make_shared<Conv>(s, s, spec5, /*with_bias=*/true, dt, rng));
  // No bias on the last layer: a per-map bias shifts every logit of that
  // map's spatial softmax uniformly and can never receive a gradient.
  sal4 = register_module("sal4", std::make_shared<Conv>(s, cfg.num_objects,
                                                        conv_spec(ConvKind::Spatial2D, {1, 1}),
                                                        /*with_bias=*/false, dt, rng));
  {
    // The hidden saliency width can be as small as one channel; start its
    // pre-activations positive so the ReLU layers cannot be dead at init.
    NoGradGuard ng;
    for (auto& l : {sal1, sal2, sal3}) copy_values(l->b, Tensor::full(l->b.shape(), 0.2, dt));
  }
  pos_embed = register_parameter(
      "pos_embed", Tensor::randn({cfg.frames, c, cfg.height, cfg.width}, rng, 0.02, dt));
  for (std::int64_t b = 0; b < cfg.blocks; ++b) {
    auto blk = std::make_shared<TransformerBlock>(c, cfg.heads, cfg.ff_expansion, cfg.with_ff,
                                                  dt, rng);
    register_module("block" + std::to_string(b + 1), blk);
    stack.push_back(blk);
  }
  up = register_module(
      "up", std::make_shared<Conv>(c, C,
                                   conv_spec(ConvKind::Full3D, {1, 1, 1}, {}, {}, cfg.up_groups),
                                   /*with_bias=*/false, dt, rng, /*zero_init=*/true));
}

Tensor SparseObjectTransformer::reduce(const Tensor& x) { return down->forward(x); }

Tensor SparseObjectTransformer::saliency(const Tensor& x_reduced) {
  Tensor h = relu(sal1->forward(x_reduced));
  h = relu(sal2->forward(h));
  h = relu(sal3->forward(replicate_pad_spatial(h, 2)));
  Tensor logits = sal4->forward(h);  // [B, N, T, H, W]
  const std::int64_t B = logits.dim(0), N = logits.dim(1), T = logits.dim(2);
  const std::int64_t H = logits.dim(3), W = logits.dim(4);
  Tensor flat = reshape(logits, {B, N, T, H * W});
  return reshape(softmax(flat, 3), {B, N, T, H, W});
}

Tensor SparseObjectTransformer::pool_tokens(const Tensor& x_reduced, const Tensor& maps) {
  const std::int64_t B = x_reduced.dim(0), c = x_reduced.dim(1), T = x_reduced.dim(2);
  const std::int64_t H = x_reduced.dim(3), W = x_reduced.dim(4);
  const std::int64_t N = maps.dim(1);
  if (maps.dim(0) != B || maps.dim(2) != T || maps.dim(3) != H || maps.dim(4) != W)
    throw std::invalid_argument("pool_tokens: saliency maps do not match features");
  if (T != cfg.frames || H != cfg.height || W != cfg.width)
    throw std::invalid_argument("pool_tokens: feature extents do not match configured frames/height/width");

  // Add the per-frame positional embedding, broadcast over the batch.
  Tensor pos = reshape(permute(pos_embed, {1, 0, 2, 3}), {1, c, T, H, W});
  Tensor feat = add(x_reduced, broadcast_to(pos, x_reduced.shape()));

  // token(n, t) = sum over sites of maps[n, t, site] * feat[:, t, site],
  // batched as one matmul per (b, t): [N, H*W] @ [H*W, c].
  Tensor a = permute(reshape(feat, {B, c, T, H * W}), {0, 2, 3, 1});   // [B, T, H*W, c]
  Tensor o = permute(reshape(maps, {B, N, T, H * W}), {0, 2, 1, 3});   // [B, T, N, H*W]
  Tensor tokens = matmul(o, a);                                        // [B, T, N, c]
  return reshape(permute(tokens, {0, 2, 1, 3}), {B, N * T, c});        // object-major
}

Tensor SparseObjectTransformer::interact(const Tensor& tokens) {
  Tensor h = tokens;
  for (auto& blk : stack) h = blk->forward(h);
  return h;
}

Tensor SparseObjectTransformer::fuse(const Tensor& x, const Tensor& tokens) {
  const std::int64_t B = x.dim(0), C = x.dim(1);
  Tensor gap = global_avg_pool(x, {2, 3, 4});            // [B, C]
  Tensor tok = mean(tokens, {1});                        // [B, C'']
  Tensor lifted = up->forward(reshape(tok, {B, cfg.bottleneck(), 1, 1, 1}));
  return add(gap, reshape(lifted, {B, C}));
}

Tensor SparseObjectTransformer::forward(const Tensor& x) {
  Tensor xr = reduce(x);
  Tensor maps = saliency(xr);
  last_saliency = maps.detach();
  Tensor tokens = pool_tokens(xr, maps);
  return fuse(x, interact(tokens));
}

}  // namespace ean
