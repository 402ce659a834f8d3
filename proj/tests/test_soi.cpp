#include "ean/soi.hpp"

#include <cmath>
#include <vector>

#include "doctest.h"
#include "ean/ops.hpp"
#include "helpers.hpp"

using namespace ean;
using namespace testutil;

namespace {

SoiTrConfig small_cfg(std::int64_t T, std::int64_t H, std::int64_t W) {
  SoiTrConfig cfg;
  cfg.in_channels = 32;  // token width 8
  cfg.frames = T;
  cfg.height = H;
  cfg.width = W;
  return cfg;
}

// Reorder tokens [B, L, C] along the token axis.
Tensor permute_tokens(const Tensor& t, const std::vector<std::int64_t>& pi) {
  std::vector<Tensor> rows;
  for (std::int64_t idx : pi) rows.push_back(slice(t, 1, idx, 1));
  return concat(rows, 1);
}

}  // namespace

TEST_CASE("soi: saliency maps are valid spatial distributions") {
  Rng rng(901);
  SoiTrConfig cfg = small_cfg(3, 4, 5);
  SparseObjectTransformer soi(cfg, DType::f32, rng);
  soi.eval();
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = Tensor::randn({2, cfg.in_channels, 3, 4, 5}, rng);
    Tensor maps = soi.saliency(soi.reduce(x));
    REQUIRE(maps.shape() == std::vector<std::int64_t>{2, 4, 3, 4, 5});
    auto v = maps.vec<float>();
    for (float p : v) CHECK(p >= 0.0f);
    Tensor sums = sum(maps, {3, 4});
    for (double s : sums.vec<float>()) CHECK(std::abs(s - 1.0) < 1e-5);
  }
}

TEST_CASE("soi: constant input yields uniform maps") {
  Rng rng(902);
  SoiTrConfig cfg = small_cfg(3, 5, 6);
  SparseObjectTransformer soi(cfg, DType::f32, rng);
  soi.eval();
  Tensor x = Tensor::full({2, cfg.in_channels, 3, 5, 6}, 0.7);
  Tensor maps = soi.saliency(soi.reduce(x));
  const double uniform = 1.0 / (5.0 * 6.0);
  for (double p : maps.vec<float>()) CHECK(std::abs(p - uniform) < 1e-6);
}

TEST_CASE("soi: saliency shape for an 8-frame 7x7 stage") {
  Rng rng(903);
  SoiTrConfig cfg = small_cfg(8, 7, 7);
  SparseObjectTransformer soi(cfg, DType::f32, rng);
  soi.eval();
  Tensor x = Tensor::randn({2, cfg.in_channels, 8, 7, 7}, rng);
  Tensor maps = soi.saliency(soi.reduce(x));
  CHECK(maps.shape() == std::vector<std::int64_t>{2, 4, 8, 7, 7});
}

TEST_CASE("soi: one-hot maps select single-site features, object-major") {
  Rng rng(904);
  SoiTrConfig cfg = small_cfg(3, 4, 4);
  SparseObjectTransformer soi(cfg, DType::f32, rng);
  soi.eval();
  {
    NoGradGuard ng;
    copy_values(soi.pos_embed, Tensor::zeros(soi.pos_embed.shape()));
  }
  const std::int64_t B = 2, N = cfg.num_objects, T = 3, H = 4, W = 4;
  Tensor x = Tensor::randn({B, cfg.in_channels, T, H, W}, rng);
  Tensor xr = soi.reduce(x).detach();
  // Map (n, t) concentrated at h = n % H, w = t % W.
  Tensor maps = Tensor::zeros({B, N, T, H, W});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t t = 0; t < T; ++t) {
        std::int64_t h = n % H, w = t % W;
        maps.impl()->data->write((((b * N + n) * T + t) * H + h) * W + w, 1.0);
      }
  Tensor tokens = soi.pool_tokens(xr, maps);
  const std::int64_t c = cfg.bottleneck();
  REQUIRE(tokens.shape() == std::vector<std::int64_t>{B, N * T, c});
  auto tv = tokens.vec<float>();
  auto xv = xr.vec<float>();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t t = 0; t < T; ++t)
        for (std::int64_t ch = 0; ch < c; ++ch) {
          std::int64_t h = n % H, w = t % W;
          double got = tv[(b * N * T + n * T + t) * c + ch];
          double want = xv[(((b * c + ch) * T + t) * H + h) * W + w];
          CHECK(std::abs(got - want) < 1e-6);
        }
}

TEST_CASE("soi: uniform maps pool to the spatial mean") {
  Rng rng(905);
  SoiTrConfig cfg = small_cfg(2, 3, 5);
  SparseObjectTransformer soi(cfg, DType::f32, rng);
  soi.eval();
  {
    NoGradGuard ng;
    copy_values(soi.pos_embed, Tensor::zeros(soi.pos_embed.shape()));
  }
  const std::int64_t B = 2, N = 4, T = 2, H = 3, W = 5, c = cfg.bottleneck();
  Tensor x = Tensor::randn({B, cfg.in_channels, T, H, W}, rng);
  Tensor xr = soi.reduce(x).detach();
  Tensor maps = Tensor::full({B, N, T, H, W}, 1.0 / (H * W));
  Tensor tokens = soi.pool_tokens(xr, maps);
  Tensor site_mean = mean(xr, {3, 4});  // [B, c, T]
  auto tv = tokens.vec<float>();
  auto mv = site_mean.vec<float>();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t t = 0; t < T; ++t)
        for (std::int64_t ch = 0; ch < c; ++ch) {
          double got = tv[(b * N * T + n * T + t) * c + ch];
          double want = mv[(b * c + ch) * T + t];
          CHECK(std::abs(got - want) < 1e-5);
        }
}

TEST_CASE("soi: pooling matches a direct loop over sites") {
  Rng rng(906);
  SoiTrConfig cfg = small_cfg(3, 4, 3);
  SparseObjectTransformer soi(cfg, DType::f32, rng);
  soi.eval();
  const std::int64_t B = 2, N = 4, T = 3, H = 4, W = 3, c = cfg.bottleneck();
  Tensor xr = Tensor::randn({B, c, T, H, W}, rng).detach();
  Tensor maps = Tensor::rand_uniform({B, N, T, H, W}, rng, 0.0, 1.0).detach();
  Tensor tokens = soi.pool_tokens(xr, maps);
  auto tv = tokens.vec<float>();
  auto xv = xr.vec<float>();
  auto ov = maps.vec<float>();
  auto ev = soi.pos_embed.vec<float>();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t t = 0; t < T; ++t)
        for (std::int64_t ch = 0; ch < c; ++ch) {
          double acc = 0.0;
          for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w = 0; w < W; ++w) {
              double feat = xv[(((b * c + ch) * T + t) * H + h) * W + w] +
                            ev[((t * c + ch) * H + h) * W + w];
              acc += ov[(((b * N + n) * T + t) * H + h) * W + w] * feat;
            }
          double got = tv[(b * N * T + n * T + t) * c + ch];
          CHECK(std::abs(got - acc) < 1e-4);
        }
}

TEST_CASE("soi: pooled tokens stay inside the feature range") {
  Rng rng(907);
  SoiTrConfig cfg = small_cfg(2, 4, 4);
  SparseObjectTransformer soi(cfg, DType::f32, rng);
  soi.eval();
  {
    NoGradGuard ng;
    copy_values(soi.pos_embed, Tensor::zeros(soi.pos_embed.shape()));
  }
  const std::int64_t B = 2, N = 4, T = 2, H = 4, W = 4, c = cfg.bottleneck();
  Tensor x = Tensor::randn({B, cfg.in_channels, T, H, W}, rng);
  Tensor xr = soi.reduce(x).detach();
  Tensor tokens = soi.pool_tokens(xr, soi.saliency(xr));
  auto tv = tokens.vec<float>();
  auto xv = xr.vec<float>();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t t = 0; t < T; ++t)
        for (std::int64_t ch = 0; ch < c; ++ch) {
          double lo = 1e30, hi = -1e30;
          for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w = 0; w < W; ++w) {
              double v = xv[(((b * c + ch) * T + t) * H + h) * W + w];
              lo = std::min(lo, v);
              hi = std::max(hi, v);
            }
          double got = tv[(b * N * T + n * T + t) * c + ch];
          CHECK(got >= lo - 1e-5);
          CHECK(got <= hi + 1e-5);
        }
}

TEST_CASE("soi: transformer stack is the identity at init") {
  Rng rng(908);
  SoiTrConfig cfg = small_cfg(2, 3, 3);
  SparseObjectTransformer soi(cfg, DType::f32, rng);
  Tensor tokens = Tensor::randn({2, 8, cfg.bottleneck()}, rng);
  CHECK(bitwise_equal(soi.interact(tokens), tokens));
  soi.eval();
  CHECK(bitwise_equal(soi.interact(tokens), tokens));
}

TEST_CASE("soi: transformer is token-permutation equivariant") {
  Rng rng(909);
  SoiTrConfig cfg = small_cfg(2, 3, 3);
  SparseObjectTransformer soi(cfg, DType::f32, rng);
  for (auto& blk : soi.stack) {
    randomize(blk->attn->wo, rng);
    randomize(blk->ff2->w, rng);
    randomize(blk->ff2->b, rng, 0.1);
  }
  Tensor tokens = Tensor::randn({2, 6, cfg.bottleneck()}, rng).detach();
  std::vector<std::int64_t> pi = {3, 0, 5, 1, 4, 2};
  Tensor a = permute_tokens(soi.interact(tokens), pi);
  Tensor b = soi.interact(permute_tokens(tokens, pi));
  CHECK(rel_err(a, b) < 1e-5);
}

TEST_CASE("soi: fuse with the zero-init projection is the global average") {
  Rng rng(910);
  SoiTrConfig cfg = small_cfg(2, 3, 3);
  SparseObjectTransformer soi(cfg, DType::f32, rng);
  soi.eval();
  Tensor x = Tensor::randn({2, cfg.in_channels, 2, 3, 3}, rng);
  Tensor tokens = Tensor::randn({2, 8, cfg.bottleneck()}, rng);
  Tensor fused = soi.fuse(x, tokens);
  REQUIRE(fused.shape() == std::vector<std::int64_t>{2, cfg.in_channels});
  CHECK(bitwise_equal(fused, global_avg_pool(x, {2, 3, 4})));
}

TEST_CASE("soi: whole module is transparent at init") {
  Rng rng(911);
  SoiTrConfig cfg = small_cfg(3, 4, 4);
  SparseObjectTransformer soi(cfg, DType::f32, rng);
  Tensor x = Tensor::randn({2, cfg.in_channels, 3, 4, 4}, rng);
  SUBCASE("train mode") { CHECK(bitwise_equal(soi.forward(x), global_avg_pool(x, {2, 3, 4}))); }
  SUBCASE("eval mode") {
    soi.eval();
    CHECK(bitwise_equal(soi.forward(x), global_avg_pool(x, {2, 3, 4})));
  }
}

TEST_CASE("soi: config validation rejects bad widths") {
  Rng rng(912);
  SoiTrConfig cfg = small_cfg(2, 3, 3);
  cfg.in_channels = 30;  // not divisible by the reduction factor
  CHECK_THROWS_WITH_AS(SparseObjectTransformer(cfg, DType::f32, rng),
                       doctest::Contains("not divisible"), std::invalid_argument);
  SoiTrConfig cfg2 = small_cfg(2, 3, 3);
  cfg2.in_channels = 16;  // token width 4 < saliency granularity 8
  CHECK_THROWS_WITH_AS(SparseObjectTransformer(cfg2, DType::f32, rng),
                       doctest::Contains("saliency_reduction"), std::invalid_argument);
}

TEST_CASE("soi: mismatched saliency maps are rejected") {
  Rng rng(913);
  SoiTrConfig cfg = small_cfg(2, 3, 3);
  SparseObjectTransformer soi(cfg, DType::f32, rng);
  Tensor xr = Tensor::randn({1, cfg.bottleneck(), 2, 3, 3}, rng);
  Tensor maps = Tensor::full({1, 4, 2, 3, 4}, 0.1);
  CHECK_THROWS_AS(soi.pool_tokens(xr, maps), std::invalid_argument);
}

TEST_CASE("soi: classification gradient reaches the saliency net") {
  Rng rng(914);
  SoiTrConfig cfg = small_cfg(2, 3, 3);
  SparseObjectTransformer soi(cfg, DType::f32, rng);
  randomize(soi.up->w, rng);  // open the output path
  Tensor x = Tensor::randn({2, cfg.in_channels, 2, 3, 3}, rng);
  Tensor r = Tensor::randn({2, cfg.in_channels}, rng).detach();
  backward(sum_all(mul(soi.forward(x), r)));
  for (const Tensor& p : {soi.sal1->w, soi.sal2->w, soi.sal3->w, soi.sal4->w, soi.pos_embed}) {
    REQUIRE(p.has_grad());
    double norm = 0.0;
    for (double g : p.grad().vec<float>()) norm += g * g;
    CHECK(norm > 0.0);
  }
}

TEST_CASE("soi: whole module gradient check (f64)") {
  Rng rng(915);
  SoiTrConfig cfg = small_cfg(2, 3, 3);
  SparseObjectTransformer soi(cfg, DType::f64, rng);
  randomize(soi.up->w, rng);
  for (auto& blk : soi.stack) {
    randomize(blk->attn->wo, rng);
    randomize(blk->ff2->w, rng);
  }
  {
    // Keep saliency pre-activations well clear of the ReLU kink so the
    // centered differences stay two-sided.
    NoGradGuard ng;
    for (auto& l : {soi.sal1, soi.sal2, soi.sal3})
      copy_values(l->b, Tensor::full(l->b.shape(), 0.5, DType::f64));
  }
  Tensor x = Tensor::rand_uniform({1, cfg.in_channels, 2, 3, 3}, rng, -0.8, 0.8, DType::f64);
  Tensor r = Tensor::rand_uniform({1, cfg.in_channels}, rng, -1.0, 1.0, DType::f64).detach();
  module_gradcheck(soi, {x}, [&]() { return sum_all(mul(soi.forward(x), r)); });
}
