#include "ean/eab.hpp"

#include <cmath>

namespace ean {

void EabConfig::validate() const {
  check(in_channels >= 1, "block config: in_channels must be positive");
  check(groups >= 1, "block config: group count must be positive");
  check(in_channels % bottleneck_factor == 0,
        "block config: in_channels " + std::to_string(in_channels) +
            " not divisible by bottleneck factor " + std::to_string(bottleneck_factor));
  check(bottleneck() % groups == 0,
        "block config: bottleneck channels " + std::to_string(bottleneck()) +
            " not divisible by group count " + std::to_string(groups));
  check(in_channels % projection_groups == 0 && bottleneck() % projection_groups == 0,
        "block config: projection groups " + std::to_string(projection_groups) +
            " must divide both " + std::to_string(in_channels) + " and " +
            std::to_string(bottleneck()) + " channels");
}

ConvSpec spatial_branch_spec(std::int64_t k) {
  check(k >= 1 && k % 2 == 1, "branch kernels must be odd");
  if (k >= 5)
    return conv_spec(ConvKind::Spatial2D, {3, 3}, {}, {(k - 1) / 2, (k - 1) / 2});
  return conv_spec(ConvKind::Spatial2D, {k, k});
}

ConvSpec temporal_branch_spec(std::int64_t k) {
  check(k >= 1 && k % 2 == 1, "branch kernels must be odd");
  if (k >= 5) return conv_spec(ConvKind::Temporal1D, {3}, {}, {(k - 1) / 2});
  return conv_spec(ConvKind::Temporal1D, {k});
}

EventAdaptiveBlock::EventAdaptiveBlock(EabConfig c, DType dt, Rng& rng) : cfg(c) {
  cfg.validate();
  const std::int64_t C = cfg.in_channels, Cp = cfg.bottleneck();
  const std::int64_t c16 = cfg.perceiver_channels();

  down = register_module(
      "down", std::make_shared<Conv>(
                  C, Cp, conv_spec(ConvKind::Full3D, {1, 1, 1}, {}, {}, cfg.projection_groups),
                  false, dt, rng));
  down_bn = register_module("down_bn", std::make_shared<BatchNorm>(Cp, 1, dt));

  scale_reduce = register_module(
      "scale_reduce",
      std::make_shared<Conv>(C, c16, conv_spec(ConvKind::Full3D, {1, 1, 1}), true, dt, rng));
  const ConvSpec s5 = conv_spec(ConvKind::Full3D, {5, 5, 5}, {2, 2, 2}, {}, c16);
  scale_conv_a = register_module("scale_conv_a",
                                 std::make_shared<Conv>(c16, c16, s5, false, dt, rng));
  scale_bn_a = register_module("scale_bn_a", std::make_shared<BatchNorm>(c16, 1, dt));
  scale_conv_b = register_module("scale_conv_b",
                                 std::make_shared<Conv>(c16, c16, s5, false, dt, rng));
  scale_bn_b = register_module("scale_bn_b", std::make_shared<BatchNorm>(c16, 1, dt));
  scale_fc = register_module(
      "scale_fc", std::make_shared<Linear>(c16, Cp * Cp, true, dt, rng, /*zero_init=*/true));

  const std::int64_t cg = Cp / cfg.groups;
  for (std::int64_t j = 0; j < cfg.groups; ++j) {
    const std::int64_t k = 2 * j + 1;
    spatial.push_back(register_module(
        "spatial" + std::to_string(k),
        std::make_shared<Conv>(cg, cg, spatial_branch_spec(k), false, dt, rng)));
    spatial_bn.push_back(register_module("spatial" + std::to_string(k) + "_bn",
                                         std::make_shared<BatchNorm>(cg, 1, dt)));
    temporal.push_back(register_module(
        "temporal" + std::to_string(k),
        std::make_shared<Conv>(cg, cg, temporal_branch_spec(k), false, dt, rng)));
  }

  up = register_module(
      "up", std::make_shared<Conv>(
                Cp, C, conv_spec(ConvKind::Full3D, {1, 1, 1}, {}, {}, cfg.projection_groups),
                false, dt, rng, /*zero_init=*/true));
}

namespace {

// Stride-2 conv whose stride degrades to 1 on axes shorter than the kernel,
// so small feature maps pass through instead of erroring.
Tensor degraded_stride_conv(const Tensor& x, const Conv& layer) {
  ConvSpec s = layer.spec;
  for (int a = 0; a < 3; ++a)
    if (x.dim(2 + a) < s.kernel[static_cast<std::size_t>(a)])
      s.stride[static_cast<std::size_t>(a)] = 1;
  return conv(x, layer.w, s);
}

}  // namespace

Tensor EventAdaptiveBlock::perceive_scale(const Tensor& x) {
  check(x.rank() == 5 && x.dim(1) == cfg.in_channels,
        "scale perceiver: expected [B, " + std::to_string(cfg.in_channels) +
            ", T, H, W], got " + shape_str(x.shape()));
  Tensor h = scale_reduce->forward(x);
  h = relu(scale_bn_a->forward(degraded_stride_conv(h, *scale_conv_a)));
  h = relu(scale_bn_b->forward(degraded_stride_conv(h, *scale_conv_b)));
  Tensor pooled = global_avg_pool(h, {2, 3, 4});  // [B, c16]
  const std::int64_t Cp = cfg.bottleneck();
  Tensor M = reshape(scale_fc->forward(pooled), {x.dim(0), Cp, Cp});
  Tensor eye = Tensor::zeros({Cp, Cp}, x.dtype());
  for (std::int64_t i = 0; i < Cp; ++i) eye.impl()->data->write(i * Cp + i, 1.0);
  return add(M, eye);  // identity at init (zero-init linear)
}

Tensor EventAdaptiveBlock::synthesize_and_apply(const Tensor& h, const Tensor& M) {
  const std::int64_t Cp = cfg.bottleneck(), G = cfg.groups, cg = Cp / G;
  check(h.rank() == 5 && h.dim(1) == Cp,
        "branch stack: expected bottleneck input [B, " + std::to_string(Cp) +
            ", T, H, W], got " + shape_str(h.shape()));
  check(M.rank() == 3 && M.dim(0) == h.dim(0) && M.dim(1) == Cp && M.dim(2) == Cp,
        "branch stack: mixing matrix shape " + shape_str(M.shape()) +
            " does not match [B, C', C']");

  std::vector<Tensor> sp;
  for (std::int64_t j = 0; j < G; ++j)
    sp.push_back(relu(spatial_bn[static_cast<std::size_t>(j)]->forward(
        spatial[static_cast<std::size_t>(j)]->forward(slice(h, 1, j * cg, cg)))));
  Tensor s = concat(sp, 1);

  // Per-sample channel mixing, shared across every spatial-temporal site.
  const std::int64_t B = h.dim(0), T = h.dim(2), H = h.dim(3), W = h.dim(4);
  Tensor mixed = reshape(matmul(M, reshape(s, {B, Cp, T * H * W})), {B, Cp, T, H, W});

  std::vector<Tensor> tp;
  for (std::int64_t i = 0; i < G; ++i)
    tp.push_back(temporal[static_cast<std::size_t>(i)]->forward(
        slice(mixed, 1, i * cg, cg)));
  return concat(tp, 1);
}

Tensor EventAdaptiveBlock::forward(const Tensor& x) {
  Tensor h = relu(down_bn->forward(down->forward(x)));
  Tensor M;
  if (cfg.dynamic) {
    M = perceive_scale(x);
  } else {
    const std::int64_t Cp = cfg.bottleneck();
    Tensor eye = Tensor::zeros({1, Cp, Cp}, x.dtype());
    for (std::int64_t i = 0; i < Cp; ++i) eye.impl()->data->write(i * Cp + i, 1.0);
    M = broadcast_to(eye, {x.dim(0), Cp, Cp});
  }
  last_mixing = M.detach();
  Tensor y = synthesize_and_apply(h, M);
  if (cfg.include_maxpool_branch)
    y = add(y, pool3d(h, PoolKind::Max, {3, 3, 3}, {1, 1, 1}));
  return add(up->forward(y), x);
}

std::vector<std::vector<BranchWeight>> kernel_weights(const Tensor& M,
                                                      const EabConfig& cfg) {
  check(M.rank() == 3 && M.dim(1) == M.dim(2),
        "kernel weights: expected [B, C', C'], got " + shape_str(M.shape()));
  const std::int64_t B = M.dim(0), Cp = M.dim(1), G = cfg.groups;
  check(Cp % G == 0, "kernel weights: " + std::to_string(Cp) +
                         " channels not divisible by " + std::to_string(G) + " groups");
  const std::int64_t cg = Cp / G;
  std::vector<std::vector<BranchWeight>> out(static_cast<std::size_t>(B));
  for (std::int64_t b = 0; b < B; ++b) {
    auto& row = out[static_cast<std::size_t>(b)];
    for (std::int64_t j = 0; j < G; ++j) {  // columns feed the spatial branches
      double w = 0;
      for (std::int64_t r = 0; r < Cp; ++r)
        for (std::int64_t col = j * cg; col < (j + 1) * cg; ++col)
          w += std::abs(M.at((b * Cp + r) * Cp + col));
      row.push_back({"S-" + std::to_string(2 * j + 1), w});
    }
    for (std::int64_t i = 0; i < G; ++i) {  // rows feed the temporal branches
      double w = 0;
      for (std::int64_t r = i * cg; r < (i + 1) * cg; ++r)
        for (std::int64_t col = 0; col < Cp; ++col)
          w += std::abs(M.at((b * Cp + r) * Cp + col));
      row.push_back({"T-" + std::to_string(2 * i + 1), w});
    }
  }
  return out;
}

}  // namespace ean
