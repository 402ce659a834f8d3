#include "ean/profiler.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace ean {

namespace {

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

[[noreturn]] void fail(const std::string& layer, const std::string& msg) {
  throw std::invalid_argument("cost model: " + layer + ": " + msg);
}

struct Walker {
  std::vector<CostItem>* items;

  void raw(const std::string& name, double macs, double params) {
    items->push_back({name, macs, params});
  }
  // Convolution: `positions` output sites (T*H*W product), `cout` filters.
  void conv(const std::string& name, std::int64_t batch, std::int64_t cin, std::int64_t cout,
            std::int64_t groups, std::int64_t kprod, std::int64_t positions, bool bias) {
    if (cin % groups != 0 || cout % groups != 0)
      fail(name, std::to_string(cin) + "->" + std::to_string(cout) +
                     " channels not divisible into " + std::to_string(groups) + " groups");
    if (cin <= 0 || cout <= 0) fail(name, "channel count vanished");
    raw(name,
        double(batch) * double(positions) * double(cout) * double(cin / groups) * double(kprod),
        double(cout) * double(cin / groups) * double(kprod) + (bias ? double(cout) : 0.0));
  }
  void bn(const std::string& name, std::int64_t channels) { raw(name, 0.0, 2.0 * channels); }
  void linear(const std::string& name, std::int64_t positions, std::int64_t din,
              std::int64_t dout, bool bias) {
    raw(name, double(positions) * double(din) * double(dout),
        double(din) * double(dout) + (bias ? double(dout) : 0.0));
  }
  void matmul(const std::string& name, std::int64_t nbatch, std::int64_t m, std::int64_t k,
              std::int64_t n) {
    raw(name, double(nbatch) * double(m) * double(k) * double(n), 0.0);
  }
  void attention(const std::string& name, std::int64_t batch, std::int64_t tokens,
                 std::int64_t dim) {
    // Q, K, V, output projections plus the score and mixing products.
    raw(name,
        4.0 * batch * double(tokens) * double(dim) * double(dim) +
            2.0 * batch * double(tokens) * double(tokens) * double(dim),
        4.0 * double(dim) * double(dim));
  }
};

// Near-equal split of the bottleneck width across the branch groups; earlier
// branches take the remainder. Equal to the executable even split whenever
// the width divides.
std::vector<std::int64_t> branch_partition(const std::string& layer, std::int64_t width,
                                           std::int64_t groups) {
  std::vector<std::int64_t> parts;
  for (std::int64_t j = 0; j < groups; ++j) {
    std::int64_t p = width / groups + (j < width % groups ? 1 : 0);
    if (p <= 0) fail(layer, "bottleneck width " + std::to_string(width) + " leaves an empty branch");
    parts.push_back(p);
  }
  return parts;
}

void walk_eab(Walker& w, const std::string& name, std::int64_t C, std::int64_t T, std::int64_t H,
              std::int64_t Wd, bool dynamic) {
  EabConfig ec;
  ec.in_channels = C;
  if (C % ec.bottleneck_factor != 0)
    fail(name + ".down", std::to_string(C) + " channels not divisible by the bottleneck factor");
  const std::int64_t Cp = ec.bottleneck();
  const std::int64_t pg = pick_projection_groups(C, Cp);
  const std::int64_t c16 = ec.perceiver_channels();
  const std::int64_t thw = T * H * Wd;

  w.conv(name + ".down", 1, C, Cp, pg, 1, thw, false);
  w.bn(name + ".down_bn", Cp);

  // Scale perceiver. Its parameters exist in both arms (the static arm is
  // weight-matched), but a pinned identity matrix costs nothing to predict.
  {
    const double keep = dynamic ? 1.0 : 0.0;
    w.raw(name + ".scale_reduce", keep * thw * double(c16) * double(C),
          double(C) * c16 + c16);
    std::int64_t d[3] = {T, H, Wd};
    for (int hop = 0; hop < 2; ++hop) {
      const char* nm = hop == 0 ? ".scale_conv_a" : ".scale_conv_b";
      std::int64_t out = 1;
      for (auto& e : d) {
        e = ceil_div(e, e < 5 ? 1 : 2);  // stride degrades on short axes
        out *= e;
      }
      w.raw(name + nm, keep * double(out) * c16 * 125.0, double(c16) * 125.0);
      w.bn(name + (hop == 0 ? ".scale_bn_a" : ".scale_bn_b"), c16);
    }
    w.raw(name + ".scale_fc", keep * double(c16) * Cp * Cp,
          double(c16) * Cp * Cp + double(Cp) * Cp);
  }

  const auto parts = branch_partition(name, Cp, ec.groups);
  for (std::int64_t j = 0; j < ec.groups; ++j) {
    const std::int64_t k = 2 * j + 1;
    const std::int64_t cg = parts[std::size_t(j)];
    const std::int64_t ks = k == 1 ? 1 : 9;  // sizes >= 5 run as dilated 3x3
    const std::int64_t kt = k == 1 ? 1 : 3;
    w.conv(name + ".spatial" + std::to_string(k), 1, cg, cg, 1, ks, thw, false);
    w.bn(name + ".spatial" + std::to_string(k) + "_bn", cg);
    w.conv(name + ".temporal" + std::to_string(k), 1, cg, cg, 1, kt, thw, false);
  }
  w.matmul(name + ".mix", 1, Cp, Cp, thw);  // per-sample channel mixing
  w.conv(name + ".up", 1, Cp, C, pg, 1, thw, false);
}

void walk_soi(Walker& w, const std::string& name, std::int64_t C, std::int64_t T, std::int64_t H,
              std::int64_t Wd) {
  SoiTrConfig sc;
  sc.in_channels = C;
  if (C % sc.reduction != 0)
    fail(name + ".down", std::to_string(C) + " channels not divisible by the token reduction");
  const std::int64_t c = sc.bottleneck();
  const std::int64_t s = c / sc.saliency_reduction;
  if (s < 1) fail(name + ".sal1", "saliency width vanished at " + std::to_string(c) + " channels");
  const std::int64_t thw = T * H * Wd;
  const std::int64_t L = sc.num_objects * T;

  w.conv(name + ".down", 1, C, c, 1, 1, thw, true);
  w.conv(name + ".sal1", 1, c, s, 1, 1, thw, true);
  w.conv(name + ".sal2", 1, s, s, 1, 3, thw, true);
  // 5x5 on replicate-padded input: valid conv, same output extent.
  w.conv(name + ".sal3", 1, s, s, 1, 25, thw, true);
  w.conv(name + ".sal4", 1, s, sc.num_objects, 1, 1, thw, false);
  w.raw(name + ".pos_embed", 0.0, double(T) * c * H * Wd);
  w.matmul(name + ".pool", T, sc.num_objects, H * Wd, c);
  for (std::int64_t b = 1; b <= sc.blocks; ++b) {
    const std::string blk = name + ".block" + std::to_string(b);
    w.bn(blk + ".bn1", c);
    w.attention(blk + ".attn", 1, L, c);
    w.bn(blk + ".bn2", c);
    w.linear(blk + ".ff1", L, c, c * sc.ff_expansion, true);
    w.linear(blk + ".ff2", L, c * sc.ff_expansion, c, true);
  }
  w.conv(name + ".up", 1, c, C, sc.up_groups, 1, 1, false);
}

void walk_lmc(Walker& w, const ModelConfig& cfg) {
  LmcConfig lc;
  lc.out_channels = cfg.stage_channels[0];
  if (cfg.input_height % lc.patch != 0 || cfg.input_width % lc.patch != 0)
    fail("lmc.encoder", "input " + std::to_string(cfg.input_height) + "x" +
                            std::to_string(cfg.input_width) +
                            " is not divisible into whole patches");
  const std::int64_t segs = cfg.segments;
  const std::int64_t ph = cfg.input_height / lc.patch, pw = cfg.input_width / lc.patch;
  const std::int64_t steps = lc.steps();  // diffs per 5-frame segment
  const std::int64_t cells = segs * steps * ph * pw;
  w.linear("lmc.encoder", cells, 3 * lc.patch * lc.patch, lc.latent_dim, true);
  w.conv("lmc.reason1", segs, lc.latent_dim, lc.latent_dim, lc.reason_groups, 27,
         steps * ph * pw, true);
  w.bn("lmc.reason_bn", lc.latent_dim);
  w.conv("lmc.reason2", segs, lc.latent_dim, lc.latent_dim, lc.reason_groups, 27,
         steps * ph * pw, true);
  const std::int64_t out_dim = (lc.out_channels / steps) * lc.tile() * lc.tile();
  w.linear("lmc.decoder", cells, lc.latent_dim, out_dim, true);
}

void walk_backbone(Walker& w, const ModelConfig& cfg) {
  const auto& ch = cfg.stage_channels;
  const std::int64_t N = cfg.segments;
  const bool bottleneck_blocks = cfg.backbone == "resnet50-shape";

  std::int64_t h = ceil_div(cfg.input_height, 2), wd = ceil_div(cfg.input_width, 2);
  w.conv("stem.conv", 1, 3, ch[0], 1, 49, N * h * wd, false);
  w.bn("stem.bn", ch[0]);
  h = ceil_div(h, 2);
  wd = ceil_div(wd, 2);  // max pool

  for (std::int64_t s = 2; s <= 5; ++s) {
    const std::string pre = "stage" + std::to_string(s);
    const std::int64_t cin = ch[std::size_t(s - 2)], cout = ch[std::size_t(s - 1)];
    const std::int64_t stride = s == 2 ? 1 : 2;
    const std::int64_t depth = cfg.stage_depths[std::size_t(s - 2)];
    // Depthwise 3-tap segment-axis convolution at the stage entry.
    w.conv(pre + ".temporal", 1, cin, cin, cin, 3, N * h * wd, false);
    const std::int64_t ho = ceil_div(h, stride), wo = ceil_div(wd, stride);
    for (std::int64_t b = 0; b < depth; ++b) {
      const std::string blk = pre + ".block" + std::to_string(b + 1);
      const std::int64_t bin = b == 0 ? cin : cout;
      const std::int64_t bstride = b == 0 ? stride : 1;
      if (bottleneck_blocks) {
        const std::int64_t width = cout / 4;
        const std::int64_t pin = b == 0 ? N * h * wd : N * ho * wo;
        w.conv(blk + ".conv1", 1, bin, width, 1, 1, pin, false);
        w.bn(blk + ".bn1", width);
        w.conv(blk + ".conv2", 1, width, width, 1, 9, N * ho * wo, false);
        w.bn(blk + ".bn2", width);
        w.conv(blk + ".conv3", 1, width, cout, 1, 1, N * ho * wo, false);
        w.bn(blk + ".bn3", cout);
        if (bin != cout || bstride != 1) {
          w.conv(blk + ".proj", 1, bin, cout, 1, 1, N * ho * wo, false);
          w.bn(blk + ".proj_bn", cout);
        }
      } else {
        w.conv(blk + ".conv1", 1, bin, cout, 1, 9, N * ho * wo, false);
        w.bn(blk + ".bn1", cout);
        w.conv(blk + ".conv2", 1, cout, cout, 1, 9, N * ho * wo, false);
        w.bn(blk + ".bn2", cout);
        if (bin != cout || bstride != 1) {
          w.conv(blk + ".proj", 1, bin, cout, 1, 1, N * ho * wo, false);
          w.bn(blk + ".proj_bn", cout);
        }
      }
    }
    h = ho;
    wd = wo;
  }
}

CostReport walk(const ModelConfig& cfg, const std::vector<std::int64_t>& eab_stages,
                const std::vector<std::int64_t>& soi_stages) {
  CostReport report;
  Walker w{&report.items};
  if (cfg.lmc_enabled) walk_lmc(w, cfg);
  walk_backbone(w, cfg);
  for (std::int64_t s : eab_stages) {
    auto shp = cfg.stage_shape(s);
    walk_eab(w, "eab" + std::to_string(s), shp[0], cfg.segments, shp[1], shp[2],
             cfg.dynamic_fusion);
  }
  for (std::int64_t s : soi_stages) {
    auto shp = cfg.stage_shape(s);
    walk_soi(w, "soi" + std::to_string(s), shp[0], cfg.segments, shp[1], shp[2]);
  }
  w.linear("fc", 1, cfg.stage_channels[4], cfg.num_classes, true);
  return report;
}

}  // namespace

double CostReport::total_macs() const {
  double t = 0;
  for (const auto& it : items) t += it.macs;
  return t;
}

double CostReport::total_params() const {
  double t = 0;
  for (const auto& it : items) t += it.params;
  return t;
}

double CostReport::macs_with_prefix(const std::string& prefix) const {
  double t = 0;
  for (const auto& it : items)
    if (it.name.rfind(prefix, 0) == 0) t += it.macs;
  return t;
}

double CostReport::params_with_prefix(const std::string& prefix) const {
  double t = 0;
  for (const auto& it : items)
    if (it.name.rfind(prefix, 0) == 0) t += it.params;
  return t;
}

std::string CostReport::to_text() const {
  // Group by top-level module (text before the first dot), preserving order.
  std::vector<CostItem> groups;
  for (const auto& it : items) {
    const std::string head = it.name.substr(0, it.name.find('.'));
    if (groups.empty() || groups.back().name != head) groups.push_back({head, 0, 0});
    groups.back().macs += it.macs;
    groups.back().params += it.params;
  }
  std::ostringstream os;
  char line[128];
  std::snprintf(line, sizeof(line), "%-12s %12s %12s\n", "module", "GMACs", "params(M)");
  os << line;
  for (const auto& g : groups) {
    std::snprintf(line, sizeof(line), "%-12s %12.4f %12.4f\n", g.name.c_str(), g.macs / 1e9,
                  g.params / 1e6);
    os << line;
  }
  std::snprintf(line, sizeof(line), "%-12s %12.4f %12.4f\n", "total", gmacs(), params_m());
  os << line;
  os << "(1 MAC = 1 FLOP; batch-norm, activations, pooling and softmax not counted)\n";
  return os.str();
}

nlohmann::json CostReport::to_json() const {
  nlohmann::json j;
  j["items"] = nlohmann::json::array();
  for (const auto& it : items)
    j["items"].push_back({{"name", it.name}, {"macs", it.macs}, {"params", it.params}});
  j["total_macs"] = total_macs();
  j["total_params"] = total_params();
  j["gmacs"] = gmacs();
  j["params_m"] = params_m();
  return j;
}

CostReport count(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<std::int64_t> soi;
  if (cfg.soitr_after_stage != 0) soi.push_back(cfg.soitr_after_stage);
  return walk(cfg, cfg.eab_after_stages, soi);
}

std::vector<SweepRow> placement_sweep(const ModelConfig& base) {
  ModelConfig cfg = base;
  cfg.eab_after_stages.clear();
  cfg.soitr_after_stage = 0;
  cfg.validate();
  const std::vector<std::pair<std::vector<std::int64_t>, std::vector<std::int64_t>>> rows = {
      {{1, 2}, {3, 4, 5}},
      {{1, 2, 3}, {4, 5}},
      {{1, 2, 3, 4}, {5}},
      {{1, 2, 3, 4, 5}, {}},
  };
  std::vector<SweepRow> out;
  for (const auto& [eabs, sois] : rows) {
    CostReport r = walk(cfg, eabs, sois);
    out.push_back({eabs, sois, r.gmacs(), r.params_m()});
  }
  return out;
}

}  // namespace ean
