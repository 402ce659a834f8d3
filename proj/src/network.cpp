#include "ean/network.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include "ean/ops.hpp"
#include "ean/serialization.hpp"

namespace ean {

namespace {

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

}  // namespace

std::int64_t pick_projection_groups(std::int64_t channels, std::int64_t bottleneck) {
  for (std::int64_t g : {4, 3, 2})
    if (channels % g == 0 && bottleneck % g == 0) return g;
  return 1;
}

// ---------------------------------------------------------------------------
// ModelConfig
// ---------------------------------------------------------------------------

ModelConfig ModelConfig::tiny() {
  ModelConfig cfg;
  cfg.segments = 4;
  return cfg;
}

ModelConfig ModelConfig::resnet50_shape() {
  ModelConfig cfg;
  cfg.backbone = "resnet50-shape";
  cfg.stage_channels = {64, 256, 512, 1024, 2048};
  cfg.stage_depths = {3, 4, 6, 3};
  cfg.input_height = cfg.input_width = 224;
  cfg.segments = 8;
  cfg.num_classes = 174;
  return cfg;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("ModelConfig: " + msg); };
  if (backbone != "tiny" && backbone != "resnet50-shape")
    fail("unknown backbone '" + backbone + "' (expected tiny or resnet50-shape)");
  if (stage_channels.size() != 5) fail("stage_channels must list stem + 4 stage widths");
  if (stage_depths.size() != 4) fail("stage_depths must list 4 residual stage depths");
  for (auto c : stage_channels)
    if (c <= 0) fail("stage channels must be positive");
  for (auto d : stage_depths)
    if (d <= 0) fail("stage depths must be positive");
  if (input_height <= 0 || input_width <= 0) fail("input size must be positive");
  if (segments < 1) fail("segments must be at least 1");
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0, 1)");
  if (frames_per_segment != (lmc_enabled ? 5 : 1))
    fail("frames_per_segment must be 5 exactly when motion codes are enabled, 1 otherwise");
  std::set<std::int64_t> seen;
  for (auto s : eab_after_stages) {
    if (s < 1 || s > 5)
      fail("adaptive block after stage " + std::to_string(s) +
           " is not a legal placement; stages are numbered 1 to 5");
    if (!seen.insert(s).second) fail("duplicate adaptive block stage " + std::to_string(s));
  }
  if (soitr_after_stage < 0 || soitr_after_stage > 5)
    fail("interaction head after stage " + std::to_string(soitr_after_stage) +
         " is not a legal placement; stages are numbered 1 to 5 (0 disables)");
  if (soitr_after_stage != 0 && seen.count(soitr_after_stage))
    fail("adaptive block and interaction head placements must be disjoint (both at stage " +
         std::to_string(soitr_after_stage) + ")");
}

std::vector<std::int64_t> ModelConfig::stage_shape(std::int64_t stage) const {
  if (stage < 1 || stage > 5)
    throw std::invalid_argument("stage_shape: stages are numbered 1 to 5");
  std::int64_t h = ceil_div(ceil_div(input_height, 2), 2);  // stem conv + pool
  std::int64_t w = ceil_div(ceil_div(input_width, 2), 2);
  for (std::int64_t s = 3; s <= stage; ++s) {
    h = ceil_div(h, 2);
    w = ceil_div(w, 2);
  }
  return {stage_channels[static_cast<std::size_t>(stage - 1)], h, w};
}

void to_json(nlohmann::json& j, const ModelConfig& cfg) {
  j = nlohmann::json{{"backbone", cfg.backbone},
                     {"stage_channels", cfg.stage_channels},
                     {"stage_depths", cfg.stage_depths},
                     {"input_size", {cfg.input_height, cfg.input_width}},
                     {"segments", cfg.segments},
                     {"frames_per_segment", cfg.frames_per_segment},
                     {"eab_after_stages", cfg.eab_after_stages},
                     {"soitr_after_stage", cfg.soitr_after_stage},
                     {"lmc_enabled", cfg.lmc_enabled},
                     {"num_classes", cfg.num_classes},
                     {"dropout", cfg.dropout},
                     {"dynamic_fusion", cfg.dynamic_fusion}};
}

void from_json(const nlohmann::json& j, ModelConfig& cfg) {
  ModelConfig defaults;
  cfg.backbone = j.value("backbone", defaults.backbone);
  cfg.stage_channels = j.value("stage_channels", defaults.stage_channels);
  cfg.stage_depths = j.value("stage_depths", defaults.stage_depths);
  if (j.contains("input_size")) {
    auto hw = j.at("input_size").get<std::vector<std::int64_t>>();
    if (hw.size() != 2) throw std::invalid_argument("input_size must be [H, W]");
    cfg.input_height = hw[0];
    cfg.input_width = hw[1];
  }
  cfg.segments = j.value("segments", defaults.segments);
  cfg.frames_per_segment = j.value("frames_per_segment", defaults.frames_per_segment);
  cfg.eab_after_stages = j.value("eab_after_stages", defaults.eab_after_stages);
  cfg.soitr_after_stage = j.value("soitr_after_stage", defaults.soitr_after_stage);
  cfg.lmc_enabled = j.value("lmc_enabled", defaults.lmc_enabled);
  cfg.num_classes = j.value("num_classes", defaults.num_classes);
  cfg.dropout = j.value("dropout", defaults.dropout);
  cfg.dynamic_fusion = j.value("dynamic_fusion", defaults.dynamic_fusion);
}

// ---------------------------------------------------------------------------
// Frame sampling
// ---------------------------------------------------------------------------

std::vector<std::vector<std::int64_t>> sample_frames(std::int64_t video_len,
                                                     const SamplingPlan& plan, Rng& rng) {
  const std::int64_t N = plan.segments;
  if (N < 1) throw std::invalid_argument("sample_frames: need at least one segment");
  if (video_len < N)
    throw std::invalid_argument("sample_frames: video of " + std::to_string(video_len) +
                                " frames cannot fill " + std::to_string(N) + " segments");
  const std::int64_t window = plan.dense ? 5 : 1;
  const std::int64_t base = video_len / N;
  std::vector<std::vector<std::int64_t>> out(static_cast<std::size_t>(N));
  for (std::int64_t g = 0; g < N; ++g) {
    const std::int64_t glo = g * base;
    const std::int64_t ghi = (g == N - 1) ? video_len : (g + 1) * base;
    const std::int64_t slack = std::max<std::int64_t>(0, (ghi - glo) - window);
    std::int64_t start;
    if (plan.train) {
      std::uniform_int_distribution<std::int64_t> d(0, slack);
      start = glo + d(rng);
    } else {
      start = glo + slack / 2;
    }
    auto& seg = out[static_cast<std::size_t>(g)];
    for (std::int64_t i = 0; i < window; ++i)
      seg.push_back(std::min(start + i, ghi - 1));  // clamp-repeat in short groups
  }
  return out;
}

std::vector<std::int64_t> sparse_clip(const std::vector<std::vector<std::int64_t>>& segments) {
  std::vector<std::int64_t> first;
  for (const auto& seg : segments) {
    if (seg.empty()) throw std::invalid_argument("sparse_clip: empty segment");
    first.push_back(seg.front());
  }
  return first;
}

Tensor maybe_hflip(const Tensor& clip, bool direction_sensitive, Rng& rng) {
  if (direction_sensitive) return clip;
  std::uniform_real_distribution<double> d(0.0, 1.0);
  if (d(rng) < 0.5) return flip(clip, static_cast<int>(clip.rank() - 1));
  return clip;
}

// ---------------------------------------------------------------------------
// Backbone pieces
// ---------------------------------------------------------------------------

BasicBlock::BasicBlock(std::int64_t in_channels, std::int64_t out_channels, std::int64_t stride,
                       DType dt, Rng& rng) {
  conv1 = register_module(
      "conv1", std::make_shared<Conv>(in_channels, out_channels,
                                      conv_spec(ConvKind::Spatial2D, {3, 3}, {stride, stride}),
                                      /*with_bias=*/false, dt, rng));
  bn1 = register_module("bn1", std::make_shared<BatchNorm>(out_channels, 1, dt));
  conv2 = register_module("conv2",
                          std::make_shared<Conv>(out_channels, out_channels,
                                                 conv_spec(ConvKind::Spatial2D, {3, 3}),
                                                 /*with_bias=*/false, dt, rng));
  bn2 = register_module("bn2", std::make_shared<BatchNorm>(out_channels, 1, dt));
  if (in_channels != out_channels || stride != 1) {
    proj = register_module(
        "proj", std::make_shared<Conv>(in_channels, out_channels,
                                       conv_spec(ConvKind::Spatial2D, {1, 1}, {stride, stride}),
                                       /*with_bias=*/false, dt, rng));
    proj_bn = register_module("proj_bn", std::make_shared<BatchNorm>(out_channels, 1, dt));
  }
}

Tensor BasicBlock::forward(const Tensor& x) {
  Tensor y = bn2->forward(conv2->forward(relu(bn1->forward(conv1->forward(x)))));
  Tensor shortcut = proj ? proj_bn->forward(proj->forward(x)) : x;
  return relu(add(y, shortcut));
}

ResidualStage::ResidualStage(std::int64_t in_channels, std::int64_t out_channels,
                             std::int64_t depth, std::int64_t stride, DType dt, Rng& rng) {
  temporal = register_module(
      "temporal", std::make_shared<Conv>(in_channels, in_channels,
                                         conv_spec(ConvKind::Temporal1D, {3}, {}, {}, in_channels),
                                         /*with_bias=*/false, dt, rng));
  for (std::int64_t b = 0; b < depth; ++b) {
    auto blk = std::make_shared<BasicBlock>(b == 0 ? in_channels : out_channels, out_channels,
                                            b == 0 ? stride : 1, dt, rng);
    register_module("block" + std::to_string(b + 1), blk);
    blocks.push_back(blk);
  }
}

Tensor ResidualStage::forward(const Tensor& x) {
  Tensor h = temporal->forward(x);
  for (auto& blk : blocks) h = blk->forward(h);
  return h;
}

// ---------------------------------------------------------------------------
// EanModel
// ---------------------------------------------------------------------------

EanModel::EanModel(const ModelConfig& cfg_, DType dt, std::uint64_t seed)
    : cfg(cfg_), dropout_rng_(seed ^ 0x9e3779b97f4a7c15ULL) {
  cfg.validate();
  if (cfg.backbone == "resnet50-shape")
    throw std::invalid_argument(
        "resnet50-shape is a profile-only configuration; no weights are instantiated");
  if (cfg.soitr_after_stage != 0 && cfg.soitr_after_stage != 5)
    throw std::invalid_argument(
        "the interaction head is executable only after the final stage (5) or disabled (0)");
  Rng rng(seed);
  const auto& ch = cfg.stage_channels;

  stem_conv = register_module(
      "stem_conv", std::make_shared<Conv>(3, ch[0], conv_spec(ConvKind::Spatial2D, {7, 7}, {2, 2}),
                                          /*with_bias=*/false, dt, rng));
  stem_bn = register_module("stem_bn", std::make_shared<BatchNorm>(ch[0], 1, dt));

  if (cfg.lmc_enabled) {
    LmcConfig lc;
    lc.out_channels = ch[0];
    lmc = register_module("lmc", std::make_shared<LatentMotionCode>(lc, dt, rng));
  }

  for (std::int64_t s = 2; s <= 5; ++s) {
    auto stage = std::make_shared<ResidualStage>(ch[static_cast<std::size_t>(s - 2)],
                                                 ch[static_cast<std::size_t>(s - 1)],
                                                 cfg.stage_depths[static_cast<std::size_t>(s - 2)],
                                                 s == 2 ? 1 : 2, dt, rng);
    register_module("stage" + std::to_string(s), stage);
    stages.push_back(stage);
  }

  for (std::int64_t s : cfg.eab_after_stages) {
    EabConfig ec;
    ec.in_channels = ch[static_cast<std::size_t>(s - 1)];
    ec.projection_groups = pick_projection_groups(ec.in_channels, ec.bottleneck());
    ec.dynamic = cfg.dynamic_fusion;
    auto blk = std::make_shared<EventAdaptiveBlock>(ec, dt, rng);
    register_module("eab" + std::to_string(s), blk);
    eabs.push_back(blk);
  }

  if (cfg.soitr_after_stage == 5) {
    SoiTrConfig sc;
    sc.in_channels = ch[4];
    sc.frames = cfg.segments;
    auto shp = cfg.stage_shape(5);
    sc.height = shp[1];
    sc.width = shp[2];
    soi = register_module("soi", std::make_shared<SparseObjectTransformer>(sc, dt, rng));
  }

  fc = register_module("fc", std::make_shared<Linear>(ch[4], cfg.num_classes,
                                                      /*with_bias=*/true, dt, rng));
}

std::shared_ptr<EventAdaptiveBlock> EanModel::eab_after(std::int64_t stage) const {
  for (std::size_t i = 0; i < cfg.eab_after_stages.size(); ++i)
    if (cfg.eab_after_stages[i] == stage) return eabs[i];
  return nullptr;
}

Tensor EanModel::forward(const Tensor& input) {
  Tensor x;
  std::int64_t B;
  if (cfg.lmc_enabled) {
    if (input.rank() != 6 || input.dim(1) != cfg.segments || input.dim(2) != 5 ||
        input.dim(3) != 3 || input.dim(4) != cfg.input_height || input.dim(5) != cfg.input_width)
      throw std::invalid_argument("forward: expected [B, N, 5, 3, H, W] dense clip input");
    B = input.dim(0);
    Tensor first = reshape(slice(input, 2, 0, 1),
                           {B, cfg.segments, 3, cfg.input_height, cfg.input_width});
    x = permute(first, {0, 2, 1, 3, 4});
  } else {
    if (input.rank() != 5 || input.dim(1) != 3 || input.dim(2) != cfg.segments ||
        input.dim(3) != cfg.input_height || input.dim(4) != cfg.input_width)
      throw std::invalid_argument("forward: expected [B, 3, N, H, W] sparse clip input");
    B = input.dim(0);
    x = input;
  }

  Tensor h = pool3d(relu(stem_bn->forward(stem_conv->forward(x))), PoolKind::Max, {1, 3, 3},
                    {1, 2, 2});

  if (cfg.lmc_enabled) {
    Tensor m = lmc->forward(reshape(input, {B * cfg.segments, 5, 3, cfg.input_height,
                                            cfg.input_width}));
    Tensor m5 = permute(
        reshape(m, {B, cfg.segments, cfg.stage_channels[0], m.dim(2), m.dim(3)}),
        {0, 2, 1, 3, 4});
    h = LatentMotionCode::fuse(m5, h);
  }

  if (auto blk = eab_after(1)) h = blk->forward(h);
  for (std::int64_t s = 2; s <= 5; ++s) {
    h = stages[static_cast<std::size_t>(s - 2)]->forward(h);
    if (auto blk = eab_after(s)) h = blk->forward(h);
  }

  Tensor feat = soi ? soi->forward(h) : global_avg_pool(h, {2, 3, 4});
  feat = dropout(feat, cfg.dropout, dropout_rng_, is_training());
  return fc->forward(feat);
}

// ---------------------------------------------------------------------------
// Loss and optimizer
// ---------------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels) {
  if (logits.rank() != 2) throw std::invalid_argument("cross_entropy: logits must be [B, K]");
  const std::int64_t B = logits.dim(0), K = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != B)
    throw std::invalid_argument("cross_entropy: batch size and label count differ");
  Tensor mask = Tensor::zeros({B, K}, logits.dtype());
  for (std::int64_t b = 0; b < B; ++b) {
    const std::int64_t y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= K)
      throw std::invalid_argument("cross_entropy: label " + std::to_string(y) +
                                  " outside [0, " + std::to_string(K) + ")");
    mask.impl()->data->write(b * K + y, 1.0);
  }
  Tensor picked = mul(log_softmax(logits, 1), mask);
  return mul_scalar(sum_all(picked), -1.0 / static_cast<double>(B));
}

Sgd::Sgd(std::vector<Tensor> params_, double base_lr_, double momentum_, double weight_decay_,
         std::vector<std::int64_t> milestones_, double gamma_)
    : params(std::move(params_)),
      base_lr(base_lr_),
      momentum(momentum_),
      weight_decay(weight_decay_),
      gamma(gamma_),
      milestones(std::move(milestones_)),
      lr_(base_lr_) {
  std::sort(milestones.begin(), milestones.end());
  for (const auto& p : params) velocity.push_back(Tensor::zeros(p.shape(), p.dtype()));
}

void Sgd::step() {
  NoGradGuard ng;
  if (!lr_scales.empty() && lr_scales.size() != params.size())
    throw std::invalid_argument("Sgd: lr_scales must match the parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.has_grad()) continue;
    Tensor g = p.grad();
    if (weight_decay != 0.0) g = add(g, mul_scalar(p.detach(), weight_decay));
    copy_values(velocity[i], add(mul_scalar(velocity[i], momentum), g));
    const double scale = lr_scales.empty() ? 1.0 : lr_scales[i];
    copy_values(p, sub(p.detach(), mul_scalar(velocity[i], lr_ * scale)));
  }
}

void Sgd::set_epoch(std::int64_t epoch) {
  double factor = 1.0;
  for (auto m : milestones)
    if (epoch >= m) factor *= gamma;
  lr_ = base_lr * factor;
}

double train_step(EanModel& model, const Tensor& input, const std::vector<std::int64_t>& labels,
                  Sgd& opt) {
  model.train();
  model.zero_grad();
  Tensor loss = cross_entropy(model.forward(input), labels);
  backward(loss);
  opt.step();
  return loss.scalar();
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace fs = std::filesystem;

void save_checkpoint(const std::string& dir, EanModel& model, const Sgd* opt,
                     const nlohmann::json& meta) {
  fs::create_directories(fs::path(dir) / "params");
  for (const auto& [name, t] : model.named_state())
    save_tensor((fs::path(dir) / "params" / (name + ".eant")).string(), t);
  {
    std::ofstream f(fs::path(dir) / "config.json");
    nlohmann::json j = model.cfg;
    f << j.dump(2) << "\n";
  }
  nlohmann::json oj{{"meta", meta}};
  if (opt) {
    fs::create_directories(fs::path(dir) / "optimizer");
    for (std::size_t i = 0; i < opt->velocity.size(); ++i)
      save_tensor((fs::path(dir) / "optimizer" / ("vel" + std::to_string(i) + ".eant")).string(),
                  opt->velocity[i]);
    oj["base_lr"] = opt->base_lr;
    oj["lr"] = opt->lr();
    oj["momentum"] = opt->momentum;
    oj["weight_decay"] = opt->weight_decay;
    oj["gamma"] = opt->gamma;
    oj["milestones"] = opt->milestones;
  }
  std::ofstream f(fs::path(dir) / "optimizer.json");
  f << oj.dump(2) << "\n";
}

ModelConfig load_checkpoint_config(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "config.json");
  if (!f) throw std::runtime_error("checkpoint config not found under " + dir);
  nlohmann::json j;
  f >> j;
  return j.get<ModelConfig>();
}

nlohmann::json load_checkpoint(const std::string& dir, EanModel& model, Sgd* opt) {
  NoGradGuard ng;
  for (auto& [name, t] : model.named_state()) {
    const std::string path = (fs::path(dir) / "params" / (name + ".eant")).string();
    Tensor stored = load_tensor(path);
    if (stored.shape() != t.shape() || stored.dtype() != t.dtype())
      throw std::runtime_error("checkpoint tensor " + name + " does not match the model");
    copy_values(t, stored);
  }
  nlohmann::json oj = nlohmann::json::object();
  std::ifstream f(fs::path(dir) / "optimizer.json");
  if (f) f >> oj;
  if (opt) {
    if (!oj.contains("lr")) throw std::runtime_error("checkpoint has no optimizer state: " + dir);
    opt->base_lr = oj["base_lr"].get<double>();
    opt->set_lr(oj["lr"].get<double>());
    opt->momentum = oj["momentum"].get<double>();
    opt->weight_decay = oj["weight_decay"].get<double>();
    opt->gamma = oj["gamma"].get<double>();
    opt->milestones = oj["milestones"].get<std::vector<std::int64_t>>();
    for (std::size_t i = 0; i < opt->velocity.size(); ++i) {
      Tensor v = load_tensor(
          (fs::path(dir) / "optimizer" / ("vel" + std::to_string(i) + ".eant")).string());
      if (v.shape() != opt->velocity[i].shape())
        throw std::runtime_error("optimizer state does not match the parameter list");
      copy_values(opt->velocity[i], v);
    }
  }
  return oj.value("meta", nlohmann::json::object());
}

}  // namespace ean
