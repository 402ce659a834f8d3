#include "ean/network.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <vector>

#include "doctest.h"
#include "ean/ops.hpp"
#include "helpers.hpp"

using namespace ean;
using namespace testutil;

namespace {

ModelConfig small_cfg() {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.input_height = cfg.input_width = 32;
  cfg.segments = 2;
  return cfg;
}

// Copy every named tensor of `src` that also exists in `dst` (by name).
void copy_shared_state(EanModel& src, EanModel& dst) {
  NoGradGuard ng;
  std::map<std::string, Tensor> from;
  for (auto& [name, t] : src.named_state()) from.emplace(name, t);
  for (auto& [name, t] : dst.named_state()) {
    auto it = from.find(name);
    REQUIRE(it != from.end());
    copy_values(t, it->second);
  }
}

bool all_finite(const Tensor& t) {
  for (float v : t.vec<float>())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

TEST_CASE("network: 40 frames over 8 segments sample as consecutive windows") {
  Rng rng(21);
  for (bool train : {true, false}) {
    auto segs = sample_frames(40, {8, true, train}, rng);
    REQUIRE(segs.size() == 8);
    for (std::int64_t g = 0; g < 8; ++g) {
      REQUIRE(segs[g].size() == 5);
      for (std::int64_t i = 0; i < 5; ++i) CHECK(segs[g][i] == 5 * g + i);
    }
  }
}

TEST_CASE("network: eval sampling is deterministic and centered") {
  Rng rng(22);
  auto a = sample_frames(37, {4, true, false}, rng);
  auto b = sample_frames(37, {4, true, false}, rng);
  CHECK(a == b);
  // One segment over the whole 5-frame video covers it exactly.
  auto c = sample_frames(5, {1, true, false}, rng);
  CHECK(c == std::vector<std::vector<std::int64_t>>{{0, 1, 2, 3, 4}});
  // Short groups clamp-repeat their last frame.
  auto d = sample_frames(7, {2, true, false}, rng);
  CHECK(d == std::vector<std::vector<std::int64_t>>{{0, 1, 2, 2, 2}, {3, 4, 5, 6, 6}});
  // Sparse eval takes group centers.
  auto e = sample_frames(12, {4, false, false}, rng);
  CHECK(e == std::vector<std::vector<std::int64_t>>{{1}, {4}, {7}, {10}});
}

TEST_CASE("network: train sampling stays inside groups and respects the seed") {
  Rng r1(23), r2(23);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = sample_frames(23, {4, true, true}, r1);
    auto b = sample_frames(23, {4, true, true}, r2);
    CHECK(a == b);
    for (std::int64_t g = 0; g < 4; ++g) {
      std::int64_t glo = g * 5, ghi = (g == 3) ? 23 : (g + 1) * 5;
      for (std::int64_t i = 0; i < 5; ++i) {
        CHECK(a[g][i] >= glo);
        CHECK(a[g][i] < ghi);
        if (i) CHECK(a[g][i] >= a[g][i - 1]);
      }
    }
  }
  CHECK_THROWS_AS(sample_frames(3, {4, true, true}, r1), std::invalid_argument);
}

TEST_CASE("network: sparse clip takes the first index of each window") {
  Rng rng(24);
  auto segs = sample_frames(40, {8, true, false}, rng);
  CHECK(sparse_clip(segs) == std::vector<std::int64_t>{0, 5, 10, 15, 20, 25, 30, 35});
}

TEST_CASE("network: horizontal flip honors direction sensitivity") {
  Rng rng(25);
  Tensor clip = Tensor::randn({1, 3, 2, 4, 6}, rng);
  Rng flip_rng(7);
  for (int i = 0; i < 10; ++i)
    CHECK(bitwise_equal(maybe_hflip(clip, true, flip_rng), clip));
  Tensor flipped = flip(clip, 4);
  int flips = 0, keeps = 0;
  for (int i = 0; i < 40; ++i) {
    Tensor out = maybe_hflip(clip, false, flip_rng);
    if (bitwise_equal(out, flipped))
      ++flips;
    else if (bitwise_equal(out, clip))
      ++keeps;
  }
  CHECK(flips + keeps == 40);
  CHECK(flips > 5);
  CHECK(keeps > 5);
}

TEST_CASE("network: config validation pins the placement rules") {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.eab_after_stages = {1, 6};
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("1 to 5"), std::invalid_argument);
  cfg = ModelConfig::tiny();
  cfg.soitr_after_stage = 4;  // collides with the default {1,2,3,4}
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("disjoint"), std::invalid_argument);
  cfg = ModelConfig::tiny();
  cfg.lmc_enabled = true;  // frames_per_segment still 1
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("frames_per_segment"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(EanModel(ModelConfig::resnet50_shape(), DType::f32, 1),
                       doctest::Contains("profile-only"), std::invalid_argument);
  cfg = ModelConfig::tiny();
  cfg.eab_after_stages = {1, 2};
  cfg.soitr_after_stage = 3;
  CHECK_THROWS_WITH_AS(EanModel(cfg, DType::f32, 1), doctest::Contains("final stage"),
                       std::invalid_argument);
}

TEST_CASE("network: config JSON round trip") {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.segments = 16;
  cfg.eab_after_stages = {2, 3};
  cfg.soitr_after_stage = 0;
  cfg.num_classes = 7;
  cfg.dynamic_fusion = false;
  nlohmann::json j = cfg;
  ModelConfig back = j.get<ModelConfig>();
  nlohmann::json j2 = back;
  CHECK(j.dump() == j2.dump());
}

TEST_CASE("network: stage shapes follow the stride plan") {
  ModelConfig r = ModelConfig::resnet50_shape();
  CHECK(r.stage_shape(1) == std::vector<std::int64_t>{64, 56, 56});
  CHECK(r.stage_shape(2) == std::vector<std::int64_t>{256, 56, 56});
  CHECK(r.stage_shape(3) == std::vector<std::int64_t>{512, 28, 28});
  CHECK(r.stage_shape(4) == std::vector<std::int64_t>{1024, 14, 14});
  CHECK(r.stage_shape(5) == std::vector<std::int64_t>{2048, 7, 7});
  ModelConfig t = ModelConfig::tiny();
  CHECK(t.stage_shape(1) == std::vector<std::int64_t>{12, 16, 16});
  CHECK(t.stage_shape(5) == std::vector<std::int64_t>{192, 2, 2});
}

TEST_CASE("network: tiny forward produces finite logits of the right shape") {
  ModelConfig cfg = small_cfg();
  EanModel model(cfg, DType::f32, 42);
  Rng rng(43);
  Tensor input = Tensor::randn({2, 3, 2, 32, 32}, rng, 0.5);
  Tensor logits = model.forward(input);
  REQUIRE(logits.shape() == std::vector<std::int64_t>{2, 4});
  CHECK(all_finite(logits));
  model.eval();
  CHECK(all_finite(model.forward(input)));
}

TEST_CASE("network: logits equal the plain backbone at init") {
  Rng rng(44);
  SUBCASE("sparse clip model") {
    ModelConfig cfg = small_cfg();
    EanModel ean(cfg, DType::f32, 11);
    ModelConfig base_cfg = cfg;
    base_cfg.eab_after_stages = {};
    base_cfg.soitr_after_stage = 0;
    EanModel base(base_cfg, DType::f32, 99);
    copy_shared_state(ean, base);
    ean.eval();
    base.eval();
    Tensor input = Tensor::randn({2, 3, 2, 32, 32}, rng, 0.5);
    CHECK(bitwise_equal(ean.forward(input), base.forward(input)));
  }
  SUBCASE("dense clip model with motion codes") {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.segments = 2;
    cfg.lmc_enabled = true;
    cfg.frames_per_segment = 5;
    EanModel ean(cfg, DType::f32, 12);
    ModelConfig base_cfg = cfg;
    base_cfg.eab_after_stages = {};
    base_cfg.soitr_after_stage = 0;
    base_cfg.lmc_enabled = false;
    base_cfg.frames_per_segment = 1;
    EanModel base(base_cfg, DType::f32, 98);
    copy_shared_state(ean, base);
    ean.eval();
    base.eval();
    Tensor dense = Tensor::randn({1, 2, 5, 3, 64, 64}, rng, 0.5);
    Tensor sparse = permute(reshape(slice(dense, 2, 0, 1), {1, 2, 3, 64, 64}), {0, 2, 1, 3, 4});
    CHECK(bitwise_equal(ean.forward(dense), base.forward(sparse)));
  }
}

TEST_CASE("network: cross entropy fundamentals") {
  Rng rng(45);
  Tensor uniform = Tensor::full({3, 5}, 1.7);
  double loss = cross_entropy(uniform, {0, 3, 4}).scalar();
  CHECK(std::abs(loss - std::log(5.0)) < 1e-6);

  Tensor logits = Tensor::randn({2, 4}, rng);
  std::vector<std::int64_t> labels = {2, 0};
  double got = cross_entropy(logits, labels).scalar();
  auto lv = logits.vec<float>();
  double want = 0.0;
  for (std::int64_t b = 0; b < 2; ++b) {
    double mx = -1e30, z = 0.0;
    for (int k = 0; k < 4; ++k) mx = std::max(mx, double(lv[b * 4 + k]));
    for (int k = 0; k < 4; ++k) z += std::exp(double(lv[b * 4 + k]) - mx);
    want -= double(lv[b * 4 + labels[b]]) - mx - std::log(z);
  }
  want /= 2.0;
  CHECK(std::abs(got - want) < 1e-6);

  CHECK_THROWS_AS(cross_entropy(logits, {0}), std::invalid_argument);
  CHECK_THROWS_AS(cross_entropy(logits, {1, 4}), std::invalid_argument);

  Tensor l64 = Tensor::rand_uniform({3, 5}, rng, -1.0, 1.0, DType::f64);
  gradcheck([&](const std::vector<Tensor>& in) { return cross_entropy(in[0], {1, 0, 4}); },
            {l64});
}

TEST_CASE("network: optimizer mechanics") {
  SUBCASE("zero learning rate leaves parameters bitwise untouched") {
    Rng rng(46);
    Tensor w = Tensor::randn({4, 3}, rng);
    w.set_requires_grad(true);
    backward(sum_all(mul(w, w)));
    Tensor before = w.detach().clone();
    Sgd opt({w}, 0.0);
    opt.step();
    CHECK(bitwise_equal(w, before));
  }
  SUBCASE("milestones decay the rate by exactly the configured factor") {
    Tensor dummy = Tensor::zeros({1});
    Sgd opt({dummy}, 0.01, 0.9, 5e-4, {4, 8});
    opt.set_epoch(0);
    CHECK(opt.lr() == 0.01);
    opt.set_epoch(3);
    CHECK(opt.lr() == 0.01);
    opt.set_epoch(4);
    CHECK(opt.lr() == 0.01 * 0.1);
    opt.set_epoch(9);
    CHECK(opt.lr() == 0.01 * (0.1 * 0.1));
  }
  SUBCASE("momentum update matches the hand calculation") {
    Tensor w = Tensor::full({1}, 1.0);
    w.set_requires_grad(true);
    Sgd opt({w}, 0.1, 0.9, 0.0);
    backward(mul(w, w));  // grad 2w
    opt.step();
    CHECK(std::abs(w.at(0) - 0.8) < 1e-6);  // v=2, p=1-0.2
    w.zero_grad();
    backward(mul(w, w));
    opt.step();
    // v = 0.9*2 + 1.6 = 3.4; p = 0.8 - 0.34
    CHECK(std::abs(w.at(0) - 0.46) < 1e-6);
  }
  SUBCASE("weight decay adds to the gradient") {
    Tensor w = Tensor::full({1}, 2.0);
    w.set_requires_grad(true);
    Sgd opt({w}, 0.1, 0.0, 0.5);
    backward(mul_scalar(w, 3.0));  // grad 3
    opt.step();
    // g' = 3 + 0.5*2 = 4; p = 2 - 0.4
    CHECK(std::abs(w.at(0) - 1.6) < 1e-6);
  }
}

TEST_CASE("network: training is bitwise deterministic under a fixed seed") {
  auto run = [](std::uint64_t seed) {
    ModelConfig cfg = small_cfg();
    EanModel model(cfg, DType::f32, seed);
    Sgd opt(model.parameters(), 0.01);
    Rng data_rng(100 + seed);
    std::vector<double> losses;
    for (int step = 0; step < 10; ++step) {
      Tensor input = Tensor::randn({2, 3, 2, 32, 32}, data_rng, 0.5);
      losses.push_back(train_step(model, input, {std::int64_t(step % 4), 3}, opt));
    }
    std::vector<std::pair<std::string, Tensor>> state;
    for (auto& [name, t] : model.named_state()) state.emplace_back(name, t.detach().clone());
    return std::make_pair(losses, state);
  };
  auto a = run(7), b = run(7);
  CHECK(a.first == b.first);
  REQUIRE(a.second.size() == b.second.size());
  for (std::size_t i = 0; i < a.second.size(); ++i) {
    CHECK(a.second[i].first == b.second[i].first);
    CHECK(bitwise_equal(a.second[i].second, b.second[i].second));
  }
  // The run did change the parameters (training actually happened).
  EanModel fresh(small_cfg(), DType::f32, 7);
  bool moved = false;
  auto fresh_state = fresh.named_state();
  for (std::size_t i = 0; i < fresh_state.size(); ++i)
    if (!bitwise_equal(fresh_state[i].second, a.second[i].second)) moved = true;
  CHECK(moved);
}

TEST_CASE("network: eval forward is free of side effects") {
  ModelConfig cfg = small_cfg();
  EanModel model(cfg, DType::f32, 8);
  Rng rng(50);
  Tensor input = Tensor::randn({2, 3, 2, 32, 32}, rng, 0.5);
  model.forward(input);  // one training pass moves the running stats
  model.eval();
  std::vector<Tensor> before;
  for (auto& [name, t] : model.named_state()) before.push_back(t.detach().clone());
  Tensor l1 = model.forward(input);
  Tensor l2 = model.forward(input);
  CHECK(bitwise_equal(l1, l2));
  std::size_t i = 0;
  for (auto& [name, t] : model.named_state()) CHECK(bitwise_equal(t, before[i++]));
}

TEST_CASE("network: checkpoint round trip restores model and optimizer") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "ean_ckpt_test";
  fs::remove_all(dir);

  ModelConfig cfg = small_cfg();
  EanModel model(cfg, DType::f32, 3);
  Sgd opt(model.parameters(), 0.01, 0.9, 5e-4, {10});
  Rng rng(51);
  for (int step = 0; step < 2; ++step)
    train_step(model, Tensor::randn({2, 3, 2, 32, 32}, rng, 0.5), {1, 2}, opt);
  opt.set_epoch(10);
  save_checkpoint(dir.string(), model, &opt, {{"epoch", 10}});

  ModelConfig loaded_cfg = load_checkpoint_config(dir.string());
  CHECK(loaded_cfg.backbone == cfg.backbone);
  CHECK(loaded_cfg.segments == cfg.segments);
  EanModel restored(loaded_cfg, DType::f32, 99);
  Sgd ropt(restored.parameters(), 0.5);
  nlohmann::json meta = load_checkpoint(dir.string(), restored, &ropt);
  CHECK(meta["epoch"] == 10);
  CHECK(ropt.lr() == opt.lr());
  auto a = model.named_state(), b = restored.named_state();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(bitwise_equal(a[i].second, b[i].second));
  for (std::size_t i = 0; i < opt.velocity.size(); ++i)
    CHECK(bitwise_equal(opt.velocity[i], ropt.velocity[i]));
  // Identical eval behavior after restore.
  model.eval();
  restored.eval();
  Tensor input = Tensor::randn({1, 3, 2, 32, 32}, rng, 0.5);
  CHECK(bitwise_equal(model.forward(input), restored.forward(input)));
  fs::remove_all(dir);
}
