#include "ean/profiler.hpp"

#include <cmath>

#include "doctest.h"
#include "ean/ops.hpp"
#include "helpers.hpp"

using namespace ean;
using namespace testutil;

namespace {

std::uint64_t instrumented_macs(EanModel& model, const Tensor& input) {
  model.eval();
  MacCounter::reset();
  MacCounter::enable(true);
  model.forward(input);
  MacCounter::enable(false);
  return MacCounter::value();
}

bool in_band(double value, double center, double rel) {
  return value >= center * (1.0 - rel) && value <= center * (1.0 + rel);
}

}  // namespace

TEST_CASE("profiler: counting is deterministic") {
  CostReport a = count(ModelConfig::resnet50_shape());
  CostReport b = count(ModelConfig::resnet50_shape());
  REQUIRE(a.items.size() == b.items.size());
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    CHECK(a.items[i].name == b.items[i].name);
    CHECK(a.items[i].macs == b.items[i].macs);
    CHECK(a.items[i].params == b.items[i].params);
  }
}

TEST_CASE("profiler: analytic count equals the instrumented executor exactly") {
  Rng rng(61);
  SUBCASE("tiny with adaptive blocks and the interaction head") {
    ModelConfig cfg = ModelConfig::tiny();
    EanModel model(cfg, DType::f32, 5);
    Tensor input = Tensor::randn({1, 3, cfg.segments, 64, 64}, rng, 0.5);
    CHECK(double(instrumented_macs(model, input)) == count(cfg).total_macs());
  }
  SUBCASE("static-matrix arm skips the perceiver cost") {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.dynamic_fusion = false;
    EanModel model(cfg, DType::f32, 5);
    Tensor input = Tensor::randn({1, 3, cfg.segments, 64, 64}, rng, 0.5);
    const double analytic = count(cfg).total_macs();
    CHECK(double(instrumented_macs(model, input)) == analytic);
    ModelConfig dyn = ModelConfig::tiny();
    CHECK(analytic < count(dyn).total_macs());
  }
  SUBCASE("plain backbone") {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.eab_after_stages = {};
    cfg.soitr_after_stage = 0;
    EanModel model(cfg, DType::f32, 5);
    Tensor input = Tensor::randn({1, 3, cfg.segments, 64, 64}, rng, 0.5);
    CHECK(double(instrumented_macs(model, input)) == count(cfg).total_macs());
  }
  SUBCASE("motion-code variant") {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.lmc_enabled = true;
    cfg.frames_per_segment = 5;
    EanModel model(cfg, DType::f32, 5);
    Tensor input = Tensor::randn({1, cfg.segments, 5, 3, 64, 64}, rng, 0.5);
    CHECK(double(instrumented_macs(model, input)) == count(cfg).total_macs());
  }
}

TEST_CASE("profiler: parameter count matches the model exactly") {
  ModelConfig cfg = ModelConfig::tiny();
  EanModel model(cfg, DType::f32, 5);
  double model_params = 0;
  for (const auto& p : model.parameters()) model_params += double(p.numel());
  CHECK(count(cfg).total_params() == model_params);
}

TEST_CASE("profiler: large-config complexity bands") {
  ModelConfig base = ModelConfig::resnet50_shape();
  base.eab_after_stages = {};
  base.soitr_after_stage = 0;
  const CostReport rbase = count(base);

  // The plain backbone walk lands on the canonical residual-network numbers:
  // 23,508,032 body parameters plus the 174-way classifier (356,526) plus the
  // four depthwise segment convolutions (5,568).
  CHECK(rbase.total_params() == 23508032.0 + 356526.0 + 5568.0);
  CHECK(in_band(rbase.gmacs(), 33.1, 0.10));

  ModelConfig with_eabs = base;
  with_eabs.eab_after_stages = {1, 2, 3, 4};
  const double eab_delta = (count(with_eabs).total_macs() - rbase.total_macs()) / 1e9;
  CHECK(in_band(eab_delta, 2.2, 0.15));

  ModelConfig with_soi = base;
  with_soi.soitr_after_stage = 5;
  const CostReport rsoi = count(with_soi);
  CHECK(in_band((rsoi.total_macs() - rbase.total_macs()) / 1e9, 0.7, 0.15));
  CHECK(in_band((rsoi.total_params() - rbase.total_params()) / 1e6, 6.3, 0.05));

  const CostReport full = count(ModelConfig::resnet50_shape());
  CHECK(in_band(full.params_m(), 36.0, 0.05));
  // Insertions are additive: the full model is the backbone plus the deltas.
  CHECK(std::abs(full.total_macs() -
                 (rbase.total_macs() + full.macs_with_prefix("eab") +
                  full.macs_with_prefix("soi"))) < 1e3);

  ModelConfig with_lmc = ModelConfig::resnet50_shape();
  with_lmc.lmc_enabled = true;
  with_lmc.frames_per_segment = 5;  // 8 segments x 5 frames = 40 input frames
  CHECK(in_band(count(with_lmc).macs_with_prefix("lmc") / 1e9, 1.1, 0.20));
}

TEST_CASE("profiler: placement sweep cost is strictly increasing") {
  auto rows = placement_sweep(ModelConfig::resnet50_shape());
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].eab_stages == std::vector<std::int64_t>{1, 2});
  CHECK(rows[0].soi_stages == std::vector<std::int64_t>{3, 4, 5});
  CHECK(rows[3].soi_stages.empty());
  for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].gmacs > rows[i - 1].gmacs);
  // The third row is the canonical configuration.
  CHECK(std::abs(rows[2].gmacs - count(ModelConfig::resnet50_shape()).gmacs()) < 1e-9);
}

TEST_CASE("profiler: unresolvable shapes name the offending layer") {
  ModelConfig cfg = ModelConfig::resnet50_shape();
  cfg.lmc_enabled = true;
  cfg.frames_per_segment = 5;
  cfg.input_height = cfg.input_width = 100;  // not divisible into patches
  CHECK_THROWS_WITH_AS(count(cfg), doctest::Contains("lmc"), std::invalid_argument);

  ModelConfig bad = ModelConfig::tiny();
  bad.stage_channels = {12, 24, 48, 96, 194};  // no whole token bottleneck
  CHECK_THROWS_WITH_AS(count(bad), doctest::Contains("soi5"), std::invalid_argument);

  ModelConfig bad2 = ModelConfig::tiny();
  bad2.stage_channels = {13, 24, 48, 96, 192};
  CHECK_THROWS_WITH_AS(count(bad2), doctest::Contains("eab1"), std::invalid_argument);
}

TEST_CASE("profiler: report formats") {
  const CostReport r = count(ModelConfig::tiny());
  const std::string text = r.to_text();
  CHECK(text.find("stem") != std::string::npos);
  CHECK(text.find("eab2") != std::string::npos);
  CHECK(text.find("soi5") != std::string::npos);
  CHECK(text.find("total") != std::string::npos);

  nlohmann::json j = r.to_json();
  CHECK(j["total_macs"].get<double>() == r.total_macs());
  CHECK(j["total_params"].get<double>() == r.total_params());
  double sum = 0;
  for (const auto& it : j["items"]) sum += it["macs"].get<double>();
  CHECK(sum == r.total_macs());
}
