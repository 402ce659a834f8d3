#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ean/network.hpp"
#include "json.hpp"

namespace ean {

// Analytic multiply-accumulate and parameter counter over a model
// configuration. The walk is pure shape inference — no weights are
// instantiated — and mirrors the executable graph layer for layer, so for
// configurations the executor can build the analytic MAC total equals the
// instrumented count exactly (1 MAC = 1 FLOP throughout; batch-norm, ReLU,
// pooling and softmax are costless by the usual convention).
//
// Costs are reported for a single input clip (batch 1, `segments` frames).

struct CostItem {
  std::string name;  // dotted path, e.g. "stage3.block2.conv1"
  double macs = 0;
  double params = 0;
};

struct CostReport {
  std::vector<CostItem> items;

  double total_macs() const;
  double total_params() const;
  // Sum over items whose name starts with `prefix` ("eab", "soi", "lmc", ...).
  double macs_with_prefix(const std::string& prefix) const;
  double params_with_prefix(const std::string& prefix) const;

  double gmacs() const { return total_macs() / 1e9; }
  double params_m() const { return total_params() / 1e6; }

  // Human-readable table grouped by top-level module.
  std::string to_text() const;
  nlohmann::json to_json() const;
};

// Cost of the full model described by `cfg`. The adaptive-block perceiver is
// counted only when cfg.dynamic_fusion is set (a pinned identity matrix costs
// nothing to predict); the mixing itself is counted in both arms.
CostReport count(const ModelConfig& cfg);

// One row of the insertion-placement study on the profile-only large
// configuration: adaptive blocks after `eab_stages`, one interaction head
// after each of `soi_stages`.
struct SweepRow {
  std::vector<std::int64_t> eab_stages;
  std::vector<std::int64_t> soi_stages;
  double gmacs = 0;
  double params_m = 0;
};

// The four canonical placement rows (EAB 1-2/SOI 3-5, EAB 1-3/SOI 4-5,
// EAB 1-4/SOI 5, EAB 1-5/none) evaluated on the large configuration.
// Their total cost is strictly increasing.
std::vector<SweepRow> placement_sweep(const ModelConfig& base);

}  // namespace ean
