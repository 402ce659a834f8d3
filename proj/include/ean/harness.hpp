#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "ean/dataset.hpp"
#include "ean/network.hpp"
#include "json.hpp"

namespace ean {

// ---------------------------------------------------------------------------
// Training and evaluation over a generated video corpus.
// ---------------------------------------------------------------------------

// A corpus loaded fully into memory (the synthetic sets are small).
struct LoadedDataset {
  std::vector<Tensor> videos;  // each [3, F, H, W]
  std::vector<std::int64_t> labels;
  std::vector<bool> direction_sensitive;

  static LoadedDataset open(const std::string& dir);
  std::int64_t size() const { return static_cast<std::int64_t>(videos.size()); }
};

struct TrainOptions {
  std::int64_t epochs = 6;
  std::int64_t batch = 8;
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<std::int64_t> milestones = {4};  // epochs at which lr decays x0.1
  double gamma = 0.1;
  bool augment_hflip = true;  // honored per video's direction sensitivity
  // Learning-rate multiplier for the mixing-matrix head of each adaptive
  // block (parameters named "scale_fc"). That layer starts at zero so the
  // blocks are transparent at initialization, which also means its gradient
  // signal is weak early on; a boost shortens the cold start.
  double perceiver_lr_scale = 1.0;
  std::uint64_t seed = 1;     // shuffling, frame sampling, flips
};

// JSON form uses the field names verbatim; absent keys keep their defaults.
void to_json(nlohmann::json& j, const TrainOptions& o);
void from_json(const nlohmann::json& j, TrainOptions& o);

struct EpochStats {
  std::int64_t epoch = 0;
  double mean_loss = 0;
  double val_accuracy = 0;
  double lr = 0;
  double seconds = 0;
};

// Build one model input from a video: the eval-time (deterministic, centered)
// clip, or a train-time random clip drawn from `rng`. Handles both the sparse
// [3, N, H, W] and the dense motion-code [N, 5, 3, H, W] layouts.
Tensor make_clip(const Tensor& video, const ModelConfig& cfg, bool train, Rng& rng);

// Classification accuracy of the model on the corpus (eval mode).
double evaluate(EanModel& model, const LoadedDataset& data, std::int64_t batch = 10);

// SGD training loop with per-epoch validation. Appends one JSON line per
// epoch to `log` when given. Deterministic in (model seed, opts.seed).
std::vector<EpochStats> train_model(EanModel& model, const LoadedDataset& train,
                                    const LoadedDataset& val, const TrainOptions& opts,
                                    std::ostream* log = nullptr);

// ---------------------------------------------------------------------------
// Mixing-matrix inspection.
// ---------------------------------------------------------------------------

// Evaluation condition for the scale-shift study: the video as generated,
// spatially zoomed in 1.6x, or sampled at twice the frame rate (the same
// number of frames covering the center half of the span).
enum class EvalCondition { anchor, zoom, halfrate };

Tensor condition_clip(const Tensor& video, const ModelConfig& cfg, EvalCondition cond);

// Mean per-branch weight share under a condition, averaged over all adaptive
// blocks and all videos. Shares are normalized within the spatial family
// (S-1, S-3, S-5 sum to 1) and within the temporal family separately.
std::map<std::string, double> mean_branch_shares(EanModel& model, const LoadedDataset& data,
                                                 EvalCondition cond, std::int64_t batch = 10);

// Per-sample kernel-weight records for every adaptive block, one JSON line
// each: {"sample_id", "block", "branch", "weight"}.
void write_kernel_report(EanModel& model, const LoadedDataset& data, std::ostream& out,
                         std::int64_t batch = 10);

struct ScaleShiftReport {
  std::map<std::string, double> anchor, zoom, halfrate;  // branch -> share
  bool spatial_small_up = false;   // S-1 share rises under zoom-in
  bool temporal_small_up = false;  // T-1 share rises under 2x frame rate
  nlohmann::json to_json() const;
};

ScaleShiftReport scale_shift_study(EanModel& model, const LoadedDataset& data,
                                   std::int64_t batch = 10);

}  // namespace ean
