#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ean/eab.hpp"
#include "ean/lmc.hpp"
#include "ean/nn.hpp"
#include "ean/soi.hpp"
#include "json.hpp"

namespace ean {

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
  std::string backbone = "tiny";  // "tiny" (executable) | "resnet50-shape" (profile-only)
  // Stage 1 is the stem; stages 2..5 are the residual stages, so this holds
  // five channel widths and four depths.
  std::vector<std::int64_t> stage_channels = {12, 24, 48, 96, 192};
  std::vector<std::int64_t> stage_depths = {1, 1, 1, 1};
  std::int64_t input_height = 64;
  std::int64_t input_width = 64;
  std::int64_t segments = 8;             // N
  std::int64_t frames_per_segment = 1;   // 1 (RGB) or 5 (RGB with motion codes)
  std::vector<std::int64_t> eab_after_stages = {1, 2, 3, 4};
  std::int64_t soitr_after_stage = 5;    // 0 disables the interaction head
  bool lmc_enabled = false;
  std::int64_t num_classes = 4;
  double dropout = 0.5;
  // Static ablation arm: adaptive blocks keep their parameters but pin the
  // mixing matrix to the identity.
  bool dynamic_fusion = true;

  static ModelConfig tiny();
  static ModelConfig resnet50_shape();

  void validate() const;
  // Spatial extent of a stage's output: the stem is stride 4, stages 3..5
  // halve. Returns {C, H, W} for stage s in [1, 5].
  std::vector<std::int64_t> stage_shape(std::int64_t stage) const;
};

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

// Largest of {4, 3, 2, 1} dividing both the stage width and its bottleneck.
// Both the model builder and the analytic cost model use this rule, so the
// instrumented and analytic counts walk identical shapes.
std::int64_t pick_projection_groups(std::int64_t channels, std::int64_t bottleneck);

// ---------------------------------------------------------------------------
// Frame sampling
// ---------------------------------------------------------------------------

struct SamplingPlan {
  std::int64_t segments = 8;
  bool dense = false;  // 5-frame windows instead of single frames
  bool train = true;   // random placement within each group; eval is centered
};

// Split [0, video_len) into `segments` near-equal groups (remainder joins the
// last group) and pick one window per group: 5 consecutive indices (dense) or
// a single index. Short groups clamp-repeat their last frame. Eval placement
// is centered and deterministic.
std::vector<std::vector<std::int64_t>> sample_frames(std::int64_t video_len,
                                                     const SamplingPlan& plan, Rng& rng);
// First index of each segment window.
std::vector<std::int64_t> sparse_clip(const std::vector<std::vector<std::int64_t>>& segments);

// Random horizontal flip (probability 1/2) unless the clip's class is
// direction sensitive, in which case the clip passes through untouched.
Tensor maybe_hflip(const Tensor& clip, bool direction_sensitive, Rng& rng);

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

// Two stacked 3x3 per-frame convolutions with batch norm and a residual
// shortcut (projected when shape changes).
class BasicBlock : public Module {
 public:
  BasicBlock(std::int64_t in_channels, std::int64_t out_channels, std::int64_t stride, DType dt,
             Rng& rng);
  Tensor forward(const Tensor& x);

  std::shared_ptr<Conv> conv1, conv2, proj;
  std::shared_ptr<BatchNorm> bn1, bn2, proj_bn;
};

// A residual stage: a depthwise 3-tap temporal convolution over the segment
// axis, then the per-frame residual blocks (first block carries the stride).
class ResidualStage : public Module {
 public:
  ResidualStage(std::int64_t in_channels, std::int64_t out_channels, std::int64_t depth,
                std::int64_t stride, DType dt, Rng& rng);
  Tensor forward(const Tensor& x);

  std::shared_ptr<Conv> temporal;
  std::vector<std::shared_ptr<BasicBlock>> blocks;
};

// The assembled network: stem (+ optional motion-code fusion), four residual
// stages, adaptive blocks after configured stages, the object-interaction
// head after stage 5 (or global average pooling), dropout, and a linear
// classifier. With every adaptive projection zero-initialized the logits
// equal those of the plain backbone.
class EanModel : public Module {
 public:
  EanModel(const ModelConfig& cfg, DType dt, std::uint64_t seed);

  // RGB input: [B, 3, N, H, W]. With motion codes enabled: [B, N, 5, 3, H, W]
  // (per-segment dense frame windows; the stem consumes each segment's first
  // frame).
  Tensor forward(const Tensor& input);

  ModelConfig cfg;
  std::shared_ptr<Conv> stem_conv;
  std::shared_ptr<BatchNorm> stem_bn;
  std::shared_ptr<LatentMotionCode> lmc;
  std::vector<std::shared_ptr<ResidualStage>> stages;               // stages 2..5
  std::vector<std::shared_ptr<EventAdaptiveBlock>> eabs;            // parallel to cfg order
  std::shared_ptr<SparseObjectTransformer> soi;
  std::shared_ptr<Linear> fc;

  std::shared_ptr<EventAdaptiveBlock> eab_after(std::int64_t stage) const;

 private:
  Rng dropout_rng_;
};

// ---------------------------------------------------------------------------
// Loss and optimizer
// ---------------------------------------------------------------------------

// Mean negative log-likelihood of the labels under log-softmaxed logits.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels);

// SGD with classical momentum and decoupled-from-nothing L2 weight decay
// (decay is added to the gradient). Learning rate follows step decay: at each
// milestone epoch the rate is multiplied by `gamma`.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, double base_lr, double momentum = 0.9,
      double weight_decay = 5e-4, std::vector<std::int64_t> milestones = {},
      double gamma = 0.1);

  void step();                        // applies one update using current grads
  void set_epoch(std::int64_t epoch); // recomputes the scheduled rate
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  std::vector<Tensor> params;
  std::vector<Tensor> velocity;
  // Optional per-parameter learning-rate multipliers (empty = all ones). Lets
  // callers give a slow-starting head a larger step without a second optimizer.
  std::vector<double> lr_scales;
  double base_lr, momentum, weight_decay, gamma;
  std::vector<std::int64_t> milestones;

 private:
  double lr_;
};

// Forward, cross-entropy, backward, optimizer step; returns the loss value.
double train_step(EanModel& model, const Tensor& input, const std::vector<std::int64_t>& labels,
                  Sgd& opt);

// ---------------------------------------------------------------------------
// Checkpoints: a directory of named tensor files plus the config and
// optimizer state.
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& dir, EanModel& model, const Sgd* opt,
                     const nlohmann::json& meta = nlohmann::json::object());
nlohmann::json load_checkpoint(const std::string& dir, EanModel& model, Sgd* opt);
// Reads just the config (to construct the model before loading weights).
ModelConfig load_checkpoint_config(const std::string& dir);

}  // namespace ean
