#include "ean/harness.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <stdexcept>

#include "ean/eab.hpp"
#include "ean/ops.hpp"

namespace ean {

namespace {

Tensor stack_clips(const std::vector<Tensor>& clips) {
  std::vector<Tensor> rows;
  rows.reserve(clips.size());
  for (const auto& c : clips) {
    Shape s = c.shape();
    s.insert(s.begin(), 1);
    rows.push_back(reshape(c, s));
  }
  return concat(rows, 0);
}

std::int64_t argmax_row(const Tensor& logits, std::int64_t row) {
  const std::int64_t K = logits.dim(1);
  std::int64_t best = 0;
  double best_v = logits.at(row * K);
  for (std::int64_t k = 1; k < K; ++k) {
    const double v = logits.at(row * K + k);
    if (v > best_v) {
      best_v = v;
      best = k;
    }
  }
  return best;
}

}  // namespace

void to_json(nlohmann::json& j, const TrainOptions& o) {
  j = nlohmann::json{{"epochs", o.epochs},
                     {"batch", o.batch},
                     {"lr", o.lr},
                     {"momentum", o.momentum},
                     {"weight_decay", o.weight_decay},
                     {"milestones", o.milestones},
                     {"gamma", o.gamma},
                     {"augment_hflip", o.augment_hflip},
                     {"perceiver_lr_scale", o.perceiver_lr_scale},
                     {"seed", o.seed}};
}

void from_json(const nlohmann::json& j, TrainOptions& o) {
  TrainOptions defaults;
  o.epochs = j.value("epochs", defaults.epochs);
  o.batch = j.value("batch", defaults.batch);
  o.lr = j.value("lr", defaults.lr);
  o.momentum = j.value("momentum", defaults.momentum);
  o.weight_decay = j.value("weight_decay", defaults.weight_decay);
  o.milestones = j.value("milestones", defaults.milestones);
  o.gamma = j.value("gamma", defaults.gamma);
  o.augment_hflip = j.value("augment_hflip", defaults.augment_hflip);
  o.perceiver_lr_scale = j.value("perceiver_lr_scale", defaults.perceiver_lr_scale);
  o.seed = j.value("seed", defaults.seed);
}

LoadedDataset LoadedDataset::open(const std::string& dir) {
  LoadedDataset out;
  for (const auto& e : read_manifest(dir)) {
    out.videos.push_back(load_video(dir, e));
    out.labels.push_back(e.label);
    out.direction_sensitive.push_back(e.direction_sensitive);
  }
  if (out.videos.empty()) throw std::runtime_error("dataset under " + dir + " is empty");
  return out;
}

Tensor make_clip(const Tensor& video, const ModelConfig& cfg, bool train, Rng& rng) {
  if (video.rank() != 4 || video.dim(0) != 3)
    throw std::invalid_argument("make_clip: expected a [3, F, H, W] video");
  if (video.dim(2) != cfg.input_height || video.dim(3) != cfg.input_width)
    throw std::invalid_argument("make_clip: video extent " + std::to_string(video.dim(2)) + "x" +
                                std::to_string(video.dim(3)) + " does not match the model input " +
                                std::to_string(cfg.input_height) + "x" +
                                std::to_string(cfg.input_width));
  auto segments = sample_frames(video.dim(1), {cfg.segments, cfg.lmc_enabled, train}, rng);
  if (!cfg.lmc_enabled) return gather_frames(video, sparse_clip(segments));
  std::vector<std::int64_t> all;
  for (const auto& seg : segments) all.insert(all.end(), seg.begin(), seg.end());
  Tensor dense = gather_frames(video, all);  // [3, N*5, H, W]
  dense = reshape(dense, {3, cfg.segments, 5, video.dim(2), video.dim(3)});
  return permute(dense, {1, 2, 0, 3, 4});  // [N, 5, 3, H, W]
}

double evaluate(EanModel& model, const LoadedDataset& data, std::int64_t batch) {
  NoGradGuard ng;
  model.eval();
  Rng rng(0);  // eval sampling is deterministic; the generator is unused
  std::int64_t correct = 0;
  for (std::int64_t lo = 0; lo < data.size(); lo += batch) {
    const std::int64_t hi = std::min(data.size(), lo + batch);
    std::vector<Tensor> clips;
    for (std::int64_t i = lo; i < hi; ++i)
      clips.push_back(make_clip(data.videos[std::size_t(i)], model.cfg, false, rng));
    Tensor logits = model.forward(stack_clips(clips));
    for (std::int64_t i = lo; i < hi; ++i)
      if (argmax_row(logits, i - lo) == data.labels[std::size_t(i)]) ++correct;
  }
  return double(correct) / double(data.size());
}

std::vector<EpochStats> train_model(EanModel& model, const LoadedDataset& train,
                                    const LoadedDataset& val, const TrainOptions& opts,
                                    std::ostream* log) {
  if (opts.epochs < 1 || opts.batch < 1)
    throw std::invalid_argument("train_model: epochs and batch must be positive");
  const auto named = model.named_parameters();
  std::vector<Tensor> params;
  params.reserve(named.size());
  for (const auto& [name, p] : named) params.push_back(p);
  Sgd opt(std::move(params), opts.lr, opts.momentum, opts.weight_decay, opts.milestones,
          opts.gamma);
  if (opts.perceiver_lr_scale != 1.0) {
    opt.lr_scales.assign(named.size(), 1.0);
    for (std::size_t i = 0; i < named.size(); ++i)
      if (named[i].first.find("scale_fc") != std::string::npos)
        opt.lr_scales[i] = opts.perceiver_lr_scale;
  }
  Rng rng(opts.seed ^ 0x7ac0'5eedULL);
  std::vector<std::int64_t> order(std::size_t(train.size()));
  std::iota(order.begin(), order.end(), 0);

  std::vector<EpochStats> history;
  for (std::int64_t epoch = 0; epoch < opts.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    opt.set_epoch(epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::int64_t steps = 0;
    for (std::int64_t lo = 0; lo < train.size(); lo += opts.batch) {
      const std::int64_t hi = std::min(train.size(), lo + opts.batch);
      std::vector<Tensor> clips;
      std::vector<std::int64_t> labels;
      for (std::int64_t k = lo; k < hi; ++k) {
        const auto i = std::size_t(order[std::size_t(k)]);
        Tensor clip = make_clip(train.videos[i], model.cfg, /*train=*/true, rng);
        if (opts.augment_hflip) clip = maybe_hflip(clip, train.direction_sensitive[i], rng);
        clips.push_back(clip);
        labels.push_back(train.labels[i]);
      }
      loss_sum += train_step(model, stack_clips(clips), labels, opt);
      ++steps;
    }
    EpochStats st;
    st.epoch = epoch;
    st.mean_loss = loss_sum / double(std::max<std::int64_t>(1, steps));
    st.val_accuracy = evaluate(model, val);
    st.lr = opt.lr();
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.push_back(st);
    if (log) {
      *log << nlohmann::json{{"epoch", st.epoch},
                             {"mean_loss", st.mean_loss},
                             {"val_accuracy", st.val_accuracy},
                             {"lr", st.lr},
                             {"seconds", st.seconds}}
                  .dump()
           << "\n";
      log->flush();
    }
  }
  return history;
}

Tensor condition_clip(const Tensor& video, const ModelConfig& cfg, EvalCondition cond) {
  Rng rng(0);
  switch (cond) {
    case EvalCondition::anchor:
      return make_clip(video, cfg, false, rng);
    case EvalCondition::zoom:
      return make_clip(zoom_video(video, 1.6), cfg, false, rng);
    case EvalCondition::halfrate: {
      const std::int64_t F = video.dim(1);
      const std::int64_t half = std::max<std::int64_t>(cfg.segments, F / 2);
      const std::int64_t off = (F - half) / 2;
      std::vector<std::int64_t> window(static_cast<std::size_t>(half));
      std::iota(window.begin(), window.end(), off);
      return make_clip(gather_frames(video, window), cfg, false, rng);
    }
  }
  throw std::logic_error("condition_clip: unknown condition");
}

namespace {

// Accumulate normalized per-family branch shares for every sample in a batch.
void accumulate_shares(EanModel& model, std::map<std::string, double>& acc,
                       std::int64_t& contributions) {
  for (const auto& eab : model.eabs) {
    if (!eab->last_mixing.defined())
      throw std::runtime_error("no mixing matrix captured; run a forward pass first");
    const auto rows = kernel_weights(eab->last_mixing, eab->cfg);
    for (const auto& row : rows) {
      double s_sum = 0, t_sum = 0;
      for (const auto& bw : row) (bw.branch[0] == 'S' ? s_sum : t_sum) += bw.weight;
      for (const auto& bw : row)
        acc[bw.branch] += bw.weight / (bw.branch[0] == 'S' ? s_sum : t_sum);
      ++contributions;
    }
  }
}

}  // namespace

std::map<std::string, double> mean_branch_shares(EanModel& model, const LoadedDataset& data,
                                                 EvalCondition cond, std::int64_t batch) {
  if (model.eabs.empty())
    throw std::invalid_argument("the model has no adaptive blocks to inspect");
  NoGradGuard ng;
  model.eval();
  std::map<std::string, double> acc;
  std::int64_t contributions = 0;
  for (std::int64_t lo = 0; lo < data.size(); lo += batch) {
    const std::int64_t hi = std::min(data.size(), lo + batch);
    std::vector<Tensor> clips;
    for (std::int64_t i = lo; i < hi; ++i)
      clips.push_back(condition_clip(data.videos[std::size_t(i)], model.cfg, cond));
    model.forward(stack_clips(clips));
    accumulate_shares(model, acc, contributions);
  }
  for (auto& [branch, v] : acc) v /= double(contributions);
  return acc;
}

void write_kernel_report(EanModel& model, const LoadedDataset& data, std::ostream& out,
                         std::int64_t batch) {
  if (model.eabs.empty())
    throw std::invalid_argument("the model has no adaptive blocks to inspect");
  NoGradGuard ng;
  model.eval();
  for (std::int64_t lo = 0; lo < data.size(); lo += batch) {
    const std::int64_t hi = std::min(data.size(), lo + batch);
    std::vector<Tensor> clips;
    for (std::int64_t i = lo; i < hi; ++i)
      clips.push_back(condition_clip(data.videos[std::size_t(i)], model.cfg,
                                     EvalCondition::anchor));
    model.forward(stack_clips(clips));
    for (std::size_t b = 0; b < model.eabs.size(); ++b) {
      const auto& eab = model.eabs[b];
      const auto rows = kernel_weights(eab->last_mixing, eab->cfg);
      const std::string block = "eab" + std::to_string(model.cfg.eab_after_stages[b]);
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (const auto& bw : rows[r])
          out << nlohmann::json{{"sample_id", lo + std::int64_t(r)},
                                {"block", block},
                                {"branch", bw.branch},
                                {"weight", bw.weight}}
                     .dump()
              << "\n";
    }
  }
}

nlohmann::json ScaleShiftReport::to_json() const {
  return nlohmann::json{{"anchor", anchor},
                        {"zoom", zoom},
                        {"halfrate", halfrate},
                        {"spatial_small_up", spatial_small_up},
                        {"temporal_small_up", temporal_small_up}};
}

ScaleShiftReport scale_shift_study(EanModel& model, const LoadedDataset& data,
                                   std::int64_t batch) {
  ScaleShiftReport rep;
  rep.anchor = mean_branch_shares(model, data, EvalCondition::anchor, batch);
  rep.zoom = mean_branch_shares(model, data, EvalCondition::zoom, batch);
  rep.halfrate = mean_branch_shares(model, data, EvalCondition::halfrate, batch);
  rep.spatial_small_up = rep.zoom.at("S-1") > rep.anchor.at("S-1");
  rep.temporal_small_up = rep.halfrate.at("T-1") > rep.anchor.at("T-1");
  return rep;
}

}  // namespace ean
