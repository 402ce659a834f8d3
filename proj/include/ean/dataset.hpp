#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ean/tensor.hpp"
#include "json.hpp"

namespace ean {

// ---------------------------------------------------------------------------
// Synthetic moving-shape videos.
//
// Every class shares one appearance distribution — in fact video i of every
// class reuses the identical shape, size, color, speed and start position —
// and differs only in the direction the object travels. No single frame can
// reveal the class; the signal is purely spatio-temporal. The canvas is a
// torus, so objects wrap around and the motion statistics are stationary in
// time.
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  // Classes are motion directions, in order: left-to-right, right-to-left,
  // top-to-bottom, bottom-to-top; 2 to 4 of them. Horizontal classes are
  // direction sensitive (a mirror flip would change their label), vertical
  // ones are not.
  std::int64_t num_classes = 4;
  std::int64_t videos_per_class = 100;
  std::int64_t frames = 12;
  std::int64_t canvas = 64;           // square, divisible by 32 for motion codes
  std::int64_t min_size = 6, max_size = 28;   // object extent in pixels
  double min_speed = 1.0, max_speed = 6.0;    // pixels per frame
  double noise = 0.04;                        // additive uniform pixel noise
  std::uint64_t seed = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticSpec& spec);
void from_json(const nlohmann::json& j, SyntheticSpec& spec);

struct ManifestEntry {
  std::string path;  // relative to the dataset directory
  std::int64_t label = 0;
  bool direction_sensitive = false;
};

// Render video `index` of class `label` as [3, frames, canvas, canvas] in
// [0, 1 + noise]. Deterministic in (spec.seed, label, index); the appearance
// draw depends on the index only, so classes are appearance-matched video
// for video.
Tensor render_video(const SyntheticSpec& spec, std::int64_t label, std::int64_t index);

// Write videos/<class>_<index>.eant, manifest.jsonl and spec.json under
// `dir`. Rendering parallelizes over videos when `threads` > 1 with no effect
// on the bytes produced. Returns the manifest.
std::vector<ManifestEntry> generate(const SyntheticSpec& spec, const std::string& dir,
                                    int threads = 1);

std::vector<ManifestEntry> read_manifest(const std::string& dir);
Tensor load_video(const std::string& dir, const ManifestEntry& entry);

// ---------------------------------------------------------------------------
// Evaluation-time video transforms (plain value computations, no gradients).
// ---------------------------------------------------------------------------

// Bilinear resize of the trailing two axes (half-pixel-center convention).
Tensor resize_bilinear(const Tensor& x, std::int64_t out_h, std::int64_t out_w);

// Spatial zoom-in: center-crop the trailing two axes by `factor`, then
// resize back to the original extent.
Tensor zoom_video(const Tensor& video, double factor);

// Stack the given frames of a [C, F, H, W] video into a clip [C, n, H, W].
Tensor gather_frames(const Tensor& video, const std::vector<std::int64_t>& frame_indices);

}  // namespace ean
