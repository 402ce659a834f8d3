#include "ean/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "ean/ops.hpp"
#include "helpers.hpp"

using namespace ean;
using namespace testutil;
namespace fs = std::filesystem;

namespace {

SyntheticSpec small_spec() {
  SyntheticSpec spec;
  spec.num_classes = 4;
  spec.videos_per_class = 3;
  spec.frames = 6;
  spec.canvas = 32;
  spec.seed = 77;
  return spec;
}

std::vector<char> file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(bool(f));
  return std::vector<char>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

// Circular mean position of the intensity mass along one axis.
double circular_centroid(const Tensor& video, std::int64_t frame, bool along_x) {
  const std::int64_t S = video.dim(2), F = video.dim(1);
  double sc = 0, ss = 0;
  for (std::int64_t y = 0; y < S; ++y)
    for (std::int64_t x = 0; x < S; ++x) {
      const double v = video.at(((0 * F + frame) * S + y) * S + x);
      const double ang = 2.0 * M_PI * double(along_x ? x : y) / double(S);
      sc += v * std::cos(ang);
      ss += v * std::sin(ang);
    }
  double pos = std::atan2(ss, sc) / (2.0 * M_PI) * double(S);
  if (pos < 0) pos += double(S);
  return pos;
}

double wrapped_diff(double a, double b, double n) {
  double d = std::fmod(a - b, n);
  if (d < -n / 2) d += n;
  if (d >= n / 2) d -= n;
  return d;
}

// Two-sample Kolmogorov-Smirnov p-value (asymptotic series).
double ks_pvalue(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = double(a.size()), nb = double(b.size());
  double d = 0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] <= b[j])
      ++i;
    else
      ++j;
    d = std::max(d, std::abs(double(i) / na - double(j) / nb));
  }
  const double ne = std::sqrt(na * nb / (na + nb));
  const double lambda = (ne + 0.12 + 0.11 / ne) * d;
  double p = 0;
  for (int k = 1; k <= 100; ++k)
    p += 2.0 * ((k % 2 == 1) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
  return std::clamp(p, 0.0, 1.0);
}

}  // namespace

TEST_CASE("dataset: spec validation") {
  SyntheticSpec spec;
  spec.num_classes = 5;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = SyntheticSpec{};
  spec.min_size = 30;
  spec.max_size = 10;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec = SyntheticSpec{};
  spec.min_speed = 0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  CHECK_NOTHROW(SyntheticSpec{}.validate());
}

TEST_CASE("dataset: rendering is deterministic and bounded") {
  SyntheticSpec spec = small_spec();
  Tensor a = render_video(spec, 1, 2);
  Tensor b = render_video(spec, 1, 2);
  REQUIRE(a.shape() == std::vector<std::int64_t>{3, 6, 32, 32});
  CHECK(bitwise_equal(a, b));
  spec.seed = 78;
  CHECK(!bitwise_equal(a, render_video(spec, 1, 2)));
  double lo = 1e9, hi = -1e9;
  for (float v : a.vec<float>()) {
    lo = std::min(lo, double(v));
    hi = std::max(hi, double(v));
  }
  CHECK(lo >= 0.0);
  CHECK(hi <= 1.0 + 0.04 + 1e-6);
  CHECK(hi > 0.3);  // an object is actually present
}

TEST_CASE("dataset: classes share appearance video for video") {
  SyntheticSpec spec = small_spec();
  spec.noise = 0;  // isolate the geometry
  for (std::int64_t other : {1, 2, 3}) {
    Tensor a = render_video(spec, 0, 1);
    Tensor b = render_video(spec, other, 1);
    // Identical first frame: same shape, size, color, start position.
    CHECK(bitwise_equal(slice(a, 1, 0, 1), slice(b, 1, 0, 1)));
    // Later frames diverge because only the motion differs.
    CHECK(!bitwise_equal(slice(a, 1, 3, 1), slice(b, 1, 3, 1)));
  }
}

TEST_CASE("dataset: objects move in the class direction at the drawn speed") {
  SyntheticSpec spec = small_spec();
  spec.noise = 0;
  spec.min_speed = spec.max_speed = 2.0;
  spec.min_size = spec.max_size = 8;
  spec.canvas = 48;
  const double want[4][2] = {{+2, 0}, {-2, 0}, {0, +2}, {0, -2}};  // (dx, dy)
  for (std::int64_t label = 0; label < 4; ++label) {
    Tensor v = render_video(spec, label, 0);
    for (std::int64_t t = 0; t + 1 < spec.frames; ++t) {
      const double dx = wrapped_diff(circular_centroid(v, t + 1, true),
                                     circular_centroid(v, t, true), 48);
      const double dy = wrapped_diff(circular_centroid(v, t + 1, false),
                                     circular_centroid(v, t, false), 48);
      CHECK(std::abs(dx - want[label][0]) < 0.35);
      CHECK(std::abs(dy - want[label][1]) < 0.35);
    }
  }
}

TEST_CASE("dataset: generation writes a complete, reloadable corpus") {
  const fs::path dir = fs::temp_directory_path() / "ean_data_small";
  fs::remove_all(dir);
  SyntheticSpec spec = small_spec();
  auto manifest = generate(spec, dir.string());
  REQUIRE(manifest.size() == 12);
  CHECK(fs::exists(dir / "spec.json"));
  int sensitive = 0;
  for (const auto& e : manifest) {
    CHECK(fs::exists(dir / e.path));
    if (e.direction_sensitive) ++sensitive;
  }
  CHECK(sensitive == 6);  // the two horizontal classes
  auto back = read_manifest(dir.string());
  REQUIRE(back.size() == manifest.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].path == manifest[i].path);
    CHECK(back[i].label == manifest[i].label);
    CHECK(back[i].direction_sensitive == manifest[i].direction_sensitive);
  }
  Tensor v = load_video(dir.string(), back[5]);
  CHECK(v.shape() == std::vector<std::int64_t>{3, 6, 32, 32});
  CHECK(bitwise_equal(v, render_video(spec, back[5].label, 2)));
  fs::remove_all(dir);
}

TEST_CASE("dataset: same seed gives byte-identical output, threads included") {
  const fs::path d1 = fs::temp_directory_path() / "ean_data_a";
  const fs::path d2 = fs::temp_directory_path() / "ean_data_b";
  const fs::path d3 = fs::temp_directory_path() / "ean_data_c";
  for (const auto& d : {d1, d2, d3}) fs::remove_all(d);
  SyntheticSpec spec = small_spec();
  auto m1 = generate(spec, d1.string());
  generate(spec, d2.string());
  generate(spec, d3.string(), /*threads=*/3);
  for (const auto& e : m1) {
    auto bytes = file_bytes(d1 / e.path);
    CHECK(bytes == file_bytes(d2 / e.path));
    CHECK(bytes == file_bytes(d3 / e.path));
  }
  CHECK(file_bytes(d1 / "manifest.jsonl") == file_bytes(d2 / "manifest.jsonl"));
  CHECK(file_bytes(d1 / "manifest.jsonl") == file_bytes(d3 / "manifest.jsonl"));
  for (const auto& d : {d1, d2, d3}) fs::remove_all(d);
}

TEST_CASE("dataset: single frames carry no class signal (KS test)") {
  SyntheticSpec spec;
  spec.videos_per_class = 60;
  spec.frames = 8;
  spec.canvas = 48;
  spec.seed = 9;
  Rng pick(123);
  auto frame_samples = [&](std::int64_t label, std::int64_t t) {
    std::vector<double> vals;
    std::uniform_int_distribution<std::int64_t> coord(0, spec.canvas - 1);
    for (std::int64_t i = 0; i < spec.videos_per_class; ++i) {
      Tensor v = render_video(spec, label, i);
      for (int s = 0; s < 4; ++s) {
        const std::int64_t y = coord(pick), x = coord(pick);
        vals.push_back(v.at(((0 * spec.frames + t) * spec.canvas + y) * spec.canvas + x));
      }
    }
    return vals;
  };
  for (std::int64_t t : {std::int64_t(0), spec.frames / 2, spec.frames - 1}) {
    const double p01 = ks_pvalue(frame_samples(0, t), frame_samples(1, t));
    const double p02 = ks_pvalue(frame_samples(0, t), frame_samples(2, t));
    INFO("frame ", t, ": p(lr vs rl)=", p01, " p(lr vs td)=", p02);
    CHECK(p01 > 0.01);
    CHECK(p02 > 0.01);
  }
}

TEST_CASE("dataset: bilinear resize fundamentals") {
  Rng rng(31);
  Tensor img = Tensor::rand_uniform({2, 3, 5, 7}, rng, 0.0, 1.0);
  CHECK(bitwise_equal(resize_bilinear(img, 5, 7), img));  // identity at same size

  Tensor flat = Tensor::full({1, 4, 4}, 0.6);
  Tensor up = resize_bilinear(flat, 9, 13);
  for (float v : up.vec<float>()) CHECK(std::abs(v - 0.6) < 1e-6);

  Tensor ramp = Tensor::zeros({1, 2});
  ramp.impl()->data->write(1, 1.0);
  Tensor r4 = resize_bilinear(ramp, 1, 4);
  CHECK(r4.at(0) == 0.0);
  CHECK(std::abs(r4.at(1) - 0.25) < 1e-6);
  CHECK(std::abs(r4.at(2) - 0.75) < 1e-6);
  CHECK(r4.at(3) == 1.0);
}

TEST_CASE("dataset: zoom enlarges the object") {
  // A centered soft disc of radius 6 on a 32x32 canvas.
  Tensor img = Tensor::zeros({1, 1, 32, 32});
  for (std::int64_t y = 0; y < 32; ++y)
    for (std::int64_t x = 0; x < 32; ++x) {
      const double d = std::hypot(double(y) - 15.5, double(x) - 15.5);
      img.impl()->data->write(y * 32 + x, std::clamp(6.0 - d + 0.5, 0.0, 1.0));
    }
  Tensor zoomed = zoom_video(img, 2.0);
  REQUIRE(zoomed.shape() == img.shape());
  double area = 0, zoomed_area = 0;
  for (float v : img.vec<float>()) area += v;
  for (float v : zoomed.vec<float>()) zoomed_area += v;
  CHECK(zoomed_area > 3.4 * area);
  CHECK(zoomed_area < 4.6 * area);
}

TEST_CASE("dataset: gather_frames stacks the requested frames") {
  SyntheticSpec spec = small_spec();
  Tensor v = render_video(spec, 2, 0);
  Tensor clip = gather_frames(v, {1, 3, 3, 5});
  REQUIRE(clip.shape() == std::vector<std::int64_t>{3, 4, 32, 32});
  CHECK(bitwise_equal(slice(clip, 1, 0, 1), slice(v, 1, 1, 1)));
  CHECK(bitwise_equal(slice(clip, 1, 1, 1), slice(v, 1, 3, 1)));
  CHECK(bitwise_equal(slice(clip, 1, 2, 1), slice(v, 1, 3, 1)));
  CHECK(bitwise_equal(slice(clip, 1, 3, 1), slice(v, 1, 5, 1)));
  CHECK_THROWS_AS(gather_frames(v, {9}), std::invalid_argument);
}
