#include "ean/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <thread>

#include "ean/ops.hpp"
#include "ean/serialization.hpp"

namespace ean {

namespace fs = std::filesystem;

void SyntheticSpec::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("dataset spec: " + m); };
  if (num_classes < 2 || num_classes > 4) fail("num_classes must be 2 to 4 motion directions");
  if (videos_per_class < 1) fail("videos_per_class must be positive");
  if (frames < 2) fail("a video needs at least 2 frames");
  if (canvas < 16) fail("canvas too small");
  if (min_size < 2 || max_size < min_size || max_size > canvas)
    fail("object size range must satisfy 2 <= min <= max <= canvas");
  if (min_speed <= 0 || max_speed < min_speed) fail("speed range must be positive");
  if (noise < 0) fail("noise must be nonnegative");
}

void to_json(nlohmann::json& j, const SyntheticSpec& spec) {
  j = nlohmann::json{{"num_classes", spec.num_classes},
                     {"videos_per_class", spec.videos_per_class},
                     {"frames", spec.frames},
                     {"canvas", spec.canvas},
                     {"min_size", spec.min_size},
                     {"max_size", spec.max_size},
                     {"min_speed", spec.min_speed},
                     {"max_speed", spec.max_speed},
                     {"noise", spec.noise},
                     {"seed", spec.seed}};
}

void from_json(const nlohmann::json& j, SyntheticSpec& spec) {
  SyntheticSpec d;
  spec.num_classes = j.value("num_classes", d.num_classes);
  spec.videos_per_class = j.value("videos_per_class", d.videos_per_class);
  spec.frames = j.value("frames", d.frames);
  spec.canvas = j.value("canvas", d.canvas);
  spec.min_size = j.value("min_size", d.min_size);
  spec.max_size = j.value("max_size", d.max_size);
  spec.min_speed = j.value("min_speed", d.min_speed);
  spec.max_speed = j.value("max_speed", d.max_speed);
  spec.noise = j.value("noise", d.noise);
  spec.seed = j.value("seed", d.seed);
}

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double sat(double v) { return std::clamp(v, 0.0, 1.0); }

// Signed wrapped offset p - c on a circle of circumference n, in [-n/2, n/2).
double wrapped_delta(double p, double c, double n) {
  double d = std::fmod(p - c, n);
  if (d < -n / 2) d += n;
  if (d >= n / 2) d -= n;
  return d;
}

}  // namespace

Tensor render_video(const SyntheticSpec& spec, std::int64_t label, std::int64_t index) {
  spec.validate();
  if (label < 0 || label >= spec.num_classes)
    throw std::invalid_argument("render_video: label " + std::to_string(label) +
                                " out of range");
  const std::int64_t S = spec.canvas, F = spec.frames;

  // Appearance depends on the video index only, never on the class.
  Rng looks(mix(spec.seed, static_cast<std::uint64_t>(index)));
  const int shape_kind = static_cast<int>(std::uniform_int_distribution<int>(0, 2)(looks));
  const double size = static_cast<double>(std::uniform_int_distribution<std::int64_t>(
      spec.min_size, spec.max_size)(looks));
  double color[3];
  for (double& c : color) c = std::uniform_real_distribution<double>(0.35, 1.0)(looks);
  const double speed =
      std::uniform_real_distribution<double>(spec.min_speed, spec.max_speed)(looks);
  const double cx0 = std::uniform_real_distribution<double>(0.0, double(S))(looks);
  const double cy0 = std::uniform_real_distribution<double>(0.0, double(S))(looks);

  double dx = 0, dy = 0;
  switch (label) {
    case 0: dx = speed; break;   // left to right
    case 1: dx = -speed; break;  // right to left
    case 2: dy = speed; break;   // top to bottom
    default: dy = -speed; break; // bottom to top
  }

  Rng noise_rng(mix(spec.seed, 0x5eedULL + static_cast<std::uint64_t>(label) * 1000003ULL +
                                   static_cast<std::uint64_t>(index)));
  std::uniform_real_distribution<double> noise_dist(0.0, spec.noise);

  Tensor video = Tensor::zeros({3, F, S, S});
  auto* store = video.impl()->data.get();
  const double half = size / 2.0, bar = std::max(1.0, size / 6.0);
  for (std::int64_t t = 0; t < F; ++t) {
    const double cx = cx0 + dx * double(t), cy = cy0 + dy * double(t);
    for (std::int64_t y = 0; y < S; ++y) {
      const double ddy = wrapped_delta(double(y), cy, double(S));
      for (std::int64_t x = 0; x < S; ++x) {
        const double ddx = wrapped_delta(double(x), cx, double(S));
        double cov = 0;
        if (shape_kind == 0) {
          cov = sat(half - std::abs(ddx) + 0.5) * sat(half - std::abs(ddy) + 0.5);
        } else if (shape_kind == 1) {
          cov = sat(half - std::hypot(ddx, ddy) + 0.5);
        } else {
          const double h = sat(half - std::abs(ddx) + 0.5) * sat(bar - std::abs(ddy) + 0.5);
          const double v = sat(bar - std::abs(ddx) + 0.5) * sat(half - std::abs(ddy) + 0.5);
          cov = std::max(h, v);
        }
        for (std::int64_t c = 0; c < 3; ++c)
          store->write(((c * F + t) * S + y) * S + x,
                       cov * color[c] + (spec.noise > 0 ? noise_dist(noise_rng) : 0.0));
      }
    }
  }
  return video;
}

namespace {

std::string video_name(std::int64_t label, std::int64_t index) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "videos/c%lld_%03lld.eant", static_cast<long long>(label),
                static_cast<long long>(index));
  return buf;
}

}  // namespace

std::vector<ManifestEntry> generate(const SyntheticSpec& spec, const std::string& dir,
                                    int threads) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "videos", ec);
  if (ec) throw std::runtime_error("generate: cannot create " + dir + ": " + ec.message());

  std::vector<ManifestEntry> manifest;
  for (std::int64_t label = 0; label < spec.num_classes; ++label)
    for (std::int64_t i = 0; i < spec.videos_per_class; ++i)
      manifest.push_back({video_name(label, i), label, /*direction_sensitive=*/label < 2});

  const auto render_range = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t k = lo; k < hi; ++k) {
      const auto& e = manifest[k];
      const std::int64_t index = static_cast<std::int64_t>(k) % spec.videos_per_class;
      save_tensor((fs::path(dir) / e.path).string(), render_video(spec, e.label, index));
    }
  };
  const std::size_t n = manifest.size();
  const std::size_t nthreads = std::max(1, threads);
  if (nthreads <= 1 || n < 2) {
    render_range(0, n);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (n + nthreads - 1) / nthreads;
    for (std::size_t t = 0; t < nthreads && t * chunk < n; ++t)
      pool.emplace_back(render_range, t * chunk, std::min(n, (t + 1) * chunk));
    for (auto& th : pool) th.join();
  }

  std::ofstream mf(fs::path(dir) / "manifest.jsonl");
  if (!mf) throw std::runtime_error("generate: cannot write manifest under " + dir);
  for (const auto& e : manifest)
    mf << nlohmann::json{{"path", e.path},
                         {"label", e.label},
                         {"direction_sensitive", e.direction_sensitive}}
              .dump()
       << "\n";
  std::ofstream sf(fs::path(dir) / "spec.json");
  nlohmann::json sj = spec;
  sf << sj.dump(2) << "\n";
  return manifest;
}

std::vector<ManifestEntry> read_manifest(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "manifest.jsonl");
  if (!f) throw std::runtime_error("no manifest.jsonl under " + dir);
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    out.push_back({j.at("path").get<std::string>(), j.at("label").get<std::int64_t>(),
                   j.at("direction_sensitive").get<bool>()});
  }
  return out;
}

Tensor load_video(const std::string& dir, const ManifestEntry& entry) {
  return load_tensor((fs::path(dir) / entry.path).string());
}

Tensor resize_bilinear(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  if (x.rank() < 2) throw std::invalid_argument("resize_bilinear: need at least 2 axes");
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_bilinear: empty output");
  const std::int64_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  Shape oshape = x.shape();
  oshape[oshape.size() - 2] = out_h;
  oshape[oshape.size() - 1] = out_w;
  Tensor out = Tensor::zeros(oshape, x.dtype());
  const std::int64_t planes = x.numel() / (H * W);
  auto* src = x.impl()->data.get();
  auto* dst = out.impl()->data.get();
  const double sy = double(H) / double(out_h), sx = double(W) / double(out_w);
  for (std::int64_t p = 0; p < planes; ++p) {
    const std::int64_t ibase = p * H * W, obase = p * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const double fy = std::clamp((double(oy) + 0.5) * sy - 0.5, 0.0, double(H - 1));
      const std::int64_t y0 = static_cast<std::int64_t>(fy);
      const std::int64_t y1 = std::min(y0 + 1, H - 1);
      const double wy = fy - double(y0);
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const double fx = std::clamp((double(ox) + 0.5) * sx - 0.5, 0.0, double(W - 1));
        const std::int64_t x0 = static_cast<std::int64_t>(fx);
        const std::int64_t x1 = std::min(x0 + 1, W - 1);
        const double wx = fx - double(x0);
        const double v00 = src->read(ibase + y0 * W + x0);
        const double v01 = src->read(ibase + y0 * W + x1);
        const double v10 = src->read(ibase + y1 * W + x0);
        const double v11 = src->read(ibase + y1 * W + x1);
        dst->write(obase + oy * out_w + ox, (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                                                wy * ((1 - wx) * v10 + wx * v11));
      }
    }
  }
  return out;
}

Tensor zoom_video(const Tensor& video, double factor) {
  if (factor < 1.0) throw std::invalid_argument("zoom_video: factor must be >= 1");
  const int r = static_cast<int>(video.rank());
  const std::int64_t H = video.dim(r - 2), W = video.dim(r - 1);
  const std::int64_t ch = std::max<std::int64_t>(1, std::llround(double(H) / factor));
  const std::int64_t cw = std::max<std::int64_t>(1, std::llround(double(W) / factor));
  NoGradGuard ng;
  Tensor crop = slice(slice(video, r - 2, (H - ch) / 2, ch), r - 1, (W - cw) / 2, cw);
  return resize_bilinear(crop, H, W);
}

Tensor gather_frames(const Tensor& video, const std::vector<std::int64_t>& frame_indices) {
  if (video.rank() != 4) throw std::invalid_argument("gather_frames: expected [C, F, H, W]");
  NoGradGuard ng;
  std::vector<Tensor> parts;
  for (std::int64_t idx : frame_indices) {
    if (idx < 0 || idx >= video.dim(1))
      throw std::invalid_argument("gather_frames: frame " + std::to_string(idx) +
                                  " out of range");
    parts.push_back(slice(video, 1, idx, 1));
  }
  return concat(parts, 1);
}

}  // namespace ean
