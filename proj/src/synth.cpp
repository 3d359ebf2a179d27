#include "functakit/synth.hpp"

#include <algorithm>
#include <cmath>

namespace functakit {

namespace {

float smoothstep(float a) {
  const float t = std::clamp(a, 0.0f, 1.0f);
  return t * t * (3.0f - 2.0f * t);
}

}  // namespace

MatXf synth_image(int side, int channels, uint64_t seed) {
  if (side < 1) throw ConfigError("synth: side must be >= 1");
  if (channels < 1) throw ConfigError("synth: channels must be >= 1");
  Rng rng(seed);

  VecXf c0(channels), c1(channels);
  for (int ch = 0; ch < channels; ++ch) {
    c0[ch] = static_cast<float>(rng.uniform(0.0, 1.0));
    c1[ch] = static_cast<float>(rng.uniform(0.0, 1.0));
  }
  const auto theta = static_cast<float>(rng.uniform(0.0, 2.0 * M_PI));
  const float gx = std::cos(theta), gy = std::sin(theta);

  MatXf img(channels, static_cast<Eigen::Index>(side) * side);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const float u = (static_cast<float>(r) + 0.5f) / static_cast<float>(side);
      const float v = (static_cast<float>(c) + 0.5f) / static_cast<float>(side);
      const float t =
          std::clamp(0.5f + 0.8f * ((u - 0.5f) * gx + (v - 0.5f) * gy), 0.0f, 1.0f);
      img.col(static_cast<Eigen::Index>(r) * side + c) = (1.0f - t) * c0 + t * c1;
    }

  const int shapes = 1 + static_cast<int>(rng.uniform_int(2));
  for (int shp = 0; shp < shapes; ++shp) {
    const bool disk = rng.bernoulli(0.5);
    const auto cx = static_cast<float>(rng.uniform(0.25, 0.75));
    const auto cy = static_cast<float>(rng.uniform(0.25, 0.75));
    const auto radius = static_cast<float>(rng.uniform(0.10, 0.30));
    const float edge = 0.10f;
    VecXf color(channels);
    for (int ch = 0; ch < channels; ++ch)
      color[ch] = static_cast<float>(rng.uniform(0.0, 1.0));

    for (int r = 0; r < side; ++r)
      for (int c = 0; c < side; ++c) {
        const float u = (static_cast<float>(r) + 0.5f) / static_cast<float>(side);
        const float v = (static_cast<float>(c) + 0.5f) / static_cast<float>(side);
        const float du = u - cx, dv = v - cy;
        const float dist = disk ? std::sqrt(du * du + dv * dv)
                                : std::max(std::abs(du), std::abs(dv));
        const float alpha = smoothstep((radius - dist) / edge);
        if (alpha <= 0.0f) continue;
        auto px = img.col(static_cast<Eigen::Index>(r) * side + c);
        px = (1.0f - alpha) * px + alpha * color;
      }
  }
  return img;
}

std::vector<MatXf> synth_dataset(int side, int channels, int count, uint64_t seed) {
  if (count < 0) throw ConfigError("synth: count must be >= 0");
  std::vector<MatXf> out;
  out.reserve(static_cast<std::size_t>(count));
  Rng root(seed);
  for (int i = 0; i < count; ++i)
    out.push_back(synth_image(side, channels, root.derive(static_cast<uint64_t>(i)).seed()));
  return out;
}

}  // namespace functakit
