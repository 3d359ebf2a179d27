#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "functakit/common.hpp"
#include "functakit/field.hpp"

namespace functakit {

// Latents are either a flat vector (D,) or a spatial grid (s,s,c). Both are
// stored as a c x cells matrix with cells in row-major grid order; the flat
// case is the single-cell grid with c = D, which is also what makes the
// s=1 degeneration to vector functa bit-exact.
struct LatentShape {
  int rank = 1;  // 1: (D,)  3: (s,s,c)
  int s = 1;
  int c = 0;

  int cells() const { return s * s; }
  int dims() const { return s * s * c; }
  bool operator==(const LatentShape&) const = default;

  static LatentShape vector(int d) { return {1, 1, d}; }
  static LatentShape spatial(int s, int c) { return {3, s, c}; }

  void validate() const {
    if (rank != 1 && rank != 3) throw ConfigError("latent: rank must be 1 or 3");
    if (s < 1 || c < 1) throw ConfigError("latent: s and c must be >= 1");
    if (rank == 1 && s != 1) throw ConfigError("latent: vector latents have s=1");
  }
};

struct Latent {
  LatentShape shape;
  MatXf values;  // c x cells

  static Latent zeros(const LatentShape& sh) {
    return {sh, MatXf::Zero(sh.c, sh.cells())};
  }
};

enum class MapKind : uint8_t { kDense = 0, kConv1x1 = 1, kConv3x3 = 2 };

// 3x3 taps in row-major offset order, (di,dj) with di,dj in {-1,0,1}
inline constexpr int kConvTaps = 9;
inline constexpr std::array<std::array<int, 2>, kConvTaps> conv3x3_offsets() {
  return {{{-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 0}, {0, 1}, {1, -1}, {1, 0}, {1, 1}}};
}

template <class S>
struct MapParamsT {
  MapKind kind = MapKind::kDense;
  std::vector<MatX<S>> w;  // dense/conv1x1: one C x c matrix; conv3x3: 9 taps
  VecX<S> b;               // length C

  template <class T>
  MapParamsT<T> cast() const {
    MapParamsT<T> out;
    out.kind = kind;
    out.w.reserve(w.size());
    for (const auto& m : w) out.w.push_back(m.template cast<T>());
    out.b = b.template cast<T>();
    return out;
  }
};

using LatentToModMap = MapParamsT<float>;

LatentToModMap map_init(MapKind kind, int in_channels, int mod_dim, uint64_t seed);

// Spatially arranged shift modulations, C per cell.
struct ModulationGrid {
  int s = 1;
  MatXf values;  // C x s^2, cells row-major
};

// m = lambda(z): dense matrix-vector product, per-cell 1x1 conv, or zero-padded
// same-size 3x3 conv.
ModulationGrid latent_to_modulation(const LatentToModMap& map, const Latent& z);

enum class InterpScheme : uint8_t { kNearest = 0, kBilinear = 1, kNone = 2 };

// Nearest picks cell floor(coord*s); bilinear uses half-pixel cell centers
// ((i+0.5)/s) with edge clamping. Coordinates are clamped to [0,1].
VecXf interpolate_modulation(const ModulationGrid& grid, double u0, double u1,
                             InterpScheme scheme);

// batched: one modulation column per grid coordinate (C x N)
MatXf modulations_for_grid(const LatentToModMap& map, const Latent& z,
                           const CoordGrid& coords, InterpScheme scheme);

}  // namespace functakit
