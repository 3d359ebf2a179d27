#include "functakit/latent_map.hpp"

#include <array>
#include <cmath>
#include <string>

#include "functakit/detail/graph.hpp"
#include "functakit/detail/ops.hpp"

namespace functakit {

namespace {

void check_latent(const Latent& z) {
  z.shape.validate();
  check_shape(z.values.rows() == z.shape.c &&
                  z.values.cols() == z.shape.cells(),
              "latent values must be c x s^2");
}

void check_map(const LatentToModMap& map, const LatentShape& sh) {
  const std::size_t taps = map.kind == MapKind::kConv3x3 ? kConvTaps : 1;
  check_shape(map.w.size() == taps, "map tap count does not match its kind");
  for (const auto& w : map.w)
    check_shape(w.rows() == map.b.size() && w.cols() == sh.c,
                "map weights must be mod_dim x latent channels");
  if (map.kind == MapKind::kDense)
    check_shape(sh.cells() == 1, "dense map applies to vector latents only");
}

}  // namespace

LatentToModMap map_init(MapKind kind, int in_channels, int mod_dim,
                        uint64_t seed) {
  if (in_channels < 1 || mod_dim < 1)
    throw ConfigError("map: channel counts must be >= 1");
  const int taps = kind == MapKind::kConv3x3 ? kConvTaps : 1;
  const float bound =
      1.0f / std::sqrt(static_cast<float>(in_channels * taps));
  Rng rng(seed);
  LatentToModMap map;
  map.kind = kind;
  map.w.reserve(static_cast<std::size_t>(taps));
  for (int t = 0; t < taps; ++t) {
    MatXf w(mod_dim, in_channels);
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i)
        w(i, j) = static_cast<float>(rng.uniform(-bound, bound));
    map.w.push_back(std::move(w));
  }
  map.b = VecXf::Zero(mod_dim);
  return map;
}

ModulationGrid latent_to_modulation(const LatentToModMap& map, const Latent& z) {
  check_latent(z);
  check_map(map, z.shape);
  detail::PipelineAux<float> aux;
  aux.s = z.shape.s;
  aux.cells = z.shape.cells();
  if (map.kind == MapKind::kConv3x3) aux.conv = detail::build_conv_plan(z.shape.s);
  ModulationGrid g;
  g.s = z.shape.s;
  g.values = detail::map_forward<detail::PlainOps<float>>(map, z.values, aux, nullptr);
  return g;
}

VecXf interpolate_modulation(const ModulationGrid& grid, double u0, double u1,
                             InterpScheme scheme) {
  check_shape(grid.values.cols() ==
                  static_cast<Eigen::Index>(grid.s) * grid.s,
              "modulation grid cell count != s^2");
  std::array<int, 4> cell{};
  std::array<double, 4> w{};
  const int k = detail::interp_taps(u0, u1, grid.s, scheme, cell, w);
  VecXf out = static_cast<float>(w[0]) * grid.values.col(cell[0]);
  for (int i = 1; i < k; ++i)
    out += static_cast<float>(w[i]) * grid.values.col(cell[i]);
  return out;
}

MatXf modulations_for_grid(const LatentToModMap& map, const Latent& z,
                           const CoordGrid& coords, InterpScheme scheme) {
  ModulationGrid g = latent_to_modulation(map, z);
  const auto plan = detail::build_interp_plan(coords.unit, z.shape.s, scheme);
  return detail::interp_forward<detail::PlainOps<float>>(
      g.values, plan, g.values.rows(), coords.unit.cols());
}

}  // namespace functakit
