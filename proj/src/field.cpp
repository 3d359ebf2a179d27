#include "functakit/field.hpp"

#include <cmath>
#include <string>

#include "functakit/detail/graph.hpp"
#include "functakit/detail/ops.hpp"

namespace functakit {

namespace {

MatXf uniform_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, float bound) {
  MatXf m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i)
      m(i, j) = static_cast<float>(rng.uniform(-bound, bound));
  return m;
}

template <class S>
void check_field(const FieldParamsT<S>& p, const SirenConfig& cfg) {
  check_shape(p.w.size() == static_cast<std::size_t>(cfg.depth) &&
                  p.b.size() == static_cast<std::size_t>(cfg.depth),
              "field params layer count does not match config depth " +
                  std::to_string(cfg.depth));
  for (int i = 0; i < cfg.depth; ++i) {
    const auto k = static_cast<std::size_t>(i);
    const Eigen::Index fan_in = (i == 0) ? cfg.in_dim : cfg.width;
    const Eigen::Index fan_out = (i == cfg.depth - 1) ? cfg.out_dim : cfg.width;
    check_shape(p.w[k].rows() == fan_out && p.w[k].cols() == fan_in &&
                    p.b[k].size() == fan_out,
                "field layer " + std::to_string(i) + " has unexpected shape");
  }
}

}  // namespace

FieldParams siren_init(const SirenConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  FieldParams p;
  p.w.reserve(static_cast<std::size_t>(cfg.depth));
  p.b.reserve(static_cast<std::size_t>(cfg.depth));
  for (int i = 0; i < cfg.depth; ++i) {
    const int fan_in = (i == 0) ? cfg.in_dim : cfg.width;
    const int fan_out = (i == cfg.depth - 1) ? cfg.out_dim : cfg.width;
    const float bound =
        (i == 0) ? 1.0f / static_cast<float>(fan_in)
                 : std::sqrt(6.0f / static_cast<float>(fan_in)) / cfg.omega0;
    p.w.push_back(uniform_matrix(rng, fan_out, fan_in, bound));
    p.b.push_back(VecXf::Zero(fan_out));
  }
  return p;
}

int coord_rep_dim(int d, CoordScheme scheme) {
  if (scheme != CoordScheme::kBinary) return 2;
  if (d < 2 || (d & (d - 1)) != 0)
    throw ConfigError("binary coords need a power-of-two resolution >= 2, got " +
                      std::to_string(d));
  int m = 0;
  while ((1 << m) < d) ++m;
  return 2 * m;
}

CoordGrid make_coord_grid(int d, int s, CoordScheme scheme) {
  if (d < 1) throw ConfigError("resolution must be >= 1, got " + std::to_string(d));
  if (s < 1) throw ConfigError("latent side must be >= 1, got " + std::to_string(s));
  if (scheme == CoordScheme::kPerPatch && d % s != 0)
    throw ConfigError("per-patch coords need the latent side to divide the resolution; got d=" +
                      std::to_string(d) + ", s=" + std::to_string(s));

  CoordGrid g;
  g.scheme = scheme;
  g.resolution = d;
  g.latent_side = s;
  const int n = d * d;
  g.unit.resize(2, n);
  for (int r = 0; r < d; ++r)
    for (int c = 0; c < d; ++c) {
      const int i = r * d + c;
      g.unit(0, i) = (r + 0.5) / d;
      g.unit(1, i) = (c + 0.5) / d;
    }

  switch (scheme) {
    case CoordScheme::kGlobalUnit:
      g.rep = g.unit;
      break;
    case CoordScheme::kPerPatch: {
      const int p = d / s;
      g.rep.resize(2, n);
      for (int r = 0; r < d; ++r)
        for (int c = 0; c < d; ++c) {
          const int i = r * d + c;
          g.rep(0, i) = ((r % p) + 0.5) / p;
          g.rep(1, i) = ((c % p) + 0.5) / p;
        }
      break;
    }
    case CoordScheme::kBinary: {
      const int m = coord_rep_dim(d, scheme) / 2;
      g.rep.resize(2 * m, n);
      for (int r = 0; r < d; ++r)
        for (int c = 0; c < d; ++c) {
          const int i = r * d + c;
          for (int k = 0; k < m; ++k) {
            g.rep(k, i) = (r >> (m - 1 - k)) & 1;
            g.rep(m + k, i) = (c >> (m - 1 - k)) & 1;
          }
        }
      break;
    }
  }
  return g;
}

VecXf field_forward(const FieldParams& params, const SirenConfig& cfg,
                    const VecXf& mod, const VecXf& coord) {
  cfg.validate();
  check_field(params, cfg);
  check_shape(mod.size() == cfg.mod_dim(), "modulation length != width*(depth-1)");
  check_shape(coord.size() == cfg.in_dim, "coordinate dimension != in_dim");
  VecXf h = coord;
  for (int i = 0; i < cfg.hidden_layers(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    VecXf u = params.w[k] * h + params.b[k] + mod.segment(i * cfg.width, cfg.width);
    h = (cfg.omega0 * u.array()).sin();
  }
  return params.w.back() * h + params.b.back();
}

std::vector<VecXf> field_preactivations(const FieldParams& params,
                                        const SirenConfig& cfg,
                                        const VecXf& mod, const VecXf& coord) {
  cfg.validate();
  check_field(params, cfg);
  check_shape(mod.size() == cfg.mod_dim(), "modulation length != width*(depth-1)");
  check_shape(coord.size() == cfg.in_dim, "coordinate dimension != in_dim");
  std::vector<VecXf> pre;
  pre.reserve(static_cast<std::size_t>(cfg.hidden_layers()));
  VecXf h = coord;
  for (int i = 0; i < cfg.hidden_layers(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    VecXf u = params.w[k] * h + params.b[k] + mod.segment(i * cfg.width, cfg.width);
    pre.push_back(u);
    h = (cfg.omega0 * u.array()).sin();
  }
  return pre;
}

template <class S>
FieldBackwardResultT<S> field_backward(const FieldParamsT<S>& params,
                                       const SirenConfig& cfg,
                                       const VecX<S>& mod,
                                       const CoordGrid& coords,
                                       const MatX<S>& target) {
  using B = detail::PlainOps<S>;
  cfg.validate();
  check_field(params, cfg);
  check_shape(coords.rep.rows() == cfg.in_dim, "coord grid rep dim != in_dim");
  check_shape(mod.size() == cfg.mod_dim(), "modulation length != width*(depth-1)");
  check_shape(target.rows() == cfg.out_dim && target.cols() == coords.rep.cols(),
              "target must be out_dim x coord count");
  MatX<S> x = coords.rep.cast<S>();
  MatX<S> mods = mod.replicate(1, x.cols());
  auto sp = detail::siren_pass<B>(params, cfg, x, mods, target,
                                  detail::GradMode::kZShared);
  FieldBackwardResultT<S> out;
  out.loss = sp.loss;
  out.grad_params.w = std::move(sp.g_w);
  out.grad_params.b.reserve(sp.g_b.size());
  for (const auto& gb : sp.g_b) out.grad_params.b.push_back(gb.col(0));
  out.grad_mod = sp.dmods.rowwise().sum();
  return out;
}

template <class S>
MatX<S> field_forward_grid(const FieldParamsT<S>& params, const SirenConfig& cfg,
                           const MatX<S>& mods, const CoordGrid& coords) {
  using B = detail::PlainOps<S>;
  cfg.validate();
  check_field(params, cfg);
  check_shape(coords.rep.rows() == cfg.in_dim, "coord grid rep dim != in_dim");
  check_shape(mods.rows() == cfg.mod_dim() && mods.cols() == coords.rep.cols(),
              "modulations must be mod_dim x coord count");
  MatX<S> x = coords.rep.cast<S>();
  return detail::siren_forward<B>(params, cfg, x, mods);
}

template FieldBackwardResultT<float> field_backward<float>(
    const FieldParamsT<float>&, const SirenConfig&, const VecX<float>&,
    const CoordGrid&, const MatX<float>&);
template FieldBackwardResultT<double> field_backward<double>(
    const FieldParamsT<double>&, const SirenConfig&, const VecX<double>&,
    const CoordGrid&, const MatX<double>&);
template MatX<float> field_forward_grid<float>(const FieldParamsT<float>&,
                                               const SirenConfig&,
                                               const MatX<float>&,
                                               const CoordGrid&);
template MatX<double> field_forward_grid<double>(const FieldParamsT<double>&,
                                                 const SirenConfig&,
                                                 const MatX<double>&,
                                                 const CoordGrid&);

}  // namespace functakit
