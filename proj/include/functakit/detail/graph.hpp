#pragma once

// Fused evaluation of the latent -> modulation -> field -> MSE pipeline with
// hand-written reverse-mode gradients.  Everything is generic over an ops
// backend: PlainOps gives values/gradients, DualOps (with the latent's tangent
// seeded) turns every emitted gradient into a Hessian-vector product against
// that tangent.  Shared parameters (field + map) always enter as plain
// matrices, so their tangent contribution is implicitly zero.

#include <array>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "functakit/common.hpp"
#include "functakit/detail/ops.hpp"
#include "functakit/field.hpp"
#include "functakit/latent_map.hpp"

namespace functakit::detail {

enum class GradMode {
  kLossOnly,  // forward + loss
  kZ,         // + gradient w.r.t. the latent (inner loop)
  kZShared,   // + gradients w.r.t. field and map parameters (outer loop)
};

// Gather taps from latent-grid cells to evaluation coordinates.  One tap per
// coordinate for nearest/none, four for bilinear.
struct InterpPlan {
  int ntaps = 1;
  std::vector<std::int32_t> cell;  // n_coords * ntaps flat cell indices
  std::vector<double> w;           // matching tap weights
};

// Taps for a single unit-square coordinate (u0 = row axis, u1 = column axis).
// Nearest: cell floor(u*s), clamped.  Bilinear: cell centers at (i + 0.5)/s
// with edge clamping.  A 1x1 grid always resolves to a plain copy of cell 0,
// so spatial code degenerates exactly to the vector case.
inline int interp_taps(double u0, double u1, int s, InterpScheme scheme,
                       std::array<int, 4>& cell, std::array<double, 4>& w) {
  const auto clampi = [s](int i) { return i < 0 ? 0 : (i >= s ? s - 1 : i); };
  if (scheme == InterpScheme::kNone && s != 1)
    throw ConfigError("interpolation 'none' requires a 1x1 latent grid");
  if (scheme == InterpScheme::kNone || s == 1) {
    cell[0] = 0;
    w[0] = 1.0;
    return 1;
  }
  u0 = u0 < 0.0 ? 0.0 : (u0 > 1.0 ? 1.0 : u0);
  u1 = u1 < 0.0 ? 0.0 : (u1 > 1.0 ? 1.0 : u1);
  if (scheme == InterpScheme::kNearest) {
    const int i = clampi(static_cast<int>(std::floor(u0 * s)));
    const int j = clampi(static_cast<int>(std::floor(u1 * s)));
    cell[0] = i * s + j;
    w[0] = 1.0;
    return 1;
  }
  const double t0 = u0 * s - 0.5;
  const double t1 = u1 * s - 0.5;
  const int i0 = static_cast<int>(std::floor(t0));
  const int j0 = static_cast<int>(std::floor(t1));
  const double f0 = t0 - i0;
  const double f1 = t1 - j0;
  const int ia = clampi(i0);
  const int ib = clampi(i0 + 1);
  const int ja = clampi(j0);
  const int jb = clampi(j0 + 1);
  cell = {ia * s + ja, ia * s + jb, ib * s + ja, ib * s + jb};
  w = {(1.0 - f0) * (1.0 - f1), (1.0 - f0) * f1, f0 * (1.0 - f1), f0 * f1};
  return 4;
}

inline InterpPlan build_interp_plan(const MatXd& unit, int s,
                                    InterpScheme scheme) {
  const auto n = unit.cols();
  InterpPlan plan;
  plan.ntaps = (scheme == InterpScheme::kBilinear && s > 1) ? 4 : 1;
  plan.cell.resize(static_cast<std::size_t>(n) * plan.ntaps);
  plan.w.resize(static_cast<std::size_t>(n) * plan.ntaps);
  std::array<int, 4> cell{};
  std::array<double, 4> w{};
  for (Eigen::Index i = 0; i < n; ++i) {
    interp_taps(unit(0, i), unit(1, i), s, scheme, cell, w);
    for (int k = 0; k < plan.ntaps; ++k) {
      plan.cell[static_cast<std::size_t>(i) * plan.ntaps + k] = cell[k];
      plan.w[static_cast<std::size_t>(i) * plan.ntaps + k] = w[k];
    }
  }
  return plan;
}

// Zero-padded 3x3 conv as per-tap column alignments: tap t with offset
// (di, dj) maps output cell (i, j) to input cell (i + di, j + dj) when that
// read stays in bounds.
struct ConvPlan {
  std::vector<std::vector<std::array<std::int32_t, 2>>> pairs;  // (dst, src)
};

inline ConvPlan build_conv_plan(int s) {
  ConvPlan plan;
  plan.pairs.resize(kConvTaps);
  const auto offs = conv3x3_offsets();
  for (int t = 0; t < kConvTaps; ++t) {
    auto& out = plan.pairs[t];
    for (int i = 0; i < s; ++i) {
      for (int j = 0; j < s; ++j) {
        const int ii = i + offs[t][0];
        const int jj = j + offs[t][1];
        if (ii < 0 || ii >= s || jj < 0 || jj >= s) continue;
        out.push_back({i * s + j, ii * s + jj});
      }
    }
  }
  return plan;
}

// Per-(grid, interpolation) constants reused across pipeline evaluations.
template <class S>
struct PipelineAux {
  MatX<S> x;          // coordinate representation fed to the field, in_dim x N
  InterpPlan interp;  // latent cell -> coordinate gather
  ConvPlan conv;      // column alignments for conv3x3 maps
  int cells = 1;      // latent grid cell count (s * s)
  int s = 1;
};

template <class S>
PipelineAux<S> make_pipeline_aux(const CoordGrid& grid, InterpScheme scheme) {
  PipelineAux<S> aux;
  aux.x = grid.rep.cast<S>();
  aux.s = grid.latent_side;
  aux.cells = grid.latent_side * grid.latent_side;
  aux.interp = build_interp_plan(grid.unit, grid.latent_side, scheme);
  aux.conv = build_conv_plan(grid.latent_side);
  return aux;
}

template <class B>
typename B::Mt interp_forward(const typename B::Mt& g, const InterpPlan& plan,
                              Eigen::Index mod_dim, Eigen::Index n_coords) {
  using S = typename B::Real;
  typename B::Mt mods = B::zeros(mod_dim, n_coords);
  if (plan.ntaps == 1) {
    for (Eigen::Index i = 0; i < n_coords; ++i)
      B::col_copy(mods, i, g, plan.cell[static_cast<std::size_t>(i)]);
    return mods;
  }
  for (Eigen::Index i = 0; i < n_coords; ++i) {
    const auto* c = &plan.cell[static_cast<std::size_t>(i) * 4];
    const auto* w = &plan.w[static_cast<std::size_t>(i) * 4];
    B::col_scale_copy(mods, i, g, c[0], static_cast<S>(w[0]));
    for (int k = 1; k < 4; ++k)
      B::col_axpy(mods, i, g, c[k], static_cast<S>(w[k]));
  }
  return mods;
}

template <class B>
typename B::Mt interp_backward(const typename B::Mt& dmods,
                               const InterpPlan& plan, Eigen::Index mod_dim,
                               Eigen::Index cells, Eigen::Index n_coords) {
  using S = typename B::Real;
  typename B::Mt dg = B::zeros(mod_dim, cells);
  if (plan.ntaps == 1) {
    for (Eigen::Index i = 0; i < n_coords; ++i)
      B::col_axpy(dg, plan.cell[static_cast<std::size_t>(i)], dmods, i, S(1));
    return dg;
  }
  for (Eigen::Index i = 0; i < n_coords; ++i) {
    const auto* c = &plan.cell[static_cast<std::size_t>(i) * 4];
    const auto* w = &plan.w[static_cast<std::size_t>(i) * 4];
    for (int k = 0; k < 4; ++k)
      B::col_axpy(dg, c[k], dmods, i, static_cast<S>(w[k]));
  }
  return dg;
}

// Modulation grid from the latent.  For conv maps `shifted` (when requested)
// tapes the per-tap aligned latent copies needed for the weight gradients.
template <class B>
typename B::Mt map_forward(const MapParamsT<typename B::Real>& map,
                           const typename B::Mt& z,
                           const PipelineAux<typename B::Real>& aux,
                           std::vector<typename B::Mt>* shifted) {
  if (map.kind != MapKind::kConv3x3) {
    typename B::Mt g = B::mul_pm(map.w[0], z);
    B::add_colvec(g, map.b);
    return g;
  }
  const Eigen::Index c_in = map.w[0].cols();
  typename B::Mt g = B::zeros(map.w[0].rows(), aux.cells);
  for (int t = 0; t < kConvTaps; ++t) {
    typename B::Mt zs = B::zeros(c_in, aux.cells);
    for (const auto& p : aux.conv.pairs[static_cast<std::size_t>(t)])
      B::col_copy(zs, p[0], z, p[1]);
    g = B::add(g, B::mul_pm(map.w[static_cast<std::size_t>(t)], zs));
    if (shifted) shifted->push_back(std::move(zs));
  }
  B::add_colvec(g, map.b);
  return g;
}

template <class B>
struct PipeResult {
  typename B::Sc loss{};
  typename B::Mt y;                        // out_dim x N prediction
  typename B::Mt grad_z;                   // c x cells
  std::vector<typename B::Mt> g_w, g_b;    // field layer gradients
  std::vector<typename B::Mt> g_map_w;     // map weight gradients (1 or 9)
  typename B::Mt g_map_b;
};

template <class B>
void map_backward(const MapParamsT<typename B::Real>& map,
                  const typename B::Mt& z,
                  const std::vector<typename B::Mt>& shifted,
                  const typename B::Mt& dg,
                  const PipelineAux<typename B::Real>& aux, bool want_shared,
                  PipeResult<B>& out) {
  using S = typename B::Real;
  if (map.kind != MapKind::kConv3x3) {
    out.grad_z = B::mul_pTm(map.w[0], dg);
    if (want_shared) {
      out.g_map_w = {B::mul_m_mT(dg, z)};
      out.g_map_b = B::rowsum(dg);
    }
    return;
  }
  const Eigen::Index c_in = map.w[0].cols();
  out.grad_z = B::zeros(c_in, aux.cells);
  for (int t = 0; t < kConvTaps; ++t) {
    typename B::Mt back = B::mul_pTm(map.w[static_cast<std::size_t>(t)], dg);
    for (const auto& p : aux.conv.pairs[static_cast<std::size_t>(t)])
      B::col_axpy(out.grad_z, p[1], back, p[0], S(1));
    if (want_shared)
      out.g_map_w.push_back(B::mul_m_mT(dg, shifted[static_cast<std::size_t>(t)]));
  }
  if (want_shared) out.g_map_b = B::rowsum(dg);
}

// Field evaluation at the aux coordinates given per-coordinate modulations.
template <class B>
typename B::Mt siren_forward(const FieldParamsT<typename B::Real>& f,
                             const SirenConfig& cfg,
                             const MatX<typename B::Real>& x,
                             const typename B::Mt& mods) {
  using S = typename B::Real;
  const int nl = cfg.hidden_layers();
  const S omega = static_cast<S>(cfg.omega0);
  typename B::Mt h, cfac;
  for (int i = 0; i < nl; ++i) {
    typename B::Mt u;
    if (i == 0) {
      MatX<S> pre = (f.w[0] * x).colwise() + f.b[0];
      u = B::add(B::lift(pre), B::rows(mods, 0, cfg.width));
    } else {
      u = B::mul_pm(f.w[static_cast<std::size_t>(i)], h);
      B::add_colvec(u, f.b[static_cast<std::size_t>(i)]);
      u = B::add(u, B::rows(mods, i * cfg.width, cfg.width));
    }
    B::sin_fwd(u, omega, h, cfac);
  }
  typename B::Mt y = B::mul_pm(f.w[static_cast<std::size_t>(nl)], h);
  B::add_colvec(y, f.b[static_cast<std::size_t>(nl)]);
  return y;
}

template <class B>
struct SirenPass {
  typename B::Sc loss{};
  typename B::Mt y;
  typename B::Mt dmods;                  // filled unless kLossOnly
  std::vector<typename B::Mt> g_w, g_b;  // filled for kZShared
};

template <class B>
SirenPass<B> siren_pass(const FieldParamsT<typename B::Real>& f,
                        const SirenConfig& cfg,
                        const MatX<typename B::Real>& x,
                        const typename B::Mt& mods,
                        const MatX<typename B::Real>& target, GradMode mode) {
  using S = typename B::Real;
  const int nl = cfg.hidden_layers();
  const S omega = static_cast<S>(cfg.omega0);
  SirenPass<B> out;
  std::vector<typename B::Mt> h(static_cast<std::size_t>(nl));
  std::vector<typename B::Mt> cfac(static_cast<std::size_t>(nl));
  for (int i = 0; i < nl; ++i) {
    typename B::Mt u;
    if (i == 0) {
      MatX<S> pre = (f.w[0] * x).colwise() + f.b[0];
      u = B::add(B::lift(pre), B::rows(mods, 0, cfg.width));
    } else {
      u = B::mul_pm(f.w[static_cast<std::size_t>(i)], h[static_cast<std::size_t>(i - 1)]);
      B::add_colvec(u, f.b[static_cast<std::size_t>(i)]);
      u = B::add(u, B::rows(mods, i * cfg.width, cfg.width));
    }
    B::sin_fwd(u, omega, h[static_cast<std::size_t>(i)], cfac[static_cast<std::size_t>(i)]);
  }
  out.y = B::mul_pm(f.w[static_cast<std::size_t>(nl)], h[static_cast<std::size_t>(nl - 1)]);
  B::add_colvec(out.y, f.b[static_cast<std::size_t>(nl)]);

  typename B::Mt resid;
  out.loss = B::mse_residual(out.y, target, resid);
  if (mode == GradMode::kLossOnly) return out;

  const bool shared = mode == GradMode::kZShared;
  if (shared) {
    out.g_w.resize(static_cast<std::size_t>(nl) + 1);
    out.g_b.resize(static_cast<std::size_t>(nl) + 1);
  }

  typename B::Mt d = B::scale(resid, S(2) / static_cast<S>(target.size()));
  if (shared) {
    out.g_w[static_cast<std::size_t>(nl)] = B::mul_m_mT(d, h[static_cast<std::size_t>(nl - 1)]);
    out.g_b[static_cast<std::size_t>(nl)] = B::rowsum(d);
  }
  typename B::Mt dh = B::mul_pTm(f.w[static_cast<std::size_t>(nl)], d);
  out.dmods = B::zeros(cfg.mod_dim(), target.cols());
  for (int i = nl - 1; i >= 0; --i) {
    typename B::Mt du = B::cwise(dh, cfac[static_cast<std::size_t>(i)]);
    if (shared) {
      out.g_w[static_cast<std::size_t>(i)] =
          (i == 0) ? B::mul_m_pT(du, x)
                   : B::mul_m_mT(du, h[static_cast<std::size_t>(i - 1)]);
      out.g_b[static_cast<std::size_t>(i)] = B::rowsum(du);
    }
    B::set_rows(out.dmods, i * cfg.width, du);
    if (i > 0) dh = B::mul_pTm(f.w[static_cast<std::size_t>(i)], du);
  }
  return out;
}

template <class B>
PipeResult<B> eval_pipeline(const FieldParamsT<typename B::Real>& f,
                            const SirenConfig& cfg,
                            const MapParamsT<typename B::Real>& map,
                            const typename B::Mt& z,
                            const PipelineAux<typename B::Real>& aux,
                            const MatX<typename B::Real>& target,
                            GradMode mode) {
  PipeResult<B> out;
  const bool shared = mode == GradMode::kZShared;
  std::vector<typename B::Mt> shifted;
  typename B::Mt g = map_forward<B>(map, z, aux, shared ? &shifted : nullptr);
  typename B::Mt mods = interp_forward<B>(g, aux.interp, cfg.mod_dim(), aux.x.cols());
  SirenPass<B> sp = siren_pass<B>(f, cfg, aux.x, mods, target, mode);
  out.loss = sp.loss;
  out.y = std::move(sp.y);
  if (mode == GradMode::kLossOnly) return out;
  out.g_w = std::move(sp.g_w);
  out.g_b = std::move(sp.g_b);
  typename B::Mt dg = interp_backward<B>(sp.dmods, aux.interp, cfg.mod_dim(),
                                         aux.cells, aux.x.cols());
  map_backward<B>(map, z, shifted, dg, aux, shared, out);
  return out;
}

template <class B>
typename B::Mt pipeline_forward(const FieldParamsT<typename B::Real>& f,
                                const SirenConfig& cfg,
                                const MapParamsT<typename B::Real>& map,
                                const typename B::Mt& z,
                                const PipelineAux<typename B::Real>& aux) {
  typename B::Mt g = map_forward<B>(map, z, aux, nullptr);
  typename B::Mt mods = interp_forward<B>(g, aux.interp, cfg.mod_dim(), aux.x.cols());
  return siren_forward<B>(f, cfg, aux.x, mods);
}

}  // namespace functakit::detail
