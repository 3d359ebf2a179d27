#pragma once

// Exact differentiation of the K-step unrolled inner loop.  The adjoint of
//   z_{k+1} = z_k - lrs .* grad_z L(z_k)
// needs Hessian-vector products of L at every visited z_k; each reverse step
// runs one dual-number pipeline pass seeded with w = lrs .* a_{k+1}, giving
//   a_k           = a_{k+1} - H_zz w
//   shared accum -= H_{shared,z} w
//   lrs accum    -= g_k .* a_{k+1}
// First-order mode treats the inner gradients g_k as constants: shared
// parameters keep only the direct term, and the lrs gradient contracts every
// g_k against the final-loss adjoint.

#include <cmath>
#include <vector>

#include "functakit/detail/graph.hpp"

namespace functakit::detail {

template <class S>
struct ExampleGrads {
  S loss{};
  std::vector<MatX<S>> g_w, g_b;    // field layers (biases as columns)
  std::vector<MatX<S>> g_map_w;
  MatX<S> g_map_b;
  MatX<S> g_lrs;
  MatX<S> z_final;
};

template <class S>
ExampleGrads<S> unrolled_gradients(const FieldParamsT<S>& f,
                                   const SirenConfig& cfg,
                                   const MapParamsT<S>& map,
                                   const MatX<S>& lrs,
                                   const PipelineAux<S>& aux,
                                   const MatX<S>& target, int inner_steps,
                                   bool first_order) {
  using P = PlainOps<S>;
  using Dl = DualOps<S>;
  ExampleGrads<S> out;
  MatX<S> z = MatX<S>::Zero(lrs.rows(), lrs.cols());
  std::vector<MatX<S>> traj;     // z_0 .. z_{K-1}
  std::vector<MatX<S>> inner_g;  // gradients that drove each step
  traj.reserve(static_cast<std::size_t>(inner_steps));
  inner_g.reserve(static_cast<std::size_t>(inner_steps));
  for (int k = 0; k < inner_steps; ++k) {
    auto r = eval_pipeline<P>(f, cfg, map, z, aux, target, GradMode::kZ);
    if (!std::isfinite(r.loss) || !all_finite(r.grad_z))
      throw DivergenceError("inner loop diverged at step " + std::to_string(k));
    traj.push_back(z);
    inner_g.push_back(r.grad_z);
    z -= lrs.cwiseProduct(r.grad_z);
  }

  auto fin = eval_pipeline<P>(f, cfg, map, z, aux, target, GradMode::kZShared);
  if (!std::isfinite(fin.loss))
    throw DivergenceError("non-finite loss after the inner loop");
  out.loss = fin.loss;
  out.z_final = std::move(z);
  out.g_w = std::move(fin.g_w);  // direct terms at z_K
  out.g_b = std::move(fin.g_b);
  out.g_map_w = std::move(fin.g_map_w);
  out.g_map_b = std::move(fin.g_map_b);
  out.g_lrs = MatX<S>::Zero(lrs.rows(), lrs.cols());

  MatX<S> a = fin.grad_z;  // adjoint at z_K
  for (int k = inner_steps - 1; k >= 0; --k) {
    const auto ku = static_cast<std::size_t>(k);
    out.g_lrs -= inner_g[ku].cwiseProduct(a);
    if (first_order) continue;
    DualMat<S> zd{traj[ku], lrs.cwiseProduct(a)};
    auto hv = eval_pipeline<Dl>(f, cfg, map, zd, aux, target, GradMode::kZShared);
    for (std::size_t l = 0; l < out.g_w.size(); ++l) {
      out.g_w[l] -= hv.g_w[l].t;
      out.g_b[l] -= hv.g_b[l].t;
    }
    for (std::size_t t = 0; t < out.g_map_w.size(); ++t)
      out.g_map_w[t] -= hv.g_map_w[t].t;
    out.g_map_b -= hv.g_map_b.t;
    a -= hv.grad_z.t;
  }
  return out;
}

}  // namespace functakit::detail
