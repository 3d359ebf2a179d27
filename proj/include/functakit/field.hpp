#pragma once

#include <vector>

#include "functakit/common.hpp"

namespace functakit {

// Modulated SIREN: every layer except the last computes
//   h' = sin(omega0 * (W h + b + s))
// where s is that layer's slice of the shift-modulation vector. The output
// layer is plain affine, unmodulated. Modulation length C = width*(depth-1).
struct SirenConfig {
  int in_dim = 2;
  int out_dim = 3;
  int width = 32;
  int depth = 4;   // total layers, >= 2
  float omega0 = 30.0f;

  int hidden_layers() const { return depth - 1; }  // sine layers
  int mod_dim() const { return width * (depth - 1); }

  void validate() const {
    if (in_dim < 1 || out_dim < 1) throw ConfigError("siren: in/out dims must be >= 1");
    if (width < 1) throw ConfigError("siren: width must be >= 1");
    if (depth < 2) throw ConfigError("siren: depth must be >= 2");
    if (!(omega0 > 0)) throw ConfigError("siren: omega0 must be > 0");
  }
};

template <class S>
struct FieldParamsT {
  std::vector<MatX<S>> w;  // depth matrices
  std::vector<VecX<S>> b;

  template <class T>
  FieldParamsT<T> cast() const {
    FieldParamsT<T> out;
    out.w.reserve(w.size());
    out.b.reserve(b.size());
    for (const auto& m : w) out.w.push_back(m.template cast<T>());
    for (const auto& v : b) out.b.push_back(v.template cast<T>());
    return out;
  }
};

using FieldParams = FieldParamsT<float>;

// Uniform SIREN initialization: first layer U(-1/in, 1/in), hidden layers
// U(-sqrt(6/fan_in)/omega0, +sqrt(6/fan_in)/omega0), biases zero.
FieldParams siren_init(const SirenConfig& cfg, uint64_t seed);

enum class CoordScheme : uint8_t { kGlobalUnit = 0, kPerPatch = 1, kBinary = 2 };

// Pixel-center coordinate grid for a d x d image, row-major pixel order
// (n = row*d + col). `rep` is the SIREN input representation (dimension
// depends on the scheme); `unit` holds the plain [0,1]^2 pixel-center
// positions used for modulation interpolation.
struct CoordGrid {
  CoordScheme scheme = CoordScheme::kGlobalUnit;
  int resolution = 0;  // d
  int latent_side = 1; // s used for per-patch rescaling
  MatXd rep;           // in_dim x d^2
  MatXd unit;          // 2 x d^2

  int count() const { return resolution * resolution; }
  int rep_dim() const { return static_cast<int>(rep.rows()); }
};

CoordGrid make_coord_grid(int d, int s, CoordScheme scheme);

// representation dimension implied by scheme and resolution
int coord_rep_dim(int d, CoordScheme scheme);

// ---- per-coordinate evaluation (reference path) ----

// f_theta(x; m). `mod` is the full shift-modulation vector of length C.
VecXf field_forward(const FieldParams& params, const SirenConfig& cfg,
                    const VecXf& mod, const VecXf& coord);

// pre-activations W h + b + s of every sine layer, for inspection
std::vector<VecXf> field_preactivations(const FieldParams& params,
                                        const SirenConfig& cfg,
                                        const VecXf& mod, const VecXf& coord);

// ---- whole-grid loss and gradients, single shared modulation ----

template <class S>
struct FieldBackwardResultT {
  S loss;
  FieldParamsT<S> grad_params;
  VecX<S> grad_mod;
};

// MSE over all coordinates and channels of `target` (out_dim x d^2), with one
// modulation vector applied at every coordinate. Gradients are exact analytic
// derivatives.
template <class S>
FieldBackwardResultT<S> field_backward(const FieldParamsT<S>& params,
                                       const SirenConfig& cfg,
                                       const VecX<S>& mod,
                                       const CoordGrid& coords,
                                       const MatX<S>& target);

// batched forward over a coordinate grid with per-coordinate modulations
// (C x N); returns out_dim x N
template <class S>
MatX<S> field_forward_grid(const FieldParamsT<S>& params, const SirenConfig& cfg,
                           const MatX<S>& mods, const CoordGrid& coords);

}  // namespace functakit
