#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "functakit/common.hpp"
#include "functakit/field.hpp"
#include "functakit/functaset.hpp"
#include "functakit/latent_map.hpp"

namespace functakit {

struct MetaConfig {
  int inner_steps = 3;
  float inner_lr_init = 1e-2f;
  float outer_lr = 3e-5f;
  int batch_size = 16;
  int64_t iterations = 0;
  bool first_order = false;
  uint64_t seed = 0;
  int64_t log_every = 100;

  void validate() const {
    if (inner_steps < 1) throw ConfigError("meta: inner_steps must be >= 1");
    if (batch_size < 1) throw ConfigError("meta: batch_size must be >= 1");
    if (iterations < 0) throw ConfigError("meta: iterations must be >= 0");
    if (!(outer_lr > 0)) throw ConfigError("meta: outer_lr must be > 0");
    if (!(inner_lr_init >= 0)) throw ConfigError("meta: inner_lr_init must be >= 0");
  }
};

// Architecture bundle; siren.in_dim is derived from the coordinate scheme.
struct MetaSpec {
  SirenConfig siren;
  LatentShape latent;
  MapKind map_kind = MapKind::kDense;
  InterpScheme interp = InterpScheme::kNone;
  CoordScheme coords = CoordScheme::kGlobalUnit;
  int resolution = 0;

  void validate() const;
};

struct MetaState {
  SirenConfig siren;
  LatentShape latent_shape;
  InterpScheme interp = InterpScheme::kNone;
  CoordScheme coords = CoordScheme::kGlobalUnit;
  int resolution = 0;
  int inner_steps = 3;  // baked in so encoding needs only the state
  FieldParams field_params;
  LatentToModMap latent_map;
  MatXf inner_lrs;  // c x cells, one step size per latent dimension
  VecXf adam_m, adam_v;
  int64_t step = 0;
};

MetaState meta_init(const MetaSpec& spec, const MetaConfig& cfg);

struct InnerFitResult {
  Latent z;
  float loss = 0;
};

// K SGD steps on the latent from zero init, shared params frozen.
InnerFitResult inner_fit(const MetaState& state, const MatXf& signal);

struct OuterMetrics {
  float loss = 0;  // batch mean of L(z_K)
  float psnr = 0;  // batch mean, from per-example MSE on the [0,1] scale
};

// One Adam update of (field, map, inner_lrs) through the unrolled inner loop.
// Throws DivergenceError without touching state if any gradient is non-finite.
OuterMetrics outer_step(MetaState& state, const std::vector<MatXf>& batch,
                        const MetaConfig& cfg);

struct MetricsRow {
  int64_t iteration = 0;
  float loss = 0;
  float psnr = 0;
};
using MetricsSink = std::function<void(const MetricsRow&)>;

MetaState meta_train(const MetaSpec& spec, const std::vector<MatXf>& dataset,
                     const MetaConfig& cfg, const MetricsSink& sink = {});

// Encode every signal with the frozen state; labels optional. Divergent fits
// leave a zero latent with NaN fit_psnr.
Functaset build_functaset(const MetaState& state,
                          const std::vector<MatXf>& dataset,
                          const std::vector<uint16_t>* labels = nullptr);

void save_meta_state(const MetaState& state, const std::string& path);
MetaState load_meta_state(const std::string& path);

}  // namespace functakit
