#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "functakit/common.hpp"
#include "functakit/latent_map.hpp"

namespace functakit {

// Latents flatten column-wise as row-major (s, s, c) arrays: cell-major,
// channel fastest — exactly the memory order of Latent::values.
enum class NormKind : uint8_t { kScalar = 1, kVector = 2, kArray = 3 };

// z_norm = (z - mu) / (gamma * sigma), elementwise after broadcasting.
struct NormStats {
  NormKind kind = NormKind::kScalar;
  float gamma = 1.0f;
  VecXf mu;     // scalar: length 1; vector: c; array: s*s*c
  VecXf sigma;  // same length, strictly positive
};

struct QuantSpec {
  int bits = 8;      // codes occupy [0, 2^bits)
  VecXf qmin, qmax;  // per flattened latent dimension
};

using CodeMat = Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

struct Functaset {
  LatentShape shape;
  InterpScheme interp = InterpScheme::kNone;
  int resolution = 0;
  MatXf latents;                 // dims x N (float payload; empty if quantized)
  CodeMat codes;                 // dims x N (quantized payload)
  std::vector<uint16_t> labels;  // empty, or one per datum
  std::optional<NormStats> norm;
  std::optional<QuantSpec> quant;
  VecXf fit_psnr;  // per-datum encode quality, NaN marks a failed fit; not serialized

  bool quantized() const { return quant.has_value(); }
  Eigen::Index count() const { return quantized() ? codes.cols() : latents.cols(); }
  int dims() const { return shape.dims(); }

  Latent latent(Eigen::Index i) const;
  void set_latent(Eigen::Index i, const Latent& z);
  void validate() const;
};

NormStats compute_norm_stats(const Functaset& fs, NormKind kind, float gamma);

Latent normalize(const Latent& z, const NormStats& stats);
Latent denormalize(const Latent& z, const NormStats& stats);

// whole-set forms over dims x N payload columns
MatXf normalize_columns(const MatXf& latents, const LatentShape& shape,
                        const NormStats& stats);
MatXf denormalize_columns(const MatXf& latents, const LatentShape& shape,
                          const NormStats& stats);

// Uniform per-dimension binning over the set's own [min, max]; dequantization
// returns bin centers. The returned set carries its QuantSpec.
Functaset quantize(const Functaset& fs, int bits);
Functaset dequantize(const Functaset& fs);

void save_functaset(const Functaset& fs, const std::string& path);
Functaset load_functaset(const std::string& path);

}  // namespace functakit
