#pragma once

#include <vector>

#include "functakit/common.hpp"
#include "functakit/meta.hpp"

namespace functakit {

// Decoded images are out_dim x d^2 matrices, row-major pixel order, [0,1].

// Field decode on the full pixel-center grid, clamped to [0,1].
MatXf reconstruct(const MetaState& state, const Latent& z);
MatXf reconstruct_at(const MetaState& state, const Latent& z, int resolution);

// Raw decode without the output clamp (perturbation periodicity analyses).
MatXf decode_unclamped(const MetaState& state, const Latent& z);
MatXf decode_unclamped_at(const MetaState& state, const Latent& z, int resolution);

// 20*log10(max_value/sqrt(MSE)); identical inputs give the +inf sentinel.
double psnr(const MatXf& a, const MatXf& b, double max_value = 1.0);
double psnr_from_mse(double mse, double max_value = 1.0);

struct PerturbReport {
  int dimension = 0;
  std::vector<float> strengths;  // sorted ascending
  std::vector<VecXf> mae_map;    // per strength: d^2 per-pixel mean |diff|
  std::vector<VecXf> rmse_map;   // per strength: d^2 per-pixel rms diff
  std::vector<MatXf> tile_rmse;  // per strength: s x s per-tile rms diff
  std::vector<float> mae;        // image-level mean abs diff
  std::vector<float> rmse;       // image-level rms diff
};

// Adds strength * e_dim to the flattened latent and reports decode differences.
PerturbReport perturb_vector(const MetaState& state, const Latent& z, int dim,
                             std::vector<float> strengths, bool clamp = true);

// Adds the same constant to one feature channel at every latent cell.
PerturbReport perturb_spatial(const MetaState& state, const Latent& z,
                              int feature_dim, std::vector<float> strengths,
                              bool clamp = true);

// Every latent dimension's image-level MAE at one strength, descending;
// ties broken toward the lower dimension index.
std::vector<std::pair<int, float>> rank_dims_by_mae(const MetaState& state,
                                                    const Latent& z,
                                                    float strength);

struct MemorizationAudit {
  std::vector<Eigen::Index> nearest_id;  // per sample, ties to the lowest id
  VecXf nearest_dist;                    // pixel-space Euclidean distance
  Eigen::Index unique_count = 0;
  double expected_unique = 0;
  double expected_std = 0;
  double z_score = 0;  // (unique - expected) / std
};

// n * (1 - (1 - 1/n)^k): unique items among k uniform draws from n.
double expected_unique_count(Eigen::Index n, Eigen::Index k);
double expected_unique_std(Eigen::Index n, Eigen::Index k);

MemorizationAudit memorization_audit(const std::vector<MatXf>& samples,
                                     const std::vector<MatXf>& trainset);

}  // namespace functakit
