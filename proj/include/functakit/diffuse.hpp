#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "functakit/common.hpp"
#include "functakit/eval.hpp"
#include "functakit/functaset.hpp"
#include "functakit/meta.hpp"

namespace functakit {

enum class ScheduleKind : uint8_t { kLinear = 0, kCosine = 1 };

// Tables use 0-based step indices: beta[t] and alpha[t] cover steps 1..T at
// t = 0..T-1, while alpha_bar has T+1 entries with alpha_bar[0] = 1 (the
// uncorrupted signal) and alpha_bar[t] the product of the first t alphas.
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::kCosine;
  int T = 0;
  VecXd beta, alpha;  // length T
  VecXd alpha_bar;    // length T + 1, strictly decreasing from 1
};

NoiseSchedule make_schedule(ScheduleKind kind, int T);

// z_t = sqrt(alpha_bar[t]) z0 + sqrt(1 - alpha_bar[t]) eps, t in [0, T].
MatXf q_sample(const MatXf& z0, int t, const MatXf& eps,
               const NoiseSchedule& schedule);

// Discrete density over t = 0..T-1, linear in t, with p(0)/p(T-1) = ratio.
struct TimestepDist {
  int T = 0;
  double ratio = 1.0;
  VecXd pdf, cdf;
};

TimestepDist make_timestep_dist(int T, double ratio);

int draw_timestep(const TimestepDist& dist, Rng& rng);
std::vector<int> sample_timesteps(const TimestepDist& dist, int count,
                                  uint64_t seed);

struct DenoiserConfig {
  int width = 128;
  int blocks = 2;
  int time_dim = 32;   // sinusoidal embedding size, even
  int class_dim = 16;
  int classes = 0;     // real classes; the dummy label index equals classes
  float dropout = 0.0f;

  void validate() const;
};

struct DiffusionState {
  DenoiserConfig cfg;
  NoiseSchedule schedule;
  TimestepDist tdist;
  int dims = 0;  // flattened latent dimensionality
  std::vector<MatXf> params;
  std::vector<MatXf> adam_m, adam_v;
  int64_t step = 0;
};

DiffusionState ddpm_init(const DenoiserConfig& cfg, ScheduleKind kind, int T,
                         double timestep_ratio, int dims, uint64_t seed);

// Per-example corruption: t from the timestep density, eps standard normal,
// label swapped for the dummy with probability dummy_prop. Labels empty means
// everything is unconditional (all dummy).
struct CorruptedBatch {
  MatXf z_t, eps;
  std::vector<int> t;
  std::vector<int> labels;  // after dummy replacement
};

CorruptedBatch corrupt_batch(const MatXf& z0, const std::vector<int>& labels,
                             const NoiseSchedule& schedule,
                             const TimestepDist& dist, float dummy_prop,
                             int classes, Rng& rng);

// Test seam: anything that maps (z_t, t, labels) to a noise prediction.
using NoisePredictor = std::function<MatXf(
    const MatXf& z_t, const std::vector<int>& t, const std::vector<int>& labels)>;

NoisePredictor make_predictor(const DiffusionState& state);

// mean over batch and dims of ||eps - eps_hat||^2
float ddpm_loss(const NoisePredictor& predict, const CorruptedBatch& batch);

// One Adam step on the simplified DDPM objective; rng drives the corruption
// draws and the dropout mask. Throws DivergenceError on a non-finite loss
// before touching any state.
float ddpm_train_step(DiffusionState& state, const MatXf& z0,
                      const std::vector<int>& labels, float lr, float dummy_prop,
                      Rng& rng);

struct DdpmTrainConfig {
  float lr = 1e-3f;
  int batch_size = 32;
  int64_t steps = 1000;
  float dummy_prop = 0.2f;
  uint64_t seed = 0;
  int64_t log_every = 100;

  void validate() const;
};

struct DdpmMetricsRow {
  int64_t step = 0;
  float loss = 0.0f;
};
using DdpmSink = std::function<void(const DdpmMetricsRow&)>;

// Step-based training over a functaset of (already normalized) latents.
void ddpm_train(DiffusionState& state, const Functaset& fs,
                const DdpmTrainConfig& cfg, const DdpmSink& sink = {});

// Ancestral sampling from a given starting point; label < 0 keeps every step
// on the unconditional (dummy) branch, otherwise classifier-free guidance
// mixes eps_u + g (eps_c - eps_u), with exact branches at g = 0 and g = 1.
MatXf ddpm_sample_path(const NoisePredictor& predict,
                       const NoiseSchedule& schedule, MatXf z_init, int label,
                       int classes, double guidance, Rng& rng);

// count latent samples as columns, deterministic for a fixed seed.
MatXf ddpm_sample(const DiffusionState& state, int count, int label,
                  double guidance, uint64_t seed);

struct GenerationReport {
  VecXd mean_diff;  // sample mean minus reference mean, per flattened dim
  double mean_abs_diff = 0;
  double mean_rmse = 0;
  double cov_trace_sample = 0;
  double cov_trace_reference = 0;
  double cov_trace_rel_err = 0;
  double cov_fro_rel_err = 0;
  std::optional<MemorizationAudit> audit;  // only with a decoder
};

// Latent moment discrepancies; with a decoder, also the nearest-neighbour
// memorization audit on decoded pixels (stats denormalized first when the
// reference set carries them).
GenerationReport evaluate_generation(const MatXf& samples, const Functaset& ref,
                                     const MetaState* decoder = nullptr);

void save_diffusion_state(const DiffusionState& state, const std::string& path);
DiffusionState load_diffusion_state(const std::string& path);

}  // namespace functakit
