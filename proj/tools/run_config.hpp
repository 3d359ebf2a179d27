#pragma once

#include <map>
#include <string>
#include <vector>

#include "functakit/classify.hpp"
#include "functakit/diffuse.hpp"
#include "functakit/functaset.hpp"
#include "functakit/meta.hpp"

namespace functakit::cli {

// Resolved run configuration: INI sections map onto the module config structs,
// with a handful of orchestration-only keys (output_dir, threads, ...).
struct RunConfig {
  RunConfig() { meta_spec.latent = LatentShape::vector(64); }

  uint64_t seed = 0;
  std::string output_dir = "run";
  int threads = 1;

  MetaSpec meta_spec;
  MetaConfig meta_cfg;

  bool encode_normalize = false;
  NormKind norm_kind = NormKind::kScalar;
  float norm_gamma = 1.0f;
  int quant_bits = 8;

  ClassifierConfig classify;
  float classify_train_frac = 1.0f;

  DenoiserConfig denoiser;
  ScheduleKind schedule = ScheduleKind::kCosine;
  int timesteps = 100;
  double timestep_ratio = 1.0;
  DdpmTrainConfig ddpm;
  double guidance = 1.0;
  int sample_count = 16;

  std::vector<float> strengths = {0.05f};
  int perturb_dim = 0;
  bool perturb_clamp = true;

  // [invocation] entries from a snapshot being replayed (command, input paths).
  std::map<std::string, std::string> invocation;

  // Applies one "section.key = value" assignment; unknown sections or keys and
  // malformed values raise ConfigError naming the offending key.
  void set(const std::string& section, const std::string& key,
           const std::string& value);

  // Canonical INI text of every section in a fixed order, with `extra`
  // appended to the [invocation] section. Parsing the result reproduces
  // this config exactly.
  std::string render(const std::map<std::string, std::string>& extra = {}) const;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// "sec.key=value" (for --set flags)
void apply_assignment(RunConfig& cfg, const std::string& assignment);

}  // namespace functakit::cli
