#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "commands.hpp"
#include "run_config.hpp"

using namespace functakit;
using namespace functakit::cli;

namespace {

// categorized exit codes, one per error family
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitFormat = 4;
constexpr int kExitShape = 5;
constexpr int kExitValue = 6;
constexpr int kExitDivergence = 7;

int fail(const char* category, const std::exception& e, int code) {
  std::cerr << "error [" << category << "]: " << e.what() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spatial functa toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir;
  uint64_t seed = 0;
  int threads = 1;
  std::vector<std::string> assignments;
  app.add_option("--config", config_path, "INI run configuration");
  app.add_option("--seed", seed, "global seed (overrides the config file)");
  app.add_option("--out", out_dir, "run directory (overrides output_dir)");
  app.add_option("--threads", threads, "worker threads; 1 is bit-reproducible");
  app.add_option("-D,--define", assignments, "override a config key: section.key=value");

  // meta-train
  auto* train = app.add_subcommand("meta-train", "meta-learn the shared decoder");
  std::string train_data;
  int train_synth = 0;
  train->add_option("--data", train_data, "directory of square PNG images");
  train->add_option("--synth", train_synth, "use N synthetic images instead");

  // encode
  auto* encode = app.add_subcommand("encode", "fit latents with a frozen decoder");
  std::string enc_state, enc_data, enc_labels;
  int enc_synth = 0;
  encode->add_option("--state", enc_state, "meta checkpoint (.sfck)");
  encode->add_option("--data", enc_data, "directory of square PNG images");
  encode->add_option("--labels", enc_labels, "labels csv (filename,label)");
  encode->add_option("--synth", enc_synth, "use N synthetic images instead");

  // decode
  auto* decode = app.add_subcommand("decode", "reconstruct one latent to a PNG");
  std::string dec_state, dec_set, dec_png;
  int dec_index = 0, dec_res = 0;
  decode->add_option("--state", dec_state, "meta checkpoint (.sfck)");
  decode->add_option("--set", dec_set, "functaset (.sfta)");
  decode->add_option("--index", dec_index, "latent index");
  decode->add_option("--png", dec_png, "output path (default under the run dir)");
  decode->add_option("--resolution", dec_res, "decode resolution (0 = native)");

  // psnr
  auto* psnr_cmd = app.add_subcommand("psnr", "PSNR between two PNG images");
  std::string psnr_a, psnr_b;
  psnr_cmd->add_option("--a", psnr_a, "first image");
  psnr_cmd->add_option("--b", psnr_b, "second image");

  // quantize
  auto* quant = app.add_subcommand("quantize", "quantize a functaset");
  std::string quant_set;
  int quant_bits = 0;
  quant->add_option("--set", quant_set, "functaset (.sfta)");
  quant->add_option("--bits", quant_bits, "bits per code (overrides the config)");

  // perturb
  auto* pert = app.add_subcommand("perturb", "latent perturbation analysis");
  std::string pert_state, pert_set, pert_strengths;
  int pert_index = 0, pert_dim = -1;
  bool pert_spatial = false, pert_rank = false, pert_noclamp = false;
  pert->add_option("--state", pert_state, "meta checkpoint (.sfck)");
  pert->add_option("--set", pert_set, "functaset (.sfta)");
  pert->add_option("--index", pert_index, "latent index");
  pert->add_option("--dim", pert_dim, "latent dimension / feature channel");
  pert->add_option("--strengths", pert_strengths, "comma list, overrides the config");
  pert->add_flag("--spatial", pert_spatial, "perturb a feature channel everywhere");
  pert->add_flag("--rank", pert_rank, "rank all dimensions by image-level MAE");
  pert->add_flag("--no-clamp", pert_noclamp, "analyze unclamped decodes");

  // classify
  auto* cls = app.add_subcommand("classify", "train and evaluate a latent classifier");
  std::string cls_set, cls_eval;
  cls->add_option("--set", cls_set, "labeled functaset (.sfta)");
  cls->add_option("--eval-set", cls_eval, "separate labeled evaluation set");

  // diffuse-train
  auto* diff = app.add_subcommand("diffuse-train", "train a latent DDPM");
  std::string diff_set;
  diff->add_option("--set", diff_set, "functaset (.sfta)");

  // sample
  auto* sample = app.add_subcommand("sample", "draw latents from a trained DDPM");
  std::string smp_model, smp_ref, smp_state;
  int smp_count = 0, smp_label = -1;
  double smp_guidance = 0.0;
  sample->add_option("--model", smp_model, "diffusion checkpoint (.sfdm)");
  sample->add_option("--count", smp_count, "samples to draw (overrides the config)");
  sample->add_option("--label", smp_label, "class label; -1 = unconditional");
  sample->add_option("--guidance", smp_guidance, "guidance scale (overrides the config)");
  sample->add_option("--ref", smp_ref, "reference functaset for the report");
  sample->add_option("--state", smp_state, "meta checkpoint for pixel-space audit");

  // audit
  auto* audit = app.add_subcommand("audit", "memorization audit / occupancy formula");
  std::string aud_samples, aud_train, aud_state;
  long long aud_n = 0, aud_k = -1;
  audit->add_option("--samples", aud_samples, "sampled functaset (.sfta)");
  audit->add_option("--train", aud_train, "training functaset (.sfta)");
  audit->add_option("--state", aud_state, "meta checkpoint for decoding");
  audit->add_option("--n", aud_n, "formula mode: training set size");
  audit->add_option("--k", aud_k, "formula mode: draw count");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path);
    for (const auto& a : assignments) apply_assignment(cfg, a);
    if (app.count("--seed")) cfg.seed = seed;
    if (app.count("--out")) cfg.output_dir = out_dir;
    if (app.count("--threads")) {
      cfg.threads = threads;
      if (threads < 1) throw ConfigError("--threads must be >= 1");
    }

    if (*train) {
      cmd_meta_train(cfg, train_data, train_synth);
    } else if (*encode) {
      cmd_encode(cfg, enc_state, enc_data, enc_labels, enc_synth);
    } else if (*decode) {
      cmd_decode(cfg, dec_state, dec_set, dec_index, dec_png, dec_res);
    } else if (*psnr_cmd) {
      cmd_psnr(cfg, psnr_a, psnr_b);
    } else if (*quant) {
      if (quant->count("--bits")) cfg.quant_bits = quant_bits;
      cmd_quantize(cfg, quant_set);
    } else if (*pert) {
      if (pert->count("--dim")) cfg.perturb_dim = pert_dim;
      if (pert->count("--strengths")) cfg.set("eval", "strengths", pert_strengths);
      if (pert_noclamp) cfg.perturb_clamp = false;
      cmd_perturb(cfg, pert_state, pert_set, pert_index, pert_spatial, pert_rank);
    } else if (*cls) {
      cmd_classify(cfg, cls_set, cls_eval);
    } else if (*diff) {
      cmd_diffuse_train(cfg, diff_set);
    } else if (*sample) {
      if (sample->count("--count")) cfg.sample_count = smp_count;
      if (sample->count("--guidance")) cfg.guidance = smp_guidance;
      cmd_sample(cfg, smp_model, smp_ref, smp_state, smp_label);
    } else if (*audit) {
      cmd_audit(cfg, aud_samples, aud_train, aud_state, aud_n, aud_k);
    }
    return 0;
  } catch (const ConfigError& e) {
    return fail("config", e, kExitConfig);
  } catch (const IoError& e) {
    return fail("io", e, kExitIo);
  } catch (const FormatError& e) {
    return fail("format", e, kExitFormat);
  } catch (const ShapeError& e) {
    return fail("shape", e, kExitShape);
  } catch (const ValueError& e) {
    return fail("value", e, kExitValue);
  } catch (const DivergenceError& e) {
    return fail("divergence", e, kExitDivergence);
  } catch (const std::exception& e) {
    return fail("internal", e, 1);
  }
}
