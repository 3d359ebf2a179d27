#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <vector>

#include "functakit/classify.hpp"
#include "functakit/detail/serialize.hpp"
#include "functakit/diffuse.hpp"
#include "functakit/eval.hpp"
#include "functakit/image.hpp"
#include "functakit/meta.hpp"
#include "functakit/synth.hpp"

namespace fs = std::filesystem;

namespace functakit::cli {
namespace {

std::string f32s(float v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

std::string f64s(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// flag value, else the replayed snapshot's [invocation] entry
std::string pick(const std::string& flag, const RunConfig& cfg, const char* key) {
  if (!flag.empty()) return flag;
  const auto it = cfg.invocation.find(key);
  return it == cfg.invocation.end() ? "" : it->second;
}

std::string require(const std::string& value, const char* what) {
  if (value.empty()) throw ConfigError(std::string("missing required ") + what);
  return value;
}

std::string prepare_out(RunConfig& cfg, const std::string& command,
                        std::map<std::string, std::string> args) {
  fs::create_directories(cfg.output_dir);
  args["command"] = command;
  cfg.invocation.clear();  // replayed entries are re-recorded from the merge
  detail::atomic_write_file(cfg.output_dir + "/resolved.ini",
                            [&](std::ostream& os) { os << cfg.render(args); });
  std::cout << "resolved config: " << cfg.output_dir << "/resolved.ini\n";
  return cfg.output_dir;
}

void write_text(const std::string& path, const std::string& text) {
  detail::atomic_write_file(path, [&](std::ostream& os) { os << text; });
}

struct PngDataset {
  std::vector<MatXf> signals;
  std::vector<std::string> names;
  std::vector<uint16_t> labels;  // empty without a csv
  int side = 0;
  int channels = 0;
};

std::map<std::string, uint16_t> read_labels_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open labels csv " + path);
  std::map<std::string, uint16_t> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1 && line == "filename,label") continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw ValueError("labels csv line " + std::to_string(lineno) +
                       ": expected filename,label");
    const std::string name = line.substr(0, comma);
    const std::string value = line.substr(comma + 1);
    std::size_t used = 0;
    long long label = -1;
    try {
      label = std::stoll(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != value.size() || label < 0 || label > 0xffff)
      throw ValueError("labels csv line " + std::to_string(lineno) +
                       ": bad label '" + value + "'");
    if (!out.emplace(name, static_cast<uint16_t>(label)).second)
      throw ValueError("labels csv: duplicate entry for " + name);
  }
  return out;
}

PngDataset load_png_dir(const std::string& dir, const std::string& labels_csv) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir);
  PngDataset out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    if (entry.path().extension() != ".png") continue;
    out.names.push_back(entry.path().filename().string());
  }
  if (out.names.empty()) throw IoError("no .png files in " + dir);
  std::sort(out.names.begin(), out.names.end());
  for (const auto& name : out.names) {
    const ImageData img = load_png(dir + "/" + name);
    if (img.width != img.height)
      throw ShapeError(name + ": images must be square, got " +
                       std::to_string(img.width) + "x" + std::to_string(img.height));
    if (out.side == 0) {
      out.side = img.width;
      out.channels = img.channels;
    } else if (img.width != out.side || img.channels != out.channels) {
      throw ShapeError(name + ": all images must share resolution and channels");
    }
    out.signals.push_back(img.pixels);
  }
  if (!labels_csv.empty()) {
    auto by_name = read_labels_csv(labels_csv);
    out.labels.reserve(out.names.size());
    for (const auto& name : out.names) {
      const auto it = by_name.find(name);
      if (it == by_name.end()) throw ValueError("labels csv: no label for " + name);
      out.labels.push_back(it->second);
      by_name.erase(it);
    }
    if (!by_name.empty())
      throw ValueError("labels csv: entry for missing file " + by_name.begin()->first);
  }
  return out;
}

// Resolves the training signals for meta-train/encode: a PNG directory or the
// built-in synthetic generator. Fills in resolution/out_dim when unset and
// cross-checks them otherwise.
PngDataset resolve_dataset(RunConfig& cfg, const std::string& data_dir,
                           const std::string& labels_csv, int synth_count) {
  if (!data_dir.empty() && synth_count > 0)
    throw ConfigError("give either a data directory or a synthetic count, not both");
  PngDataset data;
  if (!data_dir.empty()) {
    data = load_png_dir(data_dir, labels_csv);
  } else if (synth_count > 0) {
    if (cfg.meta_spec.resolution <= 0)
      throw ConfigError("synthetic data needs meta.resolution set");
    data.side = cfg.meta_spec.resolution;
    data.channels = cfg.meta_spec.siren.out_dim;
    data.signals = synth_dataset(data.side, data.channels, synth_count, cfg.seed);
    data.names.reserve(static_cast<std::size_t>(synth_count));
    for (int i = 0; i < synth_count; ++i)
      data.names.push_back("synth_" + std::to_string(i));
  } else {
    throw ConfigError("missing required data source (--data or --synth)");
  }
  if (cfg.meta_spec.resolution == 0) cfg.meta_spec.resolution = data.side;
  if (cfg.meta_spec.resolution != data.side)
    throw ShapeError("meta.resolution " + std::to_string(cfg.meta_spec.resolution) +
                     " does not match dataset side " + std::to_string(data.side));
  if (cfg.meta_spec.siren.out_dim != data.channels)
    throw ShapeError("meta.out_dim " + std::to_string(cfg.meta_spec.siren.out_dim) +
                     " does not match dataset channels " + std::to_string(data.channels));
  return data;
}

Functaset load_set(const std::string& path) { return load_functaset(path); }

// float payload with norm/quant unwound, ready for decoding
Latent decode_ready_latent(const Functaset& set, Eigen::Index index) {
  const Functaset* src = &set;
  Functaset plain;
  if (set.quantized()) {
    plain = dequantize(set);
    src = &plain;
  }
  Latent z = src->latent(index);
  if (src->norm) z = denormalize(z, *src->norm);
  return z;
}

std::vector<MatXf> decode_all(const MetaState& state, const Functaset& set) {
  std::vector<MatXf> out;
  out.reserve(static_cast<std::size_t>(set.count()));
  for (Eigen::Index i = 0; i < set.count(); ++i)
    out.push_back(reconstruct(state, decode_ready_latent(set, i)));
  return out;
}

std::vector<Eigen::Index> shuffled_indices(Eigen::Index n, Rng& rng) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  for (Eigen::Index i = n - 1; i > 0; --i) {
    const auto j = static_cast<Eigen::Index>(rng.uniform_int(static_cast<uint64_t>(i) + 1));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  return idx;
}

}  // namespace

void cmd_meta_train(RunConfig cfg, std::string data_dir, int synth_count) {
  data_dir = pick(data_dir, cfg, "data");
  if (synth_count == 0 && cfg.invocation.count("synth"))
    synth_count = static_cast<int>(std::stoll(cfg.invocation.at("synth")));
  PngDataset data = resolve_dataset(cfg, data_dir, "", synth_count);
  cfg.meta_cfg.seed = cfg.seed;

  std::map<std::string, std::string> args;
  if (!data_dir.empty()) args["data"] = data_dir;
  if (synth_count > 0) args["synth"] = std::to_string(synth_count);
  const std::string out = prepare_out(cfg, "meta-train", args);

  std::ostringstream csv;
  csv << "iteration,loss,psnr\n";
  const MetaState state =
      meta_train(cfg.meta_spec, data.signals, cfg.meta_cfg, [&](const MetricsRow& row) {
        csv << row.iteration << "," << f32s(row.loss) << "," << f32s(row.psnr) << "\n";
        std::cout << "iter " << row.iteration << "  loss " << f32s(row.loss)
                  << "  psnr " << f32s(row.psnr) << "\n";
      });
  save_meta_state(state, out + "/meta.sfck");
  write_text(out + "/meta_metrics.csv", csv.str());
  std::cout << "saved " << out << "/meta.sfck after " << state.step << " steps\n";
}

void cmd_encode(RunConfig cfg, std::string state_path, std::string data_dir,
                std::string labels_csv, int synth_count) {
  state_path = require(pick(state_path, cfg, "state"), "--state checkpoint");
  data_dir = pick(data_dir, cfg, "data");
  labels_csv = pick(labels_csv, cfg, "labels");
  if (synth_count == 0 && cfg.invocation.count("synth"))
    synth_count = static_cast<int>(std::stoll(cfg.invocation.at("synth")));

  const MetaState state = load_meta_state(state_path);
  cfg.meta_spec.siren = state.siren;
  cfg.meta_spec.latent = state.latent_shape;
  cfg.meta_spec.interp = state.interp;
  cfg.meta_spec.coords = state.coords;
  cfg.meta_spec.resolution = state.resolution;
  cfg.meta_cfg.inner_steps = state.inner_steps;
  PngDataset data = resolve_dataset(cfg, data_dir, labels_csv, synth_count);

  std::map<std::string, std::string> args{{"state", state_path}};
  if (!data_dir.empty()) args["data"] = data_dir;
  if (!labels_csv.empty()) args["labels"] = labels_csv;
  if (synth_count > 0) args["synth"] = std::to_string(synth_count);
  const std::string out = prepare_out(cfg, "encode", args);

  Functaset set = build_functaset(state, data.signals,
                                  data.labels.empty() ? nullptr : &data.labels);
  std::ostringstream csv;
  csv << "index,name,psnr\n";
  for (Eigen::Index i = 0; i < set.count(); ++i)
    csv << i << "," << data.names[static_cast<std::size_t>(i)] << ","
        << f32s(set.fit_psnr[i]) << "\n";
  write_text(out + "/encode_psnr.csv", csv.str());

  if (cfg.encode_normalize) {
    const NormStats stats = compute_norm_stats(set, cfg.norm_kind, cfg.norm_gamma);
    set.latents = normalize_columns(set.latents, set.shape, stats);
    set.norm = stats;
  }
  save_functaset(set, out + "/functaset.sfta");
  const double mean_psnr = set.fit_psnr.cast<double>().mean();
  std::cout << "encoded " << set.count() << " signals, mean psnr "
            << f64s(mean_psnr) << "\n";
  std::cout << "saved " << out << "/functaset.sfta\n";
}

void cmd_decode(RunConfig cfg, std::string state_path, std::string set_path,
                int index, std::string png_path, int resolution) {
  state_path = require(pick(state_path, cfg, "state"), "--state checkpoint");
  set_path = require(pick(set_path, cfg, "set"), "--set functaset");
  const MetaState state = load_meta_state(state_path);
  const Functaset set = load_set(set_path);

  std::map<std::string, std::string> args{{"state", state_path},
                                          {"set", set_path},
                                          {"index", std::to_string(index)}};
  if (resolution > 0) args["resolution"] = std::to_string(resolution);
  const std::string out = prepare_out(cfg, "decode", args);
  if (png_path.empty()) png_path = out + "/decode_" + std::to_string(index) + ".png";

  const Latent z = decode_ready_latent(set, index);
  const int res = resolution > 0 ? resolution : state.resolution;
  const MatXf pixels = reconstruct_at(state, z, res);
  save_png(as_image(pixels, res), png_path);
  std::cout << "wrote " << png_path << "\n";
}

void cmd_psnr(RunConfig cfg, std::string a_path, std::string b_path) {
  a_path = require(pick(a_path, cfg, "a"), "--a image");
  b_path = require(pick(b_path, cfg, "b"), "--b image");
  const ImageData a = load_png(a_path);
  const ImageData b = load_png(b_path);
  if (a.width != b.width || a.height != b.height || a.channels != b.channels)
    throw ShapeError("images differ in size or channels");
  const std::string out =
      prepare_out(cfg, "psnr", {{"a", a_path}, {"b", b_path}});
  const double value = psnr(a.pixels, b.pixels);
  const std::string text = std::isinf(value) ? "inf" : f64s(value);
  std::cout << "psnr: " << text << "\n";
  write_text(out + "/psnr.txt", text + "\n");
}

void cmd_quantize(RunConfig cfg, std::string set_path) {
  set_path = require(pick(set_path, cfg, "set"), "--set functaset");
  const Functaset set = load_set(set_path);
  const std::string out = prepare_out(cfg, "quantize", {{"set", set_path}});
  const Functaset q = quantize(set, cfg.quant_bits);
  save_functaset(q, out + "/quantized.sfta");
  std::cout << "quantized " << q.count() << " latents to " << cfg.quant_bits
            << " bits\n";
  std::cout << "saved " << out << "/quantized.sfta\n";
}

void cmd_perturb(RunConfig cfg, std::string state_path, std::string set_path,
                 int index, bool spatial, bool rank) {
  state_path = require(pick(state_path, cfg, "state"), "--state checkpoint");
  set_path = require(pick(set_path, cfg, "set"), "--set functaset");
  const MetaState state = load_meta_state(state_path);
  const Functaset set = load_set(set_path);

  std::map<std::string, std::string> args{{"state", state_path},
                                          {"set", set_path},
                                          {"index", std::to_string(index)}};
  if (spatial) args["spatial"] = "true";
  if (rank) args["rank"] = "true";
  const std::string out = prepare_out(cfg, "perturb", args);

  const Latent z = decode_ready_latent(set, index);
  if (rank) {
    const auto ranked = rank_dims_by_mae(state, z, cfg.strengths.front());
    std::ostringstream csv;
    csv << "rank,dim,mae\n";
    for (std::size_t r = 0; r < ranked.size(); ++r)
      csv << r << "," << ranked[r].first << "," << f32s(ranked[r].second) << "\n";
    write_text(out + "/perturb_rank.csv", csv.str());
    std::cout << "wrote " << out << "/perturb_rank.csv (strength "
              << f32s(cfg.strengths.front()) << ")\n";
    return;
  }
  const PerturbReport report =
      spatial ? perturb_spatial(state, z, cfg.perturb_dim, cfg.strengths,
                                cfg.perturb_clamp)
              : perturb_vector(state, z, cfg.perturb_dim, cfg.strengths,
                               cfg.perturb_clamp);
  std::ostringstream csv;
  csv << "strength,mae,rmse\n";
  for (std::size_t i = 0; i < report.strengths.size(); ++i)
    csv << f32s(report.strengths[i]) << "," << f32s(report.mae[i]) << ","
        << f32s(report.rmse[i]) << "\n";
  write_text(out + "/perturb.csv", csv.str());
  std::cout << "wrote " << out << "/perturb.csv (dim " << report.dimension << ")\n";
}

void cmd_classify(RunConfig cfg, std::string set_path, std::string eval_path) {
  set_path = require(pick(set_path, cfg, "set"), "--set functaset");
  eval_path = pick(eval_path, cfg, "eval_set");
  const Functaset set = load_set(set_path);
  cfg.classify.seed = cfg.seed;

  std::map<std::string, std::string> args{{"set", set_path}};
  if (!eval_path.empty()) args["eval_set"] = eval_path;
  const std::string out = prepare_out(cfg, "classify", args);

  std::vector<Eigen::Index> train_idx, held_idx;
  if (cfg.classify_train_frac < 1.0f) {
    Rng rng = Rng(cfg.seed).derive(0x11f7);
    auto idx = shuffled_indices(set.count(), rng);
    const auto n_train = static_cast<std::size_t>(
        std::ceil(static_cast<double>(cfg.classify_train_frac) *
                  static_cast<double>(set.count())));
    train_idx.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    held_idx.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }

  std::ostringstream metrics;
  metrics << "step,loss\n";
  const Classifier clf =
      classify_train(set, cfg.classify, train_idx, [&](const ClassifyMetricsRow& row) {
        metrics << row.step << "," << f32s(row.loss) << "\n";
      });
  write_text(out + "/classify_metrics.csv", metrics.str());
  save_classifier(clf, out + "/classifier.sfcl");

  std::ostringstream acc;
  acc << "split,weights,accuracy\n";
  const auto report = [&](const char* split, const Functaset& eval_set,
                          const std::vector<Eigen::Index>& idx) {
    const double raw = classify_eval(clf, eval_set, false, idx);
    const double ema = classify_eval(clf, eval_set, true, idx);
    acc << split << ",raw," << f64s(raw) << "\n";
    acc << split << ",ema," << f64s(ema) << "\n";
    std::cout << split << " accuracy: raw " << f64s(raw) << ", ema " << f64s(ema)
              << "\n";
  };
  report("train", set, train_idx);
  if (!held_idx.empty()) report("holdout", set, held_idx);
  if (!eval_path.empty()) report("eval", load_set(eval_path), {});
  write_text(out + "/classify_accuracy.csv", acc.str());
  std::cout << "saved " << out << "/classifier.sfcl\n";
}

void cmd_diffuse_train(RunConfig cfg, std::string set_path) {
  set_path = require(pick(set_path, cfg, "set"), "--set functaset");
  const Functaset set = load_set(set_path);
  cfg.ddpm.seed = cfg.seed;

  const std::string out = prepare_out(cfg, "diffuse-train", {{"set", set_path}});

  DiffusionState state = ddpm_init(cfg.denoiser, cfg.schedule, cfg.timesteps,
                                   cfg.timestep_ratio, set.dims(), cfg.seed);
  std::ostringstream metrics;
  metrics << "step,loss\n";
  ddpm_train(state, set, cfg.ddpm, [&](const DdpmMetricsRow& row) {
    metrics << row.step << "," << f32s(row.loss) << "\n";
    std::cout << "step " << row.step << "  loss " << f32s(row.loss) << "\n";
  });
  write_text(out + "/diffuse_metrics.csv", metrics.str());
  save_diffusion_state(state, out + "/diffusion.sfdm");
  std::cout << "saved " << out << "/diffusion.sfdm after " << state.step
            << " steps\n";
}

void cmd_sample(RunConfig cfg, std::string model_path, std::string ref_path,
                std::string state_path, int label) {
  model_path = require(pick(model_path, cfg, "model"), "--model diffusion checkpoint");
  ref_path = pick(ref_path, cfg, "ref");
  state_path = pick(state_path, cfg, "state");

  const DiffusionState model = load_diffusion_state(model_path);
  std::map<std::string, std::string> args{{"model", model_path},
                                          {"label", std::to_string(label)}};
  if (!ref_path.empty()) args["ref"] = ref_path;
  if (!state_path.empty()) args["state"] = state_path;
  const std::string out = prepare_out(cfg, "sample", args);

  const MatXf samples =
      ddpm_sample(model, cfg.sample_count, label, cfg.guidance, cfg.seed);

  Functaset sample_set;
  std::optional<Functaset> ref;
  if (!ref_path.empty()) {
    ref = load_set(ref_path);
    if (ref->dims() != model.dims)
      throw ShapeError("reference set dims do not match the diffusion model");
    sample_set.shape = ref->shape;
    sample_set.interp = ref->interp;
    sample_set.resolution = ref->resolution;
  } else {
    sample_set.shape = LatentShape::vector(model.dims);
  }
  sample_set.latents = samples;
  sample_set.fit_psnr = VecXf::Constant(samples.cols(),
                                        std::numeric_limits<float>::quiet_NaN());
  save_functaset(sample_set, out + "/samples.sfta");
  std::cout << "saved " << samples.cols() << " samples to " << out
            << "/samples.sfta\n";

  if (ref) {
    std::optional<MetaState> decoder;
    if (!state_path.empty()) decoder = load_meta_state(state_path);
    const GenerationReport rep =
        evaluate_generation(samples, *ref, decoder ? &*decoder : nullptr);
    std::ostringstream txt;
    txt << "mean_abs_diff " << f64s(rep.mean_abs_diff) << "\n";
    txt << "mean_rmse " << f64s(rep.mean_rmse) << "\n";
    txt << "cov_trace_sample " << f64s(rep.cov_trace_sample) << "\n";
    txt << "cov_trace_reference " << f64s(rep.cov_trace_reference) << "\n";
    txt << "cov_trace_rel_err " << f64s(rep.cov_trace_rel_err) << "\n";
    txt << "cov_fro_rel_err " << f64s(rep.cov_fro_rel_err) << "\n";
    if (rep.audit) {
      txt << "unique_count " << rep.audit->unique_count << "\n";
      txt << "expected_unique " << f64s(rep.audit->expected_unique) << "\n";
      txt << "expected_std " << f64s(rep.audit->expected_std) << "\n";
      txt << "z_score " << f64s(rep.audit->z_score) << "\n";
    }
    write_text(out + "/generation_report.txt", txt.str());
    std::cout << "generation report: mean_abs_diff " << f64s(rep.mean_abs_diff)
              << ", cov_trace_rel_err " << f64s(rep.cov_trace_rel_err) << "\n";
  }
}

void cmd_audit(RunConfig cfg, std::string samples_path, std::string train_path,
               std::string state_path, long long n, long long k) {
  samples_path = pick(samples_path, cfg, "samples");
  train_path = pick(train_path, cfg, "train");
  state_path = pick(state_path, cfg, "state");

  if (samples_path.empty() && train_path.empty()) {
    // formula-only mode
    if (n < 1 || k < 0) throw ConfigError("formula mode needs --n >= 1 and --k >= 0");
    const std::string out = prepare_out(
        cfg, "audit", {{"n", std::to_string(n)}, {"k", std::to_string(k)}});
    const double expected = expected_unique_count(n, k);
    const double std_dev = expected_unique_std(n, k);
    std::ostringstream txt;
    txt << "n " << n << "\n"
        << "k " << k << "\n"
        << "expected_unique " << f64s(expected) << "\n"
        << "expected_std " << f64s(std_dev) << "\n";
    write_text(out + "/audit_summary.txt", txt.str());
    std::cout << "expected_unique " << f64s(expected) << ", expected_std "
              << f64s(std_dev) << "\n";
    return;
  }

  samples_path = require(samples_path, "--samples functaset");
  train_path = require(train_path, "--train functaset");
  state_path = require(state_path, "--state checkpoint");
  const MetaState state = load_meta_state(state_path);
  const Functaset samples = load_set(samples_path);
  const Functaset train = load_set(train_path);
  const std::string out = prepare_out(cfg, "audit",
                                      {{"samples", samples_path},
                                       {"train", train_path},
                                       {"state", state_path}});

  const MemorizationAudit audit =
      memorization_audit(decode_all(state, samples), decode_all(state, train));
  std::ostringstream csv;
  csv << "sample,nearest,distance\n";
  for (std::size_t i = 0; i < audit.nearest_id.size(); ++i)
    csv << i << "," << audit.nearest_id[i] << ","
        << f32s(audit.nearest_dist[static_cast<Eigen::Index>(i)]) << "\n";
  write_text(out + "/audit.csv", csv.str());
  std::ostringstream txt;
  txt << "unique_count " << audit.unique_count << "\n"
      << "expected_unique " << f64s(audit.expected_unique) << "\n"
      << "expected_std " << f64s(audit.expected_std) << "\n"
      << "z_score " << f64s(audit.z_score) << "\n";
  write_text(out + "/audit_summary.txt", txt.str());
  std::cout << "unique " << audit.unique_count << " of "
            << audit.nearest_id.size() << " (expected "
            << f64s(audit.expected_unique) << " +- " << f64s(audit.expected_std)
            << ", z " << f64s(audit.z_score) << ")\n";
}

}  // namespace functakit::cli
