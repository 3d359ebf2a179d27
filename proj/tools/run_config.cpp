#include "run_config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace functakit::cli {
namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

[[noreturn]] void bad(const std::string& where, const std::string& what) {
  throw ConfigError("config: " + where + ": " + what);
}

long long to_int(const std::string& where, const std::string& v) {
  std::size_t used = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    bad(where, "expected an integer, got '" + v + "'");
  }
  if (used != v.size()) bad(where, "expected an integer, got '" + v + "'");
  return out;
}

uint64_t to_u64(const std::string& where, const std::string& v) {
  std::size_t used = 0;
  uint64_t out = 0;
  try {
    out = std::stoull(v, &used);
  } catch (const std::exception&) {
    bad(where, "expected an unsigned integer, got '" + v + "'");
  }
  if (used != v.size() || (!v.empty() && v[0] == '-'))
    bad(where, "expected an unsigned integer, got '" + v + "'");
  return out;
}

double to_float(const std::string& where, const std::string& v) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    bad(where, "expected a number, got '" + v + "'");
  }
  if (used != v.size()) bad(where, "expected a number, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& where, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  bad(where, "expected true or false, got '" + v + "'");
}

std::vector<float> to_float_list(const std::string& where, const std::string& v) {
  std::vector<float> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) bad(where, "empty element in list '" + v + "'");
    out.push_back(static_cast<float>(to_float(where, item)));
  }
  if (out.empty()) bad(where, "expected a comma-separated list, got '" + v + "'");
  return out;
}

std::string fmt_f32(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

std::string fmt_f64(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const char* word(MapKind k) {
  switch (k) {
    case MapKind::kDense: return "dense";
    case MapKind::kConv1x1: return "conv1x1";
    case MapKind::kConv3x3: return "conv3x3";
  }
  return "?";
}

const char* word(InterpScheme k) {
  switch (k) {
    case InterpScheme::kNone: return "none";
    case InterpScheme::kNearest: return "nearest";
    case InterpScheme::kBilinear: return "bilinear";
  }
  return "?";
}

const char* word(CoordScheme k) {
  switch (k) {
    case CoordScheme::kGlobalUnit: return "global_unit";
    case CoordScheme::kPerPatch: return "per_patch";
    case CoordScheme::kBinary: return "binary";
  }
  return "?";
}

const char* word(NormKind k) {
  switch (k) {
    case NormKind::kScalar: return "scalar";
    case NormKind::kVector: return "vector";
    case NormKind::kArray: return "array";
  }
  return "?";
}

}  // namespace

void RunConfig::set(const std::string& section, const std::string& key,
                    const std::string& value) {
  const std::string where = section.empty() ? key : section + "." + key;

  if (section.empty()) {
    if (key == "seed") { seed = to_u64(where, value); return; }
    if (key == "output_dir") { output_dir = value; return; }
    if (key == "threads") {
      threads = static_cast<int>(to_int(where, value));
      if (threads < 1) bad(where, "must be >= 1");
      return;
    }
    bad(where, "unknown key");
  }

  if (section == "meta") {
    auto& sp = meta_spec;
    auto& mc = meta_cfg;
    if (key == "width") { sp.siren.width = static_cast<int>(to_int(where, value)); return; }
    if (key == "depth") { sp.siren.depth = static_cast<int>(to_int(where, value)); return; }
    if (key == "out_dim") { sp.siren.out_dim = static_cast<int>(to_int(where, value)); return; }
    if (key == "omega0") { sp.siren.omega0 = static_cast<float>(to_float(where, value)); return; }
    if (key == "latent") {
      if (value == "vector") sp.latent.rank = 1;
      else if (value == "spatial") sp.latent.rank = 3;
      else bad(where, "expected vector or spatial, got '" + value + "'");
      if (sp.latent.rank == 1) sp.latent.s = 1;
      return;
    }
    if (key == "latent_s") { sp.latent.s = static_cast<int>(to_int(where, value)); return; }
    if (key == "latent_c") { sp.latent.c = static_cast<int>(to_int(where, value)); return; }
    if (key == "map") {
      if (value == "dense") sp.map_kind = MapKind::kDense;
      else if (value == "conv1x1") sp.map_kind = MapKind::kConv1x1;
      else if (value == "conv3x3") sp.map_kind = MapKind::kConv3x3;
      else bad(where, "expected dense, conv1x1 or conv3x3, got '" + value + "'");
      return;
    }
    if (key == "interp") {
      if (value == "none") sp.interp = InterpScheme::kNone;
      else if (value == "nearest") sp.interp = InterpScheme::kNearest;
      else if (value == "bilinear") sp.interp = InterpScheme::kBilinear;
      else bad(where, "expected none, nearest or bilinear, got '" + value + "'");
      return;
    }
    if (key == "coords") {
      if (value == "global_unit") sp.coords = CoordScheme::kGlobalUnit;
      else if (value == "per_patch") sp.coords = CoordScheme::kPerPatch;
      else if (value == "binary") sp.coords = CoordScheme::kBinary;
      else bad(where, "expected global_unit, per_patch or binary, got '" + value + "'");
      return;
    }
    if (key == "resolution") { sp.resolution = static_cast<int>(to_int(where, value)); return; }
    if (key == "inner_steps") { mc.inner_steps = static_cast<int>(to_int(where, value)); return; }
    if (key == "inner_lr_init") { mc.inner_lr_init = static_cast<float>(to_float(where, value)); return; }
    if (key == "outer_lr") { mc.outer_lr = static_cast<float>(to_float(where, value)); return; }
    if (key == "batch_size") { mc.batch_size = static_cast<int>(to_int(where, value)); return; }
    if (key == "iterations") { mc.iterations = to_int(where, value); return; }
    if (key == "first_order") { mc.first_order = to_bool(where, value); return; }
    if (key == "log_every") { mc.log_every = to_int(where, value); return; }
    bad(where, "unknown key");
  }

  if (section == "encode") {
    if (key == "normalize") { encode_normalize = to_bool(where, value); return; }
    bad(where, "unknown key");
  }

  if (section == "normalize") {
    if (key == "kind") {
      if (value == "scalar") norm_kind = NormKind::kScalar;
      else if (value == "vector") norm_kind = NormKind::kVector;
      else if (value == "array") norm_kind = NormKind::kArray;
      else bad(where, "expected scalar, vector or array, got '" + value + "'");
      return;
    }
    if (key == "gamma") { norm_gamma = static_cast<float>(to_float(where, value)); return; }
    bad(where, "unknown key");
  }

  if (section == "quantize") {
    if (key == "bits") { quant_bits = static_cast<int>(to_int(where, value)); return; }
    bad(where, "unknown key");
  }

  if (section == "classify") {
    auto& c = classify;
    if (key == "arch") {
      if (value == "mlp") c.arch = ClassifierArch::kResidualMlp;
      else if (value == "transformer") c.arch = ClassifierArch::kTokenTransformer;
      else bad(where, "expected mlp or transformer, got '" + value + "'");
      return;
    }
    if (key == "width") { c.width = static_cast<int>(to_int(where, value)); return; }
    if (key == "ffw_width") { c.ffw_width = static_cast<int>(to_int(where, value)); return; }
    if (key == "blocks") { c.blocks = static_cast<int>(to_int(where, value)); return; }
    if (key == "heads") { c.heads = static_cast<int>(to_int(where, value)); return; }
    if (key == "dropout") { c.dropout = static_cast<float>(to_float(where, value)); return; }
    if (key == "label_smoothing") { c.label_smoothing = static_cast<float>(to_float(where, value)); return; }
    if (key == "weight_decay") { c.weight_decay = static_cast<float>(to_float(where, value)); return; }
    if (key == "norm_scale") { c.norm_scale = static_cast<float>(to_float(where, value)); return; }
    if (key == "lr") { c.lr = static_cast<float>(to_float(where, value)); return; }
    if (key == "batch_size") { c.batch_size = static_cast<int>(to_int(where, value)); return; }
    if (key == "ema_decay") { c.ema_decay = static_cast<float>(to_float(where, value)); return; }
    if (key == "epochs") { c.epochs = static_cast<int>(to_int(where, value)); return; }
    if (key == "classes") { c.classes = static_cast<int>(to_int(where, value)); return; }
    if (key == "train_frac") {
      classify_train_frac = static_cast<float>(to_float(where, value));
      if (!(classify_train_frac > 0.0f && classify_train_frac <= 1.0f))
        bad(where, "must be in (0, 1]");
      return;
    }
    bad(where, "unknown key");
  }

  if (section == "diffuse") {
    if (key == "schedule") {
      if (value == "linear") schedule = ScheduleKind::kLinear;
      else if (value == "cosine") schedule = ScheduleKind::kCosine;
      else bad(where, "expected linear or cosine, got '" + value + "'");
      return;
    }
    if (key == "timesteps") { timesteps = static_cast<int>(to_int(where, value)); return; }
    if (key == "timestep_ratio") { timestep_ratio = to_float(where, value); return; }
    if (key == "width") { denoiser.width = static_cast<int>(to_int(where, value)); return; }
    if (key == "blocks") { denoiser.blocks = static_cast<int>(to_int(where, value)); return; }
    if (key == "time_dim") { denoiser.time_dim = static_cast<int>(to_int(where, value)); return; }
    if (key == "class_dim") { denoiser.class_dim = static_cast<int>(to_int(where, value)); return; }
    if (key == "classes") { denoiser.classes = static_cast<int>(to_int(where, value)); return; }
    if (key == "dropout") { denoiser.dropout = static_cast<float>(to_float(where, value)); return; }
    if (key == "lr") { ddpm.lr = static_cast<float>(to_float(where, value)); return; }
    if (key == "batch_size") { ddpm.batch_size = static_cast<int>(to_int(where, value)); return; }
    if (key == "train_steps") { ddpm.steps = to_int(where, value); return; }
    if (key == "dummy_prop") { ddpm.dummy_prop = static_cast<float>(to_float(where, value)); return; }
    if (key == "log_every") { ddpm.log_every = to_int(where, value); return; }
    if (key == "guidance") { guidance = to_float(where, value); return; }
    if (key == "sample_count") { sample_count = static_cast<int>(to_int(where, value)); return; }
    bad(where, "unknown key");
  }

  if (section == "eval") {
    if (key == "strengths") { strengths = to_float_list(where, value); return; }
    if (key == "dim") { perturb_dim = static_cast<int>(to_int(where, value)); return; }
    if (key == "clamp") { perturb_clamp = to_bool(where, value); return; }
    bad(where, "unknown key");
  }

  if (section == "invocation") {  // informational; replayed as flag defaults
    invocation[key] = value;
    return;
  }

  bad(section, "unknown section");
}

std::string RunConfig::render(
    const std::map<std::string, std::string>& extra) const {
  std::ostringstream os;
  os << "seed = " << seed << "\n";
  os << "output_dir = " << output_dir << "\n";
  os << "threads = " << threads << "\n";

  os << "\n[meta]\n";
  os << "width = " << meta_spec.siren.width << "\n";
  os << "depth = " << meta_spec.siren.depth << "\n";
  os << "out_dim = " << meta_spec.siren.out_dim << "\n";
  os << "omega0 = " << fmt_f32(meta_spec.siren.omega0) << "\n";
  os << "latent = " << (meta_spec.latent.rank == 1 ? "vector" : "spatial") << "\n";
  os << "latent_s = " << meta_spec.latent.s << "\n";
  os << "latent_c = " << meta_spec.latent.c << "\n";
  os << "map = " << word(meta_spec.map_kind) << "\n";
  os << "interp = " << word(meta_spec.interp) << "\n";
  os << "coords = " << word(meta_spec.coords) << "\n";
  os << "resolution = " << meta_spec.resolution << "\n";
  os << "inner_steps = " << meta_cfg.inner_steps << "\n";
  os << "inner_lr_init = " << fmt_f32(meta_cfg.inner_lr_init) << "\n";
  os << "outer_lr = " << fmt_f32(meta_cfg.outer_lr) << "\n";
  os << "batch_size = " << meta_cfg.batch_size << "\n";
  os << "iterations = " << meta_cfg.iterations << "\n";
  os << "first_order = " << (meta_cfg.first_order ? "true" : "false") << "\n";
  os << "log_every = " << meta_cfg.log_every << "\n";

  os << "\n[encode]\n";
  os << "normalize = " << (encode_normalize ? "true" : "false") << "\n";

  os << "\n[normalize]\n";
  os << "kind = " << word(norm_kind) << "\n";
  os << "gamma = " << fmt_f32(norm_gamma) << "\n";

  os << "\n[quantize]\n";
  os << "bits = " << quant_bits << "\n";

  os << "\n[classify]\n";
  os << "arch = " << (classify.arch == ClassifierArch::kResidualMlp ? "mlp" : "transformer") << "\n";
  os << "width = " << classify.width << "\n";
  os << "ffw_width = " << classify.ffw_width << "\n";
  os << "blocks = " << classify.blocks << "\n";
  os << "heads = " << classify.heads << "\n";
  os << "dropout = " << fmt_f32(classify.dropout) << "\n";
  os << "label_smoothing = " << fmt_f32(classify.label_smoothing) << "\n";
  os << "weight_decay = " << fmt_f32(classify.weight_decay) << "\n";
  os << "norm_scale = " << fmt_f32(classify.norm_scale) << "\n";
  os << "lr = " << fmt_f32(classify.lr) << "\n";
  os << "batch_size = " << classify.batch_size << "\n";
  os << "ema_decay = " << fmt_f32(classify.ema_decay) << "\n";
  os << "epochs = " << classify.epochs << "\n";
  os << "classes = " << classify.classes << "\n";
  os << "train_frac = " << fmt_f32(classify_train_frac) << "\n";

  os << "\n[diffuse]\n";
  os << "schedule = " << (schedule == ScheduleKind::kLinear ? "linear" : "cosine") << "\n";
  os << "timesteps = " << timesteps << "\n";
  os << "timestep_ratio = " << fmt_f64(timestep_ratio) << "\n";
  os << "width = " << denoiser.width << "\n";
  os << "blocks = " << denoiser.blocks << "\n";
  os << "time_dim = " << denoiser.time_dim << "\n";
  os << "class_dim = " << denoiser.class_dim << "\n";
  os << "classes = " << denoiser.classes << "\n";
  os << "dropout = " << fmt_f32(denoiser.dropout) << "\n";
  os << "lr = " << fmt_f32(ddpm.lr) << "\n";
  os << "batch_size = " << ddpm.batch_size << "\n";
  os << "train_steps = " << ddpm.steps << "\n";
  os << "dummy_prop = " << fmt_f32(ddpm.dummy_prop) << "\n";
  os << "log_every = " << ddpm.log_every << "\n";
  os << "guidance = " << fmt_f64(guidance) << "\n";
  os << "sample_count = " << sample_count << "\n";

  os << "\n[eval]\n";
  os << "strengths = ";
  for (std::size_t i = 0; i < strengths.size(); ++i)
    os << (i ? "," : "") << fmt_f32(strengths[i]);
  os << "\n";
  os << "dim = " << perturb_dim << "\n";
  os << "clamp = " << (perturb_clamp ? "true" : "false") << "\n";

  if (!invocation.empty() || !extra.empty()) {
    os << "\n[invocation]\n";
    std::map<std::string, std::string> merged = invocation;
    for (const auto& [k, v] : extra) merged[k] = v;
    for (const auto& [k, v] : merged) os << k << " = " << v << "\n";
  }
  return os.str();
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line, section;
  std::set<std::string> seen;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("config: line " + std::to_string(lineno) +
                          ": malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) +
                        ": expected key = value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config: line " + std::to_string(lineno) + ": empty key");
    const std::string full = section + "." + key;
    if (!seen.insert(full).second)
      throw ConfigError("config: duplicate key " +
                        (section.empty() ? key : full));
    cfg.set(section, key, value);
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str());
}

void apply_assignment(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("--set expects section.key=value, got '" + assignment + "'");
  const std::string full = trim(assignment.substr(0, eq));
  const std::string value = trim(assignment.substr(eq + 1));
  const auto dot = full.find('.');
  const std::string section = dot == std::string::npos ? "" : full.substr(0, dot);
  const std::string key = dot == std::string::npos ? full : full.substr(dot + 1);
  cfg.set(section, key, value);
}

}  // namespace functakit::cli
