#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "functakit/classify.hpp"
#include "functakit/diffuse.hpp"
#include "functakit/eval.hpp"
#include "functakit/functaset.hpp"
#include "functakit/image.hpp"
#include "functakit/meta.hpp"
#include "functakit/synth.hpp"

namespace py = pybind11;
using namespace functakit;

PYBIND11_MODULE(_core, m) {
  m.doc() = "spatial functa toolkit: meta-learned neural fields as data";

  // error taxonomy; base first so derived translators take precedence
  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<IoError>(m, "IoError", base);
  auto fmt = py::register_exception<FormatError>(m, "FormatError", base);
  py::register_exception<BadMagicError>(m, "BadMagicError", fmt);
  py::register_exception<VersionError>(m, "VersionError", fmt);
  py::register_exception<TruncatedError>(m, "TruncatedError", fmt);
  py::register_exception<ShapeError>(m, "ShapeError", base);
  py::register_exception<ValueError>(m, "ValueError", base);
  py::register_exception<DivergenceError>(m, "DivergenceError", base);

  // ---- field / latent geometry ----
  py::class_<SirenConfig>(m, "SirenConfig")
      .def(py::init<>())
      .def_readwrite("in_dim", &SirenConfig::in_dim)
      .def_readwrite("out_dim", &SirenConfig::out_dim)
      .def_readwrite("width", &SirenConfig::width)
      .def_readwrite("depth", &SirenConfig::depth)
      .def_readwrite("omega0", &SirenConfig::omega0)
      .def("mod_dim", &SirenConfig::mod_dim);

  py::class_<LatentShape>(m, "LatentShape")
      .def(py::init<>())
      .def_readwrite("rank", &LatentShape::rank)
      .def_readwrite("s", &LatentShape::s)
      .def_readwrite("c", &LatentShape::c)
      .def("cells", &LatentShape::cells)
      .def("dims", &LatentShape::dims)
      .def_static("vector", &LatentShape::vector, py::arg("d"))
      .def_static("spatial", &LatentShape::spatial, py::arg("s"), py::arg("c"))
      .def("__eq__", [](const LatentShape& a, const LatentShape& b) { return a == b; });

  py::class_<Latent>(m, "Latent")
      .def(py::init<>())
      .def_readwrite("shape", &Latent::shape)
      .def_readwrite("values", &Latent::values)
      .def_static("zeros", &Latent::zeros, py::arg("shape"));

  py::enum_<MapKind>(m, "MapKind")
      .value("DENSE", MapKind::kDense)
      .value("CONV1X1", MapKind::kConv1x1)
      .value("CONV3X3", MapKind::kConv3x3);

  py::enum_<InterpScheme>(m, "InterpScheme")
      .value("NEAREST", InterpScheme::kNearest)
      .value("BILINEAR", InterpScheme::kBilinear)
      .value("NONE", InterpScheme::kNone);

  py::enum_<CoordScheme>(m, "CoordScheme")
      .value("GLOBAL_UNIT", CoordScheme::kGlobalUnit)
      .value("PER_PATCH", CoordScheme::kPerPatch)
      .value("BINARY", CoordScheme::kBinary);

  // ---- meta-learning ----
  py::class_<MetaConfig>(m, "MetaConfig")
      .def(py::init<>())
      .def_readwrite("inner_steps", &MetaConfig::inner_steps)
      .def_readwrite("inner_lr_init", &MetaConfig::inner_lr_init)
      .def_readwrite("outer_lr", &MetaConfig::outer_lr)
      .def_readwrite("batch_size", &MetaConfig::batch_size)
      .def_readwrite("iterations", &MetaConfig::iterations)
      .def_readwrite("first_order", &MetaConfig::first_order)
      .def_readwrite("seed", &MetaConfig::seed)
      .def_readwrite("log_every", &MetaConfig::log_every);

  py::class_<MetaSpec>(m, "MetaSpec")
      .def(py::init<>())
      .def_readwrite("siren", &MetaSpec::siren)
      .def_readwrite("latent", &MetaSpec::latent)
      .def_readwrite("map_kind", &MetaSpec::map_kind)
      .def_readwrite("interp", &MetaSpec::interp)
      .def_readwrite("coords", &MetaSpec::coords)
      .def_readwrite("resolution", &MetaSpec::resolution);

  py::class_<MetaState>(m, "MetaState")
      .def_readonly("siren", &MetaState::siren)
      .def_readonly("latent_shape", &MetaState::latent_shape)
      .def_readonly("interp", &MetaState::interp)
      .def_readonly("coords", &MetaState::coords)
      .def_readonly("resolution", &MetaState::resolution)
      .def_readonly("inner_steps", &MetaState::inner_steps)
      .def_readonly("inner_lrs", &MetaState::inner_lrs)
      .def_readonly("step", &MetaState::step);

  py::class_<InnerFitResult>(m, "InnerFitResult")
      .def_readonly("z", &InnerFitResult::z)
      .def_readonly("loss", &InnerFitResult::loss);

  py::class_<OuterMetrics>(m, "OuterMetrics")
      .def_readonly("loss", &OuterMetrics::loss)
      .def_readonly("psnr", &OuterMetrics::psnr);

  py::class_<MetricsRow>(m, "MetricsRow")
      .def_readonly("iteration", &MetricsRow::iteration)
      .def_readonly("loss", &MetricsRow::loss)
      .def_readonly("psnr", &MetricsRow::psnr);

  m.def("meta_init", &meta_init, py::arg("spec"), py::arg("cfg"));
  m.def("inner_fit", &inner_fit, py::arg("state"), py::arg("signal"));
  m.def("outer_step", &outer_step, py::arg("state"), py::arg("batch"), py::arg("cfg"));
  m.def("meta_train", &meta_train, py::arg("spec"), py::arg("dataset"),
        py::arg("cfg"), py::arg("sink") = MetricsSink{});
  m.def(
      "build_functaset",
      [](const MetaState& state, const std::vector<MatXf>& dataset,
         const std::optional<std::vector<uint16_t>>& labels) {
        return build_functaset(state, dataset, labels ? &*labels : nullptr);
      },
      py::arg("state"), py::arg("dataset"), py::arg("labels") = py::none());
  m.def("save_meta_state", &save_meta_state, py::arg("state"), py::arg("path"));
  m.def("load_meta_state", &load_meta_state, py::arg("path"));

  // ---- functasets ----
  py::enum_<NormKind>(m, "NormKind")
      .value("SCALAR", NormKind::kScalar)
      .value("VECTOR", NormKind::kVector)
      .value("ARRAY", NormKind::kArray);

  py::class_<NormStats>(m, "NormStats")
      .def(py::init<>())
      .def_readwrite("kind", &NormStats::kind)
      .def_readwrite("gamma", &NormStats::gamma)
      .def_readwrite("mu", &NormStats::mu)
      .def_readwrite("sigma", &NormStats::sigma);

  py::class_<QuantSpec>(m, "QuantSpec")
      .def(py::init<>())
      .def_readwrite("bits", &QuantSpec::bits)
      .def_readwrite("qmin", &QuantSpec::qmin)
      .def_readwrite("qmax", &QuantSpec::qmax);

  py::class_<Functaset>(m, "Functaset")
      .def(py::init<>())
      .def_readwrite("shape", &Functaset::shape)
      .def_readwrite("interp", &Functaset::interp)
      .def_readwrite("resolution", &Functaset::resolution)
      .def_readwrite("latents", &Functaset::latents)
      .def_readwrite("codes", &Functaset::codes)
      .def_readwrite("labels", &Functaset::labels)
      .def_readwrite("norm", &Functaset::norm)
      .def_readwrite("quant", &Functaset::quant)
      .def_readwrite("fit_psnr", &Functaset::fit_psnr)
      .def("quantized", &Functaset::quantized)
      .def("count", &Functaset::count)
      .def("dims", &Functaset::dims)
      .def("latent", &Functaset::latent, py::arg("i"))
      .def("set_latent", &Functaset::set_latent, py::arg("i"), py::arg("z"))
      .def("validate", &Functaset::validate);

  m.def("compute_norm_stats", &compute_norm_stats, py::arg("fs"), py::arg("kind"),
        py::arg("gamma") = 1.0f);
  m.def("normalize", &normalize, py::arg("z"), py::arg("stats"));
  m.def("denormalize", &denormalize, py::arg("z"), py::arg("stats"));
  m.def("normalize_columns", &normalize_columns, py::arg("latents"),
        py::arg("shape"), py::arg("stats"));
  m.def("denormalize_columns", &denormalize_columns, py::arg("latents"),
        py::arg("shape"), py::arg("stats"));
  m.def("quantize", &quantize, py::arg("fs"), py::arg("bits"));
  m.def("dequantize", &dequantize, py::arg("fs"));
  m.def("save_functaset", &save_functaset, py::arg("fs"), py::arg("path"));
  m.def("load_functaset", &load_functaset, py::arg("path"));

  // ---- evaluation ----
  m.def("reconstruct", &reconstruct, py::arg("state"), py::arg("z"));
  m.def("reconstruct_at", &reconstruct_at, py::arg("state"), py::arg("z"),
        py::arg("resolution"));
  m.def("decode_unclamped", &decode_unclamped, py::arg("state"), py::arg("z"));
  m.def("psnr", &psnr, py::arg("a"), py::arg("b"), py::arg("max_value") = 1.0);

  py::class_<PerturbReport>(m, "PerturbReport")
      .def_readonly("dimension", &PerturbReport::dimension)
      .def_readonly("strengths", &PerturbReport::strengths)
      .def_readonly("mae_map", &PerturbReport::mae_map)
      .def_readonly("rmse_map", &PerturbReport::rmse_map)
      .def_readonly("tile_rmse", &PerturbReport::tile_rmse)
      .def_readonly("mae", &PerturbReport::mae)
      .def_readonly("rmse", &PerturbReport::rmse);

  m.def("perturb_vector", &perturb_vector, py::arg("state"), py::arg("z"),
        py::arg("dim"), py::arg("strengths"), py::arg("clamp") = true);
  m.def("perturb_spatial", &perturb_spatial, py::arg("state"), py::arg("z"),
        py::arg("feature_dim"), py::arg("strengths"), py::arg("clamp") = true);
  m.def("rank_dims_by_mae", &rank_dims_by_mae, py::arg("state"), py::arg("z"),
        py::arg("strength"));

  py::class_<MemorizationAudit>(m, "MemorizationAudit")
      .def_readonly("nearest_id", &MemorizationAudit::nearest_id)
      .def_readonly("nearest_dist", &MemorizationAudit::nearest_dist)
      .def_readonly("unique_count", &MemorizationAudit::unique_count)
      .def_readonly("expected_unique", &MemorizationAudit::expected_unique)
      .def_readonly("expected_std", &MemorizationAudit::expected_std)
      .def_readonly("z_score", &MemorizationAudit::z_score);

  m.def("expected_unique_count", &expected_unique_count, py::arg("n"), py::arg("k"));
  m.def("expected_unique_std", &expected_unique_std, py::arg("n"), py::arg("k"));
  m.def("memorization_audit", &memorization_audit, py::arg("samples"),
        py::arg("trainset"));

  // ---- classification ----
  py::enum_<ClassifierArch>(m, "ClassifierArch")
      .value("RESIDUAL_MLP", ClassifierArch::kResidualMlp)
      .value("TOKEN_TRANSFORMER", ClassifierArch::kTokenTransformer);

  py::class_<ClassifierConfig>(m, "ClassifierConfig")
      .def(py::init<>())
      .def_readwrite("arch", &ClassifierConfig::arch)
      .def_readwrite("width", &ClassifierConfig::width)
      .def_readwrite("ffw_width", &ClassifierConfig::ffw_width)
      .def_readwrite("blocks", &ClassifierConfig::blocks)
      .def_readwrite("heads", &ClassifierConfig::heads)
      .def_readwrite("dropout", &ClassifierConfig::dropout)
      .def_readwrite("label_smoothing", &ClassifierConfig::label_smoothing)
      .def_readwrite("weight_decay", &ClassifierConfig::weight_decay)
      .def_readwrite("norm_scale", &ClassifierConfig::norm_scale)
      .def_readwrite("lr", &ClassifierConfig::lr)
      .def_readwrite("batch_size", &ClassifierConfig::batch_size)
      .def_readwrite("ema_decay", &ClassifierConfig::ema_decay)
      .def_readwrite("epochs", &ClassifierConfig::epochs)
      .def_readwrite("classes", &ClassifierConfig::classes)
      .def_readwrite("seed", &ClassifierConfig::seed);

  py::class_<Classifier>(m, "Classifier")
      .def_readonly("cfg", &Classifier::cfg)
      .def_readonly("shape", &Classifier::shape)
      .def_readonly("params", &Classifier::params)
      .def_readonly("ema", &Classifier::ema);

  py::class_<ClassifyMetricsRow>(m, "ClassifyMetricsRow")
      .def_readonly("step", &ClassifyMetricsRow::step)
      .def_readonly("loss", &ClassifyMetricsRow::loss);

  m.def("smooth_labels",
        py::overload_cast<int, double, int>(&smooth_labels),
        py::arg("true_class"), py::arg("l"), py::arg("n"));
  m.def("tokenize", &tokenize, py::arg("z"), py::arg("norm_scale") = 1.0f);
  m.def("classify_train", &classify_train, py::arg("fs"), py::arg("cfg"),
        py::arg("train_indices") = std::vector<Eigen::Index>{},
        py::arg("sink") = ClassifySink{});
  m.def("classify_eval", &classify_eval, py::arg("clf"), py::arg("fs"),
        py::arg("use_ema") = false,
        py::arg("indices") = std::vector<Eigen::Index>{});
  m.def("classify_logits", &classify_logits, py::arg("clf"), py::arg("fs"),
        py::arg("use_ema") = false,
        py::arg("indices") = std::vector<Eigen::Index>{});
  m.def("save_classifier", &save_classifier, py::arg("clf"), py::arg("path"));
  m.def("load_classifier", &load_classifier, py::arg("path"));

  // ---- diffusion ----
  py::enum_<ScheduleKind>(m, "ScheduleKind")
      .value("LINEAR", ScheduleKind::kLinear)
      .value("COSINE", ScheduleKind::kCosine);

  py::class_<NoiseSchedule>(m, "NoiseSchedule")
      .def_readonly("kind", &NoiseSchedule::kind)
      .def_readonly("T", &NoiseSchedule::T)
      .def_readonly("beta", &NoiseSchedule::beta)
      .def_readonly("alpha", &NoiseSchedule::alpha)
      .def_readonly("alpha_bar", &NoiseSchedule::alpha_bar);

  m.def("make_schedule", &make_schedule, py::arg("kind"), py::arg("T"));
  m.def("q_sample", &q_sample, py::arg("z0"), py::arg("t"), py::arg("eps"),
        py::arg("schedule"));

  py::class_<DenoiserConfig>(m, "DenoiserConfig")
      .def(py::init<>())
      .def_readwrite("width", &DenoiserConfig::width)
      .def_readwrite("blocks", &DenoiserConfig::blocks)
      .def_readwrite("time_dim", &DenoiserConfig::time_dim)
      .def_readwrite("class_dim", &DenoiserConfig::class_dim)
      .def_readwrite("classes", &DenoiserConfig::classes)
      .def_readwrite("dropout", &DenoiserConfig::dropout);

  py::class_<DiffusionState>(m, "DiffusionState")
      .def_readonly("cfg", &DiffusionState::cfg)
      .def_readonly("schedule", &DiffusionState::schedule)
      .def_readonly("dims", &DiffusionState::dims)
      .def_readonly("step", &DiffusionState::step);

  py::class_<DdpmTrainConfig>(m, "DdpmTrainConfig")
      .def(py::init<>())
      .def_readwrite("lr", &DdpmTrainConfig::lr)
      .def_readwrite("batch_size", &DdpmTrainConfig::batch_size)
      .def_readwrite("steps", &DdpmTrainConfig::steps)
      .def_readwrite("dummy_prop", &DdpmTrainConfig::dummy_prop)
      .def_readwrite("seed", &DdpmTrainConfig::seed)
      .def_readwrite("log_every", &DdpmTrainConfig::log_every);

  py::class_<DdpmMetricsRow>(m, "DdpmMetricsRow")
      .def_readonly("step", &DdpmMetricsRow::step)
      .def_readonly("loss", &DdpmMetricsRow::loss);

  py::class_<GenerationReport>(m, "GenerationReport")
      .def_readonly("mean_diff", &GenerationReport::mean_diff)
      .def_readonly("mean_abs_diff", &GenerationReport::mean_abs_diff)
      .def_readonly("mean_rmse", &GenerationReport::mean_rmse)
      .def_readonly("cov_trace_sample", &GenerationReport::cov_trace_sample)
      .def_readonly("cov_trace_reference", &GenerationReport::cov_trace_reference)
      .def_readonly("cov_trace_rel_err", &GenerationReport::cov_trace_rel_err)
      .def_readonly("cov_fro_rel_err", &GenerationReport::cov_fro_rel_err)
      .def_readonly("audit", &GenerationReport::audit);

  m.def("ddpm_init", &ddpm_init, py::arg("cfg"), py::arg("kind"), py::arg("T"),
        py::arg("timestep_ratio"), py::arg("dims"), py::arg("seed"));
  m.def("ddpm_train", &ddpm_train, py::arg("state"), py::arg("fs"),
        py::arg("cfg"), py::arg("sink") = DdpmSink{});
  m.def("ddpm_sample", &ddpm_sample, py::arg("state"), py::arg("count"),
        py::arg("label") = -1, py::arg("guidance") = 0.0, py::arg("seed") = 0);
  m.def(
      "evaluate_generation",
      [](const MatXf& samples, const Functaset& ref, const MetaState* decoder) {
        return evaluate_generation(samples, ref, decoder);
      },
      py::arg("samples"), py::arg("ref"), py::arg("decoder") = nullptr);
  m.def("save_diffusion_state", &save_diffusion_state, py::arg("state"),
        py::arg("path"));
  m.def("load_diffusion_state", &load_diffusion_state, py::arg("path"));

  // ---- images and synthetic data ----
  py::class_<ImageData>(m, "ImageData")
      .def(py::init<>())
      .def_readwrite("width", &ImageData::width)
      .def_readwrite("height", &ImageData::height)
      .def_readwrite("channels", &ImageData::channels)
      .def_readwrite("pixels", &ImageData::pixels);

  m.def("load_png", &load_png, py::arg("path"));
  m.def("save_png", &save_png, py::arg("img"), py::arg("path"));
  m.def("as_image", &as_image, py::arg("decoded"), py::arg("side"));
  m.def("synth_image", &synth_image, py::arg("side"), py::arg("channels"),
        py::arg("seed"));
  m.def("synth_dataset", &synth_dataset, py::arg("side"), py::arg("channels"),
        py::arg("count"), py::arg("seed"));
}
