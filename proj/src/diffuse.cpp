#include "functakit/diffuse.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "functakit/detail/denoiser_net.hpp"
#include "functakit/detail/serialize.hpp"
#include "functakit/eval.hpp"

namespace functakit {

namespace {

constexpr uint32_t kDiffusionMagic = 0x4d444653u;  // "SFDM"
constexpr uint32_t kDiffusionVersion = 1;
constexpr double kBetaClip = 0.999;

detail::DenoiserNet<float> make_net(const DenoiserConfig& cfg, int dims) {
  return {dims,          cfg.width,     cfg.blocks,
          cfg.time_dim,  cfg.class_dim, cfg.classes};
}

void adam_update(std::vector<MatXf>& params, const std::vector<MatXf>& grads,
                 std::vector<MatXf>& m, std::vector<MatXf>& v, int64_t step,
                 float lr) {
  const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
  const float bc1 = 1.0f - std::pow(b1, static_cast<float>(step));
  const float bc2 = 1.0f - std::pow(b2, static_cast<float>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = b1 * m[i] + (1.0f - b1) * grads[i];
    v[i] = b2 * v[i] + (1.0f - b2) * grads[i].cwiseProduct(grads[i]);
    params[i] -=
        lr * ((m[i] / bc1).array() / ((v[i] / bc2).array().sqrt() + eps)).matrix();
  }
}

void check_labels_in_range(const std::vector<int>& labels, int classes) {
  for (int l : labels)
    if (l < 0 || l >= classes)
      throw ValueError("ddpm: label " + std::to_string(l) + " out of range for " +
                       std::to_string(classes) + " classes");
}

}  // namespace

void DenoiserConfig::validate() const {
  if (width < 1) throw ConfigError("denoiser: width must be >= 1");
  if (blocks < 0) throw ConfigError("denoiser: blocks must be >= 0");
  if (time_dim < 2 || time_dim % 2 != 0)
    throw ConfigError("denoiser: time embedding dimension must be even and >= 2");
  if (class_dim < 1) throw ConfigError("denoiser: class embedding dimension must be >= 1");
  if (classes < 0) throw ConfigError("denoiser: classes must be >= 0");
  if (!(dropout >= 0.0f && dropout < 1.0f))
    throw ConfigError("denoiser: dropout must be in [0,1)");
}

void DdpmTrainConfig::validate() const {
  if (!(lr > 0.0f)) throw ConfigError("ddpm: learning rate must be positive");
  if (batch_size < 1) throw ConfigError("ddpm: batch size must be >= 1");
  if (steps < 0) throw ConfigError("ddpm: steps must be >= 0");
  if (!(dummy_prop >= 0.0f && dummy_prop <= 1.0f))
    throw ConfigError("ddpm: dummy proportion must be in [0,1]");
  if (log_every < 1) throw ConfigError("ddpm: log_every must be >= 1");
}

NoiseSchedule make_schedule(ScheduleKind kind, int T) {
  if (T < 1) throw ConfigError("schedule: T must be >= 1");
  NoiseSchedule s;
  s.kind = kind;
  s.T = T;
  s.beta.resize(T);
  if (kind == ScheduleKind::kLinear) {
    // the canonical 1e-4..0.02 range, rescaled to keep total corruption
    // comparable when T differs from 1000
    const double scale = 1000.0 / T;
    const double lo = scale * 1e-4, hi = scale * 0.02;
    for (int t = 0; t < T; ++t)
      s.beta[t] = T == 1 ? lo : lo + (hi - lo) * t / (T - 1);
  } else {
    const auto f = [](double u) {
      const double c = std::cos(((u + 0.008) / 1.008) * M_PI / 2.0);
      return c * c;
    };
    for (int t = 0; t < T; ++t)
      s.beta[t] = 1.0 - f(static_cast<double>(t + 1) / T) /
                            f(static_cast<double>(t) / T);
  }
  for (int t = 0; t < T; ++t) s.beta[t] = std::min(s.beta[t], kBetaClip);
  s.alpha = (1.0 - s.beta.array()).matrix();
  s.alpha_bar.resize(T + 1);
  s.alpha_bar[0] = 1.0;
  for (int t = 0; t < T; ++t) s.alpha_bar[t + 1] = s.alpha_bar[t] * s.alpha[t];
  return s;
}

MatXf q_sample(const MatXf& z0, int t, const MatXf& eps,
               const NoiseSchedule& schedule) {
  if (t < 0 || t > schedule.T) throw ValueError("q_sample: t out of range");
  check_shape(z0.rows() == eps.rows() && z0.cols() == eps.cols(),
              "q_sample: eps shape must match z0");
  const double ab = schedule.alpha_bar[t];
  return static_cast<float>(std::sqrt(ab)) * z0 +
         static_cast<float>(std::sqrt(1.0 - ab)) * eps;
}

TimestepDist make_timestep_dist(int T, double ratio) {
  if (T < 1) throw ConfigError("timestep dist: T must be >= 1");
  if (!(ratio >= 1.0)) throw ConfigError("timestep dist: ratio must be >= 1");
  TimestepDist d;
  d.T = T;
  d.ratio = ratio;
  VecXd w(T);
  for (int t = 0; t < T; ++t)
    w[t] = T == 1 ? 1.0 : ratio + (1.0 - ratio) * t / (T - 1);
  d.pdf = w / w.sum();
  d.cdf.resize(T);
  double acc = 0.0;
  for (int t = 0; t < T; ++t) {
    acc += d.pdf[t];
    d.cdf[t] = acc;
  }
  d.cdf[T - 1] = 1.0;  // guard the inverse-CDF draw against rounding
  return d;
}

int draw_timestep(const TimestepDist& dist, Rng& rng) {
  const double u = rng.uniform();
  const double* begin = dist.cdf.data();
  const double* it = std::upper_bound(begin, begin + dist.T, u);
  return static_cast<int>(std::min<std::ptrdiff_t>(it - begin, dist.T - 1));
}

std::vector<int> sample_timesteps(const TimestepDist& dist, int count,
                                  uint64_t seed) {
  if (count < 0) throw ConfigError("sample_timesteps: count must be >= 0");
  Rng rng(seed);
  std::vector<int> out(static_cast<std::size_t>(count));
  for (auto& t : out) t = draw_timestep(dist, rng);
  return out;
}

DiffusionState ddpm_init(const DenoiserConfig& cfg, ScheduleKind kind, int T,
                         double timestep_ratio, int dims, uint64_t seed) {
  cfg.validate();
  if (dims < 1) throw ConfigError("ddpm: latent dimensionality must be >= 1");
  DiffusionState state;
  state.cfg = cfg;
  state.schedule = make_schedule(kind, T);
  state.tdist = make_timestep_dist(T, timestep_ratio);
  state.dims = dims;
  Rng init_rng = Rng(seed).derive(0xdee5);
  state.params = make_net(cfg, dims).init(init_rng);
  state.adam_m = detail::zero_like(state.params);
  state.adam_v = detail::zero_like(state.params);
  state.step = 0;
  return state;
}

CorruptedBatch corrupt_batch(const MatXf& z0, const std::vector<int>& labels,
                             const NoiseSchedule& schedule,
                             const TimestepDist& dist, float dummy_prop,
                             int classes, Rng& rng) {
  if (!(dummy_prop >= 0.0f && dummy_prop <= 1.0f))
    throw ConfigError("ddpm: dummy proportion must be in [0,1]");
  const auto n = z0.cols();
  if (!labels.empty()) {
    check_shape(static_cast<Eigen::Index>(labels.size()) == n,
                "ddpm: one label per latent column");
    check_labels_in_range(labels, classes);
  }
  if (schedule.T != dist.T)
    throw ConfigError("ddpm: schedule and timestep distribution disagree on T");

  CorruptedBatch out;
  out.z_t.resize(z0.rows(), n);
  out.eps.resize(z0.rows(), n);
  out.t.resize(static_cast<std::size_t>(n));
  out.labels.resize(static_cast<std::size_t>(n));
  for (Eigen::Index b = 0; b < n; ++b) {
    const int t = draw_timestep(dist, rng);
    out.t[static_cast<std::size_t>(b)] = t;
    if (labels.empty())
      out.labels[static_cast<std::size_t>(b)] = classes;  // dummy
    else
      out.labels[static_cast<std::size_t>(b)] =
          rng.bernoulli(dummy_prop) ? classes : labels[static_cast<std::size_t>(b)];
    for (Eigen::Index d = 0; d < z0.rows(); ++d)
      out.eps(d, b) = static_cast<float>(rng.normal());
    // table index t corresponds to the (t+1)-step corruption
    const double ab = schedule.alpha_bar[t + 1];
    out.z_t.col(b) = static_cast<float>(std::sqrt(ab)) * z0.col(b) +
                     static_cast<float>(std::sqrt(1.0 - ab)) * out.eps.col(b);
  }
  return out;
}

NoisePredictor make_predictor(const DiffusionState& state) {
  const auto net = make_net(state.cfg, state.dims);
  return [net, params = state.params](const MatXf& z_t, const std::vector<int>& t,
                                      const std::vector<int>& labels) {
    return net.predict(params, z_t, t, labels);
  };
}

float ddpm_loss(const NoisePredictor& predict, const CorruptedBatch& batch) {
  const MatXf eps_hat = predict(batch.z_t, batch.t, batch.labels);
  check_shape(eps_hat.rows() == batch.eps.rows() && eps_hat.cols() == batch.eps.cols(),
              "ddpm: predictor output shape mismatch");
  if (batch.eps.size() == 0) throw ValueError("ddpm: empty batch");
  return (eps_hat - batch.eps).squaredNorm() / static_cast<float>(batch.eps.size());
}

float ddpm_train_step(DiffusionState& state, const MatXf& z0,
                      const std::vector<int>& labels, float lr, float dummy_prop,
                      Rng& rng) {
  if (!(lr > 0.0f)) throw ConfigError("ddpm: learning rate must be positive");
  check_shape(z0.rows() == state.dims, "ddpm: latent dimensionality mismatch");
  if (z0.cols() < 1) throw ValueError("ddpm: empty batch");

  const auto batch = corrupt_batch(z0, labels, state.schedule, state.tdist,
                                   dummy_prop, state.cfg.classes, rng);
  const auto net = make_net(state.cfg, state.dims);
  MatXf mask;
  const MatXf* drop = nullptr;
  if (state.cfg.dropout > 0.0f) {
    mask = detail::dropout_mask<float>(state.cfg.width, z0.cols(),
                                       state.cfg.dropout, rng);
    drop = &mask;
  }
  auto grads = detail::zero_like(state.params);
  const float loss = net.loss_and_grads(state.params, batch.z_t, batch.t,
                                        batch.labels, batch.eps, drop, grads);
  if (!std::isfinite(loss))
    throw DivergenceError("ddpm: non-finite loss at step " +
                          std::to_string(state.step));
  state.step += 1;
  adam_update(state.params, grads, state.adam_m, state.adam_v, state.step, lr);
  return loss;
}

void ddpm_train(DiffusionState& state, const Functaset& fs,
                const DdpmTrainConfig& cfg, const DdpmSink& sink) {
  cfg.validate();
  Functaset deq;
  const Functaset* src = &fs;
  if (fs.quantized()) {
    deq = dequantize(fs);
    src = &deq;
  }
  check_shape(src->dims() == state.dims, "ddpm: functaset latent dimensionality mismatch");
  const auto n = src->count();
  if (n < 1) throw ValueError("ddpm: empty functaset");

  const bool conditional = state.cfg.classes > 0;
  if (conditional && src->labels.empty())
    throw ValueError("ddpm: conditional model requires labels");
  if (conditional)
    for (uint16_t l : src->labels)
      if (l >= state.cfg.classes)
        throw ValueError("ddpm: label " + std::to_string(l) + " out of range for " +
                         std::to_string(state.cfg.classes) + " classes");

  const Rng root(cfg.seed);
  Rng batch_rng = root.derive(0xba7c);
  Rng step_rng = root.derive(0xc0de);
  for (int64_t it = 0; it < cfg.steps; ++it) {
    MatXf z0(state.dims, cfg.batch_size);
    std::vector<int> labels;
    if (conditional) labels.resize(static_cast<std::size_t>(cfg.batch_size));
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto pick = static_cast<Eigen::Index>(
          batch_rng.uniform_int(static_cast<uint64_t>(n)));
      z0.col(b) = src->latents.col(pick);
      if (conditional)
        labels[static_cast<std::size_t>(b)] =
            src->labels[static_cast<std::size_t>(pick)];
    }
    const float loss =
        ddpm_train_step(state, z0, labels, cfg.lr, cfg.dummy_prop, step_rng);
    if (sink && (it % cfg.log_every == 0 || it + 1 == cfg.steps))
      sink({state.step, loss});
  }
}

MatXf ddpm_sample_path(const NoisePredictor& predict,
                       const NoiseSchedule& schedule, MatXf z_init, int label,
                       int classes, double guidance, Rng& rng) {
  const auto n = z_init.cols();
  MatXf z = std::move(z_init);
  const std::vector<int> dummy(static_cast<std::size_t>(n), classes);
  std::vector<int> cond;
  if (label >= 0) {
    if (label >= classes) throw ValueError("ddpm: sample label out of range");
    cond.assign(static_cast<std::size_t>(n), label);
  }
  for (int t = schedule.T - 1; t >= 0; --t) {
    const std::vector<int> tv(static_cast<std::size_t>(n), t);
    MatXf eps_hat;
    if (label < 0 || guidance == 0.0) {
      eps_hat = predict(z, tv, dummy);  // g = 0 is exactly the dummy branch
    } else if (guidance == 1.0) {
      eps_hat = predict(z, tv, cond);  // g = 1 is exactly the conditional branch
    } else {
      const MatXf eps_u = predict(z, tv, dummy);
      const MatXf eps_c = predict(z, tv, cond);
      eps_hat = eps_u + static_cast<float>(guidance) * (eps_c - eps_u);
    }
    const double beta = schedule.beta[t];
    const double ab = schedule.alpha_bar[t + 1];
    const float k_eps = static_cast<float>(beta / std::sqrt(1.0 - ab));
    const float k_mean = static_cast<float>(1.0 / std::sqrt(schedule.alpha[t]));
    z = k_mean * (z - k_eps * eps_hat);
    if (t > 0) {
      const float sigma = static_cast<float>(std::sqrt(beta));
      for (Eigen::Index i = 0; i < z.size(); ++i)
        z.data()[i] += sigma * static_cast<float>(rng.normal());
    }
  }
  return z;
}

MatXf ddpm_sample(const DiffusionState& state, int count, int label,
                  double guidance, uint64_t seed) {
  if (count < 1) throw ConfigError("ddpm: sample count must be >= 1");
  Rng rng(seed);
  MatXf z(state.dims, count);
  for (Eigen::Index i = 0; i < z.size(); ++i)
    z.data()[i] = static_cast<float>(rng.normal());
  return ddpm_sample_path(make_predictor(state), state.schedule, std::move(z),
                          label, state.cfg.classes, guidance, rng);
}

GenerationReport evaluate_generation(const MatXf& samples, const Functaset& ref,
                                     const MetaState* decoder) {
  if (samples.cols() < 1) throw ValueError("evaluate_generation: no samples");
  if (ref.count() < 1) throw ValueError("evaluate_generation: empty reference set");
  Functaset deq;
  const Functaset* src = &ref;
  if (ref.quantized()) {
    deq = dequantize(ref);
    src = &deq;
  }
  check_shape(samples.rows() == src->dims(),
              "evaluate_generation: latent dimensionality mismatch");

  const auto moments = [](const MatXf& x) {
    const VecXd mu = x.cast<double>().rowwise().mean();
    const MatXd centered = x.cast<double>().colwise() - mu;
    const MatXd cov = centered * centered.transpose() / static_cast<double>(x.cols());
    return std::make_pair(mu, cov);
  };
  const auto [mu_s, cov_s] = moments(samples);
  const auto [mu_r, cov_r] = moments(src->latents);

  GenerationReport rep;
  rep.mean_diff = mu_s - mu_r;
  rep.mean_abs_diff = rep.mean_diff.cwiseAbs().mean();
  rep.mean_rmse = std::sqrt(rep.mean_diff.squaredNorm() /
                            static_cast<double>(rep.mean_diff.size()));
  rep.cov_trace_sample = cov_s.trace();
  rep.cov_trace_reference = cov_r.trace();
  rep.cov_trace_rel_err = std::abs(rep.cov_trace_sample - rep.cov_trace_reference) /
                          std::max(std::abs(rep.cov_trace_reference), 1e-12);
  rep.cov_fro_rel_err =
      (cov_s - cov_r).norm() / std::max(cov_r.norm(), 1e-12);

  if (decoder) {
    check_shape(decoder->latent_shape == src->shape,
                "evaluate_generation: decoder latent shape mismatch");
    MatXf s = samples, r = src->latents;
    if (src->norm) {
      s = denormalize_columns(s, src->shape, *src->norm);
      r = denormalize_columns(r, src->shape, *src->norm);
    }
    const auto decode_all = [&](const MatXf& lat) {
      std::vector<MatXf> imgs;
      imgs.reserve(static_cast<std::size_t>(lat.cols()));
      for (Eigen::Index i = 0; i < lat.cols(); ++i) {
        Latent z{src->shape,
                 Eigen::Map<const MatXf>(lat.col(i).data(), src->shape.c,
                                         src->shape.cells())};
        imgs.push_back(reconstruct(*decoder, z));
      }
      return imgs;
    };
    rep.audit = memorization_audit(decode_all(s), decode_all(r));
  }
  return rep;
}

void save_diffusion_state(const DiffusionState& state, const std::string& path) {
  state.cfg.validate();
  detail::atomic_write_file(path, [&](std::ostream& os) {
    detail::BinWriter w{os};
    w.u32(kDiffusionMagic);
    w.u32(kDiffusionVersion);
    w.u32(static_cast<uint32_t>(state.cfg.width));
    w.u32(static_cast<uint32_t>(state.cfg.blocks));
    w.u32(static_cast<uint32_t>(state.cfg.time_dim));
    w.u32(static_cast<uint32_t>(state.cfg.class_dim));
    w.u32(static_cast<uint32_t>(state.cfg.classes));
    w.f32(state.cfg.dropout);
    w.u8(static_cast<uint8_t>(state.schedule.kind));
    w.u32(static_cast<uint32_t>(state.schedule.T));
    w.f64(state.tdist.ratio);
    w.u32(static_cast<uint32_t>(state.dims));
    w.u64(state.params.size());
    for (const auto* group : {&state.params, &state.adam_m, &state.adam_v})
      for (const auto& t : *group) {
        w.u64(static_cast<uint64_t>(t.rows()));
        w.u64(static_cast<uint64_t>(t.cols()));
        w.mat(t);
      }
    w.i64(state.step);
  });
}

DiffusionState load_diffusion_state(const std::string& path) {
  auto is = detail::open_input(path);
  detail::BinReader r{is};
  if (r.u32() != kDiffusionMagic) throw BadMagicError(path + ": not a diffusion checkpoint");
  if (r.u32() != kDiffusionVersion) throw VersionError(path + ": unsupported diffusion version");
  DiffusionState state;
  state.cfg.width = static_cast<int>(r.u32());
  state.cfg.blocks = static_cast<int>(r.u32());
  state.cfg.time_dim = static_cast<int>(r.u32());
  state.cfg.class_dim = static_cast<int>(r.u32());
  state.cfg.classes = static_cast<int>(r.u32());
  state.cfg.dropout = r.f32();
  const uint8_t kind = r.u8();
  if (kind > 1) throw FormatError(path + ": unknown schedule kind");
  const int T = static_cast<int>(r.u32());
  const double ratio = r.f64();
  state.dims = static_cast<int>(r.u32());
  try {
    state.cfg.validate();
    state.schedule = make_schedule(static_cast<ScheduleKind>(kind), T);
    state.tdist = make_timestep_dist(T, ratio);
    if (state.dims < 1) throw ConfigError("ddpm: latent dimensionality must be >= 1");
  } catch (const ConfigError& e) {
    throw FormatError(path + ": " + e.what());
  }

  const auto expect = make_net(state.cfg, state.dims).shapes();
  if (r.u64() != expect.size())
    throw FormatError(path + ": tensor count does not match architecture");
  for (auto* group : {&state.params, &state.adam_m, &state.adam_v}) {
    group->reserve(expect.size());
    for (const auto& sh : expect) {
      const auto rows = static_cast<Eigen::Index>(r.u64());
      const auto cols = static_cast<Eigen::Index>(r.u64());
      if (rows != sh[0] || cols != sh[1])
        throw FormatError(path + ": tensor dimensions do not match architecture");
      MatXf t(rows, cols);
      r.mat(t);
      if (!all_finite(t)) throw FormatError(path + ": non-finite parameter value");
      group->push_back(std::move(t));
    }
  }
  state.step = r.i64();
  if (state.step < 0) throw FormatError(path + ": negative step counter");
  if (!r.at_eof()) throw FormatError(path + ": trailing bytes");
  return state;
}

}  // namespace functakit
