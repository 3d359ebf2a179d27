#include "functakit/meta.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <utility>

#include "functakit/detail/meta_grad.hpp"
#include "functakit/detail/serialize.hpp"

namespace functakit {

namespace {

constexpr float kAdamBeta1 = 0.9f;
constexpr float kAdamBeta2 = 0.999f;
constexpr float kAdamEps = 1e-8f;

detail::PipelineAux<float> state_aux(const MetaState& st) {
  const auto grid = make_coord_grid(st.resolution, st.latent_shape.s, st.coords);
  return detail::make_pipeline_aux<float>(grid, st.interp);
}

void check_signal(const MetaState& st, const MatXf& signal) {
  check_shape(signal.rows() == st.siren.out_dim &&
                  signal.cols() ==
                      static_cast<Eigen::Index>(st.resolution) * st.resolution,
              "signal must be out_dim x resolution^2");
}

float psnr_from_mse(float mse) {
  if (mse <= 0) return std::numeric_limits<float>::infinity();
  return -10.0f * std::log10(mse);
}

Eigen::Index packed_size(const MetaState& st) {
  Eigen::Index n = 0;
  for (const auto& w : st.field_params.w) n += w.size();
  for (const auto& b : st.field_params.b) n += b.size();
  for (const auto& w : st.latent_map.w) n += w.size();
  n += st.latent_map.b.size();
  n += st.inner_lrs.size();
  return n;
}

void put(VecXf& out, Eigen::Index& off, const float* p, Eigen::Index n) {
  std::copy(p, p + n, out.data() + off);
  off += n;
}

void take(const VecXf& in, Eigen::Index& off, float* p, Eigen::Index n) {
  std::copy(in.data() + off, in.data() + off + n, p);
  off += n;
}

VecXf pack_state(const MetaState& st) {
  VecXf out(packed_size(st));
  Eigen::Index off = 0;
  for (const auto& w : st.field_params.w) put(out, off, w.data(), w.size());
  for (const auto& b : st.field_params.b) put(out, off, b.data(), b.size());
  for (const auto& w : st.latent_map.w) put(out, off, w.data(), w.size());
  put(out, off, st.latent_map.b.data(), st.latent_map.b.size());
  put(out, off, st.inner_lrs.data(), st.inner_lrs.size());
  return out;
}

void unpack_state(MetaState& st, const VecXf& in) {
  Eigen::Index off = 0;
  for (auto& w : st.field_params.w) take(in, off, w.data(), w.size());
  for (auto& b : st.field_params.b) take(in, off, b.data(), b.size());
  for (auto& w : st.latent_map.w) take(in, off, w.data(), w.size());
  take(in, off, st.latent_map.b.data(), st.latent_map.b.size());
  take(in, off, st.inner_lrs.data(), st.inner_lrs.size());
}

VecXf pack_grads(const detail::ExampleGrads<float>& g, const MetaState& st) {
  VecXf out(packed_size(st));
  Eigen::Index off = 0;
  for (const auto& w : g.g_w) put(out, off, w.data(), w.size());
  for (const auto& b : g.g_b) put(out, off, b.data(), b.size());
  for (const auto& w : g.g_map_w) put(out, off, w.data(), w.size());
  put(out, off, g.g_map_b.data(), g.g_map_b.size());
  put(out, off, g.g_lrs.data(), g.g_lrs.size());
  return out;
}

InnerFitResult inner_fit_aux(const MetaState& st,
                             const detail::PipelineAux<float>& aux,
                             const MatXf& signal) {
  using P = detail::PlainOps<float>;
  check_signal(st, signal);
  MatXf z = MatXf::Zero(st.latent_shape.c, st.latent_shape.cells());
  for (int k = 0; k < st.inner_steps; ++k) {
    auto r = detail::eval_pipeline<P>(st.field_params, st.siren, st.latent_map,
                                      z, aux, signal, detail::GradMode::kZ);
    if (!std::isfinite(r.loss) || !all_finite(r.grad_z))
      throw DivergenceError("inner fit diverged at step " + std::to_string(k));
    z -= st.inner_lrs.cwiseProduct(r.grad_z);
  }
  auto fin = detail::eval_pipeline<P>(st.field_params, st.siren, st.latent_map,
                                      z, aux, signal, detail::GradMode::kLossOnly);
  if (!std::isfinite(fin.loss) || !all_finite(z))
    throw DivergenceError("inner fit produced a non-finite latent");
  return {Latent{st.latent_shape, std::move(z)}, fin.loss};
}

}  // namespace

void MetaSpec::validate() const {
  siren.validate();
  latent.validate();
  if (resolution < 1) throw ConfigError("meta: resolution must be >= 1");
  if (latent.rank == 1) {
    if (map_kind != MapKind::kDense)
      throw ConfigError("meta: vector latents use the dense map");
    if (interp != InterpScheme::kNone)
      throw ConfigError("meta: vector latents use interpolation 'none'");
  } else {
    if (map_kind == MapKind::kDense)
      throw ConfigError("meta: spatial latents use a conv map");
    if (interp == InterpScheme::kNone)
      throw ConfigError("meta: spatial latents need nearest or bilinear interpolation");
  }
  if (coords == CoordScheme::kPerPatch && resolution % latent.s != 0)
    throw ConfigError("meta: per-patch coords need s to divide the resolution");
  coord_rep_dim(resolution, coords);  // throws for bad binary resolutions
}

MetaState meta_init(const MetaSpec& spec, const MetaConfig& cfg) {
  spec.validate();
  cfg.validate();
  MetaState st;
  st.siren = spec.siren;
  st.siren.in_dim = coord_rep_dim(spec.resolution, spec.coords);
  st.latent_shape = spec.latent;
  st.interp = spec.interp;
  st.coords = spec.coords;
  st.resolution = spec.resolution;
  st.inner_steps = cfg.inner_steps;
  Rng root(cfg.seed);
  st.field_params = siren_init(st.siren, root.derive(1).seed());
  st.latent_map = map_init(spec.map_kind, spec.latent.c, st.siren.mod_dim(),
                           root.derive(2).seed());
  st.inner_lrs =
      MatXf::Constant(spec.latent.c, spec.latent.cells(), cfg.inner_lr_init);
  st.adam_m = VecXf::Zero(packed_size(st));
  st.adam_v = VecXf::Zero(packed_size(st));
  return st;
}

InnerFitResult inner_fit(const MetaState& state, const MatXf& signal) {
  return inner_fit_aux(state, state_aux(state), signal);
}

OuterMetrics outer_step(MetaState& state, const std::vector<MatXf>& batch,
                        const MetaConfig& cfg) {
  cfg.validate();
  if (batch.empty()) throw ConfigError("outer_step: empty batch");
  const auto aux = state_aux(state);

  detail::ExampleGrads<float> acc;
  double loss_sum = 0, psnr_sum = 0;
  bool first = true;
  for (const auto& signal : batch) {
    check_signal(state, signal);
    auto eg = detail::unrolled_gradients<float>(
        state.field_params, state.siren, state.latent_map, state.inner_lrs,
        aux, signal, cfg.inner_steps, cfg.first_order);
    loss_sum += eg.loss;
    psnr_sum += psnr_from_mse(eg.loss);
    if (first) {
      acc = std::move(eg);
      first = false;
    } else {
      for (std::size_t l = 0; l < acc.g_w.size(); ++l) {
        acc.g_w[l] += eg.g_w[l];
        acc.g_b[l] += eg.g_b[l];
      }
      for (std::size_t t = 0; t < acc.g_map_w.size(); ++t)
        acc.g_map_w[t] += eg.g_map_w[t];
      acc.g_map_b += eg.g_map_b;
      acc.g_lrs += eg.g_lrs;
    }
  }
  const float inv = 1.0f / static_cast<float>(batch.size());
  VecXf grad = pack_grads(acc, state) * inv;
  const auto mean_loss = static_cast<float>(loss_sum / static_cast<double>(batch.size()));
  if (!all_finite(grad) || !std::isfinite(mean_loss))
    throw DivergenceError("outer gradients non-finite; state left unchanged");

  check_shape(state.adam_m.size() == grad.size() &&
                  state.adam_v.size() == grad.size(),
              "optimizer state size does not match parameters");
  state.step += 1;
  state.adam_m = kAdamBeta1 * state.adam_m + (1.0f - kAdamBeta1) * grad;
  state.adam_v =
      kAdamBeta2 * state.adam_v + (1.0f - kAdamBeta2) * grad.cwiseProduct(grad);
  const float bc1 = 1.0f - std::pow(kAdamBeta1, static_cast<float>(state.step));
  const float bc2 = 1.0f - std::pow(kAdamBeta2, static_cast<float>(state.step));
  VecXf update =
      (state.adam_m / bc1).array() /
      ((state.adam_v / bc2).array().sqrt() + kAdamEps);
  VecXf params = pack_state(state) - cfg.outer_lr * update;
  unpack_state(state, params);
  state.inner_lrs = state.inner_lrs.cwiseMax(0.0f);  // keep step sizes valid

  return {mean_loss, static_cast<float>(psnr_sum / static_cast<double>(batch.size()))};
}

MetaState meta_train(const MetaSpec& spec, const std::vector<MatXf>& dataset,
                     const MetaConfig& cfg, const MetricsSink& sink) {
  spec.validate();
  cfg.validate();
  if (dataset.empty()) throw ConfigError("meta_train: empty dataset");
  MetaState st = meta_init(spec, cfg);

  Rng order_rng = Rng(cfg.seed).derive(0x0bd1);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();  // reshuffle on first use
  auto next_index = [&] {
    if (cursor >= order.size()) {
      for (std::size_t i = order.size() - 1; i > 0; --i)
        std::swap(order[i], order[order_rng.uniform_int(i + 1)]);
      cursor = 0;
    }
    return order[cursor++];
  };

  const auto bsz = std::min<std::size_t>(
      static_cast<std::size_t>(cfg.batch_size), dataset.size());
  std::vector<MatXf> batch;
  for (int64_t it = 1; it <= cfg.iterations; ++it) {
    batch.clear();
    for (std::size_t b = 0; b < bsz; ++b) batch.push_back(dataset[next_index()]);
    const auto metrics = outer_step(st, batch, cfg);
    if (sink && cfg.log_every > 0 &&
        (it % cfg.log_every == 0 || it == cfg.iterations))
      sink({it, metrics.loss, metrics.psnr});
  }
  return st;
}

Functaset build_functaset(const MetaState& state,
                          const std::vector<MatXf>& dataset,
                          const std::vector<uint16_t>* labels) {
  if (labels && labels->size() != dataset.size())
    throw ValueError("labels count does not match dataset size");
  Functaset fs;
  fs.shape = state.latent_shape;
  fs.interp = state.interp;
  fs.resolution = state.resolution;
  const auto n = static_cast<Eigen::Index>(dataset.size());
  fs.latents.resize(state.latent_shape.dims(), n);
  fs.fit_psnr.resize(n);
  const auto aux = state_aux(state);
  for (Eigen::Index i = 0; i < n; ++i) {
    try {
      auto r = inner_fit_aux(state, aux, dataset[static_cast<std::size_t>(i)]);
      fs.latents.col(i) = Eigen::Map<const VecXf>(r.z.values.data(), fs.latents.rows());
      fs.fit_psnr[i] = psnr_from_mse(r.loss);
    } catch (const DivergenceError&) {
      fs.latents.col(i).setZero();
      fs.fit_psnr[i] = std::numeric_limits<float>::quiet_NaN();
    }
  }
  if (labels) fs.labels = *labels;
  return fs;
}

void save_meta_state(const MetaState& state, const std::string& path) {
  detail::atomic_write_file(path, [&](std::ostream& os) {
    detail::BinWriter wr{os};
    wr.bytes("SFCK", 4);
    wr.u32(1);
    wr.u32(static_cast<uint32_t>(state.siren.in_dim));
    wr.u32(static_cast<uint32_t>(state.siren.out_dim));
    wr.u32(static_cast<uint32_t>(state.siren.width));
    wr.u32(static_cast<uint32_t>(state.siren.depth));
    wr.f32(state.siren.omega0);
    wr.u8(static_cast<uint8_t>(state.latent_shape.rank));
    wr.u32(static_cast<uint32_t>(state.latent_shape.s));
    wr.u32(static_cast<uint32_t>(state.latent_shape.c));
    wr.u8(static_cast<uint8_t>(state.interp));
    wr.u8(static_cast<uint8_t>(state.coords));
    wr.u32(static_cast<uint32_t>(state.resolution));
    wr.u32(static_cast<uint32_t>(state.inner_steps));
    wr.u8(static_cast<uint8_t>(state.latent_map.kind));
    for (const auto& w : state.field_params.w) wr.mat(w);
    for (const auto& b : state.field_params.b) wr.mat(b);
    for (const auto& w : state.latent_map.w) wr.mat(w);
    wr.mat(state.latent_map.b);
    wr.mat(state.inner_lrs);
    wr.u64(static_cast<uint64_t>(state.adam_m.size()));
    wr.mat(state.adam_m);
    wr.mat(state.adam_v);
    wr.i64(state.step);
  });
}

MetaState load_meta_state(const std::string& path) {
  auto is = detail::open_input(path);
  detail::BinReader rd{is};
  char magic[4];
  rd.bytes(magic, 4);
  if (std::string(magic, 4) != "SFCK")
    throw BadMagicError("not a checkpoint file: " + path);
  const auto version = rd.u32();
  if (version != 1)
    throw VersionError("unsupported checkpoint version " + std::to_string(version));

  MetaState st;
  st.siren.in_dim = static_cast<int>(rd.u32());
  st.siren.out_dim = static_cast<int>(rd.u32());
  st.siren.width = static_cast<int>(rd.u32());
  st.siren.depth = static_cast<int>(rd.u32());
  st.siren.omega0 = rd.f32();
  st.siren.validate();
  st.latent_shape.rank = static_cast<int>(rd.u8());
  st.latent_shape.s = static_cast<int>(rd.u32());
  st.latent_shape.c = static_cast<int>(rd.u32());
  st.latent_shape.validate();
  st.interp = static_cast<InterpScheme>(rd.u8());
  st.coords = static_cast<CoordScheme>(rd.u8());
  st.resolution = static_cast<int>(rd.u32());
  st.inner_steps = static_cast<int>(rd.u32());
  const auto kind = static_cast<MapKind>(rd.u8());

  for (int i = 0; i < st.siren.depth; ++i) {
    const int fi = (i == 0) ? st.siren.in_dim : st.siren.width;
    const int fo = (i == st.siren.depth - 1) ? st.siren.out_dim : st.siren.width;
    MatXf w(fo, fi);
    rd.mat(w);
    st.field_params.w.push_back(std::move(w));
  }
  for (int i = 0; i < st.siren.depth; ++i) {
    const int fo = (i == st.siren.depth - 1) ? st.siren.out_dim : st.siren.width;
    VecXf b(fo);
    rd.mat(b);
    st.field_params.b.push_back(std::move(b));
  }
  st.latent_map.kind = kind;
  const int taps = kind == MapKind::kConv3x3 ? kConvTaps : 1;
  for (int t = 0; t < taps; ++t) {
    MatXf w(st.siren.mod_dim(), st.latent_shape.c);
    rd.mat(w);
    st.latent_map.w.push_back(std::move(w));
  }
  st.latent_map.b.resize(st.siren.mod_dim());
  rd.mat(st.latent_map.b);
  st.inner_lrs.resize(st.latent_shape.c, st.latent_shape.cells());
  rd.mat(st.inner_lrs);
  const auto adam_n = static_cast<Eigen::Index>(rd.u64());
  st.adam_m.resize(adam_n);
  rd.mat(st.adam_m);
  st.adam_v.resize(adam_n);
  rd.mat(st.adam_v);
  st.step = rd.i64();
  if (adam_n != packed_size(st))
    throw FormatError("checkpoint optimizer state size mismatch");
  return st;
}

}  // namespace functakit
