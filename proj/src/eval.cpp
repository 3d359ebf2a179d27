#include "functakit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "functakit/detail/graph.hpp"

namespace functakit {

namespace {

MatXf decode_at(const MetaState& st, const Latent& z, int resolution, bool clamp) {
  z.shape.validate();
  if (!(z.shape == st.latent_shape))
    throw ShapeError("latent shape does not match the decoder state");
  const auto grid = make_coord_grid(resolution, st.latent_shape.s, st.coords);
  if (grid.rep_dim() != st.siren.in_dim)
    throw ShapeError("coordinate representation width changed with resolution");
  const auto aux = detail::make_pipeline_aux<float>(grid, st.interp);
  MatXf y = detail::pipeline_forward<detail::PlainOps<float>>(
      st.field_params, st.siren, st.latent_map, z.values, aux);
  if (clamp) y = y.cwiseMax(0.0f).cwiseMin(1.0f);
  return y;
}

// per-pixel and per-tile difference statistics between two decodes
void diff_stats(const MatXf& base, const MatXf& pert, int resolution, int s,
                PerturbReport& report) {
  const MatXf diff = pert - base;
  const Eigen::Index npix = diff.cols();
  const auto ch = static_cast<float>(diff.rows());
  VecXf mae_map(npix), rmse_map(npix);
  for (Eigen::Index p = 0; p < npix; ++p) {
    mae_map[p] = diff.col(p).cwiseAbs().mean();
    rmse_map[p] = std::sqrt(diff.col(p).squaredNorm() / ch);
  }
  MatXf tile(s, s);
  const int tile_px = resolution / s;
  for (int ti = 0; ti < s; ++ti)
    for (int tj = 0; tj < s; ++tj) {
      double acc = 0;
      for (int r = ti * tile_px; r < (ti + 1) * tile_px; ++r)
        for (int c = tj * tile_px; c < (tj + 1) * tile_px; ++c)
          acc += diff.col(static_cast<Eigen::Index>(r) * resolution + c)
                     .cast<double>()
                     .squaredNorm();
      tile(ti, tj) = static_cast<float>(
          std::sqrt(acc / (static_cast<double>(tile_px) * tile_px * ch)));
    }
  report.mae.push_back(diff.cwiseAbs().mean());
  report.rmse.push_back(
      static_cast<float>(std::sqrt(diff.cast<double>().squaredNorm() /
                                   static_cast<double>(diff.size()))));
  report.mae_map.push_back(std::move(mae_map));
  report.rmse_map.push_back(std::move(rmse_map));
  report.tile_rmse.push_back(std::move(tile));
}

PerturbReport perturb_impl(const MetaState& st, const Latent& z,
                           std::vector<float> strengths, bool clamp, int dim,
                           bool spatial_channel) {
  if (strengths.empty()) throw ValueError("perturbation needs at least one strength");
  std::sort(strengths.begin(), strengths.end());
  PerturbReport report;
  report.dimension = dim;
  report.strengths = strengths;

  // tiles follow the latent grid only when s divides d; otherwise whole-image
  const int s = (st.latent_shape.s > 1 && st.resolution % st.latent_shape.s == 0)
                    ? st.latent_shape.s
                    : 1;
  const MatXf base = decode_at(st, z, st.resolution, clamp);
  for (const float strength : strengths) {
    Latent zp = z;
    if (spatial_channel) {
      zp.values.row(dim).array() += strength;
    } else {
      zp.values.data()[dim] += strength;
    }
    const MatXf pert = decode_at(st, zp, st.resolution, clamp);
    diff_stats(base, pert, st.resolution, s, report);
  }
  return report;
}

}  // namespace

MatXf reconstruct(const MetaState& state, const Latent& z) {
  return decode_at(state, z, state.resolution, true);
}

MatXf reconstruct_at(const MetaState& state, const Latent& z, int resolution) {
  return decode_at(state, z, resolution, true);
}

MatXf decode_unclamped(const MetaState& state, const Latent& z) {
  return decode_at(state, z, state.resolution, false);
}

MatXf decode_unclamped_at(const MetaState& state, const Latent& z, int resolution) {
  return decode_at(state, z, resolution, false);
}

double psnr_from_mse(double mse, double max_value) {
  if (!(max_value > 0)) throw ConfigError("psnr: max_value must be > 0");
  if (mse < 0) throw ValueError("psnr: negative MSE");
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(max_value / std::sqrt(mse));
}

double psnr(const MatXf& a, const MatXf& b, double max_value) {
  check_shape(a.rows() == b.rows() && a.cols() == b.cols(),
              "psnr: images must have identical shapes");
  if (a.size() == 0) throw ValueError("psnr: empty images");
  const double mse = (a - b).cast<double>().squaredNorm() /
                     static_cast<double>(a.size());
  return psnr_from_mse(mse, max_value);
}

PerturbReport perturb_vector(const MetaState& state, const Latent& z, int dim,
                             std::vector<float> strengths, bool clamp) {
  if (dim < 0 || dim >= state.latent_shape.dims())
    throw ValueError("perturb: latent dimension " + std::to_string(dim) +
                     " out of range");
  return perturb_impl(state, z, std::move(strengths), clamp, dim, false);
}

PerturbReport perturb_spatial(const MetaState& state, const Latent& z,
                              int feature_dim, std::vector<float> strengths,
                              bool clamp) {
  if (feature_dim < 0 || feature_dim >= state.latent_shape.c)
    throw ValueError("perturb: feature channel " + std::to_string(feature_dim) +
                     " out of range");
  return perturb_impl(state, z, std::move(strengths), clamp, feature_dim, true);
}

std::vector<std::pair<int, float>> rank_dims_by_mae(const MetaState& state,
                                                    const Latent& z,
                                                    float strength) {
  const int dims = state.latent_shape.dims();
  std::vector<std::pair<int, float>> out;
  out.reserve(static_cast<std::size_t>(dims));
  for (int dim = 0; dim < dims; ++dim) {
    const auto report = perturb_vector(state, z, dim, {strength});
    out.emplace_back(dim, report.mae.front());
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

double expected_unique_count(Eigen::Index n, Eigen::Index k) {
  if (n < 1 || k < 0) throw ValueError("expected_unique_count: need n >= 1, k >= 0");
  const double nd = static_cast<double>(n);
  return nd * (1.0 - std::pow(1.0 - 1.0 / nd, static_cast<double>(k)));
}

double expected_unique_std(Eigen::Index n, Eigen::Index k) {
  const double nd = static_cast<double>(n);
  const double p = 1.0 - std::pow(1.0 - 1.0 / nd, static_cast<double>(k));
  return std::sqrt(nd * p * (1.0 - p));
}

MemorizationAudit memorization_audit(const std::vector<MatXf>& samples,
                                     const std::vector<MatXf>& trainset) {
  if (samples.empty() || trainset.empty())
    throw ValueError("memorization audit needs non-empty sample and train sets");
  const auto rows = trainset.front().rows();
  const auto cols = trainset.front().cols();
  for (const auto& img : trainset)
    check_shape(img.rows() == rows && img.cols() == cols,
                "train images must share one shape");

  MemorizationAudit audit;
  audit.nearest_id.resize(samples.size());
  audit.nearest_dist.resize(static_cast<Eigen::Index>(samples.size()));
  std::vector<char> hit(trainset.size(), 0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    check_shape(samples[i].rows() == rows && samples[i].cols() == cols,
                "sample images must match the train shape");
    Eigen::Index best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < trainset.size(); ++j) {
      const double d2 =
          (samples[i] - trainset[j]).cast<double>().squaredNorm();
      if (d2 < best_d2) {
        best_d2 = d2;
        best = static_cast<Eigen::Index>(j);
      }
    }
    audit.nearest_id[i] = best;
    audit.nearest_dist[static_cast<Eigen::Index>(i)] =
        static_cast<float>(std::sqrt(best_d2));
    hit[static_cast<std::size_t>(best)] = 1;
  }
  audit.unique_count = std::count(hit.begin(), hit.end(), 1);
  const auto n = static_cast<Eigen::Index>(trainset.size());
  const auto k = static_cast<Eigen::Index>(samples.size());
  audit.expected_unique = expected_unique_count(n, k);
  audit.expected_std = expected_unique_std(n, k);
  audit.z_score = audit.expected_std > 0
                      ? (static_cast<double>(audit.unique_count) -
                         audit.expected_unique) /
                            audit.expected_std
                      : 0.0;
  return audit;
}

}  // namespace functakit
