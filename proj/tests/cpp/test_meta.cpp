#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <vector>

#include "doctest.h"
#include "fd.hpp"
#include "functakit/detail/meta_grad.hpp"
#include "functakit/meta.hpp"

using namespace functakit;

namespace {

namespace fs = std::filesystem;

fs::path test_dir() {
  const auto p = fs::temp_directory_path() / "functakit_meta_tests";
  fs::create_directories(p);
  return p;
}

template <class M>
bool same_bits(const M& a, const M& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(),
                     sizeof(typename M::Scalar) * static_cast<std::size_t>(a.size())) == 0;
}

// everything one miniature meta-learning problem needs, in double
struct Tiny {
  SirenConfig siren;
  LatentShape shape;
  FieldParamsT<double> f;
  MapParamsT<double> map;
  MatXd lrs;
  detail::PipelineAux<double> aux;
  MatXd target;
};

Tiny make_tiny(bool spatial, MapKind kind, InterpScheme interp,
               CoordScheme coords, int s, int c, int res, int out_dim,
               uint64_t seed) {
  Tiny t;
  t.siren.in_dim = coord_rep_dim(res, coords);
  t.siren.out_dim = out_dim;
  t.siren.width = 4;
  t.siren.depth = 3;
  t.shape = spatial ? LatentShape::spatial(s, c) : LatentShape::vector(c);
  t.f = siren_init(t.siren, seed).cast<double>();
  t.map = map_init(kind, t.shape.c, t.siren.mod_dim(), seed + 1).cast<double>();
  Rng rng(seed + 2);
  t.lrs.resize(t.shape.c, t.shape.cells());
  for (Eigen::Index i = 0; i < t.lrs.size(); ++i)
    t.lrs.data()[i] = rng.uniform(0.01, 0.08);
  const auto grid = make_coord_grid(res, t.shape.s, coords);
  t.aux = detail::make_pipeline_aux<double>(grid, interp);
  t.target.resize(out_dim, static_cast<Eigen::Index>(res) * res);
  for (Eigen::Index i = 0; i < t.target.size(); ++i)
    t.target.data()[i] = rng.uniform(0.0, 1.0);
  return t;
}

// straight replay of the K-step latent fit; this is the loss the outer
// gradients differentiate
double replay_loss(const Tiny& t, int steps) {
  using P = detail::PlainOps<double>;
  MatXd z = MatXd::Zero(t.lrs.rows(), t.lrs.cols());
  for (int k = 0; k < steps; ++k) {
    auto r = detail::eval_pipeline<P>(t.f, t.siren, t.map, z, t.aux, t.target,
                                      detail::GradMode::kZ);
    z -= t.lrs.cwiseProduct(r.grad_z);
  }
  return detail::eval_pipeline<P>(t.f, t.siren, t.map, z, t.aux, t.target,
                                  detail::GradMode::kLossOnly)
      .loss;
}

void check_fd(Tiny& t, int steps, double tol = 1e-3) {
  const auto eg = detail::unrolled_gradients<double>(
      t.f, t.siren, t.map, t.lrs, t.aux, t.target, steps, false);
  CHECK(eg.loss == doctest::Approx(replay_loss(t, steps)).epsilon(1e-12));

  auto probe = [&](double* x, double analytic) {
    const double fd = fd::central([&] { return replay_loss(t, steps); }, x);
    CHECK(fd::rel_err(analytic, fd) < tol);
  };
  for (std::size_t l = 0; l < t.f.w.size(); ++l) {
    auto& w = t.f.w[l];
    REQUIRE(eg.g_w[l].rows() == w.rows());
    REQUIRE(eg.g_w[l].cols() == w.cols());
    for (Eigen::Index i = 0; i < w.size(); ++i)
      probe(w.data() + i, eg.g_w[l].data()[i]);
    auto& b = t.f.b[l];
    REQUIRE(eg.g_b[l].rows() == b.size());
    for (Eigen::Index i = 0; i < b.size(); ++i)
      probe(b.data() + i, eg.g_b[l](i, 0));
  }
  for (std::size_t tp = 0; tp < t.map.w.size(); ++tp) {
    auto& w = t.map.w[tp];
    for (Eigen::Index i = 0; i < w.size(); ++i)
      probe(w.data() + i, eg.g_map_w[tp].data()[i]);
  }
  for (Eigen::Index i = 0; i < t.map.b.size(); ++i)
    probe(t.map.b.data() + i, eg.g_map_b(i, 0));
  for (Eigen::Index i = 0; i < t.lrs.size(); ++i)
    probe(t.lrs.data() + i, eg.g_lrs.data()[i]);
}

MatXf random_signal(int out_dim, int res, uint64_t seed) {
  Rng rng(seed);
  MatXf sig(out_dim, static_cast<Eigen::Index>(res) * res);
  for (Eigen::Index i = 0; i < sig.size(); ++i)
    sig.data()[i] = static_cast<float>(rng.uniform(0.0, 1.0));
  return sig;
}

MetaSpec small_vector_spec(int res = 4, int c = 3, int out_dim = 2) {
  MetaSpec spec;
  spec.siren.out_dim = out_dim;
  spec.siren.width = 6;
  spec.siren.depth = 3;
  spec.latent = LatentShape::vector(c);
  spec.map_kind = MapKind::kDense;
  spec.interp = InterpScheme::kNone;
  spec.coords = CoordScheme::kGlobalUnit;
  spec.resolution = res;
  return spec;
}

MetaSpec small_spatial_spec(int res = 4, int s = 2, int c = 2) {
  MetaSpec spec;
  spec.siren.out_dim = 1;
  spec.siren.width = 6;
  spec.siren.depth = 3;
  spec.latent = LatentShape::spatial(s, c);
  spec.map_kind = MapKind::kConv3x3;
  spec.interp = InterpScheme::kBilinear;
  spec.coords = CoordScheme::kGlobalUnit;
  spec.resolution = res;
  return spec;
}

bool states_equal(const MetaState& a, const MetaState& b) {
  if (a.field_params.w.size() != b.field_params.w.size()) return false;
  for (std::size_t l = 0; l < a.field_params.w.size(); ++l) {
    if (!same_bits(a.field_params.w[l], b.field_params.w[l])) return false;
    if (!same_bits(a.field_params.b[l], b.field_params.b[l])) return false;
  }
  if (a.latent_map.w.size() != b.latent_map.w.size()) return false;
  for (std::size_t t = 0; t < a.latent_map.w.size(); ++t)
    if (!same_bits(a.latent_map.w[t], b.latent_map.w[t])) return false;
  return same_bits(a.latent_map.b, b.latent_map.b) &&
         same_bits(a.inner_lrs, b.inner_lrs) && same_bits(a.adam_m, b.adam_m) &&
         same_bits(a.adam_v, b.adam_v) && a.step == b.step;
}

}  // namespace

TEST_CASE("exact outer gradients match finite differences") {
  SUBCASE("vector latent, dense map") {
    auto t = make_tiny(false, MapKind::kDense, InterpScheme::kNone,
                       CoordScheme::kGlobalUnit, 1, 2, 2, 1, 11);
    check_fd(t, 2);
  }
  SUBCASE("spatial conv3x3, bilinear") {
    auto t = make_tiny(true, MapKind::kConv3x3, InterpScheme::kBilinear,
                       CoordScheme::kGlobalUnit, 2, 2, 4, 2, 12);
    check_fd(t, 2);
  }
  SUBCASE("spatial conv1x1, nearest, patch coords") {
    auto t = make_tiny(true, MapKind::kConv1x1, InterpScheme::kNearest,
                       CoordScheme::kPerPatch, 2, 2, 4, 1, 13);
    check_fd(t, 3);
  }
  SUBCASE("vector latent, binary coords") {
    auto t = make_tiny(false, MapKind::kDense, InterpScheme::kNone,
                       CoordScheme::kBinary, 1, 3, 4, 1, 14);
    check_fd(t, 2);
  }
}

TEST_CASE("first-order mode keeps only the direct terms") {
  auto t = make_tiny(true, MapKind::kConv1x1, InterpScheme::kBilinear,
                     CoordScheme::kGlobalUnit, 2, 2, 4, 1, 21);
  const int steps = 2;
  const auto exact = detail::unrolled_gradients<double>(
      t.f, t.siren, t.map, t.lrs, t.aux, t.target, steps, false);
  const auto fo = detail::unrolled_gradients<double>(
      t.f, t.siren, t.map, t.lrs, t.aux, t.target, steps, true);

  CHECK(exact.loss == fo.loss);
  CHECK(same_bits(exact.z_final, fo.z_final));

  // replay the trajectory to build the first-order quantities by hand
  using P = detail::PlainOps<double>;
  MatXd z = MatXd::Zero(t.lrs.rows(), t.lrs.cols());
  std::vector<MatXd> inner_g;
  for (int k = 0; k < steps; ++k) {
    auto r = detail::eval_pipeline<P>(t.f, t.siren, t.map, z, t.aux, t.target,
                                      detail::GradMode::kZ);
    inner_g.push_back(r.grad_z);
    z -= t.lrs.cwiseProduct(r.grad_z);
  }
  auto fin = detail::eval_pipeline<P>(t.f, t.siren, t.map, z, t.aux, t.target,
                                      detail::GradMode::kZShared);
  for (std::size_t l = 0; l < fin.g_w.size(); ++l) {
    CHECK(same_bits(fo.g_w[l], fin.g_w[l]));  // direct term only, bit for bit
    CHECK(same_bits(fo.g_b[l], fin.g_b[l]));
  }
  for (std::size_t tp = 0; tp < fin.g_map_w.size(); ++tp)
    CHECK(same_bits(fo.g_map_w[tp], fin.g_map_w[tp]));
  CHECK(same_bits(fo.g_map_b, fin.g_map_b));

  MatXd g_lrs_fo = MatXd::Zero(t.lrs.rows(), t.lrs.cols());
  for (const auto& g : inner_g) g_lrs_fo -= g.cwiseProduct(fin.grad_z);
  CHECK((fo.g_lrs - g_lrs_fo).cwiseAbs().maxCoeff() == 0.0);

  // the exact mode must actually carry second-order information
  double diff = 0;
  for (std::size_t l = 0; l < fin.g_w.size(); ++l)
    diff = std::max(diff, (exact.g_w[l] - fo.g_w[l]).cwiseAbs().maxCoeff());
  diff = std::max(diff, (exact.g_lrs - fo.g_lrs).cwiseAbs().maxCoeff());
  CHECK(diff > 1e-9);
}

TEST_CASE("inner fit: zero step size returns the zero latent") {
  MetaConfig cfg;
  cfg.inner_lr_init = 0.0f;
  cfg.inner_steps = 3;
  const auto st = meta_init(small_vector_spec(), cfg);
  const auto sig = random_signal(st.siren.out_dim, st.resolution, 5);
  const auto fit = inner_fit(st, sig);
  CHECK(fit.z.values.isZero(0.0f));
  CHECK(std::isfinite(fit.loss));
  CHECK(fit.loss > 0.0f);
}

TEST_CASE("inner fit matches a manual unrolled replay") {
  MetaConfig cfg;
  cfg.inner_steps = 4;
  auto spec = small_spatial_spec();
  spec.map_kind = MapKind::kConv1x1;
  const auto st = meta_init(spec, cfg);
  const auto sig = random_signal(st.siren.out_dim, st.resolution, 6);

  using P = detail::PlainOps<float>;
  const auto grid = make_coord_grid(st.resolution, st.latent_shape.s, st.coords);
  const auto aux = detail::make_pipeline_aux<float>(grid, st.interp);
  MatXf z = MatXf::Zero(st.latent_shape.c, st.latent_shape.cells());
  for (int k = 0; k < cfg.inner_steps; ++k) {
    auto r = detail::eval_pipeline<P>(st.field_params, st.siren, st.latent_map,
                                      z, aux, sig, detail::GradMode::kZ);
    z -= st.inner_lrs.cwiseProduct(r.grad_z);
  }
  const auto fit = inner_fit(st, sig);
  CHECK(same_bits(fit.z.values, z));
  const auto fin = detail::eval_pipeline<P>(st.field_params, st.siren,
                                            st.latent_map, z, aux, sig,
                                            detail::GradMode::kLossOnly);
  CHECK(fit.loss == fin.loss);
}

TEST_CASE("inner fit reduces the reconstruction loss") {
  MetaConfig cfg;
  cfg.inner_steps = 5;
  for (uint64_t seed : {1u, 2u, 3u}) {
    const auto st = meta_init(small_vector_spec(6, 4), cfg);
    const auto sig = random_signal(st.siren.out_dim, st.resolution, seed);
    const auto zero_lr = [&] {
      MetaState s0 = st;
      s0.inner_lrs.setZero();
      return inner_fit(s0, sig).loss;  // loss of the zero latent
    }();
    const auto fit = inner_fit(st, sig);
    CHECK(fit.loss < zero_lr);
  }
}

TEST_CASE("outer step applies a bias-corrected adam update") {
  MetaConfig cfg;
  cfg.inner_steps = 2;
  cfg.outer_lr = 1e-3f;
  auto st = meta_init(small_vector_spec(), cfg);
  const auto sig = random_signal(st.siren.out_dim, st.resolution, 9);

  // oracle gradient straight from the differentiator
  const auto grid = make_coord_grid(st.resolution, st.latent_shape.s, st.coords);
  const auto aux = detail::make_pipeline_aux<float>(grid, st.interp);
  const auto eg = detail::unrolled_gradients<float>(
      st.field_params, st.siren, st.latent_map, st.inner_lrs, aux, sig,
      cfg.inner_steps, cfg.first_order);

  const MetaState before = st;
  const auto metrics = outer_step(st, {sig}, cfg);
  CHECK(st.step == 1);
  CHECK(metrics.loss == eg.loss);
  CHECK(metrics.psnr ==
        doctest::Approx(-10.0f * std::log10(eg.loss)).epsilon(1e-6));

  // at step 1 the bias-corrected update is m/(1-b1) / (sqrt(v/(1-b2)) + eps)
  auto expect = [&](float p, float g) {
    const float m = (1.0f - 0.9f) * g;
    const float v = (1.0f - 0.999f) * g * g;
    const float mh = m / (1.0f - 0.9f);
    const float vh = v / (1.0f - 0.999f);
    return p - cfg.outer_lr * (mh / (std::sqrt(vh) + 1e-8f));
  };
  for (std::size_t l = 0; l < st.field_params.w.size(); ++l)
    for (Eigen::Index i = 0; i < st.field_params.w[l].size(); ++i) {
      const float got = st.field_params.w[l].data()[i];
      const float want =
          expect(before.field_params.w[l].data()[i], eg.g_w[l].data()[i]);
      CHECK(got == doctest::Approx(want).epsilon(1e-5));
    }
  for (Eigen::Index i = 0; i < st.latent_map.b.size(); ++i)
    CHECK(st.latent_map.b[i] ==
          doctest::Approx(expect(before.latent_map.b[i], eg.g_map_b(i, 0)))
              .epsilon(1e-5));
  for (Eigen::Index i = 0; i < st.inner_lrs.size(); ++i) {
    const float want = std::max(
        0.0f, expect(before.inner_lrs.data()[i], eg.g_lrs.data()[i]));
    CHECK(st.inner_lrs.data()[i] == doctest::Approx(want).epsilon(1e-5));
  }
  CHECK(st.inner_lrs.minCoeff() >= 0.0f);
}

TEST_CASE("outer step leaves state untouched when gradients blow up") {
  MetaConfig cfg;
  cfg.inner_steps = 2;
  auto st = meta_init(small_spatial_spec(), cfg);
  const MetaState before = st;

  SUBCASE("non-finite signal") {
    auto sig = random_signal(st.siren.out_dim, st.resolution, 3);
    sig(0, 0) = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(outer_step(st, {sig}, cfg), DivergenceError);
  }
  SUBCASE("runaway step sizes") {
    st.inner_lrs.setConstant(std::numeric_limits<float>::infinity());
    const MetaState poisoned = st;
    const auto sig = random_signal(st.siren.out_dim, st.resolution, 3);
    CHECK_THROWS_AS(outer_step(st, {sig}, cfg), DivergenceError);
    CHECK(states_equal(st, poisoned));
    return;
  }
  CHECK(states_equal(st, before));
  CHECK(st.step == 0);
}

TEST_CASE("the learning-rate clamp keeps step sizes non-negative") {
  MetaConfig cfg;
  cfg.inner_steps = 3;
  cfg.inner_lr_init = 0.5f;  // overshoots, so shrinking the lr pays off
  cfg.outer_lr = 10.0f;
  auto st = meta_init(small_vector_spec(), cfg);
  const auto sig = random_signal(st.siren.out_dim, st.resolution, 17);
  outer_step(st, {sig}, cfg);
  CHECK(st.inner_lrs.minCoeff() >= 0.0f);
  CHECK((st.inner_lrs.array() == 0.0f).any());  // the clamp actually fired
}

TEST_CASE("meta train is deterministic") {
  const auto spec = small_spatial_spec();
  std::vector<MatXf> ds;
  for (uint64_t i = 0; i < 5; ++i)
    ds.push_back(random_signal(spec.siren.out_dim, spec.resolution, 100 + i));

  MetaConfig cfg;
  cfg.inner_steps = 2;
  cfg.batch_size = 2;
  cfg.seed = 7;

  SUBCASE("zero iterations returns the initial state") {
    cfg.iterations = 0;
    const auto st = meta_train(spec, ds, cfg);
    CHECK(states_equal(st, meta_init(spec, cfg)));
  }
  SUBCASE("same seed, same run") {
    cfg.iterations = 5;
    const auto a = meta_train(spec, ds, cfg);
    const auto b = meta_train(spec, ds, cfg);
    CHECK(states_equal(a, b));
    CHECK(a.step == 5);
    cfg.seed = 8;
    const auto c = meta_train(spec, ds, cfg);
    CHECK_FALSE(states_equal(a, c));
  }
  SUBCASE("metrics arrive on the logging cadence") {
    cfg.iterations = 5;
    cfg.log_every = 2;
    std::vector<int64_t> seen;
    meta_train(spec, ds, cfg,
               [&](const MetricsRow& row) { seen.push_back(row.iteration); });
    CHECK(seen == std::vector<int64_t>{2, 4, 5});
  }
}

TEST_CASE("functaset encoding matches per-datum fits") {
  MetaConfig cfg;
  cfg.inner_steps = 3;
  cfg.iterations = 3;
  cfg.batch_size = 2;
  const auto spec = small_spatial_spec();
  std::vector<MatXf> ds;
  for (uint64_t i = 0; i < 5; ++i)
    ds.push_back(random_signal(spec.siren.out_dim, spec.resolution, 200 + i));
  ds[3] = ds[1];  // duplicate must encode identically
  const auto st = meta_train(spec, ds, cfg);

  const std::vector<uint16_t> labels{0, 1, 2, 1, 4};
  const auto fset = build_functaset(st, ds, &labels);
  CHECK(fset.count() == 5);
  CHECK(fset.shape == st.latent_shape);
  CHECK(fset.interp == st.interp);
  CHECK(fset.resolution == st.resolution);
  CHECK(fset.labels == labels);
  for (Eigen::Index i = 0; i < 5; ++i) {
    const auto fit = inner_fit(st, ds[static_cast<std::size_t>(i)]);
    CHECK(same_bits(fset.latent(i).values, fit.z.values));
    CHECK(fset.fit_psnr[i] ==
          doctest::Approx(-10.0f * std::log10(fit.loss)).epsilon(1e-6));
  }
  const VecXf dup_a = fset.latents.col(1), dup_b = fset.latents.col(3);
  CHECK(same_bits(dup_a, dup_b));

  const std::vector<uint16_t> short_labels{0, 1};
  CHECK_THROWS_AS(build_functaset(st, ds, &short_labels), ValueError);
}

TEST_CASE("checkpoint round trip preserves every field") {
  MetaConfig cfg;
  cfg.inner_steps = 2;
  cfg.iterations = 3;
  cfg.batch_size = 2;
  auto spec = small_spatial_spec();
  spec.coords = CoordScheme::kPerPatch;
  std::vector<MatXf> ds;
  for (uint64_t i = 0; i < 3; ++i)
    ds.push_back(random_signal(spec.siren.out_dim, spec.resolution, 300 + i));
  const auto st = meta_train(spec, ds, cfg);

  const auto path = (test_dir() / "state.bin").string();
  save_meta_state(st, path);
  const auto back = load_meta_state(path);
  CHECK(back.siren.in_dim == st.siren.in_dim);
  CHECK(back.siren.out_dim == st.siren.out_dim);
  CHECK(back.siren.width == st.siren.width);
  CHECK(back.siren.depth == st.siren.depth);
  CHECK(back.siren.omega0 == st.siren.omega0);
  CHECK(back.latent_shape == st.latent_shape);
  CHECK(back.interp == st.interp);
  CHECK(back.coords == st.coords);
  CHECK(back.resolution == st.resolution);
  CHECK(back.inner_steps == st.inner_steps);
  CHECK(back.latent_map.kind == st.latent_map.kind);
  CHECK(states_equal(back, st));

  // a reloaded state encodes exactly like the original
  const auto a = inner_fit(st, ds[0]);
  const auto b = inner_fit(back, ds[0]);
  CHECK(same_bits(a.z.values, b.z.values));
}

TEST_CASE("checkpoint loader rejects damaged files") {
  MetaConfig cfg;
  const auto st = meta_init(small_vector_spec(), cfg);
  const auto dir = test_dir();
  const auto good = (dir / "good.bin").string();
  save_meta_state(st, good);

  std::ifstream in(good, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  REQUIRE(bytes.size() > 16);

  auto write_variant = [&](const std::string& name,
                           const std::vector<char>& body) {
    const auto p = (dir / name).string();
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    return p;
  };

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(load_meta_state(write_variant("magic.bin", bad_magic)),
                  BadMagicError);

  auto bad_version = bytes;
  bad_version[4] = 99;
  CHECK_THROWS_AS(load_meta_state(write_variant("version.bin", bad_version)),
                  VersionError);

  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  CHECK_THROWS_AS(load_meta_state(write_variant("trunc.bin", truncated)),
                  TruncatedError);

  CHECK_THROWS_AS(load_meta_state((dir / "missing.bin").string()), IoError);
}

TEST_CASE("spec validation rejects inconsistent architectures") {
  MetaConfig cfg;

  auto spec = small_vector_spec();
  spec.map_kind = MapKind::kConv1x1;
  CHECK_THROWS_AS(meta_init(spec, cfg), ConfigError);

  spec = small_vector_spec();
  spec.interp = InterpScheme::kBilinear;
  CHECK_THROWS_AS(meta_init(spec, cfg), ConfigError);

  spec = small_spatial_spec();
  spec.map_kind = MapKind::kDense;
  CHECK_THROWS_AS(meta_init(spec, cfg), ConfigError);

  spec = small_spatial_spec();
  spec.interp = InterpScheme::kNone;
  CHECK_THROWS_AS(meta_init(spec, cfg), ConfigError);

  spec = small_spatial_spec(5, 2);  // 2 does not divide 5
  spec.coords = CoordScheme::kPerPatch;
  CHECK_THROWS_AS(meta_init(spec, cfg), ConfigError);

  spec = small_vector_spec(5);  // not a power of two
  spec.coords = CoordScheme::kBinary;
  CHECK_THROWS_AS(meta_init(spec, cfg), ConfigError);

  spec = small_vector_spec();
  spec.resolution = 0;
  CHECK_THROWS_AS(meta_init(spec, cfg), ConfigError);

  MetaConfig bad = cfg;
  bad.inner_steps = 0;
  CHECK_THROWS_AS(meta_init(small_vector_spec(), bad), ConfigError);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(meta_init(small_vector_spec(), bad), ConfigError);
  bad = cfg;
  bad.outer_lr = 0.0f;
  CHECK_THROWS_AS(meta_init(small_vector_spec(), bad), ConfigError);
}
