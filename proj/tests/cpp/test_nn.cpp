#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "fd.hpp"
#include "functakit/detail/classify_net.hpp"
#include "functakit/detail/nets.hpp"

using namespace functakit;
using namespace functakit::detail;

namespace {

MatXd random_mat(Eigen::Index rows, Eigen::Index cols, Rng& rng, double lo = -1.0,
                 double hi = 1.0) {
  MatXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

template <class A, class B>
bool same_bits(const A& a, const B& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return a.size() == 0 ||
         std::memcmp(a.data(), b.data(),
                     sizeof(typename A::Scalar) * static_cast<std::size_t>(a.size())) == 0;
}

// FD-check every entry of `x` against `analytic` for loss(x) = sum(r .* f(x)).
template <class Loss>
void check_grad_entries(MatXd& x, const MatXd& analytic, Loss&& loss,
                        double tol = 1e-6) {
  REQUIRE(analytic.rows() == x.rows());
  REQUIRE(analytic.cols() == x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double num = fd::central(loss, x.data() + i);
    const double got = analytic.data()[i];
    if (std::abs(num) < 1e-9 && std::abs(got) < 1e-9) continue;  // both zero up to FD noise
    CAPTURE(i);
    CAPTURE(num);
    CAPTURE(got);
    CHECK(fd::rel_err(num, got) < tol);
  }
}

MatXd smooth_targets(int classes, Eigen::Index batch, Rng& rng, double l = 0.1) {
  MatXd y(classes, batch);
  for (Eigen::Index j = 0; j < batch; ++j) {
    y.col(j).setConstant(l / classes);
    y(static_cast<Eigen::Index>(rng.uniform_int(static_cast<uint64_t>(classes))), j) +=
        1.0 - l;
  }
  return y;
}

}  // namespace

TEST_CASE("linear layer gradients match finite differences") {
  Rng rng(11);
  MatXd w = random_mat(3, 4, rng);
  MatXd b = random_mat(3, 1, rng);
  MatXd x = random_mat(4, 5, rng);
  const MatXd r = random_mat(3, 5, rng);

  auto loss = [&] { return linear_fwd(w, b, x).cwiseProduct(r).sum(); };

  MatXd dw = MatXd::Zero(3, 4), db = MatXd::Zero(3, 1);
  const MatXd dx = linear_bwd(w, x, r, dw, db);
  check_grad_entries(w, dw, loss);
  check_grad_entries(b, db, loss);
  check_grad_entries(x, dx, loss);
}

TEST_CASE("layer norm output is standardized and gradients match finite differences") {
  Rng rng(12);
  MatXd x = random_mat(6, 3, rng, -2.0, 2.0);
  MatXd gamma = random_mat(6, 1, rng, 0.5, 1.5);
  MatXd beta = random_mat(6, 1, rng, -0.3, 0.3);

  SUBCASE("unit gamma, zero beta standardizes each column") {
    const MatXd g1 = MatXd::Constant(6, 1, 1.0);
    const MatXd b0 = MatXd::Zero(6, 1);
    LnCache<double> cache;
    const MatXd y = layernorm_fwd(x, g1, b0, cache);
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
      CHECK(std::abs(y.col(j).mean()) < 1e-12);
      const double var = (y.col(j).array() - y.col(j).mean()).square().mean();
      CHECK(var == doctest::Approx(1.0).epsilon(1e-4));  // eps shrinks it slightly
    }
  }

  SUBCASE("gradients") {
    const MatXd r = random_mat(6, 3, rng);
    auto loss = [&] {
      LnCache<double> cache;
      return layernorm_fwd(x, gamma, beta, cache).cwiseProduct(r).sum();
    };
    LnCache<double> cache;
    layernorm_fwd(x, gamma, beta, cache);
    MatXd dgamma = MatXd::Zero(6, 1), dbeta = MatXd::Zero(6, 1);
    const MatXd dx = layernorm_bwd(r, gamma, cache, dgamma, dbeta);
    check_grad_entries(x, dx, loss);
    check_grad_entries(gamma, dgamma, loss);
    check_grad_entries(beta, dbeta, loss);
  }
}

TEST_CASE("activation values and derivatives") {
  SUBCASE("known values") {
    MatXd x(1, 3);
    x << 0.0, 1.0, -1.0;
    const MatXd s = silu_fwd(x);
    CHECK(s(0, 0) == 0.0);
    CHECK(s(0, 1) == doctest::Approx(0.7310585786300049).epsilon(1e-12));
    CHECK(s(0, 2) == doctest::Approx(-0.2689414213699951).epsilon(1e-12));
    const MatXd g = gelu_fwd(x);
    CHECK(g(0, 0) == 0.0);
    CHECK(g(0, 1) == doctest::Approx(0.8413447460685429).epsilon(1e-12));
    CHECK(g(0, 2) == doctest::Approx(-0.15865525393145707).epsilon(1e-12));
  }

  SUBCASE("derivatives match finite differences") {
    Rng rng(13);
    MatXd x = random_mat(4, 4, rng, -3.0, 3.0);
    const MatXd r = random_mat(4, 4, rng);
    auto loss_silu = [&] { return silu_fwd(x).cwiseProduct(r).sum(); };
    check_grad_entries(x, silu_bwd(r, x), loss_silu);
    auto loss_gelu = [&] { return gelu_fwd(x).cwiseProduct(r).sum(); };
    check_grad_entries(x, gelu_bwd(r, x), loss_gelu);
  }
}

TEST_CASE("softmax cross-entropy value and gradient") {
  Rng rng(14);
  MatXd logits = random_mat(4, 3, rng, -2.0, 2.0);
  const MatXd targets = smooth_targets(4, 3, rng);

  SUBCASE("columns of softmax sum to one") {
    const MatXd p = softmax_cols(logits);
    for (Eigen::Index j = 0; j < p.cols(); ++j)
      CHECK(p.col(j).sum() == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("uniform logits against any targets give log n") {
    const MatXd flat = MatXd::Constant(4, 3, 0.7);
    CHECK(cross_entropy<double>(flat, targets, nullptr) ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }

  SUBCASE("matches a log-sum-exp oracle") {
    double expect = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      const double lse = std::log(logits.col(j).array().exp().sum());
      expect -= targets.col(j).dot(logits.col(j)) - lse * targets.col(j).sum();
    }
    expect /= static_cast<double>(logits.cols());
    CHECK(cross_entropy<double>(logits, targets, nullptr) ==
          doctest::Approx(expect).epsilon(1e-12));
  }

  SUBCASE("gradient matches finite differences") {
    MatXd dlogits;
    cross_entropy<double>(logits, targets, &dlogits);
    auto loss = [&] { return cross_entropy<double>(logits, targets, nullptr); };
    check_grad_entries(logits, dlogits, loss);
  }
}

TEST_CASE("multi-head attention gradients match finite differences") {
  Rng rng(15);
  const int width = 6, seq = 4;
  MatXd x = random_mat(width, seq, rng);
  MatXd wq = random_mat(width, width, rng, -0.5, 0.5), bq = random_mat(width, 1, rng);
  MatXd wk = random_mat(width, width, rng, -0.5, 0.5), bk = random_mat(width, 1, rng);
  MatXd wv = random_mat(width, width, rng, -0.5, 0.5), bv = random_mat(width, 1, rng);
  MatXd wo = random_mat(width, width, rng, -0.5, 0.5), bo = random_mat(width, 1, rng);
  const MatXd r = random_mat(width, seq, rng);

  for (int heads : {1, 2, 3}) {
    CAPTURE(heads);
    auto loss = [&] {
      AttnCache<double> cache;
      return attention_fwd(x, wq, bq, wk, bk, wv, bv, wo, bo, heads, cache)
          .cwiseProduct(r)
          .sum();
    };
    AttnCache<double> cache;
    attention_fwd(x, wq, bq, wk, bk, wv, bv, wo, bo, heads, cache);
    MatXd dwq = MatXd::Zero(width, width), dbq = MatXd::Zero(width, 1);
    MatXd dwk = MatXd::Zero(width, width), dbk = MatXd::Zero(width, 1);
    MatXd dwv = MatXd::Zero(width, width), dbv = MatXd::Zero(width, 1);
    MatXd dwo = MatXd::Zero(width, width), dbo = MatXd::Zero(width, 1);
    const MatXd dx = attention_bwd(r, wq, wk, wv, wo, heads, cache, dwq, dbq, dwk,
                                   dbk, dwv, dbv, dwo, dbo);
    const double tol = 1e-5;
    check_grad_entries(x, dx, loss, tol);
    check_grad_entries(wq, dwq, loss, tol);
    check_grad_entries(bq, dbq, loss, tol);
    check_grad_entries(wk, dwk, loss, tol);
    check_grad_entries(bk, dbk, loss, tol);
    check_grad_entries(wv, dwv, loss, tol);
    check_grad_entries(bv, dbv, loss, tol);
    check_grad_entries(wo, dwo, loss, tol);
    check_grad_entries(bo, dbo, loss, tol);
  }
}

TEST_CASE("attention is invariant to key bias shifts") {
  // Adding a constant to every key shifts each query's scores uniformly and
  // softmax absorbs the shift, so the key bias gradient is exactly zero.
  Rng rng(23);
  const int width = 4, seq = 3;
  const MatXd x = random_mat(width, seq, rng);
  const MatXd wq = random_mat(width, width, rng, -0.5, 0.5);
  const MatXd wk = random_mat(width, width, rng, -0.5, 0.5);
  const MatXd wv = random_mat(width, width, rng, -0.5, 0.5);
  const MatXd wo = random_mat(width, width, rng, -0.5, 0.5);
  const MatXd b0 = MatXd::Zero(width, 1);
  const MatXd bk = random_mat(width, 1, rng, -2.0, 2.0);
  AttnCache<double> c1, c2;
  const MatXd y1 = attention_fwd(x, wq, b0, wk, b0, wv, b0, wo, b0, 2, c1);
  const MatXd y2 = attention_fwd(x, wq, b0, wk, bk, wv, b0, wo, b0, 2, c2);
  CHECK((y1 - y2).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("attention rows attend with weights summing to one") {
  Rng rng(16);
  const int width = 4, seq = 3;
  const MatXd x = random_mat(width, seq, rng);
  const MatXd w = random_mat(width, width, rng, -0.5, 0.5);
  const MatXd b = MatXd::Zero(width, 1);
  AttnCache<double> cache;
  attention_fwd(x, w, b, w, b, w, b, w, b, 2, cache);
  for (const auto& prob : cache.prob)
    for (Eigen::Index i = 0; i < prob.rows(); ++i)
      CHECK(prob.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("residual MLP net gradients match finite differences") {
  Rng rng(17);
  MlpNet<double> net{5, 6, 7, 2, 3};
  Rng init = rng.derive(1);
  auto params = net.init(init);
  REQUIRE(static_cast<int>(params.size()) == net.num_tensors());
  MatXd x = random_mat(5, 4, rng);
  const MatXd targets = smooth_targets(3, 4, rng);

  SUBCASE("without dropout") {
    auto grads = zero_like(params);
    net.loss_and_grads(params, x, targets, nullptr, grads);
    for (std::size_t t = 0; t < params.size(); ++t) {
      CAPTURE(t);
      auto loss = [&] {
        Tensors<double> scratch = zero_like(params);
        return net.loss_and_grads(params, x, targets, nullptr, scratch);
      };
      check_grad_entries(params[t], grads[t], loss, 1e-4);
    }
  }

  SUBCASE("with a fixed dropout mask") {
    Rng drop_rng(91);
    const MatXd mask = dropout_mask<double>(6, 4, 0.5, drop_rng);
    auto grads = zero_like(params);
    net.loss_and_grads(params, x, targets, &mask, grads);
    for (std::size_t t : {std::size_t{0}, params.size() - 2, params.size() - 4}) {
      CAPTURE(t);
      auto loss = [&] {
        Tensors<double> scratch = zero_like(params);
        return net.loss_and_grads(params, x, targets, &mask, scratch);
      };
      check_grad_entries(params[t], grads[t], loss, 1e-4);
    }
  }
}

TEST_CASE("transformer net gradients match finite differences") {
  Rng rng(18);
  TransformerNet<double> net{3, 4, 6, 8, 2, 2, 3};
  Rng init = rng.derive(1);
  auto params = net.init(init);
  REQUIRE(static_cast<int>(params.size()) == net.num_tensors());
  std::vector<MatXd> batch = {random_mat(3, 4, rng), random_mat(3, 4, rng)};
  const MatXd targets = smooth_targets(3, 2, rng);

  auto grads = zero_like(params);
  net.loss_and_grads(params, batch, targets, nullptr, grads);
  for (std::size_t t = 0; t < params.size(); ++t) {
    CAPTURE(t);
    auto loss = [&] {
      Tensors<double> scratch = zero_like(params);
      return net.loss_and_grads(params, batch, targets, nullptr, scratch);
    };
    check_grad_entries(params[t], grads[t], loss, 1e-4);
  }
}

TEST_CASE("net tensor layouts match their declared shapes") {
  Rng rng(19);
  const MlpNet<double> mlp{5, 6, 7, 2, 3};
  auto mt = mlp.init(rng);
  const auto ms = mlp.shapes();
  REQUIRE(mt.size() == ms.size());
  for (std::size_t i = 0; i < mt.size(); ++i) {
    CHECK(mt[i].rows() == ms[i][0]);
    CHECK(mt[i].cols() == ms[i][1]);
  }

  const TransformerNet<double> tf{3, 4, 6, 8, 2, 2, 3};
  auto tt = tf.init(rng);
  const auto ts = tf.shapes();
  REQUIRE(tt.size() == ts.size());
  for (std::size_t i = 0; i < tt.size(); ++i) {
    CHECK(tt[i].rows() == ts[i][0]);
    CHECK(tt[i].cols() == ts[i][1]);
  }
}

TEST_CASE("adamw first step matches a closed-form oracle") {
  // m-hat = g, v-hat = g^2 at step 1, so the update is lr * g / (|g| + eps)
  // applied after the decoupled shrink by (1 - lr * wd). Hyperparameters are
  // powers of two so the float config values are exact in double.
  const double lr = 0.125, wd = 0.0625, eps = 0.0009765625;
  Tensors<double> p = {MatXd::Constant(1, 1, 2.0)};
  const Tensors<double> g = {MatXd::Constant(1, 1, 0.5)};
  AdamW<double> opt;
  opt.cfg = {float(lr), 0.9f, 0.999f, float(eps), float(wd)};
  opt.init(p);
  opt.update(p, g);
  const double expect = 2.0 * (1.0 - lr * wd) - lr * 0.5 / (0.5 + eps);
  CHECK(p[0](0, 0) == doctest::Approx(expect).epsilon(1e-12));

  SUBCASE("zero weight decay leaves parameters decay-free") {
    Tensors<double> q = {MatXd::Constant(1, 1, 2.0)};
    AdamW<double> plain;
    plain.cfg = {float(lr), 0.9f, 0.999f, float(eps), 0.0f};
    plain.init(q);
    plain.update(q, g);
    CHECK(q[0](0, 0) == doctest::Approx(2.0 - lr * 0.5 / (0.5 + eps)).epsilon(1e-12));
  }
}

TEST_CASE("adamw two-step trajectory matches a hand-rolled loop") {
  const double lr = 0.0625, b1 = 0.5, b2 = 0.75, eps = 0.0009765625, wd = 0.03125;
  Rng rng(20);
  Tensors<double> p = {random_mat(2, 3, rng)};
  Tensors<double> ref = p;
  AdamW<double> opt;
  opt.cfg = {float(lr), float(b1), float(b2), float(eps), float(wd)};
  opt.init(p);
  MatXd m = MatXd::Zero(2, 3), v = MatXd::Zero(2, 3);
  for (int step = 1; step <= 2; ++step) {
    const Tensors<double> g = {random_mat(2, 3, rng)};
    opt.update(p, g);
    m = b1 * m + (1.0 - b1) * g[0];
    v = b2 * v + (1.0 - b2) * g[0].cwiseProduct(g[0]);
    const double bc1 = 1.0 - std::pow(b1, step);
    const double bc2 = 1.0 - std::pow(b2, step);
    ref[0] *= 1.0 - lr * wd;
    ref[0] -= lr * ((m / bc1).array() / ((v / bc2).array().sqrt() + eps)).matrix();
    CHECK((p[0] - ref[0]).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("ema shadow tracking") {
  Rng rng(21);
  Tensors<double> params = {random_mat(3, 2, rng)};
  Tensors<double> shadow = params;

  SUBCASE("decay zero tracks raw parameters exactly") {
    params[0](1, 1) = 7.5;
    ema_update(shadow, params, 0.0);
    CHECK(same_bits(shadow[0], params[0]));
  }

  SUBCASE("decay one never moves") {
    const Tensors<double> frozen = shadow;
    params[0].setConstant(100.0);
    ema_update(shadow, params, 1.0);
    CHECK(same_bits(shadow[0], frozen[0]));
  }

  SUBCASE("intermediate decay interpolates") {
    const MatXd before = shadow[0];
    params[0].setConstant(1.0);
    ema_update(shadow, params, 0.25);
    const MatXd expect = 0.25 * before.array() + 0.75;
    CHECK((shadow[0] - expect).cwiseAbs().maxCoeff() < 1e-15);
  }
}

TEST_CASE("dropout masks use inverted scaling") {
  Rng rng(22);
  SUBCASE("p = 0 keeps everything") {
    const MatXd mask = dropout_mask<double>(8, 8, 0.0, rng);
    CHECK(mask.minCoeff() == 1.0);
    CHECK(mask.maxCoeff() == 1.0);
  }
  SUBCASE("entries are zero or 1/(1-p), mean near one") {
    const double p = 0.25;
    const MatXd mask = dropout_mask<double>(200, 200, p, rng);
    const double keep = 1.0 / (1.0 - p);
    for (Eigen::Index i = 0; i < mask.size(); ++i)
      CHECK((mask.data()[i] == 0.0 || mask.data()[i] == keep));
    CHECK(mask.mean() == doctest::Approx(1.0).epsilon(0.02));
  }
}
