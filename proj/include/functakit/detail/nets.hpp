#pragma once

// Hand-rolled dense network blocks shared by the classifier and denoiser:
// linear, layer norm, SiLU/GELU, softmax cross-entropy, and single-example
// multi-head self-attention. Templated on the scalar so tests can run the
// identical code in double against finite differences.

#include <cmath>
#include <cstdint>
#include <vector>

#include "functakit/common.hpp"

namespace functakit::detail {

template <class S>
using Tensors = std::vector<MatX<S>>;  // biases kept as n x 1 columns

template <class S>
MatX<S> uniform_tensor(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  MatX<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
  return m;
}

// PyTorch-style fan-in uniform init for a linear layer; bias the same bound.
template <class S>
void push_linear(Tensors<S>& t, Eigen::Index out, Eigen::Index in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  t.push_back(uniform_tensor<S>(out, in, bound, rng));
  t.push_back(uniform_tensor<S>(out, 1, bound, rng));
}

template <class S>
void push_layernorm(Tensors<S>& t, Eigen::Index dim) {
  t.push_back(MatX<S>::Constant(dim, 1, S(1)));
  t.push_back(MatX<S>::Zero(dim, 1));
}

// ---- linear ----

template <class S>
MatX<S> linear_fwd(const MatX<S>& w, const MatX<S>& b, const MatX<S>& x) {
  return (w * x).colwise() + b.col(0);
}

template <class S>
MatX<S> linear_bwd(const MatX<S>& w, const MatX<S>& x, const MatX<S>& dy,
                   MatX<S>& dw, MatX<S>& db) {
  dw += dy * x.transpose();
  db.col(0) += dy.rowwise().sum();
  return w.transpose() * dy;
}

// ---- layer norm over each column ----

template <class S>
struct LnCache {
  MatX<S> xhat;
  VecX<S> inv_std;
};

template <class S>
MatX<S> layernorm_fwd(const MatX<S>& x, const MatX<S>& gamma, const MatX<S>& beta,
                      LnCache<S>& cache) {
  const auto n = static_cast<S>(x.rows());
  cache.xhat.resize(x.rows(), x.cols());
  cache.inv_std.resize(x.cols());
  MatX<S> y(x.rows(), x.cols());
  constexpr S eps = S(1e-5);
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const S mean = x.col(j).sum() / n;
    const S var = (x.col(j).array() - mean).square().sum() / n;
    const S inv = S(1) / std::sqrt(var + eps);
    cache.inv_std[j] = inv;
    cache.xhat.col(j) = (x.col(j).array() - mean) * inv;
    y.col(j) = cache.xhat.col(j).cwiseProduct(gamma.col(0)) + beta.col(0);
  }
  return y;
}

template <class S>
MatX<S> layernorm_bwd(const MatX<S>& dy, const MatX<S>& gamma,
                      const LnCache<S>& cache, MatX<S>& dgamma, MatX<S>& dbeta) {
  const auto n = static_cast<S>(dy.rows());
  MatX<S> dx(dy.rows(), dy.cols());
  for (Eigen::Index j = 0; j < dy.cols(); ++j) {
    dgamma.col(0) += dy.col(j).cwiseProduct(cache.xhat.col(j));
    dbeta.col(0) += dy.col(j);
    const VecX<S> dxhat = dy.col(j).cwiseProduct(gamma.col(0));
    const S m1 = dxhat.sum() / n;
    const S m2 = dxhat.cwiseProduct(cache.xhat.col(j)).sum() / n;
    dx.col(j) = ((dxhat.array() - m1) - cache.xhat.col(j).array() * m2) *
                cache.inv_std[j];
  }
  return dx;
}

// ---- activations ----

template <class S>
MatX<S> silu_fwd(const MatX<S>& x) {
  return x.array() / (S(1) + (-x.array()).exp());
}

template <class S>
MatX<S> silu_bwd(const MatX<S>& dy, const MatX<S>& x) {
  const auto sig = (S(1) / (S(1) + (-x.array()).exp())).eval();
  return dy.array() * sig * (S(1) + x.array() * (S(1) - sig));
}

template <class S>
MatX<S> gelu_fwd(const MatX<S>& x) {
  return x.unaryExpr([](S v) {
    return v * S(0.5) * (S(1) + std::erf(v / S(M_SQRT2)));
  });
}

template <class S>
MatX<S> gelu_bwd(const MatX<S>& dy, const MatX<S>& x) {
  constexpr double inv_sqrt2pi = 0.3989422804014327;
  MatX<S> dx = x.unaryExpr([](S v) {
    return S(0.5) * (S(1) + std::erf(v / S(M_SQRT2)));
  });
  dx.array() += x.array() *
                (x.array().square() * S(-0.5)).exp() * S(inv_sqrt2pi);
  return dy.cwiseProduct(dx);
}

// ---- softmax cross-entropy on probability targets ----

template <class S>
MatX<S> softmax_cols(const MatX<S>& logits) {
  MatX<S> p(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const auto shifted =
        (logits.col(j).array() - logits.col(j).maxCoeff()).exp().eval();
    p.col(j) = shifted / shifted.sum();
  }
  return p;
}

// mean over columns of -sum(y log p); dlogits = (p - y)/B
template <class S>
S cross_entropy(const MatX<S>& logits, const MatX<S>& targets, MatX<S>* dlogits) {
  const MatX<S> p = softmax_cols(logits);
  S loss = 0;
  for (Eigen::Index j = 0; j < logits.cols(); ++j)
    loss -= targets.col(j)
                .cwiseProduct(p.col(j).array().max(S(1e-30)).log().matrix())
                .sum();
  loss /= static_cast<S>(logits.cols());
  if (dlogits) *dlogits = (p - targets) / static_cast<S>(logits.cols());
  return loss;
}

// ---- multi-head self-attention, one example (x: width x L) ----

template <class S>
struct AttnCache {
  MatX<S> x, q, k, v;
  std::vector<MatX<S>> prob;  // per head, L x L rows = queries
  MatX<S> concat;             // width x L pre-output-projection
};

template <class S>
MatX<S> attention_fwd(const MatX<S>& x, const MatX<S>& wq, const MatX<S>& bq,
                      const MatX<S>& wk, const MatX<S>& bk, const MatX<S>& wv,
                      const MatX<S>& bv, const MatX<S>& wo, const MatX<S>& bo,
                      int heads, AttnCache<S>& cache) {
  const Eigen::Index width = x.rows();
  const Eigen::Index dh = width / heads;
  cache.x = x;
  cache.q = linear_fwd(wq, bq, x);
  cache.k = linear_fwd(wk, bk, x);
  cache.v = linear_fwd(wv, bv, x);
  cache.prob.assign(static_cast<std::size_t>(heads), {});
  cache.concat.resize(width, x.cols());
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  for (int h = 0; h < heads; ++h) {
    const auto qh = cache.q.middleRows(h * dh, dh);
    const auto kh = cache.k.middleRows(h * dh, dh);
    const auto vh = cache.v.middleRows(h * dh, dh);
    MatX<S> scores = (qh.transpose() * kh) * scale;  // (i,j) = q_i . k_j
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
      const auto e = (scores.row(i).array() - scores.row(i).maxCoeff()).exp().eval();
      scores.row(i) = e / e.sum();
    }
    cache.prob[static_cast<std::size_t>(h)] = scores;
    cache.concat.middleRows(h * dh, dh) = vh * scores.transpose();
  }
  return linear_fwd(wo, bo, cache.concat);
}

template <class S>
MatX<S> attention_bwd(const MatX<S>& dy, const MatX<S>& wq, const MatX<S>& wk,
                      const MatX<S>& wv, const MatX<S>& wo, int heads,
                      const AttnCache<S>& cache, MatX<S>& dwq, MatX<S>& dbq,
                      MatX<S>& dwk, MatX<S>& dbk, MatX<S>& dwv, MatX<S>& dbv,
                      MatX<S>& dwo, MatX<S>& dbo) {
  const Eigen::Index width = cache.x.rows();
  const Eigen::Index dh = width / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));

  MatX<S> dconcat = linear_bwd(wo, cache.concat, dy, dwo, dbo);
  MatX<S> dq = MatX<S>::Zero(width, cache.x.cols());
  MatX<S> dk = MatX<S>::Zero(width, cache.x.cols());
  MatX<S> dv = MatX<S>::Zero(width, cache.x.cols());
  for (int h = 0; h < heads; ++h) {
    const auto& prob = cache.prob[static_cast<std::size_t>(h)];
    const auto vh = cache.v.middleRows(h * dh, dh);
    const auto doh = dconcat.middleRows(h * dh, dh);
    dv.middleRows(h * dh, dh) = doh * prob;
    const MatX<S> dprob = doh.transpose() * vh;
    MatX<S> dscores(prob.rows(), prob.cols());
    for (Eigen::Index i = 0; i < prob.rows(); ++i) {
      const S dot = dprob.row(i).cwiseProduct(prob.row(i)).sum();
      dscores.row(i) = prob.row(i).array() * (dprob.row(i).array() - dot);
    }
    dscores *= scale;
    const auto qh = cache.q.middleRows(h * dh, dh);
    const auto kh = cache.k.middleRows(h * dh, dh);
    dq.middleRows(h * dh, dh) = kh * dscores.transpose();
    dk.middleRows(h * dh, dh) = qh * dscores;
  }
  MatX<S> dx = linear_bwd(wq, cache.x, dq, dwq, dbq);
  dx += linear_bwd(wk, cache.x, dk, dwk, dbk);
  dx += linear_bwd(wv, cache.x, dv, dwv, dbv);
  return dx;
}

// ---- AdamW with decoupled weight decay over a tensor list ----

struct AdamWConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
};

template <class S>
struct AdamW {
  AdamWConfig cfg;
  Tensors<S> m, v;
  int64_t step = 0;

  void init(const Tensors<S>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.push_back(MatX<S>::Zero(p.rows(), p.cols()));
      v.push_back(MatX<S>::Zero(p.rows(), p.cols()));
    }
    step = 0;
  }

  void update(Tensors<S>& params, const Tensors<S>& grads,
              const std::vector<char>* decay_mask = nullptr) {
    step += 1;
    const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
    const S bc1 = S(1) - std::pow(b1, static_cast<S>(step));
    const S bc2 = S(1) - std::pow(b2, static_cast<S>(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = b1 * m[i] + (S(1) - b1) * grads[i];
      v[i] = b2 * v[i] + (S(1) - b2) * grads[i].cwiseProduct(grads[i]);
      const bool decay = !decay_mask || (*decay_mask)[i];
      if (decay && cfg.weight_decay > 0)  // decoupled: shrink before the step
        params[i] *= S(1) - static_cast<S>(cfg.lr) * static_cast<S>(cfg.weight_decay);
      params[i] -= static_cast<S>(cfg.lr) *
                   ((m[i] / bc1).array() /
                    ((v[i] / bc2).array().sqrt() + static_cast<S>(cfg.eps)))
                       .matrix();
    }
  }
};

// shadow <- decay * shadow + (1 - decay) * params
template <class S>
void ema_update(Tensors<S>& shadow, const Tensors<S>& params, S decay) {
  for (std::size_t i = 0; i < params.size(); ++i)
    shadow[i] = decay * shadow[i] + (S(1) - decay) * params[i];
}

// inverted dropout mask: zero with probability p, else 1/(1-p)
template <class S>
MatX<S> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  MatX<S> mask(rows, cols);
  const S keep = static_cast<S>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < mask.size(); ++i)
    mask.data()[i] = rng.bernoulli(p) ? S(0) : keep;
  return mask;
}

}  // namespace functakit::detail
