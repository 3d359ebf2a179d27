#pragma once

// Residual-MLP noise predictor for latent diffusion: sinusoidal time
// embedding, learned class embedding with a trailing dummy class, SiLU
// residual blocks, zero-initialized head so the initial prediction is zero.
// Templated on the scalar for finite-difference tests in double.

#include <cmath>
#include <vector>

#include "functakit/detail/classify_net.hpp"
#include "functakit/detail/nets.hpp"

namespace functakit::detail {

template <class S>
struct DenoiserNet {
  int dims = 0, width = 0, blocks = 0, time_dim = 0, class_dim = 0;
  int classes = 0;  // real classes; embedding table holds classes + 1 columns

  // layout: [stem w, stem b, tproj w, tproj b, cproj w, cproj b, class table |
  // per block: ln g, ln b, w1, b1, w2, b2 | head ln g, head ln b, head w,
  // head b]
  int block_base(int k) const { return 7 + 6 * k; }
  int head_base() const { return 7 + 6 * blocks; }
  int num_tensors() const { return head_base() + 4; }
  int dummy_label() const { return classes; }

  std::vector<TensorShape> shapes() const {
    std::vector<TensorShape> out;
    out.push_back({width, dims});
    out.push_back({width, 1});
    out.push_back({width, time_dim});
    out.push_back({width, 1});
    out.push_back({width, class_dim});
    out.push_back({width, 1});
    out.push_back({class_dim, classes + 1});
    for (int k = 0; k < blocks; ++k) {
      out.push_back({width, 1});
      out.push_back({width, 1});
      out.push_back({width, width});
      out.push_back({width, 1});
      out.push_back({width, width});
      out.push_back({width, 1});
    }
    out.push_back({width, 1});
    out.push_back({width, 1});
    out.push_back({dims, width});
    out.push_back({dims, 1});
    return out;
  }

  Tensors<S> init(Rng& rng) const {
    Tensors<S> t;
    push_linear<S>(t, width, dims, rng);
    push_linear<S>(t, width, time_dim, rng);
    push_linear<S>(t, width, class_dim, rng);
    MatX<S> table(class_dim, classes + 1);
    for (Eigen::Index i = 0; i < table.size(); ++i)
      table.data()[i] = static_cast<S>(0.02 * rng.normal());
    t.push_back(std::move(table));
    for (int k = 0; k < blocks; ++k) {
      push_layernorm<S>(t, width);
      push_linear<S>(t, width, width, rng);
      push_linear<S>(t, width, width, rng);
    }
    push_layernorm<S>(t, width);
    t.push_back(MatX<S>::Zero(dims, width));  // zero head: initial prediction 0
    t.push_back(MatX<S>::Zero(dims, 1));
    return t;
  }

  // [sin(t w_0..), cos(t w_0..)] with w_i = 10000^(-i / half)
  MatX<S> time_embedding(const std::vector<int>& t) const {
    const int half = time_dim / 2;
    MatX<S> emb(time_dim, static_cast<Eigen::Index>(t.size()));
    for (std::size_t b = 0; b < t.size(); ++b) {
      for (int i = 0; i < half; ++i) {
        const double w = std::exp(-std::log(10000.0) * i / half);
        const double arg = static_cast<double>(t[b]) * w;
        emb(i, static_cast<Eigen::Index>(b)) = static_cast<S>(std::sin(arg));
        emb(half + i, static_cast<Eigen::Index>(b)) = static_cast<S>(std::cos(arg));
      }
    }
    return emb;
  }

  struct Cache {
    MatX<S> z, temb, cemb;
    std::vector<int> labels;
    struct Block {
      LnCache<S> ln;
      MatX<S> ln_y, a1, s1;
    };
    std::vector<Block> blk;
    LnCache<S> head_ln;
    MatX<S> head_in;
  };

  MatX<S> forward(const Tensors<S>& p, const MatX<S>& z, const std::vector<int>& t,
                  const std::vector<int>& labels, const MatX<S>* drop,
                  Cache& c) const {
    c.z = z;
    c.labels = labels;
    c.temb = time_embedding(t);
    c.cemb.resize(class_dim, z.cols());
    for (Eigen::Index b = 0; b < z.cols(); ++b)
      c.cemb.col(b) = p[6].col(labels[static_cast<std::size_t>(b)]);
    MatX<S> h = linear_fwd(p[0], p[1], z) + linear_fwd(p[2], p[3], c.temb) +
                linear_fwd(p[4], p[5], c.cemb);
    c.blk.resize(static_cast<std::size_t>(blocks));
    for (int k = 0; k < blocks; ++k) {
      auto& bc = c.blk[static_cast<std::size_t>(k)];
      const int b = block_base(k);
      bc.ln_y = layernorm_fwd(h, p[b], p[b + 1], bc.ln);
      bc.a1 = linear_fwd(p[b + 2], p[b + 3], bc.ln_y);
      bc.s1 = silu_fwd(bc.a1);
      h += linear_fwd(p[b + 4], p[b + 5], bc.s1);
    }
    const int hb = head_base();
    c.head_in = layernorm_fwd(h, p[hb], p[hb + 1], c.head_ln);
    if (drop) c.head_in = c.head_in.cwiseProduct(*drop);
    return linear_fwd(p[hb + 2], p[hb + 3], c.head_in);
  }

  MatX<S> predict(const Tensors<S>& p, const MatX<S>& z, const std::vector<int>& t,
                  const std::vector<int>& labels) const {
    Cache c;
    return forward(p, z, t, labels, nullptr, c);
  }

  // mean over batch and dims of (eps_hat - eps)^2
  S loss_and_grads(const Tensors<S>& p, const MatX<S>& z, const std::vector<int>& t,
                   const std::vector<int>& labels, const MatX<S>& eps,
                   const MatX<S>* drop, Tensors<S>& g) const {
    Cache c;
    const MatX<S> eps_hat = forward(p, z, t, labels, drop, c);
    const MatX<S> diff = eps_hat - eps;
    const S denom = static_cast<S>(z.size());
    const S loss = diff.squaredNorm() / denom;
    const MatX<S> dout = (S(2) / denom) * diff;

    const int hb = head_base();
    MatX<S> dhead_in = linear_bwd(p[hb + 2], c.head_in, dout, g[hb + 2], g[hb + 3]);
    if (drop) dhead_in = dhead_in.cwiseProduct(*drop);
    MatX<S> dh = layernorm_bwd(dhead_in, p[hb], c.head_ln, g[hb], g[hb + 1]);
    for (int k = blocks - 1; k >= 0; --k) {
      const auto& bc = c.blk[static_cast<std::size_t>(k)];
      const int b = block_base(k);
      const MatX<S> ds1 = linear_bwd(p[b + 4], bc.s1, dh, g[b + 4], g[b + 5]);
      const MatX<S> da1 = silu_bwd(ds1, bc.a1);
      const MatX<S> dln = linear_bwd(p[b + 2], bc.ln_y, da1, g[b + 2], g[b + 3]);
      dh += layernorm_bwd(dln, p[b], bc.ln, g[b], g[b + 1]);
    }
    linear_bwd(p[0], c.z, dh, g[0], g[1]);
    linear_bwd(p[2], c.temb, dh, g[2], g[3]);
    const MatX<S> dcemb = linear_bwd(p[4], c.cemb, dh, g[4], g[5]);
    for (Eigen::Index b = 0; b < dcemb.cols(); ++b)
      g[6].col(c.labels[static_cast<std::size_t>(b)]) += dcemb.col(b);
    return loss;
  }
};

}  // namespace functakit::detail
