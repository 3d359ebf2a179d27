#pragma once

// Concrete classifier networks built from the nets.hpp blocks. Parameters
// live in a flat tensor list with a fixed layout so the optimizer, EMA,
// checkpointing, and finite-difference tests can all walk them uniformly.

#include <array>
#include <cstdint>
#include <vector>

#include "functakit/detail/nets.hpp"

namespace functakit::detail {

using TensorShape = std::array<Eigen::Index, 2>;

// Residual MLP on flattened latents:
//   stem linear -> blocks of x + W2 silu(W1 LN(x)) -> LN -> dropout -> linear.
// Layout: [stem w, stem b | per block: ln g, ln b, w1, b1, w2, b2 | head ln g,
// head ln b, head w, head b].
template <class S>
struct MlpNet {
  int in = 0, width = 0, ffw = 0, blocks = 0, classes = 0;

  int block_base(int k) const { return 2 + 6 * k; }
  int head_base() const { return 2 + 6 * blocks; }
  int num_tensors() const { return head_base() + 4; }

  std::vector<TensorShape> shapes() const {
    std::vector<TensorShape> out;
    out.push_back({width, in});
    out.push_back({width, 1});
    for (int k = 0; k < blocks; ++k) {
      out.push_back({width, 1});
      out.push_back({width, 1});
      out.push_back({ffw, width});
      out.push_back({ffw, 1});
      out.push_back({width, ffw});
      out.push_back({width, 1});
    }
    out.push_back({width, 1});
    out.push_back({width, 1});
    out.push_back({classes, width});
    out.push_back({classes, 1});
    return out;
  }

  Tensors<S> init(Rng& rng) const {
    Tensors<S> t;
    push_linear<S>(t, width, in, rng);
    for (int k = 0; k < blocks; ++k) {
      push_layernorm<S>(t, width);
      push_linear<S>(t, ffw, width, rng);
      push_linear<S>(t, width, ffw, rng);
    }
    push_layernorm<S>(t, width);
    push_linear<S>(t, classes, width, rng);
    return t;
  }

  struct Cache {
    MatX<S> x;
    struct Block {
      LnCache<S> ln;
      MatX<S> ln_y, a1, s1;
    };
    std::vector<Block> blk;
    LnCache<S> head_ln;
    MatX<S> head_in;  // post-dropout input of the final linear
  };

  MatX<S> forward(const Tensors<S>& p, const MatX<S>& x, const MatX<S>* drop,
                  Cache& c) const {
    c.x = x;
    c.blk.resize(static_cast<std::size_t>(blocks));
    MatX<S> h = linear_fwd(p[0], p[1], x);
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

  MatX<S> logits(const Tensors<S>& p, const MatX<S>& x) const {
    Cache c;
    return forward(p, x, nullptr, c);
  }

  S loss_and_grads(const Tensors<S>& p, const MatX<S>& x, const MatX<S>& targets,
                   const MatX<S>* drop, Tensors<S>& g) const {
    Cache c;
    const MatX<S> logit = forward(p, x, drop, c);
    MatX<S> dlogits;
    const S loss = cross_entropy(logit, targets, &dlogits);
    const int hb = head_base();
    MatX<S> dhead_in = linear_bwd(p[hb + 2], c.head_in, dlogits, g[hb + 2], g[hb + 3]);
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
    linear_bwd(p[0], c.x, dh, g[0], g[1]);
    return loss;
  }
};

// Pre-LN transformer over s^2 tokens of dimension c:
//   embed + learned positional encodings, blocks of
//   x += attn(LN(x)); x += ffw(LN(x)), final LN, mean-pool, dropout, linear.
// Layout: [embed w, embed b, posenc | per block: ln1 g, ln1 b, wq, bq, wk, bk,
// wv, bv, wo, bo, ln2 g, ln2 b, w1, b1, w2, b2 | final ln g, final ln b,
// head w, head b].
template <class S>
struct TransformerNet {
  int token_dim = 0, seq = 0, width = 0, ffw = 0, blocks = 0, heads = 0,
      classes = 0;

  int block_base(int k) const { return 3 + 16 * k; }
  int head_base() const { return 3 + 16 * blocks; }
  int num_tensors() const { return head_base() + 4; }

  std::vector<TensorShape> shapes() const {
    std::vector<TensorShape> out;
    out.push_back({width, token_dim});
    out.push_back({width, 1});
    out.push_back({width, seq});
    for (int k = 0; k < blocks; ++k) {
      out.push_back({width, 1});
      out.push_back({width, 1});
      for (int q = 0; q < 4; ++q) {  // q, k, v, o projections
        out.push_back({width, width});
        out.push_back({width, 1});
      }
      out.push_back({width, 1});
      out.push_back({width, 1});
      out.push_back({ffw, width});
      out.push_back({ffw, 1});
      out.push_back({width, ffw});
      out.push_back({width, 1});
    }
    out.push_back({width, 1});
    out.push_back({width, 1});
    out.push_back({classes, width});
    out.push_back({classes, 1});
    return out;
  }

  Tensors<S> init(Rng& rng) const {
    Tensors<S> t;
    push_linear<S>(t, width, token_dim, rng);
    MatX<S> pos(width, seq);
    for (Eigen::Index i = 0; i < pos.size(); ++i)
      pos.data()[i] = static_cast<S>(0.02 * rng.normal());
    t.push_back(std::move(pos));
    for (int k = 0; k < blocks; ++k) {
      push_layernorm<S>(t, width);
      for (int q = 0; q < 4; ++q) push_linear<S>(t, width, width, rng);
      push_layernorm<S>(t, width);
      push_linear<S>(t, ffw, width, rng);
      push_linear<S>(t, width, ffw, rng);
    }
    push_layernorm<S>(t, width);
    push_linear<S>(t, classes, width, rng);
    return t;
  }

  struct Cache {
    MatX<S> tokens;
    struct Block {
      LnCache<S> ln1;
      MatX<S> ln1_y;
      AttnCache<S> attn;
      LnCache<S> ln2;
      MatX<S> ln2_y, a1, s1;
    };
    std::vector<Block> blk;
    LnCache<S> lnf;
    MatX<S> lnf_y;
  };

  // pooled feature column for one example (tokens: token_dim x seq)
  VecX<S> features_one(const Tensors<S>& p, const MatX<S>& tokens, Cache& c) const {
    c.tokens = tokens;
    c.blk.resize(static_cast<std::size_t>(blocks));
    MatX<S> x = linear_fwd(p[0], p[1], tokens) + p[2];
    for (int k = 0; k < blocks; ++k) {
      auto& bc = c.blk[static_cast<std::size_t>(k)];
      const int b = block_base(k);
      bc.ln1_y = layernorm_fwd(x, p[b], p[b + 1], bc.ln1);
      x += attention_fwd(bc.ln1_y, p[b + 2], p[b + 3], p[b + 4], p[b + 5],
                         p[b + 6], p[b + 7], p[b + 8], p[b + 9], heads, bc.attn);
      bc.ln2_y = layernorm_fwd(x, p[b + 10], p[b + 11], bc.ln2);
      bc.a1 = linear_fwd(p[b + 12], p[b + 13], bc.ln2_y);
      bc.s1 = gelu_fwd(bc.a1);
      x += linear_fwd(p[b + 14], p[b + 15], bc.s1);
    }
    const int hb = head_base();
    c.lnf_y = layernorm_fwd(x, p[hb], p[hb + 1], c.lnf);
    return c.lnf_y.rowwise().mean();
  }

  void backward_one(const Tensors<S>& p, const Cache& c, const VecX<S>& dpooled,
                    Tensors<S>& g) const {
    const int hb = head_base();
    MatX<S> dlnf_y = (dpooled / static_cast<S>(seq)).replicate(1, seq);
    MatX<S> dx = layernorm_bwd(dlnf_y, p[hb], c.lnf, g[hb], g[hb + 1]);
    for (int k = blocks - 1; k >= 0; --k) {
      const auto& bc = c.blk[static_cast<std::size_t>(k)];
      const int b = block_base(k);
      const MatX<S> ds1 = linear_bwd(p[b + 14], bc.s1, dx, g[b + 14], g[b + 15]);
      const MatX<S> da1 = gelu_bwd(ds1, bc.a1);
      const MatX<S> dln2 = linear_bwd(p[b + 12], bc.ln2_y, da1, g[b + 12], g[b + 13]);
      dx += layernorm_bwd(dln2, p[b + 10], bc.ln2, g[b + 10], g[b + 11]);
      const MatX<S> dln1 = attention_bwd(
          dx, p[b + 2], p[b + 4], p[b + 6], p[b + 8], heads, bc.attn, g[b + 2],
          g[b + 3], g[b + 4], g[b + 5], g[b + 6], g[b + 7], g[b + 8], g[b + 9]);
      dx += layernorm_bwd(dln1, p[b], bc.ln1, g[b], g[b + 1]);
    }
    g[2] += dx;
    linear_bwd(p[0], c.tokens, dx, g[0], g[1]);
  }

  MatX<S> logits_one(const Tensors<S>& p, const MatX<S>& tokens) const {
    Cache c;
    const VecX<S> feat = features_one(p, tokens, c);
    const int hb = head_base();
    return linear_fwd(p[hb + 2], p[hb + 3], MatX<S>(feat));
  }

  S loss_and_grads(const Tensors<S>& p, const std::vector<MatX<S>>& batch,
                   const MatX<S>& targets, const MatX<S>* drop, Tensors<S>& g) const {
    const auto bsz = static_cast<Eigen::Index>(batch.size());
    std::vector<Cache> caches(batch.size());
    MatX<S> feats(width, bsz);
    for (Eigen::Index b = 0; b < bsz; ++b)
      feats.col(b) =
          features_one(p, batch[static_cast<std::size_t>(b)],
                       caches[static_cast<std::size_t>(b)]);
    const MatX<S> dropped = drop ? feats.cwiseProduct(*drop).eval() : feats;
    const int hb = head_base();
    const MatX<S> logit = linear_fwd(p[hb + 2], p[hb + 3], dropped);
    MatX<S> dlogits;
    const S loss = cross_entropy(logit, targets, &dlogits);
    MatX<S> dfeat = linear_bwd(p[hb + 2], dropped, dlogits, g[hb + 2], g[hb + 3]);
    if (drop) dfeat = dfeat.cwiseProduct(*drop);
    for (Eigen::Index b = 0; b < bsz; ++b)
      backward_one(p, caches[static_cast<std::size_t>(b)], dfeat.col(b), g);
    return loss;
  }
};

template <class S>
Tensors<S> zero_like(const Tensors<S>& params) {
  Tensors<S> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(MatX<S>::Zero(p.rows(), p.cols()));
  return out;
}

}  // namespace functakit::detail
