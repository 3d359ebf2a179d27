#include "functakit/classify.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include "functakit/detail/classify_net.hpp"
#include "functakit/detail/serialize.hpp"

namespace functakit {

namespace {

constexpr uint32_t kClassifierMagic = 0x4c434653u;  // "SFCL"
constexpr uint32_t kClassifierVersion = 1;

detail::MlpNet<float> make_mlp(const ClassifierConfig& cfg, const LatentShape& shape) {
  return {shape.dims(), cfg.width, cfg.ffw_width, cfg.blocks, cfg.classes};
}

detail::TransformerNet<float> make_transformer(const ClassifierConfig& cfg,
                                               const LatentShape& shape) {
  return {shape.c,    shape.cells(), cfg.width, cfg.ffw_width,
          cfg.blocks, cfg.heads,     cfg.classes};
}

std::vector<Eigen::Index> resolve_indices(const Functaset& fs,
                                          const std::vector<Eigen::Index>& given) {
  if (given.empty()) {
    std::vector<Eigen::Index> all(static_cast<std::size_t>(fs.count()));
    std::iota(all.begin(), all.end(), Eigen::Index{0});
    return all;
  }
  for (Eigen::Index i : given)
    if (i < 0 || i >= fs.count())
      throw ValueError("classify: index " + std::to_string(i) + " out of range");
  return given;
}

void check_labels(const Functaset& fs, const std::vector<Eigen::Index>& idx,
                  int classes) {
  if (fs.labels.empty()) throw ValueError("classify: functaset has no labels");
  for (Eigen::Index i : idx) {
    const int label = fs.labels[static_cast<std::size_t>(i)];
    if (label >= classes)
      throw ValueError("classify: label " + std::to_string(label) +
                       " out of range for " + std::to_string(classes) + " classes");
  }
}

// dims x B column batch for the MLP path
MatXf gather_flat(const Functaset& fs, const std::vector<Eigen::Index>& idx,
                  std::size_t begin, std::size_t end, float scale) {
  MatXf x(fs.dims(), static_cast<Eigen::Index>(end - begin));
  for (std::size_t k = begin; k < end; ++k)
    x.col(static_cast<Eigen::Index>(k - begin)) =
        fs.latents.col(idx[k]) * scale;
  return x;
}

std::vector<MatXf> gather_tokens(const Functaset& fs,
                                 const std::vector<Eigen::Index>& idx,
                                 std::size_t begin, std::size_t end, float scale) {
  std::vector<MatXf> batch;
  batch.reserve(end - begin);
  for (std::size_t k = begin; k < end; ++k)
    batch.push_back(tokenize(fs.latent(idx[k]), scale));
  return batch;
}

MatXf gather_targets(const Functaset& fs, const std::vector<Eigen::Index>& idx,
                     std::size_t begin, std::size_t end, float l, int classes) {
  MatXf y(classes, static_cast<Eigen::Index>(end - begin));
  for (std::size_t k = begin; k < end; ++k)
    y.col(static_cast<Eigen::Index>(k - begin)) =
        smooth_labels(fs.labels[static_cast<std::size_t>(idx[k])], l, classes)
            .cast<float>();
  return y;
}

void fisher_yates(std::vector<Eigen::Index>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i)
    std::swap(v[i - 1], v[rng.uniform_int(i)]);
}

int argmax_lowest(const VecXf& v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace

void ClassifierConfig::validate() const {
  if (width < 1 || ffw_width < 1) throw ConfigError("classify: width and ffw width must be >= 1");
  if (blocks < 0) throw ConfigError("classify: blocks must be >= 0");
  if (arch == ClassifierArch::kTokenTransformer) {
    if (heads < 1) throw ConfigError("classify: heads must be >= 1");
    if (width % heads != 0) throw ConfigError("classify: heads must divide width");
  }
  if (!(dropout >= 0.0f && dropout < 1.0f)) throw ConfigError("classify: dropout must be in [0,1)");
  if (!(label_smoothing >= 0.0f && label_smoothing < 1.0f))
    throw ConfigError("classify: label smoothing must be in [0,1)");
  if (!(weight_decay >= 0.0f)) throw ConfigError("classify: weight decay must be >= 0");
  if (!(norm_scale > 0.0f) || !std::isfinite(norm_scale))
    throw ConfigError("classify: norm scale must be positive and finite");
  if (!(lr > 0.0f)) throw ConfigError("classify: learning rate must be positive");
  if (batch_size < 1) throw ConfigError("classify: batch size must be >= 1");
  if (!(ema_decay >= 0.0f && ema_decay <= 1.0f))
    throw ConfigError("classify: EMA decay must be in [0,1]");
  if (epochs < 0) throw ConfigError("classify: epochs must be >= 0");
  if (classes < 1) throw ConfigError("classify: classes must be >= 1");
}

VecXd smooth_labels(const VecXd& onehot, double l) {
  if (!(l >= 0.0 && l < 1.0)) throw ValueError("smooth_labels: l must be in [0,1)");
  const auto n = onehot.size();
  if (n < 1) throw ShapeError("smooth_labels: empty label vector");
  int hot = -1;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double v = onehot[i];
    if (v == 1.0 && hot < 0)
      hot = static_cast<int>(i);
    else if (v != 0.0)
      throw ValueError("smooth_labels: input is not one-hot");
  }
  if (hot < 0) throw ValueError("smooth_labels: input is not one-hot");
  return smooth_labels(hot, l, static_cast<int>(n));
}

VecXd smooth_labels(int true_class, double l, int n) {
  if (!(l >= 0.0 && l < 1.0)) throw ValueError("smooth_labels: l must be in [0,1)");
  if (n < 1 || true_class < 0 || true_class >= n)
    throw ValueError("smooth_labels: class index out of range");
  VecXd y = VecXd::Constant(n, l / n);
  y[true_class] = 1.0 - l + l / n;
  return y;
}

MatXf tokenize(const Latent& z, float norm_scale) {
  if (z.shape.rank != 3)
    throw ShapeError("tokenize: vector latent passed to token path");
  check_shape(z.values.rows() == z.shape.c && z.values.cols() == z.shape.cells(),
              "tokenize: latent values do not match shape");
  return z.values * norm_scale;
}

Classifier classify_train(const Functaset& fs, const ClassifierConfig& cfg,
                          const std::vector<Eigen::Index>& train_indices,
                          const ClassifySink& sink) {
  cfg.validate();
  Functaset deq;
  const Functaset* src = &fs;
  if (fs.quantized()) {
    deq = dequantize(fs);
    src = &deq;
  }
  const auto idx_base = resolve_indices(*src, train_indices);
  check_labels(*src, idx_base, cfg.classes);
  if (idx_base.empty()) throw ValueError("classify: no training examples");
  if (cfg.arch == ClassifierArch::kTokenTransformer && src->shape.rank != 3)
    throw ConfigError("classify: token transformer requires spatial latents");

  const Rng root(cfg.seed);
  Rng init_rng = root.derive(0xc1a5);
  Rng shuffle_rng = root.derive(0x5f1e);
  Rng drop_rng = root.derive(0xd409);

  const auto mlp = make_mlp(cfg, src->shape);
  const auto tf = make_transformer(cfg, src->shape);
  const bool use_tf = cfg.arch == ClassifierArch::kTokenTransformer;

  Classifier clf;
  clf.cfg = cfg;
  clf.shape = src->shape;
  clf.params = use_tf ? tf.init(init_rng) : mlp.init(init_rng);
  clf.ema = clf.params;

  detail::AdamW<float> opt;
  opt.cfg = {cfg.lr, 0.9f, 0.999f, 1e-8f, cfg.weight_decay};
  opt.init(clf.params);

  auto idx = idx_base;
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    fisher_yates(idx, shuffle_rng);
    for (std::size_t begin = 0; begin < idx.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(idx.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      const auto bsz = static_cast<Eigen::Index>(end - begin);
      const MatXf targets = gather_targets(*src, idx, begin, end,
                                           cfg.label_smoothing, cfg.classes);
      MatXf mask;
      const MatXf* drop = nullptr;
      if (cfg.dropout > 0.0f) {
        mask = detail::dropout_mask<float>(cfg.width, bsz, cfg.dropout, drop_rng);
        drop = &mask;
      }
      auto grads = detail::zero_like(clf.params);
      float loss = 0.0f;
      if (use_tf) {
        const auto batch = gather_tokens(*src, idx, begin, end, cfg.norm_scale);
        loss = tf.loss_and_grads(clf.params, batch, targets, drop, grads);
      } else {
        const MatXf x = gather_flat(*src, idx, begin, end, cfg.norm_scale);
        loss = mlp.loss_and_grads(clf.params, x, targets, drop, grads);
      }
      if (!std::isfinite(loss))
        throw DivergenceError("classify: non-finite loss at step " + std::to_string(step));
      opt.update(clf.params, grads);
      detail::ema_update(clf.ema, clf.params, cfg.ema_decay);
      step += 1;
      if (sink) sink({step, loss});
    }
  }
  return clf;
}

MatXf classify_logits(const Classifier& clf, const Functaset& fs, bool use_ema,
                      const std::vector<Eigen::Index>& indices) {
  clf.cfg.validate();
  Functaset deq;
  const Functaset* src = &fs;
  if (fs.quantized()) {
    deq = dequantize(fs);
    src = &deq;
  }
  if (src->shape != clf.shape)
    throw ShapeError("classify: functaset latent shape does not match classifier");
  const auto idx = resolve_indices(*src, indices);
  const auto& params = use_ema ? clf.ema : clf.params;
  const bool use_tf = clf.cfg.arch == ClassifierArch::kTokenTransformer;
  const auto mlp = make_mlp(clf.cfg, clf.shape);
  const auto tf = make_transformer(clf.cfg, clf.shape);

  MatXf logits(clf.cfg.classes, static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (use_tf) {
      logits.col(static_cast<Eigen::Index>(k)) =
          tf.logits_one(params, tokenize(src->latent(idx[k]), clf.cfg.norm_scale));
    } else {
      const MatXf x = src->latents.col(idx[k]) * clf.cfg.norm_scale;
      logits.col(static_cast<Eigen::Index>(k)) = mlp.logits(params, x);
    }
  }
  return logits;
}

double classify_eval(const Classifier& clf, const Functaset& fs, bool use_ema,
                     const std::vector<Eigen::Index>& indices) {
  Functaset deq;
  const Functaset* src = &fs;
  if (fs.quantized()) {
    deq = dequantize(fs);
    src = &deq;
  }
  const auto idx = resolve_indices(*src, indices);
  if (idx.empty()) throw ValueError("classify: no examples to evaluate");
  check_labels(*src, idx, clf.cfg.classes);
  const MatXf logits = classify_logits(clf, *src, use_ema, idx);
  std::size_t correct = 0;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const int pred = argmax_lowest(logits.col(static_cast<Eigen::Index>(k)));
    if (pred == src->labels[static_cast<std::size_t>(idx[k])]) correct += 1;
  }
  return static_cast<double>(correct) / static_cast<double>(idx.size());
}

void save_classifier(const Classifier& clf, const std::string& path) {
  clf.cfg.validate();
  clf.shape.validate();
  detail::atomic_write_file(path, [&](std::ostream& os) {
    detail::BinWriter w{os};
    w.u32(kClassifierMagic);
    w.u32(kClassifierVersion);
    const auto& cfg = clf.cfg;
    w.u8(static_cast<uint8_t>(cfg.arch));
    w.u32(static_cast<uint32_t>(cfg.width));
    w.u32(static_cast<uint32_t>(cfg.ffw_width));
    w.u32(static_cast<uint32_t>(cfg.blocks));
    w.u32(static_cast<uint32_t>(cfg.heads));
    w.f32(cfg.dropout);
    w.f32(cfg.label_smoothing);
    w.f32(cfg.weight_decay);
    w.f32(cfg.norm_scale);
    w.f32(cfg.lr);
    w.u32(static_cast<uint32_t>(cfg.batch_size));
    w.f32(cfg.ema_decay);
    w.u32(static_cast<uint32_t>(cfg.epochs));
    w.u32(static_cast<uint32_t>(cfg.classes));
    w.u64(cfg.seed);
    w.u8(static_cast<uint8_t>(clf.shape.rank));
    w.u32(static_cast<uint32_t>(clf.shape.s));
    w.u32(static_cast<uint32_t>(clf.shape.c));
    w.u64(clf.params.size());
    for (const auto* group : {&clf.params, &clf.ema})
      for (const auto& t : *group) {
        w.u64(static_cast<uint64_t>(t.rows()));
        w.u64(static_cast<uint64_t>(t.cols()));
        w.mat(t);
      }
  });
}

Classifier load_classifier(const std::string& path) {
  auto is = detail::open_input(path);
  detail::BinReader r{is};
  if (r.u32() != kClassifierMagic) throw BadMagicError(path + ": not a classifier file");
  if (r.u32() != kClassifierVersion) throw VersionError(path + ": unsupported classifier version");
  Classifier clf;
  auto& cfg = clf.cfg;
  const uint8_t arch = r.u8();
  if (arch > 1) throw FormatError(path + ": unknown classifier architecture");
  cfg.arch = static_cast<ClassifierArch>(arch);
  cfg.width = static_cast<int>(r.u32());
  cfg.ffw_width = static_cast<int>(r.u32());
  cfg.blocks = static_cast<int>(r.u32());
  cfg.heads = static_cast<int>(r.u32());
  cfg.dropout = r.f32();
  cfg.label_smoothing = r.f32();
  cfg.weight_decay = r.f32();
  cfg.norm_scale = r.f32();
  cfg.lr = r.f32();
  cfg.batch_size = static_cast<int>(r.u32());
  cfg.ema_decay = r.f32();
  cfg.epochs = static_cast<int>(r.u32());
  cfg.classes = static_cast<int>(r.u32());
  cfg.seed = r.u64();
  clf.shape.rank = r.u8();
  clf.shape.s = static_cast<int>(r.u32());
  clf.shape.c = static_cast<int>(r.u32());
  try {
    cfg.validate();
    clf.shape.validate();
  } catch (const ConfigError& e) {
    throw FormatError(path + ": " + e.what());
  }

  std::vector<detail::TensorShape> expect;
  if (cfg.arch == ClassifierArch::kTokenTransformer) {
    if (clf.shape.rank != 3)
      throw FormatError(path + ": token transformer requires spatial latents");
    expect = make_transformer(cfg, clf.shape).shapes();
  } else {
    expect = make_mlp(cfg, clf.shape).shapes();
  }
  if (r.u64() != expect.size())
    throw FormatError(path + ": tensor count does not match architecture");
  for (auto* group : {&clf.params, &clf.ema}) {
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
  if (!r.at_eof()) throw FormatError(path + ": trailing bytes");
  return clf;
}

}  // namespace functakit
