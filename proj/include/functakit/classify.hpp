#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "functakit/common.hpp"
#include "functakit/functaset.hpp"

namespace functakit {

enum class ClassifierArch : uint8_t { kResidualMlp = 0, kTokenTransformer = 1 };

struct ClassifierConfig {
  ClassifierArch arch = ClassifierArch::kResidualMlp;
  int width = 64;
  int ffw_width = 128;
  int blocks = 2;
  int heads = 4;            // transformer only; must divide width
  float dropout = 0.0f;     // applied once, just before the final linear
  float label_smoothing = 0.0f;
  float weight_decay = 0.0f;
  float norm_scale = 1.0f;  // input latents are multiplied by this
  float lr = 1e-3f;
  int batch_size = 32;
  float ema_decay = 0.9999f;
  int epochs = 10;
  int classes = 2;
  uint64_t seed = 0;

  void validate() const;
};

// [1-l+l/n, l/n, ..., l/n] for a one-hot input; l=0 is the identity. Double
// precision so the components sum to 1 well below any training tolerance.
VecXd smooth_labels(const VecXd& onehot, double l);
VecXd smooth_labels(int true_class, double l, int n);

// Spatial latent as a sequence of s^2 tokens of dimension c, row-major cell
// order, every entry scaled by norm_scale. Token j is column j.
MatXf tokenize(const Latent& z, float norm_scale);

struct Classifier {
  ClassifierConfig cfg;
  LatentShape shape;          // latent geometry the network was built for
  std::vector<MatXf> params;
  std::vector<MatXf> ema;    // shadow parameters, same layout
};

struct ClassifyMetricsRow {
  int64_t step = 0;
  float loss = 0.0f;
};
using ClassifySink = std::function<void(const ClassifyMetricsRow&)>;

// Cross-entropy on smoothed labels with decoupled weight decay; EMA shadow
// updated after every optimizer step. Empty train_indices means the whole set.
Classifier classify_train(const Functaset& fs, const ClassifierConfig& cfg,
                          const std::vector<Eigen::Index>& train_indices = {},
                          const ClassifySink& sink = {});

// Top-1 accuracy; argmax ties break toward the lowest class index.
double classify_eval(const Classifier& clf, const Functaset& fs,
                     bool use_ema = false,
                     const std::vector<Eigen::Index>& indices = {});

// Per-example logits, one column per requested index (raw or EMA weights).
MatXf classify_logits(const Classifier& clf, const Functaset& fs,
                      bool use_ema = false,
                      const std::vector<Eigen::Index>& indices = {});

void save_classifier(const Classifier& clf, const std::string& path);
Classifier load_classifier(const std::string& path);

}  // namespace functakit
