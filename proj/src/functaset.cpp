#include "functakit/functaset.hpp"

#include <cmath>
#include <string>
#include <utility>

#include "functakit/detail/serialize.hpp"

namespace functakit {

namespace {

// stats expanded to one (mu, gamma*sigma) pair per flattened latent dimension
std::pair<VecXf, VecXf> expand_stats(const NormStats& stats,
                                     const LatentShape& shape) {
  const int d = shape.dims();
  VecXf mu(d), denom(d);
  switch (stats.kind) {
    case NormKind::kScalar:
      check_shape(stats.mu.size() == 1 && stats.sigma.size() == 1,
                  "scalar norm stats must have one entry");
      mu.setConstant(stats.mu[0]);
      denom.setConstant(stats.gamma * stats.sigma[0]);
      break;
    case NormKind::kVector:
      check_shape(stats.mu.size() == shape.c && stats.sigma.size() == shape.c,
                  "vector norm stats must have c entries");
      for (int e = 0; e < d; ++e) {
        mu[e] = stats.mu[e % shape.c];
        denom[e] = stats.gamma * stats.sigma[e % shape.c];
      }
      break;
    case NormKind::kArray:
      check_shape(stats.mu.size() == d && stats.sigma.size() == d,
                  "array norm stats must have s*s*c entries");
      mu = stats.mu;
      denom = stats.gamma * stats.sigma;
      break;
    default:
      throw ConfigError("unknown normalization kind");
  }
  if (!(stats.gamma > 0)) throw ConfigError("norm scale gamma must be > 0");
  for (int e = 0; e < d; ++e)
    if (!(denom[e] > 0))
      throw ValueError("non-positive sigma in latent dimension " + std::to_string(e));
  return {std::move(mu), std::move(denom)};
}

Eigen::Index norm_payload_len(uint8_t kind, const LatentShape& shape) {
  switch (kind) {
    case 0: return 0;
    case 1: return 1;
    case 2: return shape.c;
    case 3: return shape.dims();
    default: throw FormatError("unknown normalization kind " + std::to_string(kind));
  }
}

}  // namespace

Latent Functaset::latent(Eigen::Index i) const {
  if (quantized()) throw ValueError("dequantize before extracting latents");
  check_shape(i >= 0 && i < count(), "latent index out of range");
  Latent z;
  z.shape = shape;
  z.values = Eigen::Map<const MatXf>(latents.col(i).data(), shape.c, shape.cells());
  return z;
}

void Functaset::set_latent(Eigen::Index i, const Latent& z) {
  if (quantized()) throw ValueError("cannot write latents into a quantized set");
  check_shape(i >= 0 && i < count(), "latent index out of range");
  if (!(z.shape == shape)) throw ShapeError("latent shape does not match the set");
  latents.col(i) = Eigen::Map<const VecXf>(z.values.data(), latents.rows());
}

void Functaset::validate() const {
  shape.validate();
  if (resolution < 0) throw ConfigError("functaset: negative resolution");
  if (shape.rank == 1 && interp != InterpScheme::kNone)
    throw ConfigError("vector functasets use interpolation 'none'");
  if (shape.rank == 3 && interp == InterpScheme::kNone)
    throw ConfigError("spatial functasets need nearest or bilinear interpolation");
  const Eigen::Index d = shape.dims();
  if (quantized()) {
    if (latents.size() != 0)
      throw ShapeError("quantized set must not carry float latents");
    check_shape(codes.rows() == d, "code rows must equal latent dims");
    const auto& q = *quant;
    if (q.bits < 1 || q.bits > 8) throw ConfigError("quantization bits must be in [1,8]");
    check_shape(q.qmin.size() == d && q.qmax.size() == d,
                "quantization ranges must cover every latent dimension");
    for (Eigen::Index e = 0; e < d; ++e)
      if (!(q.qmin[e] <= q.qmax[e]))
        throw ValueError("quantization min > max in dimension " + std::to_string(e));
  } else {
    check_shape(latents.rows() == d || count() == 0,
                "latent rows must equal latent dims");
  }
  if (!labels.empty() && static_cast<Eigen::Index>(labels.size()) != count())
    throw ShapeError("labels length must match the latent count");
  if (norm) {
    NormStats dummy = *norm;  // length/positivity checks
    expand_stats(dummy, shape);
  }
}

NormStats compute_norm_stats(const Functaset& fs, NormKind kind, float gamma) {
  if (fs.quantized()) throw ValueError("compute stats on a dequantized set");
  if (!(gamma > 0)) throw ConfigError("norm scale gamma must be > 0");
  const Eigen::Index n = fs.count();
  if (n < 2) throw ValueError("norm stats need at least 2 latents");
  const Eigen::Index d = fs.dims();
  check_shape(fs.latents.rows() == d, "latent rows must equal latent dims");

  NormStats stats;
  stats.kind = kind;
  stats.gamma = gamma;

  auto moments = [&](auto&& keep_dim, Eigen::Index out_len, const char* what) {
    VecXd sum = VecXd::Zero(out_len), sumsq = VecXd::Zero(out_len);
    VecXd cnt = VecXd::Zero(out_len);
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index e = 0; e < d; ++e) {
        const Eigen::Index o = keep_dim(e);
        const double x = fs.latents(e, j);
        sum[o] += x;
        sumsq[o] += x * x;
        cnt[o] += 1;
      }
    stats.mu.resize(out_len);
    stats.sigma.resize(out_len);
    for (Eigen::Index o = 0; o < out_len; ++o) {
      const double mean = sum[o] / cnt[o];
      const double var = std::max(0.0, sumsq[o] / cnt[o] - mean * mean);
      stats.mu[o] = static_cast<float>(mean);
      stats.sigma[o] = static_cast<float>(std::sqrt(var));
      if (stats.sigma[o] == 0.0f)
        throw ValueError(std::string("zero variance in ") + what + " " +
                         std::to_string(o));
    }
  };

  switch (kind) {
    case NormKind::kScalar:
      moments([](Eigen::Index) { return Eigen::Index{0}; }, 1, "latent payload (scalar kind), index");
      break;
    case NormKind::kVector: {
      const int c = fs.shape.c;
      moments([c](Eigen::Index e) { return e % c; }, c, "latent channel");
      break;
    }
    case NormKind::kArray:
      moments([](Eigen::Index e) { return e; }, d, "latent dimension");
      break;
    default:
      throw ConfigError("unknown normalization kind");
  }
  return stats;
}

MatXf normalize_columns(const MatXf& latents, const LatentShape& shape,
                        const NormStats& stats) {
  check_shape(latents.rows() == shape.dims(), "latent rows must equal latent dims");
  auto [mu, denom] = expand_stats(stats, shape);
  return ((latents.colwise() - mu).array().colwise() / denom.array()).matrix();
}

MatXf denormalize_columns(const MatXf& latents, const LatentShape& shape,
                          const NormStats& stats) {
  check_shape(latents.rows() == shape.dims(), "latent rows must equal latent dims");
  auto [mu, denom] = expand_stats(stats, shape);
  return ((latents.array().colwise() * denom.array()).matrix().colwise() + mu);
}

Latent normalize(const Latent& z, const NormStats& stats) {
  z.shape.validate();
  MatXf flat = Eigen::Map<const MatXf>(z.values.data(), z.shape.dims(), 1);
  MatXf out = normalize_columns(flat, z.shape, stats);
  return {z.shape, Eigen::Map<const MatXf>(out.data(), z.shape.c, z.shape.cells())};
}

Latent denormalize(const Latent& z, const NormStats& stats) {
  z.shape.validate();
  MatXf flat = Eigen::Map<const MatXf>(z.values.data(), z.shape.dims(), 1);
  MatXf out = denormalize_columns(flat, z.shape, stats);
  return {z.shape, Eigen::Map<const MatXf>(out.data(), z.shape.c, z.shape.cells())};
}

Functaset quantize(const Functaset& fs, int bits) {
  if (bits < 1 || bits > 8) throw ConfigError("quantization bits must be in [1,8]");
  if (fs.quantized()) throw ValueError("functaset is already quantized");
  fs.validate();
  const Eigen::Index d = fs.dims();
  const Eigen::Index n = fs.count();
  if (n < 1) throw ValueError("cannot quantize an empty functaset");

  Functaset out = fs;
  out.latents.resize(0, 0);
  QuantSpec spec;
  spec.bits = bits;
  spec.qmin = fs.latents.rowwise().minCoeff();
  spec.qmax = fs.latents.rowwise().maxCoeff();
  const int levels = 1 << bits;
  out.codes.resize(d, n);
  for (Eigen::Index e = 0; e < d; ++e) {
    const float width = (spec.qmax[e] - spec.qmin[e]) / static_cast<float>(levels);
    for (Eigen::Index j = 0; j < n; ++j) {
      int code = 0;
      if (width > 0) {
        code = static_cast<int>(
            std::floor((fs.latents(e, j) - spec.qmin[e]) / width));
        code = std::clamp(code, 0, levels - 1);
      }
      out.codes(e, j) = static_cast<uint8_t>(code);
    }
  }
  out.quant = std::move(spec);
  return out;
}

Functaset dequantize(const Functaset& fs) {
  if (!fs.quantized()) throw ValueError("functaset is not quantized");
  fs.validate();
  const auto& spec = *fs.quant;
  const Eigen::Index d = fs.dims();
  const Eigen::Index n = fs.count();
  Functaset out = fs;
  out.quant.reset();
  out.codes.resize(0, 0);
  out.latents.resize(d, n);
  const int levels = 1 << spec.bits;
  for (Eigen::Index e = 0; e < d; ++e) {
    const float width = (spec.qmax[e] - spec.qmin[e]) / static_cast<float>(levels);
    for (Eigen::Index j = 0; j < n; ++j)
      out.latents(e, j) =
          spec.qmin[e] + (static_cast<float>(fs.codes(e, j)) + 0.5f) * width;
  }
  return out;
}

void save_functaset(const Functaset& fs, const std::string& path) {
  fs.validate();
  detail::atomic_write_file(path, [&](std::ostream& os) {
    detail::BinWriter wr{os};
    wr.bytes("SFTA", 4);
    wr.u32(1);
    wr.u8(static_cast<uint8_t>(fs.shape.rank));
    if (fs.shape.rank == 1) {
      wr.u32(static_cast<uint32_t>(fs.shape.dims()));
    } else {
      wr.u32(static_cast<uint32_t>(fs.shape.s));
      wr.u32(static_cast<uint32_t>(fs.shape.s));
      wr.u32(static_cast<uint32_t>(fs.shape.c));
    }
    wr.u8(static_cast<uint8_t>(fs.interp));
    wr.u32(static_cast<uint32_t>(fs.resolution));
    wr.u64(static_cast<uint64_t>(fs.count()));
    if (fs.norm) {
      wr.u8(static_cast<uint8_t>(fs.norm->kind));
      wr.f32(fs.norm->gamma);
      wr.mat(fs.norm->mu);
      wr.mat(fs.norm->sigma);
    } else {
      wr.u8(0);
      wr.f32(1.0f);
    }
    uint8_t flags = 0;
    if (!fs.labels.empty()) flags |= 1;
    if (fs.quantized()) flags |= 2;
    wr.u8(flags);
    if (fs.quantized()) {
      wr.u8(static_cast<uint8_t>(fs.quant->bits));
      wr.mat(fs.quant->qmin);
      wr.mat(fs.quant->qmax);
      wr.mat(fs.codes);
    } else {
      wr.mat(fs.latents);
    }
    if (!fs.labels.empty())
      wr.bytes(fs.labels.data(), fs.labels.size() * sizeof(uint16_t));
  });
}

Functaset load_functaset(const std::string& path) {
  auto is = detail::open_input(path);
  detail::BinReader rd{is};
  char magic[4];
  rd.bytes(magic, 4);
  if (std::string(magic, 4) != "SFTA")
    throw BadMagicError("not a functaset file: " + path);
  const auto version = rd.u32();
  if (version != 1)
    throw VersionError("unsupported functaset version " + std::to_string(version));

  Functaset fs;
  const auto rank = rd.u8();
  if (rank == 1) {
    fs.shape = LatentShape::vector(static_cast<int>(rd.u32()));
  } else if (rank == 3) {
    const auto s0 = rd.u32();
    const auto s1 = rd.u32();
    const auto c = rd.u32();
    if (s0 != s1) throw FormatError("latent grid must be square");
    fs.shape = LatentShape::spatial(static_cast<int>(s0), static_cast<int>(c));
  } else {
    throw FormatError("latent rank must be 1 or 3, got " + std::to_string(rank));
  }
  const auto interp = rd.u8();
  if (interp > 2) throw FormatError("unknown interpolation code " + std::to_string(interp));
  fs.interp = static_cast<InterpScheme>(interp);
  fs.resolution = static_cast<int>(rd.u32());
  const auto count64 = rd.u64();
  if (count64 > (1ull << 32))
    throw FormatError("implausible latent count " + std::to_string(count64));
  const auto n = static_cast<Eigen::Index>(count64);
  const Eigen::Index d = fs.shape.dims();

  const auto norm_kind = rd.u8();
  const float gamma = rd.f32();
  const Eigen::Index norm_len = norm_payload_len(norm_kind, fs.shape);
  if (norm_kind != 0) {
    NormStats stats;
    stats.kind = static_cast<NormKind>(norm_kind);
    stats.gamma = gamma;
    stats.mu.resize(norm_len);
    rd.mat(stats.mu);
    stats.sigma.resize(norm_len);
    rd.mat(stats.sigma);
    fs.norm = std::move(stats);
  }

  const auto flags = rd.u8();
  if (flags & ~uint8_t{3})
    throw FormatError("unknown flag bits " + std::to_string(flags));
  if (flags & 2) {
    QuantSpec spec;
    spec.bits = static_cast<int>(rd.u8());
    if (spec.bits < 1 || spec.bits > 8)
      throw FormatError("quantization bits out of range");
    spec.qmin.resize(d);
    rd.mat(spec.qmin);
    spec.qmax.resize(d);
    rd.mat(spec.qmax);
    fs.quant = std::move(spec);
    fs.codes.resize(d, n);
    rd.mat(fs.codes);
  } else {
    fs.latents.resize(d, n);
    rd.mat(fs.latents);
  }
  if (flags & 1) {
    fs.labels.resize(static_cast<std::size_t>(n));
    if (n > 0) rd.bytes(fs.labels.data(), fs.labels.size() * sizeof(uint16_t));
  }
  if (!rd.at_eof()) throw FormatError("trailing bytes after payload");
  fs.validate();
  return fs;
}

}  // namespace functakit
