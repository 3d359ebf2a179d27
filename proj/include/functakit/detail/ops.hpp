#pragma once

#include "functakit/common.hpp"

// Matrix-op backends for the hand-written forward/backward passes.
//
// PlainOps<S> is ordinary arithmetic. DualOps<S> carries a tangent alongside
// every value (forward-mode over the whole forward+backward computation);
// seeding the latent's tangent with a vector v makes the tangent of any
// computed gradient equal the Hessian-vector product H·v. That is how the
// meta-learner gets exact second-order gradients without an autodiff graph:
// each dual matrix product is just two or three plain GEMMs.

namespace functakit::detail {

template <class S>
struct DualScalar {
  S v{};
  S t{};
};

template <class S>
struct DualMat {
  MatX<S> v;
  MatX<S> t;
};

template <class S>
struct PlainOps {
  using Real = S;
  using Sc = S;
  using Mt = MatX<S>;

  static Mt zeros(Eigen::Index r, Eigen::Index c) { return Mt::Zero(r, c); }
  static Mt lift(const MatX<S>& m) { return m; }
  static const MatX<S>& value(const Mt& m) { return m; }

  static Mt mul_pm(const MatX<S>& a, const Mt& b) { return a * b; }
  static Mt mul_mm(const Mt& a, const Mt& b) { return a * b; }
  static Mt mul_pTm(const MatX<S>& a, const Mt& b) { return a.transpose() * b; }
  static Mt mul_m_mT(const Mt& a, const Mt& b) { return a * b.transpose(); }
  static Mt mul_m_pT(const Mt& a, const MatX<S>& b) { return a * b.transpose(); }

  static Mt add(const Mt& a, const Mt& b) { return a + b; }
  static Mt sub(const Mt& a, const Mt& b) { return a - b; }
  static Mt sub_p(const Mt& a, const MatX<S>& b) { return a - b; }
  static Mt cwise(const Mt& a, const Mt& b) { return a.cwiseProduct(b); }
  static Mt scale(const Mt& a, S s) { return a * s; }
  static void add_colvec(Mt& m, const VecX<S>& b) { m.colwise() += b; }

  // H = sin(omega*U), CF = omega*cos(omega*U)
  static void sin_fwd(const Mt& u, S omega, Mt& h, Mt& cf) {
    h = (u * omega).array().sin().matrix();
    cf = omega * (u * omega).array().cos().matrix();
  }

  static Mt rows(const Mt& m, Eigen::Index r0, Eigen::Index n) {
    return m.middleRows(r0, n);
  }
  static void set_rows(Mt& dst, Eigen::Index r0, const Mt& src) {
    dst.middleRows(r0, src.rows()) = src;
  }

  static void col_copy(Mt& dst, Eigen::Index j, const Mt& src, Eigen::Index i) {
    dst.col(j) = src.col(i);
  }
  static void col_axpy(Mt& dst, Eigen::Index j, const Mt& src, Eigen::Index i,
                       S w) {
    dst.col(j) += w * src.col(i);
  }
  static void col_scale_copy(Mt& dst, Eigen::Index j, const Mt& src,
                             Eigen::Index i, S w) {
    dst.col(j) = w * src.col(i);
  }

  static Mt rowsum(const Mt& m) { return m.rowwise().sum(); }

  // mean of squared entries of (Y - T); also returns the residual
  static Sc mse_residual(const Mt& y, const MatX<S>& target, Mt& residual) {
    residual = y - target;
    const S denom = static_cast<S>(residual.size());
    return residual.squaredNorm() / denom;
  }

  static S sc_value(Sc s) { return s; }
};

template <class S>
struct DualOps {
  using Real = S;
  using Sc = DualScalar<S>;
  using Mt = DualMat<S>;

  static Mt zeros(Eigen::Index r, Eigen::Index c) {
    return {MatX<S>::Zero(r, c), MatX<S>::Zero(r, c)};
  }
  static Mt lift(const MatX<S>& m) {
    return {m, MatX<S>::Zero(m.rows(), m.cols())};
  }
  static const MatX<S>& value(const Mt& m) { return m.v; }

  static Mt mul_pm(const MatX<S>& a, const Mt& b) {
    return {a * b.v, a * b.t};
  }
  static Mt mul_mm(const Mt& a, const Mt& b) {
    return {a.v * b.v, a.t * b.v + a.v * b.t};
  }
  static Mt mul_pTm(const MatX<S>& a, const Mt& b) {
    return {a.transpose() * b.v, a.transpose() * b.t};
  }
  static Mt mul_m_mT(const Mt& a, const Mt& b) {
    return {a.v * b.v.transpose(), a.t * b.v.transpose() + a.v * b.t.transpose()};
  }
  static Mt mul_m_pT(const Mt& a, const MatX<S>& b) {
    return {a.v * b.transpose(), a.t * b.transpose()};
  }

  static Mt add(const Mt& a, const Mt& b) { return {a.v + b.v, a.t + b.t}; }
  static Mt sub(const Mt& a, const Mt& b) { return {a.v - b.v, a.t - b.t}; }
  static Mt sub_p(const Mt& a, const MatX<S>& b) { return {a.v - b, a.t}; }
  static Mt cwise(const Mt& a, const Mt& b) {
    return {a.v.cwiseProduct(b.v),
            a.t.cwiseProduct(b.v) + a.v.cwiseProduct(b.t)};
  }
  static Mt scale(const Mt& a, S s) { return {a.v * s, a.t * s}; }
  static void add_colvec(Mt& m, const VecX<S>& b) { m.v.colwise() += b; }

  static void sin_fwd(const Mt& u, S omega, Mt& h, Mt& cf) {
    MatX<S> su = (u.v * omega).array().sin().matrix();
    MatX<S> cu = (u.v * omega).array().cos().matrix();
    h.v = su;
    h.t = omega * cu.cwiseProduct(u.t);
    cf.v = omega * cu;
    cf.t = -omega * omega * su.cwiseProduct(u.t);
  }

  static Mt rows(const Mt& m, Eigen::Index r0, Eigen::Index n) {
    return {m.v.middleRows(r0, n), m.t.middleRows(r0, n)};
  }
  static void set_rows(Mt& dst, Eigen::Index r0, const Mt& src) {
    dst.v.middleRows(r0, src.v.rows()) = src.v;
    dst.t.middleRows(r0, src.t.rows()) = src.t;
  }

  static void col_copy(Mt& dst, Eigen::Index j, const Mt& src, Eigen::Index i) {
    dst.v.col(j) = src.v.col(i);
    dst.t.col(j) = src.t.col(i);
  }
  static void col_axpy(Mt& dst, Eigen::Index j, const Mt& src, Eigen::Index i,
                       S w) {
    dst.v.col(j) += w * src.v.col(i);
    dst.t.col(j) += w * src.t.col(i);
  }
  static void col_scale_copy(Mt& dst, Eigen::Index j, const Mt& src,
                             Eigen::Index i, S w) {
    dst.v.col(j) = w * src.v.col(i);
    dst.t.col(j) = w * src.t.col(i);
  }

  static Mt rowsum(const Mt& m) { return {m.v.rowwise().sum(), m.t.rowwise().sum()}; }

  static Sc mse_residual(const Mt& y, const MatX<S>& target, Mt& residual) {
    residual.v = y.v - target;
    residual.t = y.t;
    const S denom = static_cast<S>(residual.v.size());
    Sc out;
    out.v = residual.v.squaredNorm() / denom;
    out.t = S(2) * residual.v.cwiseProduct(residual.t).sum() / denom;
    return out;
  }

  static S sc_value(Sc s) { return s.v; }
};

}  // namespace functakit::detail
