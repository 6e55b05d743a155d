#pragma once

// Monte-Carlo noisy expected hypervolume improvement over the multi-task GP
// posterior, a differentiable hypervolume-improvement node (gradients are the
// exclusive face areas of each candidate box), and the scalarization baseline.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "lambo/autodiff.hpp"
#include "lambo/gp.hpp"
#include "lambo/pareto.hpp"
#include "lambo/rng.hpp"

namespace lambo::acq {

// ---- exact hypervolume improvement with candidate gradients ----

namespace detail {

// (k-1)-volume of the exclusive part of the face {x_d = p_d} of box p,
// against competitor boxes q with q_d >= p_d
inline double exclusive_face(const mo::ObjectiveVector& p, std::size_t d,
                             const std::vector<const mo::ObjectiveVector*>& competitors,
                             const mo::ObjectiveVector& ref) {
  const std::size_t k = ref.size();
  std::vector<std::size_t> dims;
  for (std::size_t j = 0; j < k; ++j)
    if (j != d) dims.push_back(j);

  double face = 1.0;
  for (auto j : dims) face *= p[j] - ref[j];

  std::vector<std::vector<double>> clipped;  // competitor extents on the face
  for (const auto* q : competitors) {
    if ((*q)[d] < p[d]) continue;
    std::vector<double> e;
    bool positive = true;
    for (auto j : dims) {
      double v = std::min((*q)[j], p[j]) - ref[j];
      if (v <= 0.0) positive = false;
      e.push_back(v);
    }
    if (positive) clipped.push_back(std::move(e));
  }

  double covered = 0.0;
  if (dims.size() == 1) {
    for (const auto& e : clipped) covered = std::max(covered, e[0]);
  } else {
    std::vector<std::pair<double, double>> rects;
    for (const auto& e : clipped) rects.emplace_back(e[0], e[1]);
    covered = mo::detail::hv2(std::move(rects));
  }
  return std::max(0.0, face - covered);
}

}  // namespace detail

// HVI = HV(baseline ∪ candidates) − HV(baseline); optional gradient w.r.t.
// each candidate coordinate (exact a.e., zero at clipped coordinates)
inline double hvi_with_grad(const std::vector<mo::ObjectiveVector>& cand,
                            const std::vector<mo::ObjectiveVector>& base,
                            const mo::ObjectiveVector& ref,
                            std::vector<mo::ObjectiveVector>* grad_out = nullptr) {
  std::vector<mo::ObjectiveVector> all = base;
  all.insert(all.end(), cand.begin(), cand.end());
  const double hvi = mo::hypervolume(all, ref) - mo::hypervolume(base, ref);

  if (grad_out) {
    const std::size_t k = ref.size();
    grad_out->assign(cand.size(), mo::ObjectiveVector(k, 0.0));
    for (std::size_t i = 0; i < cand.size(); ++i) {
      const auto& p = cand[i];
      bool inside = true;
      for (std::size_t d = 0; d < k; ++d)
        if (p[d] <= ref[d]) inside = false;
      if (!inside) continue;
      std::vector<const mo::ObjectiveVector*> competitors;
      for (const auto& q : base) competitors.push_back(&q);
      for (std::size_t j = 0; j < cand.size(); ++j)
        if (j != i) competitors.push_back(&cand[j]);
      for (std::size_t d = 0; d < k; ++d)
        (*grad_out)[i][d] = detail::exclusive_face(p, d, competitors, ref);
    }
  }
  return hvi;
}

// tape node: candidates (m, k) -> scalar HVI against a fixed baseline
inline ad::Var hvi_node(ad::Var cand, std::vector<mo::ObjectiveVector> baseline,
                        mo::ObjectiveVector ref) {
  const std::size_t m = cand.val().dim(0), k = cand.val().dim(1);
  std::vector<mo::ObjectiveVector> rows(m, mo::ObjectiveVector(k));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t d = 0; d < k; ++d) rows[i][d] = cand.val().at2(i, d);
  std::vector<mo::ObjectiveVector> grad;
  const double value = hvi_with_grad(rows, baseline, ref, &grad);

  ad::Tape& tape = *cand.tape;
  const int ic = cand.id;
  return tape.push(Tensor::scalar(value), {ic}, [ic, grad, m, k](ad::Tape& t, int self) {
    const double g = t.grad(self)[0];
    Tensor& gc = t.grad(ic);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t d = 0; d < k; ++d) gc.at2(i, d) += g * grad[i][d];
  });
}

// ---- generic Monte-Carlo NEHVI over the joint posterior (value-level) ----

// joint posterior over baseline ∪ candidates (baseline rows first)
inline double nehvi_from_posterior(const gp::MultitaskPosterior& post, std::size_t nb,
                                   const mo::ObjectiveVector& ref, const Tensor& base_draws) {
  auto samples = gp::sample_posterior(post, base_draws);
  const std::size_t k = post.k, total = post.m;
  double acc = 0.0;
  for (const auto& f : samples) {
    std::vector<mo::ObjectiveVector> base_pts, cand_pts;
    for (std::size_t i = 0; i < nb; ++i) {
      mo::ObjectiveVector y(k);
      for (std::size_t a = 0; a < k; ++a) y[a] = f.at2(i, a);
      base_pts.push_back(std::move(y));
    }
    for (std::size_t i = nb; i < total; ++i) {
      mo::ObjectiveVector y(k);
      for (std::size_t a = 0; a < k; ++a) y[a] = f.at2(i, a);
      cand_pts.push_back(std::move(y));
    }
    auto front_idx = mo::pareto_front(base_pts);
    std::vector<mo::ObjectiveVector> front;
    for (auto i : front_idx) front.push_back(base_pts[i]);
    acc += hvi_with_grad(cand_pts, front, ref, nullptr);
  }
  return acc / static_cast<double>(samples.size());
}

inline double nehvi(gp::SurrogateModel& model, const gp::TrainState& state,
                    const std::vector<seq::TokenSequence>& candidates,
                    const std::vector<seq::TokenSequence>& baseline,
                    const mo::ObjectiveVector& ref, const Tensor& base_draws,
                    const seq::Vocabulary& vocab) {
  std::vector<seq::TokenSequence> all = baseline;
  all.insert(all.end(), candidates.begin(), candidates.end());
  auto post = gp::posterior(model, state, all, vocab);
  return nehvi_from_posterior(post, baseline.size(), ref, base_draws);
}

// ---- factored differentiable NEHVI for the inner loop ----
//
// The joint posterior sample over [train points, candidates] factors through
// the block Cholesky: the train-point block never depends on the candidates,
// so baseline samples, their fronts and hypervolumes are fixed per restart,
// and only the candidate-conditional pieces sit on the tape.

struct NehviContext {
  std::size_t n = 0, k = 0, batch = 0, num_samples = 0;
  Tensor train_feats;  // n x d
  Tensor lchol;        // chol of noisy joint train covariance, nk x nk
  Tensor alpha;        // L^-1 y_std, nk
  Tensor w;            // L^-1 (Kxx ⊗ B), nk x nk
  Tensor lxx;          // chol of posterior covariance at train points, nk x nk
  Tensor b_task;       // k x k
  gp::Standardizer std;
  double log_ls = 0.0, log_os = 0.0;
  mo::ObjectiveVector ref;
  std::vector<Tensor> eps_x;  // per sample, (nk, 1)
  std::vector<Tensor> eps_c;  // per sample, (bk, 1)
  std::vector<std::vector<mo::ObjectiveVector>> base_fronts;  // unstandardized
  std::vector<double> base_hv;
};

inline NehviContext make_nehvi_context(const gp::SurrogateModel& model,
                                       const gp::TrainState& state,
                                       const mo::ObjectiveVector& ref, std::size_t batch,
                                       std::size_t num_samples, Rng& rng) {
  NehviContext ctx;
  ctx.n = state.n();
  ctx.k = state.k();
  ctx.batch = batch;
  ctx.num_samples = num_samples;
  ctx.train_feats = state.feats;
  ctx.lchol = state.lchol;
  ctx.alpha = state.alpha;
  ctx.b_task = state.b;
  ctx.std = state.std;
  ctx.log_ls = model.hyper.log_lengthscale[0];
  ctx.log_os = model.hyper.log_outputscale[0];
  ctx.ref = ref;

  const std::size_t n = ctx.n, k = ctx.k, nk = n * k;
  Tensor kx = gp::matern52_matrix(state.feats, state.feats, model.hyper.lengthscale(),
                                  model.hyper.outputscale());
  Tensor kb({nk, nk});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t a = 0; a < k; ++a)
        for (std::size_t b2 = 0; b2 < k; ++b2)
          kb.at2(i * k + a, j * k + b2) = kx.at2(i, j) * state.b.at2(a, b2);
  ctx.w = linalg::solve_tri(state.lchol, kb, false);

  // posterior covariance at the train points and its factor
  Tensor sigma_xx({nk, nk});
  for (std::size_t i = 0; i < nk; ++i)
    for (std::size_t j = 0; j < nk; ++j) {
      double wtw = 0.0;
      for (std::size_t l = 0; l < nk; ++l) wtw += ctx.w.at2(l, i) * ctx.w.at2(l, j);
      sigma_xx.at2(i, j) = kb.at2(i, j) - wtw;
    }
  for (std::size_t i = 0; i < nk; ++i)
    for (std::size_t j = 0; j < i; ++j) {
      double avg = 0.5 * (sigma_xx.at2(i, j) + sigma_xx.at2(j, i));
      sigma_xx.at2(i, j) = avg;
      sigma_xx.at2(j, i) = avg;
    }
  ctx.lxx = linalg::cholesky_jittered(sigma_xx, nullptr, 1e-10, 1e-4);

  Tensor mu_x = linalg::matmul(linalg::transpose(ctx.w), ctx.alpha);  // nk, standardized

  for (std::size_t s = 0; s < num_samples; ++s) {
    Tensor ex = rng.normal_tensor({nk, 1});
    Tensor ec = rng.normal_tensor({batch * k, 1});
    // baseline sample, unstandardize, take its front
    std::vector<mo::ObjectiveVector> pts(n, mo::ObjectiveVector(k));
    for (std::size_t i = 0; i < nk; ++i) {
      double v = mu_x[i];
      for (std::size_t j = 0; j <= i; ++j) v += ctx.lxx.at2(i, j) * ex.at2(j, 0);
      pts[i / k][i % k] = v * ctx.std.scale[i % k] + ctx.std.mean[i % k];
    }
    auto front_idx = mo::pareto_front(pts);
    std::vector<mo::ObjectiveVector> front;
    for (auto i : front_idx) front.push_back(pts[i]);
    ctx.base_hv.push_back(mo::hypervolume(front, ref));
    ctx.base_fronts.push_back(std::move(front));
    ctx.eps_x.push_back(std::move(ex));
    ctx.eps_c.push_back(std::move(ec));
  }
  return ctx;
}

// unstandardized posterior mean at candidate features, (batch, k)
inline ad::Var posterior_mean_var(ad::Tape& tape, const NehviContext& ctx, ad::Var cand_feats) {
  ad::Var fx = tape.constant(ctx.train_feats);
  ad::Var lls = tape.constant(Tensor::scalar(ctx.log_ls));
  ad::Var los = tape.constant(Tensor::scalar(ctx.log_os));
  ad::Var kc = gp::matern52(cand_feats, fx, lls, los);
  ad::Var kcb = ad::kron(kc, tape.constant(ctx.b_task));  // bk x nk
  ad::Var a = ad::solve_tri(tape.constant(ctx.lchol), ad::transpose(kcb), false);
  const std::size_t bk = kcb.val().dim(0);
  ad::Var mu = ad::matmul(ad::transpose(a),
                          tape.constant(Tensor({ctx.n * ctx.k, 1}, ctx.alpha.values())));
  const std::size_t b = ctx.batch, k = ctx.k;
  Tensor scale({b, k}), shift({b, k});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t d = 0; d < k; ++d) {
      scale.at2(i, d) = ctx.std.scale[d];
      shift.at2(i, d) = ctx.std.mean[d];
    }
  (void)bk;
  return ad::add_const(ad::mul_const(ad::reshape(mu, {b, k}), std::move(scale)),
                       std::move(shift));
}

// differentiable MC NEHVI of the candidate batch through its pooled features
inline ad::Var nehvi_acq(ad::Tape& tape, const NehviContext& ctx, ad::Var cand_feats) {
  const std::size_t n = ctx.n, k = ctx.k, b = ctx.batch, nk = n * k, bk = b * k;
  ad::Var fx = tape.constant(ctx.train_feats);
  ad::Var lls = tape.constant(Tensor::scalar(ctx.log_ls));
  ad::Var los = tape.constant(Tensor::scalar(ctx.log_os));
  ad::Var bt = tape.constant(ctx.b_task);
  ad::Var lch = tape.constant(ctx.lchol);

  ad::Var kcb = ad::kron(gp::matern52(cand_feats, fx, lls, los), bt);       // bk x nk
  ad::Var kcc = ad::kron(gp::matern52(cand_feats, cand_feats, lls, los), bt);  // bk x bk
  ad::Var a = ad::solve_tri(lch, ad::transpose(kcb), false);                // nk x bk
  ad::Var mu_c = ad::matmul(ad::transpose(a),
                            tape.constant(Tensor({nk, 1}, ctx.alpha.values())));  // bk x 1

  // posterior cross- and self-covariance given the data
  ad::Var sig_cx = ad::sub(kcb, ad::matmul(ad::transpose(a), tape.constant(ctx.w)));
  ad::Var t = ad::solve_tri(tape.constant(ctx.lxx), ad::transpose(sig_cx), false);  // nk x bk
  ad::Var lcx = ad::transpose(t);                                                   // bk x nk
  ad::Var sig_cc =
      ad::sub(ad::sub(kcc, ad::matmul(ad::transpose(a), a)), ad::matmul(lcx, ad::transpose(lcx)));

  // fixed jitter keeps the taped factorization on the strictly-PD path
  double jit = 0.0;
  linalg::cholesky_jittered(sig_cc.val(), &jit, 1e-10, 1e-2);
  Tensor jeye = Tensor::zeros({bk, bk});
  for (std::size_t i = 0; i < bk; ++i) jeye.at2(i, i) = std::max(jit, 1e-10);
  ad::Var lcc = ad::cholesky(ad::add_const(sig_cc, std::move(jeye)));

  Tensor scale({b, k}), shift({b, k});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t d = 0; d < k; ++d) {
      scale.at2(i, d) = ctx.std.scale[d];
      shift.at2(i, d) = ctx.std.mean[d];
    }

  ad::Var acc = tape.constant(Tensor::scalar(0.0));
  for (std::size_t s = 0; s < ctx.num_samples; ++s) {
    ad::Var fs = ad::add(mu_c, ad::add(ad::matmul(lcx, tape.constant(ctx.eps_x[s])),
                                       ad::matmul(lcc, tape.constant(ctx.eps_c[s]))));
    ad::Var ys = ad::add_const(ad::mul_const(ad::reshape(fs, {b, k}), scale), shift);
    acc = ad::add(acc, hvi_node(ys, ctx.base_fronts[s], ctx.ref));
  }
  return ad::scale(acc, 1.0 / static_cast<double>(ctx.num_samples));
}

// ---- scalarization baseline ----

struct Normalizers {
  std::vector<double> lo, hi;

  static Normalizers from_pool(const std::vector<mo::ObjectiveVector>& ys) {
    Normalizers nz;
    const std::size_t k = ys.empty() ? 0 : ys[0].size();
    nz.lo.assign(k, 1e300);
    nz.hi.assign(k, -1e300);
    for (const auto& y : ys)
      for (std::size_t d = 0; d < k; ++d) {
        nz.lo[d] = std::min(nz.lo[d], y[d]);
        nz.hi[d] = std::max(nz.hi[d], y[d]);
      }
    return nz;
  }
  bool degenerate(std::size_t d) const { return !(hi[d] > lo[d]); }
  // min-max normalization; degenerate tasks fall back to the raw value
  double apply(double v, std::size_t d) const {
    return degenerate(d) ? v : (v - lo[d]) / (hi[d] - lo[d]);
  }
};

// sum over the batch of the per-candidate average normalized posterior mean
inline ad::Var scalarized_acq_var(ad::Tape& tape, const NehviContext& ctx, ad::Var cand_feats,
                                  const Normalizers& nz) {
  ad::Var mu = posterior_mean_var(tape, ctx, cand_feats);  // (b, k) unstandardized
  const std::size_t b = ctx.batch, k = ctx.k;
  Tensor coeff({b, k}), shift({b, k});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t d = 0; d < k; ++d) {
      if (nz.degenerate(d)) {
        coeff.at2(i, d) = 1.0;
        shift.at2(i, d) = 0.0;
      } else {
        coeff.at2(i, d) = 1.0 / (nz.hi[d] - nz.lo[d]);
        shift.at2(i, d) = -nz.lo[d] / (nz.hi[d] - nz.lo[d]);
      }
    }
  ad::Var norm = ad::add_const(ad::mul_const(mu, std::move(coeff)), std::move(shift));
  return ad::scale(ad::sum(norm), 1.0 / static_cast<double>(k));
}

inline double scalarized_acq(gp::SurrogateModel& model, const gp::TrainState& state,
                             const std::vector<seq::TokenSequence>& candidates,
                             const Normalizers& nz, const seq::Vocabulary& vocab) {
  auto post = gp::posterior(model, state, candidates, vocab);
  double acc = 0.0;
  for (std::size_t i = 0; i < post.m; ++i) {
    double avg = 0.0;
    for (std::size_t d = 0; d < post.k; ++d) avg += nz.apply(post.mean.at2(i, d), d);
    acc += avg / static_cast<double>(post.k);
  }
  return acc;
}

}  // namespace lambo::acq
