#pragma once

// Exact multi-task GP head on pooled DAE features: Matérn-5/2 over the
// feature space crossed with a coregionalization task covariance, trained
// jointly with the DAE by alternating supervised/unsupervised Adam steps.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <utility>
#include <vector>

#include "lambo/adam.hpp"
#include "lambo/autodiff.hpp"
#include "lambo/linalg.hpp"
#include "lambo/nn.hpp"
#include "lambo/rng.hpp"
#include "lambo/vocab.hpp"

namespace lambo::gp {

struct NonPositiveLengthscale : std::runtime_error {
  NonPositiveLengthscale() : std::runtime_error("lengthscale must be positive") {}
};
struct DataTooSmall : std::runtime_error {
  explicit DataTooSmall(const std::string& what) : std::runtime_error(what) {}
};

inline constexpr double kTaskDiagFloor = 1e-4;
inline constexpr double kLengthscalePriorMean = 0.7;
inline constexpr double kLengthscalePriorStd = 0.01;

struct MTGPHyperparams {
  std::size_t num_tasks = 0;
  Tensor log_lengthscale;  // scalar
  Tensor log_outputscale;  // scalar
  Tensor task_factor;      // k x k, B = LLᵀ + diag(exp(log_task_diag) + floor)
  Tensor log_task_diag;    // k
  Tensor log_noise;        // k, log observation variances

  static MTGPHyperparams init(std::size_t k) {
    MTGPHyperparams h;
    h.num_tasks = k;
    h.log_lengthscale = Tensor::scalar(std::log(kLengthscalePriorMean));
    h.log_outputscale = Tensor::scalar(0.0);
    h.task_factor = Tensor::eye(k);
    h.log_task_diag = Tensor::full({k}, std::log(1e-2));
    h.log_noise = Tensor::full({k}, std::log(0.25));
    return h;
  }

  double lengthscale() const { return std::exp(log_lengthscale[0]); }
  double outputscale() const { return std::exp(log_outputscale[0]); }
  double noise(std::size_t task) const { return std::exp(log_noise[task]); }

  template <typename Fn>
  void visit(Fn&& fn) {
    fn("gp.log_lengthscale", log_lengthscale);
    fn("gp.log_outputscale", log_outputscale);
    fn("gp.task_factor", task_factor);
    fn("gp.log_task_diag", log_task_diag);
    fn("gp.log_noise", log_noise);
  }
};

struct HyperVars {
  ad::Var log_lengthscale, log_outputscale, task_factor, log_task_diag, log_noise;
  std::vector<std::pair<std::string, ad::Var>> named;
};

inline HyperVars lift_hyper(ad::Tape& tape, MTGPHyperparams& h, bool trainable) {
  HyperVars v;
  h.visit([&](const char* name, Tensor& t) {
    ad::Var var = trainable ? tape.leaf(t) : tape.constant(t);
    v.named.emplace_back(name, var);
  });
  v.log_lengthscale = v.named[0].second;
  v.log_outputscale = v.named[1].second;
  v.task_factor = v.named[2].second;
  v.log_task_diag = v.named[3].second;
  v.log_noise = v.named[4].second;
  return v;
}

// k(u,u') = s (1 + √5ρ + 5ρ²/3) exp(−√5ρ),  ρ = ‖u−u'‖/ℓ
inline ad::Var matern52(ad::Var fa, ad::Var fb, ad::Var log_ls, ad::Var log_os) {
  ad::Var sq = ad::pairwise_sqdist(fa, fb);
  ad::Var rho = ad::smul(ad::vsqrt(sq), ad::vexp(ad::neg(log_ls)));
  ad::Var t = ad::scale(rho, std::sqrt(5.0));
  ad::Var poly = ad::add_scalar(ad::add(t, ad::scale(ad::mul(t, t), 1.0 / 3.0)), 1.0);
  return ad::smul(ad::mul(poly, ad::vexp(ad::neg(t))), ad::vexp(log_os));
}

inline Tensor matern52_matrix(const Tensor& fa, const Tensor& fb, double lengthscale,
                              double outputscale) {
  if (!(lengthscale > 0.0)) throw NonPositiveLengthscale();
  ad::Tape tape;
  return matern52(tape.constant(fa), tape.constant(fb),
                  tape.constant(Tensor::scalar(std::log(lengthscale))),
                  tape.constant(Tensor::scalar(std::log(outputscale))))
      .val();
}

inline ad::Var task_cov(ad::Tape& tape, const HyperVars& h) {
  (void)tape;
  ad::Var b = ad::matmul(h.task_factor, ad::transpose(h.task_factor));
  ad::Var diag = ad::add_scalar(ad::vexp(h.log_task_diag), kTaskDiagFloor);
  return ad::add(b, ad::diag_embed(diag));
}

// per-output observation noise vector laid out point-major, task-minor (nk)
inline ad::Var noise_vector(ad::Tape& tape, const HyperVars& h, std::size_t n) {
  ad::Var ones = tape.constant(Tensor::full({n, 1}, 1.0));
  const std::size_t k = h.log_noise.val().numel();
  ad::Var col = ad::reshape(ad::vexp(h.log_noise), {k, 1});
  return ad::reshape(ad::kron(ones, col), {n * k});
}

// pooled discriminative features for a batch of sequences, (n, d)
inline ad::Var pooled_features_var(ad::Tape& tape, const nn::DAEVars& v,
                                   const std::vector<seq::TokenSequence>& xs,
                                   const seq::Vocabulary& vocab) {
  Tensor mask = nn::make_mask(xs, vocab);
  ad::Var z = nn::encode(tape, v, xs, vocab);
  return nn::pool(nn::disc_encode(z, v, mask), mask);
}

inline Tensor pooled_features(nn::DAEParams& dae, const std::vector<seq::TokenSequence>& xs,
                              const seq::Vocabulary& vocab) {
  ad::Tape tape;
  auto v = nn::lift(tape, dae, false);
  return pooled_features_var(tape, v, xs, vocab).val();
}

struct Standardizer {
  Tensor mean, scale;  // k each

  static Standardizer from(const Tensor& y) {
    const std::size_t n = y.dim(0), k = y.dim(1);
    Standardizer s;
    s.mean = Tensor::zeros({k});
    s.scale = Tensor::zeros({k});
    for (std::size_t a = 0; a < k; ++a) {
      double mu = 0.0;
      for (std::size_t i = 0; i < n; ++i) mu += y.at2(i, a);
      mu /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) var += (y.at2(i, a) - mu) * (y.at2(i, a) - mu);
      var /= static_cast<double>(n);
      s.mean[a] = mu;
      s.scale[a] = std::max(std::sqrt(var), 1e-12);
    }
    return s;
  }
  Tensor standardize(const Tensor& y) const {
    Tensor out = y;
    for (std::size_t i = 0; i < y.dim(0); ++i)
      for (std::size_t a = 0; a < y.dim(1); ++a)
        out.at2(i, a) = (y.at2(i, a) - mean[a]) / scale[a];
    return out;
  }
  Tensor unstandardize(const Tensor& ystd) const {
    Tensor out = ystd;
    for (std::size_t i = 0; i < ystd.dim(0); ++i)
      for (std::size_t a = 0; a < ystd.dim(1); ++a)
        out.at2(i, a) = ystd.at2(i, a) * scale[a] + mean[a];
    return out;
  }
};

// joint train covariance: kron(K_x, B) + diag(noise) (+ fixed jitter)
inline ad::Var joint_train_cov(ad::Tape& tape, ad::Var feats, const HyperVars& h, std::size_t n,
                               double jitter) {
  ad::Var kx = matern52(feats, feats, h.log_lengthscale, h.log_outputscale);
  ad::Var cov = ad::add(ad::kron(kx, task_cov(tape, h)), ad::diag_embed(noise_vector(tape, h, n)));
  if (jitter > 0.0) {
    const std::size_t nk = cov.val().dim(0);
    Tensor eye_j = Tensor::zeros({nk, nk});
    for (std::size_t i = 0; i < nk; ++i) eye_j.at2(i, i) = jitter;
    cov = ad::add_const(cov, std::move(eye_j));
  }
  return cov;
}

// pick the jitter the value-level Cholesky needs so the taped factorization
// succeeds on the first try
inline double required_jitter(const Tensor& cov) {
  double j = 0.0;
  linalg::cholesky_jittered(cov, &j);
  return j;
}

// negative log marginal likelihood of the standardized targets plus the
// negative log prior density of the lengthscale
inline ad::Var nlml(ad::Tape& tape, ad::Var feats, const Tensor& y_std, const HyperVars& h,
                    double* used_jitter = nullptr) {
  const std::size_t n = y_std.dim(0), k = y_std.dim(1);
  ad::Var cov0 = joint_train_cov(tape, feats, h, n, 0.0);
  const double jitter = required_jitter(cov0.val());
  ad::Var cov = jitter > 0.0 ? joint_train_cov(tape, feats, h, n, jitter) : cov0;
  if (used_jitter) *used_jitter = jitter;

  ad::Var l = ad::cholesky(cov);
  Tensor yvec(std::vector<std::size_t>{n * k}, y_std.values());
  ad::Var alpha = ad::solve_tri(l, tape.constant(yvec), false);
  ad::Var quad = ad::scale(ad::sum(ad::mul(alpha, alpha)), 0.5);
  ad::Var logdet = ad::sum(ad::vlog(ad::take_diag(l)));
  const double cnorm = 0.5 * static_cast<double>(n * k) * std::log(2.0 * std::numbers::pi);
  ad::Var data_term = ad::add_scalar(ad::add(quad, logdet), cnorm);

  ad::Var dl = ad::add_scalar(ad::vexp(h.log_lengthscale), -kLengthscalePriorMean);
  const double inv2var = 0.5 / (kLengthscalePriorStd * kLengthscalePriorStd);
  ad::Var prior = ad::add_scalar(
      ad::scale(ad::mul(dl, dl), inv2var),
      std::log(kLengthscalePriorStd * std::sqrt(2.0 * std::numbers::pi)));
  return ad::add(data_term, prior);
}

struct SurrogateModel {
  nn::DAEParams dae;
  MTGPHyperparams hyper;
};

struct TrainState {
  std::vector<seq::TokenSequence> inputs;
  Tensor y;  // raw targets n x k
  Standardizer std;
  Tensor feats;   // n x d
  Tensor b;       // task covariance k x k
  Tensor lchol;   // (nk) x (nk) Cholesky of joint train covariance
  Tensor alpha;   // nk, L⁻¹ y_std
  double jitter = 0.0;
  std::size_t n() const { return y.dim(0); }
  std::size_t k() const { return y.dim(1); }
};

inline TrainState make_train_state(SurrogateModel& model,
                                   std::vector<seq::TokenSequence> inputs, Tensor y,
                                   const seq::Vocabulary& vocab) {
  TrainState s;
  s.inputs = std::move(inputs);
  s.y = std::move(y);
  s.std = Standardizer::from(s.y);
  s.feats = pooled_features(model.dae, s.inputs, vocab);

  ad::Tape tape;
  auto h = lift_hyper(tape, model.hyper, false);
  s.b = task_cov(tape, h).val();
  Tensor cov = joint_train_cov(tape, tape.constant(s.feats), h, s.n(), 0.0).val();
  s.lchol = linalg::cholesky_jittered(cov, &s.jitter);
  Tensor ystd = s.std.standardize(s.y);
  Tensor yvec(std::vector<std::size_t>{s.n() * s.k()}, ystd.values());
  s.alpha = linalg::solve_tri(s.lchol, yvec, false);
  return s;
}

struct MultitaskPosterior {
  Tensor mean;  // m x k, un-standardized
  Tensor cov;   // (mk) x (mk), point-major task-minor, un-standardized
  std::size_t m = 0, k = 0;
};

// exact noiseless conditional at candidate sequences
inline MultitaskPosterior posterior(SurrogateModel& model, const TrainState& state,
                                    const std::vector<seq::TokenSequence>& candidates,
                                    const seq::Vocabulary& vocab) {
  const std::size_t n = state.n(), k = state.k(), m = candidates.size();
  Tensor fs = pooled_features(model.dae, candidates, vocab);
  const double ls = model.hyper.lengthscale(), os = model.hyper.outputscale();
  Tensor kxs = matern52_matrix(fs, state.feats, ls, os);  // m x n
  Tensor kss = matern52_matrix(fs, fs, ls, os);           // m x m

  auto kron_b = [&](const Tensor& kx) {
    const std::size_t r = kx.dim(0), c = kx.dim(1);
    Tensor out({r * k, c * k});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        for (std::size_t a = 0; a < k; ++a)
          for (std::size_t b2 = 0; b2 < k; ++b2)
            out.at2(i * k + a, j * k + b2) = kx.at2(i, j) * state.b.at2(a, b2);
    return out;
  };
  Tensor kcross = kron_b(kxs);  // mk x nk
  Tensor kprior = kron_b(kss);  // mk x mk

  // mean_std = Kcross K⁻¹ y = (L⁻¹ Kcrossᵀ)ᵀ α
  Tensor v = linalg::solve_tri(state.lchol, linalg::transpose(kcross), false);  // nk x mk
  Tensor mean_vec = linalg::matmul(linalg::transpose(v), state.alpha);          // mk
  Tensor cov_std({m * k, m * k});
  {
    Tensor vtv = linalg::matmul(linalg::transpose(v), v);
    for (std::size_t i = 0; i < m * k; ++i)
      for (std::size_t j = 0; j < m * k; ++j) {
        double cij = kprior.at2(i, j) - vtv.at2(i, j);
        double cji = kprior.at2(j, i) - vtv.at2(j, i);
        cov_std.at2(i, j) = 0.5 * (cij + cji);
      }
  }

  MultitaskPosterior post;
  post.m = m;
  post.k = k;
  post.mean = Tensor({m, k});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t a = 0; a < k; ++a)
      post.mean.at2(i, a) = mean_vec[i * k + a] * state.std.scale[a] + state.std.mean[a];
  post.cov = Tensor({m * k, m * k});
  for (std::size_t i = 0; i < m * k; ++i)
    for (std::size_t j = 0; j < m * k; ++j)
      post.cov.at2(i, j) =
          cov_std.at2(i, j) * state.std.scale[i % k] * state.std.scale[j % k];
  return post;
}

// reparameterized draws: mean + chol(cov) · base_draw, one (m, k) matrix per row
inline std::vector<Tensor> sample_posterior(const MultitaskPosterior& post,
                                            const Tensor& base_draws) {
  const std::size_t s = base_draws.dim(0), mk = base_draws.dim(1);
  Tensor l = linalg::cholesky_psd(post.cov);
  std::vector<Tensor> out;
  out.reserve(s);
  for (std::size_t r = 0; r < s; ++r) {
    Tensor sample({post.m, post.k});
    for (std::size_t i = 0; i < mk; ++i) {
      double x = post.mean[i];
      for (std::size_t j = 0; j <= i; ++j) x += l.at2(i, j) * base_draws.at2(r, j);
      sample[i] = x;
    }
    out.push_back(std::move(sample));
  }
  return out;
}

// joint Gaussian negative log density of y under N(mean, cov)
inline double gaussian_nll(const Tensor& yvec, const Tensor& meanvec, const Tensor& cov) {
  const std::size_t n = yvec.numel();
  Tensor l = linalg::cholesky_jittered(cov);
  Tensor r({std::vector<std::size_t>{n}});
  for (std::size_t i = 0; i < n; ++i) r[i] = yvec[i] - meanvec[i];
  Tensor a = linalg::solve_tri(l, r, false);
  double quad = 0.0, logdet = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    quad += a[i] * a[i];
    logdet += std::log(l.at2(i, i));
  }
  return 0.5 * quad + logdet + 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
}

struct FitSchedule {
  double lr = 5e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.0;
  double beta2 = 0.01;
  std::size_t max_epochs = 256;
  std::size_t patience = 32;
  double rel_tol = 1e-3;
  double holdout_frac = 0.1;
  double mask_ratio = 0.125;
};

struct FitResult {
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_holdout_nll = 0.0;
  double nlml_first = 0.0;  // train NLML before any update
  double nlml_after_first_epoch = 0.0;
  std::vector<double> holdout_nll_by_epoch;
};

// holdout NLL of raw targets under the noisy predictive distribution
inline double holdout_nll(SurrogateModel& model, TrainState& train,
                          const std::vector<seq::TokenSequence>& ho_inputs, const Tensor& ho_y,
                          const seq::Vocabulary& vocab) {
  MultitaskPosterior post = posterior(model, train, ho_inputs, vocab);
  const std::size_t m = post.m, k = post.k;
  Tensor cov = post.cov;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t a = 0; a < k; ++a) {
      const double sd = train.std.scale[a];
      cov.at2(i * k + a, i * k + a) += model.hyper.noise(a) * sd * sd;
    }
  Tensor yvec(std::vector<std::size_t>{m * k}, ho_y.values());
  Tensor mvec(std::vector<std::size_t>{m * k}, post.mean.values());
  return gaussian_nll(yvec, mvec, cov);
}

// Alternating joint training: one full-batch GP step (marginal-likelihood
// loss through features and kernel hyperparameters) and one full-batch
// masked-reconstruction step per epoch, with holdout early stopping on the
// predictive NLL. Returns the best-holdout parameters in-place.
inline FitResult fit(SurrogateModel& model, const std::vector<seq::TokenSequence>& inputs,
                     const Tensor& y, const seq::Vocabulary& vocab, const FitSchedule& sched,
                     Rng& rng) {
  const std::size_t n = inputs.size(), k = y.dim(1);
  const std::size_t n_hold = std::max<std::size_t>(1, std::llround(sched.holdout_frac * n));
  if (n < n_hold + 2) throw DataTooSmall("fit: need at least 2 training points after holdout");

  auto hold_idx = rng.sample_without_replacement(n, n_hold);
  std::vector<bool> is_hold(n, false);
  for (auto i : hold_idx) is_hold[i] = true;
  std::vector<seq::TokenSequence> tr_x, ho_x;
  std::vector<std::size_t> tr_rows, ho_rows;
  for (std::size_t i = 0; i < n; ++i) {
    (is_hold[i] ? ho_x : tr_x).push_back(inputs[i]);
    (is_hold[i] ? ho_rows : tr_rows).push_back(i);
  }
  auto rows_of = [&](const std::vector<std::size_t>& rows) {
    Tensor out({rows.size(), k});
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t a = 0; a < k; ++a) out.at2(i, a) = y.at2(rows[i], a);
    return out;
  };
  Tensor tr_y = rows_of(tr_rows), ho_y = rows_of(ho_rows);
  Standardizer std_tr = Standardizer::from(tr_y);
  Tensor tr_ystd = std_tr.standardize(tr_y);

  opt::AdamConfig acfg;
  acfg.lr = sched.lr;
  acfg.beta1 = sched.beta1;
  acfg.beta2 = sched.beta2;
  acfg.weight_decay = sched.weight_decay;
  opt::Adam adam(acfg);

  FitResult res;
  nn::DAEParams best_dae = model.dae;
  MTGPHyperparams best_hyper = model.hyper;
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_improve = 0;

  for (std::size_t epoch = 0; epoch < sched.max_epochs; ++epoch) {
    // supervised step: NLML through DAE features and GP hyperparameters
    {
      ad::Tape tape;
      auto dv = nn::lift(tape, model.dae, true);
      auto hv = lift_hyper(tape, model.hyper, true);
      ad::Var feats = pooled_features_var(tape, dv, tr_x, vocab);
      ad::Var loss = nlml(tape, feats, tr_ystd, hv);
      if (epoch == 0) res.nlml_first = loss.val()[0];
      tape.backward(loss);
      adam.begin_step();
      for (auto& [name, var] : dv.named) {
        Tensor* p = nullptr;
        model.dae.visit([&](const char* nm, Tensor& t) {
          if (name == nm) p = &t;
        });
        adam.update(name, *p, tape.grad_of(var), true);
      }
      for (auto& [name, var] : hv.named) {
        Tensor* p = nullptr;
        model.hyper.visit([&](const char* nm, Tensor& t) {
          if (name == nm) p = &t;
        });
        adam.update(name, *p, tape.grad_of(var), false);  // no decay on log-scale params
      }
    }
    // unsupervised step: masked-token reconstruction on the training inputs
    {
      std::vector<seq::TokenSequence> corrupted;
      std::vector<seq::CorruptionPlan> plans;
      for (const auto& x : tr_x) {
        std::size_t len = x.length(vocab);
        auto plan =
            seq::select_positions(x, vocab, seq::training_mask_count(len, sched.mask_ratio), rng);
        plans.push_back(plan);
        corrupted.push_back(seq::apply_mask_corruption(x, plan, vocab));
      }
      ad::Tape tape;
      auto dv = nn::lift(tape, model.dae, true);
      Tensor mask = nn::make_mask(corrupted, vocab);
      ad::Var z = nn::encode(tape, dv, corrupted, vocab);
      ad::Var logits = nn::mlm_logits(z, nn::disc_encode(z, dv, mask), dv, mask);
      ad::Var loss = nn::mlm_loss(logits, tr_x, plans);
      tape.backward(loss);
      adam.begin_step();
      for (auto& [name, var] : dv.named) {
        Tensor* p = nullptr;
        model.dae.visit([&](const char* nm, Tensor& t) {
          if (name == nm) p = &t;
        });
        adam.update(name, *p, tape.grad_of(var), true);
      }
    }

    if (epoch == 0) {
      ad::Tape tape;
      auto dv = nn::lift(tape, model.dae, false);
      auto hv = lift_hyper(tape, model.hyper, false);
      ad::Var feats = pooled_features_var(tape, dv, tr_x, vocab);
      res.nlml_after_first_epoch = nlml(tape, feats, tr_ystd, hv).val()[0];
    }

    TrainState tr_state = make_train_state(model, tr_x, tr_y, vocab);
    const double nll = holdout_nll(model, tr_state, ho_x, ho_y, vocab);
    res.holdout_nll_by_epoch.push_back(nll);
    res.epochs_run = epoch + 1;
    const bool improved = nll < best - sched.rel_tol * std::abs(best);
    if (nll < best) {
      best = nll;
      best_dae = model.dae;
      best_hyper = model.hyper;
      res.best_epoch = epoch;
    }
    if (improved) {
      since_improve = 0;
    } else if (++since_improve >= sched.patience) {
      break;
    }
  }

  model.dae = best_dae;
  model.hyper = best_hyper;
  res.best_holdout_nll = best;
  return res;
}

// Spearman rank correlation; average ranks for ties.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& x) {
    const std::size_t n = x.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
    std::vector<double> r(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && x[idx[j + 1]] == x[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
      i = j + 1;
    }
    return r;
  };
  auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += ra[i], mb += rb[i];
  ma /= n;
  mb /= n;
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  return num / std::max(std::sqrt(da * db), 1e-300);
}

}  // namespace lambo::gp
