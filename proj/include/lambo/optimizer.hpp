#pragma once

// The optimizer proper: rank-weighted base-set construction, corruption-based
// latent initialization, the entropy-regularized latent ascent inner loop, and
// the fit-propose-evaluate outer loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <stdexcept>
#include <vector>

#include "lambo/acquisition.hpp"
#include "lambo/gp.hpp"
#include "lambo/nn.hpp"
#include "lambo/pareto.hpp"
#include "lambo/rng.hpp"

namespace lambo::opt {

struct OracleFailure : std::runtime_error {
  explicit OracleFailure(const std::string& what) : std::runtime_error(what) {}
};

struct CandidateRecord {
  seq::TokenSequence x;
  mo::ObjectiveVector y;
  std::size_t round = 0;  // 0 = start pool
};

// Every observation ever made, with current / historical Pareto flags.
struct Pool {
  std::vector<CandidateRecord> members;
  std::vector<bool> current_pareto;
  std::vector<bool> historical_pareto;

  void append(CandidateRecord rec) {
    members.push_back(std::move(rec));
    historical_pareto.push_back(false);
    recompute_pareto();
  }
  void append_batch(std::vector<CandidateRecord> recs) {
    for (auto& r : recs) {
      members.push_back(std::move(r));
      historical_pareto.push_back(false);
    }
    recompute_pareto();
  }
  void recompute_pareto() {
    std::vector<mo::ObjectiveVector> ys;
    for (const auto& m : members) ys.push_back(m.y);
    current_pareto.assign(members.size(), false);
    for (auto i : mo::pareto_front(ys)) current_pareto[i] = true;
    for (std::size_t i = 0; i < members.size(); ++i)
      if (current_pareto[i]) historical_pareto[i] = true;
  }
  std::vector<seq::TokenSequence> inputs() const {
    std::vector<seq::TokenSequence> out;
    for (const auto& m : members) out.push_back(m.x);
    return out;
  }
  Tensor targets() const {
    const std::size_t n = members.size(), k = members.empty() ? 0 : members[0].y.size();
    Tensor y({n, k});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t a = 0; a < k; ++a) y.at2(i, a) = members[i].y[a];
    return y;
  }
};

// softmax(-log(1 + r_max)/tau) over dense per-objective ranks (0 = best)
inline std::vector<double> rank_weights(const Pool& pool, double tau) {
  const std::size_t n = pool.members.size();
  const std::size_t k = pool.members[0].y.size();
  std::vector<std::size_t> r_max(n, 0);
  for (std::size_t d = 0; d < k; ++d) {
    std::vector<double> vals;
    for (const auto& m : pool.members) vals.push_back(m.y[d]);
    std::vector<double> distinct = vals;
    std::sort(distinct.begin(), distinct.end(), std::greater<>());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t rank =
          std::lower_bound(distinct.begin(), distinct.end(), vals[i], std::greater<>()) -
          distinct.begin();
      r_max[i] = std::max(r_max[i], rank);
    }
  }
  std::vector<double> w(n);
  double mx = -1e300;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = -std::log1p(static_cast<double>(r_max[i])) / tau;
    mx = std::max(mx, w[i]);
  }
  double z = 0.0;
  for (auto& x : w) {
    x = std::exp(x - mx);
    z += x;
  }
  for (auto& x : w) x /= z;
  return w;
}

namespace detail {

// weighted sampling without replacement from `pool_idx` by global weights
inline std::vector<std::size_t> weighted_wo_replacement(const std::vector<std::size_t>& pool_idx,
                                                        const std::vector<double>& weights,
                                                        std::size_t count, Rng& rng) {
  std::vector<std::size_t> avail = pool_idx;
  std::vector<std::size_t> out;
  while (out.size() < count && !avail.empty()) {
    std::vector<double> w;
    for (auto i : avail) w.push_back(weights[i]);
    const std::size_t pick = rng.categorical(w);
    out.push_back(avail[pick]);
    avail.erase(avail.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  return out;
}

}  // namespace detail

struct BaseSet {
  std::vector<std::size_t> indices;  // into pool.members
  bool filled_with_replacement = false;
};

// b base sequences: current Pareto first, then historical Pareto, then the
// rest of history, rank-weight sampled without replacement at each stage
inline BaseSet select_base_set(const Pool& pool, std::size_t b, double tau, Rng& rng) {
  const auto w = rank_weights(pool, tau);
  const std::size_t n = pool.members.size();
  std::vector<std::size_t> cur, hist, rest;
  for (std::size_t i = 0; i < n; ++i) {
    if (pool.current_pareto[i])
      cur.push_back(i);
    else if (pool.historical_pareto[i])
      hist.push_back(i);
    else
      rest.push_back(i);
  }

  BaseSet out;
  if (cur.size() <= b) {
    out.indices = cur;
  } else {
    out.indices = detail::weighted_wo_replacement(cur, w, b, rng);
  }
  if (out.indices.size() < b) {
    auto more = detail::weighted_wo_replacement(hist, w, b - out.indices.size(), rng);
    out.indices.insert(out.indices.end(), more.begin(), more.end());
  }
  if (out.indices.size() < b) {
    auto more = detail::weighted_wo_replacement(rest, w, b - out.indices.size(), rng);
    out.indices.insert(out.indices.end(), more.begin(), more.end());
  }
  while (out.indices.size() < b) {  // pool smaller than b
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    std::vector<double> wa = w;
    out.indices.push_back(all[rng.categorical(wa)]);
    out.filled_with_replacement = true;
  }
  return out;
}

// b weighted draws with replacement from the base set
inline std::vector<std::size_t> restart_draw(const std::vector<std::size_t>& base_indices,
                                             const std::vector<double>& base_weights,
                                             std::size_t b, Rng& rng) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < b; ++i) out.push_back(base_indices[rng.categorical(base_weights)]);
  return out;
}

struct InnerLoopConfig {
  std::size_t restarts = 16;
  std::size_t j_max = 32;
  double eta = 0.1;
  double lambda = 1e-2;
  std::size_t batch = 16;
  std::size_t num_mutations = 1;
  std::size_t mc_samples = 2;
  double tau = 1.0;
};

enum class AcqKind { Nehvi, Scalarized };

struct LatentInit {
  std::vector<seq::TokenSequence> bases;      // uncorrupted
  std::vector<seq::TokenSequence> corrupted;  // mask-corrupted
  std::vector<seq::CorruptionPlan> plans;
  Tensor z0;    // (b, t, d)
  Tensor mask;  // (b, t) non-padding mask of the corrupted batch
  Tensor sel;   // (b, t) plan-position selection
};

inline LatentInit init_latents(const std::vector<seq::TokenSequence>& bases,
                               gp::SurrogateModel& model, std::size_t num_mutations,
                               const seq::Vocabulary& vocab, Rng& rng) {
  LatentInit li;
  li.bases = bases;
  for (const auto& b : bases) {
    auto plan = seq::select_positions(b, vocab, num_mutations, rng);
    li.corrupted.push_back(seq::apply_mask_corruption(b, plan, vocab));
    li.plans.push_back(std::move(plan));
  }
  li.mask = nn::make_mask(li.corrupted, vocab);
  li.sel = nn::plan_selection(li.plans, bases.size(), bases[0].t_max());
  ad::Tape tape;
  auto dv = nn::lift(tape, model.dae, false);
  li.z0 = nn::encode(tape, dv, li.corrupted, vocab).val();
  return li;
}

struct InnerResult {
  std::vector<seq::TokenSequence> batch;
  double value = -std::numeric_limits<double>::infinity();
  std::size_t best_restart = 0;
  bool contains_pool_duplicates = false;
  double mean_entropy = 0.0;  // final-step proposal entropy, averaged over restarts
  std::vector<std::vector<double>> restart_best_history;  // best-so-far per step
  std::vector<std::vector<double>> entropy_history;       // proposal entropy per step
};

namespace detail {

// acquisition of a fixed candidate batch (no gradients)
inline double score_batch(const acq::NehviContext& ctx, AcqKind kind,
                          const acq::Normalizers& nz, gp::SurrogateModel& model,
                          const std::vector<seq::TokenSequence>& cands,
                          const seq::Vocabulary& vocab) {
  Tensor feats = gp::pooled_features(model.dae, cands, vocab);
  ad::Tape tape;
  ad::Var f = tape.constant(feats);
  return (kind == AcqKind::Nehvi ? acq::nehvi_acq(tape, ctx, f)
                                 : acq::scalarized_acq_var(tape, ctx, f, nz))
      .val()[0];
}

}  // namespace detail

// One restart-and-ascend pass over the latent batch; shared acquisition
// context so values are comparable across restarts.
inline InnerResult run_inner_loop(const Pool& pool, gp::SurrogateModel& model,
                                  const gp::TrainState& state, const InnerLoopConfig& cfg,
                                  const mo::ObjectiveVector& ref, const seq::Vocabulary& vocab,
                                  Rng& rng, AcqKind kind = AcqKind::Nehvi) {
  acq::Normalizers nz;
  if (kind == AcqKind::Scalarized) {
    std::vector<mo::ObjectiveVector> ys;
    for (const auto& m : pool.members) ys.push_back(m.y);
    nz = acq::Normalizers::from_pool(ys);
  }

  Rng draw_rng = rng.substream(0x9eb1);
  auto ctx = acq::make_nehvi_context(model, state, ref, cfg.batch, cfg.mc_samples, draw_rng);

  const auto weights = rank_weights(pool, cfg.tau);
  Rng base_rng = rng.substream(0xba5e);
  auto base_set = select_base_set(pool, cfg.batch, cfg.tau, base_rng);
  std::vector<double> base_w;
  for (auto i : base_set.indices) base_w.push_back(weights[i]);

  InnerResult best;

  for (std::size_t r = 0; r < cfg.restarts; ++r) {
    Rng rr = rng.substream(1000 + r);
    std::vector<seq::TokenSequence> bases;
    for (auto i : restart_draw(base_set.indices, base_w, cfg.batch, rr))
      bases.push_back(pool.members[i].x);
    LatentInit li = init_latents(bases, model, cfg.num_mutations, vocab, rr);

    Tensor z = li.z0;
    std::vector<double> best_hist, ent_hist;
    double restart_best = -std::numeric_limits<double>::infinity();
    std::vector<seq::TokenSequence> restart_batch;

    auto sample_and_score = [&](const Tensor& zcur) {
      ad::Tape tape;
      auto dv = nn::lift(tape, model.dae, false);
      ad::Var zv = tape.constant(zcur);
      ad::Var zp = nn::disc_encode(zv, dv, li.mask);
      ad::Var logits = nn::mlm_logits(zv, zp, dv, li.mask);
      const double ent = nn::proposal_entropy(logits, li.sel).val()[0];
      ent_hist.push_back(ent);
      // per-sequence proposals at the plan positions, original tokens banned
      std::vector<seq::TokenSequence> cands;
      const Tensor& lv = logits.val();
      const std::size_t t = lv.dim(1), v = lv.dim(2);
      for (std::size_t i = 0; i < li.bases.size(); ++i) {
        Tensor row({t, v});
        for (std::size_t p = 0; p < t; ++p)
          for (std::size_t j = 0; j < v; ++j) row.at2(p, j) = lv.at3(i, p, j);
        cands.push_back(nn::sample_proposals(row, li.bases[i], li.plans[i], {}, vocab, rr));
      }
      const double val = detail::score_batch(ctx, kind, nz, model, cands, vocab);
      if (val > restart_best) {
        restart_best = val;
        restart_batch = cands;
      }
      best_hist.push_back(restart_best);
    };

    sample_and_score(z);  // score the decoded samples of the initial encodings

    for (std::size_t j = 0; j < cfg.j_max; ++j) {
      ad::Tape tape;
      auto dv = nn::lift(tape, model.dae, false);
      ad::Var zv = tape.leaf(z);
      ad::Var zp = nn::disc_encode(zv, dv, li.mask);
      ad::Var feats = nn::pool(zp, li.mask);
      ad::Var a = kind == AcqKind::Nehvi ? acq::nehvi_acq(tape, ctx, feats)
                                         : acq::scalarized_acq_var(tape, ctx, feats, nz);
      ad::Var obj = a;
      if (cfg.lambda != 0.0) {
        ad::Var logits = nn::mlm_logits(zv, zp, dv, li.mask);
        ad::Var ent = nn::proposal_entropy(logits, li.sel);
        obj = ad::sub(a, ad::scale(ent, cfg.lambda));
      }
      tape.backward(obj);
      Tensor g = tape.grad_of(zv);
      for (std::size_t i = 0; i < z.numel(); ++i) z[i] += cfg.eta * g[i];
      z.check_finite("inner loop latent update");

      sample_and_score(z);
    }

    best.restart_best_history.push_back(std::move(best_hist));
    best.entropy_history.push_back(std::move(ent_hist));
    if (restart_best > best.value) {  // strict: ties keep the lowest restart
      best.value = restart_best;
      best.batch = restart_batch;
      best.best_restart = r;
    }
  }

  {  // entropy of the proposal distributions after the last latent step, per restart
    double s = 0.0;
    for (const auto& h : best.entropy_history) s += h.back();
    best.mean_entropy = best.entropy_history.empty()
                            ? 0.0
                            : s / static_cast<double>(best.entropy_history.size());
  }

  std::set<std::vector<seq::TokenId>> pool_seqs;
  for (const auto& m : pool.members) pool_seqs.insert(m.x.ids);
  for (const auto& c : best.batch) {
    c.validate(vocab);
    if (c.contains_mask(vocab)) throw seq::ContainsMask();
    if (pool_seqs.count(c.ids)) best.contains_pool_duplicates = true;
  }
  return best;
}

struct RoundRecord {
  std::size_t round = 0;
  std::size_t cumulative_queries = 0;
  double abs_hypervolume = 0.0;
  double rel_hypervolume = 0.0;
  std::size_t archive_size = 0;
  double mean_entropy = 0.0;
  double holdout_nll = 0.0;
  std::vector<double> spearman_by_task;
  bool batch_had_pool_duplicates = false;
  double wall_seconds = 0.0;  // reported separately from the deterministic trace
};

using Oracle = std::function<mo::ObjectiveVector(const seq::TokenSequence&)>;

struct OuterConfig {
  std::size_t rounds = 64;
  InnerLoopConfig inner;
  gp::FitSchedule fit;
  AcqKind acq = AcqKind::Nehvi;
};

struct RunResult {
  Pool pool;
  std::vector<RoundRecord> trace;
  double start_hv = 0.0;
  bool aborted = false;
  std::string abort_reason;
};

// fit -> inner loop -> oracle -> append, once per round; the archive reference
// point and start hypervolume come from the caller so relative hypervolume is
// well-defined across optimizers
inline RunResult run_outer_loop(const Oracle& oracle, std::vector<CandidateRecord> start_pool,
                                gp::SurrogateModel& model, const OuterConfig& cfg,
                                const mo::ObjectiveVector& ref, const seq::Vocabulary& vocab,
                                Rng& rng) {
  RunResult res;
  res.pool.append_batch(std::move(start_pool));
  const std::size_t d0 = res.pool.members.size();

  mo::ParetoArchive archive(ref);
  for (const auto& m : res.pool.members) archive.insert({m.x, m.y});
  res.start_hv = archive.hypervolume();

  for (std::size_t round = 0; round < cfg.rounds; ++round) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng round_rng = rng.substream(0xf17 + round);
    auto fit_res = gp::fit(model, res.pool.inputs(), res.pool.targets(), vocab, cfg.fit,
                           round_rng);
    auto state = gp::make_train_state(model, res.pool.inputs(), res.pool.targets(), vocab);

    Rng inner_rng = rng.substream(0x1aa0 + round);
    auto inner = run_inner_loop(res.pool, model, state, cfg.inner, ref, vocab, inner_rng,
                                cfg.acq);

    std::vector<CandidateRecord> fresh;
    for (const auto& x : inner.batch) {
      mo::ObjectiveVector y;
      try {
        y = oracle(x);
      } catch (const std::exception& e) {
        res.aborted = true;
        res.abort_reason = e.what();
        return res;  // partial trace persisted by the caller
      }
      fresh.push_back({x, std::move(y), round + 1});
    }
    for (const auto& f : fresh) archive.insert({f.x, f.y});
    res.pool.append_batch(std::move(fresh));

    RoundRecord rec;
    rec.round = round;
    rec.cumulative_queries = (round + 1) * cfg.inner.batch;
    rec.abs_hypervolume = archive.hypervolume();
    rec.rel_hypervolume = res.start_hv > 0.0 ? rec.abs_hypervolume / res.start_hv : 0.0;
    rec.archive_size = archive.members().size();
    rec.mean_entropy = inner.mean_entropy;
    rec.holdout_nll = fit_res.best_holdout_nll;
    rec.batch_had_pool_duplicates = inner.contains_pool_duplicates;
    {  // in-sample rank correlation of the refitted surrogate, per task
      auto post = gp::posterior(model, state, res.pool.inputs(), vocab);
      const std::size_t k = post.k;
      for (std::size_t a = 0; a < k; ++a) {
        std::vector<double> pred, truth;
        for (std::size_t i = 0; i < post.m; ++i) {
          pred.push_back(post.mean.at2(i, a));
          truth.push_back(res.pool.members[i].y[a]);
        }
        rec.spearman_by_task.push_back(gp::spearman(pred, truth));
      }
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.trace.push_back(std::move(rec));
    (void)d0;
  }
  return res;
}

}  // namespace lambo::opt
