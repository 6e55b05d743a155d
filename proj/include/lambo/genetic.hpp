#pragma once

// Evolutionary baselines under the same controlled mutation regime as the
// main optimizer: NSGA-II and a model-based GA that screens uniform-mutation
// batches with the same acquisition function.

#include <algorithm>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

#include "lambo/optimizer.hpp"

namespace lambo::ga {

struct GAConfig {
  std::size_t population = 16;  // equals the query batch size b
  std::size_t tournament = 2;
  std::size_t restarts = 16;  // candidate batches screened per round (model-based GA)
  std::size_t mc_samples = 2;
  double tau = 1.0;
};

// fronts F1, F2, ...: Fi is the Pareto front after removing F1..F(i-1)
inline std::vector<std::vector<std::size_t>> nondominated_sort(
    const std::vector<mo::ObjectiveVector>& points) {
  std::vector<std::vector<std::size_t>> fronts;
  std::vector<std::size_t> remaining(points.size());
  std::iota(remaining.begin(), remaining.end(), 0);
  while (!remaining.empty()) {
    std::vector<mo::ObjectiveVector> pts;
    for (auto i : remaining) pts.push_back(points[i]);
    auto local = mo::pareto_front(pts);
    std::vector<bool> in_front(remaining.size(), false);
    for (auto i : local) in_front[i] = true;
    std::vector<std::size_t> front, rest;
    for (std::size_t i = 0; i < remaining.size(); ++i)
      (in_front[i] ? front : rest).push_back(remaining[i]);
    fronts.push_back(std::move(front));
    remaining = std::move(rest);
  }
  return fronts;
}

// boundary points per objective get +inf; interior points the sum over
// objectives of (next - prev) / (max - min)
inline std::vector<double> crowding_distance(const std::vector<mo::ObjectiveVector>& front) {
  const std::size_t n = front.size(), k = front.empty() ? 0 : front[0].size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(n, 0.0);
  for (std::size_t d = 0; d < k; ++d) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return front[a][d] < front[b][d]; });
    const double lo = front[order.front()][d], hi = front[order.back()][d];
    dist[order.front()] = inf;
    dist[order.back()] = inf;
    if (hi <= lo) continue;  // degenerate objective adds nothing to interior points
    for (std::size_t i = 1; i + 1 < n; ++i) {
      if (dist[order[i]] == inf) continue;
      dist[order[i]] += (front[order[i + 1]][d] - front[order[i - 1]][d]) / (hi - lo);
    }
  }
  return dist;
}

// single-token uniform substitution at a uniformly chosen eligible position;
// the original token and all specials are banned
inline seq::TokenSequence mutate_uniform(const seq::TokenSequence& base,
                                         const seq::Vocabulary& vocab, Rng& rng) {
  auto eligible = seq::eligible_positions(base, vocab);
  if (eligible.empty()) throw seq::NotEnoughPositions("no eligible positions to mutate");
  const std::size_t pos = eligible[rng.uniform_index(eligible.size())];
  std::vector<seq::TokenId> choices;
  for (seq::TokenId t = 0; t < vocab.size(); ++t)
    if (!vocab.is_special(t) && t != base.ids[pos]) choices.push_back(t);
  if (choices.empty()) throw nn::AllTokensBanned();
  seq::TokenSequence out = base;
  out.ids[pos] = choices[rng.uniform_index(choices.size())];
  return out;
}

// ---- NSGA-II, round-synchronized ----

struct Nsga2State {
  std::vector<opt::CandidateRecord> population;  // size = cfg.population
};

// initial population via the shared Pareto-first rank-weighted base selection
inline Nsga2State nsga2_init(const opt::Pool& pool, const GAConfig& cfg, Rng& rng) {
  Nsga2State st;
  auto bs = opt::select_base_set(pool, cfg.population, cfg.tau, rng);
  for (auto i : bs.indices) st.population.push_back(pool.members[i]);
  return st;
}

namespace detail {

// (front rank, crowding) over a set of objective vectors
struct RankCrowd {
  std::vector<std::size_t> rank;
  std::vector<double> crowd;
};

inline RankCrowd rank_crowd(const std::vector<mo::ObjectiveVector>& ys) {
  RankCrowd rc;
  rc.rank.assign(ys.size(), 0);
  rc.crowd.assign(ys.size(), 0.0);
  auto fronts = nondominated_sort(ys);
  for (std::size_t f = 0; f < fronts.size(); ++f) {
    std::vector<mo::ObjectiveVector> fy;
    for (auto i : fronts[f]) fy.push_back(ys[i]);
    auto cd = crowding_distance(fy);
    for (std::size_t j = 0; j < fronts[f].size(); ++j) {
      rc.rank[fronts[f][j]] = f;
      rc.crowd[fronts[f][j]] = cd[j];
    }
  }
  return rc;
}

// a beats b on (front rank asc, crowding desc)
inline bool rc_better(const RankCrowd& rc, std::size_t a, std::size_t b) {
  if (rc.rank[a] != rc.rank[b]) return rc.rank[a] < rc.rank[b];
  return rc.crowd[a] > rc.crowd[b];
}

}  // namespace detail

// one round: tournament parents from the population, uniform mutations,
// b oracle calls, elitist (front rank, crowding) survivor selection
inline std::vector<opt::CandidateRecord> nsga2_round(Nsga2State& state, opt::Pool& pool,
                                                     const opt::Oracle& oracle,
                                                     const GAConfig& cfg,
                                                     const seq::Vocabulary& vocab, Rng& rng,
                                                     std::size_t round) {
  const std::size_t b = cfg.population;
  std::vector<mo::ObjectiveVector> pop_ys;
  for (const auto& m : state.population) pop_ys.push_back(m.y);
  auto rc = detail::rank_crowd(pop_ys);

  // rank weights restricted to the current population
  opt::Pool pop_pool;
  pop_pool.append_batch(state.population);
  auto w = opt::rank_weights(pop_pool, cfg.tau);
  std::vector<std::size_t> pop_idx(state.population.size());
  std::iota(pop_idx.begin(), pop_idx.end(), 0);

  std::vector<opt::CandidateRecord> offspring;
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t winner = opt::restart_draw(pop_idx, w, 1, rng)[0];
    for (std::size_t t = 1; t < cfg.tournament; ++t) {
      std::size_t challenger = opt::restart_draw(pop_idx, w, 1, rng)[0];
      if (detail::rc_better(rc, challenger, winner)) winner = challenger;
    }
    seq::TokenSequence child = mutate_uniform(state.population[winner].x, vocab, rng);
    mo::ObjectiveVector y = oracle(child);
    offspring.push_back({std::move(child), std::move(y), round});
  }
  pool.append_batch(offspring);

  // survivors from population + offspring
  std::vector<opt::CandidateRecord> merged = state.population;
  merged.insert(merged.end(), offspring.begin(), offspring.end());
  std::vector<mo::ObjectiveVector> ys;
  for (const auto& m : merged) ys.push_back(m.y);
  auto fronts = nondominated_sort(ys);
  std::vector<opt::CandidateRecord> survivors;
  for (const auto& f : fronts) {
    if (survivors.size() + f.size() <= b) {
      for (auto i : f) survivors.push_back(merged[i]);
    } else {
      std::vector<mo::ObjectiveVector> fy;
      for (auto i : f) fy.push_back(ys[i]);
      auto cd = crowding_distance(fy);
      std::vector<std::size_t> order(f.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t c) { return cd[a] > cd[c]; });
      for (auto j : order) {
        if (survivors.size() == b) break;
        survivors.push_back(merged[f[j]]);
      }
    }
    if (survivors.size() == b) break;
  }
  state.population = std::move(survivors);
  return offspring;
}

// ---- model-based GA: uniform-mutation batches screened by the acquisition ----

struct MbgaResult {
  std::vector<opt::CandidateRecord> records;           // the submitted batch, labeled
  std::vector<std::vector<seq::TokenSequence>> batches;  // all screened batches
  std::vector<double> scores;                            // acquisition per batch
  std::size_t chosen = 0;
};

inline MbgaResult mbga_round(opt::Pool& pool, gp::SurrogateModel& model,
                             const gp::TrainState& state, const opt::Oracle& oracle,
                             const GAConfig& cfg, const mo::ObjectiveVector& ref,
                             const seq::Vocabulary& vocab, Rng& rng, std::size_t round) {
  const std::size_t b = cfg.population;
  Rng draw_rng = rng.substream(0x9eb1);
  auto ctx = acq::make_nehvi_context(model, state, ref, b, cfg.mc_samples, draw_rng);

  const auto weights = opt::rank_weights(pool, cfg.tau);
  Rng base_rng = rng.substream(0xba5e);
  auto base_set = opt::select_base_set(pool, b, cfg.tau, base_rng);
  std::vector<double> base_w;
  for (auto i : base_set.indices) base_w.push_back(weights[i]);

  MbgaResult res;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < cfg.restarts; ++r) {
    Rng rr = rng.substream(1000 + r);
    std::vector<seq::TokenSequence> batch;
    for (auto i : opt::restart_draw(base_set.indices, base_w, b, rr))
      batch.push_back(mutate_uniform(pool.members[i].x, vocab, rr));
    const double score =
        opt::detail::score_batch(ctx, opt::AcqKind::Nehvi, {}, model, batch, vocab);
    if (score > best) {  // strict: ties keep the earliest batch
      best = score;
      res.chosen = r;
    }
    res.batches.push_back(std::move(batch));
    res.scores.push_back(score);
  }

  for (const auto& x : res.batches[res.chosen]) {
    mo::ObjectiveVector y = oracle(x);
    res.records.push_back({x, std::move(y), round});
  }
  pool.append_batch(res.records);
  return res;
}

}  // namespace lambo::ga
