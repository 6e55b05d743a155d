#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <set>

#include "lambo/optimizer.hpp"

using namespace lambo;
using Catch::Approx;

namespace {

const seq::Vocabulary kVocab = seq::Vocabulary::amino_acid_preset();

nn::ArchitectureConfig small_arch() {
  nn::ArchitectureConfig a;
  a.kernel_width = 3;
  a.channels = 8;
  a.latent_dim = 4;
  a.shared_encoder_blocks = 1;
  a.disc_encoder_blocks = 1;
  a.decoder_blocks = 1;
  return a;
}

gp::SurrogateModel small_model(std::size_t k, std::uint64_t seed = 11, std::size_t t_max = 8) {
  Rng rng(seed);
  gp::SurrogateModel m;
  m.dae = nn::init_dae_params(rng, kVocab.size(), t_max, small_arch());
  m.hyper = gp::MTGPHyperparams::init(k);
  return m;
}

std::vector<seq::TokenSequence> random_seqs(std::size_t n, Rng& rng, std::size_t t_max = 8) {
  const std::string letters = "AVCD";
  std::vector<seq::TokenSequence> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t len = 4 + rng.uniform_index(t_max - 4 + 1);
    std::string s;
    for (std::size_t j = 0; j < len; ++j) s += letters[rng.uniform_index(4)];
    out.push_back(seq::tokenize(s, kVocab, t_max));
  }
  return out;
}

// two smooth objectives from letter composition (noiseless, deterministic)
mo::ObjectiveVector letter_objectives(const seq::TokenSequence& x) {
  double a = 0, v = 0, c = 0;
  const double len = static_cast<double>(x.length(kVocab));
  for (auto id : x.ids) {
    if (id == kVocab.id_of("A")) ++a;
    if (id == kVocab.id_of("V")) ++v;
    if (id == kVocab.id_of("C")) ++c;
  }
  return {a / len, (v - c) / len};
}

opt::Pool make_pool(const std::vector<mo::ObjectiveVector>& ys, Rng& rng) {
  opt::Pool pool;
  auto xs = random_seqs(ys.size(), rng);
  std::vector<opt::CandidateRecord> recs;
  for (std::size_t i = 0; i < ys.size(); ++i) recs.push_back({xs[i], ys[i], 0});
  pool.append_batch(std::move(recs));
  return pool;
}

opt::Pool pool_from_seqs(const std::vector<seq::TokenSequence>& xs, std::size_t round = 0) {
  opt::Pool pool;
  std::vector<opt::CandidateRecord> recs;
  for (const auto& x : xs) recs.push_back({x, letter_objectives(x), round});
  pool.append_batch(std::move(recs));
  return pool;
}

}  // namespace

TEST_CASE("rank weights worked example and properties") {
  Rng rng(3);
  SECTION("two ranked points give weights 2/3 and 1/3") {
    auto pool = make_pool({{2.0, 2.0}, {1.0, 1.0}}, rng);
    auto w = opt::rank_weights(pool, 1.0);
    CHECK(w[0] == Approx(2.0 / 3.0).margin(1e-12));
    CHECK(w[1] == Approx(1.0 / 3.0).margin(1e-12));
  }
  SECTION("identical objective vectors get uniform weights") {
    auto pool = make_pool({{1, 1}, {1, 1}, {1, 1}}, rng);
    auto w = opt::rank_weights(pool, 1.0);
    for (double x : w) CHECK(x == Approx(1.0 / 3.0).margin(1e-12));
  }
  SECTION("worst rank across objectives drives the weight") {
    // point 1 is best on task 0 but worst on task 1 -> r_max = 2
    auto pool = make_pool({{3.0, 0.0}, {2.0, 1.0}, {1.0, 2.0}}, rng);
    auto w = opt::rank_weights(pool, 1.0);
    CHECK(w[0] == Approx(w[2]).margin(1e-12));  // both have r_max = 2
    CHECK(w[1] > w[0]);                         // r_max = 1
  }
  SECTION("invariant under strictly increasing transforms of each objective") {
    std::vector<mo::ObjectiveVector> ys;
    Rng r2(7);
    for (int i = 0; i < 12; ++i) ys.push_back({r2.uniform(), r2.uniform()});
    auto pool = make_pool(ys, rng);
    auto w1 = opt::rank_weights(pool, 1.0);
    for (auto& m : pool.members) {
      m.y[0] = std::exp(3.0 * m.y[0]);
      m.y[1] = m.y[1] * m.y[1] * m.y[1] + 5.0;  // cube is monotone on [0,1]
    }
    auto w2 = opt::rank_weights(pool, 1.0);
    for (std::size_t i = 0; i < w1.size(); ++i) CHECK(w1[i] == Approx(w2[i]).margin(1e-12));
  }
  SECTION("smaller tau concentrates mass on the best point") {
    auto pool = make_pool({{2, 2}, {1, 1}, {0, 0}}, rng);
    auto w1 = opt::rank_weights(pool, 1.0);
    auto wh = opt::rank_weights(pool, 0.5);
    CHECK(wh[0] > w1[0]);
    CHECK(wh[2] < w1[2]);
  }
}

TEST_CASE("base set selection priority and fallback") {
  Rng rng(17);
  SECTION("current Pareto, then historical Pareto, then the rest") {
    opt::Pool pool;
    pool.append({random_seqs(1, rng)[0], {1.0, 1.0}, 0});  // pareto now, dominated later
    pool.append({random_seqs(1, rng)[0], {0.0, 0.0}, 0});  // never pareto
    pool.append({random_seqs(1, rng)[0], {2.0, 2.0}, 1});  // dominates member 0
    REQUIRE(pool.current_pareto == std::vector<bool>{false, false, true});
    REQUIRE(pool.historical_pareto == std::vector<bool>{true, false, true});

    Rng draw(5);
    auto b1 = opt::select_base_set(pool, 1, 1.0, draw);
    CHECK(b1.indices == std::vector<std::size_t>{2});
    auto b2 = opt::select_base_set(pool, 2, 1.0, draw);
    CHECK(b2.indices == std::vector<std::size_t>{2, 0});
    auto b3 = opt::select_base_set(pool, 3, 1.0, draw);
    CHECK(b3.indices == std::vector<std::size_t>{2, 0, 1});
    CHECK_FALSE(b3.filled_with_replacement);
  }
  SECTION("no duplicates when the pool is large enough") {
    std::vector<mo::ObjectiveVector> ys;
    Rng r2(9);
    for (int i = 0; i < 10; ++i) ys.push_back({r2.uniform(), r2.uniform()});
    auto pool = make_pool(ys, rng);
    Rng draw(13);
    for (int trial = 0; trial < 50; ++trial) {
      auto bs = opt::select_base_set(pool, 6, 1.0, draw);
      std::set<std::size_t> uniq(bs.indices.begin(), bs.indices.end());
      CHECK(uniq.size() == 6);
      CHECK_FALSE(bs.filled_with_replacement);
    }
  }
  SECTION("pool smaller than b falls back to replacement and flags it") {
    auto pool = make_pool({{1, 0}, {0, 1}}, rng);
    Rng draw(19);
    auto bs = opt::select_base_set(pool, 5, 1.0, draw);
    CHECK(bs.indices.size() == 5);
    CHECK(bs.filled_with_replacement);
  }
  SECTION("selection frequency matches rank weights for b = 1") {
    // four mutually non-dominated points with distinct worst-ranks
    auto pool = make_pool({{4.0, 1.0}, {3.0, 2.0}, {2.0, 3.0}, {1.0, 4.0}}, rng);
    // r_max = 3 for the extremes, 2 for the middles
    auto w = opt::rank_weights(pool, 1.0);
    Rng draw(23);
    const int trials = 10000;
    std::map<std::size_t, int> counts;
    for (int i = 0; i < trials; ++i) counts[opt::select_base_set(pool, 1, 1.0, draw).indices[0]]++;
    for (std::size_t i = 0; i < 4; ++i) {
      const double p = w[i];
      const double sd = std::sqrt(p * (1 - p) * trials);
      CHECK(std::abs(counts[i] - p * trials) < 4.0 * sd);
    }
  }
}

TEST_CASE("restart draw") {
  Rng rng(29);
  SECTION("singleton base set is drawn every time") {
    auto picks = opt::restart_draw({7}, {1.0}, 5, rng);
    CHECK(picks == std::vector<std::size_t>(5, 7));
  }
  SECTION("zero-weight members are never drawn") {
    for (int i = 0; i < 1000; ++i) {
      auto picks = opt::restart_draw({3, 8}, {0.0, 1.0}, 2, rng);
      for (auto p : picks) CHECK(p == 8);
    }
  }
  SECTION("draws are with replacement") {
    bool saw_repeat = false;
    for (int i = 0; i < 50 && !saw_repeat; ++i) {
      auto picks = opt::restart_draw({0, 1}, {0.5, 0.5}, 4, rng);
      std::set<std::size_t> uniq(picks.begin(), picks.end());
      saw_repeat = uniq.size() < 4;
    }
    CHECK(saw_repeat);
  }
}

TEST_CASE("latent initialization") {
  Rng rng(31);
  auto model = small_model(2);
  auto bases = random_seqs(3, rng);

  SECTION("plans corrupt the requested number of positions") {
    Rng r2(7);
    auto li = opt::init_latents(bases, model, 1, kVocab, r2);
    REQUIRE(li.plans.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(li.plans[i].positions.size() == 1);
      const std::size_t p = li.plans[i].positions[0];
      CHECK(li.corrupted[i].ids[p] == kVocab.masking_id());
      for (std::size_t q = 0; q < bases[i].t_max(); ++q)
        if (q != p) CHECK(li.corrupted[i].ids[q] == bases[i].ids[q]);
    }
    CHECK(li.z0.dim(0) == 3);
    CHECK(li.z0.dim(2) == small_arch().latent_dim);
  }
  SECTION("zero mutations leave the sequences intact") {
    Rng r2(7);
    auto li = opt::init_latents(bases, model, 0, kVocab, r2);
    for (std::size_t i = 0; i < 3; ++i) CHECK(li.corrupted[i].ids == bases[i].ids);
    ad::Tape tape;
    auto dv = nn::lift(tape, model.dae, false);
    Tensor z = nn::encode(tape, dv, bases, kVocab).val();
    for (std::size_t i = 0; i < z.numel(); ++i) CHECK(li.z0[i] == z[i]);
  }
  SECTION("too many mutations propagate the position error") {
    Rng r2(7);
    CHECK_THROWS_AS(opt::init_latents(bases, model, 100, kVocab, r2), seq::NotEnoughPositions);
  }
}

namespace {

// shared fixture: a fitted-enough surrogate over a small pool
struct LoopFixture {
  gp::SurrogateModel model = small_model(2, 41);
  opt::Pool pool;
  gp::TrainState state;
  mo::ObjectiveVector ref{-0.1, -1.1};

  LoopFixture() {
    Rng rng(43);
    pool = pool_from_seqs(random_seqs(10, rng));
    state = gp::make_train_state(model, pool.inputs(), pool.targets(), kVocab);
  }
};

opt::InnerLoopConfig tiny_inner() {
  opt::InnerLoopConfig cfg;
  cfg.restarts = 2;
  cfg.j_max = 3;
  cfg.batch = 3;
  cfg.mc_samples = 2;
  return cfg;
}

}  // namespace

TEST_CASE("inner loop output contract") {
  LoopFixture fx;
  auto cfg = tiny_inner();
  Rng rng(47);
  auto res = opt::run_inner_loop(fx.pool, fx.model, fx.state, cfg, fx.ref, kVocab, rng);

  CHECK(res.batch.size() == cfg.batch);
  for (const auto& x : res.batch) {
    x.validate(kVocab);
    CHECK_FALSE(x.contains_mask(kVocab));
  }
  CHECK(std::isfinite(res.value));
  CHECK(res.mean_entropy > 0.0);

  SECTION("best-so-far per restart is monotone and the result beats every step-0 value") {
    REQUIRE(res.restart_best_history.size() == cfg.restarts);
    for (const auto& hist : res.restart_best_history) {
      REQUIRE(hist.size() == cfg.j_max + 1);
      for (std::size_t j = 1; j < hist.size(); ++j) CHECK(hist[j] >= hist[j - 1]);
      CHECK(res.value >= hist[0]);
      CHECK(res.value >= hist.back());
    }
  }
  SECTION("deterministic under a fixed seed") {
    Rng rng2(47);
    auto res2 = opt::run_inner_loop(fx.pool, fx.model, fx.state, cfg, fx.ref, kVocab, rng2);
    CHECK(res2.value == res.value);
    REQUIRE(res2.batch.size() == res.batch.size());
    for (std::size_t i = 0; i < res.batch.size(); ++i) CHECK(res2.batch[i].ids == res.batch[i].ids);
  }
  SECTION("different seed changes the proposals") {
    Rng rng3(48);
    auto res3 = opt::run_inner_loop(fx.pool, fx.model, fx.state, cfg, fx.ref, kVocab, rng3);
    bool any_diff = res3.batch.size() != res.batch.size();
    for (std::size_t i = 0; !any_diff && i < res.batch.size(); ++i)
      any_diff = res3.batch[i].ids != res.batch[i].ids;
    CHECK(any_diff);
  }
}

TEST_CASE("inner loop degenerate configuration returns decoded initial samples") {
  LoopFixture fx;
  auto cfg = tiny_inner();
  cfg.restarts = 1;
  cfg.j_max = 0;
  Rng rng(53);
  auto res = opt::run_inner_loop(fx.pool, fx.model, fx.state, cfg, fx.ref, kVocab, rng);
  CHECK(res.batch.size() == cfg.batch);
  REQUIRE(res.restart_best_history.size() == 1);
  CHECK(res.restart_best_history[0].size() == 1);  // only the initial scoring pass
  CHECK(res.value == res.restart_best_history[0][0]);
  // single-token mutations of pool members: each differs from some pool member
  // in exactly one position
  for (const auto& x : res.batch) {
    bool one_step = false;
    for (const auto& m : fx.pool.members) {
      std::size_t diff = 0;
      if (m.x.ids.size() != x.ids.size()) continue;
      for (std::size_t p = 0; p < x.ids.size(); ++p) diff += x.ids[p] != m.x.ids[p];
      one_step = one_step || diff == 1;
    }
    CHECK(one_step);
  }
}

TEST_CASE("large entropy penalty drives proposal entropy down") {
  LoopFixture fx;
  opt::InnerLoopConfig cfg = tiny_inner();
  cfg.restarts = 1;
  cfg.j_max = 6;
  cfg.lambda = 1e3;  // the entropy term dominates the objective
  cfg.eta = 0.05;
  Rng rng(59);
  auto res = opt::run_inner_loop(fx.pool, fx.model, fx.state, cfg, fx.ref, kVocab, rng);
  REQUIRE(res.entropy_history.size() == 1);
  const auto& ents = res.entropy_history[0];
  REQUIRE(ents.size() == cfg.j_max + 1);
  CHECK(ents.back() < ents.front());
  // descent should be near-monotone once the penalty dominates
  std::size_t decreasing = 0;
  for (std::size_t j = 1; j < ents.size(); ++j) decreasing += ents[j] < ents[j - 1];
  CHECK(decreasing >= ents.size() - 2);
}

TEST_CASE("scalarized acquisition variant runs through the same loop") {
  LoopFixture fx;
  auto cfg = tiny_inner();
  Rng rng(61);
  auto res = opt::run_inner_loop(fx.pool, fx.model, fx.state, cfg, fx.ref, kVocab, rng,
                                 opt::AcqKind::Scalarized);
  CHECK(res.batch.size() == cfg.batch);
  CHECK(std::isfinite(res.value));
  for (const auto& hist : res.restart_best_history)
    for (std::size_t j = 1; j < hist.size(); ++j) CHECK(hist[j] >= hist[j - 1]);
}

TEST_CASE("outer loop bookkeeping") {
  Rng seq_rng(67);
  auto start = random_seqs(8, seq_rng);
  std::vector<opt::CandidateRecord> recs;
  for (const auto& x : start) recs.push_back({x, letter_objectives(x), 0});

  opt::OuterConfig cfg;
  cfg.rounds = 2;
  cfg.inner = tiny_inner();
  cfg.inner.restarts = 2;
  cfg.inner.j_max = 2;
  cfg.inner.batch = 2;
  cfg.fit.max_epochs = 2;
  cfg.fit.patience = 2;

  mo::ObjectiveVector ref{-0.1, -1.1};

  SECTION("round records and pool growth") {
    auto model = small_model(2, 71);
    Rng rng(73);
    auto res = opt::run_outer_loop(letter_objectives, recs, model, cfg, ref, kVocab, rng);
    CHECK_FALSE(res.aborted);
    REQUIRE(res.trace.size() == cfg.rounds);
    CHECK(res.pool.members.size() == 8 + cfg.rounds * cfg.inner.batch);
    CHECK(res.start_hv > 0.0);
    double prev_hv = res.start_hv;
    for (std::size_t i = 0; i < res.trace.size(); ++i) {
      const auto& t = res.trace[i];
      CHECK(t.round == i);
      CHECK(t.cumulative_queries == (i + 1) * cfg.inner.batch);
      CHECK(t.abs_hypervolume >= prev_hv - 1e-12);  // archive volume never shrinks
      CHECK(t.rel_hypervolume == Approx(t.abs_hypervolume / res.start_hv).margin(1e-12));
      CHECK(t.archive_size >= 1);
      CHECK(t.spearman_by_task.size() == 2);
      for (double s : t.spearman_by_task) {
        CHECK(s >= -1.0);
        CHECK(s <= 1.0);
      }
      CHECK(std::isfinite(t.holdout_nll));
      CHECK(t.mean_entropy > 0.0);
      prev_hv = t.abs_hypervolume;
    }
    // new pool members are tagged with their round
    for (std::size_t i = 8; i < res.pool.members.size(); ++i)
      CHECK(res.pool.members[i].round == 1 + (i - 8) / cfg.inner.batch);
  }
  SECTION("deterministic end to end") {
    auto m1 = small_model(2, 71);
    auto m2 = small_model(2, 71);
    Rng r1(73), r2(73);
    auto a = opt::run_outer_loop(letter_objectives, recs, m1, cfg, ref, kVocab, r1);
    auto b = opt::run_outer_loop(letter_objectives, recs, m2, cfg, ref, kVocab, r2);
    REQUIRE(a.pool.members.size() == b.pool.members.size());
    for (std::size_t i = 0; i < a.pool.members.size(); ++i) {
      CHECK(a.pool.members[i].x.ids == b.pool.members[i].x.ids);
      CHECK(a.pool.members[i].y == b.pool.members[i].y);
    }
    for (std::size_t i = 0; i < a.trace.size(); ++i)
      CHECK(a.trace[i].abs_hypervolume == b.trace[i].abs_hypervolume);
  }
  SECTION("oracle failure aborts with a partial trace") {
    auto model = small_model(2, 71);
    Rng rng(73);
    int calls = 0;
    auto flaky = [&](const seq::TokenSequence& x) -> mo::ObjectiveVector {
      if (++calls > static_cast<int>(cfg.inner.batch)) throw std::runtime_error("assay offline");
      return letter_objectives(x);
    };
    auto res = opt::run_outer_loop(flaky, recs, model, cfg, ref, kVocab, rng);
    CHECK(res.aborted);
    CHECK(res.abort_reason == "assay offline");
    CHECK(res.trace.size() == 1);  // first round completed, second did not
    CHECK(res.pool.members.size() == 8 + cfg.inner.batch);
  }
}
