#pragma once

// Benchmark task, start-pool construction, experiment harness, metrics, and
// persistence. The task maximizes overlapping occurrence counts of three
// target bigrams in short amino-acid strings.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lambo/genetic.hpp"
#include "lambo/optimizer.hpp"

namespace lambo::bench {

struct SamplingBudgetExceeded : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ZeroStartVolume : std::runtime_error {
  ZeroStartVolume() : std::runtime_error("start pool hypervolume is zero") {}
};
struct UnknownOptimizer : std::runtime_error {
  explicit UnknownOptimizer(const std::string& id)
      : std::runtime_error("unknown optimizer id: " + id) {}
};
struct UnknownTask : std::runtime_error {
  explicit UnknownTask(const std::string& id) : std::runtime_error("unknown task id: " + id) {}
};

// ---- task ----

inline const std::vector<std::string>& target_bigrams() {
  static const std::vector<std::string> kTargets{"AV", "VC", "CA"};
  return kTargets;
}

constexpr std::size_t kMinLength = 32;
constexpr std::size_t kMaxLength = 36;

// overlapping occurrence counts of the target bigrams, maximized
inline mo::ObjectiveVector bigram_oracle(const seq::TokenSequence& x,
                                         const seq::Vocabulary& vocab) {
  const std::string s = seq::detokenize(x, vocab);  // rejects masked sequences
  mo::ObjectiveVector y;
  for (const auto& bg : target_bigrams()) {
    std::size_t count = 0;
    for (std::size_t i = 0; i + bg.size() <= s.size(); ++i)
      if (s.compare(i, bg.size(), bg) == 0) ++count;
    y.push_back(static_cast<double>(count));
  }
  return y;
}

inline bool is_positive(const mo::ObjectiveVector& y) {
  for (double v : y)
    if (v > 0.0) return true;
  return false;
}

inline seq::TokenSequence random_sequence(const seq::Vocabulary& vocab, std::size_t t_max,
                                          Rng& rng) {
  std::vector<seq::TokenId> letters;
  for (seq::TokenId t = 0; t < vocab.size(); ++t)
    if (!vocab.is_special(t)) letters.push_back(t);
  const std::size_t len = kMinLength + rng.uniform_index(kMaxLength - kMinLength + 1);
  std::string s;
  for (std::size_t i = 0; i < len; ++i) s += vocab.token(letters[rng.uniform_index(letters.size())]);
  return seq::tokenize(s, vocab, t_max);
}

// n labeled sequences, exactly n/2 containing at least one target bigram and
// n/2 containing none, rejection-sampled with a bounded budget
inline std::vector<opt::CandidateRecord> make_start_pool(std::size_t n,
                                                         const seq::Vocabulary& vocab,
                                                         Rng& rng,
                                                         std::size_t t_max = kMaxLength) {
  if (n % 2 != 0) throw std::invalid_argument("start pool size must be even");
  std::vector<opt::CandidateRecord> pos, neg;
  const std::size_t budget = 2000 * n + 10000;
  for (std::size_t attempt = 0; attempt < budget; ++attempt) {
    if (pos.size() == n / 2 && neg.size() == n / 2) break;
    auto x = random_sequence(vocab, t_max, rng);
    auto y = bigram_oracle(x, vocab);
    auto& bucket = is_positive(y) ? pos : neg;
    if (bucket.size() < n / 2) bucket.push_back({std::move(x), std::move(y), 0});
  }
  if (pos.size() != n / 2 || neg.size() != n / 2)
    throw SamplingBudgetExceeded("could not balance the start pool within the attempt budget");
  std::vector<opt::CandidateRecord> out;
  for (std::size_t i = 0; i < n / 2; ++i) {
    out.push_back(std::move(pos[i]));
    out.push_back(std::move(neg[i]));
  }
  return out;
}

// reference point: per-objective start-pool minimum minus 1% of the range
// (minus 1 when the range is degenerate, so every box has positive extent)
inline mo::ObjectiveVector reference_point(const std::vector<opt::CandidateRecord>& start) {
  const std::size_t k = start[0].y.size();
  mo::ObjectiveVector ref(k);
  for (std::size_t d = 0; d < k; ++d) {
    double mn = 1e300, mx = -1e300;
    for (const auto& r : start) {
      mn = std::min(mn, r.y[d]);
      mx = std::max(mx, r.y[d]);
    }
    double delta = 0.01 * (mx - mn);
    if (delta <= 0.0) delta = 1.0;
    ref[d] = mn - delta;
  }
  return ref;
}

inline double relative_hypervolume(double abs_hv, double start_hv) {
  if (!(start_hv > 0.0)) throw ZeroStartVolume();
  return abs_hv / start_hv;
}

// linear-interpolation quantile of an unsorted sample
inline double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= v.size()) return v.back();
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + frac * (v[lo + 1] - v[lo]);
}

// all numeric trace output uses 9 significant digits
inline std::string fmt9(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", x);
  return std::string(buf);
}

// ---- configuration ----

inline const std::vector<std::string>& known_optimizers() {
  static const std::vector<std::string> kIds{"lambo",          "nsga2",
                                             "mbga",           "lambo-scalarized",
                                             "lambo-uniform-proposals", "lambo-no-entropy"};
  return kIds;
}

struct ExperimentConfig {
  std::string task = "bigrams";
  std::string optimizer = "lambo";
  std::vector<std::uint64_t> seeds{0};
  std::size_t rounds = 64;
  std::size_t batch = 16;
  std::size_t start_pool = 512;
  std::string out_dir;
  bool desk_scale = false;
  double lambda = 0.01;
  std::size_t num_mutations = 1;
  std::size_t mc_samples = 2;
  double tau = 1.0;
  std::optional<std::size_t> j_max_override;  // ablation: proposals without ascent
};

// resolved per-run profile: architecture, fit schedule, inner-loop sizes
struct RunProfile {
  nn::ArchitectureConfig arch;
  gp::FitSchedule fit;
  std::size_t restarts = 16;
  std::size_t j_max = 32;
  std::size_t t_max = kMaxLength;
};

inline RunProfile resolve_profile(const ExperimentConfig& cfg) {
  RunProfile p;
  if (cfg.desk_scale) {
    // reduced budget sized for a laptop-class single-core run
    p.arch.channels = 32;
    p.arch.shared_encoder_blocks = 1;
    p.arch.decoder_blocks = 1;
    p.fit.max_epochs = 32;
    p.fit.patience = 8;
    p.restarts = 4;
    p.j_max = 8;
  }
  if (cfg.j_max_override) p.j_max = *cfg.j_max_override;
  return p;
}

inline opt::OuterConfig make_outer_config(const ExperimentConfig& cfg, const RunProfile& prof) {
  opt::OuterConfig oc;
  oc.rounds = cfg.rounds;
  oc.fit = prof.fit;
  oc.inner.restarts = prof.restarts;
  oc.inner.j_max = prof.j_max;
  oc.inner.batch = cfg.batch;
  oc.inner.lambda = cfg.lambda;
  oc.inner.num_mutations = cfg.num_mutations;
  oc.inner.mc_samples = cfg.mc_samples;
  oc.inner.tau = cfg.tau;
  if (cfg.optimizer == "lambo-no-entropy") oc.inner.lambda = 0.0;
  if (cfg.optimizer == "lambo-scalarized") oc.acq = opt::AcqKind::Scalarized;
  return oc;
}

// ---- per-seed execution ----

struct SeedResult {
  std::vector<opt::RoundRecord> trace;
  std::vector<mo::ArchiveEntry> archive;
  mo::ObjectiveVector ref;
  double start_hv = 0.0;
  bool aborted = false;
  std::string abort_reason;
};

namespace detail {

inline opt::RoundRecord hv_only_record(std::size_t round, std::size_t batch,
                                       const mo::ParetoArchive& archive, double start_hv,
                                       double wall) {
  opt::RoundRecord rec;
  rec.round = round;
  rec.cumulative_queries = (round + 1) * batch;
  rec.abs_hypervolume = archive.hypervolume();
  rec.rel_hypervolume = relative_hypervolume(rec.abs_hypervolume, start_hv);
  rec.archive_size = archive.members().size();
  rec.mean_entropy = std::numeric_limits<double>::quiet_NaN();
  rec.holdout_nll = std::numeric_limits<double>::quiet_NaN();
  rec.wall_seconds = wall;
  return rec;
}

}  // namespace detail

inline SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed,
                           const seq::Vocabulary& vocab) {
  if (cfg.task != "bigrams") throw UnknownTask(cfg.task);
  const RunProfile prof = resolve_profile(cfg);
  const std::size_t k = target_bigrams().size();

  Rng rng(seed);
  Rng start_rng = rng.substream(0x5eed);
  auto start = make_start_pool(cfg.start_pool, vocab, start_rng, prof.t_max);
  const auto ref = reference_point(start);

  SeedResult res;
  res.ref = ref;
  opt::Oracle oracle = [&vocab](const seq::TokenSequence& x) { return bigram_oracle(x, vocab); };

  const std::string id = cfg.optimizer;
  const bool is_lambo = id == "lambo" || id == "lambo-scalarized" || id == "lambo-no-entropy";
  const bool is_mbga = id == "mbga" || id == "lambo-uniform-proposals";

  if (is_lambo) {
    Rng init_rng = rng.substream(0x111);
    gp::SurrogateModel model;
    model.dae = nn::init_dae_params(init_rng, vocab.size(), prof.t_max, prof.arch);
    model.hyper = gp::MTGPHyperparams::init(k);
    auto oc = make_outer_config(cfg, prof);
    Rng run_rng = rng.substream(0x222);
    auto out = opt::run_outer_loop(oracle, start, model, oc, ref, vocab, run_rng);
    res.trace = out.trace;
    res.start_hv = out.start_hv;
    res.aborted = out.aborted;
    res.abort_reason = out.abort_reason;
    mo::ParetoArchive archive(ref);
    for (const auto& m : out.pool.members) archive.insert({m.x, m.y});
    res.archive = archive.members();
    if (!(res.start_hv > 0.0)) throw ZeroStartVolume();
    return res;
  }

  // genetic baselines share the start pool, archive, and accounting
  opt::Pool pool;
  pool.append_batch(start);
  mo::ParetoArchive archive(ref);
  for (const auto& m : pool.members) archive.insert({m.x, m.y});
  res.start_hv = archive.hypervolume();
  if (!(res.start_hv > 0.0)) throw ZeroStartVolume();

  ga::GAConfig gc;
  gc.population = cfg.batch;
  gc.restarts = prof.restarts;
  gc.mc_samples = cfg.mc_samples;
  gc.tau = cfg.tau;

  if (id == "nsga2") {
    Rng run_rng = rng.substream(0x333);
    auto st = ga::nsga2_init(pool, gc, run_rng);
    for (std::size_t round = 0; round < cfg.rounds; ++round) {
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<opt::CandidateRecord> fresh;
      try {
        fresh = ga::nsga2_round(st, pool, oracle, gc, vocab, run_rng, round + 1);
      } catch (const std::exception& e) {
        res.aborted = true;
        res.abort_reason = e.what();
        break;
      }
      for (const auto& f : fresh) archive.insert({f.x, f.y});
      const double wall =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      res.trace.push_back(detail::hv_only_record(round, cfg.batch, archive, res.start_hv, wall));
    }
  } else if (is_mbga) {
    Rng init_rng = rng.substream(0x111);
    gp::SurrogateModel model;
    model.dae = nn::init_dae_params(init_rng, vocab.size(), prof.t_max, prof.arch);
    model.hyper = gp::MTGPHyperparams::init(k);
    Rng run_rng = rng.substream(0x444);
    for (std::size_t round = 0; round < cfg.rounds; ++round) {
      const auto t0 = std::chrono::steady_clock::now();
      opt::RoundRecord rec;
      try {
        Rng fit_rng = run_rng.substream(0xf17 + round);
        auto fit_res = gp::fit(model, pool.inputs(), pool.targets(), vocab, prof.fit, fit_rng);
        auto state = gp::make_train_state(model, pool.inputs(), pool.targets(), vocab);
        Rng round_rng = run_rng.substream(0x1aa0 + round);
        auto out = ga::mbga_round(pool, model, state, oracle, gc, ref, vocab, round_rng,
                                  round + 1);
        for (const auto& f : out.records) archive.insert({f.x, f.y});
        rec.holdout_nll = fit_res.best_holdout_nll;
      } catch (const std::exception& e) {
        res.aborted = true;
        res.abort_reason = e.what();
        break;
      }
      const double wall =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      auto base = detail::hv_only_record(round, cfg.batch, archive, res.start_hv, wall);
      base.holdout_nll = rec.holdout_nll;
      res.trace.push_back(base);
    }
  } else {
    throw UnknownOptimizer(id);
  }

  res.archive = archive.members();
  return res;
}

// ---- persistence ----

inline std::string trace_header(std::size_t k) {
  std::string h = "round,cumulative_queries,abs_hypervolume,rel_hypervolume,archive_size,mean_entropy,holdout_nll";
  for (std::size_t d = 0; d < k; ++d) h += ",spearman_" + std::to_string(d);
  return h;
}

inline std::string field(double x) { return std::isnan(x) ? std::string() : fmt9(x); }

inline std::string trace_row(const opt::RoundRecord& r, std::size_t k) {
  std::string row = std::to_string(r.round) + "," + std::to_string(r.cumulative_queries) + "," +
                    fmt9(r.abs_hypervolume) + "," + fmt9(r.rel_hypervolume) + "," +
                    std::to_string(r.archive_size) + "," + field(r.mean_entropy) + "," +
                    field(r.holdout_nll);
  for (std::size_t d = 0; d < k; ++d) {
    row += ",";
    row += d < r.spearman_by_task.size() ? field(r.spearman_by_task[d]) : std::string();
  }
  return row;
}

inline nlohmann::json config_json(const ExperimentConfig& cfg) {
  const RunProfile prof = resolve_profile(cfg);
  nlohmann::json j;
  j["task"] = cfg.task;
  j["optimizer"] = cfg.optimizer;
  j["seeds"] = cfg.seeds;
  j["rounds"] = cfg.rounds;
  j["batch_size"] = cfg.batch;
  j["start_pool"] = cfg.start_pool;
  j["desk_scale"] = cfg.desk_scale;
  j["lambda"] = cfg.lambda;
  j["num_mutations"] = cfg.num_mutations;
  j["mc_samples"] = cfg.mc_samples;
  j["tau"] = cfg.tau;
  if (cfg.j_max_override) j["j_max_override"] = *cfg.j_max_override;
  j["profile"] = {{"channels", prof.arch.channels},
                  {"latent_dim", prof.arch.latent_dim},
                  {"kernel_width", prof.arch.kernel_width},
                  {"shared_encoder_blocks", prof.arch.shared_encoder_blocks},
                  {"disc_encoder_blocks", prof.arch.disc_encoder_blocks},
                  {"decoder_blocks", prof.arch.decoder_blocks},
                  {"fit_max_epochs", prof.fit.max_epochs},
                  {"fit_patience", prof.fit.patience},
                  {"restarts", prof.restarts},
                  {"j_max", prof.j_max},
                  {"t_max", prof.t_max}};
  j["schema_version"] = 1;
  return j;
}

struct ExperimentResult {
  std::vector<SeedResult> per_seed;
  bool any_failed = false;
};

inline ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                       const seq::Vocabulary& vocab) {
  namespace fs = std::filesystem;
  if (cfg.task != "bigrams") throw UnknownTask(cfg.task);
  bool known = false;
  for (const auto& id : known_optimizers()) known = known || id == cfg.optimizer;
  if (!known) throw UnknownOptimizer(cfg.optimizer);

  fs::create_directories(cfg.out_dir);
  {
    std::ofstream f(fs::path(cfg.out_dir) / "config.json");
    f << config_json(cfg).dump(2) << "\n";
  }

  const std::size_t k = target_bigrams().size();
  ExperimentResult res;
  for (auto seed : cfg.seeds) {
    SeedResult sr;
    try {
      sr = run_seed(cfg, seed, vocab);
    } catch (const std::exception& e) {
      sr.aborted = true;
      sr.abort_reason = e.what();
      res.any_failed = true;
    }
    res.any_failed = res.any_failed || sr.aborted;

    const std::string tag = "seed" + std::to_string(seed);
    {
      std::ofstream f(fs::path(cfg.out_dir) / ("trace_" + tag + ".csv"));
      f << trace_header(k) << "\n";
      for (const auto& r : sr.trace) f << trace_row(r, k) << "\n";
    }
    {
      // wall times live outside the deterministic trace
      std::ofstream f(fs::path(cfg.out_dir) / ("timings_" + tag + ".csv"));
      f << "round,wall_seconds\n";
      for (const auto& r : sr.trace) f << r.round << "," << fmt9(r.wall_seconds) << "\n";
    }
    {
      nlohmann::json j;
      j["reference_point"] = sr.ref;
      j["start_hypervolume"] = sr.start_hv;
      j["aborted"] = sr.aborted;
      if (sr.aborted) j["abort_reason"] = sr.abort_reason;
      nlohmann::json members = nlohmann::json::array();
      for (const auto& m : sr.archive)
        members.push_back({{"sequence", seq::detokenize(m.x, vocab)}, {"objectives", m.y}});
      j["members"] = members;
      std::ofstream f(fs::path(cfg.out_dir) / ("archive_" + tag + ".json"));
      f << j.dump(2) << "\n";
    }
    res.per_seed.push_back(std::move(sr));
  }

  // aggregate quantiles across seeds for every round present in all traces
  std::size_t min_rounds = std::numeric_limits<std::size_t>::max();
  for (const auto& sr : res.per_seed) min_rounds = std::min(min_rounds, sr.trace.size());
  if (min_rounds == std::numeric_limits<std::size_t>::max()) min_rounds = 0;
  {
    std::ofstream f(fs::path(cfg.out_dir) / "aggregate.csv");
    f << "round,rel_hv_q20,rel_hv_q50,rel_hv_q80,abs_hv_q20,abs_hv_q50,abs_hv_q80\n";
    for (std::size_t r = 0; r < min_rounds; ++r) {
      std::vector<double> rel, abs;
      for (const auto& sr : res.per_seed) {
        rel.push_back(sr.trace[r].rel_hypervolume);
        abs.push_back(sr.trace[r].abs_hypervolume);
      }
      f << r << "," << fmt9(quantile(rel, 0.2)) << "," << fmt9(quantile(rel, 0.5)) << ","
        << fmt9(quantile(rel, 0.8)) << "," << fmt9(quantile(abs, 0.2)) << ","
        << fmt9(quantile(abs, 0.5)) << "," << fmt9(quantile(abs, 0.8)) << "\n";
    }
  }
  return res;
}

}  // namespace lambo::bench
