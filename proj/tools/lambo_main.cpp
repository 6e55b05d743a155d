// Command-line entry point: runs benchmark experiments and writes traces,
// archives, and aggregates to an output directory.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lambo/bench.hpp"

namespace {

// "0..9" (inclusive range) or "0,3,7" (comma list) or a single number
std::vector<std::uint64_t> parse_seeds(const std::string& spec) {
  std::vector<std::uint64_t> seeds;
  const auto dots = spec.find("..");
  if (dots != std::string::npos) {
    const std::uint64_t lo = std::stoull(spec.substr(0, dots));
    const std::uint64_t hi = std::stoull(spec.substr(dots + 2));
    if (hi < lo) throw CLI::ValidationError("--seeds", "range end before start");
    for (std::uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
    return seeds;
  }
  std::size_t pos = 0;
  while (pos < spec.size()) {
    const auto comma = spec.find(',', pos);
    const std::string tok = spec.substr(pos, comma == std::string::npos ? comma : comma - pos);
    if (!tok.empty()) seeds.push_back(std::stoull(tok));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (seeds.empty()) throw CLI::ValidationError("--seeds", "no seeds given");
  return seeds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latent-space multi-objective sequence optimization"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "run a benchmark experiment");
  lambo::bench::ExperimentConfig cfg;
  std::string seeds_spec = "0";
  std::size_t j_max_override = 0;

  run->add_option("--task", cfg.task, "task id")->capture_default_str();
  run->add_option("--optimizer", cfg.optimizer, "optimizer id")->capture_default_str();
  run->add_option("--seeds", seeds_spec, "seed range a..b or comma list")->capture_default_str();
  run->add_option("--rounds", cfg.rounds, "optimization rounds")->capture_default_str();
  run->add_option("--batch-size", cfg.batch, "queries per round")->capture_default_str();
  run->add_option("--start-pool", cfg.start_pool, "start pool size")->capture_default_str();
  run->add_option("--out", cfg.out_dir, "output directory")->required();
  run->add_flag("--desk-scale", cfg.desk_scale, "reduced-budget profile");
  run->add_option("--lambda", cfg.lambda, "entropy penalty weight")->capture_default_str();
  run->add_option("--num-mutations", cfg.num_mutations, "corrupted positions per base")
      ->capture_default_str();
  run->add_option("--mc-samples", cfg.mc_samples, "posterior samples for the acquisition")
      ->capture_default_str();
  run->add_option("--tau", cfg.tau, "rank-weight temperature")->capture_default_str();
  auto* jopt = run->add_option("--j-max", j_max_override, "override latent ascent steps");

  CLI11_PARSE(app, argc, argv);

  try {
    cfg.seeds = parse_seeds(seeds_spec);
    if (*jopt) cfg.j_max_override = j_max_override;
    const auto vocab = lambo::seq::Vocabulary::amino_acid_preset();
    auto res = lambo::bench::run_experiment(cfg, vocab);
    for (std::size_t i = 0; i < res.per_seed.size(); ++i) {
      const auto& sr = res.per_seed[i];
      if (sr.aborted) {
        std::fprintf(stderr, "seed %llu aborted: %s\n",
                     static_cast<unsigned long long>(cfg.seeds[i]), sr.abort_reason.c_str());
      } else if (!sr.trace.empty()) {
        std::printf("seed %llu: final relative hypervolume %s\n",
                    static_cast<unsigned long long>(cfg.seeds[i]),
                    lambo::bench::fmt9(sr.trace.back().rel_hypervolume).c_str());
      }
    }
    return res.any_failed ? 1 : 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
