// Criteria on whole subsystems: the evolution loop under a synthetic
// evaluator and end-to-end pipeline determinism.

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <sstream>

#include "criteria.hpp"
#include "snaplab/evolve.hpp"
#include "snaplab/pipeline.hpp"

namespace snaplab::acceptance {

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Every executing block adds a fixed, seeded amount of quality; copies added
/// by the loop are worth a small constant.
QualityFn synthetic_quality(const Model& start, std::uint64_t seed, std::map<std::uint64_t, double>& per_uid) {
  Rng rng(seed);
  for (const BlockInfo& b : start.blocks()) per_uid[b.uid] = rng.uniform(0.001, 0.05);
  return [&per_uid](const Model& m, const SkipMask& mask) {
    double q = 0.0;
    for (const BlockInfo& b : m.blocks()) {
      if (!mask[b.flat_index]) continue;
      const auto it = per_uid.find(b.uid);
      q += it == per_uid.end() ? 0.0005 : it->second;
    }
    return q;
  };
}

bool same_history(const EvolveResult& a, const EvolveResult& b) {
  if (a.history.size() != b.history.size()) return false;
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    const EvolveRecord &x = a.history[i], &y = b.history[i];
    if (!(x.genome == y.genome) || x.latency_ms != y.latency_ms || x.quality != y.quality ||
        x.executed.size() != y.executed.size())
      return false;
    for (std::size_t k = 0; k < x.executed.size(); ++k)
      if (x.executed[k].uid != y.executed[k].uid || x.executed[k].value != y.executed[k].value) return false;
  }
  return true;
}

}  // namespace

Outcome evolution_correctness(const Context& ctx) {
  const Model start(ArchitectureGenome::desk_default(), ModelConfig{}, 1);
  // Comparable per-block costs so that several rounds are needed.
  LatencyTable table;
  for (const LatencyKey& k : genome_space(start.genome()))
    table.set(k, {1.0 + 0.2 * k.stage + (k.kind == BlockKind::CrossAttention ? 0.5 : 0.0), 3, "synthetic"});
  std::map<std::uint64_t, double> per_uid;
  const QualityFn quality = synthetic_quality(start, 8, per_uid);
  const double start_latency = genome_latency(start.genome(), table);

  EvolveConfig cfg;
  cfg.target_ms = 0.5 * start_latency;
  cfg.group_size = 2;
  cfg.rounds = 4;
  const EvolveResult run = evolve(start, quality, table, cfg);

  // Quality is additive, so each block's value never changes and removals
  // must follow one global ascending order of quality / latency.
  std::vector<std::pair<double, std::uint64_t>> order;
  for (const BlockInfo& b : start.blocks())
    order.push_back({per_uid.at(b.uid) / table.at(b.spec.kind, b.spec.stage, b.spec.width), b.uid});
  std::sort(order.begin(), order.end());

  bool order_ok = true, monotone = true, reached = false;
  std::size_t next = 0;
  int removed = 0;
  double prev = start_latency;
  for (std::size_t i = 1; i < run.history.size() && !reached; ++i) {
    const EvolveRecord& rec = run.history[i];
    for (const ActionScore& s : rec.executed) {
      order_ok = order_ok && s.action.direction == ActionDirection::Remove && next < order.size() &&
                 s.uid == order[next].second;
      ++next;
      ++removed;
    }
    monotone = monotone && rec.latency_ms <= prev;
    prev = rec.latency_ms;
    reached = rec.latency_ms <= cfg.target_ms;
  }

  std::map<std::uint64_t, double> per_uid_again;
  const EvolveResult again = evolve(start, synthetic_quality(start, 8, per_uid_again), table, cfg);
  const bool deterministic = same_history(run, again);
  write_history_csv(ctx.out / "evolution_history.csv", run.history);

  const bool pass = order_ok && monotone && reached && deterministic;
  std::ostringstream d;
  d << removed << " removals in ascending value order: " << (order_ok ? "yes" : "no")
    << "; latency non-increasing to target: " << (monotone && reached ? "yes" : "no") << " ("
    << start_latency << " -> " << prev << " ms, S = " << cfg.target_ms << ")"
    << "; rerun identical: " << (deterministic ? "yes" : "no");
  return {pass, d.str()};
}

Outcome pipeline_determinism(const Context& ctx) {
  const ExperimentConfig cfg;
  std::vector<std::vector<std::filesystem::path>> curves;
  std::vector<double> seconds;
  for (const char* name : {"pipeline_a", "pipeline_b"}) {
    const auto dir = ctx.out / name;
    std::filesystem::remove_all(dir);
    const auto t0 = std::chrono::steady_clock::now();
    RunDir run("reproduce", cfg, dir);
    const PipelineResult r = reproduce_pipeline(cfg, run, false);
    run.finalize();
    seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    curves.push_back(r.curves);
  }
  bool identical = curves[0].size() == 3 && curves[1].size() == 3;
  std::string names;
  for (std::size_t i = 0; identical && i < 3; ++i) {
    const std::string a = slurp(curves[0][i]), b = slurp(curves[1][i]);
    identical = !a.empty() && a == b;
    names += (i ? ", " : "") + curves[0][i].filename().string();
  }
  std::ostringstream d;
  d.precision(4);
  d << "two runs (" << seconds[0] << " s, " << seconds[1] << " s); " << names
    << (identical ? " byte-identical" : " differ");
  return {identical && seconds[0] < 30 * 60, d.str()};
}

}  // namespace snaplab::acceptance
