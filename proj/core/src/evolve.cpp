#include "snaplab/evolve.hpp"

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "snaplab/error.hpp"

namespace snaplab {

namespace {

std::string kind_name(BlockKind kind) { return kind == BlockKind::CrossAttention ? "cross_attention" : "resnet"; }

BlockKind kind_from_name(const std::string& s) {
  if (s == "cross_attention") return BlockKind::CrossAttention;
  if (s == "resnet") return BlockKind::ResNet;
  throw DomainError("latency table: unknown block kind '" + s + "'");
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

LatencyKey key_of(const BlockInfo& info) { return {info.spec.kind, info.spec.stage, info.spec.width}; }

SkipMask all_execute(const Model& model) { return SkipMask(model.num_blocks(), true); }

BlockInfo find_uid(const Model& model, std::uint64_t uid) {
  for (const BlockInfo& b : model.blocks())
    if (b.uid == uid) return b;
  throw DomainError("evolve: block uid " + std::to_string(uid) + " no longer present");
}

std::string layout_string(const ArchitectureGenome& genome) {
  std::string out;
  for (std::size_t i = 0; i < genome.stages.size(); ++i) {
    if (i) out += '|';
    for (BlockKind k : genome.stages[i].layout) out += block_code(k);
  }
  return out;
}

}  // namespace

void LatencyTable::set(const LatencyKey& key, LatencyEntry entry) {
  if (!(entry.latency_ms > 0.0) || !std::isfinite(entry.latency_ms))
    throw DomainError("latency table: latency must be positive and finite");
  entries_[key] = std::move(entry);
}

double LatencyTable::at(const LatencyKey& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end())
    throw DomainError("latency table: no entry for " + kind_name(key.kind) + " stage " + std::to_string(key.stage) +
                      " width " + std::to_string(key.width));
  return it->second.latency_ms;
}

std::string LatencyTable::to_text() const {
  std::ostringstream out;
  out << "# kind stage width latency_ms reps machine_id\n";
  for (const auto& [key, e] : entries_)
    out << kind_name(key.kind) << ' ' << key.stage << ' ' << key.width << ' ' << format_double(e.latency_ms) << ' '
        << e.reps << ' ' << (e.machine_id.empty() ? "-" : e.machine_id) << '\n';
  return out.str();
}

LatencyTable LatencyTable::from_text(const std::string& text) {
  LatencyTable table;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream rec(line);
    std::string kind, latency, machine;
    LatencyKey key;
    LatencyEntry entry;
    if (!(rec >> kind >> key.stage >> key.width >> latency >> entry.reps >> machine))
      throw DomainError("latency table: malformed record on line " + std::to_string(line_no));
    key.kind = kind_from_name(kind);
    entry.latency_ms = std::strtod(latency.c_str(), nullptr);
    entry.machine_id = machine == "-" ? "" : machine;
    table.set(key, std::move(entry));
  }
  return table;
}

void LatencyTable::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write latency table " + path.string());
  out << to_text();
}

LatencyTable LatencyTable::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read latency table " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str());
}

std::vector<LatencyKey> genome_space(const ArchitectureGenome& genome) {
  std::vector<LatencyKey> space;
  for (std::size_t s = 0; s < genome.stages.size(); ++s)
    for (BlockKind k : {BlockKind::CrossAttention, BlockKind::ResNet})
      space.push_back({k, static_cast<int>(s), genome.stages[s].width});
  return space;
}

LatencyTable build_latency_table(std::span<const LatencyKey> space, const BlockBench& bench, int reps,
                                 const std::string& machine) {
  if (reps < 3) throw DomainError("build_latency_table: reps must be >= 3");
  LatencyTable table;
  for (const LatencyKey& key : space) {
    std::vector<double> samples;
    samples.reserve(static_cast<std::size_t>(reps));
    for (int r = 0; r < reps; ++r) {
      double ms = std::numeric_limits<double>::quiet_NaN();
      try {
        ms = bench(key.kind, key.stage, key.width);
      } catch (const std::exception& e) {
        throw Error("latency table rejected: benchmark failed for " + kind_name(key.kind) + " stage " +
                    std::to_string(key.stage) + ": " + e.what());
      }
      if (!(ms > 0.0) || !std::isfinite(ms))
        throw Error("latency table rejected: invalid reading for " + kind_name(key.kind) + " stage " +
                    std::to_string(key.stage));
      samples.push_back(ms);
    }
    std::sort(samples.begin(), samples.end());
    const std::size_t n = samples.size();
    const double median = n % 2 ? samples[n / 2] : 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
    table.set(key, {median, reps, machine});
  }
  return table;
}

BlockBench isolated_block_bench(const ModelConfig& config, int batch, int inner_iterations) {
  return [config, batch, inner_iterations](BlockKind kind, int stage, int width) {
    const IsolatedBlock block(kind, width, config, batch, derive_seed(0xb1c, static_cast<std::uint64_t>(stage)));
    volatile double sink = block.run();  // warm-up
    const auto start = std::chrono::steady_clock::now();
    for (int i = 0; i < inner_iterations; ++i) sink = sink + block.run();
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return ms / inner_iterations;
  };
}

LatencyTable proxy_latency_table(std::span<const LatencyKey> space, const ModelConfig& config, double ms_per_kparam) {
  if (!(ms_per_kparam > 0.0)) throw DomainError("proxy_latency_table: ms_per_kparam must be > 0");
  LatencyTable table;
  for (const LatencyKey& key : space)
    table.set(key, {ms_per_kparam * block_parameter_count(key.kind, key.width, config) / 1000.0, 1, "proxy"});
  return table;
}

std::string machine_id() {
  char host[256] = {0};
  if (gethostname(host, sizeof host - 1) != 0 || host[0] == '\0') return "unknown";
  std::string id(host);
  std::replace_if(id.begin(), id.end(), [](char c) { return c == ' ' || c == '\t'; }, '_');
  return id;
}

double genome_latency(const ArchitectureGenome& genome, const LatencyTable& table) {
  double total = 0.0;
  for (std::size_t s = 0; s < genome.stages.size(); ++s)
    for (BlockKind k : genome.stages[s].layout) total += table.at(k, static_cast<int>(s), genome.stages[s].width);
  return total;
}

double total_latency(double per_step_ms, int steps) {
  if (steps < 1) throw DomainError("total_latency: steps must be >= 1");
  return per_step_ms * steps;
}

QualityFn consistency_quality(const ConsistencyProbe& probe, int num_classes, Eigen::Index dim,
                              const NoiseSchedule& schedule, const ConsistencyQualityOptions& options) {
  Rng rng(options.seed);
  const Tensor noise = rng.normal(options.valset_size, dim);
  const std::vector<int> labels = balanced_labels(options.valset_size, num_classes);
  const std::uint64_t expected = probe.checksum();
  return [probe, noise, labels, expected, schedule, options](const Model& model, const SkipMask& mask) {
    const MaskedModel view(model, mask);
    const Tensor samples =
        sample_from_noise(view, schedule, options.eval_steps, noise, labels, GuidanceScale(options.cfg_scale));
    return condition_consistency(samples, labels, probe, expected);
  };
}

ActionScore evaluate_action(const Model& model, const Action& action, const QualityFn& quality,
                            const LatencyTable& table, double base_quality) {
  ActionScore score;
  score.action = action;
  const Block& block = model.block(action.target);
  score.uid = block.uid;
  const double entry = table.at(action.target.kind, action.target.stage, block.width);
  if (action.direction == ActionDirection::Remove) {
    SkipMask mask = all_execute(model);
    mask[model.flat_index(action.target)] = false;
    score.delta_quality = quality(model, mask) - base_quality;
    score.delta_latency = -entry;
  } else {
    const Model edited = mutate(model, action);
    score.delta_quality = quality(edited, all_execute(edited)) - base_quality;
    score.delta_latency = entry;
  }
  score.value = score.delta_quality / score.delta_latency;
  return score;
}

std::vector<ActionScore> score_removals(const Model& model, const QualityFn& quality, const LatencyTable& table,
                                        double base_quality) {
  std::vector<ActionScore> scores;
  for (const BlockInfo& info : model.blocks())
    scores.push_back(evaluate_action(model, {ActionDirection::Remove, info.spec}, quality, table, base_quality));
  std::sort(scores.begin(), scores.end(), [](const ActionScore& a, const ActionScore& b) {
    if (a.value != b.value) return a.value < b.value;
    const auto& x = a.action.target;
    const auto& y = b.action.target;
    return std::tie(x.stage, x.index, x.kind) < std::tie(y.stage, y.index, y.kind);
  });
  return scores;
}

void EvolveConfig::validate() const {
  if (!(target_ms > 0.0)) throw ConfigError("evolve.target_ms", "must be > 0");
  if (group_size < 1) throw ConfigError("evolve.group_size", "must be >= 1");
  if (rounds < 0) throw ConfigError("evolve.rounds", "must be >= 0");
  if (max_extra_rounds < 0) throw ConfigError("evolve.max_extra_rounds", "must be >= 0");
  if (eval_steps < 1) throw ConfigError("evolve.eval_steps", "must be >= 1");
  if (!(cfg_scale >= 0.0)) throw ConfigError("evolve.cfg_scale", "must be >= 0");
}

EvolveResult evolve(const Model& model, const QualityFn& quality, const LatencyTable& table,
                    const EvolveConfig& config, const TrainInterval& train) {
  config.validate();
  EvolveResult result{model, model.genome(), {}};
  Model& current = result.model;

  double cheapest = std::numeric_limits<double>::infinity();
  for (const BlockInfo& b : current.blocks()) cheapest = std::min(cheapest, table.at(key_of(b)));
  if (config.target_ms < cheapest)
    throw DomainError("evolve: target " + format_double(config.target_ms) +
                      " ms is below the cheapest single-block genome (" + format_double(cheapest) + " ms)");

  auto record = [&](int round, std::vector<ActionScore> executed) {
    const ArchitectureGenome g = current.genome();
    result.history.push_back(
        {round, g, genome_latency(g, table), quality(current, all_execute(current)), std::move(executed)});
  };
  record(0, {});

  for (int round = 1;; ++round) {
    const bool budgeted = round <= config.rounds;
    double latency = genome_latency(current.genome(), table);
    if (!budgeted && latency <= config.target_ms) break;
    if (round > config.rounds + config.max_extra_rounds)
      throw Error("evolve: latency " + format_double(latency) + " ms still above target after " +
                  std::to_string(round - 1) + " rounds");
    if (budgeted && train) train(current, round);

    const double base = quality(current, all_execute(current));
    const std::vector<ActionScore> scores = score_removals(current, quality, table, base);
    std::vector<ActionScore> executed;

    if (latency > config.target_ms) {
      const std::size_t removable = current.num_blocks() - 1;
      const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(config.group_size), removable);
      for (std::size_t i = 0; i < k; ++i) {
        current.remove_block(find_uid(current, scores[i].uid).spec);
        executed.push_back(scores[i]);
      }
    } else {
      for (auto it = scores.rbegin(); it != scores.rend(); ++it) {
        if (static_cast<int>(executed.size()) == config.group_size) break;
        const BlockInfo info = find_uid(current, it->uid);
        const double entry = table.at(key_of(info));
        if (latency + entry > config.target_ms) continue;
        current = mutate(current, {ActionDirection::Add, info.spec});
        latency += entry;
        ActionScore added = *it;
        added.action = {ActionDirection::Add, info.spec};
        executed.push_back(added);
      }
    }
    record(round, std::move(executed));
  }
  result.genome = current.genome();
  return result;
}

void write_history_csv(const std::filesystem::path& path, std::span<const EvolveRecord> history) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "round,latency_ms,quality,blocks,executed,genome\n";
  for (const EvolveRecord& r : history) {
    std::string executed;
    for (const ActionScore& s : r.executed) {
      if (!executed.empty()) executed += ';';
      executed += to_string(s.action);
    }
    char num[64];
    std::snprintf(num, sizeof num, "%.10g,%.10g", r.latency_ms, r.quality);
    out << r.round << ',' << num << ',' << r.genome.total_blocks() << ",\"" << executed << "\","
        << layout_string(r.genome) << '\n';
  }
}

}  // namespace snaplab
