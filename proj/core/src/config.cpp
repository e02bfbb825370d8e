#include "snaplab/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "snaplab/error.hpp"

namespace snaplab {

using json = nlohmann::json;

namespace {

/// Walks one JSON object, remembering which keys were read so leftovers can be
/// reported as unknown fields.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "must be an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    used_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    const json* v = find(key);
    if (!v) return;
    try {
      if constexpr (std::is_same_v<T, int> || std::is_same_v<T, long> || std::is_same_v<T, std::uint64_t>) {
        if (!v->is_number_integer()) throw ConfigError(field(key), "must be an integer");
        if constexpr (std::is_same_v<T, std::uint64_t>) {
          if (v->is_number_unsigned()) {
            out = v->get<std::uint64_t>();
          } else {
            if (v->get<long long>() < 0) throw ConfigError(field(key), "must be non-negative");
            out = static_cast<std::uint64_t>(v->get<long long>());
          }
        } else {
          out = v->get<T>();
        }
      } else if constexpr (std::is_same_v<T, double>) {
        if (!v->is_number()) throw ConfigError(field(key), "must be a number");
        out = v->get<double>();
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v->is_string()) throw ConfigError(field(key), "must be a string");
        out = v->get<std::string>();
      } else {
        out = v->get<T>();
      }
    } catch (const json::exception& e) {
      throw ConfigError(field(key), e.what());
    }
  }

  void get_index(const std::string& key, Eigen::Index& out) {
    long v = static_cast<long>(out);
    get(key, v);
    out = static_cast<Eigen::Index>(v);
  }

  template <typename Fn>
  void section(const std::string& key, Fn&& fn) {
    const json* v = find(key);
    if (!v) return;
    Section child(*v, field(key));
    fn(child);
    child.finish();
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ConfigError(field(it.key()), "unknown field");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

template <typename Parse>
auto parse_enum(Section& s, const std::string& key, Parse&& parse) -> std::optional<decltype(parse(""))> {
  std::string text;
  if (!s.find(key)) return std::nullopt;
  s.get(key, text);
  try {
    return parse(text);
  } catch (const DomainError& e) {
    throw ConfigError(s.field(key), e.what());
  }
}

ArchitectureGenome genome_from_json(const json& j, const std::string& field) {
  try {
    if (j.is_string()) {
      const auto name = j.get<std::string>();
      if (name == "desk") return ArchitectureGenome::desk_default();
      if (name == "reference_origin") return ArchitectureGenome::reference_origin();
      if (name == "reference_efficient") return ArchitectureGenome::reference_efficient();
      throw ConfigError(field, "unknown genome preset '" + name + "' (desk|reference_origin|reference_efficient)");
    }
    ArchitectureGenome g = ArchitectureGenome::from_text(j.dump());
    g.validate();
    return g;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(field, e.what());
  }
}

void read_model(Section& s, ModelConfig& m) {
  s.get("data_dim", m.data_dim);
  s.get("num_classes", m.num_classes);
  s.get("tokens", m.tokens);
  s.get("token_dim", m.token_dim);
  s.get("time_features", m.time_features);
  s.get("time_dim", m.time_dim);
  s.get("attention_dim", m.attention_dim);
}

json model_json(const ModelConfig& m) {
  return {{"data_dim", m.data_dim},         {"num_classes", m.num_classes}, {"tokens", m.tokens},
          {"token_dim", m.token_dim},       {"time_features", m.time_features},
          {"time_dim", m.time_dim},         {"attention_dim", m.attention_dim}};
}

void read_train(Section& s, TrainConfig& t) {
  if (auto k = parse_enum(s, "parameterization", prediction_kind_from_string)) t.parameterization = *k;
  s.get("batch_size", t.batch_size);
  s.get("steps", t.steps);
  s.get("learning_rate", t.learning_rate);
  s.get("weight_decay", t.weight_decay);
  s.get("cond_drop", t.cond_drop);
  s.get("seed", t.seed);
  s.get("log_every", t.log_every);
  s.get("divergence_factor", t.divergence_factor);
  if (const json* skip = s.find("skip")) {
    if (skip->is_null()) {
      t.skip.reset();
    } else {
      SkipConfig cfg;
      Section k(*skip, s.field("skip"));
      k.get("execute_probability", cfg.execute_probability);
      k.finish();
      t.skip = cfg;
    }
  }
}

json train_json(const TrainConfig& t) {
  json skip = nullptr;
  if (t.skip) skip = {{"execute_probability", t.skip->execute_probability}};
  return {{"parameterization", to_string(t.parameterization)},
          {"batch_size", t.batch_size},
          {"steps", t.steps},
          {"learning_rate", t.learning_rate},
          {"weight_decay", t.weight_decay},
          {"cond_drop", t.cond_drop},
          {"seed", t.seed},
          {"log_every", t.log_every},
          {"divergence_factor", t.divergence_factor},
          {"skip", skip}};
}

void read_distill(Section& s, DistillConfig& d) {
  s.get("teacher_steps", d.teacher_steps);
  s.get("student_steps", d.student_steps);
  if (const json* r = s.find("cfg_range")) {
    if (!r->is_array() || r->size() != 2 || !(*r)[0].is_number() || !(*r)[1].is_number())
      throw ConfigError(s.field("cfg_range"), "must be [w_min, w_max]");
    d.w_min = (*r)[0].get<double>();
    d.w_max = (*r)[1].get<double>();
  }
  s.get("cfg_probability", d.cfg_probability);
  if (auto g = parse_enum(s, "gamma_mode", gamma_mode_from_string)) d.gamma_mode = *g;
  s.get("gamma", d.gamma);
  if (auto m = parse_enum(s, "mode", distill_mode_from_string)) d.mode = *m;
  s.get("seed", d.seed);
  s.get("steps", d.steps);
  s.get("batch_size", d.batch_size);
  s.get("learning_rate", d.learning_rate);
  s.get("weight_decay", d.weight_decay);
  s.get("cond_drop", d.cond_drop);
  s.get("log_every", d.log_every);
}

json distill_json(const DistillConfig& d) {
  return {{"teacher_steps", d.teacher_steps},
          {"student_steps", d.student_steps},
          {"cfg_range", {d.w_min, d.w_max}},
          {"cfg_probability", d.cfg_probability},
          {"gamma_mode", to_string(d.gamma_mode)},
          {"gamma", d.gamma},
          {"mode", to_string(d.mode)},
          {"seed", d.seed},
          {"steps", d.steps},
          {"batch_size", d.batch_size},
          {"learning_rate", d.learning_rate},
          {"weight_decay", d.weight_decay},
          {"cond_drop", d.cond_drop},
          {"log_every", d.log_every}};
}

LatencySource latency_source_from_string(const std::string& s) {
  if (s == "proxy") return LatencySource::Proxy;
  if (s == "measured") return LatencySource::Measured;
  throw DomainError("unknown latency source '" + s + "' (proxy|measured)");
}

void read_evolve(Section& s, EvolveSettings& e) {
  s.get("target_ms", e.target_ms);
  s.get("target_fraction", e.target_fraction);
  s.get("group_size", e.group_size);
  s.get("rounds", e.rounds);
  s.get("train_steps_per_round", e.train_steps_per_round);
  s.get("execute_probability", e.execute_probability);
  s.get("eval_steps", e.eval_steps);
  s.get("cfg_scale", e.cfg_scale);
  s.get_index("valset_size", e.valset_size);
  if (auto src = parse_enum(s, "latency_source", latency_source_from_string)) e.latency_source = *src;
  s.get("proxy_ms_per_kparam", e.proxy_ms_per_kparam);
  s.get("lut_reps", e.lut_reps);
  s.get("lut_batch", e.lut_batch);
}

json evolve_json(const EvolveSettings& e) {
  return {{"target_ms", e.target_ms},
          {"target_fraction", e.target_fraction},
          {"group_size", e.group_size},
          {"rounds", e.rounds},
          {"train_steps_per_round", e.train_steps_per_round},
          {"execute_probability", e.execute_probability},
          {"eval_steps", e.eval_steps},
          {"cfg_scale", e.cfg_scale},
          {"valset_size", e.valset_size},
          {"latency_source", e.latency_source == LatencySource::Proxy ? "proxy" : "measured"},
          {"proxy_ms_per_kparam", e.proxy_ms_per_kparam},
          {"lut_reps", e.lut_reps},
          {"lut_batch", e.lut_batch}};
}

void read_decoder(Section& s, DecoderSettings& d) {
  s.section("spec", [&](Section& k) {
    k.get("latent_channels", d.spec.latent_channels);
    k.get("latent_size", d.spec.latent_size);
    k.get("image_channels", d.spec.image_channels);
    k.get("widths", d.spec.widths);
  });
  s.get("ratio", d.ratio);
  s.get("teacher_seed", d.teacher_seed);
  s.get("student_seed", d.student_seed);
  s.get("denoise_steps", d.denoise_steps);
  s.get("cfg_scale", d.cfg_scale);
  s.get_index("heldout", d.heldout);
  s.get("steps", d.distill.steps);
  s.get("batch_size", d.distill.batch_size);
  s.get("learning_rate", d.distill.learning_rate);
  s.get("weight_decay", d.distill.weight_decay);
  s.get("seed", d.distill.seed);
  s.get("log_every", d.distill.log_every);
}

json decoder_json(const DecoderSettings& d) {
  return {{"spec",
           {{"latent_channels", d.spec.latent_channels},
            {"latent_size", d.spec.latent_size},
            {"image_channels", d.spec.image_channels},
            {"widths", d.spec.widths}}},
          {"ratio", d.ratio},
          {"teacher_seed", d.teacher_seed},
          {"student_seed", d.student_seed},
          {"denoise_steps", d.denoise_steps},
          {"cfg_scale", d.cfg_scale},
          {"heldout", d.heldout},
          {"steps", d.distill.steps},
          {"batch_size", d.distill.batch_size},
          {"learning_rate", d.distill.learning_rate},
          {"weight_decay", d.distill.weight_decay},
          {"seed", d.distill.seed},
          {"log_every", d.distill.log_every}};
}

}  // namespace

ExperimentConfig ExperimentConfig::from_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("<root>", std::string("not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Section root(j, "");
  root.get("name", c.name);
  root.get("seed", c.seed);
  root.section("schedule", [&](Section& s) { s.get("type", c.schedule); });
  if (const json* g = root.find("genome")) c.genome = genome_from_json(*g, "genome");
  root.section("model", [&](Section& s) { read_model(s, c.model); });
  root.section("data", [&](Section& s) {
    s.get("type", c.data.type);
    s.get("seed", c.data.seed);
  });
  root.section("train", [&](Section& s) { read_train(s, c.train); });
  root.section("distill", [&](Section& s) { read_distill(s, c.distill); });
  root.section("evolve", [&](Section& s) { read_evolve(s, c.evolve); });
  root.section("sample", [&](Section& s) {
    s.get("steps", c.sample.steps);
    s.get("cfg_scale", c.sample.cfg_scale);
    s.get_index("n", c.sample.n);
    s.get("seed", c.sample.seed);
  });
  root.section("curve", [&](Section& s) {
    s.get("w_list", c.curve.w_list);
    s.get_index("n_samples", c.curve.n_samples);
    s.get("seed", c.curve.seed);
    s.get("teacher_steps", c.curve.teacher_steps);
  });
  root.section("probe", [&](Section& s) {
    s.get("steps", c.probe.steps);
    s.get("batch_size", c.probe.batch_size);
    s.get("hidden", c.probe.hidden);
    s.get("learning_rate", c.probe.learning_rate);
    s.get("seed", c.probe.seed);
  });
  root.section("decoder", [&](Section& s) { read_decoder(s, c.decoder); });
  root.section("pipeline", [&](Section& s) {
    s.get("finetune_steps", c.pipeline.finetune_steps);
    s.get("distill_steps_16", c.pipeline.distill_steps_16);
    s.get("distill_steps_8", c.pipeline.distill_steps_8);
  });
  root.finish();
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str());
}

std::string ExperimentConfig::to_text() const {
  json j = {{"name", name},
            {"seed", seed},
            {"schedule", {{"type", schedule}}},
            {"genome", json::parse(genome.to_text())},
            {"model", model_json(model)},
            {"data", {{"type", data.type}, {"seed", data.seed}}},
            {"train", train_json(train)},
            {"distill", distill_json(distill)},
            {"evolve", evolve_json(evolve)},
            {"sample", {{"steps", sample.steps}, {"cfg_scale", sample.cfg_scale}, {"n", sample.n}, {"seed", sample.seed}}},
            {"curve",
             {{"w_list", curve.w_list},
              {"n_samples", curve.n_samples},
              {"seed", curve.seed},
              {"teacher_steps", curve.teacher_steps}}},
            {"probe",
             {{"steps", probe.steps},
              {"batch_size", probe.batch_size},
              {"hidden", probe.hidden},
              {"learning_rate", probe.learning_rate},
              {"seed", probe.seed}}},
            {"decoder", decoder_json(decoder)},
            {"pipeline",
             {{"finetune_steps", pipeline.finetune_steps},
              {"distill_steps_16", pipeline.distill_steps_16}, {"distill_steps_8", pipeline.distill_steps_8}}}};
  return j.dump(2);
}

std::string ExperimentConfig::hash() const { return hex64(fnv1a(to_text())); }

void ExperimentConfig::validate() const {
  try {
    NoiseSchedule::from_name(schedule);
  } catch (const Error& e) {
    throw ConfigError("schedule.type", e.what());
  }
  try {
    genome.validate();
  } catch (const DomainError& e) {
    throw ConfigError("genome", e.what());
  }
  if (model.data_dim < 1) throw ConfigError("model.data_dim", "must be >= 1");
  if (model.num_classes < 1) throw ConfigError("model.num_classes", "must be >= 1");
  if (model.tokens < 1) throw ConfigError("model.tokens", "must be >= 1");
  if (model.token_dim < 1) throw ConfigError("model.token_dim", "must be >= 1");
  if (model.time_features < 2 || model.time_features % 2) throw ConfigError("model.time_features", "must be even, >= 2");
  if (model.time_dim < 1) throw ConfigError("model.time_dim", "must be >= 1");
  if (model.attention_dim < 1) throw ConfigError("model.attention_dim", "must be >= 1");
  if (data.type != "toy_2d") throw ConfigError("data.type", "only 'toy_2d' is available");
  train.validate();
  distill.validate();
  if (evolve.target_ms < 0.0) throw ConfigError("evolve.target_ms", "must be >= 0");
  if (evolve.target_ms == 0.0 && !(evolve.target_fraction > 0.0 && evolve.target_fraction <= 1.0))
    throw ConfigError("evolve.target_fraction", "must lie in (0, 1]");
  if (evolve.train_steps_per_round < 0) throw ConfigError("evolve.train_steps_per_round", "must be >= 0");
  if (!(evolve.execute_probability >= 0.0 && evolve.execute_probability <= 1.0))
    throw ConfigError("evolve.execute_probability", "must lie in [0, 1]");
  if (evolve.valset_size < 1) throw ConfigError("evolve.valset_size", "must be >= 1");
  if (!(evolve.proxy_ms_per_kparam > 0.0)) throw ConfigError("evolve.proxy_ms_per_kparam", "must be > 0");
  if (evolve.lut_reps < 3) throw ConfigError("evolve.lut_reps", "must be >= 3");
  if (evolve.lut_batch < 1) throw ConfigError("evolve.lut_batch", "must be >= 1");
  EvolveConfig probe_cfg{evolve.target_ms > 0 ? evolve.target_ms : 1.0, evolve.group_size, evolve.rounds, 64,
                         evolve.eval_steps, evolve.cfg_scale};
  probe_cfg.validate();
  if (sample.steps < 1) throw ConfigError("sample.steps", "must be >= 1");
  if (!(sample.cfg_scale >= 0.0)) throw ConfigError("sample.cfg_scale", "must be >= 0");
  if (sample.n < 1) throw ConfigError("sample.n", "must be >= 1");
  if (curve.w_list.empty()) throw ConfigError("curve.w_list", "must not be empty");
  for (double w : curve.w_list)
    if (!(w >= 0.0)) throw ConfigError("curve.w_list", "entries must be >= 0");
  if (curve.n_samples < 1000) throw ConfigError("curve.n_samples", "must be >= 1000 for the distance metric");
  if (curve.teacher_steps < 1) throw ConfigError("curve.teacher_steps", "must be >= 1");
  if (probe.steps < 1) throw ConfigError("probe.steps", "must be >= 1");
  if (probe.batch_size < 1) throw ConfigError("probe.batch_size", "must be >= 1");
  if (probe.hidden < 1) throw ConfigError("probe.hidden", "must be >= 1");
  if (!(probe.learning_rate > 0.0)) throw ConfigError("probe.learning_rate", "must be > 0");
  try {
    decoder.spec.validate();
  } catch (const DomainError& e) {
    throw ConfigError("decoder.spec", e.what());
  }
  if (!(decoder.ratio > 0.0 && decoder.ratio < 1.0)) throw ConfigError("decoder.ratio", "must lie in (0, 1)");
  if (decoder.denoise_steps < 1) throw ConfigError("decoder.denoise_steps", "must be >= 1");
  if (decoder.heldout < 1) throw ConfigError("decoder.heldout", "must be >= 1");
  decoder.distill.validate();
  if (pipeline.finetune_steps < 0) throw ConfigError("pipeline.finetune_steps", "must be >= 0");
  if (pipeline.distill_steps_16 < 1) throw ConfigError("pipeline.distill_steps_16", "must be >= 1");
  if (pipeline.distill_steps_8 < 1) throw ConfigError("pipeline.distill_steps_8", "must be >= 1");
}

ConditionalDataset make_dataset(const DataSettings& data) {
  if (data.type == "toy_2d") return ConditionalDataset::toy_2d(data.seed);
  throw ConfigError("data.type", "only 'toy_2d' is available");
}

}  // namespace snaplab
