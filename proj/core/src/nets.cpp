#include "snaplab/nets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "snaplab/error.hpp"
#include "snaplab/npy.hpp"

namespace snaplab {

using nlohmann::json;

std::string to_string(BlockKind kind) { return kind == BlockKind::ResNet ? "resnet" : "cross_attention"; }

char block_code(BlockKind kind) { return kind == BlockKind::ResNet ? 'R' : 'C'; }

BlockKind block_kind_from_code(char c) {
  if (c == 'R') return BlockKind::ResNet;
  if (c == 'C') return BlockKind::CrossAttention;
  throw DomainError(std::string("unknown block code '") + c + "'");
}

int StageSpec::count(BlockKind kind) const {
  return static_cast<int>(std::count(layout.begin(), layout.end(), kind));
}

void ArchitectureGenome::validate() const {
  if (stages.empty() || stages.size() % 2 == 0) throw DomainError("genome needs an odd number of stages");
  for (const auto& s : stages)
    if (s.width <= 0) throw DomainError("genome stage '" + s.name + "' has non-positive width");
  const int mid = mid_stage();
  for (int i = 0; i < mid; ++i) {
    const auto& up = stages[stages.size() - 1 - static_cast<std::size_t>(i)];
    if (stages[static_cast<std::size_t>(i)].width != up.width)
      throw DomainError("genome stage '" + up.name + "' must mirror the width of '" +
                        stages[static_cast<std::size_t>(i)].name + "'");
  }
  if (total_blocks() == 0) throw DomainError("genome has zero blocks");
}

int ArchitectureGenome::total_blocks() const {
  int n = 0;
  for (const auto& s : stages) n += static_cast<int>(s.layout.size());
  return n;
}

ArchitectureGenome ArchitectureGenome::interleaved(const std::vector<std::string>& names,
                                                   const std::vector<int>& widths,
                                                   const std::vector<int>& cross_attention,
                                                   const std::vector<int>& resnet) {
  if (names.size() != widths.size() || widths.size() != cross_attention.size() ||
      widths.size() != resnet.size())
    throw DomainError("interleaved genome: per-stage lists differ in length");
  ArchitectureGenome g;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (cross_attention[i] < 0 || resnet[i] < 0) throw DomainError("negative block count");
    StageSpec s{names[i], widths[i], {}};
    for (int j = 0; j < std::max(cross_attention[i], resnet[i]); ++j) {
      if (j < resnet[i]) s.layout.push_back(BlockKind::ResNet);
      if (j < cross_attention[i]) s.layout.push_back(BlockKind::CrossAttention);
    }
    g.stages.push_back(std::move(s));
  }
  return g;
}

namespace {
const std::vector<std::string> kStageNames{"Down-1", "Down-2", "Down-3", "Mid", "Up-1", "Up-2", "Up-3"};
const std::vector<int> kDeskWidths{32, 64, 128, 128, 128, 64, 32};
}  // namespace

ArchitectureGenome ArchitectureGenome::desk_default() {
  return interleaved(kStageNames, kDeskWidths, {1, 1, 1, 1, 1, 1, 1}, {1, 1, 1, 1, 1, 1, 1});
}

ArchitectureGenome ArchitectureGenome::reference_origin() {
  return interleaved(kStageNames, kDeskWidths, {2, 2, 2, 1, 3, 3, 3}, {2, 2, 2, 7, 3, 3, 3});
}

ArchitectureGenome ArchitectureGenome::reference_efficient() {
  return interleaved(kStageNames, kDeskWidths, {0, 2, 2, 1, 6, 3, 0}, {2, 2, 1, 4, 2, 3, 3});
}

std::string ArchitectureGenome::to_text() const {
  json stages_json = json::array();
  for (const auto& s : stages) {
    std::string layout;
    for (BlockKind k : s.layout) layout.push_back(block_code(k));
    stages_json.push_back({{"name", s.name},
                           {"width", s.width},
                           {"layout", layout},
                           {"cross_attention", s.count(BlockKind::CrossAttention)},
                           {"resnet", s.count(BlockKind::ResNet)}});
  }
  return stages_json.dump(2);
}

ArchitectureGenome ArchitectureGenome::from_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DomainError(std::string("genome text is not valid: ") + e.what());
  }
  if (!j.is_array()) throw DomainError("genome text must be a list of stage records");
  ArchitectureGenome g;
  for (const auto& rec : j) {
    StageSpec s;
    s.name = rec.at("name").get<std::string>();
    s.width = rec.at("width").get<int>();
    if (rec.contains("layout")) {
      for (char c : rec.at("layout").get<std::string>()) s.layout.push_back(block_kind_from_code(c));
      if (rec.contains("resnet") && rec["resnet"].get<int>() != s.count(BlockKind::ResNet))
        throw DomainError("stage '" + s.name + "': resnet count disagrees with layout");
      if (rec.contains("cross_attention") &&
          rec["cross_attention"].get<int>() != s.count(BlockKind::CrossAttention))
        throw DomainError("stage '" + s.name + "': cross_attention count disagrees with layout");
      g.stages.push_back(std::move(s));
    } else {
      const auto one = interleaved({s.name}, {s.width}, {rec.at("cross_attention").get<int>()},
                                   {rec.at("resnet").get<int>()});
      g.stages.push_back(one.stages.front());
    }
  }
  return g;
}

std::string to_string(const BlockSpec& spec) {
  return to_string(spec.kind) + "[" + std::to_string(spec.stage) + "," + std::to_string(spec.index) + "]";
}

std::string to_string(const Action& action) {
  return std::string(action.direction == ActionDirection::Add ? "+" : "-") + to_string(action.target);
}

double SkipConfig::probability(std::size_t block) const {
  return per_block.empty() ? execute_probability : per_block.at(block);
}

void SkipConfig::validate() const {
  auto ok = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!ok(execute_probability)) throw DomainError("skip probability must lie in [0, 1]");
  for (double p : per_block)
    if (!ok(p)) throw DomainError("skip probability must lie in [0, 1]");
}

SkipMask sample_skip_mask(const SkipConfig& config, std::size_t blocks, Rng& rng) {
  if (!config.per_block.empty() && config.per_block.size() != blocks)
    throw ShapeError("skip config does not cover every block");
  SkipMask mask(blocks);
  for (std::size_t i = 0; i < blocks; ++i) mask[i] = rng.uniform() < config.probability(i);
  return mask;
}

long Block::parameter_count() const {
  long n = 0;
  for (const auto& p : params) n += p.size();
  return n;
}

namespace {

Tensor init_weight(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng, double gain = 1.0) {
  return rng.normal(fan_in, fan_out) * (gain / std::sqrt(static_cast<double>(fan_in)));
}

Tensor zeros_row(Eigen::Index n) { return Tensor::Zero(1, n); }

Tensor time_features(const Vector& t, int features) {
  Tensor f(t.size(), features);
  const int half = features / 2;
  for (Eigen::Index i = 0; i < t.size(); ++i)
    for (int k = 0; k < half; ++k) {
      const double arg = std::numbers::pi * std::ldexp(1.0, k) * t(i);
      f(i, k) = std::sin(arg);
      f(i, half + k) = std::cos(arg);
    }
  return f;
}

struct BlockContext {
  const ModelConfig* config;
  ad::Var time_embedding;
  ad::Var tokens;
  std::span<const int> labels;
};

// Both kinds are residual, so skipping a block is exactly the identity.
ad::Var apply_block(const Block& b, const ad::Var& h, const BlockContext& ctx) {
  using namespace ad;
  const auto& p = b.params;
  if (b.kind == BlockKind::ResNet) {
    Var a = silu(layer_norm(h));
    a = add_row(matmul(a, p[0].var()), p[1].var()) + matmul(ctx.time_embedding, p[2].var());
    a = silu(a);
    a = add_row(matmul(a, p[3].var()), p[4].var());
    return h + a;
  }
  const ModelConfig& cfg = *ctx.config;
  const Eigen::Index labels_total = ctx.tokens.rows();
  const Var q = matmul(layer_norm(h), p[0].var());
  const Var tok = reshape(ctx.tokens, labels_total * cfg.tokens, cfg.token_dim);
  const Var keys =
      gather_rows(reshape(matmul(tok, p[1].var()), labels_total, cfg.tokens * cfg.attention_dim), ctx.labels);
  const Var values =
      gather_rows(reshape(matmul(tok, p[2].var()), labels_total, cfg.tokens * cfg.attention_dim), ctx.labels);
  const Var o = attend(q, keys, values, cfg.tokens);
  return h + add_row(matmul(o, p[3].var()), p[4].var());
}

Block new_block(BlockKind kind, int width, const ModelConfig& cfg, std::uint64_t uid, Rng& rng) {
  Block b{kind, width, uid, {}};
  if (kind == BlockKind::ResNet) {
    b.params.emplace_back(init_weight(width, width, rng));
    b.params.emplace_back(zeros_row(width));
    b.params.emplace_back(init_weight(cfg.time_dim, width, rng, 0.5));
    b.params.emplace_back(init_weight(width, width, rng, 0.5));
    b.params.emplace_back(zeros_row(width));
  } else {
    b.params.emplace_back(init_weight(width, cfg.attention_dim, rng));
    b.params.emplace_back(init_weight(cfg.token_dim, cfg.attention_dim, rng));
    b.params.emplace_back(init_weight(cfg.token_dim, cfg.attention_dim, rng));
    b.params.emplace_back(init_weight(cfg.attention_dim, width, rng, 0.5));
    b.params.emplace_back(zeros_row(width));
  }
  return b;
}

void validate_config(const ModelConfig& c) {
  if (c.data_dim <= 0 || c.num_classes <= 0 || c.tokens <= 0 || c.token_dim <= 0 || c.time_dim <= 0 ||
      c.attention_dim <= 0 || c.time_features <= 0 || c.time_features % 2 != 0)
    throw DomainError("model config: all sizes must be positive (time_features even)");
}

}  // namespace

Block Model::make_block(BlockKind kind, int width, Rng& rng) { return new_block(kind, width, config_, next_uid_++, rng); }

Model::Model(ArchitectureGenome genome, ModelConfig config, std::uint64_t seed) : config_(config), seed_(seed) {
  genome.validate();
  validate_config(config_);
  Rng rng(seed);
  const auto& st = genome.stages;
  in_w_ = Param(init_weight(config_.data_dim, st.front().width, rng));
  in_b_ = Param(zeros_row(st.front().width));
  time_w_ = Param(init_weight(config_.time_features, config_.time_dim, rng));
  time_b_ = Param(zeros_row(config_.time_dim));
  tokens_ = Param(rng.normal(config_.num_classes + 1, static_cast<Eigen::Index>(config_.tokens) * config_.token_dim));
  for (const auto& s : st) {
    Stage stage{s.name, s.width, {}};
    for (BlockKind k : s.layout) stage.blocks.push_back(make_block(k, s.width, rng));
    stages_.push_back(std::move(stage));
  }
  for (std::size_t i = 0; i + 1 < st.size(); ++i) {
    if (st[i].width == st[i + 1].width) {
      transitions_.emplace_back(std::nullopt);
    } else {
      transitions_.emplace_back(
          std::make_pair(Param(init_weight(st[i].width, st[i + 1].width, rng)), Param(zeros_row(st[i + 1].width))));
    }
  }
  out_w_ = Param(init_weight(st.back().width, config_.data_dim, rng));
  out_b_ = Param(zeros_row(config_.data_dim));
}

Model build_model(const ArchitectureGenome& genome, const ModelConfig& config, std::uint64_t seed) {
  return Model(genome, config, seed);
}

ad::Var Model::forward(const LatentState& z, std::span<const int> labels, const SkipMask* mask) const {
  using namespace ad;
  if (z.z.cols() != config_.data_dim) throw ShapeError("model forward: latent dimension mismatch");
  if (static_cast<Eigen::Index>(labels.size()) != z.rows() || z.t.size() != z.rows())
    throw ShapeError("model forward: need one label and one time per row");
  if (mask && mask->size() != num_blocks()) throw ShapeError("skip mask does not cover every block");
  for (int l : labels)
    if (l < 0 || l > config_.num_classes) throw DomainError("model forward: label out of range");
  if (!z.z.allFinite()) throw NonFiniteError("model forward: non-finite input latent");

  const BlockContext ctx{&config_,
                         silu(add_row(matmul(Var::constant(time_features(z.t, config_.time_features)), time_w_.var()),
                                      time_b_.var())),
                         tokens_.var(), labels};

  Var h = add_row(matmul(Var::constant(z.z), in_w_.var()), in_b_.var());
  const int mid = static_cast<int>(stages_.size()) / 2;
  std::vector<Var> skips(static_cast<std::size_t>(mid));
  std::size_t flat = 0;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const int si = static_cast<int>(i);
    if (si > mid) h = h + skips[stages_.size() - 1 - i];
    for (std::size_t j = 0; j < stages_[i].blocks.size(); ++j, ++flat) {
      if (mask && !(*mask)[flat]) continue;
      h = apply_block(stages_[i].blocks[j], h, ctx);
      if (!h.value().allFinite())
        throw NonFiniteError("model forward: non-finite activation after block " +
                             to_string(stages_[i].blocks[j].kind) + " #" + std::to_string(j) + " of stage '" +
                             stages_[i].name + "'");
    }
    if (si < mid) skips[i] = h;
    if (i < transitions_.size() && transitions_[i])
      h = add_row(matmul(h, transitions_[i]->first.var()), transitions_[i]->second.var());
  }
  return add_row(matmul(silu(layer_norm(h)), out_w_.var()), out_b_.var());
}

Prediction Model::predict(const LatentState& z, std::span<const int> labels) const {
  ad::NoGradGuard guard;
  return {PredictionKind::V, forward(z, labels).value()};
}

Prediction Model::predict_masked(const LatentState& z, std::span<const int> labels, const SkipMask& mask) const {
  ad::NoGradGuard guard;
  return {PredictionKind::V, forward(z, labels, &mask).value()};
}

ArchitectureGenome Model::genome() const {
  ArchitectureGenome g;
  for (const auto& s : stages_) {
    StageSpec spec{s.name, s.width, {}};
    for (const auto& b : s.blocks) spec.layout.push_back(b.kind);
    g.stages.push_back(std::move(spec));
  }
  return g;
}

std::size_t Model::num_blocks() const {
  std::size_t n = 0;
  for (const auto& s : stages_) n += s.blocks.size();
  return n;
}

std::vector<BlockInfo> Model::blocks() const {
  std::vector<BlockInfo> out;
  std::size_t flat = 0;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    int counts[2] = {0, 0};
    for (const auto& b : stages_[i].blocks) {
      const int k = static_cast<int>(b.kind);
      out.push_back({BlockSpec{static_cast<int>(i), counts[k]++, b.kind, b.width}, b.uid, flat++, b.parameter_count()});
    }
  }
  return out;
}

std::pair<std::size_t, std::size_t> Model::locate(const BlockSpec& spec) const {
  if (spec.stage < 0 || static_cast<std::size_t>(spec.stage) >= stages_.size())
    throw DomainError("block " + to_string(spec) + ": no such stage");
  const auto& blocks = stages_[static_cast<std::size_t>(spec.stage)].blocks;
  int seen = 0;
  for (std::size_t j = 0; j < blocks.size(); ++j) {
    if (blocks[j].kind != spec.kind) continue;
    if (seen++ == spec.index) return {static_cast<std::size_t>(spec.stage), j};
  }
  throw DomainError("block " + to_string(spec) + ": no such block");
}

std::size_t Model::flat_index(const BlockSpec& spec) const {
  const auto [si, pos] = locate(spec);
  std::size_t flat = 0;
  for (std::size_t i = 0; i < si; ++i) flat += stages_[i].blocks.size();
  return flat + pos;
}

const Block& Model::block(const BlockSpec& spec) const {
  const auto [si, pos] = locate(spec);
  return stages_[si].blocks[pos];
}

std::vector<Param*> Model::parameters() {
  std::vector<Param*> ps{&in_w_, &in_b_, &time_w_, &time_b_, &tokens_};
  for (auto& s : stages_)
    for (auto& b : s.blocks)
      for (auto& p : b.params) ps.push_back(&p);
  for (auto& t : transitions_)
    if (t) {
      ps.push_back(&t->first);
      ps.push_back(&t->second);
    }
  ps.push_back(&out_w_);
  ps.push_back(&out_b_);
  return ps;
}

long Model::fixed_parameter_count() const {
  long n = in_w_.size() + in_b_.size() + time_w_.size() + time_b_.size() + tokens_.size() + out_w_.size() +
           out_b_.size();
  for (const auto& t : transitions_)
    if (t) n += t->first.size() + t->second.size();
  return n;
}

long Model::parameter_count() const {
  long n = 0;
  for (Param* p : const_cast<Model*>(this)->parameters()) n += p->size();
  return n;
}

std::uint64_t Model::checksum() const {
  std::vector<const Tensor*> ts;
  for (Param* p : const_cast<Model*>(this)->parameters()) ts.push_back(&p->value());
  return snaplab::checksum(ts);
}

Block Model::remove_block(const BlockSpec& spec) {
  const auto [si, pos] = locate(spec);
  auto& blocks = stages_[si].blocks;
  if (num_blocks() == 1) throw DomainError("cannot remove the last block of a model");
  Block b = std::move(blocks[pos]);
  blocks.erase(blocks.begin() + static_cast<std::ptrdiff_t>(pos));
  return b;
}

void Model::insert_block(int stage, std::size_t position, Block block) {
  if (stage < 0 || static_cast<std::size_t>(stage) >= stages_.size()) throw DomainError("insert_block: no such stage");
  auto& s = stages_[static_cast<std::size_t>(stage)];
  if (block.width != s.width) throw DomainError("insert_block: width does not match stage");
  if (position > s.blocks.size()) throw DomainError("insert_block: position past end of stage");
  s.blocks.insert(s.blocks.begin() + static_cast<std::ptrdiff_t>(position), std::move(block));
}

Model mutate(const Model& model, const Action& action) {
  Model out = model;
  if (action.direction == ActionDirection::Remove) {
    out.remove_block(action.target);
    return out;
  }
  Block copy = model.block(action.target);
  copy.uid = out.next_uid();
  const std::size_t flat = model.flat_index(action.target);
  std::size_t stage_start = 0;
  for (const auto& info : model.blocks())
    if (info.spec.stage == action.target.stage) {
      stage_start = info.flat_index;
      break;
    }
  out.insert_block(action.target.stage, flat - stage_start + 1, std::move(copy));
  return out;
}

namespace {

json config_to_json(const ModelConfig& c) {
  return {{"data_dim", c.data_dim},       {"num_classes", c.num_classes},     {"tokens", c.tokens},
          {"token_dim", c.token_dim},     {"time_features", c.time_features}, {"time_dim", c.time_dim},
          {"attention_dim", c.attention_dim}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.data_dim = j.at("data_dim");
  c.num_classes = j.at("num_classes");
  c.tokens = j.at("tokens");
  c.token_dim = j.at("token_dim");
  c.time_features = j.at("time_features");
  c.time_dim = j.at("time_dim");
  c.attention_dim = j.at("attention_dim");
  return c;
}

}  // namespace

void Model::save(const std::filesystem::path& dir) const {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "params");
  json uids = json::array();
  for (const auto& s : stages_) {
    json row = json::array();
    for (const auto& b : s.blocks) row.push_back(b.uid);
    uids.push_back(row);
  }
  const json manifest{{"format", "snaplab-checkpoint-1"},
                      {"genome", json::parse(genome().to_text())},
                      {"config", config_to_json(config_)},
                      {"seed", seed_},
                      {"next_uid", next_uid_},
                      {"block_uids", uids},
                      {"parameter_count", parameter_count()},
                      {"checksum", hex64(checksum())}};
  std::size_t k = 0;
  for (Param* p : const_cast<Model*>(this)->parameters())
    write_npy(dir / "params" / ("p" + std::to_string(k++) + ".npy"), p->value());
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

Model Model::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error("checkpoint " + dir.string() + ": missing manifest.json");
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw Error("checkpoint " + dir.string() + ": malformed manifest: " + e.what());
  }
  const auto genome = ArchitectureGenome::from_text(manifest.at("genome").dump());
  Model m(genome, config_from_json(manifest.at("config")), manifest.at("seed").get<std::uint64_t>());
  m.next_uid_ = manifest.at("next_uid").get<std::uint64_t>();
  const auto& uids = manifest.at("block_uids");
  for (std::size_t i = 0; i < m.stages_.size(); ++i)
    for (std::size_t j = 0; j < m.stages_[i].blocks.size(); ++j) m.stages_[i].blocks[j].uid = uids.at(i).at(j);
  std::size_t k = 0;
  for (Param* p : m.parameters()) {
    Tensor t = read_npy(dir / "params" / ("p" + std::to_string(k++) + ".npy"));
    if (t.rows() != p->value().rows() || t.cols() != p->value().cols())
      throw ShapeError("checkpoint " + dir.string() + ": parameter " + std::to_string(k - 1) + " has wrong shape");
    p->value() = std::move(t);
  }
  if (manifest.contains("checksum") && manifest["checksum"].get<std::string>() != hex64(m.checksum()))
    throw Error("checkpoint " + dir.string() + ": checksum mismatch");
  return m;
}

long block_parameter_count(BlockKind kind, int width, const ModelConfig& config) {
  validate_config(config);
  Rng rng(0);
  return new_block(kind, width, config, 0, rng).parameter_count();
}

IsolatedBlock::IsolatedBlock(BlockKind kind, int width, const ModelConfig& config, int batch, std::uint64_t seed)
    : config_(config) {
  validate_config(config_);
  Rng rng(seed);
  block_ = new_block(kind, width, config_, 0, rng);
  tokens_ = Param(rng.normal(config_.num_classes + 1, static_cast<Eigen::Index>(config_.tokens) * config_.token_dim));
  hidden_ = rng.normal(batch, width);
  time_embedding_ = rng.normal(batch, config_.time_dim);
  labels_.resize(static_cast<std::size_t>(batch));
  for (int i = 0; i < batch; ++i) labels_[static_cast<std::size_t>(i)] = i % (config_.num_classes + 1);
}

double IsolatedBlock::run() const {
  ad::NoGradGuard guard;
  const BlockContext ctx{&config_, ad::Var::constant(time_embedding_), tokens_.var(), labels_};
  return apply_block(block_, ad::Var::constant(hidden_), ctx).value().sum();
}

}  // namespace snaplab
