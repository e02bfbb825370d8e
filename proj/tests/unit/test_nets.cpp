#include <gtest/gtest.h>

#include <set>

#include "snaplab/error.hpp"
#include "snaplab/evolve.hpp"
#include "snaplab/nets.hpp"
#include "test_util.hpp"

namespace snaplab {
namespace {

const NoiseSchedule kCos = NoiseSchedule::cosine();

LatentState probe_state(Eigen::Index n, std::uint64_t seed) {
  Rng rng(seed);
  LatentState z{rng.normal(n, 2), Vector(n)};
  for (Eigen::Index i = 0; i < n; ++i) z.t(i) = rng.uniform(0.0, 1.0);
  return z;
}

std::vector<int> probe_labels(Eigen::Index n) {
  std::vector<int> l(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) l[static_cast<std::size_t>(i)] = static_cast<int>(i % 9);  // includes null
  return l;
}

TEST(Genome, DeskDefaultShape) {
  const auto g = ArchitectureGenome::desk_default();
  ASSERT_EQ(g.stages.size(), 7u);
  EXPECT_EQ(g.total_blocks(), 14);
  EXPECT_EQ(g.mid_stage(), 3);
  EXPECT_EQ(g.stages[0].width, g.stages[6].width);
  EXPECT_NO_THROW(g.validate());
}

// Per-stage (cross-attention, ResNet) counts of the reference UNets.
TEST(Genome, ReferenceBlockCounts) {
  const auto o = ArchitectureGenome::reference_origin();
  const auto e = ArchitectureGenome::reference_efficient();
  const int oc[] = {2, 2, 2, 1, 3, 3, 3}, orr[] = {2, 2, 2, 7, 3, 3, 3};
  const int ec[] = {0, 2, 2, 1, 6, 3, 0}, er[] = {2, 2, 1, 4, 2, 3, 3};
  for (int s = 0; s < 7; ++s) {
    EXPECT_EQ(o.stages[s].count(BlockKind::CrossAttention), oc[s]);
    EXPECT_EQ(o.stages[s].count(BlockKind::ResNet), orr[s]);
    EXPECT_EQ(e.stages[s].count(BlockKind::CrossAttention), ec[s]);
    EXPECT_EQ(e.stages[s].count(BlockKind::ResNet), er[s]);
  }
}

TEST(Genome, ValidationErrors) {
  auto g = ArchitectureGenome::desk_default();
  g.stages.pop_back();
  EXPECT_THROW(g.validate(), DomainError);
  g = ArchitectureGenome::desk_default();
  g.stages[6].width = 48;
  EXPECT_THROW(g.validate(), DomainError);
  g = ArchitectureGenome::desk_default();
  g.stages[1].width = 0;
  EXPECT_THROW(g.validate(), DomainError);
  g = ArchitectureGenome::desk_default();
  for (auto& s : g.stages) s.layout.clear();
  EXPECT_THROW(g.validate(), DomainError);
}

TEST(Genome, TextRoundTrip) {
  const auto g = ArchitectureGenome::reference_efficient();
  EXPECT_EQ(ArchitectureGenome::from_text(g.to_text()), g);
  EXPECT_THROW(ArchitectureGenome::from_text("{\"stages\": 3}"), Error);
}

TEST(Model, PredictsVelocityOfRightShape) {
  const Model m(ArchitectureGenome::desk_default(), ModelConfig{}, 1);
  const LatentState z = probe_state(9, 2);
  const Prediction p = m.predict(z, probe_labels(9));
  EXPECT_EQ(p.kind, PredictionKind::V);
  EXPECT_EQ(p.value.rows(), 9);
  EXPECT_EQ(p.value.cols(), 2);
  EXPECT_TRUE(all_finite(p.value));
  EXPECT_EQ(m.null_label(), 8);
  EXPECT_THROW(m.predict(z, std::vector<int>(9, 9 + 1)), Error);
}

TEST(Model, SeedDeterminesWeights) {
  const Model a(ArchitectureGenome::desk_default(), ModelConfig{}, 5);
  const Model b(ArchitectureGenome::desk_default(), ModelConfig{}, 5);
  const Model c(ArchitectureGenome::desk_default(), ModelConfig{}, 6);
  EXPECT_EQ(a.checksum(), b.checksum());
  EXPECT_NE(a.checksum(), c.checksum());
}

TEST(Model, CopyIsDeep) {
  Model a(ArchitectureGenome::desk_default(), ModelConfig{}, 1);
  const std::uint64_t before = a.checksum();
  Model b = a;
  b.parameters().front()->value().setConstant(3.0);
  EXPECT_EQ(a.checksum(), before);
  EXPECT_NE(b.checksum(), before);
}

TEST(Model, SaveLoadPreservesPredictions) {
  testing::TempDir dir("model");
  const Model a(ArchitectureGenome::reference_efficient(), ModelConfig{}, 3);
  a.save(dir / "ck");
  const Model b = Model::load(dir / "ck");
  EXPECT_EQ(b.checksum(), a.checksum());
  EXPECT_EQ(b.genome(), a.genome());
  const LatentState z = probe_state(6, 4);
  EXPECT_EQ(a.predict(z, probe_labels(6)).value, b.predict(z, probe_labels(6)).value);
  EXPECT_THROW(Model::load(dir / "nope"), Error);
}

TEST(Model, BlockRegistry) {
  const Model m(ArchitectureGenome::desk_default(), ModelConfig{}, 1);
  const auto blocks = m.blocks();
  ASSERT_EQ(blocks.size(), m.num_blocks());
  std::set<std::uint64_t> uids;
  long block_params = 0;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    EXPECT_EQ(blocks[i].flat_index, i);
    EXPECT_EQ(m.flat_index(blocks[i].spec), i);
    EXPECT_EQ(blocks[i].parameters, block_parameter_count(blocks[i].spec.kind, blocks[i].spec.width, m.config()));
    uids.insert(blocks[i].uid);
    block_params += blocks[i].parameters;
  }
  EXPECT_EQ(uids.size(), blocks.size());
  EXPECT_EQ(block_params + m.fixed_parameter_count(), m.parameter_count());
  EXPECT_THROW(m.block(BlockSpec{0, 5, BlockKind::ResNet, 32}), DomainError);
}

TEST(Model, AllExecuteMaskEqualsPlainForward) {
  const Model m(ArchitectureGenome::desk_default(), ModelConfig{}, 1);
  const LatentState z = probe_state(8, 3);
  const SkipMask all(m.num_blocks(), true);
  EXPECT_EQ(m.predict_masked(z, probe_labels(8), all).value, m.predict(z, probe_labels(8)).value);
  EXPECT_THROW(m.predict_masked(z, probe_labels(8), SkipMask(3, true)), Error);
}

// Masking a block and deleting it run the same arithmetic.
TEST(Model, MaskMatchesSurgeryExactly) {
  const Model m(ArchitectureGenome::desk_default(), ModelConfig{}, 7);
  const LatentState z = probe_state(10, 4);
  for (const BlockInfo& info : m.blocks()) {
    SkipMask mask(m.num_blocks(), true);
    mask[info.flat_index] = false;
    const Model cut = mutate(m, Action{ActionDirection::Remove, info.spec});
    EXPECT_EQ(m.predict_masked(z, probe_labels(10), mask).value, cut.predict(z, probe_labels(10)).value)
        << to_string(info.spec);
  }
}

TEST(Model, ZeroedBlockIsIdentity) {
  Model m(ArchitectureGenome::desk_default(), ModelConfig{}, 2);
  const BlockSpec target{2, 0, BlockKind::CrossAttention, 0};
  const std::size_t flat = m.flat_index(target);
  std::size_t position = 0;
  for (const auto& info : m.blocks())
    if (info.spec.stage == 2 && info.flat_index < flat) ++position;
  Block b = m.remove_block(target);
  for (Param& p : b.params) p.value().setZero();
  m.insert_block(2, position, std::move(b));

  const LatentState z = probe_state(7, 5);
  SkipMask mask(m.num_blocks(), true);
  mask[flat] = false;
  EXPECT_EQ(m.predict_masked(z, probe_labels(7), mask).value, m.predict(z, probe_labels(7)).value);
}

TEST(Mutate, AddCopiesWeightsAndLeavesOthersBitwise) {
  const Model m(ArchitectureGenome::desk_default(), ModelConfig{}, 1);
  const BlockSpec target{1, 0, BlockKind::ResNet, 0};
  const Model grown = mutate(m, Action{ActionDirection::Add, target});
  EXPECT_EQ(grown.num_blocks(), m.num_blocks() + 1);
  EXPECT_EQ(grown.genome().stages[1].count(BlockKind::ResNet), 2);
  const Block& orig = m.block(target);
  const Block& copy = grown.block(BlockSpec{1, 1, BlockKind::ResNet, 0});
  ASSERT_EQ(copy.params.size(), orig.params.size());
  for (std::size_t i = 0; i < copy.params.size(); ++i) EXPECT_EQ(copy.params[i].value(), orig.params[i].value());
  EXPECT_NE(copy.uid, orig.uid);
  // Every block that existed before keeps its weights bit for bit.
  for (const auto& info : m.blocks()) {
    bool found = false;
    for (const auto& g : grown.blocks())
      if (g.uid == info.uid) {
        found = true;
        const Block& a = m.block(info.spec);
        const Block& b = grown.block(g.spec);
        for (std::size_t i = 0; i < a.params.size(); ++i) EXPECT_EQ(a.params[i].value(), b.params[i].value());
      }
    EXPECT_TRUE(found);
  }
  const Model shrunk = mutate(m, Action{ActionDirection::Remove, target});
  EXPECT_EQ(shrunk.num_blocks(), m.num_blocks() - 1);
  EXPECT_EQ(shrunk.genome().stages[1].count(BlockKind::ResNet), 0);
}

TEST(SkipMask, ExecuteFrequencyMatchesProbability) {
  Rng rng(9);
  const SkipConfig cfg{0.7, {}};
  long executed = 0;
  const int draws = 4000, blocks = 10;
  for (int i = 0; i < draws; ++i)
    for (bool b : sample_skip_mask(cfg, blocks, rng)) executed += b;
  const double n = draws * blocks;
  // 5 binomial standard deviations.
  EXPECT_NEAR(executed / n, 0.7, 5 * std::sqrt(0.7 * 0.3 / n));
}

TEST(SkipMask, PerBlockOverridesAndValidation) {
  Rng rng(10);
  const SkipConfig cfg{0.5, {1.0, 0.0, 1.0}};
  for (int i = 0; i < 50; ++i) {
    const SkipMask m = sample_skip_mask(cfg, 3, rng);
    EXPECT_TRUE(m[0]);
    EXPECT_FALSE(m[1]);
    EXPECT_TRUE(m[2]);
  }
  EXPECT_THROW(sample_skip_mask(cfg, 4, rng), ShapeError);
  EXPECT_THROW((SkipConfig{1.5, {}}.validate()), DomainError);
  EXPECT_THROW((SkipConfig{0.5, {0.2, -0.1}}.validate()), DomainError);
}

TEST(Model, GradientsReachEveryParameter) {
  Model m(ArchitectureGenome::desk_default(), ModelConfig{}, 4);
  const LatentState z = probe_state(16, 6);
  ad::backward(ad::mean(ad::square(m.forward(z, probe_labels(16)))));
  int touched = 0;
  for (Param* p : m.parameters()) touched += p->grad().cwiseAbs().maxCoeff() > 0.0;
  EXPECT_EQ(touched, static_cast<int>(m.parameters().size()));
}

TEST(IsolatedBlock, RunsFinite) {
  for (BlockKind k : {BlockKind::ResNet, BlockKind::CrossAttention}) {
    const IsolatedBlock b(k, 64, ModelConfig{}, 32, 1);
    EXPECT_TRUE(std::isfinite(b.run()));
  }
}

}  // namespace
}  // namespace snaplab
