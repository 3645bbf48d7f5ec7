#include <gtest/gtest.h>

#include "blockkd/errors.hpp"
#include "blockkd/nn.hpp"
#include "gradcheck.hpp"

using namespace bkd;
using bkd::testing::random_tensor;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Nn, BlockRejectsDeclaredShapeMismatch) {
  Rng rng(0);
  std::vector<Layer> layers{make_conv(1, 4, 3, 2, rng)};
  EXPECT_THROW(Block(layers, {1, 8, 8}, {4, 8, 8}), StructuralError);
  EXPECT_NO_THROW(Block(layers, {1, 8, 8}, {4, 4, 4}));
}

TEST(Nn, BlockForwardChecksPerSampleShape) {
  Rng rng(0);
  Block b({make_conv(1, 4, 3, 1, rng)}, {1, 8, 8});
  EXPECT_THROW(b.forward(Tensor::zeros({2, 2, 8, 8}), BnMode::eval, "block1"), StructuralError);
}

TEST(Nn, CompositeNetRejectsBrokenChain) {
  Rng rng(0);
  Block b1({make_conv(1, 4, 3, 1, rng)}, {1, 8, 8});
  Block b2({make_conv(8, 8, 3, 2, rng)}, {8, 8, 8});
  Block head({GlobalAvgPoolLayer{}, make_dense(8, 3, rng)}, {8, 4, 4});
  std::vector<Block> blocks{b1, b2};
  EXPECT_THROW(CompositeNet(blocks, head), StructuralError);
}

TEST(Nn, FactoryShapesForEveryPreset) {
  for (const auto& name : arch_preset_names()) {
    const auto arch = arch_preset(name);
    Rng rng(3);
    auto pair = build_factory_pair(arch, rng);
    EXPECT_TRUE(pair.teacher.frozen()) << name;
    EXPECT_EQ(pair.teacher.num_blocks(), pair.student.num_blocks()) << name;
    EXPECT_EQ(pair.connectors.size(), pair.student.num_blocks()) << name;
    Shape batch{2};
    batch.insert(batch.end(), arch.input.begin(), arch.input.end());
    auto out = pair.student.forward_with_features(random_tensor(rng, batch));
    EXPECT_EQ(out.logits.shape(), (Shape{2, arch.classes})) << name;
    ASSERT_EQ(out.features.size(), pair.student.num_blocks());
    for (std::size_t i = 1; i <= pair.student.num_blocks(); ++i) {
      const auto& c = pair.connectors[i - 1];
      EXPECT_EQ(c.index(), i);
      EXPECT_EQ(c.in_channels(), pair.student.feature_shape(i)[0]);
      EXPECT_EQ(c.out_channels(), pair.teacher.feature_shape(i)[0]);
    }
  }
}

TEST(Nn, ConvPresetDownsamples) {
  const auto arch = arch_preset("tiny-uniform");
  Rng rng(0);
  auto net = build_net(arch, arch.teacher, rng);
  EXPECT_EQ(net.feature_shape(1), (Shape{16, 8, 8}));
  EXPECT_EQ(net.feature_shape(2), (Shape{32, 4, 4}));
  EXPECT_EQ(net.feature_shape(3), (Shape{64, 2, 2}));
}

TEST(Nn, MismatchedBlockCountsRejected) {
  auto arch = arch_preset("tiny-uniform");
  arch.student = {{8, 16}, {1, 1}};
  Rng rng(0);
  EXPECT_THROW(build_factory_pair(arch, rng), ConfigError);
}

TEST(Nn, ForwardFromZeroIsFullForward) {
  const auto arch = arch_preset("tiny-nonuniform");
  Rng rng(5);
  auto pair = build_factory_pair(arch, rng);
  auto x = random_tensor(rng, {3, 1, 8, 8});
  auto full = pair.teacher.forward(x);
  auto from0 = pair.teacher.forward_from(0, x);
  EXPECT_EQ(max_abs_diff(full, from0), 0.0);
  auto out = pair.teacher.forward_with_features(x);
  EXPECT_EQ(max_abs_diff(full, pair.teacher.forward_from(2, out.features[1])), 0.0);
}

TEST(Nn, IdentityConnectorIsExact) {
  Rng rng(1);
  auto c = Connector::identity(2, 6);
  c.set_training(false);
  auto f = random_tensor(rng, {3, 6, 4, 4}, -5, 5);
  EXPECT_EQ(max_abs_diff(c.forward(f), f), 0.0);
}

TEST(Nn, ConnectorRejectsWrongChannels) {
  Rng rng(1);
  Connector c(1, 4, 8, rng);
  EXPECT_THROW(c.forward(Tensor::zeros({2, 5, 4, 4})), StructuralError);
  EXPECT_EQ(c.forward(Tensor::zeros({2, 4, 4, 4})).shape(), (Shape{2, 8, 4, 4}));
}

TEST(Nn, StateNamesAreStableAndOrdered) {
  const auto arch = arch_preset("tiny-uniform");
  Rng rng(0);
  auto net = build_net(arch, arch.student, rng);
  const auto state = net.state();
  ASSERT_FALSE(state.empty());
  EXPECT_EQ(state.front().name, "block1.0.conv.weight");
  bool saw_running = false;
  for (const auto& [name, t] : state) {
    if (name.find("running_var") != std::string::npos) saw_running = true;
  }
  EXPECT_TRUE(saw_running);
  EXPECT_EQ(net.parameters().size() + net.buffers().size(), state.size());
}

TEST(Nn, FrozenNetParamsNeedNoGrad) {
  const auto arch = arch_preset("tiny-uniform");
  Rng rng(0);
  auto pair = build_factory_pair(arch, rng);
  for (const auto& [name, t] : pair.teacher.parameters()) EXPECT_FALSE(t.requires_grad()) << name;
  for (const auto& [name, t] : pair.student.parameters()) EXPECT_TRUE(t.requires_grad()) << name;
}

TEST(Nn, CloneIsIndependent) {
  const auto arch = arch_preset("tiny-uniform");
  Rng rng(0);
  auto net = build_net(arch, arch.student, rng);
  auto copy = net.clone();
  Tensor(net.parameters()[0].tensor).mutable_data()[0] += 1.0;
  EXPECT_NE(net.parameters()[0].tensor[0], copy.parameters()[0].tensor[0]);
}

TEST(Nn, ArchHashIsStable) {
  // Frozen: the canonical text is part of the checkpoint contract.
  const auto arch = arch_preset("tiny-uniform");
  EXPECT_EQ(arch.canonical(), "kind=conv;input=1x8x8;classes=4;teacher=16/1,32/1,64/1;student=8/1,16/1,32/1");
  EXPECT_EQ(arch.hash(), fnv1a64(arch.canonical()));
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(Nn, TrainModeBatchNormChangesRunningStats) {
  const auto arch = arch_preset("tiny-uniform");
  Rng rng(0);
  auto net = build_net(arch, arch.student, rng);
  const double before = net.buffers()[0].tensor[0];
  net.set_training(true);
  net.forward(random_tensor(rng, {4, 1, 8, 8}));
  EXPECT_NE(net.buffers()[0].tensor[0], before);
  net.set_training(false);
  const double mid = net.buffers()[0].tensor[0];
  net.forward(random_tensor(rng, {4, 1, 8, 8}));
  EXPECT_EQ(net.buffers()[0].tensor[0], mid);
}
