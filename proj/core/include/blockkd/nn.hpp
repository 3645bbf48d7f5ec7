#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "blockkd/ops.hpp"
#include "blockkd/rng.hpp"
#include "blockkd/tensor.hpp"

namespace bkd {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Conv2dLayer {
  Tensor weight;  // [F x C x k x k]
  int stride = 1;
  int padding = 0;
};

struct BatchNormLayer {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  BatchNormConfig config;
};

struct DenseLayer {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
};

struct ReluLayer {};
struct TanhLayer {};
struct GlobalAvgPoolLayer {};

using Layer =
    std::variant<Conv2dLayer, BatchNormLayer, DenseLayer, ReluLayer, TanhLayer, GlobalAvgPoolLayer>;

Conv2dLayer make_conv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                      int stride, Rng& rng);
BatchNormLayer make_batchnorm(std::size_t channels);
DenseLayer make_dense(std::size_t in_features, std::size_t out_features, Rng& rng);

/// Per-sample output shape of a layer, or StructuralError.
Shape infer_shape(const Layer& layer, const Shape& sample_shape);
Tensor apply_layer(const Layer& layer, const Tensor& x, BnMode mode);

/// Layers between two downsampling boundaries. Shapes are per-sample (no
/// batch axis); construction checks that the layers compose.
class Block {
 public:
  Block() = default;
  Block(std::vector<Layer> layers, Shape in_shape);
  Block(std::vector<Layer> layers, Shape in_shape, Shape declared_out_shape);

  const Shape& in_shape() const { return in_shape_; }
  const Shape& out_shape() const { return out_shape_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }

  /// `label` names the block in shape errors.
  Tensor forward(const Tensor& x, BnMode mode, const std::string& label) const;

  void collect_state(const std::string& prefix, std::vector<NamedTensor>* params,
                     std::vector<NamedTensor>* buffers) const;
  Block clone() const;

 private:
  std::vector<Layer> layers_;
  Shape in_shape_;
  Shape out_shape_;
};

/// A network as blocks B_1..B_n followed by a classifier head.
class CompositeNet {
 public:
  struct Output {
    Tensor logits;
    std::vector<Tensor> features;  // features[i] = output of block i+1
  };

  CompositeNet() = default;
  CompositeNet(std::vector<Block> blocks, Block classifier);

  std::size_t num_blocks() const { return blocks_.size(); }
  /// 1-based, matching the stepping-stone indexing.
  const Block& block(std::size_t i) const;
  const Block& classifier() const { return classifier_; }
  const Shape& input_shape() const;
  std::size_t num_classes() const;
  /// Per-sample feature shape after block i (1-based); i = 0 is the input.
  const Shape& feature_shape(std::size_t i) const;

  Output forward_with_features(const Tensor& x) const;
  Tensor forward(const Tensor& x) const;
  /// Runs blocks i+1..n and the classifier on the output of block i.
  Tensor forward_from(std::size_t i, const Tensor& feature) const;

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }
  /// Frozen nets always normalize with running statistics and their
  /// parameters never require gradients.
  void freeze();
  bool frozen() const { return frozen_; }

  std::vector<NamedTensor> parameters() const;
  std::vector<NamedTensor> buffers() const;
  /// Parameters then buffers: everything a checkpoint stores.
  std::vector<NamedTensor> state() const;

  CompositeNet clone() const;

 private:
  BnMode mode() const { return training_ && !frozen_ ? BnMode::train : BnMode::eval; }
  void check_input(const Tensor& x, std::size_t block_index, const Shape& expected) const;

  std::vector<Block> blocks_;
  Block classifier_;
  bool training_ = true;
  bool frozen_ = false;
};

/// Channel adapter C_i: 1x1 convolution then batch normalization.
class Connector {
 public:
  Connector() = default;
  Connector(std::size_t index, std::size_t in_channels, std::size_t out_channels, Rng& rng);

  /// Identity map: unit weights, zero running mean, unit running variance
  /// and gamma chosen so the eval-mode scale is exactly one.
  static Connector identity(std::size_t index, std::size_t channels);

  std::size_t index() const { return index_; }
  std::size_t in_channels() const { return in_channels_; }
  std::size_t out_channels() const { return out_channels_; }

  Tensor forward(const Tensor& student_feature) const;

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }

  Conv2dLayer& conv() { return conv_; }
  const Conv2dLayer& conv() const { return conv_; }
  BatchNormLayer& norm() { return norm_; }
  const BatchNormLayer& norm() const { return norm_; }

  std::vector<NamedTensor> parameters() const;
  std::vector<NamedTensor> buffers() const;
  Connector clone() const;

 private:
  std::size_t index_ = 0;
  std::size_t in_channels_ = 0;
  std::size_t out_channels_ = 0;
  Conv2dLayer conv_;
  BatchNormLayer norm_;
  bool training_ = true;
};

Tensor apply_connector(const Connector& connector, const Tensor& student_feature);

enum class NetKind { conv, mlp };

struct NetSpec {
  std::vector<std::size_t> widths;  // output channels per block
  std::vector<std::size_t> depths;  // conv (or dense) units per block
};

/// Teacher/student architecture pair. Conv nets downsample by 2 at the start
/// of every block after the first; mlp nets use dense units.
struct ArchSpec {
  std::string name;
  NetKind kind = NetKind::conv;
  Shape input;  // per-sample: C x H x W, or D for mlp
  std::size_t classes = 0;
  NetSpec teacher;
  NetSpec student;

  /// Stable text form; the checkpoint hash is computed from it.
  std::string canonical() const;
  std::uint64_t hash() const;
  void validate() const;
};

ArchSpec arch_preset(std::string_view name);
std::vector<std::string> arch_preset_names();

CompositeNet build_net(const ArchSpec& arch, const NetSpec& net, Rng& rng);

struct FactoryPair {
  CompositeNet teacher;
  CompositeNet student;
  std::vector<Connector> connectors;  // connectors[i-1] serves block i
};

/// Builds teacher (frozen), student and one connector per block index.
FactoryPair build_factory_pair(const ArchSpec& arch, Rng& rng);

std::uint64_t fnv1a64(std::string_view text);

}  // namespace bkd
