#include "blockkd/nn.hpp"

#include <cmath>
#include <sstream>

#include "blockkd/errors.hpp"

namespace bkd {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<double> values(numel_of(shape));
  for (double& v : values) v = rng.uniform(-bound, bound);
  Tensor t = Tensor::from(std::move(shape), std::move(values));
  t.set_requires_grad(true);
  return t;
}

Shape sample_shape(const Tensor& x) { return Shape(x.shape().begin() + 1, x.shape().end()); }

Layer clone_layer(const Layer& layer) {
  return std::visit(
      Overloaded{
          [](const Conv2dLayer& l) -> Layer {
            return Conv2dLayer{l.weight.clone(), l.stride, l.padding};
          },
          [](const BatchNormLayer& l) -> Layer {
            return BatchNormLayer{l.gamma.clone(), l.beta.clone(), l.running_mean.clone(),
                                  l.running_var.clone(), l.config};
          },
          [](const DenseLayer& l) -> Layer { return DenseLayer{l.weight.clone(), l.bias.clone()}; },
          [](const auto& l) -> Layer { return l; },
      },
      layer);
}

std::string join_sizes(const std::vector<std::size_t>& values, char sep) {
  std::ostringstream os;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) os << sep;
    os << values[i];
  }
  return os.str();
}

}  // namespace

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Conv2dLayer make_conv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                      int stride, Rng& rng) {
  const double fan_in = static_cast<double>(in_channels * kernel * kernel);
  return Conv2dLayer{uniform_tensor({out_channels, in_channels, kernel, kernel},
                                    std::sqrt(6.0 / fan_in), rng),
                     stride, kernel == 3 ? 1 : 0};
}

BatchNormLayer make_batchnorm(std::size_t channels) {
  BatchNormLayer bn{Tensor::full({channels}, 1.0), Tensor::zeros({channels}),
                    Tensor::zeros({channels}), Tensor::full({channels}, 1.0), {}};
  bn.gamma.set_requires_grad(true);
  bn.beta.set_requires_grad(true);
  return bn;
}

DenseLayer make_dense(std::size_t in_features, std::size_t out_features, Rng& rng) {
  DenseLayer d{uniform_tensor({in_features, out_features},
                              std::sqrt(6.0 / static_cast<double>(in_features)), rng),
               Tensor::zeros({out_features})};
  d.bias.set_requires_grad(true);
  return d;
}

Shape infer_shape(const Layer& layer, const Shape& in) {
  return std::visit(
      Overloaded{
          [&](const Conv2dLayer& l) -> Shape {
            if (in.size() != 3 || in[0] != l.weight.dim(1)) {
              throw StructuralError("conv layer with weight " + shape_str(l.weight.shape()) +
                                    " cannot take per-sample input " + shape_str(in));
            }
            const long kh = static_cast<long>(l.weight.dim(2));
            const long kw = static_cast<long>(l.weight.dim(3));
            const long sh = static_cast<long>(in[1]) + 2L * l.padding - kh;
            const long sw = static_cast<long>(in[2]) + 2L * l.padding - kw;
            if (sh < 0 || sw < 0) throw StructuralError("conv kernel larger than input " + shape_str(in));
            return {l.weight.dim(0), static_cast<std::size_t>(sh / l.stride + 1),
                    static_cast<std::size_t>(sw / l.stride + 1)};
          },
          [&](const BatchNormLayer& l) -> Shape {
            if ((in.size() != 1 && in.size() != 3) || in[0] != l.gamma.numel()) {
              throw StructuralError("batchnorm over " + std::to_string(l.gamma.numel()) +
                                    " channels cannot take per-sample input " + shape_str(in));
            }
            return in;
          },
          [&](const DenseLayer& l) -> Shape {
            if (in.size() != 1 || in[0] != l.weight.dim(0)) {
              throw StructuralError("dense layer with weight " + shape_str(l.weight.shape()) +
                                    " cannot take per-sample input " + shape_str(in));
            }
            return {l.weight.dim(1)};
          },
          [&](const GlobalAvgPoolLayer&) -> Shape {
            if (in.size() != 3) throw StructuralError("global pooling needs C x H x W, got " + shape_str(in));
            return {in[0]};
          },
          [&](const auto&) -> Shape { return in; },
      },
      layer);
}

Tensor apply_layer(const Layer& layer, const Tensor& x, BnMode mode) {
  return std::visit(
      Overloaded{
          [&](const Conv2dLayer& l) { return conv2d(x, l.weight, l.stride, l.padding); },
          [&](const BatchNormLayer& l) {
            Tensor rm = l.running_mean;
            Tensor rv = l.running_var;
            return batchnorm(x, l.gamma, l.beta, rm, rv, mode, l.config);
          },
          [&](const DenseLayer& l) { return add_rowwise(matmul(x, l.weight), l.bias); },
          [&](const ReluLayer&) { return relu(x); },
          [&](const TanhLayer&) { return bkd::tanh(x); },
          [&](const GlobalAvgPoolLayer&) { return avgpool_global(x); },
      },
      layer);
}

Block::Block(std::vector<Layer> layers, Shape in_shape)
    : layers_(std::move(layers)), in_shape_(std::move(in_shape)) {
  Shape s = in_shape_;
  for (const auto& layer : layers_) s = infer_shape(layer, s);
  out_shape_ = std::move(s);
}

Block::Block(std::vector<Layer> layers, Shape in_shape, Shape declared_out_shape)
    : Block(std::move(layers), std::move(in_shape)) {
  if (out_shape_ != declared_out_shape) {
    throw StructuralError("block layers produce " + shape_str(out_shape_) + " but block declares " +
                          shape_str(declared_out_shape));
  }
}

Tensor Block::forward(const Tensor& x, BnMode mode, const std::string& label) const {
  if (x.rank() == 0 || sample_shape(x) != in_shape_) {
    throw StructuralError(label + ": expected per-sample input " + shape_str(in_shape_) + ", got " +
                          shape_str(x.shape()));
  }
  Tensor h = x;
  for (const auto& layer : layers_) h = apply_layer(layer, h, mode);
  return h;
}

void Block::collect_state(const std::string& prefix, std::vector<NamedTensor>* params,
                          std::vector<NamedTensor>* buffers) const {
  for (std::size_t j = 0; j < layers_.size(); ++j) {
    const std::string base = prefix + "." + std::to_string(j);
    std::visit(Overloaded{
                   [&](const Conv2dLayer& l) {
                     if (params) params->push_back({base + ".conv.weight", l.weight});
                   },
                   [&](const BatchNormLayer& l) {
                     if (params) {
                       params->push_back({base + ".bn.gamma", l.gamma});
                       params->push_back({base + ".bn.beta", l.beta});
                     }
                     if (buffers) {
                       buffers->push_back({base + ".bn.running_mean", l.running_mean});
                       buffers->push_back({base + ".bn.running_var", l.running_var});
                     }
                   },
                   [&](const DenseLayer& l) {
                     if (params) {
                       params->push_back({base + ".dense.weight", l.weight});
                       params->push_back({base + ".dense.bias", l.bias});
                     }
                   },
                   [](const auto&) {},
               },
               layers_[j]);
  }
}

Block Block::clone() const {
  Block b;
  b.layers_.reserve(layers_.size());
  for (const auto& l : layers_) b.layers_.push_back(clone_layer(l));
  b.in_shape_ = in_shape_;
  b.out_shape_ = out_shape_;
  return b;
}

CompositeNet::CompositeNet(std::vector<Block> blocks, Block classifier)
    : blocks_(std::move(blocks)), classifier_(std::move(classifier)) {
  if (blocks_.empty()) throw StructuralError("a composite net needs at least one block");
  for (std::size_t i = 1; i < blocks_.size(); ++i) {
    if (blocks_[i].in_shape() != blocks_[i - 1].out_shape()) {
      throw StructuralError("block " + std::to_string(i + 1) + " expects " +
                            shape_str(blocks_[i].in_shape()) + " but block " + std::to_string(i) +
                            " produces " + shape_str(blocks_[i - 1].out_shape()));
    }
  }
  if (classifier_.in_shape() != blocks_.back().out_shape()) {
    throw StructuralError("classifier expects " + shape_str(classifier_.in_shape()) +
                          " but the last block produces " + shape_str(blocks_.back().out_shape()));
  }
  if (classifier_.out_shape().size() != 1) {
    throw StructuralError("classifier must produce a logit vector, got " +
                          shape_str(classifier_.out_shape()));
  }
}

const Block& CompositeNet::block(std::size_t i) const {
  if (i < 1 || i > blocks_.size()) {
    throw UsageError("block index " + std::to_string(i) + " outside [1, " +
                     std::to_string(blocks_.size()) + "]");
  }
  return blocks_[i - 1];
}

const Shape& CompositeNet::input_shape() const { return blocks_.front().in_shape(); }

std::size_t CompositeNet::num_classes() const { return classifier_.out_shape().front(); }

const Shape& CompositeNet::feature_shape(std::size_t i) const {
  if (i == 0) return input_shape();
  return block(i).out_shape();
}

void CompositeNet::check_input(const Tensor& x, std::size_t block_index, const Shape& expected) const {
  if (x.rank() == 0 || sample_shape(x) != expected) {
    throw StructuralError("block " + std::to_string(block_index) + ": expected per-sample input " +
                          shape_str(expected) + ", got " + shape_str(x.shape()));
  }
}

CompositeNet::Output CompositeNet::forward_with_features(const Tensor& x) const {
  check_input(x, 1, input_shape());
  Output out;
  out.features.reserve(blocks_.size());
  Tensor h = x;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    h = blocks_[i].forward(h, mode(), "block " + std::to_string(i + 1));
    out.features.push_back(h);
  }
  out.logits = classifier_.forward(h, mode(), "classifier");
  return out;
}

Tensor CompositeNet::forward(const Tensor& x) const { return forward_with_features(x).logits; }

Tensor CompositeNet::forward_from(std::size_t i, const Tensor& feature) const {
  if (i > blocks_.size()) {
    throw UsageError("tail index " + std::to_string(i) + " outside [0, " +
                     std::to_string(blocks_.size()) + "]");
  }
  check_input(feature, i + 1, feature_shape(i));
  Tensor h = feature;
  for (std::size_t b = i; b < blocks_.size(); ++b) {
    h = blocks_[b].forward(h, mode(), "block " + std::to_string(b + 1));
  }
  return classifier_.forward(h, mode(), "classifier");
}

void CompositeNet::freeze() {
  frozen_ = true;
  for (auto& p : parameters()) p.tensor.set_requires_grad(false);
}

std::vector<NamedTensor> CompositeNet::parameters() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].collect_state("block" + std::to_string(i + 1), &out, nullptr);
  }
  classifier_.collect_state("classifier", &out, nullptr);
  return out;
}

std::vector<NamedTensor> CompositeNet::buffers() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].collect_state("block" + std::to_string(i + 1), nullptr, &out);
  }
  classifier_.collect_state("classifier", nullptr, &out);
  return out;
}

std::vector<NamedTensor> CompositeNet::state() const {
  auto out = parameters();
  auto bufs = buffers();
  out.insert(out.end(), bufs.begin(), bufs.end());
  return out;
}

CompositeNet CompositeNet::clone() const {
  CompositeNet net;
  net.blocks_.reserve(blocks_.size());
  for (const auto& b : blocks_) net.blocks_.push_back(b.clone());
  net.classifier_ = classifier_.clone();
  net.training_ = training_;
  net.frozen_ = frozen_;
  return net;
}

Connector::Connector(std::size_t index, std::size_t in_channels, std::size_t out_channels, Rng& rng)
    : index_(index),
      in_channels_(in_channels),
      out_channels_(out_channels),
      conv_(make_conv(in_channels, out_channels, 1, 1, rng)),
      norm_(make_batchnorm(out_channels)) {}

Connector Connector::identity(std::size_t index, std::size_t channels) {
  Connector c;
  c.index_ = index;
  c.in_channels_ = channels;
  c.out_channels_ = channels;
  std::vector<double> w(channels * channels, 0.0);
  for (std::size_t i = 0; i < channels; ++i) w[i * channels + i] = 1.0;
  c.conv_ = Conv2dLayer{Tensor::from({channels, channels, 1, 1}, std::move(w)), 1, 0};
  c.conv_.weight.set_requires_grad(true);
  c.norm_ = make_batchnorm(channels);
  // eval scale = gamma / sqrt(var + eps) = 1 exactly
  const double g = std::sqrt(1.0 + c.norm_.config.eps);
  for (double& v : c.norm_.gamma.mutable_data()) v = g;
  c.training_ = false;
  return c;
}

Tensor Connector::forward(const Tensor& f) const {
  if ((f.rank() != 2 && f.rank() != 4) || f.dim(1) != in_channels_) {
    throw StructuralError("connector " + std::to_string(index_) + ": expected " +
                          std::to_string(in_channels_) + " input channels, got feature " +
                          shape_str(f.shape()));
  }
  const BnMode mode = training_ ? BnMode::train : BnMode::eval;
  Tensor rm = norm_.running_mean;
  Tensor rv = norm_.running_var;
  if (f.rank() == 2) {
    const std::size_t n = f.dim(0);
    Tensor mapped = conv2d(reshape(f, {n, in_channels_, 1, 1}), conv_.weight, 1, 0);
    return batchnorm(reshape(mapped, {n, out_channels_}), norm_.gamma, norm_.beta, rm, rv, mode,
                     norm_.config);
  }
  return batchnorm(conv2d(f, conv_.weight, 1, 0), norm_.gamma, norm_.beta, rm, rv, mode,
                   norm_.config);
}

std::vector<NamedTensor> Connector::parameters() const {
  const std::string p = "connector" + std::to_string(index_);
  return {{p + ".conv.weight", conv_.weight}, {p + ".bn.gamma", norm_.gamma}, {p + ".bn.beta", norm_.beta}};
}

std::vector<NamedTensor> Connector::buffers() const {
  const std::string p = "connector" + std::to_string(index_);
  return {{p + ".bn.running_mean", norm_.running_mean}, {p + ".bn.running_var", norm_.running_var}};
}

Connector Connector::clone() const {
  Connector c = *this;
  c.conv_ = std::get<Conv2dLayer>(clone_layer(conv_));
  c.norm_ = std::get<BatchNormLayer>(clone_layer(norm_));
  return c;
}

Tensor apply_connector(const Connector& connector, const Tensor& student_feature) {
  return connector.forward(student_feature);
}

std::string ArchSpec::canonical() const {
  auto net_text = [](const NetSpec& n) {
    std::ostringstream os;
    for (std::size_t i = 0; i < n.widths.size(); ++i) {
      if (i) os << ',';
      os << n.widths[i] << '/' << (i < n.depths.size() ? n.depths[i] : 0);
    }
    return os.str();
  };
  std::ostringstream os;
  os << "kind=" << (kind == NetKind::conv ? "conv" : "mlp") << ";input=" << join_sizes(input, 'x')
     << ";classes=" << classes << ";teacher=" << net_text(teacher) << ";student=" << net_text(student);
  return os.str();
}

std::uint64_t ArchSpec::hash() const { return fnv1a64(canonical()); }

void ArchSpec::validate() const {
  auto check_net = [](const NetSpec& n, const char* who) {
    if (n.widths.empty()) throw ConfigError(std::string(who) + " has no blocks");
    if (n.depths.size() != n.widths.size()) {
      throw ConfigError(std::string(who) + ": depths and widths list different block counts");
    }
    for (std::size_t i = 0; i < n.widths.size(); ++i) {
      if (n.widths[i] == 0 || n.depths[i] == 0) {
        throw ConfigError(std::string(who) + ": block " + std::to_string(i + 1) +
                          " needs positive width and depth");
      }
    }
  };
  check_net(teacher, "teacher");
  check_net(student, "student");
  if (teacher.widths.size() != student.widths.size()) {
    throw ConfigError("teacher has " + std::to_string(teacher.widths.size()) + " blocks but student has " +
                      std::to_string(student.widths.size()) + "; block counts must match");
  }
  if (classes < 2) throw ConfigError("need at least 2 classes");
  if (kind == NetKind::conv && input.size() != 3) {
    throw ConfigError("conv architectures need a C x H x W input, got " + shape_str(input));
  }
  if (kind == NetKind::mlp && input.size() != 1) {
    throw ConfigError("mlp architectures need a flat input, got " + shape_str(input));
  }
  for (std::size_t d : input)
    if (d == 0) throw ConfigError("input dimensions must be positive");
}

ArchSpec arch_preset(std::string_view name) {
  ArchSpec a;
  a.name = std::string(name);
  a.kind = NetKind::conv;
  a.input = {1, 8, 8};
  a.classes = 4;
  if (name == "tiny-uniform") {
    a.teacher = {{16, 32, 64}, {1, 1, 1}};
    a.student = {{8, 16, 32}, {1, 1, 1}};
  } else if (name == "tiny-nonuniform") {
    a.teacher = {{16, 32, 64}, {2, 2, 1}};
    a.student = {{4, 8, 16}, {1, 1, 1}};
  } else if (name == "tiny-same") {
    a.teacher = {{8, 16, 32}, {1, 1, 1}};
    a.student = {{8, 16, 32}, {1, 1, 1}};
  } else if (name == "mlp-uniform") {
    a.kind = NetKind::mlp;
    a.input = {2};
    a.teacher = {{32, 32, 32}, {1, 1, 1}};
    a.student = {{8, 8, 8}, {1, 1, 1}};
  } else {
    throw ConfigError("unknown architecture preset '" + std::string(name) + "'");
  }
  return a;
}

std::vector<std::string> arch_preset_names() {
  return {"tiny-uniform", "tiny-nonuniform", "tiny-same", "mlp-uniform"};
}

CompositeNet build_net(const ArchSpec& arch, const NetSpec& net, Rng& rng) {
  std::vector<Block> blocks;
  Shape shape = arch.input;
  for (std::size_t b = 0; b < net.widths.size(); ++b) {
    std::vector<Layer> layers;
    std::size_t in = shape[0];
    for (std::size_t d = 0; d < net.depths[b]; ++d) {
      if (arch.kind == NetKind::conv) {
        const int stride = (b > 0 && d == 0) ? 2 : 1;
        layers.emplace_back(make_conv(in, net.widths[b], 3, stride, rng));
      } else {
        layers.emplace_back(make_dense(in, net.widths[b], rng));
      }
      layers.emplace_back(make_batchnorm(net.widths[b]));
      layers.emplace_back(ReluLayer{});
      in = net.widths[b];
    }
    blocks.emplace_back(std::move(layers), shape);
    shape = blocks.back().out_shape();
  }
  std::vector<Layer> head;
  if (arch.kind == NetKind::conv) head.emplace_back(GlobalAvgPoolLayer{});
  head.emplace_back(make_dense(net.widths.back(), arch.classes, rng));
  Block classifier(std::move(head), shape);
  return CompositeNet(std::move(blocks), std::move(classifier));
}

FactoryPair build_factory_pair(const ArchSpec& arch, Rng& rng) {
  arch.validate();
  FactoryPair pair;
  pair.teacher = build_net(arch, arch.teacher, rng);
  pair.student = build_net(arch, arch.student, rng);
  for (std::size_t i = 1; i <= pair.teacher.num_blocks(); ++i) {
    const Shape& ts = pair.teacher.feature_shape(i);
    const Shape& ss = pair.student.feature_shape(i);
    if (Shape(ts.begin() + 1, ts.end()) != Shape(ss.begin() + 1, ss.end())) {
      throw ConfigError("block " + std::to_string(i) + ": student feature " + shape_str(ss) +
                        " and teacher feature " + shape_str(ts) + " differ beyond channels");
    }
    pair.connectors.emplace_back(i, ss[0], ts[0], rng);
  }
  pair.teacher.freeze();
  return pair;
}

}  // namespace bkd
