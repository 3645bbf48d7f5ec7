#include "blockkd/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "blockkd/errors.hpp"
#include "blockkd/rng.hpp"

namespace bkd {

namespace {

constexpr std::size_t kImageSide = 8;
constexpr std::size_t kTemplatesPerClass = 3;

Targets balanced_labels(std::size_t n, std::size_t k, Rng& rng) {
  Targets labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % k);
  rng.shuffle(std::span<int>(labels));
  return labels;
}

Dataset blobs(std::size_t k, std::size_t n, double noise, std::size_t dims, Rng& rng,
              const char* split) {
  Dataset d;
  d.split = split;
  d.num_classes = k;
  d.labels = balanced_labels(n, k, rng);
  std::vector<double> x(n * dims, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(d.labels[i]) / static_cast<double>(k);
    for (std::size_t j = 0; j < dims; ++j) {
      double center = 0.0;
      if (j == 0) center = 2.0 * std::cos(angle);
      if (j == 1) center = 2.0 * std::sin(angle);
      x[i * dims + j] = center + noise * rng.normal();
    }
  }
  d.samples = Tensor::from({n, dims}, std::move(x));
  return d;
}

Dataset rings(std::size_t k, std::size_t n, double noise, Rng& rng, const char* split) {
  Dataset d;
  d.split = split;
  d.num_classes = k;
  d.labels = balanced_labels(n, k, rng);
  std::vector<double> x(n * 2);
  for (std::size_t i = 0; i < n; ++i) {
    const double radius = 1.0 + static_cast<double>(d.labels[i]) + noise * rng.normal();
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    x[i * 2] = radius * std::cos(angle);
    x[i * 2 + 1] = radius * std::sin(angle);
  }
  d.samples = Tensor::from({n, 2}, std::move(x));
  return d;
}

// Smooth random C x 8 x 8 pattern with zero mean and unit RMS.
std::vector<double> smooth_template(std::size_t channels, Rng& rng) {
  const std::size_t s = kImageSide, plane = s * s;
  std::vector<double> raw(channels * plane), out(channels * plane, 0.0);
  for (double& v : raw) v = rng.normal();
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        double acc = 0.0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const std::size_t yy = (y + s + static_cast<std::size_t>(dy + 1) - 1) % s;
            const std::size_t xx = (x + s + static_cast<std::size_t>(dx + 1) - 1) % s;
            acc += raw[c * plane + yy * s + xx];
          }
        out[c * plane + y * s + x] = acc;
      }
  double mean = 0.0;
  for (double v : out) mean += v;
  mean /= static_cast<double>(out.size());
  double sq = 0.0;
  for (double& v : out) {
    v -= mean;
    sq += v * v;
  }
  const double rms = std::sqrt(sq / static_cast<double>(out.size()));
  for (double& v : out) v /= rms;
  return out;
}

struct ImageFamily {
  std::vector<std::vector<double>> templates;  // class-major, kTemplatesPerClass each
  std::vector<double> distractor;
};

ImageFamily make_family(std::size_t k, std::size_t channels, Rng& rng) {
  ImageFamily f;
  for (std::size_t i = 0; i < k * kTemplatesPerClass; ++i) f.templates.push_back(smooth_template(channels, rng));
  f.distractor = smooth_template(channels, rng);
  return f;
}

Dataset tiny_images(const ImageFamily& family, std::size_t k, std::size_t n, double noise,
                    std::size_t channels, Rng& rng, const char* split) {
  const std::size_t s = kImageSide, plane = s * s, per = channels * plane;
  Dataset d;
  d.split = split;
  d.num_classes = k;
  d.labels = balanced_labels(n, k, rng);
  std::vector<double> x(n * per);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = static_cast<std::size_t>(d.labels[i]);
    const auto& tpl = family.templates[label * kTemplatesPerClass + rng.below(kTemplatesPerClass)];
    const std::size_t shift_y = rng.below(3), shift_x = rng.below(3);  // -1, 0, +1 (circular)
    const double amplitude = rng.uniform(0.6, 1.4);
    const double distract = rng.uniform(-1.0, 1.0);
    double* out = x.data() + i * per;
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t xx = 0; xx < s; ++xx) {
          const std::size_t sy = (y + s + shift_y - 1) % s;
          const std::size_t sx = (xx + s + shift_x - 1) % s;
          const std::size_t at = c * plane + y * s + xx;
          out[at] = amplitude * tpl[c * plane + sy * s + sx] + distract * family.distractor[at] +
                    noise * rng.normal();
        }
  }
  d.samples = Tensor::from({n, channels, s, s}, std::move(x));
  return d;
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t at) {
  return (static_cast<std::uint32_t>(bytes[at]) << 24) | (static_cast<std::uint32_t>(bytes[at + 1]) << 16) |
         (static_cast<std::uint32_t>(bytes[at + 2]) << 8) | static_cast<std::uint32_t>(bytes[at + 3]);
}

}  // namespace

Shape Dataset::sample_shape() const {
  const Shape& s = samples.shape();
  return Shape(s.begin() + 1, s.end());
}

Tensor Dataset::batch(std::span<const std::size_t> rows) const {
  const std::size_t per = samples.numel() / samples.dim(0);
  std::vector<double> out(rows.size() * per);
  const auto src = samples.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[r] * per), per,
                out.begin() + static_cast<std::ptrdiff_t>(r * per));
  }
  Shape shape = samples.shape();
  shape[0] = rows.size();
  return Tensor::from(std::move(shape), std::move(out));
}

Targets Dataset::batch_labels(std::span<const std::size_t> rows) const {
  Targets out(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) out[r] = labels[rows[r]];
  return out;
}

void Dataset::validate() const {
  if (!samples.defined() || samples.rank() < 2) throw DataError("dataset '" + split + "' has no samples");
  if (samples.dim(0) != labels.size()) {
    throw DataError("dataset '" + split + "': " + std::to_string(samples.dim(0)) + " samples but " +
                    std::to_string(labels.size()) + " labels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw DataError("dataset '" + split + "': label " + std::to_string(labels[i]) + " at row " +
                      std::to_string(i) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

SyntheticKind parse_synthetic_kind(std::string_view name) {
  if (name == "blobs") return SyntheticKind::blobs;
  if (name == "rings") return SyntheticKind::rings;
  if (name == "tiny_images") return SyntheticKind::tiny_images;
  throw ConfigError("unknown synthetic dataset kind '" + std::string(name) + "'");
}

std::string_view to_string(SyntheticKind kind) {
  switch (kind) {
    case SyntheticKind::blobs:
      return "blobs";
    case SyntheticKind::rings:
      return "rings";
    case SyntheticKind::tiny_images:
      return "tiny_images";
  }
  return "?";
}

DatasetPair gen_synthetic(SyntheticKind kind, std::size_t num_classes, std::size_t n,
                          std::uint64_t seed, double noise, const SyntheticOptions& options) {
  if (num_classes < 2) throw ConfigError("synthetic data needs K >= 2");
  if (n < num_classes) throw ConfigError("synthetic data needs N >= K");
  if (noise < 0.0) throw ConfigError("noise must be nonnegative");
  const std::size_t test_n = options.test_size ? options.test_size : std::max(num_classes, (n + 3) / 4);
  Rng rng(seed);
  DatasetPair out;
  switch (kind) {
    case SyntheticKind::blobs:
      if (options.dims < 2) throw ConfigError("blobs need at least 2 dimensions");
      out.train = blobs(num_classes, n, noise, options.dims, rng, "train");
      out.test = blobs(num_classes, test_n, noise, options.dims, rng, "test");
      break;
    case SyntheticKind::rings:
      out.train = rings(num_classes, n, noise, rng, "train");
      out.test = rings(num_classes, test_n, noise, rng, "test");
      break;
    case SyntheticKind::tiny_images: {
      if (options.channels == 0) throw ConfigError("tiny_images need at least one channel");
      const ImageFamily family = make_family(num_classes, options.channels, rng);
      out.train = tiny_images(family, num_classes, n, noise, options.channels, rng, "train");
      out.test = tiny_images(family, num_classes, test_n, noise, options.channels, rng, "test");
      break;
    }
  }
  return out;
}

Dataset load_idx_like(const std::string& path, std::size_t num_classes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset file '" + path + "'");
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                         std::istreambuf_iterator<char>());
  auto need = [&](std::size_t at, std::size_t count, const char* what) {
    if (bytes.size() < at + count) {
      throw FormatError(path + ": truncated while reading " + what, bytes.size());
    }
  };
  need(0, 4, "magic");
  const std::uint32_t magic = read_be32(bytes, 0);
  const std::uint32_t ndim = magic & 0xFFu;
  if ((magic & 0xFFFFFF00u) != 0x00000D00u || (ndim != 3 && ndim != 4)) {
    throw FormatError(path + ": bad magic", 0);
  }
  std::vector<std::size_t> dims(ndim);
  std::size_t at = 4;
  for (std::uint32_t d = 0; d < ndim; ++d, at += 4) {
    need(at, 4, "dimension header");
    dims[d] = read_be32(bytes, at);
    if (dims[d] == 0) throw FormatError(path + ": zero dimension", at);
  }
  const std::size_t n = dims[0];
  need(at, n, "labels");
  Targets labels(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = bytes[at + i];
    max_label = std::max(max_label, labels[i]);
  }
  at += n;
  Shape shape = ndim == 3 ? Shape{n, 1, dims[1], dims[2]} : Shape{n, dims[1], dims[2], dims[3]};
  const std::size_t count = numel_of(shape);
  need(at, count, "pixels");
  std::vector<double> pixels(count);
  for (std::size_t i = 0; i < count; ++i) pixels[i] = static_cast<double>(bytes[at + i]) / 255.0;
  at += count;
  if (at != bytes.size()) throw FormatError(path + ": unexpected trailing bytes", at);

  Dataset d;
  d.samples = Tensor::from(std::move(shape), std::move(pixels));
  d.labels = std::move(labels);
  d.num_classes = num_classes ? num_classes : static_cast<std::size_t>(max_label) + 1;
  d.split = path;
  d.validate();
  return d;
}

void standardize_channels(const Dataset& reference, Dataset& target) {
  const Shape& rs = reference.samples.shape();
  if (rs.size() < 2 || target.samples.shape().size() != rs.size() || target.samples.dim(1) != rs[1]) {
    throw DataError("standardize_channels: incompatible sample shapes");
  }
  const std::size_t n = rs[0], c = rs[1];
  const std::size_t inner = reference.samples.numel() / (n * c);
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  const auto rd = reference.samples.data();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < inner; ++i) mean[ch] += rd[(s * c + ch) * inner + i];
  for (double& m : mean) m /= static_cast<double>(n * inner);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < inner; ++i) {
        const double dv = rd[(s * c + ch) * inner + i] - mean[ch];
        var[ch] += dv * dv;
      }
  std::vector<double> inv(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double sd = std::sqrt(var[ch] / static_cast<double>(n * inner));
    inv[ch] = sd > 0.0 ? 1.0 / sd : 1.0;
  }
  auto td = target.samples.mutable_data();
  const std::size_t tn = target.samples.dim(0);
  for (std::size_t s = 0; s < tn; ++s)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < inner; ++i) {
        double& v = td[(s * c + ch) * inner + i];
        v = (v - mean[ch]) * inv[ch];
      }
}

}  // namespace bkd
