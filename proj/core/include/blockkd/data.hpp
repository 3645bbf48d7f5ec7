#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

#include "blockkd/losses.hpp"
#include "blockkd/tensor.hpp"

namespace bkd {

/// Samples [N x C x H x W] (or [N x D]) with one label per row.
struct Dataset {
  Tensor samples;
  Targets labels;
  std::size_t num_classes = 0;
  std::string split;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const;
  /// Copies the selected rows into a fresh batch tensor.
  Tensor batch(std::span<const std::size_t> rows) const;
  Targets batch_labels(std::span<const std::size_t> rows) const;
  void validate() const;
};

struct DatasetPair {
  Dataset train;
  Dataset test;
};

enum class SyntheticKind { blobs, rings, tiny_images };

SyntheticKind parse_synthetic_kind(std::string_view name);
std::string_view to_string(SyntheticKind kind);

struct SyntheticOptions {
  std::size_t test_size = 0;  // 0: a quarter of the training size
  std::size_t channels = 1;   // tiny_images only
  std::size_t dims = 2;       // blobs only
};

/// Deterministic toy datasets. Labels are class-balanced to within one in
/// both splits. `n` is the training size.
///
/// - blobs: Gaussian clouds around K points on a circle of radius 2.
/// - rings: concentric rings of radius 1..K with radial noise.
/// - tiny_images: C x 8 x 8 images. Every class owns three smooth templates;
///   a sample is one of them, shifted by up to one pixel, rescaled, mixed
///   with a class-independent distractor and Gaussian pixel noise.
DatasetPair gen_synthetic(SyntheticKind kind, std::size_t num_classes, std::size_t n,
                          std::uint64_t seed, double noise, const SyntheticOptions& options = {});

/// Reads the byte format below; pixels are scaled to [0, 1].
///
///   u32 big-endian magic 0x00000D00 | ndim   (ndim 3: N,H,W  ndim 4: N,C,H,W)
///   ndim x u32 big-endian dims
///   N x u8 labels
///   prod(dims) x u8 pixels, row-major
///
/// Any deviation raises FormatError carrying the byte offset.
Dataset load_idx_like(const std::string& path, std::size_t num_classes = 0);

/// Per-channel standardization with statistics taken from `reference`.
void standardize_channels(const Dataset& reference, Dataset& target);

}  // namespace bkd
