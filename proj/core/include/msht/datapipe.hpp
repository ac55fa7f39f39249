#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "msht/tensor.hpp"

namespace msht {

/// Class index order used everywhere: 0 = positive (cancer), 1 = negative.
enum class Label { positive = 0, negative = 1 };

std::string to_string(Label label);
Label parse_label(const std::string& text);
inline int class_index(Label label) { return static_cast<int>(label); }

/// 8-bit RGB, row-major height x width x 3.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, fill) {}
  std::uint8_t& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
};

struct LabeledImage {
  RgbImage image;
  Label label = Label::negative;
  std::string source_id;
};

RgbImage read_image(const std::filesystem::path& path);  // throws on failure
void write_png(const std::filesystem::path& path, const RgbImage& image);
std::vector<std::uint8_t> encode_png(const RgbImage& image);
RgbImage resize_image(const RgbImage& image, int width, int height);

// ---------------------------------------------------------------------------
// Ingestion

struct IngestOptions {
  /// Resize every image to target_width x target_height on load so that all
  /// sources share one aspect ratio.
  bool normalize_aspect = true;
  int target_width = 1390;
  int target_height = 1038;
};

struct IngestWarning {
  std::string path;
  std::string reason;
};

struct IngestResult {
  std::vector<LabeledImage> images;
  std::vector<IngestWarning> warnings;
};

/// Reads root/positive/* and root/negative/* in name order. Unreadable files
/// become warnings; a missing or empty class directory throws.
IngestResult ingest_directory(const std::filesystem::path& root, const IngestOptions& options = {});

// ---------------------------------------------------------------------------
// Split protocol

inline constexpr int kFoldCount = 5;

struct FoldPlan {
  std::vector<std::string> test_ids;
  std::array<std::vector<std::string>, kFoldCount> fold_ids;
  std::uint64_t seed = 0;

  /// Fold k (0-based) validates; the other four train.
  std::vector<std::string> train_ids(int k) const;
  const std::vector<std::string>& validation_ids(int k) const { return fold_ids.at(k); }
};

/// 8:2 train-val/test split (test size rounded half up), then five folds
/// whose sizes differ by at most one. Throws for fewer than 10 ids.
FoldPlan split_folds(const std::vector<std::string>& ids, std::uint64_t seed);
/// Same sizes, but the test set and folds keep each label's proportion.
FoldPlan split_folds(const std::vector<std::string>& ids, const std::vector<Label>& labels,
                     std::uint64_t seed);

// ---------------------------------------------------------------------------
// Augmentation and preprocessing

struct AugmentConfig {
  double rotation_deg = 180.0;  // angle drawn uniformly from [-rotation_deg, rotation_deg]
  int crop_edge = 700;
  double flip_prob = 0.5;
  double brightness = 0.15;
  double contrast = 0.3;
  double saturation = 0.3;
  double hue = 0.06;
  int resize_edge = 384;
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};

  static AugmentConfig full();
  /// Crop and network edge equal to the image edge; no resize.
  static AugmentConfig desk(int edge);
  void validate() const;
};

/// Random draws of one augmentation. identity() is the midpoint of every
/// distribution with the flip off.
struct AugmentDraws {
  double angle_deg = 0.0;
  bool flip = false;
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
  double hue = 0.0;

  static AugmentDraws identity() { return {}; }
};

AugmentDraws sample_draws(const AugmentConfig& cfg, std::mt19937_64& rng);

/// Rotation (reflect border) -> center crop -> flip -> color jitter ->
/// resize -> normalized 3 x E x E tensor.
Tensor augment_train(const RgbImage& image, const AugmentConfig& cfg, std::mt19937_64& rng);
Tensor augment_with(const RgbImage& image, const AugmentConfig& cfg, const AugmentDraws& draws);
/// Center crop -> resize -> normalized tensor. Deterministic.
Tensor preprocess_eval(const RgbImage& image, const AugmentConfig& cfg);
/// The center-cropped, resized image that preprocess_eval normalizes.
RgbImage prepare_eval_image(const RgbImage& image, const AugmentConfig& cfg);
/// Normalized 3 x H x W tensor of an image.
Tensor to_tensor(const RgbImage& image, const AugmentConfig& cfg);

/// Stacks 3 x E x E tensors into batch x 3 x E x E.
Tensor stack_batch(std::span<const Tensor> items);

// ---------------------------------------------------------------------------
// Synthetic global-arrangement task

/// Two classes of identical textured blobs: positive images cluster them in a
/// random disc, negative images scatter them over the whole frame. Blobs never
/// overlap and lie fully inside, so both classes have the same intensity
/// distribution.
struct SynthSpec {
  int edge = 64;
  int per_class = 256;
  int blobs = 8;
  int blob_radius = 3;
  int cluster_radius = 14;  // bound on blob-center distance from the disc center
  int min_spread = 36;      // negatives: minimum bounding-box side of blob centers
};

struct SynthDataset {
  std::vector<LabeledImage> images;
  std::vector<std::vector<std::uint8_t>> masks;  // edge x edge, 1 inside a blob
};

SynthDataset synth_generate(const SynthSpec& spec, std::uint64_t seed);

/// Normalized grayscale histogram with `bins` equal-width bins.
std::vector<double> intensity_histogram(const RgbImage& image, int bins);

// ---------------------------------------------------------------------------
// Manifests

struct ManifestRow {
  std::string id;
  std::string path;
  Label label = Label::negative;
  std::string fold;  // "1".."5", "test", or empty
};

/// UTF-8 CSV with header id,path,label,fold.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);
std::vector<ManifestRow> manifest_rows(const FoldPlan& plan,
                                       const std::vector<LabeledImage>& images,
                                       const std::vector<std::string>& paths);

/// Writes PNGs under dir/positive and dir/negative plus dir/manifest.csv.
void write_dataset(const std::filesystem::path& dir, const std::vector<LabeledImage>& images,
                   const FoldPlan* plan = nullptr);

}  // namespace msht
