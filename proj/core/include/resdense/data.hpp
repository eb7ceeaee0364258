#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "resdense/tensor.hpp"

namespace resdense {

namespace fs = std::filesystem;

enum class SeriesLabel { non_covid = 0, covid = 1 };

std::string to_string(SeriesLabel label);
inline int label_index(SeriesLabel label) { return static_cast<int>(label); }

// One CT scan. Slices are in lexicographic filename order.
struct SeriesSample {
  std::string series_id;
  std::vector<fs::path> slice_paths;
  SeriesLabel label = SeriesLabel::non_covid;
};

enum class ValueRange { raw, normalized };

// Interleaved H x W x C pixels. raw images hold 0..255, normalized -1..1.
struct SliceImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<float> pixels;
  ValueRange range = ValueRange::raw;

  SliceImage() = default;
  SliceImage(std::size_t h, std::size_t w, std::size_t c, float fill, ValueRange r)
      : height(h), width(w), channels(c), pixels(h * w * c, fill), range(r) {}

  float& at(std::size_t row, std::size_t col, std::size_t ch = 0) {
    return pixels[(row * width + col) * channels + ch];
  }
  float at(std::size_t row, std::size_t col, std::size_t ch = 0) const {
    return pixels[(row * width + col) * channels + ch];
  }
};

// ---------------------------------------------------------------------------
// I/O

// Binary PGM (P5) or PPM (P6) with maxval <= 255, or a .ctf tensor of shape
// H x W or H x W x C (C in {1, 3}) holding raw values.
SliceImage load_slice(const fs::path& path);

// Writes a raw single-channel image as P5, rounding and clamping to 0..255.
void write_pgm(const fs::path& path, const SliceImage& image);

bool is_slice_file(const fs::path& path);

// <root>/covid/<series>/<slice> and <root>/non_covid/<series>/<slice>.
// Series are ordered covid first, then by series id.
std::vector<SeriesSample> load_dataset(const fs::path& root);

// Slice files of one series folder in lexicographic order.
std::vector<fs::path> list_slices(const fs::path& series_dir);

// ---------------------------------------------------------------------------
// preprocessing

// Bilinear resampling with half-pixel centers and edge clamping. Single
// channel input is replicated to three channels after resizing.
SliceImage resize_bilinear(const SliceImage& image, std::size_t target_h, std::size_t target_w);

// v -> v / 127.5 - 1.
SliceImage rescale_to_unit_range(const SliceImage& image);

// resize -> rescale, the model input path.
SliceImage preprocess_slice(const SliceImage& raw, std::size_t height, std::size_t width);

// Stacks normalized H x W x C images into an N x C x H x W tensor.
Tensor<float> images_to_tensor(std::span<const SliceImage> images);

struct PreprocessedSeries {
  std::string series_id;
  SeriesLabel label = SeriesLabel::non_covid;
  std::vector<SliceImage> slices;
};

PreprocessedSeries preprocess_series(const SeriesSample& sample, std::size_t height, std::size_t width);

// ---------------------------------------------------------------------------
// split and augmentation

struct DatasetSplit {
  std::vector<SeriesSample> train;
  std::vector<SeriesSample> val;
};

// Seeded shuffle, then the first round(ratio * n) series go to train. Both
// sides keep at least one series.
DatasetSplit split_train_val(std::span<const SeriesSample> samples, double ratio, std::uint64_t seed);

struct AugmentOptions {
  bool enabled = true;
  bool horizontal_flip = true;
  bool vertical_flip = false;
  // Maximum rotation as a fraction of a full turn.
  double rotation_factor = 0.2;
};

SliceImage flip_horizontal(const SliceImage& image);
SliceImage flip_vertical(const SliceImage& image);

// Rotates about the image center. Positive angles map (x, y) to
// (x cos a - y sin a, x sin a + y cos a) in column/row coordinates, so 90
// degrees sends the top-left pixel to the top-right. Samples falling outside
// the source take fill_value.
SliceImage rotate(const SliceImage& image, double radians, float fill_value = -1.0f);

// Each enabled flip with probability 0.5, then a rotation uniform in
// +-rotation_factor * 2 pi. Expects a normalized image.
SliceImage augment(const SliceImage& image, std::mt19937_64& rng, const AugmentOptions& options = {});

// ---------------------------------------------------------------------------
// synthetic data

struct SynthOptions {
  std::size_t n_series = 40;
  std::size_t slices_per_series = 8;
  std::size_t image_size = 32;
  double class_signal = 0.9;
  std::uint64_t seed = 42;
};

struct SynthSummary {
  std::size_t series = 0;
  std::size_t slices = 0;
  std::size_t covid = 0;
  std::size_t non_covid = 0;
};

// Chest-like phantoms: a body ellipse with two darker lung fields and
// Gaussian noise. Covid series add a bright blob inside one lung on every
// slice with peak height proportional to class_signal. Series alternate
// covid/non-covid. Writes the load_dataset layout plus manifest.json.
SynthSummary generate_synthetic_dataset(const fs::path& out_dir, const SynthOptions& options);

// Pixel mask of the lung fields; blob centers always fall inside it.
std::vector<bool> synthetic_lung_mask(std::size_t image_size);

}  // namespace resdense
