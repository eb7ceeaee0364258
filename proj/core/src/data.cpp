#include "resdense/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "resdense/ctf.hpp"
#include "resdense/log.hpp"

namespace resdense {

std::string to_string(SeriesLabel label) { return label == SeriesLabel::covid ? "covid" : "non_covid"; }

// ---------------------------------------------------------------------------
// PNM / ctf

namespace {

struct PnmHeader {
  char kind = '5';
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t maxval = 255;
};

// Next whitespace-delimited header token, skipping '#' comments.
std::string next_token(std::istream& in) {
  std::string token;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!token.empty()) break;
      continue;
    }
    token.push_back(static_cast<char>(ch));
  }
  return token;
}

std::size_t parse_positive(const std::string& token, const fs::path& path, const char* what) {
  std::size_t value = 0;
  try {
    std::size_t used = 0;
    value = std::stoul(token, &used);
    if (used != token.size()) throw std::invalid_argument(token);
  } catch (const std::exception&) {
    throw IoError(path.string() + ": malformed " + what + " '" + token + "'");
  }
  if (value == 0) throw IoError(path.string() + ": " + what + " must be positive");
  return value;
}

PnmHeader read_pnm_header(std::istream& in, const fs::path& path) {
  PnmHeader h;
  const std::string magic = next_token(in);
  if (magic != "P5" && magic != "P6") {
    throw IoError(path.string() + ": unsupported image format (expected binary PGM P5 or PPM P6)");
  }
  h.kind = magic[1];
  h.width = parse_positive(next_token(in), path, "width");
  h.height = parse_positive(next_token(in), path, "height");
  h.maxval = parse_positive(next_token(in), path, "maxval");
  if (h.maxval > 255) throw IoError(path.string() + ": 16-bit PNM images are not supported");
  return h;
}

SliceImage load_pnm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  const PnmHeader h = read_pnm_header(in, path);
  const std::size_t channels = h.kind == '5' ? 1 : 3;
  std::vector<unsigned char> bytes(h.width * h.height * channels);
  if (!in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
    throw IoError(path.string() + ": truncated pixel data");
  }
  SliceImage img(h.height, h.width, channels, 0.0f, ValueRange::raw);
  const float scale = 255.0f / static_cast<float>(h.maxval);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = static_cast<float>(bytes[i]) * scale;
  return img;
}

SliceImage load_ctf_slice(const fs::path& path) {
  const Tensor<float> t = load_ctf<float>(path);
  if (t.rank() != 2 && !(t.rank() == 3 && (t.dim(2) == 1 || t.dim(2) == 3))) {
    throw IoError(path.string() + ": ctf slice must be H x W or H x W x C with C in {1, 3}, got " +
                  shape_to_string(t.shape()));
  }
  SliceImage img(t.dim(0), t.dim(1), t.rank() == 3 ? t.dim(2) : 1, 0.0f, ValueRange::raw);
  std::copy(t.data().begin(), t.data().end(), img.pixels.begin());
  return img;
}

std::string lower_extension(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

}  // namespace

bool is_slice_file(const fs::path& path) {
  const std::string ext = lower_extension(path);
  return ext == ".pgm" || ext == ".ppm" || ext == ".ctf";
}

SliceImage load_slice(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw IoError("slice not found: " + path.string());
  return lower_extension(path) == ".ctf" ? load_ctf_slice(path) : load_pnm(path);
}

void write_pgm(const fs::path& path, const SliceImage& image) {
  if (image.channels != 1) throw ValueError("write_pgm: expected a single-channel image");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> bytes(image.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(std::clamp(std::lround(image.pixels[i]), 0L, 255L));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<fs::path> list_slices(const fs::path& series_dir) {
  std::vector<fs::path> slices;
  for (const auto& entry : fs::directory_iterator(series_dir)) {
    if (entry.is_regular_file() && is_slice_file(entry.path())) slices.push_back(entry.path());
  }
  std::sort(slices.begin(), slices.end(), [](const fs::path& a, const fs::path& b) {
    return a.filename().string() < b.filename().string();
  });
  return slices;
}

std::vector<SeriesSample> load_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw IoError("dataset root is not a directory: " + root.string());
  std::vector<SeriesSample> samples;
  for (const SeriesLabel label : {SeriesLabel::covid, SeriesLabel::non_covid}) {
    const fs::path class_dir = root / to_string(label);
    if (!fs::is_directory(class_dir)) {
      log::warn("dataset root " + root.string() + " has no " + to_string(label) + "/ directory");
      continue;
    }
    std::vector<fs::path> series_dirs;
    for (const auto& entry : fs::directory_iterator(class_dir)) {
      if (entry.is_directory()) series_dirs.push_back(entry.path());
    }
    std::sort(series_dirs.begin(), series_dirs.end());
    for (const auto& dir : series_dirs) {
      SeriesSample sample{dir.filename().string(), list_slices(dir), label};
      if (sample.slice_paths.empty()) throw IoError("empty series folder: " + dir.string());
      for (const auto& slice : sample.slice_paths) {
        try {
          (void)load_slice(slice);
        } catch (const IoError& e) {
          throw IoError(std::string("unreadable slice: ") + e.what());
        }
      }
      samples.push_back(std::move(sample));
    }
  }
  if (samples.empty()) log::warn("dataset at " + root.string() + " contains no series");
  return samples;
}

// ---------------------------------------------------------------------------
// preprocessing

SliceImage resize_bilinear(const SliceImage& image, std::size_t target_h, std::size_t target_w) {
  if (target_h == 0 || target_w == 0) throw ValueError("resize_bilinear: target dims must be positive");
  const std::size_t out_channels = image.channels == 1 ? 3 : image.channels;
  SliceImage out(target_h, target_w, out_channels, 0.0f, image.range);
  const double sy = static_cast<double>(image.height) / static_cast<double>(target_h);
  const double sx = static_cast<double>(image.width) / static_cast<double>(target_w);
  for (std::size_t r = 0; r < target_h; ++r) {
    const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height - 1));
    const std::size_t y0 = static_cast<std::size_t>(std::floor(y));
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const double wy = y - static_cast<double>(y0);
    for (std::size_t c = 0; c < target_w; ++c) {
      const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width - 1));
      const std::size_t x0 = static_cast<std::size_t>(std::floor(x));
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const double wx = x - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < image.channels; ++ch) {
        const double top = image.at(y0, x0, ch) * (1 - wx) + image.at(y0, x1, ch) * wx;
        const double bottom = image.at(y1, x0, ch) * (1 - wx) + image.at(y1, x1, ch) * wx;
        const float v = static_cast<float>(top * (1 - wy) + bottom * wy);
        if (image.channels == 1) {
          for (std::size_t k = 0; k < out_channels; ++k) out.at(r, c, k) = v;
        } else {
          out.at(r, c, ch) = v;
        }
      }
    }
  }
  return out;
}

SliceImage rescale_to_unit_range(const SliceImage& image) {
  if (image.range == ValueRange::normalized) {
    throw ValueError("rescale_to_unit_range: image is already normalized");
  }
  SliceImage out = image;
  for (auto& v : out.pixels) {
    if (!(v >= 0.0f && v <= 255.0f)) {
      throw ValueError("rescale_to_unit_range: raw value " + std::to_string(v) + " outside [0, 255]");
    }
    v = static_cast<float>(static_cast<double>(v) / 127.5 - 1.0);
  }
  out.range = ValueRange::normalized;
  return out;
}

SliceImage preprocess_slice(const SliceImage& raw, std::size_t height, std::size_t width) {
  return rescale_to_unit_range(resize_bilinear(raw, height, width));
}

Tensor<float> images_to_tensor(std::span<const SliceImage> images) {
  if (images.empty()) throw ShapeError("images_to_tensor: no images");
  const std::size_t h = images[0].height, w = images[0].width, c = images[0].channels;
  std::vector<float> values(images.size() * c * h * w);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto& img = images[n];
    if (img.height != h || img.width != w || img.channels != c) {
      throw ShapeError("images_to_tensor: image " + std::to_string(n) + " has a different size");
    }
    if (img.range != ValueRange::normalized) {
      throw ValueError("images_to_tensor: image " + std::to_string(n) + " is not normalized");
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t col = 0; col < w; ++col) {
          values[((n * c + ch) * h + r) * w + col] = img.at(r, col, ch);
        }
      }
    }
  }
  return Tensor<float>({images.size(), c, h, w}, std::move(values));
}

PreprocessedSeries preprocess_series(const SeriesSample& sample, std::size_t height, std::size_t width) {
  PreprocessedSeries out{sample.series_id, sample.label, {}};
  out.slices.reserve(sample.slice_paths.size());
  for (const auto& path : sample.slice_paths) {
    out.slices.push_back(preprocess_slice(load_slice(path), height, width));
  }
  if (out.slices.empty()) throw IoError("series " + sample.series_id + " has no slices");
  return out;
}

// ---------------------------------------------------------------------------
// split

DatasetSplit split_train_val(std::span<const SeriesSample> samples, double ratio, std::uint64_t seed) {
  if (samples.size() < 2) {
    throw ValueError("split_train_val: need at least 2 series, got " + std::to_string(samples.size()));
  }
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw ValueError("split_train_val: ratio must be in (0, 1), got " + std::to_string(ratio));
  }
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n = static_cast<double>(samples.size());
  const std::size_t n_train =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(ratio * n)), 1, samples.size() - 1);
  DatasetSplit split;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_train ? split.train : split.val).push_back(samples[order[i]]);
  }
  return split;
}

// ---------------------------------------------------------------------------
// augmentation

SliceImage flip_horizontal(const SliceImage& image) {
  SliceImage out = image;
  for (std::size_t r = 0; r < image.height; ++r) {
    for (std::size_t c = 0; c < image.width; ++c) {
      for (std::size_t ch = 0; ch < image.channels; ++ch) {
        out.at(r, c, ch) = image.at(r, image.width - 1 - c, ch);
      }
    }
  }
  return out;
}

SliceImage flip_vertical(const SliceImage& image) {
  SliceImage out = image;
  for (std::size_t r = 0; r < image.height; ++r) {
    for (std::size_t c = 0; c < image.width; ++c) {
      for (std::size_t ch = 0; ch < image.channels; ++ch) {
        out.at(r, c, ch) = image.at(image.height - 1 - r, c, ch);
      }
    }
  }
  return out;
}

SliceImage rotate(const SliceImage& image, double radians, float fill_value) {
  if (radians == 0.0) return image;
  SliceImage out = image;
  const double cy = (static_cast<double>(image.height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(image.width) - 1.0) / 2.0;
  const double cs = std::cos(radians), sn = std::sin(radians);
  const double max_y = static_cast<double>(image.height - 1);
  const double max_x = static_cast<double>(image.width - 1);
  // Absorbs rounding in cos/sin so exact quarter turns stay inside the grid.
  constexpr double kSnap = 1e-9;
  for (std::size_t r = 0; r < image.height; ++r) {
    for (std::size_t c = 0; c < image.width; ++c) {
      const double x = static_cast<double>(c) - cx;
      const double y = static_cast<double>(r) - cy;
      // Inverse rotation gives the source location of this output pixel.
      double sx = x * cs + y * sn + cx;
      double sy = -x * sn + y * cs + cy;
      if (sx < -kSnap || sy < -kSnap || sx > max_x + kSnap || sy > max_y + kSnap) {
        for (std::size_t ch = 0; ch < image.channels; ++ch) out.at(r, c, ch) = fill_value;
        continue;
      }
      sx = std::clamp(sx, 0.0, max_x);
      sy = std::clamp(sy, 0.0, max_y);
      const std::size_t x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t y0 = static_cast<std::size_t>(std::floor(sy));
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const std::size_t y1 = std::min(y0 + 1, image.height - 1);
      double wx = sx - static_cast<double>(x0);
      double wy = sy - static_cast<double>(y0);
      if (wx < kSnap) wx = 0.0;
      if (wy < kSnap) wy = 0.0;
      if (wx > 1.0 - kSnap) wx = 1.0;
      if (wy > 1.0 - kSnap) wy = 1.0;
      for (std::size_t ch = 0; ch < image.channels; ++ch) {
        const double top = image.at(y0, x0, ch) * (1 - wx) + image.at(y0, x1, ch) * wx;
        const double bottom = image.at(y1, x0, ch) * (1 - wx) + image.at(y1, x1, ch) * wx;
        out.at(r, c, ch) = static_cast<float>(top * (1 - wy) + bottom * wy);
      }
    }
  }
  return out;
}

SliceImage augment(const SliceImage& image, std::mt19937_64& rng, const AugmentOptions& options) {
  if (!options.enabled) return image;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SliceImage out = image;
  if (options.horizontal_flip && unit(rng) < 0.5) out = flip_horizontal(out);
  if (options.vertical_flip && unit(rng) < 0.5) out = flip_vertical(out);
  if (options.rotation_factor > 0) {
    const double limit = options.rotation_factor * 2.0 * std::numbers::pi;
    std::uniform_real_distribution<double> angle(-limit, limit);
    out = rotate(out, angle(rng), -1.0f);
  }
  return out;
}

// ---------------------------------------------------------------------------
// synthetic phantoms

namespace {

struct Ellipse {
  double cy, cx, ry, rx;
  bool contains(double y, double x) const {
    const double dy = (y - cy) / ry, dx = (x - cx) / rx;
    return dy * dy + dx * dx <= 1.0;
  }
};

struct Anatomy {
  Ellipse body;
  Ellipse lungs[2];
};

Anatomy anatomy_for(std::size_t size) {
  const double s = static_cast<double>(size);
  const double mid = (s - 1.0) / 2.0;
  return Anatomy{{mid, mid, 0.36 * s, 0.44 * s},
                 {{mid, mid - 0.2 * s, 0.24 * s, 0.13 * s}, {mid, mid + 0.2 * s, 0.24 * s, 0.13 * s}}};
}

constexpr double kOutsideLevel = 10.0;
constexpr double kBodyLevel = 110.0;
constexpr double kLungLevel = 40.0;
constexpr double kNoiseSigma = 12.0;
constexpr double kBlobPeak = 150.0;

}  // namespace

std::vector<bool> synthetic_lung_mask(std::size_t image_size) {
  const Anatomy a = anatomy_for(image_size);
  std::vector<bool> mask(image_size * image_size);
  for (std::size_t r = 0; r < image_size; ++r) {
    for (std::size_t c = 0; c < image_size; ++c) {
      const double y = static_cast<double>(r), x = static_cast<double>(c);
      mask[r * image_size + c] = a.lungs[0].contains(y, x) || a.lungs[1].contains(y, x);
    }
  }
  return mask;
}

SynthSummary generate_synthetic_dataset(const fs::path& out_dir, const SynthOptions& options) {
  if (!(options.class_signal > 0.0 && options.class_signal <= 1.0)) {
    throw ValueError("class_signal must be in (0, 1], got " + std::to_string(options.class_signal));
  }
  if (options.n_series == 0 || options.slices_per_series == 0) {
    throw ValueError("synthetic dataset needs at least one series and one slice per series");
  }
  if (options.image_size < 8) throw ValueError("synthetic image_size must be at least 8");
  if (fs::exists(out_dir) && (!fs::is_directory(out_dir) || !fs::is_empty(out_dir))) {
    throw IoError("target directory is not empty: " + out_dir.string());
  }

  const std::size_t size = options.image_size;
  const double s = static_cast<double>(size);
  const Anatomy anatomy = anatomy_for(size);
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> noise(0.0, kNoiseSigma);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  SynthSummary summary;
  nlohmann::json manifest;
  manifest["seed"] = options.seed;
  manifest["n_series"] = options.n_series;
  manifest["slices_per_series"] = options.slices_per_series;
  manifest["image_size"] = options.image_size;
  manifest["class_signal"] = options.class_signal;
  manifest["series"] = nlohmann::json::array();

  for (std::size_t i = 0; i < options.n_series; ++i) {
    const SeriesLabel label = i % 2 == 0 ? SeriesLabel::covid : SeriesLabel::non_covid;
    std::ostringstream id;
    id << "series_" << std::setw(3) << std::setfill('0') << i;
    const fs::path series_dir = out_dir / to_string(label) / id.str();
    fs::create_directories(series_dir);

    const double offset = (unit(rng) - 0.5) * 6.0;
    const Ellipse& lung = anatomy.lungs[unit(rng) < 0.5 ? 0 : 1];
    const double blob_cy = lung.cy + (unit(rng) - 0.5) * 0.2 * lung.ry;
    const double blob_cx = lung.cx + (unit(rng) - 0.5) * 0.2 * lung.rx;
    const double sigma = 0.07 * s;

    for (std::size_t k = 0; k < options.slices_per_series; ++k) {
      SliceImage img(size, size, 1, 0.0f, ValueRange::raw);
      const double jy = (unit(rng) - 0.5) * 0.04 * s;
      const double jx = (unit(rng) - 0.5) * 0.04 * s;
      const double amplitude = kBlobPeak * options.class_signal * (0.85 + 0.15 * unit(rng));
      for (std::size_t r = 0; r < size; ++r) {
        for (std::size_t c = 0; c < size; ++c) {
          const double y = static_cast<double>(r), x = static_cast<double>(c);
          double v = kOutsideLevel;
          if (anatomy.body.contains(y, x)) v = kBodyLevel + offset;
          if (anatomy.lungs[0].contains(y, x) || anatomy.lungs[1].contains(y, x)) v = kLungLevel + offset;
          if (label == SeriesLabel::covid) {
            const double dy = y - (blob_cy + jy), dx = x - (blob_cx + jx);
            v += amplitude * std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
          }
          v += noise(rng);
          img.at(r, c) = static_cast<float>(std::clamp(v, 0.0, 255.0));
        }
      }
      std::ostringstream name;
      name << "slice_" << std::setw(3) << std::setfill('0') << k << ".pgm";
      write_pgm(series_dir / name.str(), img);
    }
    manifest["series"].push_back(
        {{"id", id.str()}, {"label", to_string(label)}, {"slices", options.slices_per_series}});
    ++summary.series;
    summary.slices += options.slices_per_series;
    (label == SeriesLabel::covid ? summary.covid : summary.non_covid) += 1;
  }

  std::ofstream out(out_dir / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("failed writing manifest.json in " + out_dir.string());
  return summary;
}

}  // namespace resdense
