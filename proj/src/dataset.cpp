#include "mad/dataset.hpp"

#include "mad/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace mad {

Batch Dataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t isz = image_size();
  Shape shape = image_shape;
  shape.insert(shape.begin(), indices.size());
  std::vector<Real> data(indices.size() * isz);
  Batch b;
  b.y.reserve(indices.size());
  b.ids.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    if (i >= size()) throw std::out_of_range("sample index out of range");
    std::copy_n(pixels.begin() + i * isz, isz, data.begin() + k * isz);
    b.y.push_back(labels[i]);
    b.ids.push_back(i);
  }
  b.x = Tensor(std::move(shape), std::move(data));
  return b;
}

Batch Dataset::range(std::size_t begin, std::size_t end) const {
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
  return batch(idx);
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > size()) throw std::out_of_range("dataset slice out of range");
  Dataset d;
  d.image_shape = image_shape;
  d.n_classes = n_classes;
  d.pixels.assign(pixels.begin() + begin * image_size(), pixels.begin() + end * image_size());
  d.labels.assign(labels.begin() + begin, labels.begin() + end);
  return d;
}

namespace {

/// Adds a soft oriented bar (Gaussian profile across, flat along) to `canvas`.
void draw_stroke(std::vector<double>& canvas, std::size_t side, Rng& rng, double amplitude) {
  const double s = static_cast<double>(side);
  const double cx = rng.uniform(0.2 * s, 0.8 * s);
  const double cy = rng.uniform(0.2 * s, 0.8 * s);
  const double angle = rng.uniform(0.0, 3.141592653589793);
  const double length = rng.uniform(0.25 * s, 0.5 * s);
  const double width = rng.uniform(0.8, 1.6);
  const double sign = rng.uniform() < 0.7 ? 1.0 : -1.0;
  const double ux = std::cos(angle), uy = std::sin(angle);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double along = dx * ux + dy * uy;
      const double across = -dx * uy + dy * ux;
      const double excess = std::max(0.0, std::abs(along) - length / 2);
      const double d2 = excess * excess + across * across;
      canvas[y * side + x] += amplitude * sign * std::exp(-d2 / (2 * width * width));
    }
}

}  // namespace

std::vector<std::vector<Real>> synthetic10_templates(std::uint64_t seed, std::size_t side, double contrast) {
  // A shared background of strokes plus a few class-specific strokes drawn at
  // `contrast`; the classes differ only in the latter.
  Rng rng(derive_seed(seed, {0x7e3a}));
  std::vector<double> base(side * side, 0.0);
  for (int stroke = 0; stroke < 4; ++stroke) draw_stroke(base, side, rng, 0.3);
  std::vector<std::vector<Real>> templates(10, std::vector<Real>(side * side));
  for (auto& t : templates) {
    std::vector<double> canvas = base;
    for (int stroke = 0; stroke < 3; ++stroke) draw_stroke(canvas, side, rng, contrast);
    for (std::size_t i = 0; i < canvas.size(); ++i) t[i] = std::clamp(0.5 + canvas[i], 0.0, 1.0);
  }
  return templates;
}

DatasetSplits make_synthetic10(const SyntheticOptions& opts) {
  const auto templates = synthetic10_templates(opts.seed, opts.side, opts.contrast);
  const std::size_t isz = opts.side * opts.side;
  auto generate = [&](std::size_t count, std::uint64_t split) {
    Dataset d;
    d.image_shape = {1, opts.side, opts.side};
    d.n_classes = 10;
    d.pixels.resize(count * isz);
    d.labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      const int label = static_cast<int>(i % 10);
      d.labels[i] = label;
      Rng rng(derive_seed(opts.seed, {split, i}));
      for (std::size_t p = 0; p < isz; ++p) {
        const double v = templates[label][p] + opts.noise_sigma * rng.normal();
        d.pixels[i * isz + p] = std::clamp(v, 0.0, 1.0);
      }
    }
    return d;
  };
  return {generate(opts.n_train, 1), generate(opts.n_test, 2)};
}

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::uint32_t read_be32(const std::string& bytes, std::size_t pos, const char* what) {
  if (bytes.size() < pos + 4) {
    throw IdxTruncatedError(std::string("IDX ") + what + " file truncated in header");
  }
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[pos + i]);
  return v;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

Dataset parse_idx(const std::string& image_bytes, const std::string& label_bytes) {
  const std::uint32_t img_magic = read_be32(image_bytes, 0, "image");
  if (img_magic != kImageMagic) {
    std::ostringstream os;
    os << "IDX image magic 0x" << std::hex << img_magic << ", expected 0x803";
    throw IdxMagicError(os.str());
  }
  const std::uint32_t lbl_magic = read_be32(label_bytes, 0, "label");
  if (lbl_magic != kLabelMagic) {
    std::ostringstream os;
    os << "IDX label magic 0x" << std::hex << lbl_magic << ", expected 0x801";
    throw IdxMagicError(os.str());
  }
  const std::size_t n_images = read_be32(image_bytes, 4, "image");
  const std::size_t rows = read_be32(image_bytes, 8, "image");
  const std::size_t cols = read_be32(image_bytes, 12, "image");
  const std::size_t n_labels = read_be32(label_bytes, 4, "label");
  if (n_images != n_labels) {
    throw IdxCountMismatchError("IDX holds " + std::to_string(n_images) + " images but " +
                                std::to_string(n_labels) + " labels");
  }
  if (rows == 0 || cols == 0) throw DatasetError("IDX image dimensions must be positive");
  const std::size_t isz = rows * cols;
  if (image_bytes.size() < 16 + n_images * isz) {
    throw IdxTruncatedError("IDX image payload truncated: " + std::to_string(image_bytes.size() - 16) +
                            " bytes for " + std::to_string(n_images) + " images of " +
                            std::to_string(isz));
  }
  if (label_bytes.size() < 8 + n_labels) {
    throw IdxTruncatedError("IDX label payload truncated");
  }
  Dataset d;
  d.image_shape = {1, rows, cols};
  d.pixels.resize(n_images * isz);
  d.labels.resize(n_labels);
  for (std::size_t i = 0; i < d.pixels.size(); ++i) {
    d.pixels[i] = static_cast<unsigned char>(image_bytes[16 + i]) / Real(255);
  }
  int max_label = 0;
  for (std::size_t i = 0; i < n_labels; ++i) {
    d.labels[i] = static_cast<unsigned char>(label_bytes[8 + i]);
    max_label = std::max(max_label, d.labels[i]);
  }
  d.n_classes = std::max<std::size_t>(10, static_cast<std::size_t>(max_label) + 1);
  return d;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  return parse_idx(read_file(images), read_file(labels));
}

DatasetSplits load_idx_dir(const std::filesystem::path& dir) {
  return {load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte"),
          load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte")};
}

}  // namespace mad
