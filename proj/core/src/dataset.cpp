#include "ttc/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>

#include "ttc/errors.hpp"

namespace ttc {

namespace fs = std::filesystem;

std::string_view task_kind_name(TaskKind k) {
  return k == TaskKind::palette ? "palette" : "count";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "palette") return TaskKind::palette;
  if (name == "count") return TaskKind::count;
  throw ConfigError("unknown task kind '" + std::string(name) + "'");
}

void SyntheticSpec::validate() const {
  if (classes < 2) throw ConfigError("dataset: classes must be >= 2");
  if (image_size < 8) throw ConfigError("dataset: image_size must be >= 8");
  if (shift < 0.0 || shift > 1.0)
    throw ConfigError("dataset: shift must be in [0,1]");
  if (task == TaskKind::count && classes > 6)
    throw ConfigError("dataset: count task supports at most 6 classes");
}

std::string SyntheticSpec::canonical() const {
  std::ostringstream os;
  os << "task = " << task_kind_name(task) << "\n";
  os << "classes = " << classes << "\n";
  os << "image_size = " << image_size << "\n";
  os << "shift = " << shift << "\n";
  os << "seed = " << seed << "\n";
  os << "train = " << train << "\n";
  os << "val = " << val << "\n";
  os << "test = " << test << "\n";
  return os.str();
}

Tensor Dataset::images(std::span<const std::size_t> indices) const {
  const std::size_t stride = sample_stride();
  std::vector<double> out(indices.size() * stride);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size())
      throw ShapeError("dataset index out of range");
    std::copy_n(pixels.data() + indices[i] * stride, stride,
                out.data() + i * stride);
  }
  return Tensor::from_data({indices.size(), 3, image_size, image_size},
                           std::move(out));
}

Tensor Dataset::all_images() const {
  std::vector<std::size_t> idx(size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return images(idx);
}

std::vector<int> Dataset::labels_at(
    std::span<const std::size_t> indices) const {
  std::vector<int> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i)
    out[i] = labels.at(indices[i]);
  return out;
}

Dataset Dataset::slice(std::size_t offset, std::size_t count) const {
  if (offset + count > size()) throw ShapeError("dataset slice out of range");
  Dataset out;
  out.image_size = image_size;
  out.num_classes = num_classes;
  const std::size_t stride = sample_stride();
  out.pixels.assign(pixels.begin() + offset * stride,
                    pixels.begin() + (offset + count) * stride);
  out.labels.assign(labels.begin() + offset, labels.begin() + offset + count);
  return out;
}

// ---- generation ------------------------------------------------------------

namespace {

struct Rgb {
  double r, g, b;
};

Rgb lerp(const Rgb& a, const Rgb& b, double t) {
  return {a.r + t * (b.r - a.r), a.g + t * (b.g - a.g),
          a.b + t * (b.b - a.b)};
}

// Built-in well-separated cell patterns for the first five classes.
bool library_mask(std::size_t cls, std::size_t gy, std::size_t gx,
                  std::size_t grid) {
  switch (cls) {
    case 0:
      return gy == gx;  // diagonal
    case 1:
      return gy >= grid / 2 - 1 && gy <= grid / 2;  // horizontal band
    case 2:
      return gx >= grid / 2 - 1 && gx <= grid / 2;  // vertical band
    case 3:  // corners plus center blob
      return (gy < 1 && gx < 1) || (gy < 1 && gx >= grid - 1) ||
             (gy >= grid - 1 && gx < 1) ||
             (gy >= grid - 1 && gx >= grid - 1) ||
             (gy >= grid / 2 - 1 && gy <= grid / 2 && gx >= grid / 2 - 1 &&
              gx <= grid / 2);
    case 4:
      return (gy + gx) % 2 == 0;  // checkerboard
    default:
      return false;
  }
}

bool class_mask(std::size_t cls, std::size_t gy, std::size_t gx,
                std::size_t grid, std::uint64_t dataset_seed) {
  if (cls < 5) return library_mask(cls, gy, gx, grid);
  // derived pseudo-random pattern for extra classes
  SplitRng rng = SplitRng(dataset_seed).split("mask").split(cls).split(
      gy * grid + gx);
  return rng.next_uniform() < 0.5;
}

std::uint8_t quantize(double v) {
  double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

void render_palette_sample(std::vector<std::uint8_t>& out, SplitRng rng,
                           int label, const SyntheticSpec& spec) {
  const std::size_t s = spec.image_size;
  const std::size_t cell = 4;  // texture cell aligned with the toy patch
  const std::size_t grid = s / cell;
  const Rgb fg_a{0.85, 0.35, 0.15}, bg_a{0.10, 0.12, 0.18};
  const Rgb fg_b{0.15, 0.45, 0.90}, bg_b{0.75, 0.70, 0.60};
  Rgb fg = lerp(fg_a, fg_b, spec.shift);
  Rgb bg = lerp(bg_a, bg_b, spec.shift);
  fg = {fg.r + rng.next_normal() * 0.06, fg.g + rng.next_normal() * 0.06,
        fg.b + rng.next_normal() * 0.06};
  bg = {bg.r + rng.next_normal() * 0.06, bg.g + rng.next_normal() * 0.06,
        bg.b + rng.next_normal() * 0.06};
  for (std::size_t gy = 0; gy < grid; ++gy)
    for (std::size_t gx = 0; gx < grid; ++gx) {
      const bool on = class_mask(static_cast<std::size_t>(label), gy, gx,
                                 grid, spec.seed);
      const Rgb& base = on ? fg : bg;
      for (std::size_t iy = 0; iy < cell; ++iy)
        for (std::size_t ix = 0; ix < cell; ++ix) {
          const std::size_t y = gy * cell + iy, x = gx * cell + ix;
          const double ch[3] = {base.r, base.g, base.b};
          for (std::size_t c = 0; c < 3; ++c)
            out[(c * s + y) * s + x] =
                quantize(ch[c] + rng.next_normal() * 0.05);
        }
    }
}

void render_count_sample(std::vector<std::uint8_t>& out, SplitRng rng,
                         int label, const SyntheticSpec& spec) {
  const std::size_t s = spec.image_size;
  const std::size_t blob = 3;
  const std::size_t blobs = static_cast<std::size_t>(label) + 1;
  const Rgb bg{0.12, 0.12, 0.14};
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const double ch[3] = {bg.r, bg.g, bg.b};
      for (std::size_t c = 0; c < 3; ++c)
        out[(c * s + y) * s + x] =
            quantize(ch[c] + rng.next_normal() * 0.03);
    }
  // rejection-place non-overlapping blobs
  std::vector<std::pair<std::size_t, std::size_t>> placed;
  while (placed.size() < blobs) {
    std::size_t py = rng.next_below(s - blob);
    std::size_t px = rng.next_below(s - blob);
    bool clash = false;
    for (auto [qy, qx] : placed)
      if (py + blob + 1 > qy && qy + blob + 1 > py && px + blob + 1 > qx &&
          qx + blob + 1 > px)
        clash = true;
    if (clash) continue;
    placed.emplace_back(py, px);
    Rgb col{0.55 + rng.next_uniform() * 0.4, 0.55 + rng.next_uniform() * 0.4,
            0.55 + rng.next_uniform() * 0.4};
    for (std::size_t iy = 0; iy < blob; ++iy)
      for (std::size_t ix = 0; ix < blob; ++ix) {
        const double ch[3] = {col.r, col.g, col.b};
        for (std::size_t c = 0; c < 3; ++c)
          out[(c * s + py + iy) * s + px + ix] = quantize(ch[c]);
      }
  }
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec, std::size_t count,
                           std::string_view split_label) {
  spec.validate();
  Dataset ds;
  ds.image_size = spec.image_size;
  ds.num_classes = spec.classes;
  const std::size_t stride = ds.sample_stride();
  ds.pixels.resize(count * stride);
  ds.labels.resize(count);
  SplitRng split_rng = SplitRng(spec.seed).split(split_label);
  std::vector<std::uint8_t> img(stride);
  for (std::size_t i = 0; i < count; ++i) {
    SplitRng rng = split_rng.split(i);
    // balanced labels: every class appears floor/ceil(count/classes) times
    int label = static_cast<int>(i % spec.classes);
    if (spec.task == TaskKind::palette)
      render_palette_sample(img, rng, label, spec);
    else
      render_count_sample(img, rng, label, spec);
    ds.labels[i] = label;
    for (std::size_t j = 0; j < stride; ++j)
      ds.pixels[i * stride + j] = static_cast<double>(img[j]) / 255.0;
  }
  return ds;
}

// ---- persistence -----------------------------------------------------------

namespace {

constexpr char kImagesMagic[4] = {'T', 'T', 'C', 'D'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("images.bin: truncated header");
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

void atomic_write(const fs::path& path,
                  const std::function<void(std::ostream&)>& writer) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp.string());
    writer(os);
    if (!os) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_split(const fs::path& dir, const Dataset& ds) {
  fs::create_directories(dir);
  atomic_write(dir / "images.bin", [&](std::ostream& os) {
    os.write(kImagesMagic, 4);
    put_u32(os, 1);  // version
    put_u32(os, static_cast<std::uint32_t>(ds.size()));
    put_u32(os, 3);
    put_u32(os, static_cast<std::uint32_t>(ds.image_size));
    put_u32(os, static_cast<std::uint32_t>(ds.image_size));
    std::vector<std::uint8_t> buf(ds.pixels.size());
    for (std::size_t i = 0; i < ds.pixels.size(); ++i)
      buf[i] = static_cast<std::uint8_t>(
          std::lround(ds.pixels[i] * 255.0));
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size()));
  });
  atomic_write(dir / "labels.txt", [&](std::ostream& os) {
    for (int y : ds.labels) os << y << "\n";
  });
}

}  // namespace

void write_dataset_dir(const fs::path& dir, const SyntheticSpec& spec) {
  spec.validate();
  fs::create_directories(dir);
  write_split(dir / "train", generate_synthetic(spec, spec.train, "train"));
  write_split(dir / "val", generate_synthetic(spec, spec.val, "val"));
  write_split(dir / "test", generate_synthetic(spec, spec.test, "test"));
  atomic_write(dir / "dataset.txt",
               [&](std::ostream& os) { os << spec.canonical(); });
}

Dataset load_dataset_split(const fs::path& dir, std::string_view split) {
  fs::path sub = dir / std::string(split);
  if (!fs::exists(sub / "images.bin") && fs::exists(dir / "images.bin"))
    sub = dir;  // raw directory without split subdirs
  std::ifstream is(sub / "images.bin", std::ios::binary);
  if (!is) throw IoError("cannot open " + (sub / "images.bin").string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kImagesMagic, 4) != 0)
    throw IoError("images.bin: bad magic in " + sub.string());
  const std::uint32_t version = get_u32(is);
  if (version != 1)
    throw IoError("images.bin: unsupported version " +
                  std::to_string(version));
  const std::uint32_t count = get_u32(is);
  const std::uint32_t channels = get_u32(is);
  const std::uint32_t height = get_u32(is);
  const std::uint32_t width = get_u32(is);
  if (channels != 3 || height != width)
    throw IoError("images.bin: unsupported geometry");
  Dataset ds;
  ds.image_size = height;
  const std::size_t total =
      static_cast<std::size_t>(count) * 3 * height * width;
  std::vector<std::uint8_t> buf(total);
  is.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(total));
  if (!is) throw IoError("images.bin: truncated payload in " + sub.string());
  ds.pixels.resize(total);
  for (std::size_t i = 0; i < total; ++i)
    ds.pixels[i] = static_cast<double>(buf[i]) / 255.0;

  std::ifstream ls(sub / "labels.txt");
  if (!ls) throw IoError("cannot open " + (sub / "labels.txt").string());
  int y;
  while (ls >> y) ds.labels.push_back(y);
  if (ds.labels.size() != count)
    throw IoError("labels.txt: expected " + std::to_string(count) +
                  " labels, got " + std::to_string(ds.labels.size()));
  int max_label = -1;
  for (int l : ds.labels) {
    if (l < 0) throw IoError("labels.txt: negative label");
    max_label = std::max(max_label, l);
  }
  ds.num_classes = static_cast<std::size_t>(max_label) + 1;
  return ds;
}

}  // namespace ttc
