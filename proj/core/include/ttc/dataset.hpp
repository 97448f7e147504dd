#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ttc/rng.hpp"
#include "ttc/tensor.hpp"

namespace ttc {

enum class TaskKind { palette, count };
std::string_view task_kind_name(TaskKind k);
TaskKind parse_task_kind(std::string_view name);

/// Generation recipe for the synthetic desk-scale tasks.
///
/// `palette`: the class is a spatial cell pattern; `shift` interpolates the
/// global foreground/background palette between the pretraining domain (0)
/// and the downstream domain (1), giving a controllable covariate shift.
/// `count`: the label is the number of distinct blobs in the image.
struct SyntheticSpec {
  TaskKind task = TaskKind::palette;
  std::size_t classes = 5;
  std::size_t image_size = 16;
  double shift = 0.0;
  std::uint64_t seed = 1;
  std::size_t train = 1000;
  std::size_t val = 200;
  std::size_t test = 500;

  void validate() const;
  std::string canonical() const;  // key=value snapshot written next to data
};

/// In-memory labelled image set. Pixels are u8-quantized then scaled to
/// [0,1], so an in-memory dataset equals its on-disk round trip exactly.
struct Dataset {
  std::size_t image_size = 0;
  std::size_t num_classes = 0;
  std::vector<double> pixels;  // n * 3 * s * s, row-major
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_stride() const { return 3 * image_size * image_size; }
  /// Stack the listed samples into a [B,3,S,S] tensor.
  Tensor images(std::span<const std::size_t> indices) const;
  Tensor all_images() const;
  std::vector<int> labels_at(std::span<const std::size_t> indices) const;
  Dataset slice(std::size_t offset, std::size_t count) const;
};

/// Deterministic generation: each sample is a pure function of
/// (spec.seed, split label, sample index).
Dataset generate_synthetic(const SyntheticSpec& spec, std::size_t count,
                           std::string_view split_label);

/// Write train/val/test splits plus a `dataset.txt` snapshot under `dir`.
void write_dataset_dir(const std::filesystem::path& dir,
                       const SyntheticSpec& spec);

/// Load one split (`train`, `val`, `test`) from a dataset directory; also
/// accepts any raw directory holding `images.bin` + `labels.txt`.
Dataset load_dataset_split(const std::filesystem::path& dir,
                           std::string_view split);

}  // namespace ttc
