#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ttc/model.hpp"
#include "ttc/tensor.hpp"

namespace ttc {

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::string config_snapshot;
  std::string stage;  // e.g. "pretrain", "stage1", "stage2", "final"
};

/// Binary layout (all integers little-endian):
///   magic "TTCT", version u32, entry count u32,
///   per entry: name length u32, name bytes, rank u32, dims u32[rank],
///              payload f64[numel] (raw IEEE bits),
///   metadata: seed u64, config length u32 + bytes, stage length u32 + bytes.
/// Round-trips are bit-exact; unknown versions are rejected.
void save_tensors(const std::filesystem::path& path,
                  const std::vector<std::pair<std::string, Tensor>>& tensors,
                  const CheckpointMeta& meta);

struct LoadedCheckpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  CheckpointMeta meta;

  const Tensor* find(const std::string& name) const;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Save every model parameter under its registered name.
void save_model(const std::filesystem::path& path,
                const TransformerModel& model, const CheckpointMeta& meta);

/// Copy checkpoint values into a model with a matching parameter set.
/// With `reset_head` the checkpoint's `head.*` entries are ignored and the
/// model keeps its fresh zero head (class counts may differ across tasks).
void load_into_model(TransformerModel& model, const LoadedCheckpoint& ckpt,
                     bool reset_head);

}  // namespace ttc
