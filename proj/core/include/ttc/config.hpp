#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ttc/dataset.hpp"
#include "ttc/model.hpp"
#include "ttc/petl.hpp"
#include "ttc/pipeline.hpp"
#include "ttc/scoring.hpp"
#include "ttc/ttc_module.hpp"

namespace ttc {

/// Flat `key = value` configuration text. `#` starts a comment; keys use
/// dotted sections (`stage1.lr`). Parsing keeps insertion order; the
/// canonical form sorts keys so equivalent configs serialize identically.
class Config {
 public:
  static Config parse_file(const std::filesystem::path& path);
  static Config parse_string(std::string_view text);

  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;
  void set(const std::string& key, std::string value);

  std::string get_string(const std::string& key, std::string def) const;
  std::int64_t get_int(const std::string& key, std::int64_t def) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t def) const;
  double get_double(const std::string& key, double def) const;
  bool get_bool(const std::string& key, bool def) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const {
    return entries_;
  }
  std::string canonical() const;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

/// Fully-typed run description. Construction validates every key against
/// the known schema: an unknown key is a hard error naming the key.
struct RunConfig {
  ModelSpec model;
  std::string data_path;
  Method method = Method::ttc;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::string pretrained_path;  // optional backbone checkpoint
  bool pretrained_reset_head = true;

  bool stage1_enabled = true;
  TrainPlan stage1;
  TrainPlan stage2;
  bool stage2_tune_ln = true;

  ScoringConfig scoring;           // ttc.k / ttc.selector / ttc.score_*
  InsertOptions insert;            // ttc.position / ttc.depth / ttc.bias
  std::size_t adapter_dim = 0;     // 0 = default dim/16
  Activation adapter_activation = Activation::gelu;
  std::size_t vpt_prompts = 4;
  bool ssf_include_embed_sites = false;
  std::vector<double> lr_grid;     // empty = use configured stage lrs

  static RunConfig from_config(const Config& cfg);
  /// Canonical key=value snapshot of every effective setting.
  std::string snapshot() const;
};

}  // namespace ttc
