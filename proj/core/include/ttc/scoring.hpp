#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ttc/dataset.hpp"
#include "ttc/model.hpp"

namespace ttc {

enum class SelectionStrategy { tis, l2norm, random };
SelectionStrategy parse_selection_strategy(std::string_view name);
std::string_view selection_strategy_name(SelectionStrategy s);

/// How per-parameter Taylor terms aggregate into a channel score.
/// `squared` sums (g*w)^2 over the channel's weights; `signed_sum` keeps
/// the raw first-order sum for ablation and may go negative.
enum class ScoreMode { squared, signed_sum };
ScoreMode parse_score_mode(std::string_view name);
std::string_view score_mode_name(ScoreMode m);

struct SiteScores {
  std::size_t layer = 0;
  TtcPosition position = TtcPosition::after_mlp;
  std::vector<double> scores;          // per channel, length D
  std::vector<std::size_t> selected;   // sorted ascending, length K
};

/// Per-site channel importance plus the chosen top-K sets.
struct ImportanceReport {
  std::vector<SiteScores> sites;
  std::size_t k = 0;
  std::size_t num_batches = 0;
  std::uint64_t seed = 0;
  SelectionStrategy strategy = SelectionStrategy::tis;
  ScoreMode mode = ScoreMode::squared;

  const SiteScores* find(std::size_t layer, TtcPosition pos) const;
  std::string to_json() const;
  static ImportanceReport from_json(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static ImportanceReport load(const std::filesystem::path& path);
};

/// Indices of the K largest scores; ties broken toward the lower index;
/// result sorted ascending.
std::vector<std::size_t> select_topk(std::span<const double> scores,
                                     std::size_t k);

// ---- generic scoring core ---------------------------------------------------
// Works on any differentiable model built from this toolkit's tensors: the
// caller supplies a loss closure over the current parameter values. A
// "channel" of a weight [In, Out] is one output column.

/// Builds the loss for batch `b` on a fresh graph.
using LossFn = std::function<Tensor(std::size_t batch)>;

/// First-order Taylor channel scores for `weight`, averaged over batches.
/// One backward pass per batch; parameter values untouched.
std::vector<double> taylor_channel_scores(const LossFn& loss_fn,
                                          std::size_t num_batches,
                                          Tensor& weight,
                                          ScoreMode mode = ScoreMode::squared);

/// Exact removal score of one output channel: (L(channel zeroed) - L)^2.
/// The weight is restored bit-exactly afterward.
double exact_removal_score(const std::function<double()>& eval_loss,
                           Tensor& weight, std::size_t channel);

/// Full sweep over all output channels, evaluating the baseline loss once.
std::vector<double> exact_removal_scores(
    const std::function<double()>& eval_loss, Tensor& weight);

// ---- model-level scoring ----------------------------------------------------

struct ScoringConfig {
  std::size_t k = 4;
  SelectionStrategy strategy = SelectionStrategy::tis;
  ScoreMode mode = ScoreMode::squared;
  /// Insert in the last `depth` layers; 0 means every layer.
  std::size_t depth = 0;
  bool position_mhsa = false;
  bool position_mlp = true;
  /// Training batches averaged per site; 0 means one full epoch.
  std::size_t max_batches = 0;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

/// Eq.-style removal score on the transformer: zero the weight column that
/// produces `channel`, re-evaluate the cross-entropy loss on the batch.
double exact_removal_score(TransformerModel& model, const Tensor& images,
                           const std::vector<int>& labels,
                           const std::string& weight_name,
                           std::size_t channel);

/// Score every requested site on the training set and select top-K per
/// site. For `random` the scores vector is the selection indicator; for
/// `l2norm` it holds per-channel feature norms gathered from a traced
/// forward pass.
ImportanceReport compute_importance(const TransformerModel& model,
                                    const Dataset& train,
                                    const ScoringConfig& cfg);

}  // namespace ttc
