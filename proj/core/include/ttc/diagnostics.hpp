#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ttc/dataset.hpp"
#include "ttc/model.hpp"
#include "ttc/petl.hpp"
#include "ttc/pipeline.hpp"

namespace ttc {

/// Jensen-Shannon divergence with natural log: 0.5*(KL(p||m) + KL(q||m)),
/// m = (p+q)/2. Inputs must be normalized distributions over the same
/// support; the result lies in [0, ln 2].
double jsd(std::span<const double> p, std::span<const double> q);

/// Turn a feature vector into a distribution via softmax (strictly
/// positive, no binning artifacts).
std::vector<double> softmax_distribution(std::span<const double> v);

/// Fixed-bin histogram distribution with 1e-12 smoothing before
/// normalization.
std::vector<double> histogram_distribution(std::span<const double> v,
                                           double lo, double hi,
                                           std::size_t bins);

enum class ClsDistributionMode { softmax, histogram };
std::string_view cls_distribution_mode_name(ClsDistributionMode m);

struct FeatureShiftReport {
  ClsDistributionMode mode = ClsDistributionMode::softmax;
  std::vector<double> per_sample_jsd;
  double hist_lo = 0.0, hist_hi = 0.0;
  std::vector<std::size_t> hist_counts;

  std::string to_csv() const;  // jsd_hist.csv schema
};

/// Per-sample JSD between the CLS features of two models over a dataset
/// (Fig.-4-style shift histogram).
FeatureShiftReport feature_shift_report(
    const TransformerModel& model_a, const TransformerModel& model_b,
    const Dataset& data,
    ClsDistributionMode mode = ClsDistributionMode::softmax,
    std::size_t histogram_bins = 20);

/// k-nearest-neighbour (Euclidean) majority-vote accuracy in [0,1].
/// Class ties break by smaller summed distance, then lower label.
double knn_probe(const Tensor& train_feats, const std::vector<int>& train_labels,
                 const Tensor& test_feats, const std::vector<int>& test_labels,
                 std::size_t k);

/// CLS features of every sample, stacked [N, D].
Tensor extract_cls_features(const TransformerModel& model, const Dataset& data,
                            std::size_t batch_size = 64);

void write_embeddings_csv(const std::filesystem::path& path,
                          const Tensor& feats, const std::vector<int>& labels);

struct ComplexityReport {
  Method method = Method::linear;
  /// Closed-form extra parameters from the complexity table; for ttc this
  /// is the weight count L*K*K (bias reported separately).
  std::size_t closed_form_params = 0;
  std::size_t closed_form_bias_params = 0;  // ttc: L*K
  std::size_t empirical_params = 0;         // tensor-size sum over attachments
  /// Closed-form extra FLOPs as printed in the complexity table.
  std::size_t closed_form_flops = 0;
  /// Extra multiply-accumulates measured on one forward (counter diff);
  /// 0 when not measured.
  std::size_t empirical_macs = 0;
  /// Human-readable accounting lines (site lists, formula inputs).
  std::vector<std::string> detail;

  std::string to_text() const;
};

/// Parameter/FLOP accounting for the method's attachments on this model.
/// `tokens` is the token count N used by the FLOP formulas (defaults to
/// the model's N+1 sequence length).
ComplexityReport complexity_report(const TransformerModel& model, Method m,
                                   std::size_t tokens = 0);

struct LnShiftRow {
  std::string norm;  // "layers.<i>.norm1", "layers.<i>.norm2", "final.norm"
  double gamma_l2 = 0.0;
  double beta_l2 = 0.0;
};

/// L2 shift of every LayerNorm's gamma and beta between two models of the
/// same spec (Fig.-7-style table).
std::vector<LnShiftRow> ln_shift_report(const TransformerModel& before,
                                        const TransformerModel& after);
std::string ln_shift_csv(const std::vector<LnShiftRow>& rows);

/// Spearman rank correlation with average ranks on ties.
double spearman_correlation(std::span<const double> a,
                            std::span<const double> b);

}  // namespace ttc
