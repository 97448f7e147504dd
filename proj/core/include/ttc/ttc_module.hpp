#pragma once

#include <cstddef>
#include <vector>

#include "ttc/model.hpp"
#include "ttc/scoring.hpp"

namespace ttc {

/// Standalone channel adapter: gather the selected channels, apply a
/// residual KxK linear map, scatter back. Zero-initialized weights make it
/// an exact identity.
struct TTCParams {
  std::vector<std::size_t> selected;  // strictly increasing, < D
  Tensor weight;                      // [K, K], zero-initialized
  Tensor bias;                        // [K], zero-initialized (optional)
  bool with_bias = true;
};

TTCParams make_ttc_params(std::vector<std::size_t> selected, bool with_bias);

/// x' = x[.., selected]; x'' = x' + x' W + b; result is x with the selected
/// channels replaced by x'' and every other channel bit-unchanged.
Tensor ttc_forward(const Tensor& x, const TTCParams& p);

/// Extra parameters for `layers_inserted` adapters of width K:
/// L*(K^2+K) with bias, L*K^2 without.
std::size_t ttc_param_count(std::size_t layers_inserted, std::size_t k,
                            bool with_bias);

/// Parameters of the weight-tuning comparison arm: a K-column delta on a
/// producing weight whose input width is `in_width` (K*D when the weight is
/// square DxD).
std::size_t ttc_weight_arm_param_count(std::size_t layers_inserted,
                                       std::size_t k, std::size_t in_width);

enum class InsertPosition { after_mhsa, after_mlp, both };
InsertPosition parse_insert_position(std::string_view name);
std::string_view insert_position_name(InsertPosition p);

struct InsertOptions {
  /// Insert in the last `depth` layers; 0 inserts nowhere (stage-2 model
  /// equals stage-1), SIZE_MAX or >= L covers every layer.
  std::size_t depth = SIZE_MAX;
  InsertPosition position = InsertPosition::after_mlp;
  bool with_bias = true;
  bool tune_weights = false;
};

/// Register TTC attachments from an importance report. Every requested
/// (layer, position) site must exist in the report.
void insert_ttc(TransformerModel& model, const ImportanceReport& report,
                const InsertOptions& opts);

}  // namespace ttc
