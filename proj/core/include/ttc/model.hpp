#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ttc/rng.hpp"
#include "ttc/tensor.hpp"

namespace ttc {

/// Backbone geometry for the plain ViT.
struct ModelSpec {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t depth = 2;       // transformer layers L
  std::size_t dim = 32;        // embedding width D
  std::size_t heads = 4;
  double mlp_ratio = 4.0;
  std::size_t num_classes = 5;
  double layernorm_eps = 1e-6;

  void validate() const;
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return 3 * patch_size * patch_size; }
  std::size_t mlp_hidden() const {
    return static_cast<std::size_t>(static_cast<double>(dim) * mlp_ratio);
  }

  bool operator==(const ModelSpec&) const = default;
};

enum class TtcPosition { after_mhsa, after_mlp };
std::string_view ttc_position_name(TtcPosition p);
TtcPosition parse_ttc_position(std::string_view name);

enum class PromptDepth { shallow, deep };
enum class Activation { relu, gelu };

struct AdapterAttachment {
  std::size_t bottleneck = 0;  // D'
  Activation activation = Activation::gelu;
};

struct PromptAttachment {
  std::size_t count = 0;  // n
  PromptDepth depth = PromptDepth::shallow;
};

struct SsfAttachment {
  bool include_embed_sites = false;
  /// Modulated operation outputs inside every layer, with feature widths
  /// as multiples of D. Widths depend on mlp_ratio.
  static const std::vector<std::string>& layer_sites();
};

struct TtcAttachment {
  std::vector<std::size_t> selected;  // strictly increasing channel indices
  bool with_bias = true;
  /// Comparison arm: train a KxD delta on the producing weight instead of
  /// the KxK channel adapter.
  bool tune_weights = false;
};

struct ForwardOptions {
  bool want_trace = false;
};

/// Detached per-layer feature maps at the two insertion sites.
struct LayerTrace {
  Tensor after_mhsa;  // [B, T, D]
  Tensor after_mlp;   // [B, T, D]
};

struct ForwardResult {
  Tensor logits;  // [B, C]
  Tensor cls;     // [B, D], final-LayerNorm output at the CLS position
  std::vector<LayerTrace> trace;
};

/// Plain pre-norm ViT with a named-parameter registry and optional PETL
/// attachments. Dotted parameter names (`layers.3.norm2.gamma`) are a
/// stable contract shared by train plans and checkpoints.
class TransformerModel {
 public:
  TransformerModel(const ModelSpec& spec, SplitRng init_rng);

  const ModelSpec& spec() const { return spec_; }

  // ---- parameter registry ----
  const std::vector<std::string>& parameter_names() const { return order_; }
  bool has_param(const std::string& name) const;
  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  /// Parameters whose name matches the glob, in registration order.
  std::vector<std::pair<std::string, Tensor>> named_parameters(
      std::string_view glob = "*") const;
  std::vector<std::string> resolve_names(
      const std::vector<std::string>& globs) const;
  std::size_t total_param_count() const;
  void zero_grad();
  /// Set requires_grad true exactly on glob matches, false elsewhere.
  void set_trainable(const std::vector<std::string>& globs);

  // ---- attachments ----
  void attach_adapter(std::size_t bottleneck, Activation act, SplitRng rng);
  void attach_prompts(std::size_t count, PromptDepth depth, SplitRng rng);
  void attach_ssf(bool include_embed_sites);
  void attach_ttc(std::size_t layer, TtcPosition pos,
                  std::vector<std::size_t> selected, bool with_bias,
                  bool tune_weights);

  const std::optional<AdapterAttachment>& adapter() const { return adapter_; }
  const std::optional<PromptAttachment>& prompt_attachment() const {
    return prompts_;
  }
  const std::optional<SsfAttachment>& ssf() const { return ssf_; }
  const std::map<std::pair<std::size_t, TtcPosition>, TtcAttachment>&
  ttc_attachments() const {
    return ttc_;
  }

  /// Name of the linear weight whose output channels feed the site.
  std::string producing_weight_name(std::size_t layer,
                                    TtcPosition pos) const;

  ForwardResult forward(const Tensor& images,
                        const ForwardOptions& opts = {}) const;

  /// Deep copy; parameters cloned and detached from any graph.
  TransformerModel clone() const;

 private:
  void register_param(const std::string& name, Tensor t);
  Tensor init_weight(Shape shape, SplitRng& rng, const std::string& name);
  Tensor maybe_ssf(Tensor x, const std::string& site_prefix) const;
  Tensor apply_ttc(Tensor x, std::size_t layer, TtcPosition pos) const;
  Tensor effective_weight(const std::string& weight_name, std::size_t layer,
                          TtcPosition pos) const;

  ModelSpec spec_;
  std::vector<std::string> order_;
  std::map<std::string, Tensor> params_;
  std::optional<AdapterAttachment> adapter_;
  std::optional<PromptAttachment> prompts_;
  std::optional<SsfAttachment> ssf_;
  std::map<std::pair<std::size_t, TtcPosition>, TtcAttachment> ttc_;
};

}  // namespace ttc
