#include "ttc/ttc_module.hpp"

#include <algorithm>

#include "ttc/errors.hpp"

namespace ttc {

TTCParams make_ttc_params(std::vector<std::size_t> selected, bool with_bias) {
  if (selected.empty()) throw ConfigError("ttc: empty channel selection");
  for (std::size_t i = 1; i < selected.size(); ++i)
    if (selected[i] <= selected[i - 1])
      throw ConfigError("ttc: selected channels must be strictly increasing");
  const std::size_t k = selected.size();
  TTCParams p;
  p.selected = std::move(selected);
  p.weight = Tensor::zeros({k, k});
  if (with_bias) p.bias = Tensor::zeros({k});
  p.with_bias = with_bias;
  return p;
}

Tensor ttc_forward(const Tensor& x, const TTCParams& p) {
  if (x.rank() == 0 || x.shape().back() <= p.selected.back())
    throw ShapeError("ttc_forward: selection exceeds feature width of " +
                     shape_str(x.shape()));
  Tensor picked = gather_lastdim(x, p.selected);
  Tensor transformed = matmul(picked, p.weight);
  if (p.with_bias) transformed = add(transformed, p.bias);
  return scatter_replace_lastdim(x, add(picked, transformed), p.selected);
}

std::size_t ttc_param_count(std::size_t layers_inserted, std::size_t k,
                            bool with_bias) {
  return layers_inserted * (k * k + (with_bias ? k : 0));
}

std::size_t ttc_weight_arm_param_count(std::size_t layers_inserted,
                                       std::size_t k, std::size_t in_width) {
  return layers_inserted * k * in_width;
}

InsertPosition parse_insert_position(std::string_view name) {
  if (name == "after_mhsa") return InsertPosition::after_mhsa;
  if (name == "after_mlp") return InsertPosition::after_mlp;
  if (name == "both") return InsertPosition::both;
  throw ConfigError("unknown insert position '" + std::string(name) + "'");
}

std::string_view insert_position_name(InsertPosition p) {
  switch (p) {
    case InsertPosition::after_mhsa:
      return "after_mhsa";
    case InsertPosition::after_mlp:
      return "after_mlp";
    case InsertPosition::both:
      return "both";
  }
  return "?";
}

void insert_ttc(TransformerModel& model, const ImportanceReport& report,
                const InsertOptions& opts) {
  const std::size_t L = model.spec().depth;
  if (opts.depth == 0) return;  // no attachments; stage-2 model == stage-1
  const std::size_t depth = std::min(opts.depth, L);
  const std::size_t first_layer = L - depth;
  std::vector<TtcPosition> positions;
  if (opts.position == InsertPosition::after_mhsa ||
      opts.position == InsertPosition::both)
    positions.push_back(TtcPosition::after_mhsa);
  if (opts.position == InsertPosition::after_mlp ||
      opts.position == InsertPosition::both)
    positions.push_back(TtcPosition::after_mlp);

  for (std::size_t l = first_layer; l < L; ++l)
    for (TtcPosition pos : positions) {
      const SiteScores* site = report.find(l, pos);
      if (!site)
        throw ConfigError("insert_ttc: report has no site for layer " +
                          std::to_string(l) + " position " +
                          std::string(ttc_position_name(pos)));
      model.attach_ttc(l, pos, site->selected, opts.with_bias,
                       opts.tune_weights);
    }
}

}  // namespace ttc
