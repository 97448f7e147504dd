#include "ttc/model.hpp"

#include <algorithm>
#include <cmath>

#include "ttc/errors.hpp"
#include "ttc/glob.hpp"

namespace ttc {

void ModelSpec::validate() const {
  if (patch_size == 0 || image_size % patch_size != 0)
    throw ConfigError("model: image_size " + std::to_string(image_size) +
                      " not divisible by patch_size " +
                      std::to_string(patch_size));
  if (heads == 0 || dim % heads != 0)
    throw ConfigError("model: dim " + std::to_string(dim) +
                      " not divisible by heads " + std::to_string(heads));
  if (depth == 0) throw ConfigError("model: depth must be >= 1");
  if (num_classes == 0) throw ConfigError("model: num_classes must be >= 1");
  if (layernorm_eps <= 0.0)
    throw ConfigError("model: layernorm_eps must be > 0");
  if (mlp_hidden() == 0) throw ConfigError("model: mlp_ratio too small");
}

std::string_view ttc_position_name(TtcPosition p) {
  return p == TtcPosition::after_mhsa ? "after_mhsa" : "after_mlp";
}

TtcPosition parse_ttc_position(std::string_view name) {
  if (name == "after_mhsa") return TtcPosition::after_mhsa;
  if (name == "after_mlp") return TtcPosition::after_mlp;
  throw ConfigError("unknown ttc position '" + std::string(name) + "'");
}

const std::vector<std::string>& SsfAttachment::layer_sites() {
  static const std::vector<std::string> sites = {"ln1", "qkv", "proj",
                                                 "ln2", "fc1", "fc2"};
  return sites;
}

namespace {

std::size_t ssf_site_width(const ModelSpec& spec, const std::string& site) {
  if (site == "qkv") return 3 * spec.dim;
  if (site == "fc1") return spec.mlp_hidden();
  return spec.dim;
}

}  // namespace

TransformerModel::TransformerModel(const ModelSpec& spec, SplitRng init_rng)
    : spec_(spec) {
  spec_.validate();
  const std::size_t d = spec_.dim;
  const std::size_t n = spec_.num_patches();
  const std::size_t hid = spec_.mlp_hidden();

  register_param("patch_embed.weight",
                 init_weight({spec_.patch_dim(), d}, init_rng,
                             "patch_embed.weight"));
  register_param("patch_embed.bias", Tensor::zeros({d}));
  register_param("cls_token", init_weight({1, d}, init_rng, "cls_token"));
  register_param("pos_embed", init_weight({n + 1, d}, init_rng, "pos_embed"));

  for (std::size_t l = 0; l < spec_.depth; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    register_param(p + "norm1.gamma", Tensor::full({d}, 1.0));
    register_param(p + "norm1.beta", Tensor::zeros({d}));
    register_param(p + "attn.qkv.weight",
                   init_weight({d, 3 * d}, init_rng, p + "attn.qkv.weight"));
    register_param(p + "attn.qkv.bias", Tensor::zeros({3 * d}));
    register_param(p + "attn.proj.weight",
                   init_weight({d, d}, init_rng, p + "attn.proj.weight"));
    register_param(p + "attn.proj.bias", Tensor::zeros({d}));
    register_param(p + "norm2.gamma", Tensor::full({d}, 1.0));
    register_param(p + "norm2.beta", Tensor::zeros({d}));
    register_param(p + "mlp.fc1.weight",
                   init_weight({d, hid}, init_rng, p + "mlp.fc1.weight"));
    register_param(p + "mlp.fc1.bias", Tensor::zeros({hid}));
    register_param(p + "mlp.fc2.weight",
                   init_weight({hid, d}, init_rng, p + "mlp.fc2.weight"));
    register_param(p + "mlp.fc2.bias", Tensor::zeros({d}));
  }

  register_param("final.norm.gamma", Tensor::full({d}, 1.0));
  register_param("final.norm.beta", Tensor::zeros({d}));
  // fresh zero-initialized head per task
  register_param("head.weight", Tensor::zeros({d, spec_.num_classes}));
  register_param("head.bias", Tensor::zeros({spec_.num_classes}));
}

Tensor TransformerModel::init_weight(Shape shape, SplitRng& rng,
                                     const std::string& name) {
  SplitRng sub = rng.split(name);
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = sub.next_trunc_normal(0.02);
  return Tensor::from_data(std::move(shape), std::move(data));
}

void TransformerModel::register_param(const std::string& name, Tensor t) {
  if (params_.count(name))
    throw ConfigError("duplicate parameter '" + name + "'");
  order_.push_back(name);
  params_.emplace(name, std::move(t));
}

bool TransformerModel::has_param(const std::string& name) const {
  return params_.count(name) != 0;
}

Tensor& TransformerModel::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end())
    throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& TransformerModel::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end())
    throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

std::vector<std::pair<std::string, Tensor>> TransformerModel::named_parameters(
    std::string_view glob) const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& name : order_)
    if (glob_match(glob, name)) out.emplace_back(name, params_.at(name));
  return out;
}

std::vector<std::string> TransformerModel::resolve_names(
    const std::vector<std::string>& globs) const {
  std::vector<std::string> out;
  for (const auto& name : order_)
    if (glob_match_any(globs, name)) out.push_back(name);
  return out;
}

std::size_t TransformerModel::total_param_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void TransformerModel::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

void TransformerModel::set_trainable(const std::vector<std::string>& globs) {
  for (const auto& name : order_)
    params_.at(name).set_requires_grad(glob_match_any(globs, name));
}

// ---- attachments -----------------------------------------------------------

void TransformerModel::attach_adapter(std::size_t bottleneck, Activation act,
                                      SplitRng rng) {
  if (adapter_) throw ConfigError("adapter already attached");
  if (bottleneck == 0 || bottleneck >= spec_.dim)
    throw ConfigError("adapter bottleneck must be in [1, dim)");
  adapter_ = AdapterAttachment{bottleneck, act};
  for (std::size_t l = 0; l < spec_.depth; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".adapter.";
    register_param(p + "w_down", init_weight({spec_.dim, bottleneck}, rng,
                                             p + "w_down"));
    // zero-initialized up-projection: the adapter starts as identity
    register_param(p + "w_up", Tensor::zeros({bottleneck, spec_.dim}));
  }
}

void TransformerModel::attach_prompts(std::size_t count, PromptDepth depth,
                                      SplitRng rng) {
  if (prompts_) throw ConfigError("prompts already attached");
  if (count == 0) throw ConfigError("prompt count must be >= 1");
  prompts_ = PromptAttachment{count, depth};
  const std::size_t layers = depth == PromptDepth::deep ? spec_.depth : 1;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string name = "prompts." + std::to_string(l);
    register_param(name, init_weight({count, spec_.dim}, rng, name));
  }
}

void TransformerModel::attach_ssf(bool include_embed_sites) {
  if (ssf_) throw ConfigError("ssf already attached");
  ssf_ = SsfAttachment{include_embed_sites};
  auto add_site = [&](const std::string& prefix, std::size_t width) {
    register_param(prefix + ".gamma", Tensor::full({width}, 1.0));
    register_param(prefix + ".beta", Tensor::zeros({width}));
  };
  for (std::size_t l = 0; l < spec_.depth; ++l)
    for (const auto& site : SsfAttachment::layer_sites())
      add_site("layers." + std::to_string(l) + ".ssf." + site,
               ssf_site_width(spec_, site));
  if (include_embed_sites) {
    add_site("patch_embed.ssf", spec_.dim);
    add_site("final.ssf", spec_.dim);
  }
}

void TransformerModel::attach_ttc(std::size_t layer, TtcPosition pos,
                                  std::vector<std::size_t> selected,
                                  bool with_bias, bool tune_weights) {
  if (layer >= spec_.depth)
    throw ConfigError("ttc: layer " + std::to_string(layer) + " out of " +
                      std::to_string(spec_.depth));
  if (ttc_.count({layer, pos}))
    throw ConfigError("ttc already attached at layer " +
                      std::to_string(layer));
  if (selected.empty()) throw ConfigError("ttc: empty channel selection");
  for (std::size_t i = 0; i < selected.size(); ++i) {
    if (selected[i] >= spec_.dim)
      throw ShapeError("ttc: channel " + std::to_string(selected[i]) +
                       " out of " + std::to_string(spec_.dim));
    if (i > 0 && selected[i] <= selected[i - 1])
      throw ConfigError("ttc: selected channels must be strictly increasing");
  }
  const std::size_t k = selected.size();
  const std::string p = "layers." + std::to_string(layer) + ".ttc." +
                        std::string(ttc_position_name(pos)) + ".";
  if (tune_weights) {
    const std::string wname = producing_weight_name(layer, pos);
    const std::size_t in_width = param(wname).dim(0);
    register_param(p + "delta", Tensor::zeros({in_width, k}));
  } else {
    register_param(p + "weight", Tensor::zeros({k, k}));
    if (with_bias) register_param(p + "bias", Tensor::zeros({k}));
  }
  ttc_.emplace(std::make_pair(layer, pos),
               TtcAttachment{std::move(selected), with_bias, tune_weights});
}

std::string TransformerModel::producing_weight_name(std::size_t layer,
                                                    TtcPosition pos) const {
  const std::string p = "layers." + std::to_string(layer) + ".";
  return pos == TtcPosition::after_mhsa ? p + "attn.proj.weight"
                                        : p + "mlp.fc2.weight";
}

// ---- forward ---------------------------------------------------------------

namespace {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), b);
}

}  // namespace

Tensor TransformerModel::maybe_ssf(Tensor x,
                                   const std::string& site_prefix) const {
  if (!ssf_) return x;
  auto git = params_.find(site_prefix + ".gamma");
  if (git == params_.end()) return x;
  return add(mul(x, git->second), params_.at(site_prefix + ".beta"));
}

Tensor TransformerModel::apply_ttc(Tensor x, std::size_t layer,
                                   TtcPosition pos) const {
  auto it = ttc_.find({layer, pos});
  if (it == ttc_.end() || it->second.tune_weights) return x;
  const TtcAttachment& att = it->second;
  const std::string p = "layers." + std::to_string(layer) + ".ttc." +
                        std::string(ttc_position_name(pos)) + ".";
  Tensor picked = gather_lastdim(x, att.selected);
  Tensor transformed = matmul(picked, params_.at(p + "weight"));
  if (att.with_bias) transformed = add(transformed, params_.at(p + "bias"));
  Tensor residual = add(picked, transformed);
  return scatter_replace_lastdim(x, residual, att.selected);
}

Tensor TransformerModel::effective_weight(const std::string& weight_name,
                                          std::size_t layer,
                                          TtcPosition pos) const {
  const Tensor& w = params_.at(weight_name);
  auto it = ttc_.find({layer, pos});
  if (it == ttc_.end() || !it->second.tune_weights) return w;
  const std::string p = "layers." + std::to_string(layer) + ".ttc." +
                        std::string(ttc_position_name(pos)) + ".delta";
  Tensor cols = gather_lastdim(w, it->second.selected);
  Tensor patched = add(cols, params_.at(p));
  return scatter_replace_lastdim(w, patched, it->second.selected);
}

ForwardResult TransformerModel::forward(const Tensor& images,
                                        const ForwardOptions& opts) const {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != spec_.image_size ||
      s[3] != spec_.image_size)
    throw ShapeError("forward: images " + shape_str(s) + " but spec wants [B,3," +
                     std::to_string(spec_.image_size) + "," +
                     std::to_string(spec_.image_size) + "]");
  const std::size_t b = s[0];
  const std::size_t d = spec_.dim;
  const std::size_t n = spec_.num_patches();
  const std::size_t h = spec_.heads;
  const std::size_t hd = d / h;

  Tensor tokens = linear(patchify(images, spec_.patch_size),
                         params_.at("patch_embed.weight"),
                         params_.at("patch_embed.bias"));
  tokens = maybe_ssf(std::move(tokens), "patch_embed.ssf");
  tokens = concat(repeat_outer(params_.at("cls_token"), b), tokens, 1);
  tokens = add(tokens, repeat_outer(params_.at("pos_embed"), b));

  if (prompts_)
    tokens = concat(tokens, repeat_outer(params_.at("prompts.0"), b), 1);

  ForwardResult result;
  if (opts.want_trace) result.trace.reserve(spec_.depth);

  for (std::size_t l = 0; l < spec_.depth; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    if (prompts_ && prompts_->depth == PromptDepth::deep && l > 0) {
      // replace prompt rows with this layer's fresh prompts
      Tensor base = slice_axis1(tokens, 0, n + 1);
      tokens = concat(base,
                      repeat_outer(params_.at("prompts." + std::to_string(l)),
                                   b),
                      1);
    }
    const std::size_t t = tokens.dim(1);

    Tensor x = layernorm(tokens, params_.at(p + "norm1.gamma"),
                         params_.at(p + "norm1.beta"), spec_.layernorm_eps);
    x = maybe_ssf(std::move(x), p + "ssf.ln1");
    Tensor qkv = linear(x, params_.at(p + "attn.qkv.weight"),
                        params_.at(p + "attn.qkv.bias"));
    qkv = maybe_ssf(std::move(qkv), p + "ssf.qkv");
    auto split_head = [&](std::size_t offset) {
      Tensor part = slice_lastdim(qkv, offset * d, d);
      return permute(reshape(part, {b, t, h, hd}), {0, 2, 1, 3});
    };
    Tensor q = split_head(0), k = split_head(1), v = split_head(2);
    Tensor scores = mul_scalar(matmul(q, transpose_last2(k)),
                               1.0 / std::sqrt(static_cast<double>(hd)));
    Tensor ctx = matmul(softmax_lastdim(scores), v);
    ctx = reshape(permute(ctx, {0, 2, 1, 3}), {b, t, d});
    Tensor o = add(matmul(ctx, effective_weight(p + "attn.proj.weight", l,
                                                TtcPosition::after_mhsa)),
                   params_.at(p + "attn.proj.bias"));
    o = maybe_ssf(std::move(o), p + "ssf.proj");
    tokens = add(tokens, o);
    tokens = apply_ttc(std::move(tokens), l, TtcPosition::after_mhsa);
    if (opts.want_trace) result.trace.push_back({tokens.detach(), Tensor()});

    Tensor y = layernorm(tokens, params_.at(p + "norm2.gamma"),
                         params_.at(p + "norm2.beta"), spec_.layernorm_eps);
    y = maybe_ssf(std::move(y), p + "ssf.ln2");
    y = linear(y, params_.at(p + "mlp.fc1.weight"),
               params_.at(p + "mlp.fc1.bias"));
    y = maybe_ssf(std::move(y), p + "ssf.fc1");
    y = gelu(y);
    y = add(matmul(y, effective_weight(p + "mlp.fc2.weight", l,
                                       TtcPosition::after_mlp)),
            params_.at(p + "mlp.fc2.bias"));
    y = maybe_ssf(std::move(y), p + "ssf.fc2");
    tokens = add(tokens, y);
    if (adapter_) {
      const std::string ap = p + "adapter.";
      Tensor hmid = matmul(tokens, params_.at(ap + "w_down"));
      hmid = adapter_->activation == Activation::relu ? relu(hmid)
                                                      : gelu(hmid);
      tokens = add(tokens, matmul(hmid, params_.at(ap + "w_up")));
    }
    tokens = apply_ttc(std::move(tokens), l, TtcPosition::after_mlp);
    if (opts.want_trace) result.trace[l].after_mlp = tokens.detach();
  }

  tokens = layernorm(tokens, params_.at("final.norm.gamma"),
                     params_.at("final.norm.beta"), spec_.layernorm_eps);
  tokens = maybe_ssf(std::move(tokens), "final.ssf");
  result.cls = select_axis1(tokens, 0);
  result.logits = linear(result.cls, params_.at("head.weight"),
                         params_.at("head.bias"));
  if (!result.logits.all_finite())
    throw NumericError("forward: non-finite logits");
  return result;
}

TransformerModel TransformerModel::clone() const {
  TransformerModel copy(spec_, SplitRng(0));
  copy.adapter_ = adapter_;
  copy.prompts_ = prompts_;
  copy.ssf_ = ssf_;
  copy.ttc_ = ttc_;
  copy.order_ = order_;
  copy.params_.clear();
  for (const auto& name : order_) {
    Tensor c = params_.at(name).clone();
    c.set_requires_grad(params_.at(name).requires_grad());
    copy.params_.emplace(name, std::move(c));
  }
  return copy;
}

}  // namespace ttc
