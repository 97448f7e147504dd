#include "ttc/petl.hpp"

#include "ttc/errors.hpp"

namespace ttc {

AdapterParams make_adapter_params(std::size_t dim, std::size_t bottleneck,
                                  Activation act, SplitRng rng) {
  if (bottleneck == 0 || bottleneck >= dim)
    throw ConfigError("adapter bottleneck must be in [1, dim)");
  SplitRng down = rng.split("w_down");
  std::vector<double> wd(dim * bottleneck);
  for (double& v : wd) v = down.next_trunc_normal(0.02);
  AdapterParams p;
  p.w_down = Tensor::from_data({dim, bottleneck}, std::move(wd));
  p.w_up = Tensor::zeros({bottleneck, dim});
  p.activation = act;
  return p;
}

Tensor adapter_forward(const Tensor& x, const AdapterParams& p) {
  Tensor h = matmul(x, p.w_down);
  h = p.activation == Activation::relu ? relu(h) : gelu(h);
  return add(x, matmul(h, p.w_up));
}

Tensor vpt_concat(const Tensor& x, const Tensor& prompts) {
  if (prompts.rank() != 2)
    throw ShapeError("vpt_concat: prompts must be [n,D], got " +
                     shape_str(prompts.shape()));
  if (prompts.dim(0) == 0) return x;
  if (x.rank() == 2) {
    if (x.dim(1) != prompts.dim(1))
      throw ShapeError("vpt_concat: width mismatch " + shape_str(x.shape()) +
                       " vs " + shape_str(prompts.shape()));
    return concat(x, prompts, 0);
  }
  if (x.rank() == 3) {
    if (x.dim(2) != prompts.dim(1))
      throw ShapeError("vpt_concat: width mismatch " + shape_str(x.shape()) +
                       " vs " + shape_str(prompts.shape()));
    return concat(x, repeat_outer(prompts, x.dim(0)), 1);
  }
  throw ShapeError("vpt_concat: tokens must be rank 2 or 3, got " +
                   shape_str(x.shape()));
}

Tensor ssf_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  if (gamma.rank() != 1 || beta.rank() != 1 ||
      gamma.numel() != beta.numel() || x.rank() == 0 ||
      x.shape().back() != gamma.numel())
    throw ShapeError("ssf_forward: feature width " + shape_str(x.shape()) +
                     " vs gamma " + shape_str(gamma.shape()) + ", beta " +
                     shape_str(beta.shape()));
  return add(mul(x, gamma), beta);
}

Method parse_method(std::string_view name) {
  if (name == "linear") return Method::linear;
  if (name == "bias") return Method::bias;
  if (name == "layernorm") return Method::layernorm;
  if (name == "adapter") return Method::adapter;
  if (name == "vpt-shallow") return Method::vpt_shallow;
  if (name == "vpt-deep") return Method::vpt_deep;
  if (name == "ssf") return Method::ssf;
  if (name == "ttc") return Method::ttc;
  if (name == "full") return Method::full;
  throw ConfigError("unknown method '" + std::string(name) + "'");
}

std::string_view method_name(Method m) {
  switch (m) {
    case Method::linear:
      return "linear";
    case Method::bias:
      return "bias";
    case Method::layernorm:
      return "layernorm";
    case Method::adapter:
      return "adapter";
    case Method::vpt_shallow:
      return "vpt-shallow";
    case Method::vpt_deep:
      return "vpt-deep";
    case Method::ssf:
      return "ssf";
    case Method::ttc:
      return "ttc";
    case Method::full:
      return "full";
  }
  return "?";
}

std::vector<std::string> method_trainable_globs(Method m) {
  switch (m) {
    case Method::linear:
      return {"head.*"};
    case Method::bias:
      return {"*.bias", "head.*"};
    case Method::layernorm:
      return {"*.norm*.{gamma,beta}", "head.*"};
    case Method::adapter:
      return {"*.adapter.*", "head.*"};
    case Method::vpt_shallow:
    case Method::vpt_deep:
      return {"prompts.*", "head.*"};
    case Method::ssf:
      return {"*.ssf.*", "head.*"};
    case Method::ttc:
      return {"*.ttc.*", "*.norm*.{gamma,beta}", "head.*"};
    case Method::full:
      return {"*"};
  }
  throw ConfigError("unknown method");
}

}  // namespace ttc
