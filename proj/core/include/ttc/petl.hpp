#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "ttc/model.hpp"

namespace ttc {

/// Residual bottleneck adapter. Weights are stored input-major, so the
/// transform is x + act(x * w_down) * w_up; `w_up` starts at zero, making
/// the adapter an exact identity at init.
struct AdapterParams {
  Tensor w_down;  // [D, D']
  Tensor w_up;    // [D', D], zero-initialized
  Activation activation = Activation::gelu;
};

AdapterParams make_adapter_params(std::size_t dim, std::size_t bottleneck,
                                  Activation act, SplitRng rng);
Tensor adapter_forward(const Tensor& x, const AdapterParams& p);

/// Learnable prompt rows appended to the token sequence. `x` is either a
/// single sequence [(N+1),D] or a batch [B,(N+1),D].
Tensor vpt_concat(const Tensor& x, const Tensor& prompts);

/// Scale-and-shift feature modulation: gamma * x + beta over the trailing
/// feature axis.
Tensor ssf_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta);

/// Comparison arms exposed on the CLI.
enum class Method {
  linear,
  bias,
  layernorm,
  adapter,
  vpt_shallow,
  vpt_deep,
  ssf,
  ttc,
  full,
};

Method parse_method(std::string_view name);
std::string_view method_name(Method m);

/// Name globs describing the trainable set of each method. The head is
/// always trainable.
std::vector<std::string> method_trainable_globs(Method m);

}  // namespace ttc
