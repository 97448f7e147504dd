#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ttc/errors.hpp"

namespace ttc {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {

/// One node of the define-by-run tape. `seq` records execution order;
/// backward visits reachable nodes in exact reverse `seq` order.
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized lazily, same length as data
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;

  std::size_t numel() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

namespace macs {

/// Thread-local multiply-accumulate counter for empirical FLOP accounting.
/// Counts matmul (M*P*Q per matrix pair) and elementwise multiplies.
void enable(bool on);
void reset();
std::uint64_t count();

}  // namespace macs

namespace autograd {

/// True when operations record backward closures (thread-local).
bool enabled();

/// Suspends tape recording for its scope (finite-difference probes, eval).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace autograd

/// Dense row-major tensor of 64-bit floats; a cheap shared handle onto a
/// tape node. Ops executed while any input requires grad append to the
/// implicit tape; `backward()` on a scalar then fills `grad` on every
/// requires-grad tensor it reaches.
class Tensor {
 public:
  Tensor();  // empty scalar-shaped placeholder

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->numel(); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double value() const;  // scalar convenience
  double at(std::size_t flat_index) const { return node_->data.at(flat_index); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Deep copy detached from any graph.
  Tensor clone() const;
  /// Same data values, fresh leaf node (no parents).
  Tensor detach() const;

  /// Reverse pass from a scalar. Visits reachable tape nodes in exact
  /// reverse execution order and accumulates into each requires-grad leaf.
  void backward() const;

  bool all_finite() const;
  /// FNV-1a hash over the raw f64 bit patterns (freezing audits).
  std::uint64_t bit_hash() const;

  std::shared_ptr<detail::TensorNode> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node)
      : node_(std::move(node)) {}
  friend Tensor make_op(Shape, std::vector<double>, std::vector<Tensor>,
                        std::function<void(detail::TensorNode&)>);

  std::shared_ptr<detail::TensorNode> node_;
};

/// Create an op result. If recording is enabled and any input requires
/// grad, the node keeps its parents and backward closure; otherwise it is
/// a plain value. Fused ops elsewhere in the toolkit build on this.
Tensor make_op(Shape out_shape, std::vector<double> out_data,
               std::vector<Tensor> inputs,
               std::function<void(detail::TensorNode&)> backward);

// ---- arithmetic ----------------------------------------------------------

enum class Elementwise { add, sub, mul };

/// Pointwise op. `b` may share `a`'s shape, be a trailing vector whose
/// length equals `a`'s last extent, or be a scalar; gradients sum over the
/// broadcast axes.
Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

/// Matrix product over the last two axes. `b` is either rank-2 (shared
/// across `a`'s leading axes, gradient summed over them) or has leading
/// axes identical to `a`'s.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact erf form

/// Softmax over the last axis (max-subtraction stabilized).
Tensor softmax_lastdim(const Tensor& x);

/// Mean over the batch of -log softmax(logits)[label]; logits are [B, C].
Tensor softmax_crossentropy(const Tensor& logits,
                            const std::vector<int>& labels);

/// Sum of all elements, as a scalar tensor.
Tensor sum(const Tensor& x);

// ---- data movement -------------------------------------------------------

Tensor reshape(const Tensor& x, Shape new_shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor transpose_last2(const Tensor& x);
/// Slice `[offset, offset+len)` of the last axis.
Tensor slice_lastdim(const Tensor& x, std::size_t offset, std::size_t len);
/// Concatenate along `axis`; all other extents must match.
Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);
/// Replicate `x` across a new leading axis of extent `count`; gradient
/// sums over the replicas.
Tensor repeat_outer(const Tensor& x, std::size_t count);
/// Select index `t` of axis 1 from a rank-3 tensor: [B,T,D] -> [B,D].
Tensor select_axis1(const Tensor& x, std::size_t t);
/// Slice `[offset, offset+len)` of axis 1 from a rank-3 tensor.
Tensor slice_axis1(const Tensor& x, std::size_t offset, std::size_t len);
/// Gather the listed channels of the last axis: [..,D] -> [..,K].
Tensor gather_lastdim(const Tensor& x, const std::vector<std::size_t>& idx);
/// Copy of `x` with the listed last-axis channels replaced by `y`'s
/// columns; untouched channels are bit-identical to `x`.
Tensor scatter_replace_lastdim(const Tensor& x, const Tensor& y,
                               const std::vector<std::size_t>& idx);
/// Rearrange [B,3,H,W] images into [B, N, 3*P*P] patch rows (row-major
/// patch grid; channel-major within a patch).
Tensor patchify(const Tensor& images, std::size_t patch);

/// Per-row LayerNorm over the last axis with learnable scale and shift:
/// (x - mean) / sqrt(population_var + eps) * gamma + beta.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps);

}  // namespace ttc
