#include "ttc/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace ttc {

namespace {

std::atomic<std::uint64_t> g_seq{1};
thread_local bool t_grad_enabled = true;
thread_local bool t_macs_enabled = false;
thread_local std::uint64_t t_macs = 0;

std::shared_ptr<detail::TensorNode> new_node(Shape shape,
                                             std::vector<double> data) {
  auto n = std::make_shared<detail::TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  return n;
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) +
                   " and " + shape_str(b));
}

// Broadcast classification for the elementwise family.
enum class Bcast { same, trailing_vector, scalar };

Bcast classify_broadcast(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return Bcast::same;
  if (shape_numel(b) == 1 && b.size() <= 1) return Bcast::scalar;
  if (b.size() == 1 && !a.empty() && a.back() == b[0])
    return Bcast::trailing_vector;
  shape_fail(op, a, b);
}

// C[M,Q] += A[M,P] * B[P,Q], row-major.
void mm_accum(double* c, const double* a, const double* b, std::size_t m,
              std::size_t p, std::size_t q) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * p;
    double* crow = c + i * q;
    for (std::size_t k = 0; k < p; ++k) {
      double av = arow[k];
      if (av == 0.0) continue;
      const double* brow = b + k * q;
      for (std::size_t j = 0; j < q; ++j) crow[j] += av * brow[j];
    }
  }
}

// dA[M,P] += G[M,Q] * B[P,Q]^T  (dot of g-row with b-row).
void mm_grad_a(double* da, const double* g, const double* b, std::size_t m,
               std::size_t p, std::size_t q) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * q;
    double* darow = da + i * p;
    for (std::size_t k = 0; k < p; ++k) {
      const double* brow = b + k * q;
      double acc = 0.0;
      for (std::size_t j = 0; j < q; ++j) acc += grow[j] * brow[j];
      darow[k] += acc;
    }
  }
}

// dB[P,Q] += A[M,P]^T * G[M,Q].
void mm_grad_b(double* db, const double* a, const double* g, std::size_t m,
               std::size_t p, std::size_t q) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * p;
    const double* grow = g + i * q;
    for (std::size_t k = 0; k < p; ++k) {
      double av = arow[k];
      if (av == 0.0) continue;
      double* dbrow = db + k * q;
      for (std::size_t j = 0; j < q; ++j) dbrow[j] += av * grow[j];
    }
  }
}

std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

namespace macs {

void enable(bool on) { t_macs_enabled = on; }
void reset() { t_macs = 0; }
std::uint64_t count() { return t_macs; }

}  // namespace macs

namespace autograd {

bool enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) {
  t_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

}  // namespace autograd

// ---- Tensor basics --------------------------------------------------------

Tensor::Tensor() : node_(new_node({}, {0.0})) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> d(shape_numel(shape), 0.0);
  Tensor t(new_node(std::move(shape), std::move(d)));
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> d(shape_numel(shape), value);
  Tensor t(new_node(std::move(shape), std::move(d)));
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_numel(shape) != data.size())
    throw ShapeError("from_data: " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  Tensor t(new_node(std::move(shape), std::move(data)));
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value) { return from_data({}, {value}); }

double Tensor::value() const {
  if (numel() != 1)
    throw ShapeError("value(): tensor " + shape_str(shape()) +
                     " is not a scalar");
  return node_->data[0];
}

Tensor& Tensor::set_requires_grad(bool v) {
  node_->requires_grad = v;
  if (!v) node_->grad.clear();
  return *this;
}

std::span<const double> Tensor::grad() const {
  if (node_->grad.empty())
    throw Error("grad(): no gradient; run backward() first");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::clone() const {
  return Tensor(new_node(node_->shape, node_->data));
}

Tensor Tensor::detach() const { return clone(); }

void Tensor::backward() const {
  if (numel() != 1)
    throw ShapeError("backward(): loss must be scalar, got " +
                     shape_str(shape()));
  // Collect the reachable subgraph, then replay in reverse execution order.
  std::vector<detail::TensorNode*> order;
  std::unordered_set<detail::TensorNode*> seen;
  std::vector<detail::TensorNode*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    detail::TensorNode* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents)
      if (seen.insert(p.get()).second) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](const detail::TensorNode* a, const detail::TensorNode* b) {
              return a->seq > b->seq;
            });
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (detail::TensorNode* n : order)
    if (n->backward) n->backward(*n);
}

bool Tensor::all_finite() const {
  for (double v : node_->data)
    if (!std::isfinite(v)) return false;
  return true;
}

std::uint64_t Tensor::bit_hash() const {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (double v : node_->data) {
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, sizeof(bits));
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xFF;
      h *= 0x00000100000001B3ull;
    }
  }
  return h;
}

Tensor make_op(Shape out_shape, std::vector<double> out_data,
               std::vector<Tensor> inputs,
               std::function<void(detail::TensorNode&)> backward) {
  Tensor out(new_node(std::move(out_shape), std::move(out_data)));
  bool track = false;
  if (t_grad_enabled)
    for (const auto& in : inputs)
      if (in.requires_grad()) track = true;
  if (track) {
    out.node_->requires_grad = true;
    out.node_->parents.reserve(inputs.size());
    for (auto& in : inputs) out.node_->parents.push_back(in.node());
    out.node_->backward = std::move(backward);
  }
  return out;
}

// ---- elementwise family ----------------------------------------------------

namespace {

Tensor elementwise_impl(Elementwise kind, const Tensor& a, const Tensor& b) {
  const char* name = kind == Elementwise::add   ? "add"
                     : kind == Elementwise::sub ? "sub"
                                                : "mul";
  Bcast bc = classify_broadcast(name, a.shape(), b.shape());
  const std::size_t n = a.numel();
  const std::size_t d = bc == Bcast::trailing_vector ? b.numel() : 0;
  std::span<const double> av = a.data(), bv = b.data();
  std::vector<double> out(n);
  auto rhs = [&](std::size_t i) -> double {
    switch (bc) {
      case Bcast::same:
        return bv[i];
      case Bcast::trailing_vector:
        return bv[i % d];
      case Bcast::scalar:
        return bv[0];
    }
    return 0.0;
  };
  switch (kind) {
    case Elementwise::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + rhs(i);
      break;
    case Elementwise::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - rhs(i);
      break;
    case Elementwise::mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * rhs(i);
      if (t_macs_enabled) t_macs += n;
      break;
  }
  return make_op(a.shape(), std::move(out), {a, b},
                 [kind, bc, n, d](detail::TensorNode& node) {
                   auto& pa = *node.parents[0];
                   auto& pb = *node.parents[1];
                   const auto& g = node.grad;
                   if (pa.requires_grad) {
                     pa.ensure_grad();
                     if (kind == Elementwise::mul) {
                       for (std::size_t i = 0; i < n; ++i) {
                         double bvi = bc == Bcast::same ? pb.data[i]
                                      : bc == Bcast::trailing_vector
                                          ? pb.data[i % d]
                                          : pb.data[0];
                         pa.grad[i] += g[i] * bvi;
                       }
                     } else {
                       for (std::size_t i = 0; i < n; ++i) pa.grad[i] += g[i];
                     }
                   }
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     double sign = kind == Elementwise::sub ? -1.0 : 1.0;
                     for (std::size_t i = 0; i < n; ++i) {
                       double term = kind == Elementwise::mul
                                         ? g[i] * pa.data[i]
                                         : sign * g[i];
                       std::size_t j = bc == Bcast::same ? i
                                       : bc == Bcast::trailing_vector ? i % d
                                                                      : 0;
                       pb.grad[j] += term;
                     }
                   }
                 });
}

}  // namespace

Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b) {
  return elementwise_impl(kind, a, b);
}

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_impl(Elementwise::add, a, b);
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_impl(Elementwise::sub, a, b);
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_impl(Elementwise::mul, a, b);
}
Tensor add_scalar(const Tensor& a, double s) {
  return add(a, Tensor::scalar(s));
}
Tensor mul_scalar(const Tensor& a, double s) {
  return mul(a, Tensor::scalar(s));
}

// ---- matmul ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) shape_fail("matmul", as, bs);
  const std::size_t m = as[as.size() - 2], p = as.back();
  const std::size_t bp = bs[bs.size() - 2], q = bs.back();
  if (p != bp) shape_fail("matmul", as, bs);
  const bool shared_b = bs.size() == 2 && as.size() > 2;
  if (!shared_b && as.size() != bs.size()) shape_fail("matmul", as, bs);
  if (!shared_b)
    for (std::size_t i = 0; i + 2 < as.size(); ++i)
      if (as[i] != bs[i]) shape_fail("matmul", as, bs);

  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < as.size(); ++i) batch *= as[i];
  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(q);

  std::vector<double> out(batch * m * q, 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::size_t n = 0; n < batch; ++n)
    mm_accum(out.data() + n * m * q, ad + n * m * p,
             shared_b ? bd : bd + n * p * q, m, p, q);
  if (t_macs_enabled) t_macs += batch * m * p * q;

  return make_op(
      std::move(out_shape), std::move(out), {a, b},
      [m, p, q, batch, shared_b](detail::TensorNode& node) {
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        const double* g = node.grad.data();
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (std::size_t n = 0; n < batch; ++n)
            mm_grad_a(pa.grad.data() + n * m * p, g + n * m * q,
                      shared_b ? pb.data.data() : pb.data.data() + n * p * q,
                      m, p, q);
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (std::size_t n = 0; n < batch; ++n)
            mm_grad_b(shared_b ? pb.grad.data() : pb.grad.data() + n * p * q,
                      pa.data.data() + n * m * p, g + n * m * q, m, p, q);
        }
      });
}

// ---- activations -----------------------------------------------------------

Tensor relu(const Tensor& x) {
  const std::size_t n = x.numel();
  std::vector<double> out(n);
  auto xv = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return make_op(x.shape(), std::move(out), {x},
                 [n](detail::TensorNode& node) {
                   auto& p = *node.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (std::size_t i = 0; i < n; ++i)
                     if (p.data[i] > 0.0) p.grad[i] += node.grad[i];
                 });
}

Tensor gelu(const Tensor& x) {
  const std::size_t n = x.numel();
  std::vector<double> out(n);
  auto xv = x.data();
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (std::size_t i = 0; i < n; ++i)
    out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * inv_sqrt2));
  return make_op(
      x.shape(), std::move(out), {x}, [n](detail::TensorNode& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        constexpr double inv_sqrt2 = 0.7071067811865475244;
        const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < n; ++i) {
          double v = p.data[i];
          double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
          double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
          p.grad[i] += node.grad[i] * (cdf + v * pdf);
        }
      });
}

Tensor softmax_lastdim(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("softmax: scalar input");
  const std::size_t d = s.back();
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * d;
    double* o = out.data() + r * d;
    double mx = in[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < d; ++j) o[j] /= z;
  }
  return make_op(s, std::move(out), {x},
                 [d, rows](detail::TensorNode& node) {
                   auto& p = *node.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double* y = node.data.data() + r * d;
                     const double* g = node.grad.data() + r * d;
                     double dot = 0.0;
                     for (std::size_t j = 0; j < d; ++j) dot += g[j] * y[j];
                     double* pg = p.grad.data() + r * d;
                     for (std::size_t j = 0; j < d; ++j)
                       pg[j] += y[j] * (g[j] - dot);
                   }
                 });
}

Tensor softmax_crossentropy(const Tensor& logits,
                            const std::vector<int>& labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2)
    throw ShapeError("softmax_crossentropy: logits must be [B,C], got " +
                     shape_str(s));
  const std::size_t b = s[0], c = s[1];
  if (labels.size() != b)
    throw ShapeError("softmax_crossentropy: " + std::to_string(b) +
                     " rows but " + std::to_string(labels.size()) +
                     " labels");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw ShapeError("softmax_crossentropy: label " + std::to_string(y) +
                       " out of range [0," + std::to_string(c) + ")");
  auto lv = logits.data();
  std::vector<double> probs(b * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = lv.data() + i * c;
    double* prow = probs.data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      prow[j] = std::exp(row[j] - mx);
      z += prow[j];
    }
    for (std::size_t j = 0; j < c; ++j) prow[j] /= z;
    loss -= std::log(prow[static_cast<std::size_t>(labels[i])]);
  }
  loss /= static_cast<double>(b);
  return make_op({}, {loss}, {logits},
                 [b, c, probs = std::move(probs),
                  labels](detail::TensorNode& node) {
                   auto& p = *node.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   const double g = node.grad[0] / static_cast<double>(b);
                   for (std::size_t i = 0; i < b; ++i)
                     for (std::size_t j = 0; j < c; ++j) {
                       double delta =
                           j == static_cast<std::size_t>(labels[i]) ? 1.0
                                                                    : 0.0;
                       p.grad[i * c + j] += g * (probs[i * c + j] - delta);
                     }
                 });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const std::size_t n = x.numel();
  return make_op({}, {acc}, {x}, [n](detail::TensorNode& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double g = node.grad[0];
    for (std::size_t i = 0; i < n; ++i) p.grad[i] += g;
  });
}

// ---- data movement ---------------------------------------------------------

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel())
    shape_fail("reshape", x.shape(), new_shape);
  std::vector<double> out(x.data().begin(), x.data().end());
  const std::size_t n = x.numel();
  return make_op(std::move(new_shape), std::move(out), {x},
                 [n](detail::TensorNode& node) {
                   auto& p = *node.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (std::size_t i = 0; i < n; ++i)
                     p.grad[i] += node.grad[i];
                 });
}

namespace {

// Forward index map for permute: out[j] = in[map[j]].
std::vector<std::size_t> permute_map(const Shape& in_shape,
                                     const std::vector<std::size_t>& axes) {
  const std::size_t r = in_shape.size();
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];
  auto in_strides = row_major_strides(in_shape);
  auto out_strides = row_major_strides(out_shape);
  std::vector<std::size_t> map(shape_numel(in_shape));
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t j = 0; j < map.size(); ++j) {
    std::size_t rem = j, src = 0;
    for (std::size_t i = 0; i < r; ++i) {
      std::size_t coord = rem / out_strides[i];
      rem %= out_strides[i];
      src += coord * in_strides[axes[i]];
    }
    map[j] = src;
  }
  return map;
}

Tensor gather_by_map(const Tensor& x, Shape out_shape,
                     std::vector<std::size_t> map, const char* op) {
  (void)op;
  auto xv = x.data();
  std::vector<double> out(map.size());
  for (std::size_t j = 0; j < map.size(); ++j) out[j] = xv[map[j]];
  return make_op(std::move(out_shape), std::move(out), {x},
                 [map = std::move(map)](detail::TensorNode& node) {
                   auto& p = *node.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (std::size_t j = 0; j < map.size(); ++j)
                     p.grad[map[j]] += node.grad[j];
                 });
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const Shape& s = x.shape();
  if (axes.size() != s.size())
    throw ShapeError("permute: axes rank " + std::to_string(axes.size()) +
                     " for tensor " + shape_str(s));
  std::vector<bool> seen(s.size(), false);
  for (auto a : axes) {
    if (a >= s.size() || seen[a])
      throw ShapeError("permute: invalid axis list for " + shape_str(s));
    seen[a] = true;
  }
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out_shape[i] = s[axes[i]];
  return gather_by_map(x, std::move(out_shape), permute_map(s, axes),
                       "permute");
}

Tensor transpose_last2(const Tensor& x) {
  const std::size_t r = x.rank();
  if (r < 2) throw ShapeError("transpose_last2: rank < 2");
  std::vector<std::size_t> axes(r);
  for (std::size_t i = 0; i < r; ++i) axes[i] = i;
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(x, axes);
}

Tensor slice_lastdim(const Tensor& x, std::size_t offset, std::size_t len) {
  const Shape& s = x.shape();
  if (s.empty() || offset + len > s.back())
    throw ShapeError("slice_lastdim: [" + std::to_string(offset) + "," +
                     std::to_string(offset + len) + ") out of " +
                     shape_str(s));
  const std::size_t d = s.back();
  const std::size_t rows = x.numel() / d;
  Shape out_shape = s;
  out_shape.back() = len;
  std::vector<std::size_t> map(rows * len);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < len; ++j)
      map[r * len + j] = r * d + offset + j;
  return gather_by_map(x, std::move(out_shape), std::move(map),
                       "slice_lastdim");
}

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != bs.size() || axis >= as.size())
    shape_fail("concat", as, bs);
  for (std::size_t i = 0; i < as.size(); ++i)
    if (i != axis && as[i] != bs[i]) shape_fail("concat", as, bs);
  Shape out_shape = as;
  out_shape[axis] += bs[axis];

  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= as[i];
  for (std::size_t i = axis + 1; i < as.size(); ++i) inner *= as[i];
  const std::size_t wa = as[axis] * inner, wb = bs[axis] * inner;

  std::vector<double> out(shape_numel(out_shape));
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(av.data() + o * wa, wa, out.data() + o * (wa + wb));
    std::copy_n(bv.data() + o * wb, wb, out.data() + o * (wa + wb) + wa);
  }
  return make_op(std::move(out_shape), std::move(out), {a, b},
                 [outer, wa, wb](detail::TensorNode& node) {
                   auto& pa = *node.parents[0];
                   auto& pb = *node.parents[1];
                   const double* g = node.grad.data();
                   if (pa.requires_grad) {
                     pa.ensure_grad();
                     for (std::size_t o = 0; o < outer; ++o)
                       for (std::size_t i = 0; i < wa; ++i)
                         pa.grad[o * wa + i] += g[o * (wa + wb) + i];
                   }
                   if (pb.requires_grad) {
                     pb.ensure_grad();
                     for (std::size_t o = 0; o < outer; ++o)
                       for (std::size_t i = 0; i < wb; ++i)
                         pb.grad[o * wb + i] += g[o * (wa + wb) + wa + i];
                   }
                 });
}

Tensor repeat_outer(const Tensor& x, std::size_t count) {
  const std::size_t n = x.numel();
  Shape out_shape;
  out_shape.push_back(count);
  for (auto d : x.shape()) out_shape.push_back(d);
  std::vector<double> out(count * n);
  auto xv = x.data();
  for (std::size_t r = 0; r < count; ++r)
    std::copy_n(xv.data(), n, out.data() + r * n);
  return make_op(std::move(out_shape), std::move(out), {x},
                 [count, n](detail::TensorNode& node) {
                   auto& p = *node.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   for (std::size_t r = 0; r < count; ++r)
                     for (std::size_t i = 0; i < n; ++i)
                       p.grad[i] += node.grad[r * n + i];
                 });
}

Tensor select_axis1(const Tensor& x, std::size_t t) {
  const Shape& s = x.shape();
  if (s.size() != 3 || t >= s[1])
    throw ShapeError("select_axis1: index " + std::to_string(t) + " in " +
                     shape_str(s));
  const std::size_t b = s[0], tok = s[1], d = s[2];
  std::vector<std::size_t> map(b * d);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j)
      map[i * d + j] = (i * tok + t) * d + j;
  return gather_by_map(x, {b, d}, std::move(map), "select_axis1");
}

Tensor slice_axis1(const Tensor& x, std::size_t offset, std::size_t len) {
  const Shape& s = x.shape();
  if (s.size() != 3 || offset + len > s[1])
    throw ShapeError("slice_axis1: [" + std::to_string(offset) + "," +
                     std::to_string(offset + len) + ") out of " +
                     shape_str(s));
  const std::size_t b = s[0], tok = s[1], d = s[2];
  std::vector<std::size_t> map(b * len * d);
  std::size_t j = 0;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t k = 0; k < d; ++k)
        map[j++] = (i * tok + offset + t) * d + k;
  return gather_by_map(x, {b, len, d}, std::move(map), "slice_axis1");
}

Tensor gather_lastdim(const Tensor& x, const std::vector<std::size_t>& idx) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("gather_lastdim: scalar input");
  const std::size_t d = s.back();
  for (auto c : idx)
    if (c >= d)
      throw ShapeError("gather_lastdim: channel " + std::to_string(c) +
                       " out of " + std::to_string(d));
  const std::size_t rows = x.numel() / d;
  const std::size_t k = idx.size();
  Shape out_shape = s;
  out_shape.back() = k;
  std::vector<std::size_t> map(rows * k);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < k; ++j) map[r * k + j] = r * d + idx[j];
  return gather_by_map(x, std::move(out_shape), std::move(map),
                       "gather_lastdim");
}

Tensor scatter_replace_lastdim(const Tensor& x, const Tensor& y,
                               const std::vector<std::size_t>& idx) {
  const Shape& xs = x.shape();
  const Shape& ys = y.shape();
  if (xs.empty() || ys.empty() || ys.back() != idx.size())
    shape_fail("scatter_replace_lastdim", xs, ys);
  const std::size_t d = xs.back(), k = idx.size();
  if (x.numel() / d != y.numel() / k)
    shape_fail("scatter_replace_lastdim", xs, ys);
  for (auto c : idx)
    if (c >= d)
      throw ShapeError("scatter_replace_lastdim: channel " +
                       std::to_string(c) + " out of " + std::to_string(d));
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.data().begin(), x.data().end());
  auto yv = y.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < k; ++j)
      out[r * d + idx[j]] = yv[r * k + j];
  std::vector<bool> replaced(d, false);
  for (auto c : idx) replaced[c] = true;
  return make_op(
      xs, std::move(out), {x, y},
      [rows, d, k, idx, replaced](detail::TensorNode& node) {
        auto& px = *node.parents[0];
        auto& py = *node.parents[1];
        const double* g = node.grad.data();
        if (px.requires_grad) {
          px.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c)
              if (!replaced[c]) px.grad[r * d + c] += g[r * d + c];
        }
        if (py.requires_grad) {
          py.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < k; ++j)
              py.grad[r * k + j] += g[r * d + idx[j]];
        }
      });
}

Tensor patchify(const Tensor& images, std::size_t patch) {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != 3)
    throw ShapeError("patchify: expected [B,3,H,W], got " + shape_str(s));
  const std::size_t b = s[0], h = s[2], w = s[3];
  if (patch == 0 || h % patch != 0 || w % patch != 0)
    throw ShapeError("patchify: image " + shape_str(s) +
                     " not divisible by patch " + std::to_string(patch));
  const std::size_t gy = h / patch, gx = w / patch, n = gy * gx;
  const std::size_t pp = 3 * patch * patch;
  std::vector<std::size_t> map(b * n * pp);
  std::size_t j = 0;
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t py = 0; py < gy; ++py)
      for (std::size_t px = 0; px < gx; ++px)
        for (std::size_t c = 0; c < 3; ++c)
          for (std::size_t iy = 0; iy < patch; ++iy)
            for (std::size_t ix = 0; ix < patch; ++ix)
              map[j++] = ((bi * 3 + c) * h + py * patch + iy) * w +
                         px * patch + ix;
  return gather_by_map(images, {b, n, pp}, std::move(map), "patchify");
}

// ---- layernorm ------------------------------------------------------------

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("layernorm: scalar input");
  const std::size_t d = s.back();
  if (gamma.numel() != d || beta.numel() != d)
    throw ShapeError("layernorm: feature width " + std::to_string(d) +
                     " but gamma " + shape_str(gamma.shape()) + ", beta " +
                     shape_str(beta.shape()));
  if (eps < 0.0) throw ConfigError("layernorm: eps must be >= 0");
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double c = in[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);  // population variance
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      double xh = (in[j] - mean) * is;
      xhat[r * d + j] = xh;
      out[r * d + j] = xh * gv[j] + bv[j];
    }
  }
  return make_op(
      s, std::move(out), {x, gamma, beta},
      [rows, d, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](detail::TensorNode& node) {
        auto& px = *node.parents[0];
        auto& pg = *node.parents[1];
        auto& pb = *node.parents[2];
        const double* g = node.grad.data();
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j)
              pb.grad[j] += g[r * d + j];
        }
        if (pg.requires_grad) {
          pg.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j)
              pg.grad[j] += g[r * d + j] * xhat[r * d + j];
        }
        if (px.requires_grad) {
          px.ensure_grad();
          const double* gamma = pg.data.data();
          for (std::size_t r = 0; r < rows; ++r) {
            const double* grow = g + r * d;
            const double* xh = xhat.data() + r * d;
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              double dxh = grow[j] * gamma[j];
              sum_dxhat += dxh;
              sum_dxhat_xhat += dxh * xh[j];
            }
            const double inv_d = 1.0 / static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              double dxh = grow[j] * gamma[j];
              px.grad[r * d + j] += inv_std[r] * (dxh - inv_d * sum_dxhat -
                                                  xh[j] * inv_d *
                                                      sum_dxhat_xhat);
            }
          }
        }
      });
}

}  // namespace ttc
