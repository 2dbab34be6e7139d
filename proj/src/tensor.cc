#include "reflowtts/tensor.h"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "reflowtts/error.h"

namespace rf {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::vector<double>& TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

}  // namespace detail

namespace {

using detail::Node;
using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

thread_local bool g_grad_enabled = true;

void check_finite(const char* op, const std::vector<double>& values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("op '") + op +
                         "' produced a non-finite value");
    }
  }
}

const ImplPtr& need(const Tensor& t, const char* op) {
  if (!t.defined()) {
    throw ValueError(std::string("op '") + op + "' got an undefined tensor");
  }
  return t.impl();
}

using BackwardFn = std::function<void(const TensorImpl& out)>;

Tensor make_output(const char* op, Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs,
                   BackwardFn backward_fn) {
  check_finite(op, data);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool track = false;
  if (g_grad_enabled) {
    for (const Tensor* in : inputs) {
      if (in->defined() && in->requires_grad()) track = true;
    }
  }
  if (track) {
    auto node = std::make_shared<Node>();
    node->op = op;
    for (const Tensor* in : inputs) {
      if (in->defined()) node->inputs.push_back(in->impl());
    }
    node->backward = std::move(backward_fn);
    impl->requires_grad = true;
    impl->grad_fn = std::move(node);
  }
  return Tensor(std::move(impl));
}

bool wants_grad(const ImplPtr& impl) { return impl && impl->requires_grad; }

// ---- broadcasting -------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> strides(rank, 0);
  std::size_t running = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t in_axis = in.size() - 1 - k;
    const std::size_t out_axis = rank - 1 - k;
    strides[out_axis] = in[in_axis] == 1 ? 0 : running;
    running *= in[in_axis];
  }
  return strides;
}

template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = numel(out);
  if (n == 0) return;
  const std::size_t rank = out.size();
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  const std::size_t last = rank - 1;
  const std::size_t inner = out[last];
  const std::size_t sa_last = sa[last], sb_last = sb[last];
  for (std::size_t i = 0; i < n; i += inner) {
    for (std::size_t j = 0; j < inner; ++j) {
      f(i + j, ia + j * sa_last, ib + j * sb_last);
    }
    // advance the odometer on the outer axes
    for (std::size_t d = last; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

Broadcast plan_broadcast(const Shape& a, const Shape& b) {
  Broadcast plan;
  plan.out = broadcast_shape(a, b);
  plan.stride_a = broadcast_strides(a, plan.out);
  plan.stride_b = broadcast_strides(b, plan.out);
  return plan;
}

enum class BinaryKind { kAdd, kSub, kMul };

Tensor binary(const char* op, BinaryKind kind, const Tensor& a,
              const Tensor& b) {
  const ImplPtr& ia = need(a, op);
  const ImplPtr& ib = need(b, op);
  auto apply = [kind](double x, double y) {
    switch (kind) {
      case BinaryKind::kAdd:
        return x + y;
      case BinaryKind::kSub:
        return x - y;
      case BinaryKind::kMul:
        return x * y;
    }
    return 0.0;
  };
  if (ia->shape == ib->shape) {
    const std::size_t n = ia->data.size();
    std::vector<double> out(n);
    const double* pa = ia->data.data();
    const double* pb = ib->data.data();
    switch (kind) {
      case BinaryKind::kAdd:
        for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
        break;
      case BinaryKind::kSub:
        for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i];
        break;
      case BinaryKind::kMul:
        for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i];
        break;
    }
    return make_output(op, ia->shape, std::move(out), {&a, &b},
                       [ia, ib, kind](const TensorImpl& o) {
                         const std::size_t n = o.grad.size();
                         const double* g = o.grad.data();
                         if (wants_grad(ia)) {
                           auto& ga = ia->grad_buffer();
                           if (kind == BinaryKind::kMul) {
                             for (std::size_t i = 0; i < n; ++i)
                               ga[i] += g[i] * ib->data[i];
                           } else {
                             for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                           }
                         }
                         if (wants_grad(ib)) {
                           auto& gb = ib->grad_buffer();
                           if (kind == BinaryKind::kMul) {
                             for (std::size_t i = 0; i < n; ++i)
                               gb[i] += g[i] * ia->data[i];
                           } else if (kind == BinaryKind::kSub) {
                             for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
                           } else {
                             for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
                           }
                         }
                       });
  }
  Broadcast plan;
  try {
    plan = plan_broadcast(ia->shape, ib->shape);
  } catch (const ShapeError&) {
    throw ShapeError(std::string("op '") + op + "': shapes " +
                     shape_str(ia->shape) + " and " + shape_str(ib->shape) +
                     " do not broadcast");
  }
  std::vector<double> out(numel(plan.out));
  for_each_broadcast(plan.out, plan.stride_a, plan.stride_b,
                     [&](std::size_t i, std::size_t ja, std::size_t jb) {
                       out[i] = apply(ia->data[ja], ib->data[jb]);
                     });
  return make_output(
      op, plan.out, std::move(out), {&a, &b},
      [ia, ib, kind, plan](const TensorImpl& o) {
        const auto& g = o.grad;
        std::vector<double>* ga = wants_grad(ia) ? &ia->grad_buffer() : nullptr;
        std::vector<double>* gb = wants_grad(ib) ? &ib->grad_buffer() : nullptr;
        for_each_broadcast(
            plan.out, plan.stride_a, plan.stride_b,
            [&](std::size_t i, std::size_t ja, std::size_t jb) {
              switch (kind) {
                case BinaryKind::kAdd:
                  if (ga) (*ga)[ja] += g[i];
                  if (gb) (*gb)[jb] += g[i];
                  break;
                case BinaryKind::kSub:
                  if (ga) (*ga)[ja] += g[i];
                  if (gb) (*gb)[jb] -= g[i];
                  break;
                case BinaryKind::kMul:
                  if (ga) (*ga)[ja] += g[i] * ib->data[jb];
                  if (gb) (*gb)[jb] += g[i] * ia->data[ja];
                  break;
              }
            });
      });
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
  const ImplPtr& ia = need(a, op);
  std::vector<double> out(ia->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ia->data[i]);
  return make_output(op, ia->shape, std::move(out), {&a},
                     [ia, deriv](const TensorImpl& o) {
                       if (!wants_grad(ia)) return;
                       auto& ga = ia->grad_buffer();
                       for (std::size_t i = 0; i < ga.size(); ++i) {
                         ga[i] += o.grad[i] * deriv(ia->data[i], o.data[i]);
                       }
                     });
}

std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t d = shape.size(); d-- > 1;) {
    strides[d - 1] = strides[d] * shape[d];
  }
  return strides;
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t k = 0; k < rank; ++k) {
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) +
                       " do not broadcast");
    }
    out[rank - 1 - k] = std::max(da, db);
  }
  return out;
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(rf::numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  check_finite("full", impl->data);
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  if (rf::numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " holds " +
                     std::to_string(rf::numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  check_finite("from", values);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return need(*this, "shape")->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return rf::numel(shape()); }

std::span<const double> Tensor::data() const { return need(*this, "data")->data; }

std::span<double> Tensor::mutable_data() {
  return need(*this, "mutable_data")->data;
}

double Tensor::item() const {
  const auto& impl = need(*this, "item");
  if (impl->data.size() != 1) {
    throw ShapeError("item() needs a single element, shape is " +
                     shape_str(impl->shape));
  }
  return impl->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  auto& impl = need(*this, "set_requires_grad");
  if (impl->grad_fn) {
    throw ValueError("requires_grad can only be changed on leaf tensors");
  }
  impl->requires_grad = flag;
  if (!flag) impl->grad.clear();
  return *this;
}

bool Tensor::is_leaf() const {
  return impl_ && !impl_->grad_fn && !impl_->released;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  return need(*this, "grad")->grad;
}

std::span<double> Tensor::mutable_grad() {
  return need(*this, "mutable_grad")->grad_buffer();
}

void Tensor::zero_grad() {
  auto& impl = need(*this, "zero_grad");
  std::fill(impl->grad.begin(), impl->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  const auto& impl = need(*this, "detach");
  auto copy = std::make_shared<TensorImpl>();
  copy->shape = impl->shape;
  copy->data = impl->data;
  return Tensor(std::move(copy));
}

Tensor Tensor::clone() const { return detach(); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

// ---- backward ---------------------------------------------------------------

void backward(const Tensor& loss) {
  const ImplPtr& root = need(loss, "backward");
  if (root->data.size() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " +
                     shape_str(root->shape));
  }
  if (root->released) {
    throw ValueError("graph behind this loss was already released by backward");
  }
  if (!root->grad_fn) {
    throw ValueError("loss is not connected to any tensor requiring grad");
  }

  // Iterative post-order DFS gives a topological order of the op outputs.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const auto* node = impl->grad_fn.get();
    if (node && next < node->inputs.size()) {
      TensorImpl* child = node->inputs[next++].get();
      if (child->grad_fn && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* impl = *it;
    if (impl->grad.empty()) continue;
    impl->grad_fn->backward(*impl);
  }
  for (TensorImpl* impl : order) {
    impl->grad.clear();
    impl->grad.shrink_to_fit();
    impl->grad_fn.reset();
    impl->released = true;
  }
}

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary("add", BinaryKind::kAdd, a, b);
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary("sub", BinaryKind::kSub, a, b);
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary("mul", BinaryKind::kMul, a, b);
}

Tensor scale(const Tensor& a, double s) {
  return unary(
      "scale", a, [s](double x) { return s * x; },
      [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      "add_scalar", a, [s](double x) { return x + s; },
      [](double, double) { return 1.0; });
}

Tensor tanh(const Tensor& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor square(const Tensor& a) {
  return unary(
      "square", a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& a) {
  const ImplPtr& ia = need(a, "sum");
  double total = 0.0;
  for (double v : ia->data) total += v;
  return make_output("sum", {}, {total}, {&a}, [ia](const TensorImpl& o) {
    if (!wants_grad(ia)) return;
    auto& ga = ia->grad_buffer();
    for (double& g : ga) g += o.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const ImplPtr& ia = need(a, "mean");
  if (ia->data.empty()) throw ShapeError("mean of an empty tensor");
  double total = 0.0;
  for (double v : ia->data) total += v;
  const double n = static_cast<double>(ia->data.size());
  return make_output("mean", {}, {total / n}, {&a},
                     [ia, n](const TensorImpl& o) {
                       if (!wants_grad(ia)) return;
                       auto& ga = ia->grad_buffer();
                       const double g = o.grad[0] / n;
                       for (double& x : ga) x += g;
                     });
}

// ---- linear algebra -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const ImplPtr& ia = need(a, "matmul");
  const ImplPtr& ib = need(b, "matmul");
  if (ia->shape.size() != 2 || ib->shape.size() != 2 ||
      ia->shape[1] != ib->shape[0]) {
    throw ShapeError("op 'matmul': shapes " + shape_str(ia->shape) + " and " +
                     shape_str(ib->shape) + " do not conform");
  }
  const auto m = static_cast<Eigen::Index>(ia->shape[0]);
  const auto k = static_cast<Eigen::Index>(ia->shape[1]);
  const auto n = static_cast<Eigen::Index>(ib->shape[1]);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MatMap(out.data(), m, n).noalias() =
      ConstMatMap(ia->data.data(), m, k) * ConstMatMap(ib->data.data(), k, n);
  return make_output(
      "matmul", {ia->shape[0], ib->shape[1]}, std::move(out), {&a, &b},
      [ia, ib, m, k, n](const TensorImpl& o) {
        ConstMatMap g(o.grad.data(), m, n);
        if (wants_grad(ia)) {
          MatMap(ia->grad_buffer().data(), m, k).noalias() +=
              g * ConstMatMap(ib->data.data(), k, n).transpose();
        }
        if (wants_grad(ib)) {
          MatMap(ib->grad_buffer().data(), k, n).noalias() +=
              ConstMatMap(ia->data.data(), m, k).transpose() * g;
        }
      });
}

Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              std::size_t dilation) {
  const ImplPtr& ix = need(x, "conv1d");
  const ImplPtr& iw = need(weight, "conv1d");
  const Shape& xs = ix->shape;
  const Shape& ws = iw->shape;
  if (xs.size() != 3 || ws.size() != 3 || ws[1] != xs[1] || ws[2] % 2 == 0 ||
      dilation == 0) {
    throw ShapeError("op 'conv1d': input " + shape_str(xs) + " and weight " +
                     shape_str(ws) +
                     " do not conform (need [B,Cin,T] x [Cout,Cin,K], K odd)");
  }
  const std::size_t batch = xs[0], cin = xs[1], frames = xs[2];
  const std::size_t cout = ws[0], ksize = ws[2];
  if (bias.defined() && bias.shape() != Shape{cout}) {
    throw ShapeError("op 'conv1d': bias " + shape_str(bias.shape()) +
                     " does not match " + std::to_string(cout) +
                     " output channels");
  }
  const std::ptrdiff_t pad =
      static_cast<std::ptrdiff_t>(dilation * (ksize - 1) / 2);

  // Taps whose offset never lands inside [0, T) contribute nothing.
  std::vector<std::size_t> taps;
  std::vector<std::ptrdiff_t> offsets;
  for (std::size_t k = 0; k < ksize; ++k) {
    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(k * dilation) - pad;
    if (off > -static_cast<std::ptrdiff_t>(frames) &&
        off < static_cast<std::ptrdiff_t>(frames)) {
      taps.push_back(k);
      offsets.push_back(off);
    }
  }
  const std::size_t kv = taps.size();
  const std::size_t rows = cin * kv;
  const std::size_t cols = batch * frames;

  // im2col: col[(i*kv + j), b*T + t] = x[b, i, t + off_j]
  auto col = std::make_shared<std::vector<double>>(rows * cols, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < cin; ++i) {
      const double* src = ix->data.data() + (b * cin + i) * frames;
      for (std::size_t j = 0; j < kv; ++j) {
        double* dst = col->data() + (i * kv + j) * cols + b * frames;
        const std::ptrdiff_t off = offsets[j];
        for (std::size_t t = 0; t < frames; ++t) {
          const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t) + off;
          if (s >= 0 && s < static_cast<std::ptrdiff_t>(frames)) dst[t] = src[s];
        }
      }
    }
  }
  auto wv = std::make_shared<std::vector<double>>(cout * rows);
  for (std::size_t o = 0; o < cout; ++o) {
    for (std::size_t i = 0; i < cin; ++i) {
      for (std::size_t j = 0; j < kv; ++j) {
        (*wv)[o * rows + i * kv + j] = iw->data[(o * cin + i) * ksize + taps[j]];
      }
    }
  }

  const auto ei_cout = static_cast<Eigen::Index>(cout);
  const auto ei_rows = static_cast<Eigen::Index>(rows);
  const auto ei_cols = static_cast<Eigen::Index>(cols);
  RowMatrix y = ConstMatMap(wv->data(), ei_cout, ei_rows) *
                ConstMatMap(col->data(), ei_rows, ei_cols);

  std::vector<double> out(batch * cout * frames);
  const double* pb = bias.defined() ? bias.data().data() : nullptr;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < cout; ++o) {
      const double add = pb ? pb[o] : 0.0;
      const double* src = y.data() + o * cols + b * frames;
      double* dst = out.data() + (b * cout + o) * frames;
      for (std::size_t t = 0; t < frames; ++t) dst[t] = src[t] + add;
    }
  }

  ImplPtr ib = bias.defined() ? bias.impl() : nullptr;
  return make_output(
      "conv1d", {batch, cout, frames}, std::move(out), {&x, &weight, &bias},
      [=](const TensorImpl& o) {
        RowMatrix g(ei_cout, ei_cols);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t oc = 0; oc < cout; ++oc) {
            const double* src = o.grad.data() + (b * cout + oc) * frames;
            double* dst = g.data() + oc * cols + b * frames;
            std::copy(src, src + frames, dst);
          }
        }
        if (wants_grad(ib)) {
          auto& gb = ib->grad_buffer();
          for (std::size_t oc = 0; oc < cout; ++oc) gb[oc] += g.row(oc).sum();
        }
        if (wants_grad(iw)) {
          RowMatrix gw = g * ConstMatMap(col->data(), ei_rows, ei_cols).transpose();
          auto& gwb = iw->grad_buffer();
          for (std::size_t oc = 0; oc < cout; ++oc) {
            for (std::size_t i = 0; i < cin; ++i) {
              for (std::size_t j = 0; j < kv; ++j) {
                gwb[(oc * cin + i) * ksize + taps[j]] +=
                    gw(static_cast<Eigen::Index>(oc),
                       static_cast<Eigen::Index>(i * kv + j));
              }
            }
          }
        }
        if (wants_grad(ix)) {
          RowMatrix gcol =
              ConstMatMap(wv->data(), ei_cout, ei_rows).transpose() * g;
          auto& gx = ix->grad_buffer();
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t i = 0; i < cin; ++i) {
              double* dst = gx.data() + (b * cin + i) * frames;
              for (std::size_t j = 0; j < kv; ++j) {
                const double* src = gcol.data() + (i * kv + j) * cols + b * frames;
                const std::ptrdiff_t off = offsets[j];
                for (std::size_t t = 0; t < frames; ++t) {
                  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t) + off;
                  if (s >= 0 && s < static_cast<std::ptrdiff_t>(frames))
                    dst[s] += src[t];
                }
              }
            }
          }
        }
      });
}

// ---- structural ---------------------------------------------------------------

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ValueError("op 'concat' needs at least one tensor");
  const Shape& first = need(parts[0], "concat")->shape;
  if (axis >= first.size()) {
    throw ShapeError("op 'concat': axis " + std::to_string(axis) +
                     " out of range for " + shape_str(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    const Shape& s = need(p, "concat")->shape;
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) ok = false;
    }
    if (!ok) {
      throw ShapeError("op 'concat': shapes " + shape_str(first) + " and " +
                       shape_str(s) + " differ off the concat axis");
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_block = out_shape[axis] * inner;

  std::vector<double> out(numel(out_shape));
  std::vector<ImplPtr> impls;
  std::vector<std::size_t> starts;
  std::size_t start = 0;
  for (const Tensor& p : parts) {
    const ImplPtr& ip = p.impl();
    const std::size_t block = ip->shape[axis] * inner;
    for (std::size_t r = 0; r < outer; ++r) {
      std::copy_n(ip->data.data() + r * block, block,
                  out.data() + r * out_block + start);
    }
    impls.push_back(ip);
    starts.push_back(start);
    start += block;
  }

  // make_output takes a fixed list; track through a synthetic input set.
  check_finite("concat", out);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = out_shape;
  impl->data = std::move(out);
  bool track = false;
  if (g_grad_enabled) {
    for (const auto& ip : impls) track = track || ip->requires_grad;
  }
  if (track) {
    auto node = std::make_shared<Node>();
    node->op = "concat";
    node->inputs = impls;
    node->backward = [impls, starts, outer, inner, axis,
                 out_block](const TensorImpl& o) {
      for (std::size_t k = 0; k < impls.size(); ++k) {
        const ImplPtr& ip = impls[k];
        if (!ip->requires_grad) continue;
        auto& gp = ip->grad_buffer();
        const std::size_t block = ip->shape[axis] * inner;
        for (std::size_t r = 0; r < outer; ++r) {
          const double* src = o.grad.data() + r * out_block + starts[k];
          double* dst = gp.data() + r * block;
          for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
    };
    impl->requires_grad = true;
    impl->grad_fn = std::move(node);
  }
  return Tensor(std::move(impl));
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t length) {
  const ImplPtr& ia = need(a, "slice");
  const Shape& s = ia->shape;
  if (axis >= s.size() || start + length > s[axis]) {
    throw ShapeError("op 'slice': [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") on axis " +
                     std::to_string(axis) + " of " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  Shape out_shape = s;
  out_shape[axis] = length;
  const std::size_t in_block = s[axis] * inner;
  const std::size_t out_block = length * inner;
  const std::size_t offset = start * inner;
  std::vector<double> out(outer * out_block);
  for (std::size_t r = 0; r < outer; ++r) {
    std::copy_n(ia->data.data() + r * in_block + offset, out_block,
                out.data() + r * out_block);
  }
  return make_output("slice", out_shape, std::move(out), {&a},
                     [=](const TensorImpl& o) {
                       if (!wants_grad(ia)) return;
                       auto& ga = ia->grad_buffer();
                       for (std::size_t r = 0; r < outer; ++r) {
                         const double* src = o.grad.data() + r * out_block;
                         double* dst = ga.data() + r * in_block + offset;
                         for (std::size_t i = 0; i < out_block; ++i)
                           dst[i] += src[i];
                       }
                     });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  const ImplPtr& ia = need(a, "broadcast_to");
  if (broadcast_shape(ia->shape, shape) != shape) {
    throw ShapeError("op 'broadcast_to': " + shape_str(ia->shape) +
                     " cannot expand to " + shape_str(shape));
  }
  auto sa = broadcast_strides(ia->shape, shape);
  std::vector<std::size_t> zero(shape.size(), 0);
  std::vector<double> out(numel(shape));
  for_each_broadcast(shape, sa, zero,
                     [&](std::size_t i, std::size_t ja, std::size_t) {
                       out[i] = ia->data[ja];
                     });
  return make_output("broadcast_to", shape, std::move(out), {&a},
                     [ia, shape, sa, zero](const TensorImpl& o) {
                       if (!wants_grad(ia)) return;
                       auto& ga = ia->grad_buffer();
                       for_each_broadcast(
                           shape, sa, zero,
                           [&](std::size_t i, std::size_t ja, std::size_t) {
                             ga[ja] += o.grad[i];
                           });
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  const ImplPtr& ia = need(a, "reshape");
  if (numel(shape) != ia->data.size()) {
    throw ShapeError("op 'reshape': cannot view " + shape_str(ia->shape) +
                     " as " + shape_str(shape));
  }
  return make_output("reshape", std::move(shape), ia->data, {&a},
                     [ia](const TensorImpl& o) {
                       if (!wants_grad(ia)) return;
                       auto& ga = ia->grad_buffer();
                       for (std::size_t i = 0; i < ga.size(); ++i)
                         ga[i] += o.grad[i];
                     });
}

Tensor permute(const Tensor& a, std::span<const std::size_t> order) {
  const ImplPtr& ia = need(a, "permute");
  const Shape& s = ia->shape;
  std::vector<bool> seen(s.size(), false);
  bool ok = order.size() == s.size();
  for (std::size_t d = 0; ok && d < order.size(); ++d) {
    if (order[d] >= s.size() || seen[order[d]]) ok = false;
    else seen[order[d]] = true;
  }
  if (!ok) {
    throw ShapeError("op 'permute': invalid axis order for " + shape_str(s));
  }
  const auto in_strides = row_major_strides(s);
  Shape out_shape(s.size());
  std::vector<std::size_t> src_strides(s.size());
  for (std::size_t d = 0; d < s.size(); ++d) {
    out_shape[d] = s[order[d]];
    src_strides[d] = in_strides[order[d]];
  }
  std::vector<std::size_t> unit = row_major_strides(out_shape);
  std::vector<double> out(ia->data.size());
  // Reuse the broadcast walker: stride_a = source strides, stride_b unused.
  std::vector<std::size_t> zero(s.size(), 0);
  for_each_broadcast(out_shape, src_strides, zero,
                     [&](std::size_t i, std::size_t j, std::size_t) {
                       out[i] = ia->data[j];
                     });
  return make_output("permute", out_shape, std::move(out), {&a},
                     [ia, out_shape, src_strides, zero](const TensorImpl& o) {
                       if (!wants_grad(ia)) return;
                       auto& ga = ia->grad_buffer();
                       for_each_broadcast(
                           out_shape, src_strides, zero,
                           [&](std::size_t i, std::size_t j, std::size_t) {
                             ga[j] += o.grad[i];
                           });
                     });
}

Tensor permute(const Tensor& a, std::initializer_list<std::size_t> order) {
  return permute(a, std::span<const std::size_t>(order.begin(), order.size()));
}

Tensor index_select(const Tensor& a, std::span<const std::size_t> indices) {
  const ImplPtr& ia = need(a, "index_select");
  const Shape& s = ia->shape;
  if (s.empty()) throw ShapeError("op 'index_select' on a scalar");
  const std::size_t row = ia->data.size() / std::max<std::size_t>(s[0], 1);
  for (std::size_t idx : indices) {
    if (idx >= s[0]) {
      throw ShapeError("op 'index_select': index " + std::to_string(idx) +
                       " out of range for " + shape_str(s));
    }
  }
  Shape out_shape = s;
  out_shape[0] = indices.size();
  std::vector<double> out(indices.size() * row);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(ia->data.data() + indices[r] * row, row, out.data() + r * row);
  }
  std::vector<std::size_t> picks(indices.begin(), indices.end());
  return make_output("index_select", out_shape, std::move(out), {&a},
                     [ia, picks, row](const TensorImpl& o) {
                       if (!wants_grad(ia)) return;
                       auto& ga = ia->grad_buffer();
                       for (std::size_t r = 0; r < picks.size(); ++r) {
                         const double* src = o.grad.data() + r * row;
                         double* dst = ga.data() + picks[r] * row;
                         for (std::size_t i = 0; i < row; ++i) dst[i] += src[i];
                       }
                     });
}

}  // namespace rf
