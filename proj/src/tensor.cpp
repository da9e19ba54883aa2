#include "dml/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace dml {

namespace {

thread_local bool g_grad_enabled = true;

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

struct Dims4 {
  std::size_t batch, channels, height, width;
  std::size_t plane() const { return height * width; }
};

Dims4 as_nchw(const Tensor& t, const char* op) {
  const auto& s = t.shape();
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  throw ShapeError(std::string(op) + ": expected (B,C,H,W) or (C,H,W), got " +
                   shape_string(s));
}

Shape nchw_shape(const Tensor& like, std::size_t channels) {
  const auto& s = like.shape();
  if (s.size() == 4) return {s[0], channels, s[2], s[3]};
  return {channels, s[1], s[2]};
}

void check_finite([[maybe_unused]] const std::vector<float>& values,
                  [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  for (float v : values) {
    if (!std::isfinite(v)) throw Error(std::string(op) + ": produced a non-finite value");
  }
#endif
}

// Wraps an op output. Records it on the tape when any input participates.
Tensor make_result(Shape shape, std::vector<float> values,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(detail::Node&)> backward_fn, const char* op) {
  check_finite(values, op);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  if (g_grad_enabled) {
    bool any = false;
    for (const Tensor* in : inputs) {
      if (in->defined() && in->requires_grad()) any = true;
    }
    if (any) {
      node->requires_grad = true;
      for (const Tensor* in : inputs) {
        if (in->defined()) node->parents.push_back(in->node());
      }
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor::from_node(std::move(node));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.defined() || !b.defined()) throw Error(std::string(op) + ": undefined operand");
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

void im2col(const float* image, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kernel, float* col) {
  const auto pad = static_cast<long>(kernel / 2);
  const auto h = static_cast<long>(height);
  const auto w = static_cast<long>(width);
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    const float* plane = image + c * height * width;
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx, ++row) {
        float* out = col + row * height * width;
        const long dy = static_cast<long>(ky) - pad;
        const long dx = static_cast<long>(kx) - pad;
        for (long y = 0; y < h; ++y) {
          const long iy = y + dy;
          float* out_row = out + y * w;
          if (iy < 0 || iy >= h) {
            std::fill(out_row, out_row + w, 0.0f);
            continue;
          }
          const float* in_row = plane + iy * w;
          for (long x = 0; x < w; ++x) {
            const long ix = x + dx;
            out_row[x] = (ix < 0 || ix >= w) ? 0.0f : in_row[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const float* col, std::size_t channels, std::size_t height, std::size_t width,
                std::size_t kernel, float* image) {
  const auto pad = static_cast<long>(kernel / 2);
  const auto h = static_cast<long>(height);
  const auto w = static_cast<long>(width);
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    float* plane = image + c * height * width;
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx, ++row) {
        const float* in = col + row * height * width;
        const long dy = static_cast<long>(ky) - pad;
        const long dx = static_cast<long>(kx) - pad;
        for (long y = 0; y < h; ++y) {
          const long iy = y + dy;
          if (iy < 0 || iy >= h) continue;
          const float* in_row = in + y * w;
          float* out_row = plane + iy * w;
          for (long x = 0; x < w; ++x) {
            const long ix = x + dx;
            if (ix >= 0 && ix < w) out_row[ix] += in_row[x];
          }
        }
      }
    }
  }
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

ShapeError::ShapeError(const std::string& op, const Shape& lhs, const Shape& rhs)
    : Error(op + ": shape mismatch " + shape_string(lhs) + " vs " + shape_string(rhs)) {}

std::vector<float>& detail::Node::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  return grad;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<float> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_string(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " elements, got " +
                     std::to_string(values.size()));
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::scalar(float value) { return Tensor({1}, {value}); }

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::shape() const {
  if (!node_) throw Error("tensor: undefined");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const float> Tensor::data() const {
  if (!node_) throw Error("tensor: undefined");
  return node_->data;
}

std::span<float> Tensor::mutable_data() {
  if (!node_) throw Error("tensor: undefined");
  if (!node_->is_leaf()) throw Error("tensor: in-place write to a non-leaf tensor");
  return node_->data;
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: expected one element, got " + shape_string(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node_) throw Error("tensor: undefined");
  if (!node_->is_leaf()) throw Error("tensor: requires_grad can only be set on leaves");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const float> Tensor::grad() const {
  if (!has_grad()) throw Error("tensor: gradient not populated");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

bool Tensor::is_leaf() const { return node_ && node_->is_leaf(); }

Tensor Tensor::detach() const { return Tensor(shape(), node_->data, false); }

void Tensor::backward() const {
  if (!node_) throw Error("backward: undefined tensor");
  if (node_->data.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_string(node_->shape));
  }
  if (!node_->requires_grad) throw Error("backward: loss is not on the gradient tape");

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0f);
  }
  node_->ensure_grad()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Operations

namespace ops {

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<float> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  }, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<float> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    const float sign[2] = {1.0f, -1.0f};
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = self.parents[k];
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * self.grad[i];
    }
  }, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<float> out(a.numel());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  }, "mul");
}

Tensor scale(const Tensor& a, float factor) {
  if (!a.defined()) throw Error("scale: undefined operand");
  std::vector<float> out(a.numel());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return make_result(a.shape(), std::move(out), {&a}, [factor](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  }, "scale");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul", a.shape(), b.shape());
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<float> out(m * n);
  MatMap(out.data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), k, n);
  return make_result({m, n}, std::move(out), {&a, &b}, [m, k, n](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    ConstMatMap g(self.grad.data(), m, n);
    if (pa.requires_grad) {
      MatMap(pa.ensure_grad().data(), m, k).noalias() +=
          g * ConstMatMap(pb.data.data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      MatMap(pb.ensure_grad().data(), k, n).noalias() +=
          ConstMatMap(pa.data.data(), m, k).transpose() * g;
    }
  }, "matmul");
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const Dims4 d = as_nchw(x, "conv2d");
  if (weight.rank() != 4 || weight.dim(1) != d.channels || weight.dim(2) != weight.dim(3) ||
      weight.dim(2) % 2 == 0) {
    throw ShapeError("conv2d", x.shape(), weight.shape());
  }
  const std::size_t out_ch = weight.dim(0);
  const std::size_t kernel = weight.dim(2);
  if (bias.defined() && bias.shape() != Shape{out_ch}) {
    throw ShapeError("conv2d bias", weight.shape(), bias.shape());
  }
  const std::size_t patch = d.channels * kernel * kernel;
  const std::size_t hw = d.plane();

  std::vector<float> out(d.batch * out_ch * hw);
  std::vector<float> col(patch * hw);
  ConstMatMap w(weight.data().data(), out_ch, patch);
  for (std::size_t b = 0; b < d.batch; ++b) {
    im2col(x.data().data() + b * d.channels * hw, d.channels, d.height, d.width, kernel, col.data());
    MatMap o(out.data() + b * out_ch * hw, out_ch, hw);
    o.noalias() = w * ConstMatMap(col.data(), patch, hw);
    if (bias.defined()) {
      const auto bv = bias.data();
      for (std::size_t c = 0; c < out_ch; ++c) o.row(c).array() += bv[c];
    }
  }

  return make_result(nchw_shape(x, out_ch), std::move(out), {&x, &weight, &bias},
                     [d, out_ch, kernel, patch, hw](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    detail::Node* pb = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
    std::vector<float> col(patch * hw);
    ConstMatMap w(pw.data.data(), out_ch, patch);
    for (std::size_t b = 0; b < d.batch; ++b) {
      ConstMatMap g(self.grad.data() + b * out_ch * hw, out_ch, hw);
      if (pw.requires_grad) {
        im2col(px.data.data() + b * d.channels * hw, d.channels, d.height, d.width, kernel, col.data());
        MatMap(pw.ensure_grad().data(), out_ch, patch).noalias() +=
            g * ConstMatMap(col.data(), patch, hw).transpose();
      }
      if (pb && pb->requires_grad) {
        auto& gb = pb->ensure_grad();
        for (std::size_t c = 0; c < out_ch; ++c) gb[c] += g.row(c).sum();
      }
      if (px.requires_grad) {
        MatMap(col.data(), patch, hw).noalias() = w.transpose() * g;
        col2im_add(col.data(), d.channels, d.height, d.width, kernel,
                   px.ensure_grad().data() + b * d.channels * hw);
      }
    }
  }, "conv2d");
}

Tensor relu(const Tensor& x) {
  std::vector<float> out(x.numel());
  const auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] > 0.0f ? v[i] : 0.0f;
  return make_result(x.shape(), std::move(out), {&x}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (p.data[i] > 0.0f) g[i] += self.grad[i];
    }
  }, "relu");
}

Tensor softmax_channels(const Tensor& x) {
  const Dims4 d = as_nchw(x, "softmax_channels");
  const std::size_t hw = d.plane();
  const auto v = x.data();
  std::vector<float> out(v.size());
  for (std::size_t b = 0; b < d.batch; ++b) {
    const std::size_t base = b * d.channels * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      float mx = v[base + p];
      for (std::size_t c = 1; c < d.channels; ++c) mx = std::max(mx, v[base + c * hw + p]);
      double total = 0.0;
      for (std::size_t c = 0; c < d.channels; ++c) total += std::exp(double(v[base + c * hw + p]) - mx);
      for (std::size_t c = 0; c < d.channels; ++c) {
        out[base + c * hw + p] = float(std::exp(double(v[base + c * hw + p]) - mx) / total);
      }
    }
  }
  return make_result(x.shape(), std::move(out), {&x}, [d, hw](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t b = 0; b < d.batch; ++b) {
      const std::size_t base = b * d.channels * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        double dot = 0.0;
        for (std::size_t c = 0; c < d.channels; ++c) {
          const auto i = base + c * hw + p;
          dot += double(self.grad[i]) * self.data[i];
        }
        for (std::size_t c = 0; c < d.channels; ++c) {
          const auto i = base + c * hw + p;
          g[i] += float(self.data[i] * (self.grad[i] - dot));
        }
      }
    }
  }, "softmax_channels");
}

Tensor log_softmax_channels(const Tensor& x) {
  const Dims4 d = as_nchw(x, "log_softmax_channels");
  const std::size_t hw = d.plane();
  const auto v = x.data();
  std::vector<float> out(v.size());
  for (std::size_t b = 0; b < d.batch; ++b) {
    const std::size_t base = b * d.channels * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      float mx = v[base + p];
      for (std::size_t c = 1; c < d.channels; ++c) mx = std::max(mx, v[base + c * hw + p]);
      double total = 0.0;
      for (std::size_t c = 0; c < d.channels; ++c) total += std::exp(double(v[base + c * hw + p]) - mx);
      const double log_norm = double(mx) + std::log(total);
      for (std::size_t c = 0; c < d.channels; ++c) {
        out[base + c * hw + p] = float(double(v[base + c * hw + p]) - log_norm);
      }
    }
  }
  return make_result(x.shape(), std::move(out), {&x}, [d, hw](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t b = 0; b < d.batch; ++b) {
      const std::size_t base = b * d.channels * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        double gsum = 0.0;
        for (std::size_t c = 0; c < d.channels; ++c) gsum += self.grad[base + c * hw + p];
        for (std::size_t c = 0; c < d.channels; ++c) {
          const auto i = base + c * hw + p;
          g[i] += float(self.grad[i] - std::exp(double(self.data[i])) * gsum);
        }
      }
    }
  }, "log_softmax_channels");
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (float v : x.data()) total += v;
  return make_result({1}, {float(total)}, {&x}, [](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& gi : g) gi += self.grad[0];
  }, "sum");
}

Tensor mean(const Tensor& x) {
  double total = 0.0;
  for (float v : x.data()) total += v;
  const double n = double(x.numel());
  return make_result({1}, {float(total / n)}, {&x}, [n](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    const float share = float(self.grad[0] / n);
    for (auto& gi : g) gi += share;
  }, "mean");
}

Tensor squared_distances(const Tensor& features, const Tensor& prototypes) {
  const Dims4 d = as_nchw(features, "squared_distances");
  if (prototypes.rank() != 2 || prototypes.dim(1) != d.channels) {
    throw ShapeError("squared_distances", features.shape(), prototypes.shape());
  }
  const std::size_t k_count = prototypes.dim(0);
  const std::size_t hw = d.plane();
  const auto f = features.data();
  const auto m = prototypes.data();
  std::vector<float> out(d.batch * k_count * hw);
  std::vector<double> acc(hw);
  for (std::size_t b = 0; b < d.batch; ++b) {
    const float* fb = f.data() + b * d.channels * hw;
    for (std::size_t k = 0; k < k_count; ++k) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t c = 0; c < d.channels; ++c) {
        const double mc = m[k * d.channels + c];
        const float* plane = fb + c * hw;
        for (std::size_t p = 0; p < hw; ++p) {
          const double diff = plane[p] - mc;
          acc[p] += diff * diff;
        }
      }
      float* o = out.data() + (b * k_count + k) * hw;
      for (std::size_t p = 0; p < hw; ++p) o[p] = float(acc[p]);
    }
  }
  return make_result(nchw_shape(features, k_count), std::move(out), {&features, &prototypes},
                     [d, k_count, hw](detail::Node& self) {
    auto& pf = *self.parents[0];
    auto& pm = *self.parents[1];
    float* gf = pf.requires_grad ? pf.ensure_grad().data() : nullptr;
    float* gm = pm.requires_grad ? pm.ensure_grad().data() : nullptr;
    for (std::size_t b = 0; b < d.batch; ++b) {
      const float* fb = pf.data.data() + b * d.channels * hw;
      for (std::size_t k = 0; k < k_count; ++k) {
        const float* g = self.grad.data() + (b * k_count + k) * hw;
        for (std::size_t c = 0; c < d.channels; ++c) {
          const float mc = pm.data[k * d.channels + c];
          const float* plane = fb + c * hw;
          double proto_acc = 0.0;
          for (std::size_t p = 0; p < hw; ++p) {
            const float term = 2.0f * g[p] * (plane[p] - mc);
            if (gf) gf[b * d.channels * hw + c * hw + p] += term;
            proto_acc -= term;
          }
          if (gm) gm[k * d.channels + c] += float(proto_acc);
        }
      }
    }
  }, "squared_distances");
}

Tensor gather_channels(const Tensor& x, std::span<const std::uint8_t> labels, std::uint8_t ignore) {
  const Dims4 d = as_nchw(x, "gather_channels");
  const std::size_t hw = d.plane();
  if (labels.size() != d.batch * hw) {
    throw ShapeError("gather_channels: " + std::to_string(labels.size()) +
                     " labels for input " + shape_string(x.shape()));
  }
  for (auto l : labels) {
    if (l != ignore && l >= d.channels) {
      throw Error("gather_channels: label " + std::to_string(l) + " outside [0," +
                  std::to_string(d.channels) + ") and not the ignore id " + std::to_string(ignore));
    }
  }
  const auto v = x.data();
  std::vector<float> out(d.batch * hw, 0.0f);
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      const auto l = labels[b * hw + p];
      if (l != ignore) out[b * hw + p] = v[(b * d.channels + l) * hw + p];
    }
  }
  std::vector<std::uint8_t> kept(labels.begin(), labels.end());
  return make_result(nchw_shape(x, 1), std::move(out), {&x},
                     [d, hw, ignore, kept = std::move(kept)](detail::Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t b = 0; b < d.batch; ++b) {
      for (std::size_t p = 0; p < hw; ++p) {
        const auto l = kept[b * hw + p];
        if (l != ignore) g[(b * d.channels + l) * hw + p] += self.grad[b * hw + p];
      }
    }
  }, "gather_channels");
}

}  // namespace ops
}  // namespace dml
