#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dml {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  ShapeError(const std::string& op, const Shape& lhs, const Shape& rhs);
  explicit ShapeError(const std::string& message) : Error(message) {}
};

namespace detail {

// One vertex of the define-by-run tape. backward_fn reads `grad` of the node
// it is attached to and accumulates into the parents' grads.
struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<float>& ensure_grad();
  bool is_leaf() const { return !backward_fn; }
};

}  // namespace detail

/// Dense row-major float32 tensor. Copies share storage (handle semantics);
/// results of operations are fresh values.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const float> data() const;
  // Only leaves may be written in place (parameter updates, data loading).
  std::span<float> mutable_data();
  float item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const float> grad() const;
  void zero_grad();

  /// Reverse-mode sweep from a scalar. Leaf gradients accumulate across
  /// calls until zeroed; intermediate gradients are recomputed each call.
  void backward() const;

  /// Fresh leaf holding a copy of the data, detached from any tape.
  Tensor detach() const;
  bool is_leaf() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

namespace ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);

// (m,k) x (k,n) -> (m,n)
Tensor matmul(const Tensor& a, const Tensor& b);

// Stride 1, zero padding kernel/2. x is (B,C,H,W) or (C,H,W); weight is
// (O,C,k,k) with odd k; bias (O) may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor relu(const Tensor& x);

// Softmax over the channel axis of (B,C,H,W) or (C,H,W).
Tensor softmax_channels(const Tensor& x);
Tensor log_softmax_channels(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// features (B,D,H,W) or (D,H,W), prototypes (K,D) -> (B,K,H,W) or (K,H,W)
// holding ||F_ij - m_k||^2.
Tensor squared_distances(const Tensor& features, const Tensor& prototypes);

// Picks channel labels[b,i,j] from x (B,K,H,W) or (K,H,W); pixels whose
// label equals `ignore` produce 0 and receive no gradient.
Tensor gather_channels(const Tensor& x, std::span<const std::uint8_t> labels,
                       std::uint8_t ignore);

}  // namespace ops

inline Tensor operator+(const Tensor& a, const Tensor& b) { return ops::add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return ops::sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return ops::mul(a, b); }

}  // namespace dml
