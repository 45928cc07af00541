#pragma once

// Minimal tape-based reverse-mode differentiation over dense double tensors.
// Feature maps are laid out channel-major (C×H×W), which doubles as a C×(H·W)
// matrix for 1×1 convolutions and attention.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <new>
#include <string>
#include <vector>

namespace refseg::ad {

// 64-byte aligned storage. Vectorized matrix kernels pick their code path
// from the buffer address, so a fixed alignment keeps results bit-identical
// across runs.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, alignment); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

struct Tensor {
  std::vector<int> shape;
  Buffer data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0);
  Tensor(std::vector<int> s, const std::vector<double>& values);

  std::size_t numel() const { return data.size(); }
  int dim(std::size_t i) const { return shape.at(i); }
  std::size_t rank() const { return shape.size(); }
  // Product of all dimensions after the first.
  int inner() const;
  bool operator==(const Tensor&) const = default;
};

std::size_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const std::vector<int>& shape() const { return value().shape; }
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  // Receives the gradient of the node's output and accumulates into parents
  // through grad_buffer().
  using Backward = std::function<void(const Tensor& grad_out, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Trainable leaf. After backward(), its gradient is added into *grad_sink.
  Var leaf(Tensor value, Tensor* grad_sink);
  Var record(Tensor value, const std::vector<Var>& parents, Backward backward);

  // Gradient accumulator of a recorded value, or nullptr if it does not
  // require a gradient.
  Tensor* grad_buffer(const Var& v);

  // Seeds d(root)/d(root) = 1 for a scalar root and propagates.
  void backward(const Var& root);

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Fingerprint of the on/off pattern of every ReLU recorded so far. Two
  // evaluations with equal patterns lie on the same smooth piece.
  std::uint64_t activation_pattern() const { return pattern_; }
  void mix_pattern(std::uint64_t bits) { pattern_ = (pattern_ ^ bits) * 0x100000001b3ULL; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
    Tensor* sink = nullptr;
  };
  std::deque<Node> nodes_;
  std::uint64_t pattern_ = 0xcbf29ce484222325ULL;
};

// --- operations -----------------------------------------------------------

// x: Cin×H×W, w: Cout×Cin×k×k, b: Cout. Zero padding.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var relu(const Var& x);
Var add(const Var& a, const Var& b);
Var scale(const Var& x, double s);
// x: C×..., v: C elements; adds v[c] to every element of channel c.
Var add_channel_vector(const Var& x, const Var& v);
// Multiplies channel c of x by factors[c] (a constant).
Var scale_channels(const Var& x, const std::vector<double>& factors);
// Concatenation along the first dimension.
Var concat(const std::vector<Var>& parts);
// Rows [begin, end) of the first dimension.
Var slice(const Var& x, int begin, int end);
Var reshape(const Var& x, std::vector<int> shape);
// Bilinear resize of a C×H×W map (half-pixel centers, edge clamped).
Var resize_bilinear(const Var& x, int out_h, int out_w);
// 2-D matrix product.
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& x);
Var softmax_rows(const Var& x);
// C×H×W -> C×1.
Var global_avg_pool(const Var& x);

// Plain (non-recorded) helpers.
Tensor avg_pool(const Tensor& x, int k);
Tensor resize_bilinear(const Tensor& x, int out_h, int out_w);

}  // namespace refseg::ad
