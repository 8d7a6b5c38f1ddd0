#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "aemim/errors.hpp"

namespace aemim {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) {
    if (d < 0) throw DimensionError("negative extent in shape");
    n *= static_cast<size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

template <typename T>
class TapeT;

// Identity of a tensor on a specific tape. Shared between copies of the same
// logical tensor so a parameter used many times in one step registers once.
// The uid guards against a dead tape's address being reused by a new one:
// outputs of a destroyed tape must degrade to constants, never alias.
struct NodeRef {
  const void* tape = nullptr;
  uint64_t tape_uid = 0;
  int id = -1;
};

// Row-major contiguous n-dimensional array. Copies share the underlying
// buffer (value-semantic views); buffers are treated as immutable while a
// tape is recording and may only be mutated between steps.
template <typename T>
struct TensorT {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  bool requires_grad = false;
  bool leaf = false;
  std::shared_ptr<NodeRef> ref;  // tape handle; null when never recorded

  TensorT() = default;

  static TensorT zeros(Shape s) {
    TensorT t;
    size_t n = shape_numel(s);
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<T>>(n, T(0));
    return t;
  }

  static TensorT full(Shape s, T value) {
    TensorT t = zeros(std::move(s));
    std::fill(t.data->begin(), t.data->end(), value);
    return t;
  }

  static TensorT from_values(Shape s, std::vector<T> values) {
    if (shape_numel(s) != values.size())
      throw DimensionError("from_values: " + shape_str(s) + " does not hold " +
                           std::to_string(values.size()) + " values");
    TensorT t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }

  static TensorT scalar(T value) { return from_values({}, {value}); }

  size_t numel() const { return data ? data->size() : 0; }
  int ndim() const { return static_cast<int>(shape.size()); }
  int size(int axis) const { return shape[static_cast<size_t>(axis)]; }

  const T* ptr() const { return data->data(); }
  T* ptr() { return data->data(); }
  T item() const {
    if (numel() != 1) throw ContractViolation("item: tensor is not a scalar");
    return (*data)[0];
  }

  // Deep copy with a fresh buffer; detached from any tape.
  TensorT clone() const {
    TensorT t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<T>>(*data);
    t.requires_grad = requires_grad;
    t.leaf = leaf;
    return t;
  }

  TensorT& set_requires_grad(bool on = true) {
    requires_grad = on;
    leaf = on;
    return *this;
  }
};

template <typename T>
using GradientMapT = std::map<std::string, TensorT<T>>;

// Reverse-mode tape. Nodes are appended in forward order, so topological
// order holds by construction; backward() sweeps the node list once in
// reverse. One tape lives per training step and is discarded afterwards.
template <typename T>
class TapeT {
 public:
  using BackwardFn = std::function<void(const std::vector<T>& gout, TapeT& tape)>;

  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  // RAII activation: ops record onto the innermost active tape.
  class Scope {
   public:
    explicit Scope(TapeT& t) : prev_(current_slot()) { current_slot() = &t; }
    ~Scope() { current_slot() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    TapeT* prev_;
  };

  static TapeT* current() { return current_slot(); }

  int add_node(const char* op, size_t out_elems, BackwardFn back) {
    nodes_.push_back(Node{op, out_elems, std::move(back)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  // Registers a requires_grad leaf (or returns its existing id on this tape).
  // Leaves are keyed by buffer address, so the tensor itself stays immutable
  // and one parameter used in many ops registers a single node.
  int leaf_id(const TensorT<T>& t) {
    if (!t.requires_grad || !t.leaf)
      throw ContractViolation("leaf_id: tensor is not a requires_grad leaf");
    auto it = leaf_ids_.find(t.data.get());
    if (it != leaf_ids_.end()) return it->second;
    int id = add_node("leaf", t.numel(), nullptr);
    leaf_ids_.emplace(t.data.get(), id);
    return id;
  }

  // Node id of a tensor if it participates in this tape, else -1. Leaves are
  // registered on demand; op outputs from other (dead) tapes are constants.
  int tracked_id(const TensorT<T>& t) {
    if (!t.requires_grad) return -1;
    if (t.leaf) return leaf_id(t);
    if (owns(t.ref.get())) return t.ref->id;
    return -1;
  }

  int lookup_id(const TensorT<T>& t) const {
    if (t.leaf) {
      auto it = leaf_ids_.find(t.data.get());
      return it == leaf_ids_.end() ? -1 : it->second;
    }
    if (owns(t.ref.get())) return t.ref->id;
    return -1;
  }

  bool owns(const NodeRef* ref) const {
    return ref && ref->tape == this && ref->tape_uid == uid_;
  }

  void attach(TensorT<T>& out, int id) {
    out.requires_grad = true;
    out.leaf = false;
    out.ref = std::make_shared<NodeRef>();
    out.ref->tape = this;
    out.ref->tape_uid = uid_;
    out.ref->id = id;
  }

  // Lazily allocated gradient buffer for a node, zero-initialized.
  std::vector<T>& grad_buf(int id) {
    auto& g = grads_[static_cast<size_t>(id)];
    if (g.empty() && nodes_[static_cast<size_t>(id)].out_elems > 0)
      g.assign(nodes_[static_cast<size_t>(id)].out_elems, T(0));
    return g;
  }

  // Reverse accumulation from a scalar loss. Each node is visited exactly
  // once, in reverse insertion order, which fixes the reduction order and
  // makes the result bit-deterministic.
  void backward(const TensorT<T>& loss) {
    if (loss.numel() != 1)
      throw ContractViolation("backward: loss must have exactly one element, got shape " +
                              shape_str(loss.shape));
    int root = lookup_id(loss);
    if (root < 0)
      throw ContractViolation("backward: loss does not participate in this tape");
    grads_.assign(nodes_.size(), {});
    grad_buf(root)[0] = T(1);
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      auto& node = nodes_[static_cast<size_t>(i)];
      auto& g = grads_[static_cast<size_t>(i)];
      if (!g.empty() && node.back) node.back(g, *this);
    }
  }

  // Gradient of a participating tensor after backward(); null if the tensor
  // never joined this tape or received no gradient.
  const std::vector<T>* grad(const TensorT<T>& t) const {
    if (!t.requires_grad)
      throw ContractViolation("grad: tensor does not require gradients");
    int id = lookup_id(t);
    if (id < 0) return nullptr;
    const auto& g = grads_[static_cast<size_t>(id)];
    return g.empty() ? nullptr : &g;
  }

  // Gradient as a tensor shaped like t; zeros for non-participating leaves.
  TensorT<T> grad_tensor(const TensorT<T>& t) const {
    TensorT<T> g = TensorT<T>::zeros(t.shape);
    if (const std::vector<T>* raw = grad(t)) std::copy(raw->begin(), raw->end(), g.ptr());
    return g;
  }

  size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    const char* op;
    size_t out_elems;
    BackwardFn back;
  };

  static TapeT*& current_slot() {
    thread_local TapeT* cur = nullptr;
    return cur;
  }

  static uint64_t next_uid() {
    static std::atomic<uint64_t> counter{0};
    return ++counter;
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
  std::map<const void*, int> leaf_ids_;
  uint64_t uid_ = next_uid();
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;
using GradientMap = GradientMapT<float>;

}  // namespace aemim
