#pragma once

// Dense tensors with a dynamic reverse-mode tape.
//
// A Tensor is a cheap handle to a shared node. Nodes produced by an operation
// remember their parents and a backward closure; calling backward() on a
// scalar walks the recorded graph in reverse topological order. The tape is
// rebuilt on every forward pass, nothing is cached between passes.

#include <algorithm>
#include <deque>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace agmm {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

template <class Real>
struct Node {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
  }
};

// Fingerprint of the non-smooth branches (ReLU side, clamp side) taken on
// this thread while a BranchTrace is alive.
struct BranchState {
  bool active = false;
  std::uint64_t hash = 0;
};

inline BranchState& branch_state() {
  thread_local BranchState s;
  return s;
}

inline bool tracing_branches() { return branch_state().active; }

inline void trace_branch(unsigned side) {
  auto& s = branch_state();
  s.hash = (s.hash ^ side) * 0x100000001B3ull;
}

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables tape recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Records which side of every kink the operations evaluated inside its
/// lifetime fell on. Two evaluations with equal traces lie in the same smooth
/// piece of the computation.
class BranchTrace {
 public:
  BranchTrace() : prev_(detail::branch_state()) { detail::branch_state() = {true, 0xCBF29CE484222325ull}; }
  ~BranchTrace() { detail::branch_state() = prev_; }
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;

  std::uint64_t value() const { return detail::branch_state().hash; }

 private:
  detail::BranchState prev_;
};

template <class Real>
class Tensor {
 public:
  using value_type = Real;
  using NodePtr = std::shared_ptr<detail::Node<Real>>;

  Tensor() = default;

  static Tensor from(Shape shape, std::vector<Real> data) {
    for (auto e : shape)
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    if (numel(shape) != data.size())
      throw ShapeError("shape " + shape_str(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
    auto n = std::make_shared<detail::Node<Real>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return Tensor(std::move(n));
  }
  static Tensor full(Shape shape, Real v) {
    auto count = numel(shape);
    return from(std::move(shape), std::vector<Real>(count, v));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), Real(0)); }
  static Tensor scalar(Real v) { return from({}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }

  std::span<const Real> data() const { return node_->data; }
  Real at(std::size_t i) const { return node_->data.at(i); }
  Real item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
  }

  /// Writable view for leaves only (optimizer updates, fixtures).
  std::span<Real> mutable_data() {
    if (node_->backward) throw std::logic_error("mutable_data() on a non-leaf tensor");
    return node_->data;
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    if (node_->backward) throw std::logic_error("requires_grad is fixed on non-leaf tensors");
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const Real> grad() const { return node_->grad; }
  std::span<Real> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->data.size(), Real(0)); }

  /// Leaf copy of the values, cut off from the tape.
  Tensor detach() const { return from(node_->shape, node_->data); }

  const NodePtr& node() const { return node_; }
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

 private:
  NodePtr node_;
};

namespace detail {

/// Builds an operation result, attaching it to the tape when any parent
/// requires a gradient and recording is enabled.
template <class Real>
Tensor<Real> make_result(Shape shape, std::vector<Real> data,
                         std::vector<Tensor<Real>> parents,
                         std::function<void(Node<Real>&)> backward) {
  auto out = Tensor<Real>::from(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (!needs) return out;
  auto& n = *out.node();
  n.requires_grad = true;
  for (auto& p : parents) n.parents.push_back(p.node());
  n.backward = std::move(backward);
  return out;
}

}  // namespace detail

/// Named collection of trainable tensors with insertion-ordered iteration.
template <class Real>
class ParamSet {
 public:
  using Entry = std::pair<std::string, Tensor<Real>>;

  Tensor<Real>& add(std::string name, Tensor<Real> t) {
    for (const auto& e : entries_)
      if (e.first == name) throw std::invalid_argument("duplicate parameter name: " + name);
    t.set_requires_grad(true);
    entries_.emplace_back(std::move(name), std::move(t));
    return entries_.back().second;
  }

  const Tensor<Real>& get(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.first == name) return e.second;
    throw std::out_of_range("unknown parameter: " + name);
  }
  Tensor<Real>& get(const std::string& name) {
    return const_cast<Tensor<Real>&>(std::as_const(*this).get(name));
  }
  bool contains(const std::string& name) const {
    return std::any_of(entries_.begin(), entries_.end(),
                       [&](const Entry& e) { return e.first == name; });
  }

  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }
  std::size_t size() const { return entries_.size(); }
  std::size_t total_values() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::deque<Entry> entries_;
};

/// Propagates d(loss)/d(node) to every recorded ancestor. Leaf gradients
/// accumulate across calls; interior gradients are recomputed each call.
template <class Real>
void backward(const Tensor<Real>& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ShapeError("backward() needs a scalar loss, got " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  if (!loss.requires_grad()) return;

  using N = detail::Node<Real>;
  std::vector<N*> order;
  std::unordered_set<N*> seen;
  std::vector<std::pair<N*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      N* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (N* n : order) {
    if (n->backward)
      n->grad.assign(n->data.size(), Real(0));
    else
      n->ensure_grad();
  }
  loss.node()->grad[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward) (*it)->backward(**it);
}

/// backward() followed by a check that every parameter has a gradient slot;
/// parameters disconnected from the loss receive zeros.
template <class Real>
ParamSet<Real>& backward(const Tensor<Real>& loss, ParamSet<Real>& params) {
  backward(loss);
  for (auto& [name, t] : params)
    if (!t.has_grad()) t.zero_grad();
  return params;
}

}  // namespace agmm
