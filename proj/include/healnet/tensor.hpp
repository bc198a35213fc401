#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "healnet/error.hpp"

namespace healnet {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

class Tape;

/// Dense row-major f32 array. Storage is shared and immutable once the tensor
/// is attached to a tape; copies are cheap.
class Tensor {
 public:
  Tensor() : Tensor(Shape{0}, std::vector<float>{}) {}

  Tensor(Shape shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<float>>(std::move(data))) {
    if (healnet::numel(shape_) != data_->size())
      throw DimensionError("tensor data length " + std::to_string(data_->size()) +
                           " does not match shape " + to_string(shape_));
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0f); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0f); }
  static Tensor full(Shape shape, float value) {
    const std::size_t n = healnet::numel(shape);
    return Tensor(std::move(shape), std::vector<float>(n, value));
  }
  static Tensor scalar(float value) { return Tensor(Shape{}, {value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size())
      throw DimensionError("axis " + std::to_string(axis) + " out of range for " + to_string(shape_));
    return shape_[axis];
  }
  std::size_t numel() const noexcept { return data_->size(); }
  bool is_scalar() const noexcept { return data_->size() == 1; }

  std::span<const float> data() const noexcept { return *data_; }
  const std::vector<float>& values() const noexcept { return *data_; }
  float operator[](std::size_t i) const { return (*data_)[i]; }
  float at(std::size_t row, std::size_t col) const { return (*data_)[row * shape_.back() + col]; }
  float item() const {
    if (!is_scalar()) throw ContractError("item() on non-scalar tensor " + to_string(shape_));
    return (*data_)[0];
  }

  /// Mutable view; copies the buffer if shared. Not allowed on tracked tensors.
  std::span<float> mutable_data() {
    if (tracked()) throw ContractError("cannot mutate a tensor recorded on a tape");
    if (data_.use_count() > 1) data_ = std::make_shared<std::vector<float>>(*data_);
    return *data_;
  }

  bool tracked() const noexcept { return tape_ != nullptr; }
  Tape* tape() const noexcept { return tape_; }
  int node() const noexcept { return node_; }

  /// Same values, no tape attachment.
  Tensor detach() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
  }

  bool same_values(const Tensor& other) const {
    return shape_ == other.shape_ && *data_ == *other.data_;
  }

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<std::vector<float>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

struct ParamId {
  std::size_t index = 0;
  friend bool operator==(ParamId a, ParamId b) { return a.index == b.index; }
};

struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
};

/// Owns model parameters; parameters live outside any tape.
class ParameterStore {
 public:
  ParamId add(std::string name, Tensor value, bool trainable = true) {
    if (by_name_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
    ParamId id{params_.size()};
    by_name_.emplace(name, id.index);
    params_.push_back({std::move(name), std::move(value), trainable});
    return id;
  }

  const Parameter& operator[](ParamId id) const { return params_.at(id.index); }
  Parameter& operator[](ParamId id) { return params_.at(id.index); }
  std::size_t size() const noexcept { return params_.size(); }
  ParamId id_at(std::size_t i) const { return ParamId{i}; }

  ParamId find(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw ContractError("unknown parameter '" + name + "'");
    return ParamId{it->second};
  }
  bool contains(const std::string& name) const { return by_name_.count(name) > 0; }

  const std::vector<Parameter>& all() const noexcept { return params_; }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.trainable) n += p.value.numel();
    return n;
  }

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

/// Gradients indexed by parameter; untouched parameters hold zeros.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}
  const Tensor& operator[](ParamId id) const { return grads_.at(id.index); }
  std::size_t size() const noexcept { return grads_.size(); }

 private:
  std::vector<Tensor> grads_;
};

/// Append-only record of one forward pass. Nodes are appended in execution
/// order, so reverse order is a valid reverse topological order.
class Tape {
 public:
  /// Accumulates into the gradient buffers of the inputs.
  using BackwardFn = std::function<void(std::span<const float> grad_out, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Attach an untracked value as a leaf.
  Tensor leaf(const Tensor& value) {
    Tensor t = value.detach();
    attach(t, nullptr);
    return t;
  }

  /// Leaf for a stored parameter; repeated calls return the same node.
  Tensor watch(const ParameterStore& store, ParamId id) {
    if (auto it = param_nodes_.find(id.index); it != param_nodes_.end()) return node_tensor_[it->second];
    Tensor t = leaf(store[id].value);
    param_nodes_.emplace(id.index, t.node_);
    return t;
  }

  /// Record an op output. Tracked inputs must already be on this tape.
  Tensor record(Tensor output, BackwardFn backward) {
    Tensor t = output.detach();
    attach(t, std::move(backward));
    return t;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of a node, zero-initialised on first access.
  /// Returns nullptr for untracked operands (node < 0).
  float* grad_ptr(int node) {
    if (node < 0) return nullptr;
    auto& g = grads_[static_cast<std::size_t>(node)];
    if (g.empty()) g.assign(nodes_[static_cast<std::size_t>(node)].numel, 0.0f);
    return g.data();
  }

  /// Reverse sweep from a scalar loss. Repeatable: buffers are reset first.
  void backward(const Tensor& loss) {
    if (!loss.tracked() || loss.tape_ != this) throw ContractError("backward: loss is not recorded on this tape");
    if (!loss.is_scalar()) throw ContractError("backward: loss must be scalar, got " + to_string(loss.shape()));
    for (auto& g : grads_) g.clear();
    grad_ptr(loss.node_)[0] = 1.0f;
    for (int i = loss.node_; i >= 0; --i) {
      auto& g = grads_[static_cast<std::size_t>(i)];
      if (g.empty() || !nodes_[static_cast<std::size_t>(i)].backward) continue;
      // The callback may grow other buffers but never this one.
      const std::vector<float> grad_out = g;
      nodes_[static_cast<std::size_t>(i)].backward(grad_out, *this);
    }
    swept_ = true;
  }

  /// Gradient w.r.t. a tracked tensor after backward(); zeros if unreached.
  Tensor gradient(const Tensor& t) const {
    if (t.tape_ != this) throw ContractError("gradient: tensor is not recorded on this tape");
    const auto& g = grads_[static_cast<std::size_t>(t.node_)];
    if (g.empty()) return Tensor::zeros(t.shape());
    return Tensor(t.shape(), g);
  }

  /// Gradients for every parameter in the store.
  Gradients parameter_gradients(const ParameterStore& store) const {
    if (!swept_) throw ContractError("parameter_gradients called before backward");
    std::vector<Tensor> out;
    out.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto it = param_nodes_.find(i);
      if (it == param_nodes_.end())
        out.push_back(Tensor::zeros(store[ParamId{i}].value.shape()));
      else
        out.push_back(gradient(node_tensor_[it->second]));
    }
    return Gradients(std::move(out));
  }

 private:
  struct Node {
    std::size_t numel = 0;
    BackwardFn backward;
  };

  void attach(Tensor& t, BackwardFn backward) {
    t.tape_ = this;
    t.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back({t.numel(), std::move(backward)});
    grads_.emplace_back();
    node_tensor_.push_back(t);
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<float>> grads_;
  std::vector<Tensor> node_tensor_;
  std::unordered_map<std::size_t, int> param_nodes_;
  bool swept_ = false;
};

/// The tape shared by the tracked operands, or nullptr if none is tracked.
inline Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->tracked()) continue;
    if (tape && tape != t->tape()) throw ContractError("operands recorded on different tapes");
    tape = t->tape();
  }
  return tape;
}

}  // namespace healnet
