#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "caps/numerics/array.hpp"

namespace caps {

enum class OpKind : std::uint8_t {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kExp,
  kLog,
  kSoftplus,
  kNeg,
  kRecip,
  kMaxPair,
  kScale,
  kAddScalar,
  kSquare,
  kGelu,
  kMatmul,
  kCumsum,
  kCummax,
  kSum,
  kMean,
  kReshape,
  kConcat,
  kSlice,
  kRmsNorm,
  kRotate,
  kTokenize,
  kDecode,
  kCapsLinear,
  kCapsQuadratic,
};

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Append-only record of a computation. Backward visits nodes in reverse append
/// order, which is a valid reverse topological order since inputs always precede
/// their consumers. Confined to one thread.
class Tape {
 public:
  /// Adds the contribution of one node to its inputs' gradients. Entries of
  /// `grad_in` are null for inputs that do not require a gradient.
  using BackwardFn = std::function<void(const Array& grad_out, std::span<Array* const> grad_in)>;

  Var leaf(Array value) { return push(OpKind::kLeaf, {}, std::move(value), nullptr, true); }
  Var constant(Array value) { return push(OpKind::kConstant, {}, std::move(value), nullptr, false); }

  Var record(OpKind kind, std::initializer_list<Var> inputs, Array value, BackwardFn fn) {
    std::vector<std::uint32_t> ids;
    ids.reserve(inputs.size());
    bool needs = false;
    for (const Var& v : inputs) {
      if (v.tape != this) throw ConfigError("operand recorded on a different tape");
      ids.push_back(v.id);
      needs = needs || nodes_[v.id].requires_grad;
    }
    return push(kind, std::move(ids), std::move(value), needs ? std::move(fn) : nullptr, needs);
  }

  /// Handle the next recorded node will receive; lets backward closures refer to
  /// their own output without copying it.
  Var next() noexcept { return Var{this, static_cast<std::uint32_t>(nodes_.size())}; }

  const Array& value(Var v) const { return nodes_.at(v.id).value; }
  OpKind kind(Var v) const { return nodes_.at(v.id).kind; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse pass seeded with d loss / d loss = 1. `loss` must be a scalar.
  void backward(Var loss) {
    if (value(loss).size() != 1) throw ConfigError("backward() needs a scalar loss");
    grads_.assign(nodes_.size(), Array());
    grads_[loss.id] = Array(value(loss).shape(), 1.0);
    std::vector<Array*> grad_in;
    for (std::size_t n = loss.id + 1; n-- > 0;) {
      Node& node = nodes_[n];
      if (!node.backward || grads_[n].empty()) continue;
      grad_in.assign(node.inputs.size(), nullptr);
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const std::uint32_t in = node.inputs[k];
        if (!nodes_[in].requires_grad) continue;
        if (grads_[in].empty()) grads_[in] = Array(nodes_[in].value.shape(), 0.0);
        grad_in[k] = &grads_[in];
      }
      node.backward(grads_[n], grad_in);
    }
  }

  /// Gradient after backward(); zeros when the node did not influence the loss.
  Array grad(Var v) const {
    if (v.id < grads_.size() && !grads_[v.id].empty()) return grads_[v.id];
    return Array(value(v).shape(), 0.0);
  }

 private:
  struct Node {
    OpKind kind;
    std::vector<std::uint32_t> inputs;
    Array value;
    BackwardFn backward;
    bool requires_grad;
  };

  Var push(OpKind kind, std::vector<std::uint32_t> inputs, Array value, BackwardFn fn, bool needs) {
    nodes_.push_back(Node{kind, std::move(inputs), std::move(value), std::move(fn), needs});
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::deque<Node> nodes_;  // stable references across appends
  std::vector<Array> grads_;
};

inline const Array& Var::value() const { return tape->value(*this); }

}  // namespace caps
