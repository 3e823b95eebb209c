#pragma once

// Reverse-mode differentiation over Tensor values.
//
// A Tape records one node per primitive whose result depends on a trainable
// leaf. Values that depend only on constants are never recorded, so a tape
// built with recording disabled is a plain evaluator. Var is a cheap handle
// (shared value + node index) and is only meaningful together with its tape.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "autt/tensor.hpp"

namespace autt {

class Tape;

class Var {
 public:
  Var() = default;

  const Tensor& value() const { return *value_; }
  const Shape& shape() const { return value_->shape(); }
  std::size_t dim(std::size_t axis) const { return value_->dim(axis); }
  std::size_t numel() const { return value_->numel(); }
  Tape& tape() const { return *tape_; }
  bool tracked() const noexcept { return id_ >= 0; }
  long id() const noexcept { return id_; }
  bool valid() const noexcept { return value_ != nullptr; }
  const std::shared_ptr<const Tensor>& value_ptr() const noexcept { return value_; }

 private:
  friend class Tape;
  Var(std::shared_ptr<const Tensor> value, Tape* tape, long id)
      : value_(std::move(value)), tape_(tape), id_(id) {}

  std::shared_ptr<const Tensor> value_;
  Tape* tape_ = nullptr;
  long id_ = -1;
};

/// Gradients of a scalar root with respect to every recorded node.
class Gradients {
 public:
  /// d(root)/d(v); zeros when v is untracked or was not reached.
  Tensor of(const Var& v) const;

 private:
  friend class Tape;
  std::vector<Tensor> grads_;
};

/// Accumulates into the gradient buffers of the op inputs; a null entry
/// marks an input that does not need a gradient.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor value);
  /// Trainable leaf. Untracked when the tape is not recording.
  Var parameter(Tensor value);

  /// Gradient of a single-element root. Does not modify the tape, so it may
  /// be called repeatedly.
  Gradients backward(const Var& root) const;

  /// Used by primitive implementations. Records a node only if some input
  /// is tracked; `make_backward` is invoked lazily in that case.
  Var record(Tensor value, std::initializer_list<const Var*> inputs,
             const std::function<BackwardFn()>& make_backward);
  Var record(Tensor value, std::span<const Var> inputs,
             const std::function<BackwardFn()>& make_backward);

 private:
  struct Node {
    Shape shape;
    std::vector<long> inputs;
    BackwardFn backward;
  };

  bool recording_;
  std::vector<Node> nodes_;
};

// ---- primitives -----------------------------------------------------------

/// 2-D matrix product.
Var matmul(const Var& a, const Var& b);
/// Elementwise ops. Either operand may broadcast over leading size-1 dims.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);
/// Reductions keep the reduced axis with size 1.
Var sum(const Var& a, std::size_t axis);
Var mean(const Var& a, std::size_t axis);
/// Full reduction to shape [1].
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);
/// Elementwise max(a, floor) for a constant floor.
Var max_const(const Var& a, double floor);

struct GatherIndex {
  std::uint32_t source;
  std::size_t offset;
};

/// out[i] = sources[index[i].source].flat[index[i].offset].
Var gather(std::span<const Var> sources, std::shared_ptr<const std::vector<GatherIndex>> index,
           Shape out_shape);
/// Single-source gather by flat offsets.
Var gather(const Var& source, std::shared_ptr<const std::vector<std::size_t>> index,
           Shape out_shape);
/// out.flat[index[i]] += a.flat[i]; out starts at zero.
Var scatter_add(const Var& a, std::shared_ptr<const std::vector<std::size_t>> index,
                Shape out_shape);

/// Depthwise 3x3 cross-correlation with dilation `rate` and zero padding
/// `rate`. x is [H, W, C], kernel is [C, 3, 3]; the result is [H, W, C].
Var conv2d_dilated(const Var& x, const Var& kernel, std::size_t rate);

// ---- composites built from primitives ---------------------------------------

Var neg(const Var& a);
Var div(const Var& a, const Var& b);
/// a^p for a > 0 and a constant exponent p.
Var pow_const(const Var& a, double p);
/// Smooth GELU approximation x * sigmoid(1.702 x).
Var gelu(const Var& a);
Var slice_rows(const Var& a, std::size_t begin, std::size_t count);
Var slice_cols(const Var& a, std::size_t begin, std::size_t count);
Var row(const Var& a, std::size_t r);
/// Stack 2-D blocks with equal column count on top of each other.
Var concat_rows(std::span<const Var> parts);
/// Place 2-D blocks with equal row count side by side.
Var concat_cols(std::span<const Var> parts);
/// Reorder rows of a 2-D value.
Var permute_rows(const Var& a, std::span<const std::size_t> order);

}  // namespace autt
