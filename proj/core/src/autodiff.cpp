#include "autt/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "autt/error.hpp"

namespace autt {
namespace {

using TensorPtr = std::shared_ptr<const Tensor>;

void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a.shape().size() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(a.shape()));
}

Tape& common_tape(const Var& a, const Var& b, const char* op) {
  if (&a.tape() != &b.tape()) throw Error(std::string(op) + ": operands belong to different tapes");
  return a.tape();
}

// True when `small` is `big` with some leading dimensions replaced by 1.
bool broadcasts_to(const Shape& small, const Shape& big) {
  if (small.size() != big.size()) return false;
  std::size_t i = 0;
  while (i < small.size() && small[i] == 1 && big[i] != 1) ++i;
  for (; i < small.size(); ++i)
    if (small[i] != big[i]) return false;
  return true;
}

enum class Binary { kAdd, kSub, kMul };

Var elementwise(const Var& a, const Var& b, Binary kind, const char* op) {
  Tape& tape = common_tape(a, b, op);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  Shape out_shape;
  if (sa == sb || broadcasts_to(sb, sa)) {
    out_shape = sa;
  } else if (broadcasts_to(sa, sb)) {
    out_shape = sb;
  } else {
    throw ShapeError(std::string(op) + ": shapes " + shape_string(sa) + " and " +
                     shape_string(sb) + " do not conform");
  }
  const std::size_t n = shape_numel(out_shape);
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  const auto& va = a.value();
  const auto& vb = b.value();
  Tensor out(out_shape);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = va[i % na];
    const double y = vb[i % nb];
    switch (kind) {
      case Binary::kAdd: out[i] = x + y; break;
      case Binary::kSub: out[i] = x - y; break;
      case Binary::kMul: out[i] = x * y; break;
    }
  }
  TensorPtr pa = a.value_ptr();
  TensorPtr pb = b.value_ptr();
  return tape.record(std::move(out), {&a, &b}, [&]() -> BackwardFn {
    return [kind, n, na, nb, pa, pb](const Tensor& g, std::span<Tensor* const> in) {
      if (in[0]) {
        Tensor& ga = *in[0];
        for (std::size_t i = 0; i < n; ++i) {
          const double d = kind == Binary::kMul ? g[i] * (*pb)[i % nb] : g[i];
          ga[i % na] += d;
        }
      }
      if (in[1]) {
        Tensor& gb = *in[1];
        for (std::size_t i = 0; i < n; ++i) {
          double d = g[i];
          if (kind == Binary::kSub) d = -d;
          if (kind == Binary::kMul) d *= (*pa)[i % na];
          gb[i % nb] += d;
        }
      }
    };
  });
}

template <class F, class D>
Var unary(const Var& a, F forward, D derivative) {
  Tensor out(a.shape());
  const auto& va = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = forward(va[i]);
  TensorPtr pa = a.value_ptr();
  return a.tape().record(std::move(out), {&a}, [&]() -> BackwardFn {
    return [pa, derivative](const Tensor& g, std::span<Tensor* const> in) {
      Tensor& ga = *in[0];
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * derivative((*pa)[i]);
    };
  });
}

// c += a * b for row-major matrices a (m x k), b (k x n).
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

// ---- Tape -----------------------------------------------------------------

Tensor Gradients::of(const Var& v) const {
  if (v.id() >= 0 && static_cast<std::size_t>(v.id()) < grads_.size() &&
      !grads_[static_cast<std::size_t>(v.id())].empty())
    return grads_[static_cast<std::size_t>(v.id())];
  return Tensor::zeros(v.shape());
}

Var Tape::constant(Tensor value) {
  return Var(std::make_shared<const Tensor>(std::move(value)), this, -1);
}

Var Tape::parameter(Tensor value) {
  auto ptr = std::make_shared<const Tensor>(std::move(value));
  if (!recording_) return Var(std::move(ptr), this, -1);
  nodes_.push_back(Node{ptr->shape(), {}, nullptr});
  return Var(std::move(ptr), this, static_cast<long>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, std::initializer_list<const Var*> inputs,
                 const std::function<BackwardFn()>& make_backward) {
  bool any = false;
  for (const Var* v : inputs) any = any || v->tracked();
  auto ptr = std::make_shared<const Tensor>(std::move(value));
  if (!recording_ || !any) return Var(std::move(ptr), this, -1);
  Node node{ptr->shape(), {}, make_backward()};
  for (const Var* v : inputs) node.inputs.push_back(v->id());
  nodes_.push_back(std::move(node));
  return Var(std::move(ptr), this, static_cast<long>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, std::span<const Var> inputs,
                 const std::function<BackwardFn()>& make_backward) {
  bool any = false;
  for (const Var& v : inputs) any = any || v.tracked();
  auto ptr = std::make_shared<const Tensor>(std::move(value));
  if (!recording_ || !any) return Var(std::move(ptr), this, -1);
  Node node{ptr->shape(), {}, make_backward()};
  for (const Var& v : inputs) node.inputs.push_back(v.id());
  nodes_.push_back(std::move(node));
  return Var(std::move(ptr), this, static_cast<long>(nodes_.size() - 1));
}

Gradients Tape::backward(const Var& root) const {
  if (&root.tape() != this) throw Error("backward: root belongs to a different tape");
  if (root.numel() != 1)
    throw ShapeError("backward: root must be a scalar, got " + shape_string(root.shape()));
  Gradients result;
  result.grads_.resize(nodes_.size());
  if (!root.tracked()) return result;
  const auto root_id = static_cast<std::size_t>(root.id());
  result.grads_[root_id] = Tensor::ones(root.shape());
  std::vector<Tensor*> ptrs;
  for (std::size_t n = root_id + 1; n-- > 0;) {
    const Node& node = nodes_[n];
    if (!node.backward || result.grads_[n].empty()) continue;
    ptrs.assign(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      const long id = node.inputs[i];
      if (id < 0) continue;
      Tensor& slot = result.grads_[static_cast<std::size_t>(id)];
      if (slot.empty()) slot = Tensor::zeros(nodes_[static_cast<std::size_t>(id)].shape);
      ptrs[i] = &slot;
    }
    node.backward(result.grads_[n], ptrs);
  }
  return result;
}

// ---- primitives -----------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  Tape& tape = common_tape(a, b, "matmul");
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()) + " do not conform");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  gemm_acc(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n);
  TensorPtr pa = a.value_ptr();
  TensorPtr pb = b.value_ptr();
  return tape.record(std::move(out), {&a, &b}, [&]() -> BackwardFn {
    return [pa, pb, m, k, n](const Tensor& g, std::span<Tensor* const> in) {
      const double* gd = g.data().data();
      if (in[0]) {
        // dA = G B^T
        double* ga = in[0]->data().data();
        const double* bd = pb->data().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += gd[i * n + j] * bd[p * n + j];
            ga[i * k + p] += acc;
          }
      }
      if (in[1]) {
        // dB = A^T G
        double* gb = in[1]->data().data();
        const double* ad = pa->data().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double av = ad[i * k + p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * gd[i * n + j];
          }
      }
    };
  });
}

Var add(const Var& a, const Var& b) { return elementwise(a, b, Binary::kAdd, "add"); }
Var sub(const Var& a, const Var& b) { return elementwise(a, b, Binary::kSub, "sub"); }
Var mul(const Var& a, const Var& b) { return elementwise(a, b, Binary::kMul, "mul"); }

Var scale(const Var& a, double factor) {
  return unary(a, [factor](double x) { return x * factor; },
               [factor](double) { return factor; });
}

Var add_scalar(const Var& a, double offset) {
  return unary(a, [offset](double x) { return x + offset; }, [](double) { return 1.0; });
}

Var transpose(const Var& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor out({c, r});
  const auto& v = a.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = v.at(i, j);
  return a.tape().record(std::move(out), {&a}, [&]() -> BackwardFn {
    return [r, c](const Tensor& g, std::span<Tensor* const> in) {
      Tensor& ga = *in[0];
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga.at(i, j) += g.at(j, i);
    };
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(out), {&a}, [&]() -> BackwardFn {
    return [](const Tensor& g, std::span<Tensor* const> in) {
      Tensor& ga = *in[0];
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    };
  });
}

Var sum(const Var& a, std::size_t axis) {
  const Shape& s = a.shape();
  if (axis >= s.size())
    throw ShapeError("sum: axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape os = s;
  os[axis] = 1;
  Tensor out(os);
  const auto& v = a.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += v[(o * n + k) * inner + i];
  return a.tape().record(std::move(out), {&a}, [&]() -> BackwardFn {
    return [outer, inner, n](const Tensor& g, std::span<Tensor* const> in) {
      Tensor& ga = *in[0];
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < n; ++k)
          for (std::size_t i = 0; i < inner; ++i) ga[(o * n + k) * inner + i] += g[o * inner + i];
    };
  });
}

Var mean(const Var& a, std::size_t axis) {
  if (axis >= a.shape().size()) throw ShapeError("mean: axis out of range");
  return scale(sum(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

Var sum_all(const Var& a) {
  double acc = 0.0;
  for (double x : a.value().data()) acc += x;
  return a.tape().record(Tensor::scalar(acc), {&a}, [&]() -> BackwardFn {
    return [](const Tensor& g, std::span<Tensor* const> in) {
      Tensor& ga = *in[0];
      const double d = g[0];
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += d;
    };
  });
}

Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var sigmoid(const Var& a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double x) {
        const double y = 1.0 / (1.0 + std::exp(-x));
        return y * (1.0 - y);
      });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var max_const(const Var& a, double floor) {
  return unary(a, [floor](double x) { return x > floor ? x : floor; },
               [floor](double x) { return x > floor ? 1.0 : 0.0; });
}

Var gather(std::span<const Var> sources, std::shared_ptr<const std::vector<GatherIndex>> index,
           Shape out_shape) {
  if (sources.empty()) throw ShapeError("gather: no sources");
  if (shape_numel(out_shape) != index->size())
    throw ShapeError("gather: index length " + std::to_string(index->size()) +
                     " does not match output shape " + shape_string(out_shape));
  Tape& tape = sources[0].tape();
  Tensor out(std::move(out_shape));
  for (std::size_t i = 0; i < index->size(); ++i) {
    const auto& [src, off] = (*index)[i];
    if (src >= sources.size() || off >= sources[src].numel())
      throw ShapeError("gather: index out of range at position " + std::to_string(i));
    out[i] = sources[src].value()[off];
  }
  return tape.record(std::move(out), sources, [&]() -> BackwardFn {
    return [index](const Tensor& g, std::span<Tensor* const> in) {
      for (std::size_t i = 0; i < index->size(); ++i) {
        const auto& [src, off] = (*index)[i];
        if (in[src]) (*in[src])[off] += g[i];
      }
    };
  });
}

Var gather(const Var& source, std::shared_ptr<const std::vector<std::size_t>> index,
           Shape out_shape) {
  if (shape_numel(out_shape) != index->size())
    throw ShapeError("gather: index length does not match output shape " + shape_string(out_shape));
  Tensor out(std::move(out_shape));
  const auto& v = source.value();
  for (std::size_t i = 0; i < index->size(); ++i) {
    if ((*index)[i] >= v.numel()) throw ShapeError("gather: index out of range");
    out[i] = v[(*index)[i]];
  }
  return source.tape().record(std::move(out), {&source}, [&]() -> BackwardFn {
    return [index](const Tensor& g, std::span<Tensor* const> in) {
      Tensor& ga = *in[0];
      for (std::size_t i = 0; i < index->size(); ++i) ga[(*index)[i]] += g[i];
    };
  });
}

Var scatter_add(const Var& a, std::shared_ptr<const std::vector<std::size_t>> index,
                Shape out_shape) {
  if (index->size() != a.numel())
    throw ShapeError("scatter_add: index length does not match input " + shape_string(a.shape()));
  Tensor out(std::move(out_shape));
  const auto& v = a.value();
  for (std::size_t i = 0; i < index->size(); ++i) {
    if ((*index)[i] >= out.numel()) throw ShapeError("scatter_add: index out of range");
    out[(*index)[i]] += v[i];
  }
  return a.tape().record(std::move(out), {&a}, [&]() -> BackwardFn {
    return [index](const Tensor& g, std::span<Tensor* const> in) {
      Tensor& ga = *in[0];
      for (std::size_t i = 0; i < index->size(); ++i) ga[i] += g[(*index)[i]];
    };
  });
}

Var conv2d_dilated(const Var& x, const Var& kernel, std::size_t rate) {
  Tape& tape = common_tape(x, kernel, "conv2d_dilated");
  require_rank(x, 3, "conv2d_dilated");
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  if (kernel.shape() != Shape{C, 3, 3})
    throw ShapeError("conv2d_dilated: kernel " + shape_string(kernel.shape()) +
                     " does not match input " + shape_string(x.shape()));
  if (rate == 0) throw ShapeError("conv2d_dilated: rate must be positive");
  const auto r = static_cast<long>(rate);
  const auto& xv = x.value();
  const auto& kv = kernel.value();
  Tensor out({H, W, C});
  auto for_each_tap = [H, W, C, r](auto&& fn) {
    for (long h = 0; h < static_cast<long>(H); ++h)
      for (long w = 0; w < static_cast<long>(W); ++w)
        for (long a = 0; a < 3; ++a) {
          const long hh = h + (a - 1) * r;
          if (hh < 0 || hh >= static_cast<long>(H)) continue;
          for (long b = 0; b < 3; ++b) {
            const long ww = w + (b - 1) * r;
            if (ww < 0 || ww >= static_cast<long>(W)) continue;
            const std::size_t o = (static_cast<std::size_t>(h) * W + static_cast<std::size_t>(w)) * C;
            const std::size_t s = (static_cast<std::size_t>(hh) * W + static_cast<std::size_t>(ww)) * C;
            const auto tap = static_cast<std::size_t>(a * 3 + b);
            for (std::size_t c = 0; c < C; ++c) fn(o + c, s + c, c * 9 + tap);
          }
        }
  };
  for_each_tap([&](std::size_t o, std::size_t s, std::size_t k) { out[o] += kv[k] * xv[s]; });
  TensorPtr px = x.value_ptr();
  TensorPtr pk = kernel.value_ptr();
  return tape.record(std::move(out), {&x, &kernel}, [&]() -> BackwardFn {
    return [px, pk, for_each_tap](const Tensor& g, std::span<Tensor* const> in) {
      if (in[0]) {
        Tensor& gx = *in[0];
        for_each_tap([&](std::size_t o, std::size_t s, std::size_t k) { gx[s] += (*pk)[k] * g[o]; });
      }
      if (in[1]) {
        Tensor& gk = *in[1];
        for_each_tap([&](std::size_t o, std::size_t s, std::size_t k) { gk[k] += (*px)[s] * g[o]; });
      }
    };
  });
}

// ---- composites -------------------------------------------------------------

Var neg(const Var& a) { return scale(a, -1.0); }

Var div(const Var& a, const Var& b) { return mul(a, exp(neg(log(b)))); }

Var pow_const(const Var& a, double p) { return exp(scale(log(a), p)); }

Var gelu(const Var& a) { return mul(a, sigmoid(scale(a, 1.702))); }

Var slice_rows(const Var& a, std::size_t begin, std::size_t count) {
  require_rank(a, 2, "slice_rows");
  const std::size_t cols = a.dim(1);
  if (begin + count > a.dim(0) || count == 0)
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of " + shape_string(a.shape()));
  auto idx = std::make_shared<std::vector<std::size_t>>(count * cols);
  for (std::size_t i = 0; i < count * cols; ++i) (*idx)[i] = begin * cols + i;
  return gather(a, std::move(idx), {count, cols});
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
  require_rank(a, 2, "slice_cols");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (begin + count > cols || count == 0)
    throw ShapeError("slice_cols: cols out of range for " + shape_string(a.shape()));
  auto idx = std::make_shared<std::vector<std::size_t>>();
  idx->reserve(rows * count);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < count; ++c) idx->push_back(r * cols + begin + c);
  return gather(a, std::move(idx), {rows, count});
}

Var row(const Var& a, std::size_t r) { return slice_rows(a, r, 1); }

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const std::size_t cols = parts[0].dim(1);
  std::size_t rows = 0;
  auto idx = std::make_shared<std::vector<GatherIndex>>();
  for (std::uint32_t p = 0; p < parts.size(); ++p) {
    require_rank(parts[p], 2, "concat_rows");
    if (parts[p].dim(1) != cols)
      throw ShapeError("concat_rows: column mismatch " + shape_string(parts[0].shape()) + " vs " +
                       shape_string(parts[p].shape()));
    for (std::size_t i = 0; i < parts[p].numel(); ++i) idx->push_back({p, i});
    rows += parts[p].dim(0);
  }
  return gather(parts, std::move(idx), {rows, cols});
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const std::size_t rows = parts[0].dim(0);
  std::size_t cols = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != rows)
      throw ShapeError("concat_cols: row mismatch " + shape_string(parts[0].shape()) + " vs " +
                       shape_string(p.shape()));
    cols += p.dim(1);
  }
  auto idx = std::make_shared<std::vector<GatherIndex>>();
  idx->reserve(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::uint32_t p = 0; p < parts.size(); ++p) {
      const std::size_t pc = parts[p].dim(1);
      for (std::size_t c = 0; c < pc; ++c) idx->push_back({p, r * pc + c});
    }
  return gather(parts, std::move(idx), {rows, cols});
}

Var permute_rows(const Var& a, std::span<const std::size_t> order) {
  require_rank(a, 2, "permute_rows");
  const std::size_t cols = a.dim(1);
  auto idx = std::make_shared<std::vector<std::size_t>>();
  idx->reserve(order.size() * cols);
  for (std::size_t r : order) {
    if (r >= a.dim(0)) throw ShapeError("permute_rows: row index out of range");
    for (std::size_t c = 0; c < cols; ++c) idx->push_back(r * cols + c);
  }
  return gather(a, std::move(idx), {order.size(), cols});
}

}  // namespace autt
