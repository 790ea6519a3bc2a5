#pragma once

#include <array>
#include <cmath>
#include <deque>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cmssl/errors.hpp"
#include "cmssl/tensor.hpp"

namespace cmssl::ad {

enum class OpKind {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  Scale,
  Matmul,
  MatmulNT,
  StackRows,
  Conv2d,
  AvgPool2,
  Relu,
  Dense,
  L2Normalize,
  SoftmaxCrossEntropy,
  Dot,
  Concat,
  Sum,
  Mean,
  LogSumExp,
  Custom,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Constant: return "constant";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Matmul: return "matmul";
    case OpKind::MatmulNT: return "matmul_nt";
    case OpKind::StackRows: return "stack_rows";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::AvgPool2: return "avgpool2";
    case OpKind::Relu: return "relu";
    case OpKind::Dense: return "dense";
    case OpKind::L2Normalize: return "l2_normalize";
    case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::Dot: return "dot";
    case OpKind::Concat: return "concat";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::LogSumExp: return "logsumexp";
    case OpKind::Custom: return "custom";
  }
  return "?";
}

// Handle into a Graph's tape.
struct Value {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Backward hook for domain-specific fused ops (see contrastive.hpp). Receives
// the node's forward output, its adjoint, the input tensors, and the input
// adjoint buffers to accumulate into (nullptr where the input needs no grad).
using CustomBackward = std::function<void(const Tensor& out, const std::vector<double>& gout,
                                          std::span<const Tensor* const> inputs,
                                          std::span<std::vector<double>* const> ginputs)>;

namespace testing {
// Fault injection for gradient-checker validation: backward contributions of
// the selected op are scaled by 1.5, which any finite-difference comparison
// must detect. Off by default.
inline OpKind& faulted_op() {
  static OpKind k = OpKind::Custom;
  return k;
}
inline bool& fault_enabled() {
  static bool b = false;
  return b;
}
inline void inject_backward_fault(OpKind k) {
  faulted_op() = k;
  fault_enabled() = true;
}
inline void clear_backward_fault() { fault_enabled() = false; }
}  // namespace testing

// Append-only tape of operation records. Forward values are computed eagerly
// as nodes are appended; topological order is insertion order by construction.
// backward() sweeps nodes in exact reverse insertion order and finally flushes
// leaf adjoints into the gradients of the bound parameter tensors.
class Graph {
 public:
  Value leaf(Tensor& param) {
    Node n;
    n.op = OpKind::Leaf;
    n.value = param;  // copy of values; grads stay with the source tensor
    n.value.grad.clear();
    n.value.requires_grad = false;
    n.needs_grad = param.requires_grad;
    n.source = &param;
    return push(std::move(n));
  }

  Value constant(Tensor t) {
    Node n;
    n.op = OpKind::Constant;
    t.requires_grad = false;
    t.grad.clear();
    n.value = std::move(t);
    n.needs_grad = false;
    return push(std::move(n));
  }

  Value add(Value a, Value b) { return ew_binary(OpKind::Add, a, b); }
  Value sub(Value a, Value b) { return ew_binary(OpKind::Sub, a, b); }
  Value mul(Value a, Value b) { return ew_binary(OpKind::Mul, a, b); }

  Value scale(Value a, double c) {
    const Tensor& x = value(a);
    Node n = unary(OpKind::Scale, a, Tensor(x.shape));
    n.dattr = c;
    for (std::size_t i = 0; i < x.size(); ++i) n.value.values[i] = c * x.values[i];
    return push(std::move(n));
  }

  // a: [m x k], b: [k x n] -> [m x n]
  Value matmul(Value a, Value b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[0])
      throw ShapeError(std::string("matmul: incompatible shapes ") + shape_str(A.shape) + " and " +
                       shape_str(B.shape));
    std::size_t m = A.shape[0], k = A.shape[1], nn = B.shape[1];
    Tensor out(Shape{m, nn});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        double av = A.values[i * k + p];
        if (av == 0.0) continue;
        for (std::size_t j = 0; j < nn; ++j) out.values[i * nn + j] += av * B.values[p * nn + j];
      }
    return push(binary(OpKind::Matmul, a, b, std::move(out)));
  }

  // a: [m x k], b: [n x k] -> a * b^T, [m x n]. With a == b this is the Gram
  // matrix of the stacked rows.
  Value matmul_nt(Value a, Value b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[1])
      throw ShapeError(std::string("matmul_nt: incompatible shapes ") + shape_str(A.shape) + " and " +
                       shape_str(B.shape));
    std::size_t m = A.shape[0], k = A.shape[1], nn = B.shape[0];
    Tensor out(Shape{m, nn});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < nn; ++j) {
        double s = 0;
        for (std::size_t p = 0; p < k; ++p) s += A.values[i * k + p] * B.values[j * k + p];
        out.values[i * nn + j] = s;
      }
    return push(binary(OpKind::MatmulNT, a, b, std::move(out)));
  }

  // Stack equal-length vectors into an [n x d] matrix.
  Value stack_rows(std::span<const Value> rows) {
    if (rows.empty()) throw ContractError("stack_rows: no inputs");
    std::size_t d = value(rows[0]).size();
    Tensor out(Shape{rows.size(), d});
    Node n;
    n.op = OpKind::StackRows;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const Tensor& r = value(rows[i]);
      if (r.size() != d)
        throw ShapeError("stack_rows: row " + std::to_string(i) + " has size " + std::to_string(r.size()) +
                         ", expected " + std::to_string(d));
      std::copy(r.values.begin(), r.values.end(), out.values.begin() + i * d);
      n.inputs.push_back(rows[i].id);
      n.needs_grad = n.needs_grad || node(rows[i].id).needs_grad;
    }
    n.value = std::move(out);
    return push(std::move(n));
  }

  // Valid cross-correlation. input: [c_in x h x w], kernels:
  // [c_out x c_in x kh x kw], output: [c_out x h' x w'].
  Value conv2d(Value input, Value kernels, int stride = 1) {
    const Tensor& X = value(input);
    const Tensor& K = value(kernels);
    if (X.shape.size() != 3 || K.shape.size() != 4)
      throw ShapeError(std::string("conv2d: expected 3-d input and 4-d kernels, got ") + shape_str(X.shape) +
                       " and " + shape_str(K.shape));
    if (stride < 1) throw ContractError("conv2d: stride must be positive");
    std::size_t ci = X.shape[0], h = X.shape[1], w = X.shape[2];
    std::size_t co = K.shape[0], kh = K.shape[2], kw = K.shape[3];
    if (K.shape[1] != ci)
      throw ShapeError("conv2d: kernel channels " + shape_str(K.shape) + " do not match input " +
                       shape_str(X.shape));
    if (kh > h || kw > w)
      throw ShapeError("conv2d: kernel " + shape_str(K.shape) + " larger than input " + shape_str(X.shape));
    std::size_t s = static_cast<std::size_t>(stride);
    std::size_t oh = (h - kh) / s + 1, ow = (w - kw) / s + 1;
    Tensor out(Shape{co, oh, ow});
    for (std::size_t oc = 0; oc < co; ++oc)
      for (std::size_t ic = 0; ic < ci; ++ic) {
        const double* kbase = &K.values[((oc * ci + ic) * kh) * kw];
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            double acc = 0;
            for (std::size_t u = 0; u < kh; ++u) {
              const double* xrow = &X.values[(ic * h + i * s + u) * w + j * s];
              const double* krow = kbase + u * kw;
              for (std::size_t v = 0; v < kw; ++v) acc += xrow[v] * krow[v];
            }
            out.values[(oc * oh + i) * ow + j] += acc;
          }
      }
    Node n = binary(OpKind::Conv2d, input, kernels, std::move(out));
    n.iattr = stride;
    return push(std::move(n));
  }

  // Mean over non-overlapping 2x2 windows; spatial dims must be even.
  Value avgpool2(Value input) {
    const Tensor& X = value(input);
    if (X.shape.size() != 3) throw ShapeError("avgpool2: expected 3-d input, got " + shape_str(X.shape));
    std::size_t c = X.shape[0], h = X.shape[1], w = X.shape[2];
    if (h % 2 != 0 || w % 2 != 0)
      throw ShapeError("avgpool2: spatial dims must be even, got " + shape_str(X.shape));
    Tensor out(Shape{c, h / 2, w / 2});
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < h / 2; ++i)
        for (std::size_t j = 0; j < w / 2; ++j)
          out.values[(ch * (h / 2) + i) * (w / 2) + j] =
              0.25 * (X.at(ch, 2 * i, 2 * j) + X.at(ch, 2 * i, 2 * j + 1) + X.at(ch, 2 * i + 1, 2 * j) +
                      X.at(ch, 2 * i + 1, 2 * j + 1));
    return push(unary(OpKind::AvgPool2, input, std::move(out)));
  }

  Value relu(Value a) {
    const Tensor& x = value(a);
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = x.values[i] > 0 ? x.values[i] : 0.0;
    return push(unary(OpKind::Relu, a, std::move(out)));
  }

  // y = W x + b. x is used flattened; W: [out x in], b: [out].
  Value dense(Value x, Value w, Value b) {
    const Tensor& X = value(x);
    const Tensor& W = value(w);
    const Tensor& B = value(b);
    if (W.shape.size() != 2)
      throw ShapeError("dense: weight must be 2-d, got " + shape_str(W.shape));
    std::size_t od = W.shape[0], id = W.shape[1];
    if (X.size() != id)
      throw ShapeError("dense: input size " + std::to_string(X.size()) + " does not match weight " +
                       shape_str(W.shape));
    if (B.size() != od)
      throw ShapeError("dense: bias size " + std::to_string(B.size()) + " does not match weight " +
                       shape_str(W.shape));
    Tensor out(Shape{od});
    for (std::size_t i = 0; i < od; ++i) {
      double acc = B.values[i];
      const double* wrow = &W.values[i * id];
      for (std::size_t j = 0; j < id; ++j) acc += wrow[j] * X.values[j];
      out.values[i] = acc;
    }
    Node n;
    n.op = OpKind::Dense;
    n.inputs = {x.id, w.id, b.id};
    n.needs_grad = node(x.id).needs_grad || node(w.id).needs_grad || node(b.id).needs_grad;
    n.value = std::move(out);
    return push(std::move(n));
  }

  // x / ||x||2 over the flattened tensor. Near-zero norm is an error rather
  // than a silent epsilon.
  Value l2_normalize(Value a) {
    const Tensor& x = value(a);
    double n2 = 0;
    for (double v : x.values) n2 += v * v;
    double nrm = std::sqrt(n2);
    if (nrm <= 1e-12) throw NumericError("l2_normalize: degenerate input with norm <= 1e-12");
    Tensor out(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) out.values[i] = x.values[i] / nrm;
    Node n = unary(OpKind::L2Normalize, a, std::move(out));
    n.dattr = nrm;
    return push(std::move(n));
  }

  // Scalar loss lse(logits) - logits[target], computed with max-subtraction.
  Value softmax_cross_entropy(Value logits, int target) {
    const Tensor& z = value(logits);
    if (target < 0 || static_cast<std::size_t>(target) >= z.size())
      throw ContractError("softmax_cross_entropy: target index " + std::to_string(target) +
                          " out of range for " + std::to_string(z.size()) + " logits");
    double m = z.values[0];
    for (double v : z.values) m = std::max(m, v);
    double sum = 0;
    for (double v : z.values) sum += std::exp(v - m);
    Tensor out = Tensor::scalar(m + std::log(sum) - z.values[static_cast<std::size_t>(target)]);
    Node n = unary(OpKind::SoftmaxCrossEntropy, logits, std::move(out));
    n.iattr = target;
    return push(std::move(n));
  }

  // Inner product of two equal-size tensors, flattened.
  Value dot(Value a, Value b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.size() != B.size())
      throw ShapeError(std::string("dot: size mismatch ") + shape_str(A.shape) + " vs " + shape_str(B.shape));
    double s = 0;
    for (std::size_t i = 0; i < A.size(); ++i) s += A.values[i] * B.values[i];
    return push(binary(OpKind::Dot, a, b, Tensor::scalar(s)));
  }

  // Concatenate flattened inputs into one 1-d tensor.
  Value concat(std::span<const Value> parts) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    std::size_t total = 0;
    for (Value p : parts) total += value(p).size();
    Tensor out(Shape{total});
    Node n;
    n.op = OpKind::Concat;
    std::size_t off = 0;
    for (Value p : parts) {
      const Tensor& t = value(p);
      std::copy(t.values.begin(), t.values.end(), out.values.begin() + off);
      off += t.size();
      n.inputs.push_back(p.id);
      n.needs_grad = n.needs_grad || node(p.id).needs_grad;
    }
    n.value = std::move(out);
    return push(std::move(n));
  }

  Value sum(Value a) {
    const Tensor& x = value(a);
    double s = 0;
    for (double v : x.values) s += v;
    return push(unary(OpKind::Sum, a, Tensor::scalar(s)));
  }

  Value mean(Value a) {
    const Tensor& x = value(a);
    double s = 0;
    for (double v : x.values) s += v;
    return push(unary(OpKind::Mean, a, Tensor::scalar(s / static_cast<double>(x.size()))));
  }

  // log sum exp over the flattened tensor, max-subtracted.
  Value logsumexp(Value a) {
    const Tensor& x = value(a);
    double m = x.values[0];
    for (double v : x.values) m = std::max(m, v);
    double s = 0;
    for (double v : x.values) s += std::exp(v - m);
    return push(unary(OpKind::LogSumExp, a, Tensor::scalar(m + std::log(s))));
  }

  // Fused domain op: forward output is computed by the caller, backward is the
  // supplied closure. Used by the contrastive loss.
  Value custom(std::string name, std::span<const Value> inputs, Tensor out, CustomBackward backward) {
    Node n;
    n.op = OpKind::Custom;
    n.name = std::move(name);
    for (Value v : inputs) {
      n.inputs.push_back(v.id);
      n.needs_grad = n.needs_grad || node(v.id).needs_grad;
    }
    n.value = std::move(out);
    n.custom = std::move(backward);
    return push(std::move(n));
  }

  const Tensor& value(Value v) const { return node(v.id).value; }

  // Adjoint buffer of a node after backward(); empty if the node needed no grad.
  const std::vector<double>& adjoint(Value v) const { return node(v.id).grad; }

  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from a scalar loss. Node adjoints are rebuilt from scratch on
  // every call; leaf contributions accumulate into the bound parameters' grad,
  // so calling backward twice doubles parameter gradients exactly.
  void backward(Value loss) {
    Node& ln = node(loss.id);
    if (!ln.value.is_scalar())
      throw ContractError("backward: loss must be scalar, got " + shape_str(ln.value.shape));
    for (Node& n : nodes_) {
      if (n.needs_grad)
        n.grad.assign(n.value.size(), 0.0);
      else
        n.grad.clear();
    }
    if (!ln.needs_grad) return;  // nothing reachable requires grad
    ln.grad[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (testing::fault_enabled() && n.op == testing::faulted_op())
        for (double& g : n.grad) g *= 1.5;
      dispatch_backward(n);
    }
    for (Node& n : nodes_) {
      if (n.op != OpKind::Leaf || n.source == nullptr || !n.source->requires_grad) continue;
      if (!all_finite(n.grad)) throw NumericError("backward: non-finite gradient for leaf parameter");
      for (std::size_t i = 0; i < n.grad.size(); ++i) n.source->grad[i] += n.grad[i];
    }
  }

 private:
  struct Node {
    OpKind op = OpKind::Constant;
    std::vector<int> inputs;
    Tensor value;
    std::vector<double> grad;
    bool needs_grad = false;
    Tensor* source = nullptr;
    int iattr = 0;
    double dattr = 0.0;
    std::string name;
    CustomBackward custom;
  };

  std::deque<Node> nodes_;  // reference stability across push_back

  Node& node(int id) {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
      throw ContractError("graph: invalid node id " + std::to_string(id));
    return nodes_[static_cast<std::size_t>(id)];
  }
  const Node& node(int id) const { return const_cast<Graph*>(this)->node(id); }

  Value push(Node&& n) {
    if (!all_finite(n.value.values))
      throw NumericError(std::string(op_name(n.op)) + ": non-finite value in op output" +
                         (n.name.empty() ? "" : " (" + n.name + ")"));
    nodes_.push_back(std::move(n));
    return Value{static_cast<int>(nodes_.size()) - 1};
  }

  Node unary(OpKind op, Value a, Tensor out) {
    Node n;
    n.op = op;
    n.inputs = {a.id};
    n.needs_grad = node(a.id).needs_grad;
    n.value = std::move(out);
    return n;
  }

  Node binary(OpKind op, Value a, Value b, Tensor out) {
    Node n;
    n.op = op;
    n.inputs = {a.id, b.id};
    n.needs_grad = node(a.id).needs_grad || node(b.id).needs_grad;
    n.value = std::move(out);
    return n;
  }

  Value ew_binary(OpKind op, Value a, Value b) {
    const Tensor& A = value(a);
    const Tensor& B = value(b);
    if (A.shape != B.shape)
      throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + shape_str(A.shape) + " vs " +
                       shape_str(B.shape));
    Tensor out(A.shape);
    for (std::size_t i = 0; i < A.size(); ++i) {
      switch (op) {
        case OpKind::Add: out.values[i] = A.values[i] + B.values[i]; break;
        case OpKind::Sub: out.values[i] = A.values[i] - B.values[i]; break;
        case OpKind::Mul: out.values[i] = A.values[i] * B.values[i]; break;
        default: throw ContractError("ew_binary: bad op");
      }
    }
    return push(binary(op, a, b, std::move(out)));
  }

  // Accumulate g into input adjoint if that input participates in the sweep.
  std::vector<double>* gin(Node& n, std::size_t k) {
    Node& in = node(n.inputs[k]);
    return in.needs_grad ? &in.grad : nullptr;
  }

  void dispatch_backward(Node& n) {
    const std::vector<double>& g = n.grad;
    switch (n.op) {
      case OpKind::Leaf:
      case OpKind::Constant:
        break;
      case OpKind::Add: {
        if (auto* ga = gin(n, 0))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        if (auto* gb = gin(n, 1))
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
        break;
      }
      case OpKind::Sub: {
        if (auto* ga = gin(n, 0))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        if (auto* gb = gin(n, 1))
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
        break;
      }
      case OpKind::Mul: {
        const Tensor& A = node(n.inputs[0]).value;
        const Tensor& B = node(n.inputs[1]).value;
        if (auto* ga = gin(n, 0))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * B.values[i];
        if (auto* gb = gin(n, 1))
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * A.values[i];
        break;
      }
      case OpKind::Scale: {
        if (auto* ga = gin(n, 0))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += n.dattr * g[i];
        break;
      }
      case OpKind::Matmul: {
        const Tensor& A = node(n.inputs[0]).value;
        const Tensor& B = node(n.inputs[1]).value;
        std::size_t m = A.shape[0], k = A.shape[1], nn = B.shape[1];
        if (auto* ga = gin(n, 0))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0;
              for (std::size_t j = 0; j < nn; ++j) s += g[i * nn + j] * B.values[p * nn + j];
              (*ga)[i * k + p] += s;
            }
        if (auto* gb = gin(n, 1))
          for (std::size_t p = 0; p < k; ++p)
            for (std::size_t j = 0; j < nn; ++j) {
              double s = 0;
              for (std::size_t i = 0; i < m; ++i) s += A.values[i * k + p] * g[i * nn + j];
              (*gb)[p * nn + j] += s;
            }
        break;
      }
      case OpKind::MatmulNT: {
        const Tensor& A = node(n.inputs[0]).value;
        const Tensor& B = node(n.inputs[1]).value;
        std::size_t m = A.shape[0], k = A.shape[1], nn = B.shape[0];
        if (auto* ga = gin(n, 0))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0;
              for (std::size_t j = 0; j < nn; ++j) s += g[i * nn + j] * B.values[j * k + p];
              (*ga)[i * k + p] += s;
            }
        if (auto* gb = gin(n, 1))
          for (std::size_t j = 0; j < nn; ++j)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0;
              for (std::size_t i = 0; i < m; ++i) s += g[i * nn + j] * A.values[i * k + p];
              (*gb)[j * k + p] += s;
            }
        break;
      }
      case OpKind::StackRows: {
        std::size_t d = n.value.shape[1];
        for (std::size_t r = 0; r < n.inputs.size(); ++r)
          if (auto* gr = gin(n, r))
            for (std::size_t j = 0; j < d; ++j) (*gr)[j] += g[r * d + j];
        break;
      }
      case OpKind::Conv2d: {
        const Tensor& X = node(n.inputs[0]).value;
        const Tensor& K = node(n.inputs[1]).value;
        std::size_t ci = X.shape[0], h = X.shape[1], w = X.shape[2];
        std::size_t co = K.shape[0], kh = K.shape[2], kw = K.shape[3];
        std::size_t s = static_cast<std::size_t>(n.iattr);
        std::size_t oh = n.value.shape[1], ow = n.value.shape[2];
        auto* gx = gin(n, 0);
        auto* gk = gin(n, 1);
        for (std::size_t oc = 0; oc < co; ++oc)
          for (std::size_t ic = 0; ic < ci; ++ic) {
            const double* kbase = &K.values[((oc * ci + ic) * kh) * kw];
            for (std::size_t i = 0; i < oh; ++i)
              for (std::size_t j = 0; j < ow; ++j) {
                double go = g[(oc * oh + i) * ow + j];
                if (go == 0.0) continue;
                for (std::size_t u = 0; u < kh; ++u)
                  for (std::size_t v = 0; v < kw; ++v) {
                    std::size_t xi = (ic * h + i * s + u) * w + j * s + v;
                    if (gx) (*gx)[xi] += go * kbase[u * kw + v];
                    if (gk) (*gk)[((oc * ci + ic) * kh + u) * kw + v] += go * X.values[xi];
                  }
              }
          }
        break;
      }
      case OpKind::AvgPool2: {
        const Tensor& X = node(n.inputs[0]).value;
        std::size_t c = X.shape[0], h = X.shape[1], w = X.shape[2];
        if (auto* gx = gin(n, 0))
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < h / 2; ++i)
              for (std::size_t j = 0; j < w / 2; ++j) {
                double go = 0.25 * g[(ch * (h / 2) + i) * (w / 2) + j];
                (*gx)[(ch * h + 2 * i) * w + 2 * j] += go;
                (*gx)[(ch * h + 2 * i) * w + 2 * j + 1] += go;
                (*gx)[(ch * h + 2 * i + 1) * w + 2 * j] += go;
                (*gx)[(ch * h + 2 * i + 1) * w + 2 * j + 1] += go;
              }
        break;
      }
      case OpKind::Relu: {
        const Tensor& X = node(n.inputs[0]).value;
        if (auto* gx = gin(n, 0))
          for (std::size_t i = 0; i < g.size(); ++i)
            if (X.values[i] > 0) (*gx)[i] += g[i];
        break;
      }
      case OpKind::Dense: {
        const Tensor& X = node(n.inputs[0]).value;
        const Tensor& W = node(n.inputs[1]).value;
        std::size_t od = W.shape[0], id = W.shape[1];
        if (auto* gx = gin(n, 0))
          for (std::size_t j = 0; j < id; ++j) {
            double s = 0;
            for (std::size_t i = 0; i < od; ++i) s += W.values[i * id + j] * g[i];
            (*gx)[j] += s;
          }
        if (auto* gw = gin(n, 1))
          for (std::size_t i = 0; i < od; ++i)
            for (std::size_t j = 0; j < id; ++j) (*gw)[i * id + j] += g[i] * X.values[j];
        if (auto* gb = gin(n, 2))
          for (std::size_t i = 0; i < od; ++i) (*gb)[i] += g[i];
        break;
      }
      case OpKind::L2Normalize: {
        // y = x / n with n = ||x||: dx = (g - y (y . g)) / n
        const std::vector<double>& y = n.value.values;
        double nrm = n.dattr;
        if (auto* gx = gin(n, 0)) {
          double yg = 0;
          for (std::size_t i = 0; i < g.size(); ++i) yg += y[i] * g[i];
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += (g[i] - y[i] * yg) / nrm;
        }
        break;
      }
      case OpKind::SoftmaxCrossEntropy: {
        const Tensor& Z = node(n.inputs[0]).value;
        if (auto* gz = gin(n, 0)) {
          double m = Z.values[0];
          for (double v : Z.values) m = std::max(m, v);
          double sum = 0;
          for (double v : Z.values) sum += std::exp(v - m);
          for (std::size_t i = 0; i < Z.size(); ++i) {
            double p = std::exp(Z.values[i] - m) / sum;
            (*gz)[i] += g[0] * (p - (static_cast<int>(i) == n.iattr ? 1.0 : 0.0));
          }
        }
        break;
      }
      case OpKind::Dot: {
        const Tensor& A = node(n.inputs[0]).value;
        const Tensor& B = node(n.inputs[1]).value;
        if (auto* ga = gin(n, 0))
          for (std::size_t i = 0; i < A.size(); ++i) (*ga)[i] += g[0] * B.values[i];
        if (auto* gb = gin(n, 1))
          for (std::size_t i = 0; i < B.size(); ++i) (*gb)[i] += g[0] * A.values[i];
        break;
      }
      case OpKind::Concat: {
        std::size_t off = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          std::size_t sz = node(n.inputs[k]).value.size();
          if (auto* gk = gin(n, k))
            for (std::size_t i = 0; i < sz; ++i) (*gk)[i] += g[off + i];
          off += sz;
        }
        break;
      }
      case OpKind::Sum: {
        if (auto* gx = gin(n, 0))
          for (double& v : *gx) v += g[0];
        break;
      }
      case OpKind::Mean: {
        if (auto* gx = gin(n, 0)) {
          double go = g[0] / static_cast<double>(gx->size());
          for (double& v : *gx) v += go;
        }
        break;
      }
      case OpKind::LogSumExp: {
        const Tensor& X = node(n.inputs[0]).value;
        if (auto* gx = gin(n, 0)) {
          double lse = n.value.values[0];
          for (std::size_t i = 0; i < X.size(); ++i) (*gx)[i] += g[0] * std::exp(X.values[i] - lse);
        }
        break;
      }
      case OpKind::Custom: {
        std::vector<const Tensor*> ins;
        std::vector<std::vector<double>*> gins;
        ins.reserve(n.inputs.size());
        gins.reserve(n.inputs.size());
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          ins.push_back(&node(n.inputs[k]).value);
          gins.push_back(gin(n, k));
        }
        n.custom(n.value, g, ins, gins);
        break;
      }
    }
  }
};

}  // namespace cmssl::ad
