#include "ptat/graph.hpp"

#if defined(__GLIBC__) || defined(__linux__)
#include <malloc.h>
#endif

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "ptat/errors.hpp"
#include "ptat/kernels.hpp"

namespace {

// Activation matrices of a training batch run to several MB. glibc serves
// those with fresh mmaps whose first-touch page faults cost more than the
// arithmetic; keeping them on the heap lets freed blocks be reused.
[[maybe_unused]] const bool kAllocatorTuned = [] {
#ifdef M_MMAP_THRESHOLD
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  return true;
}();

}  // namespace

namespace ptat::diffmath {

namespace k = ptat::kernels::parallel;

std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::affine: return "affine";
    case OpKind::add: return "add";
    case OpKind::scale: return "scale";
    case OpKind::concat_rows: return "concat_rows";
    case OpKind::slice_rows: return "slice_rows";
    case OpKind::row_softmax: return "row_softmax";
    case OpKind::log_softmax_rows: return "log_softmax_rows";
    case OpKind::log: return "log";
    case OpKind::exp: return "exp";
    case OpKind::elementwise_mul: return "elementwise_mul";
    case OpKind::mean_all: return "mean_all";
    case OpKind::mean_rows: return "mean_rows";
    case OpKind::l2_normalize_rows: return "l2_normalize_rows";
    case OpKind::layer_norm_rows: return "layer_norm_rows";
    case OpKind::relu: return "relu";
    case OpKind::transpose: return "transpose";
  }
  return "unknown";
}

const Matrix& GradientMap::at(NodeId id) const {
  auto it = grads_.find(id);
  if (it == grads_.end()) throw Error("no gradient recorded for node " + std::to_string(id));
  return it->second;
}

namespace {

// Below this norm a row has no direction to normalize to.
constexpr double kMinRowNorm = 1e-12;

enum class Broadcast { none, row, scalar };

Broadcast broadcast_kind(const Matrix& a, const Matrix& b, std::string_view op) {
  if (a.same_shape(b)) return Broadcast::none;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::row;
  if (b.rows() == 1 && b.cols() == 1) return Broadcast::scalar;
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape() + " and " + b.shape());
}

void expect_arity(OpKind op, std::span<const NodeId> inputs, std::size_t n) {
  if (inputs.size() != n) {
    throw ShapeError(std::string(op_name(op)) + ": expected " + std::to_string(n) +
                     " inputs, got " + std::to_string(inputs.size()));
  }
}

void accumulate(std::vector<Matrix>& grads, NodeId id, const Matrix& g) {
  Matrix& dst = grads[id];
  if (dst.empty() && g.size() != 0) {
    dst = g;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

Matrix& grad_slot(std::vector<Matrix>& grads, NodeId id, std::size_t rows, std::size_t cols) {
  Matrix& dst = grads[id];
  if (dst.empty()) dst = Matrix(rows, cols);
  return dst;
}

}  // namespace

NodeId Graph::push(Node node) {
  node.id = static_cast<NodeId>(nodes_.size());
  nodes_.push_back(std::move(node));
  return nodes_.back().id;
}

NodeId Graph::parameter(Matrix value) {
  if (!value.all_finite()) throw NumericError("parameter contains non-finite values");
  Node n;
  n.op = OpKind::leaf;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

NodeId Graph::constant(Matrix value) {
  if (!value.all_finite()) throw NumericError("constant contains non-finite values");
  Node n;
  n.op = OpKind::leaf;
  n.value = std::move(value);
  return push(std::move(n));
}

double Graph::scalar(NodeId id) const {
  const Matrix& v = value(id);
  if (v.rows() != 1 || v.cols() != 1) throw ShapeError("scalar(): node is " + v.shape());
  return v[0];
}

NodeId Graph::apply(OpKind op, std::span<const NodeId> inputs, const OpAttrs& attrs) {
  for (NodeId id : inputs) {
    if (id >= nodes_.size()) throw Error("apply: unknown input node " + std::to_string(id));
  }
  Node out;
  out.op = op;
  out.inputs.assign(inputs.begin(), inputs.end());
  out.attrs = attrs;
  out.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                  [&](NodeId id) { return nodes_[id].requires_grad; });
  auto in = [&](std::size_t i) -> const Matrix& { return nodes_[inputs[i]].value; };

  switch (op) {
    case OpKind::leaf:
      throw Error("apply: leaves are created with parameter() or constant()");

    case OpKind::matmul: {
      expect_arity(op, inputs, 2);
      const Matrix& a = in(0);
      const Matrix& b = in(1);
      const std::size_t inner = attrs.transpose_rhs ? b.cols() : b.rows();
      const std::size_t n = attrs.transpose_rhs ? b.rows() : b.cols();
      if (a.cols() != inner) {
        throw ShapeError("matmul: " + a.shape() + " * " + b.shape() +
                         (attrs.transpose_rhs ? "^T" : ""));
      }
      out.value = Matrix(a.rows(), n);
      k::gemm(a, false, b, attrs.transpose_rhs, out.value);
      break;
    }

    case OpKind::affine: {
      expect_arity(op, inputs, 3);
      const Matrix& x = in(0);
      const Matrix& w = in(1);
      const Matrix& b = in(2);
      if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
        throw ShapeError("affine: " + x.shape() + " * " + w.shape() + " + " + b.shape());
      }
      out.value = Matrix(x.rows(), w.cols());
      k::gemm(x, false, w, false, out.value);
      for (std::size_t r = 0; r < out.value.rows(); ++r) {
        auto row = out.value.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) {
          const double v = row[c] + b[c];
          row[c] = attrs.relu && v < 0.0 ? 0.0 : v;
        }
      }
      break;
    }

    case OpKind::add: {
      expect_arity(op, inputs, 2);
      const Matrix& a = in(0);
      const Matrix& b = in(1);
      const Broadcast bc = broadcast_kind(a, b, "add");
      out.value = a;
      auto& v = out.value;
      if (bc == Broadcast::none) {
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += b[i];
      } else if (bc == Broadcast::row) {
        for (std::size_t r = 0; r < v.rows(); ++r)
          for (std::size_t c = 0; c < v.cols(); ++c) v(r, c) += b[c];
      } else {
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += b[0];
      }
      break;
    }

    case OpKind::scale: {
      expect_arity(op, inputs, 1);
      out.value = in(0);
      for (double& x : out.value.values()) x *= attrs.scalar;
      break;
    }

    case OpKind::concat_rows: {
      if (inputs.empty()) throw ShapeError("concat_rows: no inputs");
      const std::size_t cols = in(0).cols();
      std::size_t rows = 0;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (in(i).cols() != cols) {
          throw ShapeError("concat_rows: " + in(0).shape() + " and " + in(i).shape() +
                           " differ in column count");
        }
        rows += in(i).rows();
      }
      out.value = Matrix(rows, cols);
      double* dst = out.value.data();
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        dst = std::copy(in(i).data(), in(i).data() + in(i).size(), dst);
      }
      break;
    }

    case OpKind::slice_rows: {
      expect_arity(op, inputs, 1);
      const Matrix& a = in(0);
      if (attrs.offset + attrs.count > a.rows()) {
        throw ShapeError("slice_rows: rows [" + std::to_string(attrs.offset) + ", " +
                         std::to_string(attrs.offset + attrs.count) + ") out of range for " +
                         a.shape());
      }
      out.value = Matrix(attrs.count, a.cols());
      std::copy(a.data() + attrs.offset * a.cols(),
                a.data() + (attrs.offset + attrs.count) * a.cols(), out.value.data());
      break;
    }

    case OpKind::row_softmax: {
      expect_arity(op, inputs, 1);
      if (in(0).cols() == 0) throw ShapeError("row_softmax: zero-width input " + in(0).shape());
      out.value = Matrix(in(0).rows(), in(0).cols());
      k::softmax_rows(in(0), out.value);
      break;
    }

    case OpKind::log_softmax_rows: {
      expect_arity(op, inputs, 1);
      const Matrix& x = in(0);
      if (x.cols() == 0) throw ShapeError("log_softmax_rows: zero-width input " + x.shape());
      out.value = Matrix(x.rows(), x.cols());
      for (std::size_t r = 0; r < x.rows(); ++r) {
        double mx = x(r, 0);
        for (std::size_t c = 1; c < x.cols(); ++c) mx = std::max(mx, x(r, c));
        double sum = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) sum += std::exp(x(r, c) - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t c = 0; c < x.cols(); ++c) out.value(r, c) = x(r, c) - lse;
      }
      break;
    }

    case OpKind::log: {
      expect_arity(op, inputs, 1);
      out.value = in(0);
      for (double& x : out.value.values()) x = std::log(x);
      break;
    }

    case OpKind::exp: {
      expect_arity(op, inputs, 1);
      out.value = in(0);
      for (double& x : out.value.values()) x = std::exp(x);
      break;
    }

    case OpKind::elementwise_mul: {
      expect_arity(op, inputs, 2);
      const Matrix& a = in(0);
      const Matrix& b = in(1);
      const Broadcast bc = broadcast_kind(a, b, "elementwise_mul");
      if (bc == Broadcast::scalar) {
        throw ShapeError("elementwise_mul: scalar operand " + b.shape() + " (use scale)");
      }
      out.value = a;
      auto& v = out.value;
      if (bc == Broadcast::none) {
        for (std::size_t i = 0; i < v.size(); ++i) v[i] *= b[i];
      } else {
        for (std::size_t r = 0; r < v.rows(); ++r)
          for (std::size_t c = 0; c < v.cols(); ++c) v(r, c) *= b[c];
      }
      break;
    }

    case OpKind::mean_all: {
      expect_arity(op, inputs, 1);
      const Matrix& a = in(0);
      if (a.size() == 0) throw ShapeError("mean_all: empty input " + a.shape());
      double s = 0.0;
      for (double x : a.values()) s += x;
      out.value = Matrix::scalar(s / static_cast<double>(a.size()));
      break;
    }

    case OpKind::mean_rows: {
      expect_arity(op, inputs, 1);
      const Matrix& a = in(0);
      if (a.rows() == 0) throw ShapeError("mean_rows: empty input " + a.shape());
      out.value = Matrix(1, a.cols());
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) out.value[c] += a(r, c);
      for (double& x : out.value.values()) x /= static_cast<double>(a.rows());
      break;
    }

    case OpKind::l2_normalize_rows: {
      expect_arity(op, inputs, 1);
      out.value = Matrix(in(0).rows(), in(0).cols());
      k::l2_normalize_rows(in(0), out.value, out.aux);
      for (std::size_t r = 0; r < out.aux.size(); ++r) {
        if (!(out.aux[r] >= kMinRowNorm)) {
          throw NumericError("l2_normalize_rows: row " + std::to_string(r) + " has norm " +
                             std::to_string(out.aux[r]) + " < 1e-12");
        }
      }
      break;
    }

    case OpKind::layer_norm_rows: {
      expect_arity(op, inputs, 1);
      if (in(0).cols() == 0) throw ShapeError("layer_norm_rows: zero-width input");
      out.value = Matrix(in(0).rows(), in(0).cols());
      k::layer_norm_rows(in(0), out.value, out.aux);
      break;
    }

    case OpKind::relu: {
      expect_arity(op, inputs, 1);
      out.value = in(0);
      for (double& x : out.value.values()) x = x > 0.0 ? x : 0.0;
      break;
    }

    case OpKind::transpose: {
      expect_arity(op, inputs, 1);
      out.value = in(0).transposed();
      break;
    }
  }

  if (!out.value.all_finite()) {
    throw NumericError(std::string(op_name(op)) + " produced non-finite values (output " +
                       out.value.shape() + ")");
  }
  return push(std::move(out));
}

NodeId Graph::matmul(NodeId a, NodeId b, bool transpose_rhs) {
  OpAttrs attrs;
  attrs.transpose_rhs = transpose_rhs;
  const std::array<NodeId, 2> in{a, b};
  return apply(OpKind::matmul, in, attrs);
}

NodeId Graph::affine(NodeId x, NodeId w, NodeId b, bool relu) {
  OpAttrs attrs;
  attrs.relu = relu;
  const std::array<NodeId, 3> in{x, w, b};
  return apply(OpKind::affine, in, attrs);
}

NodeId Graph::add(NodeId a, NodeId b) {
  const std::array<NodeId, 2> in{a, b};
  return apply(OpKind::add, in);
}

NodeId Graph::sub(NodeId a, NodeId b) { return add(a, scale(b, -1.0)); }

NodeId Graph::scale(NodeId a, double s) {
  OpAttrs attrs;
  attrs.scalar = s;
  const std::array<NodeId, 1> in{a};
  return apply(OpKind::scale, in, attrs);
}

NodeId Graph::concat_rows(std::span<const NodeId> parts) {
  return apply(OpKind::concat_rows, parts);
}

NodeId Graph::slice_rows(NodeId a, std::size_t offset, std::size_t count) {
  OpAttrs attrs;
  attrs.offset = offset;
  attrs.count = count;
  const std::array<NodeId, 1> in{a};
  return apply(OpKind::slice_rows, in, attrs);
}

#define PTAT_UNARY(method, kind)                 \
  NodeId Graph::method(NodeId a) {               \
    const std::array<NodeId, 1> in{a};           \
    return apply(OpKind::kind, in);              \
  }

PTAT_UNARY(row_softmax, row_softmax)
PTAT_UNARY(log_softmax_rows, log_softmax_rows)
PTAT_UNARY(log, log)
PTAT_UNARY(exp, exp)
PTAT_UNARY(mean_all, mean_all)
PTAT_UNARY(mean_rows, mean_rows)
PTAT_UNARY(l2_normalize_rows, l2_normalize_rows)
PTAT_UNARY(layer_norm_rows, layer_norm_rows)
PTAT_UNARY(relu, relu)
PTAT_UNARY(transpose, transpose)

#undef PTAT_UNARY

NodeId Graph::mul(NodeId a, NodeId b) {
  const std::array<NodeId, 2> in{a, b};
  return apply(OpKind::elementwise_mul, in);
}

GradientMap Graph::backward(NodeId loss) const {
  const Matrix& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ShapeError("backward: loss must be 1x1, got " + lv.shape());
  }
  std::vector<Matrix> grads(loss + 1);
  grads[loss] = Matrix::scalar(1.0);

  for (NodeId id = loss + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!n.requires_grad || grads[id].empty()) continue;
    const Matrix& g = grads[id];
    auto needs = [&](std::size_t i) { return nodes_[n.inputs[i]].requires_grad; };
    auto input = [&](std::size_t i) -> const Matrix& { return nodes_[n.inputs[i]].value; };

    switch (n.op) {
      case OpKind::leaf:
        break;

      case OpKind::affine: {
        // g is this node's own gradient buffer and is not read again.
        Matrix& gz = grads[id];
        if (n.attrs.relu) {
          for (std::size_t i = 0; i < gz.size(); ++i)
            if (n.value[i] <= 0.0) gz[i] = 0.0;
        }
        const Matrix& x = input(0);
        const Matrix& w = input(1);
        if (needs(0)) k::gemm(gz, false, w, true, grad_slot(grads, n.inputs[0], x.rows(), x.cols()), true);
        if (needs(1)) k::gemm(x, true, gz, false, grad_slot(grads, n.inputs[1], w.rows(), w.cols()), true);
        if (needs(2)) {
          Matrix& db = grad_slot(grads, n.inputs[2], 1, w.cols());
          for (std::size_t r = 0; r < gz.rows(); ++r)
            for (std::size_t c = 0; c < gz.cols(); ++c) db[c] += gz(r, c);
        }
        break;
      }

      case OpKind::matmul: {
        const Matrix& a = input(0);
        const Matrix& b = input(1);
        if (needs(0)) {
          Matrix& da = grad_slot(grads, n.inputs[0], a.rows(), a.cols());
          // C = A B  -> dA = G B^T ;  C = A B^T -> dA = G B
          k::gemm(g, false, b, !n.attrs.transpose_rhs, da, true);
        }
        if (needs(1)) {
          Matrix& db = grad_slot(grads, n.inputs[1], b.rows(), b.cols());
          if (n.attrs.transpose_rhs) {
            k::gemm(g, true, a, false, db, true);  // dB = G^T A
          } else {
            k::gemm(a, true, g, false, db, true);  // dB = A^T G
          }
        }
        break;
      }

      case OpKind::add: {
        if (needs(0)) accumulate(grads, n.inputs[0], g);
        if (needs(1)) {
          const Matrix& b = input(1);
          const Broadcast bc = broadcast_kind(input(0), b, "add");
          if (bc == Broadcast::none) {
            accumulate(grads, n.inputs[1], g);
          } else {
            Matrix& db = grad_slot(grads, n.inputs[1], b.rows(), b.cols());
            for (std::size_t r = 0; r < g.rows(); ++r)
              for (std::size_t c = 0; c < g.cols(); ++c)
                db[bc == Broadcast::row ? c : 0] += g(r, c);
          }
        }
        break;
      }

      case OpKind::scale: {
        Matrix& da = grad_slot(grads, n.inputs[0], g.rows(), g.cols());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += n.attrs.scalar * g[i];
        break;
      }

      case OpKind::concat_rows: {
        std::size_t row = 0;
        for (std::size_t i = 0; i < n.inputs.size(); ++i) {
          const Matrix& part = input(i);
          if (needs(i)) {
            Matrix& dp = grad_slot(grads, n.inputs[i], part.rows(), part.cols());
            const double* src = g.data() + row * g.cols();
            for (std::size_t j = 0; j < dp.size(); ++j) dp[j] += src[j];
          }
          row += part.rows();
        }
        break;
      }

      case OpKind::slice_rows: {
        const Matrix& a = input(0);
        Matrix& da = grad_slot(grads, n.inputs[0], a.rows(), a.cols());
        double* dst = da.data() + n.attrs.offset * a.cols();
        for (std::size_t j = 0; j < g.size(); ++j) dst[j] += g[j];
        break;
      }

      case OpKind::row_softmax: {
        const Matrix& y = n.value;
        Matrix& da = grad_slot(grads, n.inputs[0], y.rows(), y.cols());
        for (std::size_t r = 0; r < y.rows(); ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
          for (std::size_t c = 0; c < y.cols(); ++c) da(r, c) += y(r, c) * (g(r, c) - dot);
        }
        break;
      }

      case OpKind::log_softmax_rows: {
        const Matrix& y = n.value;
        Matrix& da = grad_slot(grads, n.inputs[0], y.rows(), y.cols());
        for (std::size_t r = 0; r < y.rows(); ++r) {
          double gsum = 0.0;
          for (std::size_t c = 0; c < y.cols(); ++c) gsum += g(r, c);
          for (std::size_t c = 0; c < y.cols(); ++c) da(r, c) += g(r, c) - std::exp(y(r, c)) * gsum;
        }
        break;
      }

      case OpKind::log: {
        const Matrix& x = input(0);
        Matrix& da = grad_slot(grads, n.inputs[0], x.rows(), x.cols());
        for (std::size_t i = 0; i < x.size(); ++i) da[i] += g[i] / x[i];
        break;
      }

      case OpKind::exp: {
        const Matrix& y = n.value;
        Matrix& da = grad_slot(grads, n.inputs[0], y.rows(), y.cols());
        for (std::size_t i = 0; i < y.size(); ++i) da[i] += g[i] * y[i];
        break;
      }

      case OpKind::elementwise_mul: {
        const Matrix& a = input(0);
        const Matrix& b = input(1);
        const bool row_bc = !a.same_shape(b);
        if (needs(0)) {
          Matrix& da = grad_slot(grads, n.inputs[0], a.rows(), a.cols());
          for (std::size_t r = 0; r < a.rows(); ++r)
            for (std::size_t c = 0; c < a.cols(); ++c)
              da(r, c) += g(r, c) * (row_bc ? b[c] : b(r, c));
        }
        if (needs(1)) {
          Matrix& db = grad_slot(grads, n.inputs[1], b.rows(), b.cols());
          for (std::size_t r = 0; r < a.rows(); ++r)
            for (std::size_t c = 0; c < a.cols(); ++c)
              (row_bc ? db[c] : db(r, c)) += g(r, c) * a(r, c);
        }
        break;
      }

      case OpKind::mean_all: {
        const Matrix& a = input(0);
        Matrix& da = grad_slot(grads, n.inputs[0], a.rows(), a.cols());
        const double share = g[0] / static_cast<double>(a.size());
        for (double& x : da.values()) x += share;
        break;
      }

      case OpKind::mean_rows: {
        const Matrix& a = input(0);
        Matrix& da = grad_slot(grads, n.inputs[0], a.rows(), a.cols());
        const double inv = 1.0 / static_cast<double>(a.rows());
        for (std::size_t r = 0; r < a.rows(); ++r)
          for (std::size_t c = 0; c < a.cols(); ++c) da(r, c) += g[c] * inv;
        break;
      }

      case OpKind::l2_normalize_rows: {
        const Matrix& y = n.value;
        Matrix& da = grad_slot(grads, n.inputs[0], y.rows(), y.cols());
        for (std::size_t r = 0; r < y.rows(); ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
          const double inv = 1.0 / n.aux[r];
          for (std::size_t c = 0; c < y.cols(); ++c) da(r, c) += (g(r, c) - y(r, c) * dot) * inv;
        }
        break;
      }

      case OpKind::layer_norm_rows: {
        const Matrix& y = n.value;
        Matrix& da = grad_slot(grads, n.inputs[0], y.rows(), y.cols());
        const double cols = static_cast<double>(y.cols());
        for (std::size_t r = 0; r < y.rows(); ++r) {
          double mean_g = 0.0;
          double mean_gy = 0.0;
          for (std::size_t c = 0; c < y.cols(); ++c) {
            mean_g += g(r, c);
            mean_gy += g(r, c) * y(r, c);
          }
          mean_g /= cols;
          mean_gy /= cols;
          for (std::size_t c = 0; c < y.cols(); ++c)
            da(r, c) += n.aux[r] * (g(r, c) - mean_g - y(r, c) * mean_gy);
        }
        break;
      }

      case OpKind::relu: {
        const Matrix& x = input(0);
        Matrix& da = grad_slot(grads, n.inputs[0], x.rows(), x.cols());
        for (std::size_t i = 0; i < x.size(); ++i)
          if (x[i] > 0.0) da[i] += g[i];
        break;
      }

      case OpKind::transpose: {
        const Matrix& a = input(0);
        Matrix& da = grad_slot(grads, n.inputs[0], a.rows(), a.cols());
        for (std::size_t r = 0; r < a.rows(); ++r)
          for (std::size_t c = 0; c < a.cols(); ++c) da(r, c) += g(c, r);
        break;
      }
    }
    // Interior gradients are consumed; freeing them keeps the working set small.
    if (n.op != OpKind::leaf) grads[id] = Matrix();
  }

  GradientMap out;
  for (NodeId id = 0; id <= loss; ++id) {
    const Node& n = nodes_[id];
    if (n.op != OpKind::leaf || !n.requires_grad) continue;
    if (grads[id].empty()) continue;
    out.insert(id, std::move(grads[id]));
  }
  return out;
}

double finite_difference_check(const LossBuilder& builder, const std::vector<Matrix>& params,
                               double epsilon) {
  if (!(epsilon > 0.0)) throw ValidationError("finite_difference_check: epsilon must be > 0");

  auto evaluate = [&](const std::vector<Matrix>& values) {
    Graph g;
    std::vector<NodeId> ids;
    ids.reserve(values.size());
    for (const auto& v : values) ids.push_back(g.parameter(v));
    return g.scalar(builder(g, ids));
  };

  Graph g;
  std::vector<NodeId> ids;
  for (const auto& p : params) ids.push_back(g.parameter(p));
  const NodeId loss = builder(g, ids);
  const double base = g.scalar(loss);
  if (evaluate(params) != base) {
    throw ValidationError("finite_difference_check: loss builder is not deterministic");
  }
  const GradientMap grads = g.backward(loss);

  double worst = 0.0;
  std::vector<Matrix> work = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double orig = params[p][i];
      work[p][i] = orig + epsilon;
      const double up = evaluate(work);
      work[p][i] = orig - epsilon;
      const double down = evaluate(work);
      work[p][i] = orig;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double analytic = grads.contains(ids[p]) ? grads.at(ids[p])[i] : 0.0;
      worst = std::max(worst, std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

}  // namespace ptat::diffmath
