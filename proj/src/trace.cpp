// Copyright 2026 The twdpo-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "twdpo/trace.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <utility>

#include "twdpo/error.hpp"
#include "twdpo/numerics.hpp"

namespace twdpo::numerics {
namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

void require(bool ok, const char* what) {
  if (!ok) {
    throw Error(ErrorKind::invalid_argument, what);
  }
}

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::constant: return "constant";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::scale: return "scale";
    case Op::add_row: return "add_row";
    case Op::matmul: return "matmul";
    case Op::transpose: return "transpose";
    case Op::gelu: return "gelu";
    case Op::layer_norm: return "layer_norm";
    case Op::causal_softmax: return "causal_softmax";
    case Op::log_softmax_rows: return "log_softmax_rows";
    case Op::gather_rows: return "gather_rows";
    case Op::pick: return "pick";
    case Op::slice_cols: return "slice_cols";
    case Op::concat_cols: return "concat_cols";
    case Op::sum: return "sum";
    case Op::weighted_sum: return "weighted_sum";
    case Op::log_sigmoid: return "log_sigmoid";
    case Op::exp: return "exp";
    case Op::log: return "log";
  }
  return "?";
}

// C[m x n] += A[m x k] * B[k x n]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

double gelu_value(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_deriv(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

Tensor evaluate(const Node& node, const std::vector<Node>& nodes) {
  auto in = [&](std::size_t i) -> const Tensor& { return nodes[node.inputs[i]].value; };
  switch (node.op) {
    case Op::leaf:
    case Op::constant:
      return node.value;
    case Op::add:
    case Op::sub:
    case Op::mul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      require(a.same_shape(b), "elementwise op requires equal shapes");
      Tensor out = a;
      for (std::size_t i = 0; i < out.size(); ++i) {
        if (node.op == Op::add) {
          out[i] += b[i];
        } else if (node.op == Op::sub) {
          out[i] -= b[i];
        } else {
          out[i] *= b[i];
        }
      }
      return out;
    }
    case Op::scale: {
      Tensor out = in(0);
      for (double& v : out.values()) {
        v *= node.real_attr[0];
      }
      return out;
    }
    case Op::add_row: {
      const Tensor& x = in(0);
      const Tensor& b = in(1);
      require(x.rank() == 2 && b.size() == x.cols(), "add_row shape mismatch");
      Tensor out = x;
      for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) {
          out.at(r, c) += b[c];
        }
      }
      return out;
    }
    case Op::matmul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      require(a.rank() == 2 && b.rank() == 2 && a.cols() == b.rows(), "matmul shape mismatch");
      Tensor out({a.rows(), b.cols()});
      gemm_acc(a.data().data(), b.data().data(), out.data().data(), a.rows(), a.cols(), b.cols());
      return out;
    }
    case Op::transpose: {
      const Tensor& a = in(0);
      require(a.rank() == 2, "transpose needs a matrix");
      Tensor out({a.cols(), a.rows()});
      for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = 0; c < a.cols(); ++c) {
          out.at(c, r) = a.at(r, c);
        }
      }
      return out;
    }
    case Op::gelu: {
      Tensor out = in(0);
      for (double& v : out.values()) {
        v = gelu_value(v);
      }
      return out;
    }
    case Op::layer_norm: {
      const Tensor& x = in(0);
      const Tensor& g = in(1);
      const Tensor& b = in(2);
      require(g.size() == x.cols() && b.size() == x.cols(), "layer_norm shape mismatch");
      const double eps = node.real_attr[0];
      const std::size_t c = x.cols();
      Tensor out = Tensor::zeros_like(x);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        const double* row = x.data().data() + r * c;
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          mean += row[j];
        }
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          var += (row[j] - mean) * (row[j] - mean);
        }
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
          out[r * c + j] = (row[j] - mean) * inv * g[j] + b[j];
        }
      }
      return out;
    }
    case Op::causal_softmax: {
      const Tensor& s = in(0);
      require(s.rank() == 2 && s.rows() == s.cols(), "causal_softmax needs a square matrix");
      const double factor = node.real_attr[0];
      const std::size_t n = s.rows();
      Tensor out({n, n});
      for (std::size_t i = 0; i < n; ++i) {
        double mx = factor * s.at(i, 0);
        for (std::size_t j = 1; j <= i; ++j) {
          mx = std::max(mx, factor * s.at(i, j));
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          const double e = std::exp(factor * s.at(i, j) - mx);
          out.at(i, j) = e;
          z += e;
        }
        for (std::size_t j = 0; j <= i; ++j) {
          out.at(i, j) /= z;
        }
      }
      return out;
    }
    case Op::log_softmax_rows: {
      Tensor out = in(0);
      const std::size_t c = out.cols();
      for (std::size_t r = 0; r < out.rows(); ++r) {
        std::span<double> row(out.data().data() + r * c, c);
        const double lse = logsumexp(row);
        for (double& v : row) {
          v -= lse;
        }
      }
      return out;
    }
    case Op::gather_rows: {
      const Tensor& t = in(0);
      require(t.rank() == 2, "gather_rows needs a matrix");
      const std::size_t d = t.cols();
      Tensor out({node.index_attr.size(), d});
      for (std::size_t i = 0; i < node.index_attr.size(); ++i) {
        const std::size_t id = node.index_attr[i];
        require(id < t.rows(), "gather_rows index out of range");
        std::copy_n(t.data().data() + id * d, d, out.data().data() + i * d);
      }
      return out;
    }
    case Op::pick: {
      const Tensor& x = in(0);
      std::vector<double> vals;
      vals.reserve(node.index_attr.size());
      for (std::size_t idx : node.index_attr) {
        require(idx < x.size(), "pick index out of range");
        vals.push_back(x[idx]);
      }
      return Tensor::vector(std::move(vals));
    }
    case Op::slice_cols: {
      const Tensor& x = in(0);
      const std::size_t start = node.index_attr[0];
      const std::size_t count = node.index_attr[1];
      require(count > 0 && start + count <= x.cols(), "slice_cols out of range");
      std::vector<std::size_t> shape = x.shape();
      shape.back() = count;
      Tensor out(shape);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        std::copy_n(x.data().data() + r * x.cols() + start, count,
                    out.data().data() + r * count);
      }
      return out;
    }
    case Op::concat_cols: {
      const std::size_t rows = in(0).rows();
      std::size_t total = 0;
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        require(in(i).rows() == rows, "concat_cols row mismatch");
        total += in(i).cols();
      }
      Tensor out({rows, total});
      std::size_t offset = 0;
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        const Tensor& part = in(i);
        for (std::size_t r = 0; r < rows; ++r) {
          std::copy_n(part.data().data() + r * part.cols(), part.cols(),
                      out.data().data() + r * total + offset);
        }
        offset += part.cols();
      }
      return out;
    }
    case Op::sum: {
      double s = 0.0;
      for (double v : in(0).values()) {
        s += v;
      }
      return Tensor::scalar(s);
    }
    case Op::weighted_sum: {
      const Tensor& x = in(0);
      require(x.size() == node.real_attr.size(), "weighted_sum length mismatch");
      double s = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        s += node.real_attr[i] * x[i];
      }
      return Tensor::scalar(s);
    }
    case Op::log_sigmoid: {
      Tensor out = in(0);
      for (double& v : out.values()) {
        v = numerics::log_sigmoid(v);
      }
      return out;
    }
    case Op::exp: {
      Tensor out = in(0);
      for (double& v : out.values()) {
        v = std::exp(v);
      }
      return out;
    }
    case Op::log: {
      Tensor out = in(0);
      for (double& v : out.values()) {
        v = std::log(v);
      }
      return out;
    }
  }
  throw Error(ErrorKind::invalid_argument, "unknown op");
}

void accumulate(Tensor& dst, const Tensor& like) {
  if (dst.empty()) {
    dst = Tensor::zeros_like(like);
  }
}

}  // namespace

NodeId Trace::push(Node node) {
  for (NodeId in : node.inputs) {
    require(in < nodes_.size(), "trace input refers to an unknown node");
  }
  if (node.op != Op::leaf && node.op != Op::constant) {
    node.value = evaluate(node, nodes_);
  }
  if (!node.value.all_finite()) {
    throw Error(ErrorKind::numeric_failure,
                std::string("op ") + op_name(node.op) + " produced a non-finite value");
  }
  const auto id = static_cast<NodeId>(nodes_.size());
  if (node.op == Op::leaf) {
    node.leaf_slot = static_cast<std::int32_t>(leaves_.size());
    leaves_.push_back(id);
  }
  nodes_.push_back(std::move(node));
  return id;
}

NodeId Trace::leaf(Tensor value) {
  Node n;
  n.op = Op::leaf;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Trace::constant(Tensor value) {
  Node n;
  n.op = Op::constant;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Trace::add(NodeId a, NodeId b) { return push({Op::add, {a, b}, {}, {}, {}}); }
NodeId Trace::sub(NodeId a, NodeId b) { return push({Op::sub, {a, b}, {}, {}, {}}); }
NodeId Trace::mul(NodeId a, NodeId b) { return push({Op::mul, {a, b}, {}, {}, {}}); }
NodeId Trace::scale(NodeId a, double factor) { return push({Op::scale, {a}, {}, {factor}, {}}); }
NodeId Trace::add_row(NodeId x, NodeId b) { return push({Op::add_row, {x, b}, {}, {}, {}}); }
NodeId Trace::matmul(NodeId a, NodeId b) { return push({Op::matmul, {a, b}, {}, {}, {}}); }
NodeId Trace::transpose(NodeId a) { return push({Op::transpose, {a}, {}, {}, {}}); }
NodeId Trace::gelu(NodeId a) { return push({Op::gelu, {a}, {}, {}, {}}); }

NodeId Trace::layer_norm(NodeId x, NodeId gain, NodeId bias, double eps) {
  return push({Op::layer_norm, {x, gain, bias}, {}, {eps}, {}});
}

NodeId Trace::causal_softmax(NodeId scores, double factor) {
  return push({Op::causal_softmax, {scores}, {}, {factor}, {}});
}

NodeId Trace::log_softmax_rows(NodeId x) { return push({Op::log_softmax_rows, {x}, {}, {}, {}}); }

NodeId Trace::gather_rows(NodeId table, std::span<const std::size_t> ids) {
  return push({Op::gather_rows, {table}, {ids.begin(), ids.end()}, {}, {}});
}

NodeId Trace::pick(NodeId x, std::span<const std::size_t> flat_indices) {
  require(!flat_indices.empty(), "pick needs at least one index");
  return push({Op::pick, {x}, {flat_indices.begin(), flat_indices.end()}, {}, {}});
}

NodeId Trace::slice_cols(NodeId x, std::size_t start, std::size_t count) {
  return push({Op::slice_cols, {x}, {start, count}, {}, {}});
}

NodeId Trace::concat_cols(std::span<const NodeId> parts) {
  require(!parts.empty(), "concat_cols needs at least one part");
  return push({Op::concat_cols, {parts.begin(), parts.end()}, {}, {}, {}});
}

NodeId Trace::sum(NodeId x) { return push({Op::sum, {x}, {}, {}, {}}); }

NodeId Trace::weighted_sum(NodeId x, std::span<const double> weights) {
  return push({Op::weighted_sum, {x}, {}, {weights.begin(), weights.end()}, {}});
}

NodeId Trace::log_sigmoid(NodeId x) { return push({Op::log_sigmoid, {x}, {}, {}, {}}); }
NodeId Trace::exp(NodeId x) { return push({Op::exp, {x}, {}, {}, {}}); }
NodeId Trace::log(NodeId x) { return push({Op::log, {x}, {}, {}, {}}); }

Trace Trace::replay(std::span<const Tensor> leaf_values) const {
  require(leaf_values.size() == leaves_.size(), "replay needs one value per leaf");
  Trace out;
  out.nodes_.reserve(nodes_.size());
  for (const Node& n : nodes_) {
    Node copy;
    copy.op = n.op;
    copy.inputs = n.inputs;
    copy.index_attr = n.index_attr;
    copy.real_attr = n.real_attr;
    if (n.op == Op::leaf) {
      const Tensor& v = leaf_values[static_cast<std::size_t>(n.leaf_slot)];
      require(v.same_shape(n.value), "replay leaf shape mismatch");
      copy.value = v;
    } else if (n.op == Op::constant) {
      copy.value = n.value;
    }
    out.push(std::move(copy));
  }
  return out;
}

Trace Trace::replay() const {
  std::vector<Tensor> values;
  values.reserve(leaves_.size());
  for (NodeId id : leaves_) {
    values.push_back(nodes_[id].value);
  }
  return replay(values);
}

std::vector<Tensor> reverse_grad(const Trace& trace, NodeId output, double seed) {
  require(output < trace.size(), "reverse_grad output is not a node of the trace");
  if (trace.value(output).size() != 1) {
    throw Error(ErrorKind::invalid_argument, "reverse_grad needs a scalar output node");
  }
  std::vector<Tensor> grads(static_cast<std::size_t>(output) + 1);
  grads[output] = Tensor(trace.value(output).shape(), {seed});

  for (std::size_t id = output + 1; id-- > 0;) {
    if (grads[id].empty()) {
      continue;
    }
    const Node& node = trace.node(static_cast<NodeId>(id));
    const Tensor& g = grads[id];
    auto input_value = [&](std::size_t i) -> const Tensor& {
      return trace.value(node.inputs[i]);
    };
    auto grad_of = [&](std::size_t i) -> Tensor& {
      Tensor& dst = grads[node.inputs[i]];
      accumulate(dst, input_value(i));
      return dst;
    };

    switch (node.op) {
      case Op::leaf:
      case Op::constant:
        break;
      case Op::add: {
        Tensor& da = grad_of(0);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        Tensor& db = grad_of(1);
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
        break;
      }
      case Op::sub: {
        Tensor& da = grad_of(0);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        Tensor& db = grad_of(1);
        for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
        break;
      }
      case Op::mul: {
        const Tensor& a = input_value(0);
        const Tensor& b = input_value(1);
        Tensor& da = grad_of(0);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * b[i];
        Tensor& db = grad_of(1);
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * a[i];
        break;
      }
      case Op::scale: {
        Tensor& da = grad_of(0);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * node.real_attr[0];
        break;
      }
      case Op::add_row: {
        Tensor& dx = grad_of(0);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
        Tensor& db = grad_of(1);
        const std::size_t c = g.cols();
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t j = 0; j < c; ++j) db[j] += g[r * c + j];
        }
        break;
      }
      case Op::matmul: {
        const Tensor& a = input_value(0);
        const Tensor& b = input_value(1);
        const std::size_t m = a.rows();
        const std::size_t k = a.cols();
        const std::size_t n = b.cols();
        Tensor& da = grad_of(0);
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = g.data().data() + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double* brow = b.data().data() + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            da[i * k + p] += acc;
          }
        }
        Tensor& db = grad_of(1);
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = g.data().data() + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            double* dbrow = db.data().data() + p * n;
            for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
          }
        }
        break;
      }
      case Op::transpose: {
        Tensor& da = grad_of(0);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t c = 0; c < g.cols(); ++c) da.at(c, r) += g.at(r, c);
        }
        break;
      }
      case Op::gelu: {
        const Tensor& x = input_value(0);
        Tensor& dx = grad_of(0);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * gelu_deriv(x[i]);
        break;
      }
      case Op::layer_norm: {
        const Tensor& x = input_value(0);
        const Tensor& gain = input_value(1);
        const double eps = node.real_attr[0];
        const std::size_t c = x.cols();
        const double inv_c = 1.0 / static_cast<double>(c);
        Tensor& dx = grad_of(0);
        Tensor& dgain = grad_of(1);
        Tensor& dbias = grad_of(2);
        std::vector<double> xhat(c);
        std::vector<double> dxhat(c);
        for (std::size_t r = 0; r < x.rows(); ++r) {
          const double* row = x.data().data() + r * c;
          const double* grow = g.data().data() + r * c;
          double mean = 0.0;
          for (std::size_t j = 0; j < c; ++j) mean += row[j];
          mean *= inv_c;
          double var = 0.0;
          for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
          var *= inv_c;
          const double inv = 1.0 / std::sqrt(var + eps);
          double mean_dxhat = 0.0;
          double mean_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            xhat[j] = (row[j] - mean) * inv;
            dxhat[j] = grow[j] * gain[j];
            dgain[j] += grow[j] * xhat[j];
            dbias[j] += grow[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat[j];
          }
          mean_dxhat *= inv_c;
          mean_dxhat_xhat *= inv_c;
          for (std::size_t j = 0; j < c; ++j) {
            dx[r * c + j] += inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
          }
        }
        break;
      }
      case Op::causal_softmax: {
        const Tensor& p = node.value;
        const double factor = node.real_attr[0];
        Tensor& ds = grad_of(0);
        const std::size_t n = p.rows();
        for (std::size_t i = 0; i < n; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j <= i; ++j) dot += p.at(i, j) * g.at(i, j);
          for (std::size_t j = 0; j <= i; ++j) {
            ds.at(i, j) += factor * p.at(i, j) * (g.at(i, j) - dot);
          }
        }
        break;
      }
      case Op::log_softmax_rows: {
        const Tensor& y = node.value;
        Tensor& dx = grad_of(0);
        const std::size_t c = y.cols();
        for (std::size_t r = 0; r < y.rows(); ++r) {
          double gsum = 0.0;
          for (std::size_t j = 0; j < c; ++j) gsum += g[r * c + j];
          for (std::size_t j = 0; j < c; ++j) {
            dx[r * c + j] += g[r * c + j] - std::exp(y[r * c + j]) * gsum;
          }
        }
        break;
      }
      case Op::gather_rows: {
        Tensor& dt = grad_of(0);
        const std::size_t d = g.cols();
        for (std::size_t i = 0; i < node.index_attr.size(); ++i) {
          double* dst = dt.data().data() + node.index_attr[i] * d;
          const double* src = g.data().data() + i * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
        break;
      }
      case Op::pick: {
        Tensor& dx = grad_of(0);
        for (std::size_t i = 0; i < node.index_attr.size(); ++i) dx[node.index_attr[i]] += g[i];
        break;
      }
      case Op::slice_cols: {
        Tensor& dx = grad_of(0);
        const std::size_t start = node.index_attr[0];
        const std::size_t count = node.index_attr[1];
        const std::size_t c = dx.cols();
        for (std::size_t r = 0; r < dx.rows(); ++r) {
          for (std::size_t j = 0; j < count; ++j) dx[r * c + start + j] += g[r * count + j];
        }
        break;
      }
      case Op::concat_cols: {
        const std::size_t total = g.cols();
        std::size_t offset = 0;
        for (std::size_t i = 0; i < node.inputs.size(); ++i) {
          Tensor& dp = grad_of(i);
          const std::size_t w = dp.cols();
          for (std::size_t r = 0; r < dp.rows(); ++r) {
            for (std::size_t j = 0; j < w; ++j) dp[r * w + j] += g[r * total + offset + j];
          }
          offset += w;
        }
        break;
      }
      case Op::sum: {
        Tensor& dx = grad_of(0);
        for (double& v : dx.values()) v += g[0];
        break;
      }
      case Op::weighted_sum: {
        Tensor& dx = grad_of(0);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[0] * node.real_attr[i];
        break;
      }
      case Op::log_sigmoid: {
        const Tensor& x = input_value(0);
        Tensor& dx = grad_of(0);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * sigmoid(-x[i]);
        break;
      }
      case Op::exp: {
        Tensor& dx = grad_of(0);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * node.value[i];
        break;
      }
      case Op::log: {
        const Tensor& x = input_value(0);
        Tensor& dx = grad_of(0);
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] / x[i];
        break;
      }
    }
  }

  std::vector<Tensor> out;
  out.reserve(trace.leaf_count());
  for (NodeId leaf : trace.leaves()) {
    if (leaf <= output && !grads[leaf].empty()) {
      out.push_back(std::move(grads[leaf]));
    } else {
      out.push_back(Tensor::zeros_like(trace.value(leaf)));
    }
  }
  return out;
}

}  // namespace twdpo::numerics
