#include "snaplab/autograd.hpp"

#include <cmath>
#include <unordered_set>

#include "snaplab/error.hpp"

namespace snaplab::ad {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

thread_local bool g_grad_enabled = true;

Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void Node::accumulate(const Tensor& g) {
  if (grad.size() == 0)
    grad = g;
  else
    grad += g;
}

Var Var::constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var Var::leaf(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

Tensor Var::grad() const {
  if (node_->grad.size() == 0) return Tensor::Zero(rows(), cols());
  return node_->grad;
}

double Var::item() const {
  if (value().size() != 1) throw ShapeError("item() on a non-scalar");
  return value()(0, 0);
}

void Var::zero_grad() { node_->grad.resize(0, 0); }

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (!g_grad_enabled) return Var(std::move(n));
  for (const Var& in : inputs) {
    if (in.requires_grad()) {
      n->requires_grad = true;
      break;
    }
  }
  if (n->requires_grad) {
    n->parents.reserve(inputs.size());
    for (Var& in : inputs) n->parents.push_back(in.node());
    n->backward_fn = std::move(backward);
  }
  return Var(std::move(n));
}

void backward(const Var& output) {
  if (output.value().size() != 1) throw ShapeError("backward() requires a scalar output");
  if (!output.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{output.node().get(), 0}};
  seen.insert(output.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  output.node()->accumulate(Tensor::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
  // Interior gradients are not needed after the sweep.
  for (Node* n : order) {
    if (n->backward_fn) n->grad.resize(0, 0);
  }
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()));
  Tensor out = a.value() * b.value();
  return make_result(std::move(out), {a, b}, [](Node& n) {
    Node& pa = parent(n, 0);
    Node& pb = parent(n, 1);
    if (pa.requires_grad) pa.accumulate(n.grad * pb.value.transpose());
    if (pb.requires_grad) pb.accumulate(pa.value.transpose() * n.grad);
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  return make_result(a.value() + b.value(), {a, b}, [](Node& n) {
    if (parent(n, 0).requires_grad) parent(n, 0).accumulate(n.grad);
    if (parent(n, 1).requires_grad) parent(n, 1).accumulate(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  return make_result(a.value() - b.value(), {a, b}, [](Node& n) {
    if (parent(n, 0).requires_grad) parent(n, 0).accumulate(n.grad);
    if (parent(n, 1).requires_grad) parent(n, 1).accumulate(-n.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value().cwiseProduct(b.value());
  return make_result(std::move(out), {a, b}, [](Node& n) {
    Node& pa = parent(n, 0);
    Node& pb = parent(n, 1);
    if (pa.requires_grad) pa.accumulate(n.grad.cwiseProduct(pb.value));
    if (pb.requires_grad) pb.accumulate(n.grad.cwiseProduct(pa.value));
  });
}

Var scale(const Var& a, double s) {
  return make_result(a.value() * s, {a}, [s](Node& n) { parent(n, 0).accumulate(n.grad * s); });
}

Var add_row(const Var& a, const Var& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) throw ShapeError("add_row: bias must be 1 x cols");
  Tensor out = a.value().rowwise() + bias.value().row(0);
  return make_result(std::move(out), {a, bias}, [](Node& n) {
    if (parent(n, 0).requires_grad) parent(n, 0).accumulate(n.grad);
    if (parent(n, 1).requires_grad) parent(n, 1).accumulate(n.grad.colwise().sum());
  });
}

Var row_scale(const Var& a, const Vector& coeff) {
  if (coeff.size() != a.rows()) throw ShapeError("row_scale: coefficient length must equal rows");
  Tensor out = coeff.asDiagonal() * a.value();
  return make_result(std::move(out), {a}, [coeff](Node& n) { parent(n, 0).accumulate(coeff.asDiagonal() * n.grad); });
}

Var silu(const Var& a) {
  Tensor sig = (1.0 + (-a.value().array()).exp()).inverse().matrix();
  Tensor out = a.value().cwiseProduct(sig);
  return make_result(std::move(out), {a}, [sig = std::move(sig)](Node& n) {
    const auto x = parent(n, 0).value.array();
    const auto s = sig.array();
    parent(n, 0).accumulate((n.grad.array() * s * (1.0 + x * (1.0 - s))).matrix());
  });
}

Var layer_norm(const Var& a, double eps) {
  const Tensor& x = a.value();
  const Vector mu = x.rowwise().mean();
  Tensor centered = x.colwise() - mu;
  const Vector inv_std = ((centered.array().square().rowwise().mean()) + eps).rsqrt().matrix();
  Tensor xhat = inv_std.asDiagonal() * centered;
  Tensor out = xhat;
  return make_result(std::move(out), {a}, [xhat = std::move(xhat), inv_std](Node& n) {
    const Tensor& g = n.grad;
    const Vector mean_g = g.rowwise().mean();
    const Vector mean_gx = g.cwiseProduct(xhat).rowwise().mean();
    Tensor dx = (g.colwise() - mean_g) - mean_gx.asDiagonal() * xhat;
    parent(n, 0).accumulate(inv_std.asDiagonal() * dx);
  });
}

Var gather_rows(const Var& table, std::span<const int> index) {
  const Tensor& t = table.value();
  Tensor out(static_cast<Eigen::Index>(index.size()), t.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= t.rows()) throw DomainError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = t.row(index[i]);
  }
  std::vector<int> idx(index.begin(), index.end());
  return make_result(std::move(out), {table}, [idx = std::move(idx)](Node& n) {
    Node& p = parent(n, 0);
    Tensor g = Tensor::Zero(p.value.rows(), p.value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    p.accumulate(g);
  });
}

Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) throw ShapeError("reshape: element count mismatch");
  Tensor out = Eigen::Map<const Tensor>(a.value().data(), rows, cols);
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  return make_result(std::move(out), {a}, [r0, c0](Node& n) {
    parent(n, 0).accumulate(Eigen::Map<const Tensor>(n.grad.data(), r0, c0));
  });
}

Var attend(const Var& queries, const Var& keys, const Var& values, int tokens) {
  const Tensor& q = queries.value();
  const Eigen::Index n = q.rows(), d = q.cols();
  if (keys.rows() != n || values.rows() != n || keys.cols() != tokens * d || values.cols() != tokens * d)
    throw ShapeError("attend: keys/values must be n x (tokens * d)");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const Tensor& k = keys.value();
  const Tensor& v = values.value();

  Tensor weights(n, tokens);
  Tensor out = Tensor::Zero(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < tokens; ++j) weights(i, j) = q.row(i).dot(k.row(i).segment(j * d, d)) * inv_sqrt_d;
    const double mx = weights.row(i).maxCoeff();
    weights.row(i) = (weights.row(i).array() - mx).exp();
    weights.row(i) /= weights.row(i).sum();
    for (int j = 0; j < tokens; ++j) out.row(i) += weights(i, j) * v.row(i).segment(j * d, d);
  }
  return make_result(std::move(out), {queries, keys, values}, [weights = std::move(weights), tokens, inv_sqrt_d](Node& nd) {
    Node& pq = parent(nd, 0);
    Node& pk = parent(nd, 1);
    Node& pv = parent(nd, 2);
    const Tensor& g = nd.grad;
    const Eigen::Index n = g.rows(), d = g.cols();
    Tensor dq = Tensor::Zero(n, d);
    Tensor dk = Tensor::Zero(n, tokens * d);
    Tensor dv = Tensor::Zero(n, tokens * d);
    Eigen::RowVectorXd da(tokens);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int j = 0; j < tokens; ++j) {
        dv.row(i).segment(j * d, d) = weights(i, j) * g.row(i);
        da(j) = g.row(i).dot(pv.value.row(i).segment(j * d, d));
      }
      const double avg = weights.row(i).dot(da);
      for (int j = 0; j < tokens; ++j) {
        const double ds = weights(i, j) * (da(j) - avg) * inv_sqrt_d;
        dq.row(i) += ds * pk.value.row(i).segment(j * d, d);
        dk.row(i).segment(j * d, d) = ds * pq.value.row(i);
      }
    }
    if (pq.requires_grad) pq.accumulate(dq);
    if (pk.requires_grad) pk.accumulate(dk);
    if (pv.requires_grad) pv.accumulate(dv);
  });
}

Var square(const Var& a) {
  return make_result(a.value().array().square().matrix(), {a}, [](Node& n) {
    parent(n, 0).accumulate(2.0 * n.grad.cwiseProduct(parent(n, 0).value));
  });
}

Var sum(const Var& a) {
  Tensor out(1, 1);
  out(0, 0) = a.value().sum();
  return make_result(std::move(out), {a}, [](Node& n) {
    const Node& p = parent(n, 0);
    parent(n, 0).accumulate(Tensor::Constant(p.value.rows(), p.value.cols(), n.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  const auto count = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / count);
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor p = logits;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double mx = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - mx).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

Var softmax_cross_entropy(const Var& logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  if (static_cast<Eigen::Index>(labels.size()) != z.rows()) throw ShapeError("softmax_cross_entropy: label count");
  Tensor p = softmax_rows(z);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) loss -= std::log(std::max(p(r, labels[r]), 1e-300));
  Tensor out(1, 1);
  out(0, 0) = loss / static_cast<double>(z.rows());
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result(std::move(out), {logits}, [p = std::move(p), lab = std::move(lab)](Node& n) {
    Tensor g = p;
    for (std::size_t r = 0; r < lab.size(); ++r) g(static_cast<Eigen::Index>(r), lab[r]) -= 1.0;
    g *= n.grad(0, 0) / static_cast<double>(lab.size());
    parent(n, 0).accumulate(g);
  });
}

namespace {

// col is (cin*9) x (h*w)
void im2col(const double* img, int cin, int h, int w, Tensor& col) {
  col.setZero(cin * 9, h * w);
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const int row = (c * 3 + ky) * 3 + kx;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          for (int x = 0; x < w; ++x) {
            const int sx = x + kx - 1;
            if (sx < 0 || sx >= w) continue;
            col(row, y * w + x) = img[(c * h + sy) * w + sx];
          }
        }
      }
}

void col2im_add(const Tensor& col, int cin, int h, int w, double* img) {
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const int row = (c * 3 + ky) * 3 + kx;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          for (int x = 0; x < w; ++x) {
            const int sx = x + kx - 1;
            if (sx < 0 || sx >= w) continue;
            img[(c * h + sy) * w + sx] += col(row, y * w + x);
          }
        }
      }
}

}  // namespace

Var conv3x3(const Var& x, const Var& weight, const Var& bias, int cin, int h, int w) {
  const Eigen::Index n = x.rows();
  const Eigen::Index cout = weight.rows();
  if (x.cols() != static_cast<Eigen::Index>(cin) * h * w) throw ShapeError("conv3x3: input size");
  if (weight.cols() != cin * 9) throw ShapeError("conv3x3: weight must be cout x (cin*9)");
  if (bias.rows() != 1 || bias.cols() != cout) throw ShapeError("conv3x3: bias must be 1 x cout");
  const int hw = h * w;
  Tensor out(n, cout * hw);
  Tensor col;
  for (Eigen::Index s = 0; s < n; ++s) {
    im2col(x.value().row(s).data(), cin, h, w, col);
    Eigen::Map<Tensor> o(out.row(s).data(), cout, hw);
    o.noalias() = weight.value() * col;
    o.colwise() += bias.value().row(0).transpose();
  }
  return make_result(std::move(out), {x, weight, bias}, [cin, h, w](Node& nd) {
    Node& px = parent(nd, 0);
    Node& pw = parent(nd, 1);
    Node& pb = parent(nd, 2);
    const Eigen::Index n = px.value.rows();
    const Eigen::Index cout = pw.value.rows();
    const int hw = h * w;
    Tensor dx = px.requires_grad ? Tensor::Zero(n, px.value.cols()) : Tensor();
    Tensor dw = Tensor::Zero(cout, cin * 9);
    Tensor db = Tensor::Zero(1, cout);
    Tensor col;
    for (Eigen::Index s = 0; s < n; ++s) {
      Eigen::Map<const Tensor> g(nd.grad.row(s).data(), cout, hw);
      if (pw.requires_grad) {
        im2col(px.value.row(s).data(), cin, h, w, col);
        dw.noalias() += g * col.transpose();
      }
      db += g.rowwise().sum().transpose();
      if (px.requires_grad) {
        Tensor dcol = pw.value.transpose() * g;
        col2im_add(dcol, cin, h, w, dx.row(s).data());
      }
    }
    if (px.requires_grad) px.accumulate(dx);
    if (pw.requires_grad) pw.accumulate(dw);
    if (pb.requires_grad) pb.accumulate(db);
  });
}

Var upsample2x(const Var& x, int c, int h, int w) {
  if (x.cols() != static_cast<Eigen::Index>(c) * h * w) throw ShapeError("upsample2x: input size");
  const Eigen::Index n = x.rows();
  const int h2 = 2 * h, w2 = 2 * w;
  Tensor out(n, static_cast<Eigen::Index>(c) * h2 * w2);
  for (Eigen::Index s = 0; s < n; ++s) {
    const double* in = x.value().row(s).data();
    double* o = out.row(s).data();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h2; ++y)
        for (int xx = 0; xx < w2; ++xx) o[(ch * h2 + y) * w2 + xx] = in[(ch * h + y / 2) * w + xx / 2];
  }
  return make_result(std::move(out), {x}, [c, h, w](Node& nd) {
    Node& p = parent(nd, 0);
    const int h2 = 2 * h, w2 = 2 * w;
    Tensor g = Tensor::Zero(p.value.rows(), p.value.cols());
    for (Eigen::Index s = 0; s < g.rows(); ++s) {
      const double* go = nd.grad.row(s).data();
      double* gi = g.row(s).data();
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h2; ++y)
          for (int xx = 0; xx < w2; ++xx) gi[(ch * h + y / 2) * w + xx / 2] += go[(ch * h2 + y) * w2 + xx];
    }
    p.accumulate(g);
  });
}

}  // namespace snaplab::ad
