#include "cocon/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace cocon::ag {
namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;

// Creates a result node; records parents and the backward closure only if
// gradient tracking is on and some parent needs a gradient.
Var make(Matrix value, std::vector<NodePtr> parents, std::function<void(Node&)> bw) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = std::any_of(parents.begin(), parents.end(),
                           [](const NodePtr& p) { return p->requires_grad; });
    if (any) {
      node->requires_grad = true;
      node->parents = std::move(parents);
      node->backward = std::move(bw);
    }
  }
  return Var(std::move(node));
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (!requires_grad) return;
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Var constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var leaf(Matrix value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

void backward(const Var& output) {
  if (output.rows() != 1 || output.cols() != 1) {
    throw std::invalid_argument("backward: output must be scalar");
  }
  if (!output.requires_grad()) return;

  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(output.node().get(), 0);
  visited.insert(output.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  output.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && node->has_grad()) node->backward(*node);
  }
  // Interior gradients are not needed after the pass.
  for (Node* node : order) {
    if (node->backward) node->grad.resize(0, 0);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  NodePtr pa = a.node(), pb = b.node();
  return make(a.value() * b.value(), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad * pb->value.transpose());
    if (pb->requires_grad) pb->accumulate(pa->value.transpose() * self.grad);
  });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  NodePtr pa = a.node(), pb = b.node();
  return make(a.value() + b.value(), {pa, pb}, [pa, pb](Node& self) {
    pa->accumulate(self.grad);
    pb->accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  NodePtr pa = a.node(), pb = b.node();
  return make(a.value() - b.value(), {pa, pb}, [pa, pb](Node& self) {
    pa->accumulate(self.grad);
    if (pb->requires_grad) pb->accumulate(-self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  NodePtr pa = a.node(), pb = b.node();
  return make(a.value().cwiseProduct(b.value()), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accumulate(self.grad.cwiseProduct(pb->value));
    if (pb->requires_grad) pb->accumulate(self.grad.cwiseProduct(pa->value));
  });
}

Var scale(const Var& a, double s) {
  NodePtr pa = a.node();
  return make(a.value() * s, {pa}, [pa, s](Node& self) { pa->accumulate(self.grad * s); });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: bad shape");
  NodePtr pa = a.node(), pr = row.node();
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return make(std::move(out), {pa, pr}, [pa, pr](Node& self) {
    pa->accumulate(self.grad);
    if (pr->requires_grad) pr->accumulate(self.grad.colwise().sum());
  });
}

Var sigmoid(const Var& a) {
  NodePtr pa = a.node();
  Matrix out = a.value().unaryExpr(&sigmoid_scalar);
  return make(out, {pa}, [pa](Node& self) {
    const Matrix& y = self.value;
    pa->accumulate(self.grad.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
  });
}

Var tanh(const Var& a) {
  NodePtr pa = a.node();
  Matrix out = a.value().array().tanh().matrix();
  return make(out, {pa}, [pa](Node& self) {
    const Matrix& y = self.value;
    pa->accumulate((self.grad.array() * (1.0 - y.array().square())).matrix());
  });
}

Var relu(const Var& a) {
  NodePtr pa = a.node();
  Matrix out = a.value().cwiseMax(0.0);
  return make(out, {pa}, [pa](Node& self) {
    pa->accumulate((pa->value.array() > 0.0).select(self.grad, 0.0).matrix());
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Eigen::Index rows = parts[0].rows(), cols = 0;
  std::vector<NodePtr> parents;
  std::vector<Eigen::Index> widths;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
    parents.push_back(p.node());
    widths.push_back(p.cols());
  }
  Matrix out(rows, cols);
  Eigen::Index offset = 0;
  for (const Var& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  auto ps = parents;
  return make(std::move(out), std::move(parents), [ps, widths](Node& self) {
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (ps[i]->requires_grad) ps[i]->accumulate(self.grad.middleCols(off, widths[i]));
      off += widths[i];
    }
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::invalid_argument("slice_cols: out of range");
  }
  NodePtr pa = a.node();
  return make(a.value().middleCols(start, count), {pa}, [pa, start, count](Node& self) {
    Matrix g = Matrix::Zero(pa->value.rows(), pa->value.cols());
    g.middleCols(start, count) = self.grad;
    pa->accumulate(g);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Eigen::Index cols = parts[0].cols(), rows = 0;
  std::vector<NodePtr> parents;
  std::vector<Eigen::Index> heights;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
    parents.push_back(p.node());
    heights.push_back(p.rows());
  }
  Matrix out(rows, cols);
  Eigen::Index offset = 0;
  for (const Var& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    offset += p.rows();
  }
  auto ps = parents;
  return make(std::move(out), std::move(parents), [ps, heights](Node& self) {
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (ps[i]->requires_grad) ps[i]->accumulate(self.grad.middleRows(off, heights[i]));
      off += heights[i];
    }
  });
}

Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) throw std::invalid_argument("reshape: size mismatch");
  NodePtr pa = a.node();
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return make(std::move(out), {pa}, [pa](Node& self) {
    pa->accumulate(Eigen::Map<const Matrix>(self.grad.data(), pa->value.rows(), pa->value.cols()));
  });
}

Var sum(const Var& a) {
  NodePtr pa = a.node();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make(std::move(out), {pa}, [pa](Node& self) {
    pa->accumulate(Matrix::Constant(pa->value.rows(), pa->value.cols(), self.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  auto n = static_cast<double>(a.value().size());
  if (n == 0) throw std::invalid_argument("mean: empty input");
  return scale(sum(a), 1.0 / n);
}

Var rowwise_dot(const Var& a, const Var& b) {
  check_same_shape(a, b, "rowwise_dot");
  NodePtr pa = a.node(), pb = b.node();
  Matrix out = a.value().cwiseProduct(b.value()).rowwise().sum();
  return make(std::move(out), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->accumulate(pb->value.array().colwise() * self.grad.col(0).array());
    if (pb->requires_grad) pb->accumulate(pa->value.array().colwise() * self.grad.col(0).array());
  });
}

Var rowwise_sqdist(const Var& a, const Var& b) {
  check_same_shape(a, b, "rowwise_sqdist");
  NodePtr pa = a.node(), pb = b.node();
  Matrix diff = a.value() - b.value();
  Matrix out = diff.rowwise().squaredNorm();
  return make(std::move(out), {pa, pb}, [pa, pb, diff](Node& self) {
    Matrix g = 2.0 * (diff.array().colwise() * self.grad.col(0).array()).matrix();
    if (pa->requires_grad) pa->accumulate(g);
    if (pb->requires_grad) pb->accumulate(-g);
  });
}

Var dropout(const Var& a, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  Matrix mask(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
  NodePtr pa = a.node();
  return make(a.value().cwiseProduct(mask), {pa},
              [pa, mask](Node& self) { pa->accumulate(self.grad.cwiseProduct(mask)); });
}

Var embedding(const Var& table, std::span<const int> ids) {
  const Matrix& t = table.value();
  Matrix out(static_cast<Eigen::Index>(ids.size()), t.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= t.rows()) throw std::out_of_range("embedding: id out of range");
    out.row(static_cast<Eigen::Index>(i)) = t.row(ids[i]);
  }
  NodePtr pt = table.node();
  std::vector<int> idv(ids.begin(), ids.end());
  return make(std::move(out), {pt}, [pt, idv](Node& self) {
    Matrix g = Matrix::Zero(pt->value.rows(), pt->value.cols());
    for (std::size_t i = 0; i < idv.size(); ++i) g.row(idv[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    pt->accumulate(g);
  });
}

Eigen::Index conv_out_len(Eigen::Index len, Eigen::Index width, Eigen::Index stride) {
  if (len < width) return 0;
  return (len - width) / stride + 1;
}

Var conv1d(const Var& x, Eigen::Index batch, Eigen::Index len, const Var& weight, const Var& bias,
           Eigen::Index width, Eigen::Index stride) {
  const Eigen::Index in_ch = x.cols();
  if (x.rows() != batch * len) throw std::invalid_argument("conv1d: input rows != batch*len");
  if (weight.rows() != width * in_ch) throw std::invalid_argument("conv1d: weight shape mismatch");
  const Eigen::Index out_len = conv_out_len(len, width, stride);
  if (out_len <= 0) throw std::invalid_argument("conv1d: sequence shorter than filter");

  // im2col: each output position sees `width` consecutive input rows, which
  // are contiguous in row-major storage.
  Matrix cols(batch * out_len, width * in_ch);
  const Matrix& xv = x.value();
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index t = 0; t < out_len; ++t) {
      const double* src = xv.data() + (b * len + t * stride) * in_ch;
      std::copy(src, src + width * in_ch, cols.data() + (b * out_len + t) * width * in_ch);
    }
  }
  Matrix out = cols * weight.value();
  out.rowwise() += bias.value().row(0);

  NodePtr px = x.node(), pw = weight.node(), pb = bias.node();
  return make(std::move(out), {px, pw, pb},
              [px, pw, pb, cols, batch, len, out_len, width, stride, in_ch](Node& self) {
                if (pw->requires_grad) pw->accumulate(cols.transpose() * self.grad);
                if (pb->requires_grad) pb->accumulate(self.grad.colwise().sum());
                if (px->requires_grad) {
                  Matrix dcols = self.grad * pw->value.transpose();
                  Matrix dx = Matrix::Zero(batch * len, in_ch);
                  for (Eigen::Index b = 0; b < batch; ++b) {
                    for (Eigen::Index t = 0; t < out_len; ++t) {
                      const double* src = dcols.data() + (b * out_len + t) * width * in_ch;
                      double* dst = dx.data() + (b * len + t * stride) * in_ch;
                      for (Eigen::Index k = 0; k < width * in_ch; ++k) dst[k] += src[k];
                    }
                  }
                  px->accumulate(dx);
                }
              });
}

Var st_round(const Var& p) {
  NodePtr pp = p.node();
  Matrix out = (p.value().array() >= 0.5).cast<double>().matrix();
  return make(std::move(out), {pp}, [pp](Node& self) { pp->accumulate(self.grad); });
}

Var st_argmax(const Var& p, double tau, std::span<const int> forced_ids) {
  if (tau <= 0.0) throw std::invalid_argument("st_argmax: tau must be positive");
  if (!forced_ids.empty() && static_cast<Eigen::Index>(forced_ids.size()) != p.rows()) {
    throw std::invalid_argument("st_argmax: forced_ids size mismatch");
  }
  const Matrix& pv = p.value();
  Matrix out = Matrix::Zero(pv.rows(), pv.cols());
  std::vector<char> free_row(pv.rows(), 1);
  for (Eigen::Index r = 0; r < pv.rows(); ++r) {
    if (!forced_ids.empty() && forced_ids[r] >= 0) {
      out(r, forced_ids[r]) = 1.0;
      free_row[r] = 0;
      continue;
    }
    Eigen::Index best = 0;
    pv.row(r).maxCoeff(&best);
    out(r, best) = 1.0;
  }
  NodePtr pp = p.node();
  const double inv_tau = 1.0 / tau;
  return make(std::move(out), {pp}, [pp, inv_tau, free_row](Node& self) {
    Matrix g = self.grad * inv_tau;
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      if (!free_row[r]) g.row(r).setZero();
    }
    pp->accumulate(g);
  });
}

Var softmax_rows(const Var& logits) {
  Matrix out = logits.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    double mx = out.row(r).maxCoeff();
    out.row(r) = (out.row(r).array() - mx).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  NodePtr pl = logits.node();
  return make(std::move(out), {pl}, [pl](Node& self) {
    const Matrix& y = self.value;
    Eigen::VectorXd dots = y.cwiseProduct(self.grad).rowwise().sum();
    Matrix g = y.cwiseProduct((self.grad.colwise() - dots));
    pl->accumulate(g);
  });
}

Var binary_xent(const Var& p, std::span<const double> labels, double clip) {
  if (p.cols() != 1 || static_cast<std::size_t>(p.rows()) != labels.size()) {
    throw std::invalid_argument("binary_xent: predictions/labels length mismatch");
  }
  if (labels.empty()) throw std::invalid_argument("binary_xent: empty batch");
  const Matrix& pv = p.value();
  const auto n = static_cast<double>(labels.size());
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    double q = std::clamp(pv(static_cast<Eigen::Index>(i), 0), clip, 1.0 - clip);
    total -= labels[i] * std::log(q) + (1.0 - labels[i]) * std::log(1.0 - q);
  }
  Matrix out(1, 1);
  out(0, 0) = total / n;
  NodePtr pp = p.node();
  std::vector<double> y(labels.begin(), labels.end());
  return make(std::move(out), {pp}, [pp, y, clip, n](Node& self) {
    Matrix g(pp->value.rows(), 1);
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      double q = pp->value(i, 0);
      if (q < clip || q > 1.0 - clip) {
        g(i, 0) = 0.0;
      } else {
        g(i, 0) = (-y[i] / q + (1.0 - y[i]) / (1.0 - q)) / n;
      }
    }
    pp->accumulate(g * self.grad(0, 0));
  });
}

Var masked_nll(const Var& logits, std::span<const int> targets, std::span<const double> mask) {
  const Matrix& lv = logits.value();
  if (static_cast<std::size_t>(lv.rows()) != targets.size() || targets.size() != mask.size()) {
    throw std::invalid_argument("masked_nll: length mismatch");
  }
  Matrix probs(lv.rows(), lv.cols());
  double total = 0.0, count = 0.0;
  for (Eigen::Index r = 0; r < lv.rows(); ++r) {
    double mx = lv.row(r).maxCoeff();
    probs.row(r) = (lv.row(r).array() - mx).exp().matrix();
    double z = probs.row(r).sum();
    probs.row(r) /= z;
    if (mask[r] != 0.0) {
      int t = targets[r];
      if (t < 0 || t >= lv.cols()) throw std::out_of_range("masked_nll: target out of range");
      total += mask[r] * (std::log(z) + mx - lv(r, t));
      count += mask[r];
    }
  }
  Matrix out(1, 1);
  out(0, 0) = count > 0 ? total / count : 0.0;
  NodePtr pl = logits.node();
  std::vector<int> tv(targets.begin(), targets.end());
  std::vector<double> mv(mask.begin(), mask.end());
  return make(std::move(out), {pl}, [pl, probs, tv, mv, count](Node& self) {
    if (count == 0) return;
    Matrix g = Matrix::Zero(probs.rows(), probs.cols());
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
      if (mv[r] == 0.0) continue;
      g.row(r) = probs.row(r) * (mv[r] / count);
      g(r, tv[r]) -= mv[r] / count;
    }
    pl->accumulate(g * self.grad(0, 0));
  });
}

namespace {

// Column-normalized centered features; zero-variance columns become zero.
Matrix normalized_columns(const Matrix& x, double zero_std, std::vector<double>& norms) {
  const auto n = static_cast<double>(x.rows());
  Matrix z = x.rowwise() - x.colwise().mean();
  norms.assign(x.cols(), 0.0);
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    double ss = z.col(j).squaredNorm();
    double sd = std::sqrt(ss / n);
    if (sd < zero_std) {
      z.col(j).setZero();
    } else {
      norms[j] = std::sqrt(ss);
      z.col(j) /= norms[j];
    }
  }
  return z;
}

}  // namespace

Matrix correlation_matrix(const Matrix& features, double zero_std) {
  if (features.rows() < 2) throw std::invalid_argument("correlation_matrix: need at least 2 rows");
  std::vector<double> norms;
  Matrix y = normalized_columns(features, zero_std, norms);
  return y.transpose() * y;
}

Var decorrelation(const Var& features, double zero_std) {
  if (features.rows() < 2) throw std::invalid_argument("decorrelation: batch size must be >= 2");
  std::vector<double> norms;
  Matrix y = normalized_columns(features.value(), zero_std, norms);
  Matrix m = y.transpose() * y;
  Matrix off = m;
  off.diagonal().setZero();
  Matrix out(1, 1);
  out(0, 0) = 0.5 * off.squaredNorm();
  NodePtr pf = features.node();
  return make(std::move(out), {pf}, [pf, y, off, norms](Node& self) {
    // dL/dY = 2 Y G with G the off-diagonal part of M; then through the
    // column normalization and centering.
    Matrix dy = 2.0 * y * off;
    Matrix dz(y.rows(), y.cols());
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
      if (norms[j] == 0.0) {
        dz.col(j).setZero();
        continue;
      }
      double proj = y.col(j).dot(dy.col(j));
      dz.col(j) = (dy.col(j) - y.col(j) * proj) / norms[j];
    }
    Matrix dx = dz.rowwise() - dz.colwise().mean();
    pf->accumulate(dx * self.grad(0, 0));
  });
}

}  // namespace cocon::ag
