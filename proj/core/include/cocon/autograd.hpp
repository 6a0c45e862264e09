#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// double matrices. A forward pass builds a graph of Nodes; calling
// backward() on a scalar output walks it in reverse topological order.
//
// Batches are laid out as rows. Sequences of length T over a batch of B are
// stored as (B*T) x C matrices, example-major, so reshape() between the two
// layouts is free.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace cocon::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct Node {
  Matrix value;
  Matrix grad;  // allocated lazily on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g);
  bool has_grad() const { return grad.size() != 0; }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const { return node_->value(0, 0); }
  const std::shared_ptr<Node>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

/// Constant leaf; never receives gradient.
Var constant(Matrix value);
/// Differentiable leaf owned by the caller (used in tests and for inputs that
/// need a gradient, e.g. one-hot token selections).
Var leaf(Matrix value, bool requires_grad = true);

/// Seeds d(output)/d(output) = 1 and propagates. `output` must be 1x1.
void backward(const Var& output);

/// While alive, newly created ops record no backward closures.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

// --- elementwise and linear algebra ---------------------------------------
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// Adds a 1 x C row vector to every row of a.
Var add_row(const Var& a, const Var& row);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var relu(const Var& a);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var concat_rows(std::span<const Var> parts);
Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols);
Var sum(const Var& a);
Var mean(const Var& a);
/// Row-wise dot product of two equally shaped matrices -> N x 1.
Var rowwise_dot(const Var& a, const Var& b);
/// Row-wise squared Euclidean distance -> N x 1.
Var rowwise_sqdist(const Var& a, const Var& b);
/// Inverted dropout; identity when rate == 0.
Var dropout(const Var& a, double rate, std::mt19937_64& rng);

// --- lookup and convolution -------------------------------------------------
/// Gathers rows of `table` for each id -> ids.size() x E.
Var embedding(const Var& table, std::span<const int> ids);
/// Same as embedding(); reads better for non-table sources.
inline Var gather_rows(const Var& a, std::span<const int> rows) { return embedding(a, rows); }
/// 1-D strided convolution. `x` is (batch*len) x in_ch, `weight` is
/// (width*in_ch) x out_ch. Output is (batch*out_len) x out_ch with
/// out_len = (len - width) / stride + 1.
Var conv1d(const Var& x, Eigen::Index batch, Eigen::Index len, const Var& weight, const Var& bias,
           Eigen::Index width, Eigen::Index stride);
Eigen::Index conv_out_len(Eigen::Index len, Eigen::Index width, Eigen::Index stride);

// --- straight-through estimators --------------------------------------------
/// Forward: componentwise rounding (ties to one). Backward: identity.
Var st_round(const Var& p);
/// Forward: one-hot of the row-wise argmax. Backward: upstream gradient scaled
/// by 1/tau. `forced_ids` (optional, one per row) pins a row to the one-hot
/// of the given id with no gradient when the entry is >= 0 (used after EOS).
Var st_argmax(const Var& p, double tau, std::span<const int> forced_ids = {});

// --- softmax and losses -----------------------------------------------------
Var softmax_rows(const Var& logits);
/// Mean of -[y log p + (1-y) log(1-p)] with p clipped to [clip, 1-clip].
Var binary_xent(const Var& p, std::span<const double> labels, double clip = 1e-7);
/// Mean negative log-likelihood of `targets` under row-wise softmax(logits)
/// over rows with mask != 0. Returns 0 when every row is masked.
Var masked_nll(const Var& logits, std::span<const int> targets, std::span<const double> mask);
/// 1/2 (||M||_F^2 - ||diag M||_F^2) for the column correlation matrix M of a
/// (N x L) batch. Columns with std < zero_std are treated as uncorrelated.
Var decorrelation(const Var& features, double zero_std = 1e-8);

/// Column correlation matrix with the same zero-variance rule.
Matrix correlation_matrix(const Matrix& features, double zero_std = 1e-8);

}  // namespace cocon::ag
