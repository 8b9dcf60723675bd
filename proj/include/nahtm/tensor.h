#pragma once

// Dense row-major double tensors with define-by-run reverse-mode autodiff.
//
// A Tensor is a shared handle to a node holding values and, when
// requires_grad is set, a gradient accumulator. Operations take the Tape
// they record onto as their first argument; a Tape in inference mode records
// nothing and its outputs never require gradients. Every operation checks
// its output for NaN/Inf and throws NumericError naming the operation.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace nahtm::ad {

namespace detail {
struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;
  std::vector<double> grad;  // empty unless requires_grad
  bool requires_grad = false;
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false);
  static Tensor full(std::size_t rows, std::size_t cols, double value, bool requires_grad = false);
  static Tensor from_data(std::size_t rows, std::size_t cols, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->value.size(); }
  std::vector<std::size_t> shape() const { return {node_->rows, node_->cols}; }

  // Tensor is a handle: constness of the handle does not protect the node.
  std::span<const double> data() const { return node_->value; }
  std::span<double> data_mut() const { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> grad_mut() const { return node_->grad; }

  double operator()(std::size_t r, std::size_t c) const { return node_->value[r * node_->cols + c]; }
  // Value of a 1x1 tensor.
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad() const;
  // Deep copy of the values into a fresh leaf.
  Tensor copy(bool requires_grad = false) const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  friend class Tape;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Ordered record of executed operations. Rebuilt for every minibatch and
// never shared between threads.
class Tape {
 public:
  enum class Mode { kRecord, kInference };
  using BackwardFn = std::function<void(std::span<const double> out_value, std::span<const double> out_grad)>;

  explicit Tape(Mode mode = Mode::kRecord) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return mode_ == Mode::kRecord; }
  std::size_t num_ops() const { return entries_.size(); }

  // Propagates d(loss)/d(tensor) into every requires_grad tensor reachable
  // from `loss`. Leaf gradients accumulate across calls; intermediate
  // gradients are reset first.
  void backward(const Tensor& loss);

  // Operation names in the order the last backward() visited them.
  const std::vector<std::string_view>& last_backward_order() const { return trace_; }

  // --- operation-author interface ---
  // Allocates an output that requires grad iff recording and any input does.
  Tensor make_output(std::size_t rows, std::size_t cols, std::initializer_list<const Tensor*> inputs);
  Tensor make_output(std::size_t rows, std::size_t cols, std::span<const Tensor> inputs);
  // Validates finiteness and, when the output requires grad, records it.
  Tensor finish(std::string_view op, Tensor out, BackwardFn backward);

 private:
  struct Entry {
    std::string_view op;
    std::shared_ptr<detail::Node> out;
    BackwardFn backward;
  };
  Mode mode_;
  std::vector<Entry> entries_;
  std::vector<std::string_view> trace_;
};

// Compressed sparse rows; used for bag-of-words count matrices.
struct SparseRows {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> row_ptr{0};
  std::vector<std::uint32_t> index;
  std::vector<double> value;

  explicit SparseRows(std::size_t num_cols = 0) : cols(num_cols) {}
  void add_row(std::span<const std::pair<std::uint32_t, std::uint32_t>> entries);
  double row_sum(std::size_t r) const;
  Tensor to_dense() const;
};

// Plain kernels shared by the tape ops and by non-differentiable callers.
namespace kernels {
void softmax(std::span<const double> x, std::span<double> out);
void log_softmax(std::span<const double> x, std::span<double> out);
// Euclidean projection onto the probability simplex by sort-and-threshold.
// Returns the support size.
std::size_t sparsemax(std::span<const double> x, std::span<double> out);
// Jacobian-vector product at a sparsemax output `p`:
// J v = 1_S (v - mean_S v) with S = {i : p_i > 0}. J is symmetric.
void sparsemax_jvp(std::span<const double> p, std::span<const double> v, std::span<double> out);
}  // namespace kernels

// --- differentiable operations ---
Tensor matmul(Tape& t, const Tensor& a, const Tensor& b);
// x W + b with b a 1 x n row broadcast over the rows of x W.
Tensor affine(Tape& t, const Tensor& x, const Tensor& w, const Tensor& b);
// Same with a sparse left operand; no gradient flows to x.
Tensor sparse_affine(Tape& t, const SparseRows& x, const Tensor& w, const Tensor& b);
Tensor add_row(Tape& t, const Tensor& x, const Tensor& row);

Tensor add(Tape& t, const Tensor& a, const Tensor& b);
Tensor sub(Tape& t, const Tensor& a, const Tensor& b);
Tensor mul(Tape& t, const Tensor& a, const Tensor& b);
Tensor scale(Tape& t, const Tensor& a, double factor);
Tensor square(Tape& t, const Tensor& a);

enum class Unary { kTanh, kExp, kLog, kSoftplus };
Tensor elementwise(Tape& t, Unary f, const Tensor& x);
inline Tensor tanh(Tape& t, const Tensor& x) { return elementwise(t, Unary::kTanh, x); }
inline Tensor exp(Tape& t, const Tensor& x) { return elementwise(t, Unary::kExp, x); }
inline Tensor log(Tape& t, const Tensor& x) { return elementwise(t, Unary::kLog, x); }
inline Tensor softplus(Tape& t, const Tensor& x) { return elementwise(t, Unary::kSoftplus, x); }

// Gradient passes only where lo < x < hi.
Tensor clamp(Tape& t, const Tensor& x, double lo, double hi);

Tensor softmax_rows(Tape& t, const Tensor& x);
Tensor log_softmax_rows(Tape& t, const Tensor& x);
Tensor sparsemax_rows(Tape& t, const Tensor& x);

Tensor sum(Tape& t, const Tensor& x);
Tensor transpose(Tape& t, const Tensor& x);
Tensor slice_rows(Tape& t, const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_rows(Tape& t, std::span<const Tensor> parts);
Tensor gather_rows(Tape& t, const Tensor& x, std::span<const std::size_t> rows);

// Row-wise KL(N(mq, exp lq) || N(mp, exp lp)) for diagonal Gaussians,
// summed over columns: returns rows x 1.
Tensor kl_diag_rows(Tape& t, const Tensor& mean_q, const Tensor& log_var_q, const Tensor& mean_p,
                    const Tensor& log_var_p);

// sum_{r,v} counts[r,v] * x[r,v] for sparse counts; returns 1x1.
Tensor sparse_weighted_sum(Tape& t, const Tensor& x, const SparseRows& counts);

// Value copy cut off from the graph.
Tensor detach(const Tensor& x);

}  // namespace nahtm::ad
