#include "nahtm/tensor.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "nahtm/error.h"

namespace nahtm::ad {

namespace {

std::string shape_str(const Tensor& x) {
  return "[" + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) + "]";
}

[[noreturn]] void shape_error(std::string_view op, const std::string& detail) {
  throw DimensionError(std::string(op) + ": " + detail);
}

void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    shape_error(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

std::shared_ptr<detail::Node> make_node(std::size_t rows, std::size_t cols, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  node->rows = rows;
  node->cols = cols;
  node->value.assign(rows * cols, 0.0);
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(rows * cols, 0.0);
  return node;
}

}  // namespace

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(std::size_t rows, std::size_t cols, bool requires_grad) {
  return Tensor(make_node(rows, cols, requires_grad));
}

Tensor Tensor::full(std::size_t rows, std::size_t cols, double value, bool requires_grad) {
  auto node = make_node(rows, cols, requires_grad);
  std::fill(node->value.begin(), node->value.end(), value);
  return Tensor(std::move(node));
}

Tensor Tensor::from_data(std::size_t rows, std::size_t cols, std::vector<double> data,
                         bool requires_grad) {
  if (data.size() != rows * cols) {
    throw DimensionError("Tensor::from_data: " + std::to_string(data.size()) + " values for shape [" +
                         std::to_string(rows) + "x" + std::to_string(cols) + "]");
  }
  auto node = make_node(rows, cols, requires_grad);
  node->value = std::move(data);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return full(1, 1, value, requires_grad); }

double Tensor::item() const {
  if (size() != 1) throw DimensionError("Tensor::item: tensor is " + shape_str(*this));
  return node_->value[0];
}

void Tensor::zero_grad() const { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

Tensor Tensor::copy(bool requires_grad) const {
  return from_data(rows(), cols(), node_->value, requires_grad);
}

// ---------------------------------------------------------------- Tape

Tensor Tape::make_output(std::size_t rows, std::size_t cols,
                         std::initializer_list<const Tensor*> inputs) {
  bool rg = false;
  if (recording()) {
    for (const Tensor* in : inputs) rg = rg || in->requires_grad();
  }
  return Tensor(make_node(rows, cols, rg));
}

Tensor Tape::make_output(std::size_t rows, std::size_t cols, std::span<const Tensor> inputs) {
  bool rg = false;
  if (recording()) {
    for (const Tensor& in : inputs) rg = rg || in.requires_grad();
  }
  return Tensor(make_node(rows, cols, rg));
}

Tensor Tape::finish(std::string_view op, Tensor out, BackwardFn backward) {
  for (double v : out.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output");
  }
  if (out.requires_grad()) entries_.push_back(Entry{op, out.node_, std::move(backward)});
  return out;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw DimensionError("Tape::backward: loss must be a scalar");
  }
  const auto it = std::find_if(entries_.begin(), entries_.end(),
                               [&](const Entry& e) { return e.out == loss.node_; });
  if (it == entries_.end()) throw Error("Tape::backward: loss was not produced on this tape");
  const std::size_t last = static_cast<std::size_t>(it - entries_.begin());

  for (Entry& e : entries_) std::fill(e.out->grad.begin(), e.out->grad.end(), 0.0);
  loss.node_->grad[0] = 1.0;
  trace_.clear();
  for (std::size_t i = last + 1; i-- > 0;) {
    Entry& e = entries_[i];
    trace_.push_back(e.op);
    e.backward(e.out->value, e.out->grad);
  }
}

// ---------------------------------------------------------------- SparseRows

void SparseRows::add_row(std::span<const std::pair<std::uint32_t, std::uint32_t>> entries) {
  for (const auto& [idx, count] : entries) {
    if (idx >= cols) throw DimensionError("SparseRows::add_row: index out of range");
    index.push_back(idx);
    value.push_back(static_cast<double>(count));
  }
  row_ptr.push_back(index.size());
  ++rows;
}

double SparseRows::row_sum(std::size_t r) const {
  double s = 0.0;
  for (std::size_t p = row_ptr[r]; p < row_ptr[r + 1]; ++p) s += value[p];
  return s;
}

Tensor SparseRows::to_dense() const {
  Tensor out = Tensor::zeros(rows, cols);
  auto d = out.data_mut();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t p = row_ptr[r]; p < row_ptr[r + 1]; ++p) d[r * cols + index[p]] += value[p];
  }
  return out;
}

// ---------------------------------------------------------------- kernels

namespace kernels {

void softmax(std::span<const double> x, std::span<double> out) {
  const double mx = *std::max_element(x.begin(), x.end());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    z += out[i];
  }
  for (double& v : out) v /= z;
}

void log_softmax(std::span<const double> x, std::span<double> out) {
  const double mx = *std::max_element(x.begin(), x.end());
  double z = 0.0;
  for (double v : x) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
}

std::size_t sparsemax(std::span<const double> x, std::span<double> out) {
  const std::size_t n = x.size();
  if (n == 0) throw DimensionError("sparsemax: empty input");
  std::vector<double> sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  // Support size k is the largest k with 1 + k z_(k) > sum_{j<=k} z_(j).
  double cumsum = 0.0;
  double support_sum = 0.0;
  std::size_t k = 0;
  for (std::size_t j = 0; j < n; ++j) {
    cumsum += sorted[j];
    if (1.0 + static_cast<double>(j + 1) * sorted[j] > cumsum) {
      k = j + 1;
      support_sum = cumsum;
    }
  }
  const double tau = (support_sum - 1.0) / static_cast<double>(k);
  std::size_t support = 0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::max(x[i] - tau, 0.0);
    if (out[i] > 0.0) ++support;
  }
  return support;
}

void sparsemax_jvp(std::span<const double> p, std::span<const double> v, std::span<double> out) {
  double s = 0.0;
  std::size_t support = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) {
      s += v[i];
      ++support;
    }
  }
  const double mean = support > 0 ? s / static_cast<double>(support) : 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = p[i] > 0.0 ? v[i] - mean : 0.0;
}

}  // namespace kernels

// ---------------------------------------------------------------- linear algebra

namespace {

// c (m x p) += a (m x n) * b (n x p)
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * p;
    const double* ai = a + i * n;
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = ai[k];
      if (aik == 0.0) continue;
      const double* bk = b + k * p;
      for (std::size_t j = 0; j < p; ++j) ci[j] += aik * bk[j];
    }
  }
}

// c (m x n) += g (m x p) * b^T, b is (n x p)
void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = g + i * p;
    double* ci = c + i * n;
    for (std::size_t k = 0; k < n; ++k) {
      const double* bk = b + k * p;
      double s = 0.0;
      for (std::size_t j = 0; j < p; ++j) s += gi[j] * bk[j];
      ci[k] += s;
    }
  }
}

// c (n x p) += a^T g, a is (m x n), g is (m x p)
void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t n, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * n;
    const double* gi = g + i * p;
    for (std::size_t k = 0; k < n; ++k) {
      const double aik = ai[k];
      if (aik == 0.0) continue;
      double* ck = c + k * p;
      for (std::size_t j = 0; j < p; ++j) ck[j] += aik * gi[j];
    }
  }
}

void accumulate_row_sums(std::span<const double> g, std::size_t rows, std::size_t cols, std::span<double> into) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) into[c] += g[r * cols + c];
  }
}

void require_bias(std::string_view op, const Tensor& b, std::size_t cols) {
  if (b.rows() != 1 || b.cols() != cols) {
    shape_error(op, "bias " + shape_str(b) + " does not match width " + std::to_string(cols));
  }
}

}  // namespace

Tensor matmul(Tape& t, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) shape_error("matmul", "inner dimensions " + shape_str(a) + " * " + shape_str(b));
  const std::size_t m = a.rows(), n = a.cols(), p = b.cols();
  Tensor out = t.make_output(m, p, {&a, &b});
  gemm_nn(a.data().data(), b.data().data(), out.data_mut().data(), m, n, p);
  return t.finish("matmul", out, [a, b, m, n, p](auto, std::span<const double> g) {
    if (a.requires_grad()) gemm_nt(g.data(), b.data().data(), a.grad_mut().data(), m, n, p);
    if (b.requires_grad()) gemm_tn(a.data().data(), g.data(), b.grad_mut().data(), m, n, p);
  });
}

Tensor affine(Tape& t, const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.cols() != w.rows()) shape_error("affine", "input " + shape_str(x) + " vs weight " + shape_str(w));
  require_bias("affine", b, w.cols());
  const std::size_t m = x.rows(), n = x.cols(), p = w.cols();
  Tensor out = t.make_output(m, p, {&x, &w, &b});
  auto o = out.data_mut();
  for (std::size_t r = 0; r < m; ++r) std::copy(b.data().begin(), b.data().end(), o.begin() + r * p);
  gemm_nn(x.data().data(), w.data().data(), o.data(), m, n, p);
  return t.finish("affine", out, [x, w, b, m, n, p](auto, std::span<const double> g) {
    if (x.requires_grad()) gemm_nt(g.data(), w.data().data(), x.grad_mut().data(), m, n, p);
    if (w.requires_grad()) gemm_tn(x.data().data(), g.data(), w.grad_mut().data(), m, n, p);
    if (b.requires_grad()) accumulate_row_sums(g, m, p, b.grad_mut());
  });
}

Tensor sparse_affine(Tape& t, const SparseRows& x, const Tensor& w, const Tensor& b) {
  if (x.cols != w.rows()) {
    shape_error("sparse_affine", "input width " + std::to_string(x.cols) + " vs weight " + shape_str(w));
  }
  require_bias("sparse_affine", b, w.cols());
  const std::size_t m = x.rows, p = w.cols();
  Tensor out = t.make_output(m, p, {&w, &b});
  auto o = out.data_mut();
  const auto wd = w.data();
  for (std::size_t r = 0; r < m; ++r) {
    double* orow = o.data() + r * p;
    std::copy(b.data().begin(), b.data().end(), orow);
    for (std::size_t q = x.row_ptr[r]; q < x.row_ptr[r + 1]; ++q) {
      const double c = x.value[q];
      const double* wrow = wd.data() + static_cast<std::size_t>(x.index[q]) * p;
      for (std::size_t j = 0; j < p; ++j) orow[j] += c * wrow[j];
    }
  }
  // The backward closure keeps its own copy of the (small) sparse structure.
  return t.finish("sparse_affine", out, [x, w, b, m, p](auto, std::span<const double> g) {
    if (w.requires_grad()) {
      auto wg = w.grad_mut();
      for (std::size_t r = 0; r < m; ++r) {
        const double* grow = g.data() + r * p;
        for (std::size_t q = x.row_ptr[r]; q < x.row_ptr[r + 1]; ++q) {
          const double c = x.value[q];
          double* wrow = wg.data() + static_cast<std::size_t>(x.index[q]) * p;
          for (std::size_t j = 0; j < p; ++j) wrow[j] += c * grow[j];
        }
      }
    }
    if (b.requires_grad()) accumulate_row_sums(g, m, p, b.grad_mut());
  });
}

Tensor add_row(Tape& t, const Tensor& x, const Tensor& row) {
  require_bias("add_row", row, x.cols());
  const std::size_t m = x.rows(), p = x.cols();
  Tensor out = t.make_output(m, p, {&x, &row});
  auto o = out.data_mut();
  const auto xd = x.data();
  const auto rd = row.data();
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t j = 0; j < p; ++j) o[r * p + j] = xd[r * p + j] + rd[j];
  }
  return t.finish("add_row", out, [x, row, m, p](auto, std::span<const double> g) {
    if (x.requires_grad()) {
      auto xg = x.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i];
    }
    if (row.requires_grad()) accumulate_row_sums(g, m, p, row.grad_mut());
  });
}

// ---------------------------------------------------------------- elementwise

Tensor add(Tape& t, const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out = t.make_output(a.rows(), a.cols(), {&a, &b});
  auto o = out.data_mut();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] + b.data()[i];
  return t.finish("add", out, [a, b](auto, std::span<const double> g) {
    if (a.requires_grad()) {
      auto ag = a.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i];
    }
    if (b.requires_grad()) {
      auto bg = b.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) bg[i] += g[i];
    }
  });
}

Tensor sub(Tape& t, const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Tensor out = t.make_output(a.rows(), a.cols(), {&a, &b});
  auto o = out.data_mut();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] - b.data()[i];
  return t.finish("sub", out, [a, b](auto, std::span<const double> g) {
    if (a.requires_grad()) {
      auto ag = a.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i];
    }
    if (b.requires_grad()) {
      auto bg = b.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) bg[i] -= g[i];
    }
  });
}

Tensor mul(Tape& t, const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out = t.make_output(a.rows(), a.cols(), {&a, &b});
  auto o = out.data_mut();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] * b.data()[i];
  return t.finish("mul", out, [a, b](auto, std::span<const double> g) {
    if (a.requires_grad()) {
      auto ag = a.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * b.data()[i];
    }
    if (b.requires_grad()) {
      auto bg = b.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) bg[i] += g[i] * a.data()[i];
    }
  });
}

Tensor scale(Tape& t, const Tensor& a, double factor) {
  Tensor out = t.make_output(a.rows(), a.cols(), {&a});
  auto o = out.data_mut();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] * factor;
  return t.finish("scale", out, [a, factor](auto, std::span<const double> g) {
    auto ag = a.grad_mut();
    for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * factor;
  });
}

Tensor square(Tape& t, const Tensor& a) {
  Tensor out = t.make_output(a.rows(), a.cols(), {&a});
  auto o = out.data_mut();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a.data()[i] * a.data()[i];
  return t.finish("square", out, [a](auto, std::span<const double> g) {
    auto ag = a.grad_mut();
    for (std::size_t i = 0; i < g.size(); ++i) ag[i] += 2.0 * a.data()[i] * g[i];
  });
}

Tensor elementwise(Tape& t, Unary f, const Tensor& x) {
  const auto xd = x.data();
  if (f == Unary::kLog) {
    for (double v : xd) {
      if (!(v > 0.0)) throw NumericError("log: non-positive input " + std::to_string(v));
    }
  }
  Tensor out = t.make_output(x.rows(), x.cols(), {&x});
  auto o = out.data_mut();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double v = xd[i];
    switch (f) {
      case Unary::kTanh: o[i] = std::tanh(v); break;
      case Unary::kExp: o[i] = std::exp(v); break;
      case Unary::kLog: o[i] = std::log(v); break;
      case Unary::kSoftplus: o[i] = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); break;
    }
  }
  static constexpr std::string_view kNames[] = {"tanh", "exp", "log", "softplus"};
  return t.finish(kNames[static_cast<int>(f)], out, [x, f](std::span<const double> y, std::span<const double> g) {
    auto xg = x.grad_mut();
    const auto xv = x.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      double d = 0.0;
      switch (f) {
        case Unary::kTanh: d = 1.0 - y[i] * y[i]; break;
        case Unary::kExp: d = y[i]; break;
        case Unary::kLog: d = 1.0 / xv[i]; break;
        case Unary::kSoftplus: d = 1.0 / (1.0 + std::exp(-xv[i])); break;
      }
      xg[i] += g[i] * d;
    }
  });
}

Tensor clamp(Tape& t, const Tensor& x, double lo, double hi) {
  Tensor out = t.make_output(x.rows(), x.cols(), {&x});
  auto o = out.data_mut();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::clamp(x.data()[i], lo, hi);
  return t.finish("clamp", out, [x, lo, hi](auto, std::span<const double> g) {
    auto xg = x.grad_mut();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = x.data()[i];
      if (v > lo && v < hi) xg[i] += g[i];
    }
  });
}

// ---------------------------------------------------------------- row normalizers

Tensor softmax_rows(Tape& t, const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  if (n == 0) shape_error("softmax_rows", "zero-width rows");
  Tensor out = t.make_output(m, n, {&x});
  auto o = out.data_mut();
  for (std::size_t r = 0; r < m; ++r) kernels::softmax(x.data().subspan(r * n, n), o.subspan(r * n, n));
  return t.finish("softmax_rows", out, [x, m, n](std::span<const double> y, std::span<const double> g) {
    auto xg = x.grad_mut();
    for (std::size_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) xg[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

Tensor log_softmax_rows(Tape& t, const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  if (n == 0) shape_error("log_softmax_rows", "zero-width rows");
  Tensor out = t.make_output(m, n, {&x});
  auto o = out.data_mut();
  for (std::size_t r = 0; r < m; ++r) kernels::log_softmax(x.data().subspan(r * n, n), o.subspan(r * n, n));
  return t.finish("log_softmax_rows", out, [x, m, n](std::span<const double> y, std::span<const double> g) {
    auto xg = x.grad_mut();
    for (std::size_t r = 0; r < m; ++r) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < n; ++j) gsum += g[r * n + j];
      for (std::size_t j = 0; j < n; ++j) xg[r * n + j] += g[r * n + j] - std::exp(y[r * n + j]) * gsum;
    }
  });
}

Tensor sparsemax_rows(Tape& t, const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  if (n == 0) shape_error("sparsemax_rows", "K = 0");
  Tensor out = t.make_output(m, n, {&x});
  auto o = out.data_mut();
  for (std::size_t r = 0; r < m; ++r) kernels::sparsemax(x.data().subspan(r * n, n), o.subspan(r * n, n));
  return t.finish("sparsemax_rows", out, [x, m, n](std::span<const double> y, std::span<const double> g) {
    auto xg = x.grad_mut();
    std::vector<double> jv(n);
    for (std::size_t r = 0; r < m; ++r) {
      kernels::sparsemax_jvp(y.subspan(r * n, n), g.subspan(r * n, n), jv);
      for (std::size_t j = 0; j < n; ++j) xg[r * n + j] += jv[j];
    }
  });
}

// ---------------------------------------------------------------- reductions and reshapes

Tensor sum(Tape& t, const Tensor& x) {
  Tensor out = t.make_output(1, 1, {&x});
  double s = 0.0;
  for (double v : x.data()) s += v;
  out.data_mut()[0] = s;
  return t.finish("sum", out, [x](auto, std::span<const double> g) {
    for (double& v : x.grad_mut()) v += g[0];
  });
}

Tensor transpose(Tape& t, const Tensor& x) {
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out = t.make_output(n, m, {&x});
  auto o = out.data_mut();
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) o[c * m + r] = x.data()[r * n + c];
  }
  return t.finish("transpose", out, [x, m, n](auto, std::span<const double> g) {
    auto xg = x.grad_mut();
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < n; ++c) xg[r * n + c] += g[c * m + r];
    }
  });
}

Tensor slice_rows(Tape& t, const Tensor& x, std::size_t begin, std::size_t end) {
  if (begin > end || end > x.rows()) {
    shape_error("slice_rows", "range [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                                  shape_str(x));
  }
  const std::size_t n = x.cols();
  Tensor out = t.make_output(end - begin, n, {&x});
  std::copy(x.data().begin() + begin * n, x.data().begin() + end * n, out.data_mut().begin());
  return t.finish("slice_rows", out, [x, begin, n](auto, std::span<const double> g) {
    auto xg = x.grad_mut();
    for (std::size_t i = 0; i < g.size(); ++i) xg[begin * n + i] += g[i];
  });
}

Tensor concat_rows(Tape& t, std::span<const Tensor> parts) {
  if (parts.empty()) shape_error("concat_rows", "no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const Tensor& p : parts) {
    if (p.cols() != n) shape_error("concat_rows", "column mismatch " + shape_str(p));
    m += p.rows();
  }
  Tensor out = t.make_output(m, n, parts);
  auto o = out.data_mut();
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data().begin(), p.data().end(), o.begin() + off);
    off += p.size();
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return t.finish("concat_rows", out, [inputs](auto, std::span<const double> g) {
    std::size_t at = 0;
    for (const Tensor& p : inputs) {
      if (p.requires_grad()) {
        auto pg = p.grad_mut();
        for (std::size_t i = 0; i < p.size(); ++i) pg[i] += g[at + i];
      }
      at += p.size();
    }
  });
}

Tensor gather_rows(Tape& t, const Tensor& x, std::span<const std::size_t> rows) {
  const std::size_t n = x.cols();
  for (std::size_t r : rows) {
    if (r >= x.rows()) shape_error("gather_rows", "row " + std::to_string(r) + " out of " + shape_str(x));
  }
  Tensor out = t.make_output(rows.size(), n, {&x});
  auto o = out.data_mut();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(x.data().begin() + rows[i] * n, n, o.begin() + i * n);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return t.finish("gather_rows", out, [x, idx = std::move(idx), n](auto, std::span<const double> g) {
    auto xg = x.grad_mut();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < n; ++j) xg[idx[i] * n + j] += g[i * n + j];
    }
  });
}

// ---------------------------------------------------------------- fused losses

Tensor kl_diag_rows(Tape& t, const Tensor& mean_q, const Tensor& log_var_q, const Tensor& mean_p,
                    const Tensor& log_var_p) {
  require_same_shape("kl_diag_rows", mean_q, log_var_q);
  require_same_shape("kl_diag_rows", mean_q, mean_p);
  require_same_shape("kl_diag_rows", mean_q, log_var_p);
  const std::size_t m = mean_q.rows(), k = mean_q.cols();
  Tensor out = t.make_output(m, 1, {&mean_q, &log_var_q, &mean_p, &log_var_p});
  auto o = out.data_mut();
  const auto mq = mean_q.data(), lq = log_var_q.data(), mp = mean_p.data(), lp = log_var_p.data();
  for (std::size_t r = 0; r < m; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t i = r * k + j;
      const double d = mq[i] - mp[i];
      s += 0.5 * (lp[i] - lq[i]) + (std::exp(lq[i]) + d * d) / (2.0 * std::exp(lp[i])) - 0.5;
    }
    o[r] = s;
  }
  return t.finish("kl_diag_rows", out,
                  [mean_q, log_var_q, mean_p, log_var_p, m, k](auto, std::span<const double> g) {
                    const auto mq = mean_q.data(), lq = log_var_q.data(), mp = mean_p.data(),
                               lp = log_var_p.data();
                    for (std::size_t r = 0; r < m; ++r) {
                      for (std::size_t j = 0; j < k; ++j) {
                        const std::size_t i = r * k + j;
                        const double d = mq[i] - mp[i];
                        const double inv_vp = std::exp(-lp[i]);
                        const double vq = std::exp(lq[i]);
                        if (mean_q.requires_grad()) mean_q.grad_mut()[i] += g[r] * d * inv_vp;
                        if (mean_p.requires_grad()) mean_p.grad_mut()[i] -= g[r] * d * inv_vp;
                        if (log_var_q.requires_grad()) log_var_q.grad_mut()[i] += g[r] * 0.5 * (vq * inv_vp - 1.0);
                        if (log_var_p.requires_grad()) {
                          log_var_p.grad_mut()[i] += g[r] * 0.5 * (1.0 - (vq + d * d) * inv_vp);
                        }
                      }
                    }
                  });
}

Tensor sparse_weighted_sum(Tape& t, const Tensor& x, const SparseRows& counts) {
  if (counts.rows != x.rows() || counts.cols != x.cols()) {
    shape_error("sparse_weighted_sum", "counts [" + std::to_string(counts.rows) + "x" +
                                           std::to_string(counts.cols) + "] vs " + shape_str(x));
  }
  const std::size_t n = x.cols();
  Tensor out = t.make_output(1, 1, {&x});
  double s = 0.0;
  for (std::size_t r = 0; r < counts.rows; ++r) {
    for (std::size_t q = counts.row_ptr[r]; q < counts.row_ptr[r + 1]; ++q) {
      s += counts.value[q] * x.data()[r * n + counts.index[q]];
    }
  }
  out.data_mut()[0] = s;
  return t.finish("sparse_weighted_sum", out, [x, counts, n](auto, std::span<const double> g) {
    auto xg = x.grad_mut();
    for (std::size_t r = 0; r < counts.rows; ++r) {
      for (std::size_t q = counts.row_ptr[r]; q < counts.row_ptr[r + 1]; ++q) {
        xg[r * n + counts.index[q]] += g[0] * counts.value[q];
      }
    }
  });
}

Tensor detach(const Tensor& x) { return x.copy(false); }

}  // namespace nahtm::ad
