#include "pointforge/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>

namespace pointforge::ad {

namespace {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
}

void require_rank2(const Tensor& a, const char* op) {
  if (a.ndim() != 2) fail(std::string(op) + ": expected rank-2, got " + shape_str(a.shape()));
}

}  // namespace

int shape_numel(const Shape& shape) {
  int n = 1;
  for (int e : shape) {
    if (e < 0) fail("negative extent in shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

void check_finite(std::span<const double> data, const char* what) {
  for (double v : data) {
    if (!std::isfinite(v))
      throw std::runtime_error(std::string(what) + ": non-finite value encountered");
  }
}

Tensor::Tensor(Shape shape, std::vector<double> value, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int>(value.size()))
    fail("tensor: data length " + std::to_string(value.size()) +
         " does not match shape " + shape_str(shape));
  check_finite(value, "tensor");
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->value = std::move(value);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return Tensor(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad);
}

Tensor Tensor::full(const Shape& shape, double v, bool requires_grad) {
  return Tensor(shape, std::vector<double>(shape_numel(shape), v), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{v}, requires_grad);
}

Tensor Tensor::matrix(int rows, int cols, std::vector<double> value, bool requires_grad) {
  return Tensor(Shape{rows, cols}, std::move(value), requires_grad);
}

Tensor Tensor::vector(std::vector<double> value, bool requires_grad) {
  int n = static_cast<int>(value.size());
  return Tensor(Shape{n}, std::move(value), requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }
int Tensor::ndim() const { return static_cast<int>(impl_->shape.size()); }
int Tensor::numel() const { return static_cast<int>(impl_->value.size()); }

int Tensor::rows() const {
  require_rank2(*this, "rows");
  return impl_->shape[0];
}

int Tensor::cols() const {
  require_rank2(*this, "cols");
  return impl_->shape[1];
}

double Tensor::item() const {
  if (numel() != 1) fail("item: tensor has " + std::to_string(numel()) + " elements");
  return impl_->value[0];
}

double Tensor::at(int i) const { return impl_->value.at(i); }

double Tensor::at(int r, int c) const {
  require_rank2(*this, "at");
  return impl_->value.at(static_cast<size_t>(r) * impl_->shape[1] + c);
}

const std::vector<double>& Tensor::value() const { return impl_->value; }
std::vector<double>& Tensor::mutable_value() { return impl_->value; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (impl_->grad.empty()) throw std::runtime_error("grad: no gradient accumulated");
  return impl_->grad;
}

void Tensor::clear_grad() { impl_->grad.clear(); }
bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
               std::function<void(TensorImpl&)> backward_fn) {
  check_finite(value, "op");
  Tensor out(std::move(shape), std::move(value), false);
  bool needs = false;
  for (const Tensor& p : parents) {
    if (p.defined() && p.impl()->requires_grad) needs = true;
  }
  if (needs) {
    auto& impl = *out.impl();
    impl.requires_grad = true;
    impl.backward_fn = std::move(backward_fn);
    impl.parents.reserve(parents.size());
    for (const Tensor& p : parents)
      if (p.defined()) impl.parents.push_back(p.impl());
  }
  return out;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    fail("backward: loss must be a defined scalar tensor");
  static std::atomic<std::uint64_t> epoch{1};
  const std::uint64_t mark = epoch.fetch_add(1);

  // Iterative post-order DFS over the requires_grad subgraph.
  std::vector<TensorImpl*> order;
  std::vector<std::pair<TensorImpl*, size_t>> stack;
  if (!loss.impl()->requires_grad) return;
  stack.push_back({loss.impl().get(), 0});
  loss.impl()->visit_mark = mark;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorImpl* p = node->parents[next++].get();
      if (p->requires_grad && p->visit_mark != mark) {
        p->visit_mark = mark;
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior nodes get fresh grad buffers each call so that repeated
  // backward() calls accumulate exactly one more gradient into the leaves.
  for (TensorImpl* node : order)
    if (node->backward_fn) node->grad.clear();

  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

// ---------------------------------------------------------------- arithmetic

namespace {

Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* name,
                          double (*fwd)(double, double),
                          void (*bwd)(double, double, double, double&, double&)) {
  require_same_shape(a, b, name);
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i]);
  auto* ai = a.impl().get();
  auto* bi = b.impl().get();
  return make_op(a.shape(), std::move(out), {a, b}, [ai, bi, bwd](TensorImpl& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double da = 0, db = 0;
      bwd(ai->value[i], bi->value[i], self.grad[i], da, db);
      TensorImpl::accum(*ai, static_cast<int>(i), da);
      TensorImpl::accum(*bi, static_cast<int>(i), db);
    }
  });
}

Tensor elementwise_unary(const Tensor& a, const char* name, double (*fwd)(double),
                         double (*dfd)(double)) {
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  auto* ai = a.impl().get();
  (void)name;
  return make_op(a.shape(), std::move(out), {a}, [ai, dfd](TensorImpl& self) {
    for (size_t i = 0; i < self.grad.size(); ++i)
      TensorImpl::accum(*ai, static_cast<int>(i), self.grad[i] * dfd(ai->value[i]));
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double g, double& da, double& db) { da = g; db = g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double g, double& da, double& db) { da = g; db = -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

Tensor neg(const Tensor& a) {
  return elementwise_unary(a, "neg", [](double x) { return -x; },
                           [](double) { return -1.0; });
}

Tensor scale(const Tensor& a, double c) {
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
  auto* ai = a.impl().get();
  return make_op(a.shape(), std::move(out), {a}, [ai, c](TensorImpl& self) {
    for (size_t i = 0; i < self.grad.size(); ++i)
      TensorImpl::accum(*ai, static_cast<int>(i), self.grad[i] * c);
  });
}

Tensor add_scalar(const Tensor& a, double c) {
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + c;
  auto* ai = a.impl().get();
  return make_op(a.shape(), std::move(out), {a}, [ai](TensorImpl& self) {
    for (size_t i = 0; i < self.grad.size(); ++i)
      TensorImpl::accum(*ai, static_cast<int>(i), self.grad[i]);
  });
}

Tensor relu(const Tensor& a) {
  return elementwise_unary(a, "relu", [](double x) { return x > 0 ? x : 0.0; },
                           [](double x) { return x > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-av[i]));
  auto* ai = a.impl().get();
  std::vector<double> saved = out;
  return make_op(a.shape(), std::move(out), {a},
                 [ai, saved = std::move(saved)](TensorImpl& self) {
                   for (size_t i = 0; i < self.grad.size(); ++i) {
                     double y = saved[i];
                     TensorImpl::accum(*ai, static_cast<int>(i), self.grad[i] * y * (1.0 - y));
                   }
                 });
}

Tensor log_op(const Tensor& a) {
  return elementwise_unary(a, "log", [](double x) { return std::log(x); },
                           [](double x) { return 1.0 / x; });
}

Tensor exp_op(const Tensor& a) {
  return elementwise_unary(a, "exp", [](double x) { return std::exp(x); },
                           [](double x) { return std::exp(x); });
}

Tensor pow_const(const Tensor& a, double p) {
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = std::pow(av[i], p);
  auto* ai = a.impl().get();
  return make_op(a.shape(), std::move(out), {a}, [ai, p](TensorImpl& self) {
    for (size_t i = 0; i < self.grad.size(); ++i)
      TensorImpl::accum(*ai, static_cast<int>(i),
                        self.grad[i] * p * std::pow(ai->value[i], p - 1.0));
  });
}

Tensor clamp_op(const Tensor& a, double lo, double hi) {
  if (lo > hi) fail("clamp: lo > hi");
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = std::clamp(av[i], lo, hi);
  auto* ai = a.impl().get();
  return make_op(a.shape(), std::move(out), {a}, [ai, lo, hi](TensorImpl& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const double v = ai->value[i];
      if (v > lo && v < hi) TensorImpl::accum(*ai, static_cast<int>(i), self.grad[i]);
    }
  });
}

// ------------------------------------------------------------ linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const int n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k)
    fail("matmul: inner dims " + std::to_string(k) + " vs " + std::to_string(b.rows()));
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<double> out(static_cast<size_t>(n) * m, 0.0);
  for (int i = 0; i < n; ++i) {
    const double* arow = av.data() + static_cast<size_t>(i) * k;
    double* orow = out.data() + static_cast<size_t>(i) * m;
    for (int kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      if (aik == 0.0) continue;
      const double* brow = bv.data() + static_cast<size_t>(kk) * m;
      for (int j = 0; j < m; ++j) orow[j] += aik * brow[j];
    }
  }
  auto* ai = a.impl().get();
  auto* bi = b.impl().get();
  return make_op({n, m}, std::move(out), {a, b}, [ai, bi, n, k, m](TensorImpl& self) {
    const auto& g = self.grad;
    if (ai->requires_grad) {
      ai->ensure_grad();
      // dA = dC * B^T
      for (int i = 0; i < n; ++i) {
        const double* grow = g.data() + static_cast<size_t>(i) * m;
        double* darow = ai->grad.data() + static_cast<size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
          const double* brow = bi->value.data() + static_cast<size_t>(kk) * m;
          double acc = 0;
          for (int j = 0; j < m; ++j) acc += grow[j] * brow[j];
          darow[kk] += acc;
        }
      }
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      // dB = A^T * dC
      for (int i = 0; i < n; ++i) {
        const double* arow = ai->value.data() + static_cast<size_t>(i) * k;
        const double* grow = g.data() + static_cast<size_t>(i) * m;
        for (int kk = 0; kk < k; ++kk) {
          const double aik = arow[kk];
          if (aik == 0.0) continue;
          double* dbrow = bi->grad.data() + static_cast<size_t>(kk) * m;
          for (int j = 0; j < m; ++j) dbrow[j] += aik * grow[j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const int n = a.rows(), m = a.cols();
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) out[static_cast<size_t>(j) * n + i] = av[static_cast<size_t>(i) * m + j];
  auto* ai = a.impl().get();
  return make_op({m, n}, std::move(out), {a}, [ai, n, m](TensorImpl& self) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (int j = 0; j < m; ++j)
      for (int i = 0; i < n; ++i)
        ai->grad[static_cast<size_t>(i) * m + j] += self.grad[static_cast<size_t>(j) * n + i];
  });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  require_rank2(a, "add_bias");
  if (bias.ndim() != 1 || bias.numel() != a.cols())
    fail("add_bias: bias width " + std::to_string(bias.numel()) + " vs cols " +
         std::to_string(a.cols()));
  const int n = a.rows(), c = a.cols();
  const auto& av = a.value();
  const auto& bv = bias.value();
  std::vector<double> out(av.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<size_t>(i) * c + j] = av[static_cast<size_t>(i) * c + j] + bv[j];
  auto* ai = a.impl().get();
  auto* bi = bias.impl().get();
  return make_op(a.shape(), std::move(out), {a, bias}, [ai, bi, n, c](TensorImpl& self) {
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) bi->grad[j] += self.grad[static_cast<size_t>(i) * c + j];
    }
  });
}

// ------------------------------------------------------------------- shape

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    fail("reshape: numel mismatch " + std::to_string(a.numel()) + " -> " + shape_str(shape));
  auto* ai = a.impl().get();
  return make_op(std::move(shape), a.value(), {a}, [ai](TensorImpl& self) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) ai->grad[i] += self.grad[i];
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) fail("concat_cols: no inputs");
  const int n = parts[0].rows();
  int total = 0;
  for (const Tensor& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.rows() != n) fail("concat_cols: row mismatch");
    total += p.cols();
  }
  std::vector<double> out(static_cast<size_t>(n) * total);
  int off = 0;
  std::vector<int> offsets;
  for (const Tensor& p : parts) {
    offsets.push_back(off);
    const int c = p.cols();
    const auto& pv = p.value();
    for (int i = 0; i < n; ++i)
      std::copy_n(pv.data() + static_cast<size_t>(i) * c, c,
                  out.data() + static_cast<size_t>(i) * total + off);
    off += c;
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  std::vector<TensorImpl*> impls;
  std::vector<int> widths;
  for (const Tensor& p : parts) {
    impls.push_back(p.impl().get());
    widths.push_back(p.cols());
  }
  return make_op({n, total}, std::move(out), std::move(parents),
                 [impls, offsets, widths, n, total](TensorImpl& self) {
                   for (size_t pi = 0; pi < impls.size(); ++pi) {
                     TensorImpl* p = impls[pi];
                     if (!p->requires_grad) continue;
                     p->ensure_grad();
                     const int c = widths[pi], off = offsets[pi];
                     for (int i = 0; i < n; ++i)
                       for (int j = 0; j < c; ++j)
                         p->grad[static_cast<size_t>(i) * c + j] +=
                             self.grad[static_cast<size_t>(i) * total + off + j];
                   }
                 });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) fail("concat_rows: no inputs");
  const int c = parts[0].cols();
  int total = 0;
  for (const Tensor& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.cols() != c) fail("concat_rows: col mismatch");
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(static_cast<size_t>(total) * c);
  std::vector<int> row_offsets;
  int off = 0;
  for (const Tensor& p : parts) {
    row_offsets.push_back(off);
    out.insert(out.end(), p.value().begin(), p.value().end());
    off += p.rows();
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  std::vector<TensorImpl*> impls;
  std::vector<int> rows;
  for (const Tensor& p : parts) {
    impls.push_back(p.impl().get());
    rows.push_back(p.rows());
  }
  return make_op({total, c}, std::move(out), std::move(parents),
                 [impls, row_offsets, rows, c](TensorImpl& self) {
                   for (size_t pi = 0; pi < impls.size(); ++pi) {
                     TensorImpl* p = impls[pi];
                     if (!p->requires_grad) continue;
                     p->ensure_grad();
                     const size_t base = static_cast<size_t>(row_offsets[pi]) * c;
                     const size_t count = static_cast<size_t>(rows[pi]) * c;
                     for (size_t i = 0; i < count; ++i) p->grad[i] += self.grad[base + i];
                   }
                 });
}

Tensor slice_cols(const Tensor& a, int start, int count) {
  require_rank2(a, "slice_cols");
  const int n = a.rows(), c = a.cols();
  if (start < 0 || count < 0 || start + count > c) fail("slice_cols: out of range");
  const auto& av = a.value();
  std::vector<double> out(static_cast<size_t>(n) * count);
  for (int i = 0; i < n; ++i)
    std::copy_n(av.data() + static_cast<size_t>(i) * c + start, count,
                out.data() + static_cast<size_t>(i) * count);
  auto* ai = a.impl().get();
  return make_op({n, count}, std::move(out), {a}, [ai, start, count, n, c](TensorImpl& self) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < count; ++j)
        ai->grad[static_cast<size_t>(i) * c + start + j] +=
            self.grad[static_cast<size_t>(i) * count + j];
  });
}

Tensor slice_rows(const Tensor& a, int start, int count) {
  require_rank2(a, "slice_rows");
  const int n = a.rows(), c = a.cols();
  if (start < 0 || count < 0 || start + count > n) fail("slice_rows: out of range");
  const auto& av = a.value();
  std::vector<double> out(av.begin() + static_cast<size_t>(start) * c,
                          av.begin() + static_cast<size_t>(start + count) * c);
  auto* ai = a.impl().get();
  return make_op({count, c}, std::move(out), {a}, [ai, start, count, c](TensorImpl& self) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    const size_t base = static_cast<size_t>(start) * c;
    for (size_t i = 0; i < static_cast<size_t>(count) * c; ++i)
      ai->grad[base + i] += self.grad[i];
  });
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
  require_rank2(a, "gather_rows");
  const int n = a.rows(), c = a.cols();
  std::vector<double> out(idx.size() * c);
  const auto& av = a.value();
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= n) fail("gather_rows: index out of range");
    std::copy_n(av.data() + static_cast<size_t>(idx[i]) * c, c, out.data() + i * c);
  }
  auto* ai = a.impl().get();
  return make_op({static_cast<int>(idx.size()), c}, std::move(out), {a},
                 [ai, idx, c](TensorImpl& self) {
                   if (!ai->requires_grad) return;
                   ai->ensure_grad();
                   for (size_t i = 0; i < idx.size(); ++i)
                     for (int j = 0; j < c; ++j)
                       ai->grad[static_cast<size_t>(idx[i]) * c + j] += self.grad[i * c + j];
                 });
}

Tensor repeat_row(const Tensor& row, int n) {
  int c;
  if (row.ndim() == 1)
    c = row.numel();
  else if (row.ndim() == 2 && row.rows() == 1)
    c = row.cols();
  else
    fail("repeat_row: expected [C] or [1,C]");
  std::vector<double> out(static_cast<size_t>(n) * c);
  const auto& rv = row.value();
  for (int i = 0; i < n; ++i) std::copy_n(rv.data(), c, out.data() + static_cast<size_t>(i) * c);
  auto* ri = row.impl().get();
  return make_op({n, c}, std::move(out), {row}, [ri, n, c](TensorImpl& self) {
    if (!ri->requires_grad) return;
    ri->ensure_grad();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < c; ++j) ri->grad[j] += self.grad[static_cast<size_t>(i) * c + j];
  });
}

// ------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
  double s = 0;
  for (double v : a.value()) s += v;
  auto* ai = a.impl().get();
  return make_op({}, {s}, {a}, [ai](TensorImpl& self) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (double& g : ai->grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) fail("mean: empty tensor");
  return scale(sum(a), 1.0 / a.numel());
}

Tensor maxpool_rows(const Tensor& a) {
  require_rank2(a, "maxpool_rows");
  const int k = a.rows(), c = a.cols();
  if (k < 1) fail("maxpool_rows: empty set");
  const auto& av = a.value();
  std::vector<double> out(c);
  std::vector<int> arg(c, 0);
  for (int j = 0; j < c; ++j) {
    double best = av[j];
    int bi = 0;
    for (int i = 1; i < k; ++i) {
      double v = av[static_cast<size_t>(i) * c + j];
      if (v > best) {  // strict: first index wins ties
        best = v;
        bi = i;
      }
    }
    out[j] = best;
    arg[j] = bi;
  }
  auto* ai = a.impl().get();
  return make_op({c}, std::move(out), {a}, [ai, arg, c](TensorImpl& self) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (int j = 0; j < c; ++j)
      ai->grad[static_cast<size_t>(arg[j]) * c + j] += self.grad[j];
  });
}

Tensor segment_max_rows(const Tensor& a, const Segments& segs) {
  require_rank2(a, "segment_max_rows");
  const int c = a.cols(), n = a.rows();
  const int s = static_cast<int>(segs.size());
  const auto& av = a.value();
  std::vector<double> out(static_cast<size_t>(s) * c, 0.0);
  std::vector<int> arg(static_cast<size_t>(s) * c, -1);
  for (int si = 0; si < s; ++si) {
    auto [begin, count] = segs[si];
    if (count == 0) continue;
    if (begin < 0 || begin + count > n) fail("segment_max_rows: segment out of range");
    for (int j = 0; j < c; ++j) {
      double best = av[static_cast<size_t>(begin) * c + j];
      int bi = begin;
      for (int i = begin + 1; i < begin + count; ++i) {
        double v = av[static_cast<size_t>(i) * c + j];
        if (v > best) {
          best = v;
          bi = i;
        }
      }
      out[static_cast<size_t>(si) * c + j] = best;
      arg[static_cast<size_t>(si) * c + j] = bi;
    }
  }
  auto* ai = a.impl().get();
  return make_op({s, c}, std::move(out), {a}, [ai, arg, c](TensorImpl& self) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (size_t i = 0; i < arg.size(); ++i)
      if (arg[i] >= 0) ai->grad[static_cast<size_t>(arg[i]) * c + i % c] += self.grad[i];
  });
}

Tensor segment_mean_rows(const Tensor& a, const Segments& segs) {
  require_rank2(a, "segment_mean_rows");
  const int c = a.cols(), n = a.rows();
  const int s = static_cast<int>(segs.size());
  const auto& av = a.value();
  std::vector<double> out(static_cast<size_t>(s) * c, 0.0);
  for (int si = 0; si < s; ++si) {
    auto [begin, count] = segs[si];
    if (count == 0) continue;
    if (begin < 0 || begin + count > n) fail("segment_mean_rows: segment out of range");
    for (int i = begin; i < begin + count; ++i)
      for (int j = 0; j < c; ++j)
        out[static_cast<size_t>(si) * c + j] += av[static_cast<size_t>(i) * c + j];
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(si) * c + j] /= count;
  }
  auto* ai = a.impl().get();
  return make_op({s, c}, std::move(out), {a}, [ai, segs, c](TensorImpl& self) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (size_t si = 0; si < segs.size(); ++si) {
      auto [begin, count] = segs[si];
      if (count == 0) continue;
      const double inv = 1.0 / count;
      for (int i = begin; i < begin + count; ++i)
        for (int j = 0; j < c; ++j)
          ai->grad[static_cast<size_t>(i) * c + j] += self.grad[si * c + j] * inv;
    }
  });
}

Tensor group_mean_rows(const Tensor& a, const std::vector<std::vector<int>>& groups) {
  require_rank2(a, "group_mean_rows");
  const int c = a.cols(), n = a.rows();
  const int s = static_cast<int>(groups.size());
  const auto& av = a.value();
  std::vector<double> out(static_cast<size_t>(s) * c, 0.0);
  for (int si = 0; si < s; ++si) {
    if (groups[si].empty()) continue;
    for (int i : groups[si]) {
      if (i < 0 || i >= n) fail("group_mean_rows: index out of range");
      for (int j = 0; j < c; ++j)
        out[static_cast<size_t>(si) * c + j] += av[static_cast<size_t>(i) * c + j];
    }
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(si) * c + j] /= groups[si].size();
  }
  auto* ai = a.impl().get();
  return make_op({s, c}, std::move(out), {a}, [ai, groups, c](TensorImpl& self) {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (size_t si = 0; si < groups.size(); ++si) {
      if (groups[si].empty()) continue;
      const double inv = 1.0 / groups[si].size();
      for (int i : groups[si])
        for (int j = 0; j < c; ++j)
          ai->grad[static_cast<size_t>(i) * c + j] += self.grad[si * c + j] * inv;
    }
  });
}

Tensor softmax_rows(const Tensor& a) {
  require_rank2(a, "softmax_rows");
  const int n = a.rows(), c = a.cols();
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (int i = 0; i < n; ++i) {
    const double* row = av.data() + static_cast<size_t>(i) * c;
    double* orow = out.data() + static_cast<size_t>(i) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0;
    for (int j = 0; j < c; ++j) {
      orow[j] = std::exp(row[j] - mx);
      z += orow[j];
    }
    for (int j = 0; j < c; ++j) orow[j] /= z;
  }
  auto* ai = a.impl().get();
  std::vector<double> saved = out;
  return make_op(a.shape(), std::move(out), {a},
                 [ai, saved = std::move(saved), n, c](TensorImpl& self) {
                   if (!ai->requires_grad) return;
                   ai->ensure_grad();
                   for (int i = 0; i < n; ++i) {
                     const double* s = saved.data() + static_cast<size_t>(i) * c;
                     const double* g = self.grad.data() + static_cast<size_t>(i) * c;
                     double dot = 0;
                     for (int j = 0; j < c; ++j) dot += g[j] * s[j];
                     double* d = ai->grad.data() + static_cast<size_t>(i) * c;
                     for (int j = 0; j < c; ++j) d[j] += s[j] * (g[j] - dot);
                   }
                 });
}

Tensor layer_norm_rows(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank2(a, "layer_norm_rows");
  const int n = a.rows(), c = a.cols();
  if (gamma.numel() != c || beta.numel() != c) fail("layer_norm_rows: affine width mismatch");
  const auto& av = a.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  std::vector<double> out(av.size());
  std::vector<double> mu(n), istd(n), xhat(av.size());
  for (int i = 0; i < n; ++i) {
    const double* row = av.data() + static_cast<size_t>(i) * c;
    double m = 0;
    for (int j = 0; j < c; ++j) m += row[j];
    m /= c;
    double var = 0;
    for (int j = 0; j < c; ++j) var += (row[j] - m) * (row[j] - m);
    var /= c;
    const double is = 1.0 / std::sqrt(var + eps);
    mu[i] = m;
    istd[i] = is;
    for (int j = 0; j < c; ++j) {
      const double xh = (row[j] - m) * is;
      xhat[static_cast<size_t>(i) * c + j] = xh;
      out[static_cast<size_t>(i) * c + j] = gv[j] * xh + bv[j];
    }
  }
  auto* ai = a.impl().get();
  auto* gi = gamma.impl().get();
  auto* bi = beta.impl().get();
  return make_op(a.shape(), std::move(out), {a, gamma, beta},
                 [ai, gi, bi, xhat = std::move(xhat), istd = std::move(istd), n, c](TensorImpl& self) {
                   for (int i = 0; i < n; ++i) {
                     const double* g = self.grad.data() + static_cast<size_t>(i) * c;
                     const double* xh = xhat.data() + static_cast<size_t>(i) * c;
                     if (gi->requires_grad) {
                       gi->ensure_grad();
                       for (int j = 0; j < c; ++j) gi->grad[j] += g[j] * xh[j];
                     }
                     if (bi->requires_grad) {
                       bi->ensure_grad();
                       for (int j = 0; j < c; ++j) bi->grad[j] += g[j];
                     }
                     if (ai->requires_grad) {
                       ai->ensure_grad();
                       // dx = (istd/c) * (c*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                       double s1 = 0, s2 = 0;
                       std::vector<double> dxh(c);
                       for (int j = 0; j < c; ++j) {
                         dxh[j] = g[j] * gi->value[j];
                         s1 += dxh[j];
                         s2 += dxh[j] * xh[j];
                       }
                       double* d = ai->grad.data() + static_cast<size_t>(i) * c;
                       for (int j = 0; j < c; ++j)
                         d[j] += (istd[i] / c) * (c * dxh[j] - s1 - xh[j] * s2);
                     }
                   }
                 });
}

Tensor row_norms(const Tensor& a) {
  require_rank2(a, "row_norms");
  const int n = a.rows(), c = a.cols();
  const auto& av = a.value();
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i) {
    double s = 0;
    for (int j = 0; j < c; ++j) {
      double v = av[static_cast<size_t>(i) * c + j];
      s += v * v;
    }
    out[i] = std::sqrt(s);
  }
  auto* ai = a.impl().get();
  std::vector<double> saved = out;
  return make_op({n}, std::move(out), {a},
                 [ai, saved = std::move(saved), n, c](TensorImpl& self) {
                   if (!ai->requires_grad) return;
                   ai->ensure_grad();
                   for (int i = 0; i < n; ++i) {
                     if (saved[i] == 0.0) continue;
                     const double s = self.grad[i] / saved[i];
                     for (int j = 0; j < c; ++j)
                       ai->grad[static_cast<size_t>(i) * c + j] +=
                           s * ai->value[static_cast<size_t>(i) * c + j];
                   }
                 });
}

// ---------------------------------------------------------------- losses

Tensor loss_smooth_l1(const Tensor& pred, const std::vector<double>& target, double beta) {
  if (static_cast<size_t>(pred.numel()) != target.size())
    fail("loss_smooth_l1: shape mismatch, pred numel " + std::to_string(pred.numel()) +
         " vs target " + std::to_string(target.size()));
  if (beta <= 0) fail("loss_smooth_l1: beta must be positive");
  const auto& pv = pred.value();
  const int n = pred.numel();
  double total = 0;
  for (int i = 0; i < n; ++i) {
    const double e = pv[i] - target[i];
    total += std::abs(e) < beta ? 0.5 * e * e / beta : std::abs(e) - 0.5 * beta;
  }
  total /= n;
  auto* pi = pred.impl().get();
  return make_op({}, {total}, {pred}, [pi, target, beta, n](TensorImpl& self) {
    if (!pi->requires_grad) return;
    pi->ensure_grad();
    const double g = self.grad[0] / n;
    for (int i = 0; i < n; ++i) {
      const double e = pi->value[i] - target[i];
      pi->grad[i] += g * (std::abs(e) < beta ? e / beta : (e > 0 ? 1.0 : -1.0));
    }
  });
}

namespace {
constexpr double kScoreClamp = 1e-7;

double focal_term(double s, double t, double gamma) {
  s = std::clamp(s, kScoreClamp, 1.0 - kScoreClamp);
  return t > 0.5 ? -std::pow(1.0 - s, gamma) * std::log(s)
                 : -std::pow(s, gamma) * std::log(1.0 - s);
}

double focal_term_dds(double s, double t, double gamma) {
  const double sc = std::clamp(s, kScoreClamp, 1.0 - kScoreClamp);
  if (s != sc) return 0.0;  // clamped region: no gradient
  if (t > 0.5) {
    const double lead = gamma == 0.0 ? 0.0 : gamma * std::pow(1.0 - s, gamma - 1.0) * std::log(s);
    return lead - std::pow(1.0 - s, gamma) / s;
  }
  const double lead = gamma == 0.0 ? 0.0 : gamma * std::pow(s, gamma - 1.0) * std::log(1.0 - s);
  return -lead + std::pow(s, gamma) / (1.0 - s);
}
}  // namespace

Tensor focal_binary(const Tensor& scores, const std::vector<double>& targets, double gamma) {
  if (static_cast<size_t>(scores.numel()) != targets.size())
    fail("focal_binary: scores numel " + std::to_string(scores.numel()) + " vs targets " +
         std::to_string(targets.size()));
  const auto& sv = scores.value();
  std::vector<double> out(sv.size());
  for (size_t i = 0; i < sv.size(); ++i) out[i] = focal_term(sv[i], targets[i], gamma);
  auto* si = scores.impl().get();
  return make_op(scores.shape(), std::move(out), {scores},
                 [si, targets, gamma](TensorImpl& self) {
                   if (!si->requires_grad) return;
                   si->ensure_grad();
                   for (size_t i = 0; i < self.grad.size(); ++i)
                     si->grad[i] += self.grad[i] * focal_term_dds(si->value[i], targets[i], gamma);
                 });
}

Tensor loss_focal_binary(const Tensor& scores, const std::vector<double>& targets, double gamma) {
  return mean(focal_binary(scores, targets, gamma));
}

Tensor bce_binary(const Tensor& scores, const std::vector<double>& targets) {
  if (static_cast<size_t>(scores.numel()) != targets.size())
    fail("bce_binary: scores numel " + std::to_string(scores.numel()) + " vs targets " +
         std::to_string(targets.size()));
  for (double t : targets)
    if (!(t >= 0.0 && t <= 1.0)) fail("bce_binary: target outside [0,1]");
  const auto& sv = scores.value();
  std::vector<double> out(sv.size());
  for (size_t i = 0; i < sv.size(); ++i) {
    const double s = std::clamp(sv[i], kScoreClamp, 1.0 - kScoreClamp);
    out[i] = -targets[i] * std::log(s) - (1.0 - targets[i]) * std::log(1.0 - s);
  }
  auto* si = scores.impl().get();
  return make_op(scores.shape(), std::move(out), {scores}, [si, targets](TensorImpl& self) {
    if (!si->requires_grad) return;
    si->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const double s = si->value[i];
      if (s < kScoreClamp || s > 1.0 - kScoreClamp) continue;  // clamped: no gradient
      si->grad[i] += self.grad[i] * (-targets[i] / s + (1.0 - targets[i]) / (1.0 - s));
    }
  });
}

}  // namespace pointforge::ad
