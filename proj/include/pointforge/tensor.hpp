#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

// Dense f64 tensors with reverse-mode gradient accumulation. Graphs are
// built eagerly; backward() walks the tape in reverse topological order.
// Forward/backward on one tape is single-threaded. Distinct tapes that only
// read shared parameter leaves (no backward) may run concurrently.
namespace pointforge::ad {

using Shape = std::vector<int>;

int shape_numel(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;
  std::uint64_t visit_mark = 0;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
  // Accumulates into a parent only if it participates in the tape.
  static void accum(TensorImpl& parent, int i, double v) {
    if (!parent.requires_grad) return;
    parent.ensure_grad();
    parent.grad[i] += v;
  }
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> value, bool requires_grad = false);

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double v, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor matrix(int rows, int cols, std::vector<double> value,
                       bool requires_grad = false);
  static Tensor vector(std::vector<double> value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int ndim() const;
  int numel() const;
  int rows() const;  // rank-2 only
  int cols() const;  // rank-2 only
  double item() const;
  double at(int i) const;
  double at(int r, int c) const;
  const std::vector<double>& value() const;
  std::vector<double>& mutable_value();  // in-place parameter updates
  bool has_grad() const;
  const std::vector<double>& grad() const;
  void clear_grad();
  bool requires_grad() const;
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Extension point for domain modules: builds a tape node. Parents that do not
// require grad are pruned; backward_fn is dropped when nothing upstream needs
// gradients. Throws on non-finite values.
Tensor make_op(Shape shape, std::vector<double> value,
               std::vector<Tensor> parents,
               std::function<void(TensorImpl&)> backward_fn);

void check_finite(std::span<const double> data, const char* what);

// Populates grad for every requires_grad tensor reachable from loss.
// Repeated calls accumulate.
void backward(const Tensor& loss);

// ---- elementwise / arithmetic ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log_op(const Tensor& a);
Tensor exp_op(const Tensor& a);
Tensor pow_const(const Tensor& a, double p);
// Gradient is zero where the clamp binds.
Tensor clamp_op(const Tensor& a, double lo, double hi);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add_bias(const Tensor& a, const Tensor& bias);  // [N,C] + [C]

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& a, int start, int count);
Tensor slice_rows(const Tensor& a, int start, int count);
Tensor gather_rows(const Tensor& a, const std::vector<int>& idx);
Tensor repeat_row(const Tensor& row, int n);  // [C] or [1,C] -> [n,C]

// ---- reductions / set ops ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Channel-wise max over all rows; gradient routes to the first argmax row.
Tensor maxpool_rows(const Tensor& a);  // [K,C] -> [C]
// Contiguous row segments (begin,count); empty segments produce zero rows.
using Segments = std::vector<std::pair<int, int>>;
Tensor segment_max_rows(const Tensor& a, const Segments& segs);
Tensor segment_mean_rows(const Tensor& a, const Segments& segs);
// Arbitrary index groups (used for voxel scatter-mean); empty -> zero row.
Tensor group_mean_rows(const Tensor& a, const std::vector<std::vector<int>>& groups);
// Rows normalized per-row softmax / layer norm.
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm_rows(const Tensor& a, const Tensor& gamma, const Tensor& beta,
                       double eps = 1e-5);
Tensor row_norms(const Tensor& a);  // [N,3] -> [N] Euclidean norms

// ---- losses ----
// Mean over elements of the Huber branch expression.
Tensor loss_smooth_l1(const Tensor& pred, const std::vector<double>& target,
                      double beta);
// Elementwise focal binary-cross-entropy terms; targets in {0,1}. Scores are
// clamped to (1e-7, 1-1e-7) before the log. gamma = 0 reduces to plain BCE.
Tensor focal_binary(const Tensor& scores, const std::vector<double>& targets,
                    double gamma);
// Scalar mean of focal_binary.
Tensor loss_focal_binary(const Tensor& scores, const std::vector<double>& targets,
                         double gamma);
// Elementwise cross-entropy with soft targets in [0,1]; same score clamp.
Tensor bce_binary(const Tensor& scores, const std::vector<double>& targets);

}  // namespace pointforge::ad
