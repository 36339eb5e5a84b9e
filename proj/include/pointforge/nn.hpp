#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pointforge/tensor.hpp"

// Learned building blocks: MLP chains, a pre-norm transformer encoder layer,
// Adam, finite-difference gradient checking, and the parameter checkpoint
// format.
namespace pointforge::nn {

enum class Act { kRelu, kNone };

struct MlpSpec {
  std::vector<int> widths;  // [Din, ..., Dout], at least 2 entries
  std::vector<Act> acts;    // one per layer (= widths.size()-1 entries)

  // ReLU on hidden layers, linear output — the usual head shape.
  static MlpSpec make(std::vector<int> widths);
  // Same activation after every layer, including the last.
  static MlpSpec make_all(std::vector<int> widths, Act act);

  int in_width() const { return widths.front(); }
  int out_width() const { return widths.back(); }
  int layer_count() const { return static_cast<int>(widths.size()) - 1; }
};

struct MlpParams {
  std::vector<ad::Tensor> weights;  // layer i: [widths[i], widths[i+1]]
  std::vector<ad::Tensor> biases;   // layer i: [widths[i+1]]
};

MlpParams mlp_init(const MlpSpec& spec, std::uint64_t seed, bool requires_grad = true);
ad::Tensor mlp_forward(const MlpSpec& spec, const MlpParams& params, const ad::Tensor& x);

struct TransformerLayerSpec {
  int d = 0;      // model width, divisible by heads
  int heads = 1;
  int ff = 0;     // feed-forward hidden width
};

struct TransformerLayerParams {
  ad::Tensor wq, wk, wv, wo;  // [d,d]
  ad::Tensor bq, bk, bv, bo;  // [d]
  ad::Tensor norm1_gamma, norm1_beta;
  ad::Tensor norm2_gamma, norm2_beta;
  ad::Tensor ff1_w, ff1_b, ff2_w, ff2_b;
};

TransformerLayerParams transformer_layer_init(const TransformerLayerSpec& spec,
                                              std::uint64_t seed,
                                              bool requires_grad = true);
// Pre-norm: x + attn(norm1(x)), then h + ffn(norm2(h)). No positional term
// inside, so the op is row-permutation equivariant.
ad::Tensor transformer_layer_forward(const TransformerLayerSpec& spec,
                                     const TransformerLayerParams& params,
                                     const ad::Tensor& x);

// ---- optimizer ----

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int step = 0;
  std::vector<std::vector<double>> m, v;  // aligned with the param list
};

AdamState adam_init(double lr, const std::vector<ad::Tensor>& params);
// Bias-corrected update; clears grads afterwards. A param with no grad buffer
// is an error — callers zero-fill grads for params intentionally unused in an
// iteration.
void adam_step(AdamState& state, std::vector<ad::Tensor>& params);

// ---- gradient checking ----

// f rebuilds its graph from the given leaves on every call and returns a
// scalar. Central differences with step h; returns the max over coordinates
// of |analytic - numeric| / max(1, |analytic|).
double gradcheck(const std::function<ad::Tensor(std::vector<ad::Tensor>&)>& f,
                 std::vector<ad::Tensor>& inputs, double h = 1e-5);

// ---- checkpoints ----

using NamedParams = std::vector<std::pair<std::string, ad::Tensor>>;

void save_checkpoint(const std::string& path, const NamedParams& params);
NamedParams load_checkpoint(const std::string& path);
// Copies values into an existing registry, matched by name; every registry
// entry must be present in the file with an identical shape.
void load_checkpoint_into(const std::string& path, NamedParams& params);

}  // namespace pointforge::nn
