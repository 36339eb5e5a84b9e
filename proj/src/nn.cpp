#include "pointforge/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include "binio.hpp"
#include "pointforge/rng.hpp"

namespace pointforge::nn {

using ad::Tensor;

MlpSpec MlpSpec::make(std::vector<int> widths) {
  MlpSpec spec;
  spec.widths = std::move(widths);
  if (spec.widths.size() < 2) throw std::invalid_argument("mlp: need at least one layer");
  const int layers = static_cast<int>(spec.widths.size()) - 1;
  spec.acts.assign(layers, Act::kRelu);
  spec.acts.back() = Act::kNone;
  return spec;
}

MlpSpec MlpSpec::make_all(std::vector<int> widths, Act act) {
  MlpSpec spec = make(std::move(widths));
  std::fill(spec.acts.begin(), spec.acts.end(), act);
  return spec;
}

namespace {

Tensor init_matrix(Rng& rng, int in, int out, bool requires_grad) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<double> w(static_cast<size_t>(in) * out);
  for (double& v : w) v = rng.uniform(-bound, bound);
  return Tensor::matrix(in, out, std::move(w), requires_grad);
}

Tensor init_vector(Rng& rng, int fan_in, int n, bool requires_grad) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> b(n);
  for (double& v : b) v = rng.uniform(-bound, bound);
  return Tensor::vector(std::move(b), requires_grad);
}

}  // namespace

MlpParams mlp_init(const MlpSpec& spec, std::uint64_t seed, bool requires_grad) {
  if (spec.widths.size() < 2) throw std::invalid_argument("mlp: need at least one layer");
  if (spec.acts.size() + 1 != spec.widths.size())
    throw std::invalid_argument("mlp: one activation per layer required");
  for (int w : spec.widths)
    if (w <= 0) throw std::invalid_argument("mlp: widths must be positive");
  Rng rng(seed);
  MlpParams params;
  for (int i = 0; i + 1 < static_cast<int>(spec.widths.size()); ++i) {
    params.weights.push_back(init_matrix(rng, spec.widths[i], spec.widths[i + 1], requires_grad));
    params.biases.push_back(init_vector(rng, spec.widths[i], spec.widths[i + 1], requires_grad));
  }
  return params;
}

Tensor mlp_forward(const MlpSpec& spec, const MlpParams& params, const Tensor& x) {
  if (x.ndim() != 2 || x.cols() != spec.in_width())
    throw std::invalid_argument("mlp_forward: input width " +
                                std::to_string(x.ndim() == 2 ? x.cols() : -1) +
                                " does not match spec width " +
                                std::to_string(spec.in_width()));
  if (params.weights.size() != spec.acts.size() || params.biases.size() != spec.acts.size())
    throw std::invalid_argument("mlp_forward: params do not match spec layer count");
  Tensor h = x;
  for (size_t i = 0; i < params.weights.size(); ++i) {
    h = ad::add_bias(ad::matmul(h, params.weights[i]), params.biases[i]);
    if (spec.acts[i] == Act::kRelu) h = ad::relu(h);
  }
  return h;
}

// ------------------------------------------------------------- transformer

TransformerLayerParams transformer_layer_init(const TransformerLayerSpec& spec,
                                              std::uint64_t seed, bool requires_grad) {
  if (spec.d <= 0 || spec.heads <= 0 || spec.ff <= 0)
    throw std::invalid_argument("transformer: widths must be positive");
  if (spec.d % spec.heads != 0)
    throw std::invalid_argument("transformer: width " + std::to_string(spec.d) +
                                " not divisible by head count " + std::to_string(spec.heads));
  Rng rng(seed);
  TransformerLayerParams p;
  p.wq = init_matrix(rng, spec.d, spec.d, requires_grad);
  p.wk = init_matrix(rng, spec.d, spec.d, requires_grad);
  p.wv = init_matrix(rng, spec.d, spec.d, requires_grad);
  p.wo = init_matrix(rng, spec.d, spec.d, requires_grad);
  p.bq = init_vector(rng, spec.d, spec.d, requires_grad);
  p.bk = init_vector(rng, spec.d, spec.d, requires_grad);
  p.bv = init_vector(rng, spec.d, spec.d, requires_grad);
  p.bo = init_vector(rng, spec.d, spec.d, requires_grad);
  p.norm1_gamma = Tensor::full({spec.d}, 1.0, requires_grad);
  p.norm1_beta = Tensor::zeros({spec.d}, requires_grad);
  p.norm2_gamma = Tensor::full({spec.d}, 1.0, requires_grad);
  p.norm2_beta = Tensor::zeros({spec.d}, requires_grad);
  p.ff1_w = init_matrix(rng, spec.d, spec.ff, requires_grad);
  p.ff1_b = init_vector(rng, spec.d, spec.ff, requires_grad);
  p.ff2_w = init_matrix(rng, spec.ff, spec.d, requires_grad);
  p.ff2_b = init_vector(rng, spec.ff, spec.d, requires_grad);
  return p;
}

Tensor transformer_layer_forward(const TransformerLayerSpec& spec,
                                 const TransformerLayerParams& params, const Tensor& x) {
  if (x.ndim() != 2 || x.cols() != spec.d)
    throw std::invalid_argument("transformer: input width does not match spec");
  if (spec.d % spec.heads != 0)
    throw std::invalid_argument("transformer: width not divisible by head count");
  const int dh = spec.d / spec.heads;

  Tensor n1 = ad::layer_norm_rows(x, params.norm1_gamma, params.norm1_beta);
  Tensor q = ad::add_bias(ad::matmul(n1, params.wq), params.bq);
  Tensor k = ad::add_bias(ad::matmul(n1, params.wk), params.bk);
  Tensor v = ad::add_bias(ad::matmul(n1, params.wv), params.bv);

  std::vector<Tensor> head_ctx;
  for (int hidx = 0; hidx < spec.heads; ++hidx) {
    Tensor qh = ad::slice_cols(q, hidx * dh, dh);
    Tensor kh = ad::slice_cols(k, hidx * dh, dh);
    Tensor vh = ad::slice_cols(v, hidx * dh, dh);
    Tensor scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), 1.0 / std::sqrt(double(dh)));
    Tensor attn = ad::softmax_rows(scores);
    head_ctx.push_back(ad::matmul(attn, vh));
  }
  Tensor ctx = spec.heads == 1 ? head_ctx[0] : ad::concat_cols(head_ctx);
  Tensor h = x + ad::add_bias(ad::matmul(ctx, params.wo), params.bo);

  Tensor n2 = ad::layer_norm_rows(h, params.norm2_gamma, params.norm2_beta);
  Tensor ff = ad::relu(ad::add_bias(ad::matmul(n2, params.ff1_w), params.ff1_b));
  ff = ad::add_bias(ad::matmul(ff, params.ff2_w), params.ff2_b);
  return h + ff;
}

// ------------------------------------------------------------------- adam

AdamState adam_init(double lr, const std::vector<Tensor>& params) {
  AdamState st;
  st.lr = lr;
  st.m.reserve(params.size());
  st.v.reserve(params.size());
  for (const Tensor& p : params) {
    st.m.emplace_back(p.numel(), 0.0);
    st.v.emplace_back(p.numel(), 0.0);
  }
  return st;
}

void adam_step(AdamState& state, std::vector<Tensor>& params) {
  if (state.m.size() != params.size())
    throw std::invalid_argument("adam_step: state sized for a different param list");
  for (const Tensor& p : params)
    if (!p.has_grad())
      throw std::runtime_error("adam_step: gradient missing for a parameter");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, state.step);
  const double bc2 = 1.0 - std::pow(state.beta2, state.step);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    const auto& g = params[pi].grad();
    auto& val = params[pi].mutable_value();
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    for (size_t i = 0; i < val.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      val[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    params[pi].clear_grad();
  }
}

// -------------------------------------------------------------- gradcheck

double gradcheck(const std::function<Tensor(std::vector<Tensor>&)>& f,
                 std::vector<Tensor>& inputs, double h) {
  Tensor loss = f(inputs);
  if (loss.numel() != 1) throw std::invalid_argument("gradcheck: f must be scalar-valued");
  for (Tensor& t : inputs) t.clear_grad();
  ad::backward(loss);
  std::vector<std::vector<double>> analytic;
  for (Tensor& t : inputs) {
    analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.numel(), 0.0));
    t.clear_grad();
  }

  double worst = 0.0;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& val = inputs[ti].mutable_value();
    for (size_t i = 0; i < val.size(); ++i) {
      const double keep = val[i];
      val[i] = keep + h;
      const double up = f(inputs).item();
      val[i] = keep - h;
      const double down = f(inputs).item();
      val[i] = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[ti][i];
      if (!std::isfinite(numeric) || !std::isfinite(a))
        throw std::runtime_error("gradcheck: non-finite derivative");
      const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

// ------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[4] = {'L', 'C', 'A', 'W'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

void save_checkpoint(const std::string& path, const NamedParams& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  os.write(kMagic, 4);
  binio::write_u32(os, kVersion);
  binio::write_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, tensor] : params) {
    binio::write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    const auto& shape = tensor.shape();
    binio::write_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (int e : shape) binio::write_u32(os, static_cast<std::uint32_t>(e));
    for (double v : tensor.value()) binio::write_f64(os, v);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

NamedParams load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const std::uint32_t version = binio::read_u32(is, "checkpoint");
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t count = binio::read_u32(is, "checkpoint");
  NamedParams out;
  out.reserve(count);
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t name_len = binio::read_u32(is, "checkpoint");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw std::runtime_error("checkpoint: truncated name");
    const std::uint32_t rank = binio::read_u32(is, "checkpoint");
    ad::Shape shape(rank);
    for (std::uint32_t r = 0; r < rank; ++r) shape[r] = static_cast<int>(binio::read_u32(is, "checkpoint"));
    std::vector<double> data(ad::shape_numel(shape));
    for (double& v : data) v = binio::read_f64(is, "checkpoint");
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

void load_checkpoint_into(const std::string& path, NamedParams& params) {
  NamedParams loaded = load_checkpoint(path);
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, tensor] : loaded) by_name[name] = &tensor;
  for (auto& [name, tensor] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("checkpoint: missing tensor '" + name + "' in " + path);
    if (it->second->shape() != tensor.shape())
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
    tensor.mutable_value() = it->second->value();
    tensor.clear_grad();
  }
}

}  // namespace pointforge::nn
