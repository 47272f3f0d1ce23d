#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "pivad/rng.hpp"
#include "pivad/tensor.hpp"

namespace pivad {

/// Binds Params into one Graph, once each. A frozen binder creates constant
/// leaves instead, so no gradient ever reaches the underlying storage.
class Binder {
 public:
  Binder(Graph& g, bool trainable = true) : g_(g), trainable_(trainable) {}

  Tensor operator()(Param& p) {
    auto it = cache_.find(&p);
    if (it != cache_.end()) return it->second;
    Tensor t = trainable_ ? g_.param(p) : g_.input(p.shape, p.value);
    cache_.emplace(&p, t);
    return t;
  }

  Graph& graph() { return g_; }
  bool trainable() const { return trainable_; }

 private:
  Graph& g_;
  bool trainable_;
  std::map<const Param*, Tensor> cache_;
};

/// Xavier-uniform fill seeded per parameter name, so initialization does not
/// depend on construction order.
inline void xavier_init(Param& p, std::uint64_t seed) {
  double fan_in = 0, fan_out = 0;
  if (p.shape.size() == 2) {
    fan_in = p.shape[0];
    fan_out = p.shape[1];
  } else if (p.shape.size() == 3) {  // conv kernel [K x Cin x Cout]
    fan_in = static_cast<double>(p.shape[0]) * p.shape[1];
    fan_out = static_cast<double>(p.shape[0]) * p.shape[2];
  } else {
    throw std::invalid_argument("xavier_init: unsupported shape " + shape_str(p.shape));
  }
  double bound = std::sqrt(6.0 / (fan_in + fan_out));
  Rng rng(hash64(seed, p.name));
  for (double& v : p.value) v = rng.uniform(-bound, bound);
}

struct Linear {
  Param weight;  // [in x out]
  Param bias;    // [out]

  Linear(const std::string& name, int in, int out) : weight(name + ".weight", {in, out}), bias(name + ".bias", {out}) {
    if (in <= 0 || out <= 0) throw std::invalid_argument("Linear: dims must be positive");
  }

  void init(std::uint64_t seed) { xavier_init(weight, seed); }

  Tensor forward(Binder& b, const Tensor& x) { return add(matmul(x, b(weight)), b(bias)); }

  void collect(std::vector<Param*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

struct Conv1dLayer {
  Param weight;  // [K x Cin x Cout]
  Param bias;    // [Cout]
  int stride, padding;

  Conv1dLayer(const std::string& name, int k, int cin, int cout, int stride_ = 1, int padding_ = -1)
      : weight(name + ".weight", {k, cin, cout}),
        bias(name + ".bias", {cout}),
        stride(stride_),
        padding(padding_ < 0 ? (k - 1) / 2 : padding_) {}

  void init(std::uint64_t seed) { xavier_init(weight, seed); }

  Tensor forward(Binder& b, const Tensor& x) { return conv1d(x, b(weight), b(bias), stride, padding); }

  void collect(std::vector<Param*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

/// Pre-norm transformer block: x + MHSA(LN(x)), then + FFN(LN(.)).
/// FFN expansion is x2, GELU activation. No positional encoding here.
struct TransformerBlock {
  int dim, heads;
  Linear q, k, v, o;
  Linear ff1, ff2;
  Param ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;

  TransformerBlock(const std::string& name, int dim_, int heads_)
      : dim(dim_),
        heads(heads_),
        q(name + ".q", dim_, dim_),
        k(name + ".k", dim_, dim_),
        v(name + ".v", dim_, dim_),
        o(name + ".o", dim_, dim_),
        ff1(name + ".ff1", dim_, 2 * dim_),
        ff2(name + ".ff2", 2 * dim_, dim_),
        ln1_gamma(name + ".ln1.gamma", {dim_}),
        ln1_beta(name + ".ln1.beta", {dim_}),
        ln2_gamma(name + ".ln2.gamma", {dim_}),
        ln2_beta(name + ".ln2.beta", {dim_}) {
    if (dim_ <= 0 || heads_ <= 0) throw std::invalid_argument("TransformerBlock: dims must be positive");
    if (dim_ % heads_ != 0)
      throw std::invalid_argument("TransformerBlock: dim " + std::to_string(dim_) + " not divisible by " +
                                  std::to_string(heads_) + " heads");
  }

  void init(std::uint64_t seed) {
    q.init(seed);
    k.init(seed);
    v.init(seed);
    o.init(seed);
    ff1.init(seed);
    ff2.init(seed);
    std::fill(ln1_gamma.value.begin(), ln1_gamma.value.end(), 1.0);
    std::fill(ln2_gamma.value.begin(), ln2_gamma.value.end(), 1.0);
  }

  Tensor forward(Binder& b, const Tensor& x) {
    Tensor n1 = layer_norm(x, b(ln1_gamma), b(ln1_beta));
    Tensor qs = q.forward(b, n1);
    Tensor ks = k.forward(b, n1);
    Tensor vs = v.forward(b, n1);
    int dh = dim / heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> head_outs;
    head_outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
      Tensor qh = slice_cols(qs, h * dh, (h + 1) * dh);
      Tensor kh = slice_cols(ks, h * dh, (h + 1) * dh);
      Tensor vh = slice_cols(vs, h * dh, (h + 1) * dh);
      Tensor attn = softmax(mul(matmul(qh, transpose(kh)), scale), 1);
      head_outs.push_back(matmul(attn, vh));
    }
    Tensor mhsa = o.forward(b, concat_cols(head_outs));
    Tensor h1 = add(x, mhsa);
    Tensor n2 = layer_norm(h1, b(ln2_gamma), b(ln2_beta));
    Tensor ff = ff2.forward(b, gelu(ff1.forward(b, n2)));
    return add(h1, ff);
  }

  void collect(std::vector<Param*>& out) {
    q.collect(out);
    k.collect(out);
    v.collect(out);
    o.collect(out);
    ff1.collect(out);
    ff2.collect(out);
    out.push_back(&ln1_gamma);
    out.push_back(&ln1_beta);
    out.push_back(&ln2_gamma);
    out.push_back(&ln2_beta);
  }
};

/// Standard sinusoidal positional encoding, off by default everywhere;
/// snippet features already carry temporal context.
inline std::vector<double> sinusoidal_encoding(int t, int dim) {
  std::vector<double> pe(static_cast<std::size_t>(t) * dim);
  for (int pos = 0; pos < t; ++pos)
    for (int i = 0; i < dim; ++i) {
      double angle = pos / std::pow(10000.0, 2.0 * (i / 2) / dim);
      pe[static_cast<std::size_t>(pos) * dim + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return pe;
}

inline std::size_t count_params(const std::vector<Param*>& params) {
  std::size_t n = 0;
  for (const Param* p : params) n += p->size();
  return n;
}

}  // namespace pivad
