#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <random>
#include <string>
#include <vector>

#include "mapworld/autodiff/ops.hpp"
#include "mapworld/errors.hpp"

namespace mapworld::nn {

using ad::Matrix;
using ad::Parameter;
using ad::Tape;
using ad::Var;

/// Owns every trainable tensor of a model. Deque storage keeps addresses stable,
/// so layers hold raw pointers into it.
template <typename T>
class ParameterSet {
 public:
  Parameter<T>& add(const std::string& name, Matrix<T> value, bool decay = true) {
    for (const auto& p : params_) {
      if (p.name == name) throw ConfigError("duplicate parameter name: " + name);
    }
    Parameter<T>& p = params_.emplace_back();
    p.name = name;
    p.value = std::move(value);
    p.decay = decay;
    p.zero_grad();
    return p;
  }

  Parameter<T>* find(const std::string& name) {
    for (auto& p : params_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  std::deque<Parameter<T>>& all() { return params_; }
  const std::deque<Parameter<T>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::deque<Parameter<T>> params_;
};

template <typename T>
Matrix<T> normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
  return m;
}

/// y = x W + b with W [in x out].
template <typename T>
struct Linear {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;

  Linear() = default;
  Linear(ParameterSet<T>& ps, const std::string& name, int in, int out, std::mt19937_64& rng, double gain = 1.0) {
    weight = &ps.add(name + ".weight", normal_matrix<T>(in, out, gain / std::sqrt(static_cast<double>(in)), rng));
    bias = &ps.add(name + ".bias", Matrix<T>::Zero(1, out), false);
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    return ad::add_row(ad::matmul(x, tape.parameter(*weight)), tape.parameter(*bias));
  }

  void zero() {
    weight->value.setZero();
    bias->value.setZero();
  }
};

template <typename T>
struct LayerNorm {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;

  LayerNorm() = default;
  LayerNorm(ParameterSet<T>& ps, const std::string& name, int width) {
    gamma = &ps.add(name + ".gamma", Matrix<T>::Ones(1, width), false);
    beta = &ps.add(name + ".beta", Matrix<T>::Zero(1, width), false);
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    return ad::layer_norm(x, tape.parameter(*gamma), tape.parameter(*beta));
  }
};

/// Linear -> GELU -> Linear.
template <typename T>
struct Mlp {
  Linear<T> fc1;
  Linear<T> fc2;

  Mlp() = default;
  Mlp(ParameterSet<T>& ps, const std::string& name, int in, int hidden, int out, std::mt19937_64& rng,
      double out_gain = 1.0)
      : fc1(ps, name + ".fc1", in, hidden, rng), fc2(ps, name + ".fc2", hidden, out, rng, out_gain) {}

  Var<T> operator()(Tape<T>& tape, Var<T> x) const { return fc2(tape, ad::gelu(fc1(tape, x))); }
};

/// Multi-head attention with input and output projections.
template <typename T>
struct MultiHeadAttention {
  Linear<T> wq, wk, wv, wo;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterSet<T>& ps, const std::string& name, int d, int num_heads, std::mt19937_64& rng)
      : wq(ps, name + ".q", d, d, rng),
        wk(ps, name + ".k", d, d, rng),
        wv(ps, name + ".v", d, d, rng),
        wo(ps, name + ".o", d, d, rng),
        heads(num_heads) {
    if (num_heads <= 0 || d % num_heads != 0) throw ConfigError("model width must be divisible by heads");
  }

  Var<T> operator()(Tape<T>& tape, Var<T> q, Var<T> kv, ad::AttentionLayout layout = {},
                    std::vector<Matrix<T>>* capture = nullptr) const {
    layout.heads = heads;
    Var<T> out = ad::attention(wq(tape, q), wk(tape, kv), wv(tape, kv), layout, capture);
    return wo(tape, out);
  }
};

/// Pre-norm feed-forward sublayer: x + MLP(LN(x)).
template <typename T>
struct FeedForward {
  LayerNorm<T> norm;
  Mlp<T> mlp;

  FeedForward() = default;
  FeedForward(ParameterSet<T>& ps, const std::string& name, int d, int hidden, std::mt19937_64& rng)
      : norm(ps, name + ".norm", d), mlp(ps, name + ".mlp", d, hidden, d, rng) {}

  Var<T> operator()(Tape<T>& tape, Var<T> x) const { return ad::add(x, mlp(tape, norm(tape, x))); }
};

/// Pre-norm self-attention block followed by a feed-forward sublayer.
template <typename T>
struct SelfAttentionBlock {
  LayerNorm<T> norm;
  MultiHeadAttention<T> attn;
  FeedForward<T> ffn;

  SelfAttentionBlock() = default;
  SelfAttentionBlock(ParameterSet<T>& ps, const std::string& name, int d, int heads, int hidden,
                     std::mt19937_64& rng)
      : norm(ps, name + ".norm", d), attn(ps, name + ".attn", d, heads, rng), ffn(ps, name + ".ffn", d, hidden, rng) {}

  Var<T> operator()(Tape<T>& tape, Var<T> x, const ad::AttentionLayout& layout = {}) const {
    Var<T> h = norm(tape, x);
    x = ad::add(x, attn(tape, h, h, layout));
    return ffn(tape, x);
  }
};

/// Pre-norm cross-attention sublayer: q + Attn(LN(q), LN(kv)).
template <typename T>
struct CrossAttention {
  LayerNorm<T> norm_q;
  LayerNorm<T> norm_kv;
  MultiHeadAttention<T> attn;

  CrossAttention() = default;
  CrossAttention(ParameterSet<T>& ps, const std::string& name, int d, int heads, std::mt19937_64& rng)
      : norm_q(ps, name + ".norm_q", d), norm_kv(ps, name + ".norm_kv", d), attn(ps, name + ".attn", d, heads, rng) {}

  Var<T> operator()(Tape<T>& tape, Var<T> q, Var<T> kv, const ad::AttentionLayout& layout = {},
                    std::vector<Matrix<T>>* capture = nullptr) const {
    return ad::add(q, attn(tape, norm_q(tape, q), norm_kv(tape, kv), layout, capture));
  }
};

}  // namespace mapworld::nn
