#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "promodet/nn/ops.hpp"

namespace promodet::nn {

// Named parameters and batch-norm buffers of a model. Entries never move
// once created, so layers keep raw pointers into the store.
template <typename T>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  Parameter<T>* create(const std::string& name, Tensor<T> init) {
    if (params_.count(name) || bn_.count(name)) {
      throw ConfigError("duplicate parameter name: " + name);
    }
    auto& slot = params_[name];
    slot = std::make_unique<Parameter<T>>(std::move(init));
    return slot.get();
  }

  BatchNormState<T>* create_bn(const std::string& prefix, int channels) {
    auto& slot = bn_[prefix];
    slot = std::make_unique<BatchNormState<T>>();
    slot->running_mean = Tensor<T>({1, channels, 1, 1}, T(0));
    slot->running_var = Tensor<T>({1, channels, 1, 1}, T(1));
    return slot.get();
  }

  // He-normal initialization with the given fan-in.
  Tensor<T> msra(Shape s, int fan_in) { return normal(s, std::sqrt(2.0 / fan_in)); }
  Tensor<T> normal(Shape s, double stddev) {
    Tensor<T> t(s);
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.vec()) v = static_cast<T>(dist(rng_));
    return t;
  }

  std::map<std::string, std::unique_ptr<Parameter<T>>>& params() { return params_; }
  const std::map<std::string, std::unique_ptr<Parameter<T>>>& params() const { return params_; }
  std::map<std::string, std::unique_ptr<BatchNormState<T>>>& bn_states() { return bn_; }
  const std::map<std::string, std::unique_ptr<BatchNormState<T>>>& bn_states() const {
    return bn_;
  }

  Parameter<T>* find(const std::string& name) {
    auto it = params_.find(name);
    return it == params_.end() ? nullptr : it->second.get();
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p->zero_grad();
  }

  // Flat view of every stored array, parameters and running statistics,
  // keyed the way checkpoints name them.
  std::map<std::string, Tensor<T>*> arrays() {
    std::map<std::string, Tensor<T>*> out;
    for (auto& [k, p] : params_) out[k] = &p->value();
    for (auto& [k, s] : bn_) {
      out[k + ".running_mean"] = &s->running_mean;
      out[k + ".running_var"] = &s->running_var;
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p->value().size();
    return n;
  }

 private:
  std::mt19937_64 rng_;
  std::map<std::string, std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, std::unique_ptr<BatchNormState<T>>> bn_;
};

enum class Init { kMsra, kZero, kSmall };

template <typename T>
struct Conv2d {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;
  int stride = 1;
  int pad = 0;
  int dilation = 1;

  Conv2d() = default;
  Conv2d(ParamStore<T>& store, const std::string& name, int in, int out, int kernel,
         int stride_ = 1, int pad_ = -1, bool with_bias = true, Init init = Init::kMsra,
         double bias_init = 0.0, int dilation_ = 1)
      : stride(stride_), pad(pad_ < 0 ? dilation_ * (kernel / 2) : pad_), dilation(dilation_) {
    const Shape ws{out, in, kernel, kernel};
    Tensor<T> w;
    switch (init) {
      case Init::kMsra:
        w = store.msra(ws, in * kernel * kernel);
        break;
      case Init::kZero:
        w = Tensor<T>(ws);
        break;
      case Init::kSmall:
        w = store.normal(ws, 0.01);
        break;
    }
    weight = store.create(name + ".weight", std::move(w));
    if (with_bias) {
      bias = store.create(name + ".bias", Tensor<T>({1, out, 1, 1}, static_cast<T>(bias_init)));
    }
  }

  int out_channels() const { return weight->value().n(); }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x) const {
    return conv2d(tape, x, weight->var, bias ? bias->var : Var<T>(), stride, pad, dilation);
  }
};

// Convolution (no bias) -> batch norm -> ReLU.
template <typename T>
struct CbrBlock {
  Conv2d<T> conv;
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;
  BatchNormState<T>* bn = nullptr;

  CbrBlock() = default;
  CbrBlock(ParamStore<T>& store, const std::string& name, int in, int out, int kernel,
           int stride = 1, int pad = -1, int dilation = 1) {
    if (kernel != 1 && kernel != 3) {
      throw ConfigError(name + ": CBR kernel must be 1 or 3, got " + std::to_string(kernel));
    }
    conv = Conv2d<T>(store, name + ".conv", in, out, kernel, stride, pad, false, Init::kMsra, 0.0,
                     dilation);
    gamma = store.create(name + ".bn.gamma", Tensor<T>({1, out, 1, 1}, T(1)));
    beta = store.create(name + ".bn.beta", Tensor<T>({1, out, 1, 1}, T(0)));
    bn = store.create_bn(name + ".bn", out);
  }

  int out_channels() const { return conv.out_channels(); }

  Var<T> operator()(Tape<T>& tape, const Var<T>& x, bool training) const {
    auto y = conv(tape, x);
    y = batch_norm(tape, y, gamma->var, beta->var, *bn, training);
    return relu(tape, y);
  }
};

}  // namespace promodet::nn
