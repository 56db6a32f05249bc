#pragma once

#include <string>
#include <vector>

#include "cmac/ops.hpp"
#include "cmac/rng.hpp"

namespace cmac {

// Fills with N(0, stddev^2).
void init_gaussian(Parameter& p, double stddev, Rng& rng);
// Glorot uniform: U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
void init_xavier(Parameter& p, std::size_t fan_in, std::size_t fan_out, Rng& rng);
// He normal: N(0, 2 / fan_in).
void init_he(Parameter& p, std::size_t fan_in, Rng& rng);

// Initialization of freshly added layers: fixed zero-mean Gaussians, or He
// normal scaled by fan-in.
struct InitScheme {
  bool fan_in = false;
  double fc_std = 0.01;
  double conv_std = 0.001;

  void fc(Parameter& w, Rng& rng) const;    // w: [in x out]
  void conv(Parameter& w, Rng& rng) const;  // w: [O x C x k x k]
};

// y = x W + b with W: [in x out].
struct Linear {
  Parameter weight;
  Parameter bias;

  Linear() = default;
  Linear(const std::string& name, const std::string& group, std::size_t in, std::size_t out);

  std::size_t in_features() const { return weight.value.dim(0); }
  std::size_t out_features() const { return weight.value.dim(1); }

  Var forward(Tape& tape, Var x);
  void collect(std::vector<Parameter*>& out);
};

// One hidden layer: out(act(hidden(x))).
struct Mlp {
  Linear hidden;
  Linear output;
  Activation act = Activation::tanh;

  Mlp() = default;
  Mlp(const std::string& name, const std::string& group, std::size_t in, std::size_t width,
      std::size_t out);

  Var forward(Tape& tape, Var x);
  void collect(std::vector<Parameter*>& out);
};

struct Conv {
  Parameter weight;  // [O x C x k x k]
  Parameter bias;    // [O]
  std::size_t stride = 1;
  std::size_t pad = 0;

  Conv() = default;
  Conv(const std::string& name, const std::string& group, std::size_t in, std::size_t out,
       std::size_t kernel, std::size_t stride, std::size_t pad);

  std::size_t fan_in() const {
    return weight.value.dim(1) * weight.value.dim(2) * weight.value.dim(3);
  }

  Var forward(Tape& tape, Var x);
  void collect(std::vector<Parameter*>& out);
};

}  // namespace cmac
