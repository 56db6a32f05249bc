#include "cmac/layers.hpp"

#include <cmath>

namespace cmac {

void init_gaussian(Parameter& p, double stddev, Rng& rng) {
  for (double& v : p.value.storage()) v = rng.normal(0.0, stddev);
}

void init_xavier(Parameter& p, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : p.value.storage()) v = rng.uniform(-a, a);
}

void init_he(Parameter& p, std::size_t fan_in, Rng& rng) {
  const double s = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : p.value.storage()) v = rng.normal(0.0, s);
}

void InitScheme::fc(Parameter& w, Rng& rng) const {
  if (fan_in) {
    init_he(w, w.value.dim(0), rng);
  } else {
    init_gaussian(w, fc_std, rng);
  }
}

void InitScheme::conv(Parameter& w, Rng& rng) const {
  if (fan_in) {
    init_he(w, w.value.dim(1) * w.value.dim(2) * w.value.dim(3), rng);
  } else {
    init_gaussian(w, conv_std, rng);
  }
}

Linear::Linear(const std::string& name, const std::string& group, std::size_t in, std::size_t out)
    : weight(name + ".weight", group, Tensor({in, out})), bias(name + ".bias", group, Tensor({out})) {}

Var Linear::forward(Tape& tape, Var x) {
  return add_row_bias(matmul(x, tape.param(weight)), tape.param(bias));
}

void Linear::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

Mlp::Mlp(const std::string& name, const std::string& group, std::size_t in, std::size_t width,
         std::size_t out)
    : hidden(name + ".hidden", group, in, width), output(name + ".out", group, width, out) {}

Var Mlp::forward(Tape& tape, Var x) {
  return output.forward(tape, activation(hidden.forward(tape, x), act));
}

void Mlp::collect(std::vector<Parameter*>& out) {
  hidden.collect(out);
  output.collect(out);
}

Conv::Conv(const std::string& name, const std::string& group, std::size_t in, std::size_t out,
           std::size_t kernel, std::size_t stride_, std::size_t pad_)
    : weight(name + ".weight", group, Tensor({out, in, kernel, kernel})),
      bias(name + ".bias", group, Tensor({out})),
      stride(stride_),
      pad(pad_) {}

Var Conv::forward(Tape& tape, Var x) {
  return add_channel_bias(conv2d(x, tape.param(weight), stride, pad), tape.param(bias));
}

void Conv::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

}  // namespace cmac
