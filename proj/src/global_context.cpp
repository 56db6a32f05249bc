#include "cmac/global_context.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>

namespace cmac {

namespace {
std::atomic<std::uint64_t> g_attention_calls{0};
}

std::uint64_t attention_module_calls() { return g_attention_calls.load(); }
void note_attention_module_call() { ++g_attention_calls; }

GlobalContextParams::GlobalContextParams(const GlobalContextConfig& cfg)
    : config(cfg),
      lstm("global.lstm", "lstm", 2 * cfg.D + cfg.d, 4 * cfg.d),
      phi("global.phi", "phi", cfg.d, cfg.d, cfg.K * cfg.K),
      init_c("global.init_c", "f_init", cfg.D, cfg.d, cfg.d),
      init_h("global.init_h", "f_init", cfg.D, cfg.d, cfg.d),
      proj1("global.proj1", "global_proj", cfg.D, cfg.d_fc),
      proj2("global.proj2", "global_proj", cfg.d_fc, cfg.d_fc) {}

void GlobalContextParams::init(const InitScheme& scheme, Rng& rng) {
  init_xavier(lstm.weight, lstm.in_features(), lstm.out_features(), rng);
  for (Mlp* m : {&phi, &init_c, &init_h}) {
    scheme.fc(m->hidden.weight, rng);
    scheme.fc(m->output.weight, rng);
  }
  scheme.fc(proj1.weight, rng);
  scheme.fc(proj2.weight, rng);
}

void GlobalContextParams::collect(std::vector<Parameter*>& out) {
  lstm.collect(out);
  phi.collect(out);
  init_c.collect(out);
  init_h.collect(out);
  proj1.collect(out);
  proj2.collect(out);
}

LstmState init_state(Tape& tape, GlobalContextParams& params, Var global_slices, std::size_t rows) {
  if (global_slices.value().rank() != 2 || global_slices.dim(0) == 0) {
    throw DimensionError("init_state: expected [K*K x D] slices, got " + shape_str(global_slices.shape()));
  }
  Var m = mean_rows(global_slices);
  Var c0 = params.init_c.forward(tape, m);
  Var h0 = params.init_h.forward(tape, m);
  return LstmState{repeat_rows(h0, rows), repeat_rows(c0, rows)};
}

Var attention_map(Tape& tape, GlobalContextParams& params, Var h_prev) {
  return softmax(params.phi.forward(tape, h_prev));
}

Var context_vector(Var alpha, Var global_slices) { return matmul(alpha, global_slices); }

LstmState lstm_step(Tape& tape, GlobalContextParams& params, const LstmState& prev, Var x, Var z) {
  const std::size_t d = params.config.d;
  const Var stacked[] = {prev.h, x, z};
  Var gates = params.lstm.forward(tape, concat_cols(stacked));
  Var i = activation(slice_cols(gates, 0, d), Activation::sigmoid);
  Var f = activation(slice_cols(gates, d, 2 * d), Activation::sigmoid);
  Var o = activation(slice_cols(gates, 2 * d, 3 * d), Activation::sigmoid);
  Var g = activation(slice_cols(gates, 3 * d, 4 * d), Activation::tanh);
  Var c = add(mul(f, prev.c), mul(i, g));
  Var h = mul(o, activation(c, Activation::tanh));
  return LstmState{h, c};
}

GlobalContextResult run_global_context(Tape& tape, GlobalContextParams& params, Var global_slices,
                                       Var z, std::size_t steps) {
  if (steps == 0) throw ContractError("run_global_context: at least one time step is required");
  note_attention_module_call();
  const std::size_t rows = z.dim(0);
  LstmState state = init_state(tape, params, global_slices, rows);
  GlobalContextResult result;
  result.slices = global_slices;
  for (std::size_t t = 0; t < steps; ++t) {
    Var alpha = attention_map(tape, params, state.h);
    Var x = context_vector(alpha, global_slices);
    result.alphas.push_back(alpha);
    result.contexts.push_back(x);
    // The state after the final step feeds nothing downstream.
    if (t + 1 < steps) state = lstm_step(tape, params, state, x, z);
  }
  result.context = result.contexts.back();
  return result;
}

AttentionTrace extract_trace(const GlobalContextResult& result, std::size_t row, std::size_t K) {
  auto take_row = [row](const Tensor& m) {
    const std::size_t n = m.dim(1);
    std::vector<double> v(m.data().begin() + static_cast<std::ptrdiff_t>(row * n),
                          m.data().begin() + static_cast<std::ptrdiff_t>((row + 1) * n));
    return Tensor({n}, std::move(v));
  };
  AttentionTrace trace;
  trace.grid = K;
  for (const Var& a : result.alphas) trace.alphas.push_back(take_row(a.value()));
  for (const Var& x : result.contexts) trace.contexts.push_back(take_row(x.value()));
  trace.final_context = trace.contexts.back();
  return trace;
}

Var project_global(Tape& tape, GlobalContextParams& params, Var raw_context) {
  const double gain = params.config.context_gain;
  if (gain > 0) raw_context = scale(l2_normalize(raw_context), gain * std::sqrt(static_cast<double>(params.config.D)));
  Var hidden = activation(params.proj1.forward(tape, raw_context), Activation::relu);
  return activation(params.proj2.forward(tape, hidden), Activation::relu);
}

}  // namespace cmac
