#pragma once

#include <cstdint>
#include <vector>

#include "cmac/layers.hpp"

// Recurrent soft attention over the K x K global feature slices. One LSTM
// cell is unrolled for a fixed number of steps with shared weights; before
// each step an attention map is predicted from the previous hidden state and
// used to form a convex combination of the slices.
namespace cmac {

struct GlobalContextConfig {
  std::size_t K = 8;       // global grid side
  std::size_t D = 32;      // embedded feature dim
  std::size_t d = 32;      // LSTM hidden size
  std::size_t d_fc = 64;   // projection width
  std::size_t steps = 4;   // unrolled time steps
  double context_gain = 0.0;  // > 0: L2-normalize each context row to this RMS before projecting
};

struct GlobalContextParams {
  GlobalContextConfig config;
  Linear lstm;    // [h; x; z] (d + 2D) -> 4d, gate blocks ordered i, f, o, g
  Mlp phi;        // d -> d -> K*K attention logits
  Mlp init_c;     // D -> d -> d
  Mlp init_h;     // D -> d -> d
  Linear proj1;   // D -> d_fc
  Linear proj2;   // d_fc -> d_fc

  GlobalContextParams() = default;
  explicit GlobalContextParams(const GlobalContextConfig& cfg);
  // LSTM weights: xavier; MLPs and projections per `scheme`; biases zero.
  void init(const InitScheme& scheme, Rng& rng);
  void collect(std::vector<Parameter*>& out);
};

struct LstmState {
  Var h;  // [R x d]
  Var c;  // [R x d]
};

// c0 = f_init_c(mean slice), h0 = f_init_h(mean slice), repeated for `rows` proposals.
LstmState init_state(Tape& tape, GlobalContextParams& params, Var global_slices, std::size_t rows);

// alpha = softmax(phi(h_prev)), one K*K map per row.
Var attention_map(Tape& tape, GlobalContextParams& params, Var h_prev);

// x = alpha * slices: [R x K*K] x [K*K x D] -> [R x D]
Var context_vector(Var alpha, Var global_slices);

LstmState lstm_step(Tape& tape, GlobalContextParams& params, const LstmState& prev, Var x, Var z);

struct GlobalContextResult {
  Var context;                 // x at the final step, [R x D]
  std::vector<Var> alphas;     // per step, [R x K*K]
  std::vector<Var> contexts;   // per step, [R x D]
  Var slices;                  // the input, [K*K x D]
};

GlobalContextResult run_global_context(Tape& tape, GlobalContextParams& params, Var global_slices,
                                       Var z, std::size_t steps);

// Per-proposal record of one run: K*K weights and the context vector per step.
struct AttentionTrace {
  std::size_t grid = 0;                 // K
  std::vector<Tensor> alphas;           // each [K*K]
  std::vector<Tensor> contexts;         // each [D]
  Tensor final_context;                 // [D]
};

AttentionTrace extract_trace(const GlobalContextResult& result, std::size_t row, std::size_t K);

// Optional row normalization (context_gain), then two affine + relu layers: [R x D] -> [R x d_fc].
Var project_global(Tape& tape, GlobalContextParams& params, Var raw_context);

// Number of times either attention module has run in this process.
std::uint64_t attention_module_calls();
void note_attention_module_call();

}  // namespace cmac
