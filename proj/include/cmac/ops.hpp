#pragma once

#include <span>
#include <vector>

#include "cmac/box.hpp"
#include "cmac/tape.hpp"

// Differentiable operations over Tape variables. Every op validates shapes,
// computes its forward value eagerly and records a gradient rule.
//
// Layout conventions: feature cubes are channel-major [C x H x W]; batched
// cubes carry a leading proposal axis [R x C x H x W]; per-proposal vectors
// are rows of an [R x n] matrix.
namespace cmac {

enum class Activation { sigmoid, tanh, relu };

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double s);
// x: [m x n], bias: [n]
Var add_row_bias(Var x, Var bias);
Var activation(Var x, Activation kind);

// Softmax along the last axis (each row of a matrix, or the whole vector).
Var softmax(Var logits);

Var sum(Var x);
Var mean(Var x);
// [m x n] -> [1 x n]
Var mean_rows(Var x);
// [1 x n] -> [m x n]
Var repeat_rows(Var x, std::size_t m);
Var slice_cols(Var x, std::size_t begin, std::size_t end);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var reshape(Var x, Shape shape);

// Cross-correlation. input: [C x H x W] or [N x C x H x W],
// kernels: [O x C x kh x kw].
Var conv2d(Var input, Var kernels, std::size_t stride, std::size_t pad);
// Adds bias[c] to every cell of channel c; works on 3D and 4D cubes.
Var add_channel_bias(Var x, Var bias);

// Max pooling onto a fixed grid; window i spans [floor(i*H/out), ceil((i+1)*H/out)).
// Ties go to the first maximum in row-major order.
Var adaptive_max_pool(Var input, std::size_t out_h, std::size_t out_w);
// [C x H x W] -> [C];  [N x C x H x W] -> [N x C]
Var global_avg_pool(Var input);
// Concatenates along the channel axis (axis 0 of 3D cubes, axis 1 of 4D).
Var concat_channels(Var a, Var b);
Var slice_channels(Var x, std::size_t begin, std::size_t end);

// Feature-space window of a box: x1,y1 floored and x2,y2 ceiled after scaling,
// then clipped. Boxes covering less than one cell collapse to the cell under
// their center.
struct RoiWindow {
  std::size_t y0, x0, h, w;
};
RoiWindow roi_window(const Box& roi, double spatial_scale, std::size_t height, std::size_t width);

// feature: [C x H x W] -> [R x C x S x S]
Var roi_pool(Var feature, std::span<const Box> rois, double spatial_scale, std::size_t out_size);

// [D x K x K] -> [K*K x D]; row i is the channel fiber of row-major cell i.
Var cube_to_slices(Var cube);

// theta: [R x 2] translations -> sampling grid [R x S x S x 2] of (x, y)
// source coordinates in [-1, 1]: src = scale * lattice + t.
Var affine_grid(Var theta, std::size_t out_size, double scale = 0.5);
// input: [R x D x H x W], grid: [R x Ho x Wo x 2] -> [R x D x Ho x Wo]
Var bilinear_sample(Var input, Var grid);

// Scales each leading-axis sample to unit L2 norm: x_r / max(|x_r|, eps).
Var l2_normalize(Var x, double eps = 1e-8);

// probs: [R x n] -> [R], -ln(max(p[r, label_r], 1e-12))
Var nll_of_probs(Var probs, std::span<const int> labels);
// offsets: [R x 4C], targets: [R x 4] -> [R]. Row r sums smooth_l1 over the
// four offsets of class labels[r]; rows with label 0 contribute 0.
Var localization_loss(Var offsets, std::span<const int> labels, const Tensor& targets);

double smooth_l1(double x);
double smooth_l1_grad(double x);

// Test-only hook: scales the gradient that bilinear_sample propagates into its
// sampling grid. Left at 1.0 outside fault-injection tests.
namespace fault {
inline double sampler_grid_gradient_scale = 1.0;
}

}  // namespace cmac
