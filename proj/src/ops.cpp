#include "cmac/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "cmac/log.hpp"

namespace cmac {

namespace {

std::string shapes(const Tensor& a, const Tensor& b) {
  return shape_str(a.shape()) + " and " + shape_str(b.shape());
}

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw ContractError("operands recorded on different tapes");
}

// Row/column extents of a rank-1 or rank-2 tensor viewed as a matrix.
std::pair<std::size_t, std::size_t> as_rows(const Tensor& t) {
  if (t.rank() == 1) return {1, t.dim(0)};
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  throw DimensionError("expected a vector or matrix, got " + shape_str(t.shape()));
}

// Shape of a 3D or 4D cube as (batch, channels, height, width).
struct Cube {
  std::size_t n, c, h, w;
  bool batched;
};

Cube as_cube(const Tensor& t, const char* op) {
  if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2), false};
  if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3), true};
  throw DimensionError(std::string(op) + ": expected a [C x H x W] or [N x C x H x W] cube, got " +
                       shape_str(t.shape()));
}

std::size_t window_begin(std::size_t i, std::size_t extent, std::size_t bins) {
  return (i * extent) / bins;
}

std::size_t window_end(std::size_t i, std::size_t extent, std::size_t bins) {
  return ((i + 1) * extent + bins - 1) / bins;
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shapes(A, B));
  }
  const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor C({m, n});
  const double* pa = A.data().data();
  const double* pb = B.data().data();
  double* pc = C.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * n;
      double* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(C), {ia, ib}, [ia, ib, m, k, n](Tape& t, const Tensor& g, const Tensor& /*out*/) {
    const double* pg = g.data().data();
    if (t.requires_grad(ia)) {
      // dA = dC * B^T
      const double* pb = t.value(ib).data().data();
      double* da = t.grad_buffer(ia).data().data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          const double* grow = pg + i * n;
          const double* brow = pb + p * n;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          da[i * k + p] += s;
        }
      }
    }
    if (t.requires_grad(ib)) {
      // dB = A^T * dC
      const double* pa = t.value(ia).data().data();
      double* db = t.grad_buffer(ib).data().data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double av = pa[i * k + p];
          if (av == 0.0) continue;
          const double* grow = pg + i * n;
          double* drow = db + p * n;
          for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
        }
      }
    }
  });
}

namespace {

enum class Binary { add, sub, mul };

Var binary(Var a, Var b, Binary kind, const char* name) {
  require_same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape()) {
    throw DimensionError(std::string(name) + ": shape mismatch " + shapes(A, B));
  }
  Tensor out(A.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    switch (kind) {
      case Binary::add: out[i] = A[i] + B[i]; break;
      case Binary::sub: out[i] = A[i] - B[i]; break;
      case Binary::mul: out[i] = A[i] * B[i]; break;
    }
  }
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib, kind](Tape& t, const Tensor& g, const Tensor& /*out*/) {
    const std::size_t n = g.numel();
    if (t.requires_grad(ia)) {
      Tensor& da = t.grad_buffer(ia);
      if (kind == Binary::mul) {
        const Tensor& B = t.value(ib);
        for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * B[i];
      } else {
        for (std::size_t i = 0; i < n; ++i) da[i] += g[i];
      }
    }
    if (t.requires_grad(ib)) {
      Tensor& db = t.grad_buffer(ib);
      if (kind == Binary::mul) {
        const Tensor& A = t.value(ia);
        for (std::size_t i = 0; i < n; ++i) db[i] += g[i] * A[i];
      } else if (kind == Binary::sub) {
        for (std::size_t i = 0; i < n; ++i) db[i] -= g[i];
      } else {
        for (std::size_t i = 0; i < n; ++i) db[i] += g[i];
      }
    }
  });
}

}  // namespace

Var add(Var a, Var b) { return binary(a, b, Binary::add, "add"); }
Var sub(Var a, Var b) { return binary(a, b, Binary::sub, "sub"); }
Var mul(Var a, Var b) { return binary(a, b, Binary::mul, "mul"); }

Var scale(Var x, double s) {
  Tensor out = x.value();
  for (double& v : out.storage()) v *= s;
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {ix}, [ix, s](Tape& t, const Tensor& g, const Tensor& /*out*/) {
    Tensor& dx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += s * g[i];
  });
}

Var add_row_bias(Var x, Var bias) {
  require_same_tape(x, bias);
  const Tensor& X = x.value();
  const Tensor& b = bias.value();
  const auto [m, n] = as_rows(X);
  if (b.numel() != n) {
    throw DimensionError("add_row_bias: bias " + shape_str(b.shape()) + " does not fit rows of " +
                         shape_str(X.shape()));
  }
  Tensor out = X;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
  }
  const std::size_t ix = x.id, ibias = bias.id;
  const std::size_t rows = m, cols = n;
  return x.tape->record(std::move(out), {ix, ibias}, [ix, ibias, rows, cols](Tape& t, const Tensor& g, const Tensor& /*out*/) {
    t.accumulate(ix, g);
    if (t.requires_grad(ibias)) {
      Tensor& db = t.grad_buffer(ibias);
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) db[j] += g[i * cols + j];
      }
    }
  });
}

Var activation(Var x, Activation kind) {
  const Tensor& X = x.value();
  Tensor out(X.shape());
  std::uint64_t sig = 0;
  for (std::size_t i = 0; i < X.numel(); ++i) {
    const double v = X[i];
    switch (kind) {
      case Activation::sigmoid: out[i] = 1.0 / (1.0 + std::exp(-v)); break;
      case Activation::tanh: out[i] = std::tanh(v); break;
      case Activation::relu:
        out[i] = v > 0.0 ? v : 0.0;
        sig = sig * 31 + (v > 0.0 ? 1 : 0);
        break;
    }
  }
  if (kind == Activation::relu) x.tape->mix_signature(sig);
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {ix}, [ix, kind](Tape& t, const Tensor& g, const Tensor& Y) {
    Tensor& dx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      double d = 0.0;
      switch (kind) {
        case Activation::sigmoid: d = Y[i] * (1.0 - Y[i]); break;
        case Activation::tanh: d = 1.0 - Y[i] * Y[i]; break;
        case Activation::relu: d = Y[i] > 0.0 ? 1.0 : 0.0; break;
      }
      dx[i] += d * g[i];
    }
  });
}

Var softmax(Var logits) {
  const Tensor& X = logits.value();
  const auto [m, n] = as_rows(X);
  if (n == 0) throw DimensionError("softmax: empty input");
  Tensor out(X.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = X.data().data() + i * n;
    double* orow = out.data().data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      s += orow[j];
    }
    for (std::size_t j = 0; j < n; ++j) orow[j] /= s;
  }
  const std::size_t ix = logits.id;
  const std::size_t rows = m, cols = n;
  return logits.tape->record(std::move(out), {ix}, [ix, rows, cols](Tape& t, const Tensor& g, const Tensor& Y) {
    Tensor& dx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < rows; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += g[i * cols + j] * Y[i * cols + j];
      for (std::size_t j = 0; j < cols; ++j) {
        dx[i * cols + j] += Y[i * cols + j] * (g[i * cols + j] - dot);
      }
    }
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t ix = x.id;
  return x.tape->record(Tensor::scalar(s), {ix}, [ix](Tape& t, const Tensor& g, const Tensor& /*out*/) {
    Tensor& dx = t.grad_buffer(ix);
    for (double& v : dx.storage()) v += g[0];
  });
}

Var mean(Var x) {
  const std::size_t n = x.value().numel();
  if (n == 0) throw DimensionError("mean: empty input");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var mean_rows(Var x) {
  const Tensor& X = x.value();
  const auto [m, n] = as_rows(X);
  if (m == 0) throw DimensionError("mean_rows: no rows");
  Tensor out({1, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j] += X[i * n + j];
  }
  const double inv = 1.0 / static_cast<double>(m);
  for (double& v : out.storage()) v *= inv;
  const std::size_t ix = x.id;
  const std::size_t rows = m, cols = n;
  return x.tape->record(std::move(out), {ix}, [ix, rows, cols, inv](Tape& t, const Tensor& g, const Tensor& /*out*/) {
    Tensor& dx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) dx[i * cols + j] += g[j] * inv;
    }
  });
}

Var repeat_rows(Var x, std::size_t m) {
  const Tensor& X = x.value();
  const auto [r, n] = as_rows(X);
  if (r != 1) throw DimensionError("repeat_rows: expected a single row, got " + shape_str(X.shape()));
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    std::copy(X.data().begin(), X.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {ix}, [ix, m, n](Tape& t, const Tensor& g, const Tensor& /*out*/) {
    Tensor& dx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) dx[j] += g[i * n + j];
    }
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  const Tensor& X = x.value();
  const auto [m, n] = as_rows(X);
  if (begin > end || end > n) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside " + shape_str(X.shape()));
  }
  const std::size_t w = end - begin;
  Tensor out({m, w});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = X[i * n + begin + j];
  }
  const std::size_t ix = x.id;
  const std::size_t rows = m, cols = n;
  return x.tape->record(std::move(out), {ix}, [ix, rows, cols, begin, w](Tape& t, const Tensor& g, const Tensor& /*out*/) {
    Tensor& dx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < w; ++j) dx[i * cols + begin + j] += g[i * w + j];
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = as_rows(parts[0].value()).first;
  std::size_t total = 0;
  std::vector<std::size_t> widths, ids;
  for (const Var& p : parts) {
    require_same_tape(parts[0], p);
    const auto [r, n] = as_rows(p.value());
    if (r != m) {
      throw DimensionError("concat_cols: row mismatch " + shapes(parts[0].value(), p.value()));
    }
    widths.push_back(n);
    ids.push_back(p.id);
    total += n;
  }
  Tensor out({m, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + off + j] = P[i * widths[k] + j];
    }
    off += widths[k];
  }
  return parts[0].tape->record(std::move(out), ids, [ids, widths, m, total](Tape& t, const Tensor& g, const Tensor& /*out*/) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        Tensor& d = t.grad_buffer(ids[k]);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < widths[k]; ++j) d[i * widths[k] + j] += g[i * total + off + j];
        }
      }
      off += widths[k];
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const Tensor& first = parts[0].value();
  if (first.rank() < 1) throw DimensionError("concat_rows: rank-0 input");
  Shape row_shape(first.shape().begin() + 1, first.shape().end());
  std::size_t rows = 0;
  std::vector<std::size_t> ids, counts;
  for (const Var& p : parts) {
    require_same_tape(parts[0], p);
    const Tensor& P = p.value();
    if (P.rank() != first.rank() || !std::equal(row_shape.begin(), row_shape.end(), P.shape().begin() + 1)) {
      throw DimensionError("concat_rows: trailing shape mismatch " + shapes(first, P));
    }
    rows += P.dim(0);
    ids.push_back(p.id);
    counts.push_back(P.numel());
  }
  Shape shape = first.shape();
  shape[0] = rows;
  Tensor out(shape);
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += p.value().numel();
  }
  return parts[0].tape->record(std::move(out), ids, [ids, counts](Tape& t, const Tensor& g, const Tensor& /*out*/) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        Tensor& d = t.grad_buffer(ids[k]);
        for (std::size_t i = 0; i < counts[k]; ++i) d[i] += g[off + i];
      }
      off += counts[k];
    }
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {ix}, [ix](Tape& t, const Tensor& g, const Tensor& /*out*/) {
    Tensor& dx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += g[i];
  });
}

Var conv2d(Var input, Var kernels, std::size_t stride, std::size_t pad) {
  require_same_tape(input, kernels);
  const Tensor& X = input.value();
  const Tensor& K = kernels.value();
  const Cube in = as_cube(X, "conv2d");
  if (K.rank() != 4 || K.dim(1) != in.c) {
    throw DimensionError("conv2d: kernels " + shape_str(K.shape()) + " do not match input " +
                         shape_str(X.shape()));
  }
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  const std::size_t oc = K.dim(0), kh = K.dim(2), kw = K.dim(3);
  if (in.h + 2 * pad < kh || in.w + 2 * pad < kw) {
    throw DimensionError("conv2d: kernel " + shape_str(K.shape()) + " larger than padded input " +
                         shape_str(X.shape()) + " (pad " + std::to_string(pad) + ")");
  }
  const std::size_t oh = (in.h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (in.w + 2 * pad - kw) / stride + 1;
  Shape out_shape = in.batched ? Shape{in.n, oc, oh, ow} : Shape{oc, oh, ow};
  Tensor out(out_shape);

  // Lowered to matrix products per sample: out[o, p] = sum_j K[o, j] col[j, p]
  // with col[(c, ky, kx), (oy, ox)] the input pixel under that tap (0 in the padding).
  const Cube geo = in;
  const std::size_t taps = in.c * kh * kw, pixels = oh * ow;
  auto build_index = [geo, kh, kw, oh, ow, stride, pad](std::vector<long>& index) {
    index.assign(geo.c * kh * kw * oh * ow, -1);
    std::size_t j = 0;
    for (std::size_t c = 0; c < geo.c; ++c) {
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx, ++j) {
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(geo.h)) continue;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(geo.w)) continue;
              index[(j * oh + oy) * ow + ox] = static_cast<long>((c * geo.h + static_cast<std::size_t>(iy)) * geo.w + static_cast<std::size_t>(ix));
            }
          }
        }
      }
    }
  };
  // The gather pattern depends only on the geometry, so it is built once.
  auto index = std::make_shared<std::vector<long>>();
  build_index(*index);
  const std::size_t in_plane = in.c * in.h * in.w, out_plane = oc * pixels;
  {
    const double* px = X.data().data();
    const double* pk = K.data().data();
    double* po = out.data().data();
    std::vector<double> col(taps * pixels);
    for (std::size_t n = 0; n < in.n; ++n) {
      const double* xs = px + n * in_plane;
      for (std::size_t q = 0; q < col.size(); ++q) col[q] = (*index)[q] >= 0 ? xs[(*index)[q]] : 0.0;
      double* os = po + n * out_plane;
      for (std::size_t o = 0; o < oc; ++o) {
        double* orow = os + o * pixels;
        for (std::size_t j = 0; j < taps; ++j) {
          const double kv = pk[o * taps + j];
          const double* crow = col.data() + j * pixels;
          for (std::size_t q = 0; q < pixels; ++q) orow[q] += kv * crow[q];
        }
      }
    }
  }
  const std::size_t ix = input.id, ik = kernels.id;
  const std::size_t batch = in.n;
  return input.tape->record(
      std::move(out), {ix, ik},
      [ix, ik, index, taps, pixels, oc, batch, in_plane, out_plane](Tape& t, const Tensor& g, const Tensor& /*out*/) {
        const double* pg = g.data().data();
        const bool want_x = t.requires_grad(ix), want_k = t.requires_grad(ik);
        const double* px = t.value(ix).data().data();
        const double* pk = t.value(ik).data().data();
        double* dx = want_x ? t.grad_buffer(ix).data().data() : nullptr;
        double* dk = want_k ? t.grad_buffer(ik).data().data() : nullptr;
        std::vector<double> col(taps * pixels), dcol;
        if (want_x) dcol.resize(taps * pixels);
        for (std::size_t n = 0; n < batch; ++n) {
          const double* gs = pg + n * out_plane;
          if (want_k) {
            const double* xs = px + n * in_plane;
            for (std::size_t q = 0; q < col.size(); ++q) col[q] = (*index)[q] >= 0 ? xs[(*index)[q]] : 0.0;
            for (std::size_t o = 0; o < oc; ++o) {
              const double* grow = gs + o * pixels;
              for (std::size_t j = 0; j < taps; ++j) {
                const double* crow = col.data() + j * pixels;
                double s = 0.0;
                for (std::size_t q = 0; q < pixels; ++q) s += grow[q] * crow[q];
                dk[o * taps + j] += s;
              }
            }
          }
          if (want_x) {
            std::fill(dcol.begin(), dcol.end(), 0.0);
            for (std::size_t o = 0; o < oc; ++o) {
              const double* grow = gs + o * pixels;
              for (std::size_t j = 0; j < taps; ++j) {
                const double kv = pk[o * taps + j];
                double* drow = dcol.data() + j * pixels;
                for (std::size_t q = 0; q < pixels; ++q) drow[q] += kv * grow[q];
              }
            }
            double* dxs = dx + n * in_plane;
            for (std::size_t q = 0; q < dcol.size(); ++q) {
              if ((*index)[q] >= 0) dxs[(*index)[q]] += dcol[q];
            }
          }
        }
      });
}

Var add_channel_bias(Var x, Var bias) {
  require_same_tape(x, bias);
  const Tensor& X = x.value();
  const Cube cube = as_cube(X, "add_channel_bias");
  if (bias.value().numel() != cube.c) {
    throw DimensionError("add_channel_bias: bias " + shape_str(bias.value().shape()) +
                         " does not match channels of " + shape_str(X.shape()));
  }
  const std::size_t plane = cube.h * cube.w;
  Tensor out = X;
  const Tensor& b = bias.value();
  for (std::size_t n = 0; n < cube.n; ++n) {
    for (std::size_t c = 0; c < cube.c; ++c) {
      double* p = out.data().data() + (n * cube.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] += b[c];
    }
  }
  const std::size_t ix = x.id, ib = bias.id;
  return x.tape->record(std::move(out), {ix, ib}, [ix, ib, cube, plane](Tape& t, const Tensor& g, const Tensor& /*out*/) {
    t.accumulate(ix, g);
    if (t.requires_grad(ib)) {
      Tensor& db = t.grad_buffer(ib);
      for (std::size_t n = 0; n < cube.n; ++n) {
        for (std::size_t c = 0; c < cube.c; ++c) {
          const double* p = g.data().data() + (n * cube.c + c) * plane;
          double s = 0.0;
          for (std::size_t i = 0; i < plane; ++i) s += p[i];
          db[c] += s;
        }
      }
    }
  });
}

namespace {

// Routes a pooled gradient back to its recorded argmax positions.
Tape::BackwardFn argmax_backward(std::size_t ix, std::vector<std::size_t> argmax) {
  return [ix, argmax = std::move(argmax)](Tape& t, const Tensor& g, const Tensor& /*out*/) {
    Tensor& dx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += g[i];
  };
}

std::uint64_t hash_indices(const std::vector<std::size_t>& idx) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t v : idx) h = (h ^ v) * 1099511628211ULL;
  return h;
}

// Max over [y0,y1)x[x0,x1) of one channel plane; first maximum wins.
std::size_t window_argmax(const double* plane, std::size_t width, std::size_t y0, std::size_t y1,
                          std::size_t x0, std::size_t x1) {
  std::size_t best = y0 * width + x0;
  double best_v = plane[best];
  for (std::size_t y = y0; y < y1; ++y) {
    for (std::size_t x = x0; x < x1; ++x) {
      const double v = plane[y * width + x];
      if (v > best_v) {
        best_v = v;
        best = y * width + x;
      }
    }
  }
  return best;
}

}  // namespace

Var adaptive_max_pool(Var input, std::size_t out_h, std::size_t out_w) {
  const Tensor& X = input.value();
  if (X.rank() != 3) throw DimensionError("adaptive_max_pool: expected [C x H x W], got " + shape_str(X.shape()));
  const std::size_t C = X.dim(0), H = X.dim(1), W = X.dim(2);
  if (out_h == 0 || out_w == 0 || out_h > H || out_w > W) {
    throw DimensionError("adaptive_max_pool: output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                         " larger than input " + shape_str(X.shape()));
  }
  Tensor out({C, out_h, out_w});
  std::vector<std::size_t> argmax(out.numel());
  for (std::size_t c = 0; c < C; ++c) {
    const double* plane = X.data().data() + c * H * W;
    for (std::size_t i = 0; i < out_h; ++i) {
      for (std::size_t j = 0; j < out_w; ++j) {
        const std::size_t a = window_argmax(plane, W, window_begin(i, H, out_h), window_end(i, H, out_h),
                                            window_begin(j, W, out_w), window_end(j, W, out_w));
        const std::size_t o = (c * out_h + i) * out_w + j;
        out[o] = plane[a];
        argmax[o] = c * H * W + a;
      }
    }
  }
  input.tape->mix_signature(hash_indices(argmax));
  return input.tape->record(std::move(out), {input.id}, argmax_backward(input.id, std::move(argmax)));
}

Var global_avg_pool(Var input) {
  const Tensor& X = input.value();
  const Cube cube = as_cube(X, "global_avg_pool");
  const std::size_t plane = cube.h * cube.w;
  if (plane == 0) throw DimensionError("global_avg_pool: empty spatial extent");
  Shape shape = cube.batched ? Shape{cube.n, cube.c} : Shape{cube.c};
  Tensor out(shape);
  const double inv = 1.0 / static_cast<double>(plane);
  for (std::size_t k = 0; k < cube.n * cube.c; ++k) {
    const double* p = X.data().data() + k * plane;
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += p[i];
    out[k] = s * inv;
  }
  const std::size_t ix = input.id;
  return input.tape->record(std::move(out), {ix}, [ix, plane, inv](Tape& t, const Tensor& g, const Tensor& /*out*/) {
    Tensor& dx = t.grad_buffer(ix);
    for (std::size_t k = 0; k < g.numel(); ++k) {
      double* p = dx.data().data() + k * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] += g[k] * inv;
    }
  });
}

Var concat_channels(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const Cube ca = as_cube(A, "concat_channels");
  const Cube cb = as_cube(B, "concat_channels");
  if (ca.batched != cb.batched || ca.n != cb.n || ca.h != cb.h || ca.w != cb.w) {
    throw DimensionError("concat_channels: spatial mismatch " + shapes(A, B));
  }
  const std::size_t plane = ca.h * ca.w;
  const std::size_t c = ca.c + cb.c;
  Shape shape = ca.batched ? Shape{ca.n, c, ca.h, ca.w} : Shape{c, ca.h, ca.w};
  Tensor out(shape);
  const std::size_t na = ca.c * plane, nb = cb.c * plane;
  for (std::size_t n = 0; n < ca.n; ++n) {
    double* dst = out.data().data() + n * (na + nb);
    std::copy_n(A.data().data() + n * na, na, dst);
    std::copy_n(B.data().data() + n * nb, nb, dst + na);
  }
  const std::size_t ia = a.id, ib = b.id;
  const std::size_t batch = ca.n;
  return a.tape->record(std::move(out), {ia, ib}, [ia, ib, batch, na, nb](Tape& t, const Tensor& g, const Tensor& /*out*/) {
    for (std::size_t n = 0; n < batch; ++n) {
      const double* src = g.data().data() + n * (na + nb);
      if (t.requires_grad(ia)) {
        double* d = t.grad_buffer(ia).data().data() + n * na;
        for (std::size_t i = 0; i < na; ++i) d[i] += src[i];
      }
      if (t.requires_grad(ib)) {
        double* d = t.grad_buffer(ib).data().data() + n * nb;
        for (std::size_t i = 0; i < nb; ++i) d[i] += src[na + i];
      }
    }
  });
}

Var slice_channels(Var x, std::size_t begin, std::size_t end) {
  const Tensor& X = x.value();
  const Cube cube = as_cube(X, "slice_channels");
  if (begin > end || end > cube.c) {
    throw DimensionError("slice_channels: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside " + shape_str(X.shape()));
  }
  const std::size_t plane = cube.h * cube.w;
  const std::size_t c = end - begin;
  Shape shape = cube.batched ? Shape{cube.n, c, cube.h, cube.w} : Shape{c, cube.h, cube.w};
  Tensor out(shape);
  for (std::size_t n = 0; n < cube.n; ++n) {
    std::copy_n(X.data().data() + (n * cube.c + begin) * plane, c * plane, out.data().data() + n * c * plane);
  }
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {ix}, [ix, cube, begin, c, plane](Tape& t, const Tensor& g, const Tensor& /*out*/) {
    Tensor& dx = t.grad_buffer(ix);
    for (std::size_t n = 0; n < cube.n; ++n) {
      const double* src = g.data().data() + n * c * plane;
      double* dst = dx.data().data() + (n * cube.c + begin) * plane;
      for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
    }
  });
}

RoiWindow roi_window(const Box& roi, double spatial_scale, std::size_t height, std::size_t width) {
  auto clampi = [](double v, std::size_t hi) {
    return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(hi)));
  };
  std::size_t x0 = clampi(std::floor(roi.x1 * spatial_scale), width);
  std::size_t y0 = clampi(std::floor(roi.y1 * spatial_scale), height);
  std::size_t x1 = clampi(std::ceil(roi.x2 * spatial_scale), width);
  std::size_t y1 = clampi(std::ceil(roi.y2 * spatial_scale), height);
  if (x1 <= x0) {
    const double cx = std::floor(0.5 * (roi.x1 + roi.x2) * spatial_scale);
    x0 = std::min(clampi(cx, width), width - 1);
    x1 = x0 + 1;
  }
  if (y1 <= y0) {
    const double cy = std::floor(0.5 * (roi.y1 + roi.y2) * spatial_scale);
    y0 = std::min(clampi(cy, height), height - 1);
    y1 = y0 + 1;
  }
  return RoiWindow{y0, x0, y1 - y0, x1 - x0};
}

Var roi_pool(Var feature, std::span<const Box> rois, double spatial_scale, std::size_t out_size) {
  const Tensor& X = feature.value();
  if (X.rank() != 3) throw DimensionError("roi_pool: expected [C x H x W], got " + shape_str(X.shape()));
  if (out_size == 0) throw DimensionError("roi_pool: output size must be positive");
  const std::size_t C = X.dim(0), H = X.dim(1), W = X.dim(2);
  const std::size_t S = out_size;
  Tensor out({rois.size(), C, S, S});
  std::vector<std::size_t> argmax(out.numel());
  for (std::size_t r = 0; r < rois.size(); ++r) {
    if (!rois[r].valid()) throw ContractError("roi_pool: box with x1 > x2 or y1 > y2");
    const RoiWindow win = roi_window(rois[r], spatial_scale, H, W);
    for (std::size_t c = 0; c < C; ++c) {
      const double* plane = X.data().data() + c * H * W;
      for (std::size_t i = 0; i < S; ++i) {
        const std::size_t ys = win.y0 + window_begin(i, win.h, S);
        const std::size_t ye = win.y0 + window_end(i, win.h, S);
        for (std::size_t j = 0; j < S; ++j) {
          const std::size_t xs = win.x0 + window_begin(j, win.w, S);
          const std::size_t xe = win.x0 + window_end(j, win.w, S);
          const std::size_t a = window_argmax(plane, W, ys, ye, xs, xe);
          const std::size_t o = ((r * C + c) * S + i) * S + j;
          out[o] = plane[a];
          argmax[o] = c * H * W + a;
        }
      }
    }
  }
  feature.tape->mix_signature(hash_indices(argmax));
  return feature.tape->record(std::move(out), {feature.id}, argmax_backward(feature.id, std::move(argmax)));
}

Var cube_to_slices(Var cube) {
  const Tensor& X = cube.value();
  if (X.rank() != 3) throw DimensionError("cube_to_slices: expected [D x K x K], got " + shape_str(X.shape()));
  const std::size_t D = X.dim(0), cells = X.dim(1) * X.dim(2);
  Tensor out({cells, D});
  for (std::size_t c = 0; c < D; ++c) {
    for (std::size_t i = 0; i < cells; ++i) out[i * D + c] = X[c * cells + i];
  }
  const std::size_t ix = cube.id;
  return cube.tape->record(std::move(out), {ix}, [ix, D, cells](Tape& t, const Tensor& g, const Tensor& /*out*/) {
    Tensor& dx = t.grad_buffer(ix);
    for (std::size_t c = 0; c < D; ++c) {
      for (std::size_t i = 0; i < cells; ++i) dx[c * cells + i] += g[i * D + c];
    }
  });
}

namespace {

double lattice(std::size_t i, std::size_t n) {
  if (n == 1) return 0.0;
  return -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1);
}

}  // namespace

Var affine_grid(Var theta, std::size_t out_size, double scale) {
  const Tensor& T = theta.value();
  if (T.rank() != 2 || T.dim(1) != 2) {
    throw DimensionError("affine_grid: expected [R x 2] translations, got " + shape_str(T.shape()));
  }
  const std::size_t R = T.dim(0), S = out_size;
  Tensor grid({R, S, S, 2});
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t i = 0; i < S; ++i) {
      for (std::size_t j = 0; j < S; ++j) {
        const std::size_t o = ((r * S + i) * S + j) * 2;
        grid[o] = scale * lattice(j, S) + T[r * 2];
        grid[o + 1] = scale * lattice(i, S) + T[r * 2 + 1];
      }
    }
  }
  const std::size_t it = theta.id;
  return theta.tape->record(std::move(grid), {it}, [it, R, S](Tape& t, const Tensor& g, const Tensor& /*out*/) {
    Tensor& dt = t.grad_buffer(it);
    for (std::size_t r = 0; r < R; ++r) {
      for (std::size_t k = 0; k < S * S; ++k) {
        dt[r * 2] += g[(r * S * S + k) * 2];
        dt[r * 2 + 1] += g[(r * S * S + k) * 2 + 1];
      }
    }
  });
}

Var bilinear_sample(Var input, Var grid) {
  require_same_tape(input, grid);
  const Tensor& U = input.value();
  const Tensor& G = grid.value();
  if (U.rank() != 4 || G.rank() != 4 || G.dim(3) != 2 || G.dim(0) != U.dim(0)) {
    throw DimensionError("bilinear_sample: incompatible input/grid " + shapes(U, G));
  }
  const std::size_t R = U.dim(0), D = U.dim(1), H = U.dim(2), W = U.dim(3);
  const std::size_t Ho = G.dim(1), Wo = G.dim(2);
  Tensor out({R, D, Ho, Wo});

  // Per output point: top-left support pixel and fractional offsets.
  struct Tap {
    std::ptrdiff_t x0, y0;
    double fx, fy;
  };
  std::vector<Tap> taps(R * Ho * Wo);
  std::uint64_t sig = 0;
  for (std::size_t k = 0; k < taps.size(); ++k) {
    // Lattice coordinates carry rounding error; positions within 1e-9 px of a
    // pixel centre are snapped so integer sample points reproduce the input.
    auto snap = [](double v) {
      const double r = std::nearbyint(v);
      return std::abs(v - r) < 1e-9 ? r : v;
    };
    const double px = snap((G[k * 2] + 1.0) * 0.5 * static_cast<double>(W - 1));
    const double py = snap((G[k * 2 + 1] + 1.0) * 0.5 * static_cast<double>(H - 1));
    const double fx0 = std::floor(px), fy0 = std::floor(py);
    taps[k] = Tap{static_cast<std::ptrdiff_t>(fx0), static_cast<std::ptrdiff_t>(fy0), px - fx0, py - fy0};
    sig = sig * 131 + static_cast<std::uint64_t>(taps[k].x0 * 64 + taps[k].y0);
  }
  input.tape->mix_signature(sig);

  auto in_range = [H, W](std::ptrdiff_t y, std::ptrdiff_t x) {
    return y >= 0 && x >= 0 && y < static_cast<std::ptrdiff_t>(H) && x < static_cast<std::ptrdiff_t>(W);
  };
  auto pixel = [&](const double* plane, std::ptrdiff_t y, std::ptrdiff_t x) {
    return in_range(y, x) ? plane[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)] : 0.0;
  };

  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < D; ++c) {
      const double* plane = U.data().data() + (r * D + c) * H * W;
      for (std::size_t p = 0; p < Ho * Wo; ++p) {
        const Tap& tp = taps[r * Ho * Wo + p];
        const double v00 = pixel(plane, tp.y0, tp.x0), v01 = pixel(plane, tp.y0, tp.x0 + 1);
        const double v10 = pixel(plane, tp.y0 + 1, tp.x0), v11 = pixel(plane, tp.y0 + 1, tp.x0 + 1);
        out[(r * D + c) * Ho * Wo + p] = (1 - tp.fy) * ((1 - tp.fx) * v00 + tp.fx * v01) +
                                         tp.fy * ((1 - tp.fx) * v10 + tp.fx * v11);
      }
    }
  }

  const std::size_t iu = input.id, ig = grid.id;
  return input.tape->record(
      std::move(out), {iu, ig},
      [iu, ig, taps = std::move(taps), R, D, H, W, Ho, Wo, in_range](Tape& t, const Tensor& g, const Tensor& /*out*/) {
        const bool need_u = t.requires_grad(iu), need_g = t.requires_grad(ig);
        const Tensor& U = t.value(iu);
        double* du = need_u ? t.grad_buffer(iu).data().data() : nullptr;
        double* dg = need_g ? t.grad_buffer(ig).data().data() : nullptr;
        const double sx = 0.5 * static_cast<double>(W - 1) * fault::sampler_grid_gradient_scale;
        const double sy = 0.5 * static_cast<double>(H - 1) * fault::sampler_grid_gradient_scale;
        for (std::size_t r = 0; r < R; ++r) {
          for (std::size_t p = 0; p < Ho * Wo; ++p) {
            const std::size_t k = r * Ho * Wo + p;
            const auto& tp = taps[k];
            const std::ptrdiff_t ys[2] = {tp.y0, tp.y0 + 1};
            const std::ptrdiff_t xs[2] = {tp.x0, tp.x0 + 1};
            const double wy[2] = {1 - tp.fy, tp.fy};
            const double wx[2] = {1 - tp.fx, tp.fx};
            double dpx = 0.0, dpy = 0.0;
            for (std::size_t c = 0; c < D; ++c) {
              const double go = g[(r * D + c) * Ho * Wo + p];
              if (go == 0.0) continue;
              const std::size_t base = (r * D + c) * H * W;
              for (int a = 0; a < 2; ++a) {
                for (int b = 0; b < 2; ++b) {
                  if (!in_range(ys[a], xs[b])) continue;
                  const std::size_t idx = base + static_cast<std::size_t>(ys[a]) * W + static_cast<std::size_t>(xs[b]);
                  if (need_u) du[idx] += go * wy[a] * wx[b];
                  if (need_g) {
                    const double v = U[idx];
                    dpx += go * v * wy[a] * (b == 0 ? -1.0 : 1.0);
                    dpy += go * v * wx[b] * (a == 0 ? -1.0 : 1.0);
                  }
                }
              }
            }
            if (need_g) {
              dg[k * 2] += dpx * sx;
              dg[k * 2 + 1] += dpy * sy;
            }
          }
        }
      });
}

Var l2_normalize(Var x, double eps) {
  const Tensor& X = x.value();
  if (X.rank() < 1) throw DimensionError("l2_normalize: rank-0 input");
  const std::size_t R = X.dim(0);
  const std::size_t n = R == 0 ? 0 : X.numel() / R;
  Tensor out(X.shape());
  std::vector<double> denom(R);
  std::uint64_t sig = 0;
  for (std::size_t r = 0; r < R; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += X[r * n + i] * X[r * n + i];
    const double norm = std::sqrt(s);
    const bool guarded = norm <= eps;
    sig = sig * 3 + (guarded ? 1 : 0);
    denom[r] = guarded ? -eps : norm;  // negative marks the eps branch
    const double d = guarded ? eps : norm;
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = X[r * n + i] / d;
  }
  x.tape->mix_signature(sig);
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {ix}, [ix, denom, n](Tape& t, const Tensor& g, const Tensor& Y) {
    Tensor& dx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < denom.size(); ++r) {
      if (denom[r] < 0) {
        for (std::size_t i = 0; i < n; ++i) dx[r * n + i] += g[r * n + i] / -denom[r];
        continue;
      }
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += g[r * n + i] * Y[r * n + i];
      for (std::size_t i = 0; i < n; ++i) dx[r * n + i] += (g[r * n + i] - Y[r * n + i] * dot) / denom[r];
    }
  });
}

Var nll_of_probs(Var probs, std::span<const int> labels) {
  const Tensor& P = probs.value();
  const auto [m, n] = as_rows(P);
  if (labels.size() != m) {
    throw DimensionError("nll_of_probs: " + std::to_string(labels.size()) + " labels for " +
                         shape_str(P.shape()));
  }
  constexpr double floor_p = 1e-12;
  Tensor out({m});
  std::vector<double> dp(m);
  std::uint64_t sig = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const int u = labels[i];
    if (u < 0 || static_cast<std::size_t>(u) >= n) throw ContractError("nll_of_probs: label out of range");
    const double p = P[i * n + static_cast<std::size_t>(u)];
    if (p < floor_p) {
      log::warn("classification probability below 1e-12 clamped before log");
      out[i] = -std::log(floor_p);
      dp[i] = 0.0;
      sig = sig * 3 + 1;
    } else {
      out[i] = -std::log(p);
      dp[i] = -1.0 / p;
      sig = sig * 3;
    }
  }
  probs.tape->mix_signature(sig);
  std::vector<int> lab(labels.begin(), labels.end());
  const std::size_t ip = probs.id;
  return probs.tape->record(std::move(out), {ip}, [ip, lab, dp, n](Tape& t, const Tensor& g, const Tensor& /*out*/) {
    Tensor& d = t.grad_buffer(ip);
    for (std::size_t i = 0; i < lab.size(); ++i) d[i * n + static_cast<std::size_t>(lab[i])] += g[i] * dp[i];
  });
}

double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

double smooth_l1_grad(double x) {
  if (std::abs(x) < 1.0) return x;
  return x > 0 ? 1.0 : -1.0;
}

Var localization_loss(Var offsets, std::span<const int> labels, const Tensor& targets) {
  const Tensor& O = offsets.value();
  const auto [m, n] = as_rows(O);
  if (labels.size() != m || targets.rank() != 2 || targets.dim(0) != m || targets.dim(1) != 4 || n % 4 != 0) {
    throw DimensionError("localization_loss: offsets " + shape_str(O.shape()) + ", targets " +
                         shape_str(targets.shape()) + ", " + std::to_string(labels.size()) + " labels");
  }
  Tensor out({m});
  std::vector<int> lab(labels.begin(), labels.end());
  std::uint64_t sig = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const int u = lab[i];
    if (u <= 0) continue;
    const std::size_t base = i * n + 4 * static_cast<std::size_t>(u - 1);
    if (base + 4 > (i + 1) * n) throw ContractError("localization_loss: label exceeds class count");
    for (std::size_t k = 0; k < 4; ++k) {
      const double diff = O[base + k] - targets[i * 4 + k];
      out[i] += smooth_l1(diff);
      sig = sig * 3 + (std::abs(diff) < 1.0 ? 1 : 2);
    }
  }
  offsets.tape->mix_signature(sig);
  const std::size_t io = offsets.id;
  return offsets.tape->record(std::move(out), {io}, [io, lab, targets, n](Tape& t, const Tensor& g, const Tensor& /*out*/) {
    const Tensor& O = t.value(io);
    Tensor& d = t.grad_buffer(io);
    for (std::size_t i = 0; i < lab.size(); ++i) {
      if (lab[i] <= 0) continue;
      const std::size_t base = i * n + 4 * static_cast<std::size_t>(lab[i] - 1);
      for (std::size_t k = 0; k < 4; ++k) {
        d[base + k] += g[i] * smooth_l1_grad(O[base + k] - targets[i * 4 + k]);
      }
    }
  });
}

}  // namespace cmac
