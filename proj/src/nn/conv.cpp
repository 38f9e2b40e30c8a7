#include <Eigen/Core>
#include <algorithm>
#include <cstring>
#include <stdexcept>

#include "hseg/nn.hpp"
#include "hseg/parallel.hpp"

namespace hseg::nn {

namespace {
thread_local int t_conv_jobs = 1;
}  // namespace

void set_conv_jobs(int jobs) { t_conv_jobs = std::max(1, jobs); }
int conv_jobs() { return t_conv_jobs; }

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
void validate(const BasicTensor<T>& input, const ConvParams<T>& p) {
  if (p.dilation < 1) throw std::invalid_argument("conv2d: dilation must be >= 1");
  if (p.kh < 1 || p.kw < 1 || p.out_channels < 1) throw std::invalid_argument("conv2d: bad kernel shape");
  if (input.shape().c != p.in_channels) {
    throw std::invalid_argument("conv2d: input has " + std::to_string(input.shape().c) + " channels, kernel expects " +
                                std::to_string(p.in_channels));
  }
  if (p.weights.size() != p.weight_count() || p.bias.size() != std::size_t(p.out_channels)) {
    throw std::invalid_argument("conv2d: parameter buffers do not match the declared shape");
  }
}

// Tap (i, j) reads the input at offset ((i - ceil(kh/2) + 1) * d, (j - ceil(kw/2) + 1) * d).
inline int tap_offset(int i, int k, int d) { return (i - (k + 1) / 2 + 1) * d; }

// Rows of the im2col matrix for pixels [r0, r1) of image n; columns are
// ordered (i, j, c) to match the weight layout.
template <typename T>
void im2col_rows(const BasicTensor<T>& in, int n, const ConvParams<T>& p, std::size_t r0, std::size_t r1, T* col) {
  const auto& s = in.shape();
  const int C = s.c;
  const std::size_t K = std::size_t(p.kh) * p.kw * C;
  for (std::size_t r = r0; r < r1; ++r) {
    const int y = static_cast<int>(r / std::size_t(s.w));
    const int x = static_cast<int>(r % std::size_t(s.w));
    T* row = col + (r - r0) * K;
    for (int i = 0; i < p.kh; ++i) {
      const int iy = y + tap_offset(i, p.kh, p.dilation);
      for (int j = 0; j < p.kw; ++j) {
        const int ix = x + tap_offset(j, p.kw, p.dilation);
        T* dst = row + (std::size_t(i) * p.kw + j) * C;
        if (iy < 0 || iy >= s.h || ix < 0 || ix >= s.w) {
          std::fill(dst, dst + C, T(0));
        } else {
          std::memcpy(dst, in.data() + in.index(n, iy, ix, 0), sizeof(T) * C);
        }
      }
    }
  }
}

// Row chunk sized so the im2col block stays cache resident.
inline std::size_t chunk_rows(std::size_t K) { return std::max<std::size_t>(64, (std::size_t(1) << 17) / K); }

// ---- Winograd F(2x2, 3x3) -------------------------------------------------------
//
// A tile covers outputs (y0 + r d, x0 + s d) for r, s in {0, 1} and reads
// inputs at offsets {-d, 0, d, 2d}. Tiles never overlap, so every output is
// written once. Tile transforms run over all channels at once; the 16
// elementwise products become 16 GEMMs per chunk of tiles.

constexpr std::size_t kTileChunk = 128;

struct Tile {
  int n, y0, x0;
};

// Tile origins along one axis: per residue class mod d, every second sample.
inline std::vector<int> tile_starts(int extent, int d) {
  std::vector<int> s;
  for (int p = 0; p < d && p < extent; ++p)
    for (int y = p; y < extent; y += 2 * d) s.push_back(y);
  return s;
}

// Tiles of image n in a fixed order.
inline std::vector<Tile> make_tiles(const Shape4& s, int n, int d) {
  const auto ys = tile_starts(s.h, d), xs = tile_starts(s.w, d);
  std::vector<Tile> tiles;
  tiles.reserve(ys.size() * xs.size());
  for (int y : ys)
    for (int x : xs) tiles.push_back({n, y, x});
  return tiles;
}

// Row a of B^T z B for all channels; restrict-qualified so the loop vectorizes.
template <typename T>
void transform_row(const T* const (&z)[4][4], int a, int C, T* dst, std::size_t plane) {
  static constexpr int kRow[4][2] = {{0, 2}, {1, 2}, {2, 1}, {1, 3}};
  static constexpr T kSign[4] = {-1, 1, -1, -1};
  const int i0 = kRow[a][0], i1 = kRow[a][1];
  const T sg = kSign[a];
  const T* __restrict p00 = z[i0][0];
  const T* __restrict p01 = z[i0][1];
  const T* __restrict p02 = z[i0][2];
  const T* __restrict p03 = z[i0][3];
  const T* __restrict p10 = z[i1][0];
  const T* __restrict p11 = z[i1][1];
  const T* __restrict p12 = z[i1][2];
  const T* __restrict p13 = z[i1][3];
  T* __restrict o0 = dst;
  T* __restrict o1 = dst + plane;
  T* __restrict o2 = dst + 2 * plane;
  T* __restrict o3 = dst + 3 * plane;
  for (int c = 0; c < C; ++c) {
    const T r0 = p00[c] + sg * p10[c], r1 = p01[c] + sg * p11[c];
    const T r2 = p02[c] + sg * p12[c], r3 = p03[c] + sg * p13[c];
    o0[c] = r0 - r2;
    o1[c] = r1 + r2;
    o2[c] = r2 - r1;
    o3[c] = r1 - r3;
  }
}

// V[xi][t][c] = (B^T z B)[xi] for the 4x4 input patch z of each tile.
template <typename T>
void input_transform(const BasicTensor<T>& in, int d, const Tile* tiles, std::size_t count, const T* zeros, T* V) {
  const auto& s = in.shape();
  const int C = s.c;
  const std::size_t plane = kTileChunk * std::size_t(C);
  for (std::size_t t = 0; t < count; ++t) {
    const T* z[4][4];
    for (int a = 0; a < 4; ++a) {
      const int iy = tiles[t].y0 + (a - 1) * d;
      for (int b = 0; b < 4; ++b) {
        const int ix = tiles[t].x0 + (b - 1) * d;
        z[a][b] = iy < 0 || iy >= s.h || ix < 0 || ix >= s.w ? zeros : in.data() + in.index(tiles[t].n, iy, ix, 0);
      }
    }
    T* out = V + t * std::size_t(C);
    for (int a = 0; a < 4; ++a) transform_row(z, a, C, out + std::size_t(a * 4) * plane, plane);
  }
}

constexpr double kG[4][3] = {{1, 0, 0}, {0.5, 0.5, 0.5}, {0.5, -0.5, 0.5}, {0, 0, 1}};

// U[xi] (in x out) = (G g G^T)[xi] for every channel pair.
template <typename T>
std::vector<T> kernel_transform(const ConvParams<T>& p) {
  const std::size_t CO = std::size_t(p.in_channels) * p.out_channels;
  std::vector<T> U(16 * CO);
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b) {
      T* u = U.data() + std::size_t(a * 4 + b) * CO;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          const double f = kG[a][i] * kG[b][j];
          if (f == 0.0) continue;
          const T* w = p.weights.data() + std::size_t(i * 3 + j) * CO;
          for (std::size_t k = 0; k < CO; ++k) u[k] += T(f) * w[k];
        }
    }
  return U;
}

// Y = A^T m A for one tile, all output channels; dst[r][q] receives output (r, q).
template <typename T>
void output_tile(const T* m, std::size_t plane, int O, T* const (&dst)[2][2]) {
  const T* __restrict p[16];
  for (int xi = 0; xi < 16; ++xi) p[xi] = m + std::size_t(xi) * plane;
  T* __restrict y00 = dst[0][0];
  T* __restrict y01 = dst[0][1];
  T* __restrict y10 = dst[1][0];
  T* __restrict y11 = dst[1][1];
  for (int o = 0; o < O; ++o) {
    T c[4][2];
    for (int a = 0; a < 4; ++a) {
      const T m1 = p[a * 4 + 1][o], m2 = p[a * 4 + 2][o];
      c[a][0] = p[a * 4][o] + m1 + m2;
      c[a][1] = m1 - m2 - p[a * 4 + 3][o];
    }
    y00[o] = c[0][0] + c[1][0] + c[2][0];
    y01[o] = c[0][1] + c[1][1] + c[2][1];
    y10[o] = c[1][0] - c[2][0] - c[3][0];
    y11[o] = c[1][1] - c[2][1] - c[3][1];
  }
}

// m = A g A^T for one tile of output gradients g[r][q], all output channels.
template <typename T>
void grad_tile(const T* const (&g)[2][2], int O, T* m, std::size_t plane) {
  const T* __restrict g00 = g[0][0];
  const T* __restrict g01 = g[0][1];
  const T* __restrict g10 = g[1][0];
  const T* __restrict g11 = g[1][1];
  T* __restrict out[16];
  for (int xi = 0; xi < 16; ++xi) out[xi] = m + std::size_t(xi) * plane;
  for (int a = 0; a < 4; ++a) {
    T* __restrict m0 = out[a * 4 + 0];
    T* __restrict m1 = out[a * 4 + 1];
    T* __restrict m2 = out[a * 4 + 2];
    T* __restrict m3 = out[a * 4 + 3];
    // Rows of A g: g0, g0 + g1, g0 - g1, -g1.
    const T u = a == 3 ? T(0) : T(1);
    const T v = a == 0 ? T(0) : a == 2 ? T(-1) : T(1);
    const T sv = a == 3 ? T(-1) : v;
    for (int o = 0; o < O; ++o) {
      const T h0 = u * g00[o] + sv * g10[o], h1 = u * g01[o] + sv * g11[o];
      m0[o] = h0;
      m1[o] = h0 + h1;
      m2[o] = h0 - h1;
      m3[o] = -h1;
    }
  }
}

// Images are processed independently on up to conv_jobs() threads; each
// output is written once, so the result does not depend on the thread count.
template <typename T>
void winograd_conv(const BasicTensor<T>& in, const ConvParams<T>& p, BasicTensor<T>& out) {
  const auto& s = in.shape();
  const int C = s.c, O = p.out_channels, d = p.dilation;
  const auto U = kernel_transform(p);
  const std::vector<T> zeros(std::size_t(C), T(0));
  parallel_for(std::size_t(s.n), conv_jobs(), [&](std::size_t n) {
    const auto tiles = make_tiles(s, int(n), d);
    std::vector<T> V(16 * kTileChunk * C), M(16 * kTileChunk * O), discard(static_cast<std::size_t>(O));
    for (std::size_t t0 = 0; t0 < tiles.size(); t0 += kTileChunk) {
      const std::size_t count = std::min(kTileChunk, tiles.size() - t0);
      input_transform(in, d, tiles.data() + t0, count, zeros.data(), V.data());
      for (int xi = 0; xi < 16; ++xi) {
        Eigen::Map<const RowMat<T>> Vx(V.data() + xi * kTileChunk * C, Eigen::Index(count), C);
        Eigen::Map<const RowMat<T>> Ux(U.data() + std::size_t(xi) * C * O, C, O);
        Eigen::Map<RowMat<T>> Mx(M.data() + xi * kTileChunk * O, Eigen::Index(count), O);
        Mx.noalias() = Vx * Ux;
      }
      const std::size_t plane = kTileChunk * std::size_t(O);
      for (std::size_t t = 0; t < count; ++t) {
        const Tile& tile = tiles[t0 + t];
        T* dst[2][2];
        for (int r = 0; r < 2; ++r)
          for (int q = 0; q < 2; ++q) {
            const int y = tile.y0 + r * d, x = tile.x0 + q * d;
            dst[r][q] = y < s.h && x < s.w ? out.data() + out.index(tile.n, y, x, 0) : discard.data();
          }
        output_tile(M.data() + t * std::size_t(O), plane, O, dst);
      }
    }
  });
}

// dW for a 3x3 kernel: dU[xi] = sum over tiles of V[xi]^T (A dY A^T)[xi],
// then dW = G^T dU G.
template <typename T>
void winograd_weight_grad(const BasicTensor<T>& in, const ConvParams<T>& p, const BasicTensor<T>& grad_out,
                          std::vector<T>& dw) {
  const auto& s = in.shape();
  const int C = s.c, O = p.out_channels, d = p.dilation;
  const std::vector<T> zeros(std::size_t(std::max(C, O)), T(0));
  const std::size_t CO = std::size_t(C) * O;
  const std::size_t plane = kTileChunk * std::size_t(O);
  // One partial dU per image, summed in image order.
  std::vector<std::vector<T>> partial(std::size_t(s.n));
  parallel_for(std::size_t(s.n), conv_jobs(), [&](std::size_t n) {
    const auto tiles = make_tiles(s, int(n), d);
    std::vector<T> V(16 * kTileChunk * C), M(16 * kTileChunk * O), dU(16 * CO, T(0));
    for (std::size_t t0 = 0; t0 < tiles.size(); t0 += kTileChunk) {
      const std::size_t count = std::min(kTileChunk, tiles.size() - t0);
      input_transform(in, d, tiles.data() + t0, count, zeros.data(), V.data());
      for (std::size_t t = 0; t < count; ++t) {
        const Tile& tile = tiles[t0 + t];
        const T* g[2][2];
        for (int r = 0; r < 2; ++r)
          for (int q = 0; q < 2; ++q) {
            const int y = tile.y0 + r * d, x = tile.x0 + q * d;
            g[r][q] = y < s.h && x < s.w ? grad_out.data() + grad_out.index(tile.n, y, x, 0) : zeros.data();
          }
        grad_tile(g, O, M.data() + t * std::size_t(O), plane);
      }
      for (int xi = 0; xi < 16; ++xi) {
        Eigen::Map<const RowMat<T>> Vx(V.data() + xi * kTileChunk * C, Eigen::Index(count), C);
        Eigen::Map<const RowMat<T>> Mx(M.data() + xi * kTileChunk * O, Eigen::Index(count), O);
        Eigen::Map<RowMat<T>> dUx(dU.data() + std::size_t(xi) * CO, C, O);
        dUx.noalias() += Vx.transpose() * Mx;
      }
    }
    partial[n] = std::move(dU);
  });
  std::vector<T> dU = std::move(partial[0]);
  for (std::size_t n = 1; n < partial.size(); ++n)
    for (std::size_t k = 0; k < dU.size(); ++k) dU[k] += partial[n][k];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      T* w = dw.data() + std::size_t(i * 3 + j) * CO;
      for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) {
          const double f = kG[a][i] * kG[b][j];
          if (f == 0.0) continue;
          const T* u = dU.data() + std::size_t(a * 4 + b) * CO;
          for (std::size_t k = 0; k < CO; ++k) w[k] += T(f) * u[k];
        }
    }
}

// out = conv(in) without bias, written into `out` (same N, H, W).
template <typename T>
void conv_accumulate(const BasicTensor<T>& in, const ConvParams<T>& p, BasicTensor<T>& out) {
  const auto& s = in.shape();
  const std::size_t K = std::size_t(p.kh) * p.kw * s.c;
  const std::size_t P = std::size_t(s.h) * s.w;
  Eigen::Map<const RowMat<T>> W(p.weights.data(), Eigen::Index(K), p.out_channels);
  if (p.kh == 1 && p.kw == 1) {
    parallel_for(std::size_t(s.n), conv_jobs(), [&](std::size_t n) {
      Eigen::Map<const RowMat<T>> A(in.data() + in.index(int(n), 0, 0, 0), Eigen::Index(P), Eigen::Index(K));
      Eigen::Map<RowMat<T>> Y(out.data() + out.index(int(n), 0, 0, 0), Eigen::Index(P), p.out_channels);
      Y.noalias() = A * W;
    });
    return;
  }
  if (p.kh == 3 && p.kw == 3) {
    winograd_conv(in, p, out);
    return;
  }
  const std::size_t chunk = chunk_rows(K);
  std::vector<T> col(chunk * K);
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t r0 = 0; r0 < P; r0 += chunk) {
      const std::size_t r1 = std::min(P, r0 + chunk);
      im2col_rows(in, n, p, r0, r1, col.data());
      Eigen::Map<const RowMat<T>> A(col.data(), Eigen::Index(r1 - r0), Eigen::Index(K));
      Eigen::Map<RowMat<T>> Y(out.data() + out.index(n, 0, 0, 0) + r0 * p.out_channels, Eigen::Index(r1 - r0),
                              p.out_channels);
      Y.noalias() = A * W;
    }
  }
}

// Kernel mirrored in space with input/output channels swapped. For stride 1,
// odd kernels and symmetric "same" padding, convolving the upstream gradient
// with it yields the input gradient.
template <typename T>
ConvParams<T> transposed_kernel(const ConvParams<T>& p) {
  auto t = ConvParams<T>::zeros(p.kh, p.kw, p.out_channels, p.in_channels, p.dilation);
  for (int i = 0; i < p.kh; ++i)
    for (int j = 0; j < p.kw; ++j)
      for (int c = 0; c < p.in_channels; ++c)
        for (int o = 0; o < p.out_channels; ++o) t.w(p.kh - 1 - i, p.kw - 1 - j, o, c) = p.w(i, j, c, o);
  return t;
}

}  // namespace

template <typename T>
ConvParams<T> ConvParams<T>::zeros(int kh, int kw, int in_c, int out_c, int dilation) {
  ConvParams<T> p;
  p.kh = kh;
  p.kw = kw;
  p.in_channels = in_c;
  p.out_channels = out_c;
  p.dilation = dilation;
  p.weights.assign(p.weight_count(), T(0));
  p.bias.assign(std::size_t(out_c), T(0));
  return p;
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const ConvParams<T>& p) {
  validate(input, p);
  const auto& s = input.shape();
  BasicTensor<T> out(Shape4{s.n, s.h, s.w, p.out_channels});
  conv_accumulate(input, p, out);
  Eigen::Map<RowMat<T>> Y(out.data(), Eigen::Index(s.pixels()), p.out_channels);
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(p.bias.data(), p.out_channels);
  Y.rowwise() += b;
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const ConvParams<T>& p, const BasicTensor<T>& grad_out,
                             bool need_input_grad) {
  validate(input, p);
  const auto& s = input.shape();
  if (grad_out.shape() != Shape4{s.n, s.h, s.w, p.out_channels}) {
    throw std::invalid_argument("conv2d_backward: gradient shape " + grad_out.shape().str() + " does not match output");
  }
  if (p.kh % 2 == 0 || p.kw % 2 == 0) throw std::invalid_argument("conv2d_backward: kernels must be odd-sized");
  const std::size_t K = std::size_t(p.kh) * p.kw * s.c;
  const std::size_t P = std::size_t(s.h) * s.w;
  ConvGrads<T> g;
  g.weights.assign(p.weight_count(), T(0));
  g.bias.assign(static_cast<std::size_t>(p.out_channels), T(0));

  std::vector<double> bias_acc(std::size_t(p.out_channels), 0.0);
  for (std::size_t r = 0; r < grad_out.shape().pixels(); ++r) {
    const T* row = grad_out.data() + r * p.out_channels;
    for (int o = 0; o < p.out_channels; ++o) bias_acc[o] += row[o];
  }
  for (int o = 0; o < p.out_channels; ++o) g.bias[o] = static_cast<T>(bias_acc[o]);

  Eigen::Map<RowMat<T>> dW(g.weights.data(), Eigen::Index(K), p.out_channels);
  if (p.kh == 1 && p.kw == 1) {
    std::vector<RowMat<T>> partial(std::size_t(s.n));
    parallel_for(std::size_t(s.n), conv_jobs(), [&](std::size_t n) {
      Eigen::Map<const RowMat<T>> A(input.data() + input.index(int(n), 0, 0, 0), Eigen::Index(P), Eigen::Index(K));
      Eigen::Map<const RowMat<T>> G(grad_out.data() + grad_out.index(int(n), 0, 0, 0), Eigen::Index(P),
                                    p.out_channels);
      partial[n].noalias() = A.transpose() * G;
    });
    for (const auto& part : partial) dW += part;
  } else if (p.kh == 3 && p.kw == 3) {
    winograd_weight_grad(input, p, grad_out, g.weights);
  } else {
    const std::size_t chunk = chunk_rows(K);
    std::vector<T> col(chunk * K);
    for (int n = 0; n < s.n; ++n) {
      for (std::size_t r0 = 0; r0 < P; r0 += chunk) {
        const std::size_t r1 = std::min(P, r0 + chunk);
        im2col_rows(input, n, p, r0, r1, col.data());
        Eigen::Map<const RowMat<T>> A(col.data(), Eigen::Index(r1 - r0), Eigen::Index(K));
        Eigen::Map<const RowMat<T>> G(grad_out.data() + grad_out.index(n, 0, 0, 0) + r0 * p.out_channels,
                                      Eigen::Index(r1 - r0), p.out_channels);
        dW.noalias() += A.transpose() * G;
      }
    }
  }
  if (need_input_grad) {
    g.input = BasicTensor<T>(s);
    conv_accumulate(grad_out, transposed_kernel(p), g.input);
  }
  return g;
}

template struct ConvParams<float>;
template struct ConvParams<double>;
template BasicTensor<float> conv2d(const BasicTensor<float>&, const ConvParams<float>&);
template BasicTensor<double> conv2d(const BasicTensor<double>&, const ConvParams<double>&);
template ConvGrads<float> conv2d_backward(const BasicTensor<float>&, const ConvParams<float>&,
                                          const BasicTensor<float>&, bool);
template ConvGrads<double> conv2d_backward(const BasicTensor<double>&, const ConvParams<double>&,
                                           const BasicTensor<double>&, bool);

}  // namespace hseg::nn
