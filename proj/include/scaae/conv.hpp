#pragma once

// 3D convolution (cross-correlation, the deep-learning convention: no kernel
// flip), strided and transposed, with analytic gradients.
//
// Forward is a direct convolution over a zero-padded copy of the input with
// register-blocked output accumulation: blocks of up to 4 output rows x one
// SIMD vector of output columns stay in registers across the whole tap loop.
// The gradient w.r.t. the input reuses the same kernel through the
// flipped-weight identity (stride 1), and the weight gradient holds one
// vector accumulator per dx tap so a single gout row load feeds K fused
// multiply-adds.
//
// Every output element is reduced in a fixed tap order and parallel loops
// split over independent output slabs only, so results are bitwise identical
// for any thread count.

#include <cstring>
#include <vector>

#include "scaae/core.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

#if defined(__GNUC__) || defined(__clang__)
#define SCAAE_VEC_EXT 1
#endif

namespace scaae {

template <typename T>
struct ConvKernel {
    // weights [out_channels, in_channels, k, k, k]; bias [out_channels]
    // (a kernel applied through conv3d_transposed produces in_channels
    // planes, and its bias must then have in_channels entries instead).
    Tensor<T> weights;
    Tensor<T> bias;
    int stride = 1;
    int padding = 0;

    std::size_t out_channels() const { return weights.dim(0); }
    std::size_t in_channels() const { return weights.dim(1); }
    std::size_t ksize() const { return weights.dim(2); }

    void validate() const {
        require(weights.rank() == 5, "ConvKernel: weights must be rank 5, got " +
                                         shape_str(weights.shape));
        require(weights.dim(2) == weights.dim(3) && weights.dim(3) == weights.dim(4),
                "ConvKernel: kernel must be cubic, got " + shape_str(weights.shape));
        require(stride >= 1, "ConvKernel: stride must be >= 1");
        require(padding >= 0, "ConvKernel: padding must be >= 0");
    }
};

inline std::size_t conv3d_out_dim(std::size_t d, std::size_t k, int stride, int pad) {
    const std::size_t padded = d + 2 * static_cast<std::size_t>(pad);
    require(padded >= k, "conv3d: spatial extent " + std::to_string(d) +
                             " too small for kernel " + std::to_string(k) +
                             " with padding " + std::to_string(pad));
    return (padded - k) / static_cast<std::size_t>(stride) + 1;
}

namespace detail {

#ifdef SCAAE_VEC_EXT
template <typename T>
struct Simd {
    typedef T V __attribute__((vector_size(64)));
    static constexpr std::size_t lanes = 64 / sizeof(T);
    static V load(const T* p) {
        V v;
        __builtin_memcpy(&v, p, sizeof(V));
        return v;
    }
    static void store(T* p, const V& v) { __builtin_memcpy(p, &v, sizeof(V)); }
    static V splat(T x) { return V{} + x; }
    static T hsum(const V& v) {
        T s = T(0);
        for (std::size_t l = 0; l < lanes; ++l) s += v[l];
        return s;
    }
};
#endif

struct ConvGeom {
    std::size_t B, Ci, D, H, W;  // input
    std::size_t Co, K;           // kernel
    std::size_t stride;
    int pad;
    std::size_t Do, Ho, Wo;      // output
    std::size_t Dp, Hp, Wp;      // padded input
};

template <typename T>
ConvGeom conv_geom(const Shape& x, const ConvKernel<T>& ker) {
    ker.validate();
    require(x.size() == 5, "conv3d: input must be [B,C,D,H,W], got " + shape_str(x));
    require(x[1] == ker.in_channels(),
            "conv3d: input channels " + std::to_string(x[1]) +
                " != kernel in_channels " + std::to_string(ker.in_channels()) +
                " (input " + shape_str(x) + ", weights " + shape_str(ker.weights.shape) + ")");
    ConvGeom g;
    g.B = x[0]; g.Ci = x[1]; g.D = x[2]; g.H = x[3]; g.W = x[4];
    g.Co = ker.out_channels();
    g.K = ker.ksize();
    g.stride = static_cast<std::size_t>(ker.stride);
    g.pad = ker.padding;
    g.Do = conv3d_out_dim(g.D, g.K, ker.stride, g.pad);
    g.Ho = conv3d_out_dim(g.H, g.K, ker.stride, g.pad);
    g.Wo = conv3d_out_dim(g.W, g.K, ker.stride, g.pad);
    g.Dp = g.D + 2 * g.pad; g.Hp = g.H + 2 * g.pad; g.Wp = g.W + 2 * g.pad;
    return g;
}

// Zero-padded copy of a batch of volumes: [B, C, Dp, Hp, Wp].
template <typename T>
std::vector<T> pad_batch(const T* x, std::size_t B, std::size_t C,
                         std::size_t D, std::size_t H, std::size_t W, int pad) {
    const std::size_t Dp = D + 2 * pad, Hp = H + 2 * pad, Wp = W + 2 * pad;
    std::vector<T> xp(B * C * Dp * Hp * Wp, T(0));
    if (pad == 0) {
        std::memcpy(xp.data(), x, xp.size() * sizeof(T));
        return xp;
    }
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const T* src = x + ((b * C + c) * D) * H * W;
            T* dst = xp.data() + ((b * C + c) * Dp) * Hp * Wp;
            for (std::size_t z = 0; z < D; ++z)
                for (std::size_t y = 0; y < H; ++y)
                    std::memcpy(dst + ((z + pad) * Hp + (y + pad)) * Wp + pad,
                                src + (z * H + y) * W, W * sizeof(T));
        }
    return xp;
}

// Scalar block of rows x cw output columns; handles any stride and width.
template <typename T>
inline void conv_block_scalar(const T* __restrict xslab, const T* __restrict wt,
                              T bias, T* __restrict out, std::size_t zo,
                              std::size_t yo, std::size_t xo0, std::size_t cw,
                              const ConvGeom& g) {
    T acc[16];
    for (std::size_t c = 0; c < cw; ++c) acc[c] = bias;
    const std::size_t slab = g.Dp * g.Hp * g.Wp;
    const std::size_t s = g.stride;
    const T* wp = wt;
    for (std::size_t ci = 0; ci < g.Ci; ++ci) {
        const T* xci = xslab + ci * slab;
        for (std::size_t dz = 0; dz < g.K; ++dz) {
            const T* xz = xci + (zo * s + dz) * g.Hp * g.Wp;
            for (std::size_t dy = 0; dy < g.K; ++dy) {
                const T* xr = xz + (yo * s + dy) * g.Wp + xo0 * s;
                for (std::size_t dx = 0; dx < g.K; ++dx) {
                    const T w = *wp++;
                    for (std::size_t c = 0; c < cw; ++c) acc[c] += w * xr[c * s + dx];
                }
            }
        }
    }
    T* orow = out + (zo * g.Ho + yo) * g.Wo + xo0;
    for (std::size_t c = 0; c < cw; ++c) orow[c] = acc[c];
}

#ifdef SCAAE_VEC_EXT
// R output rows x one vector of output columns, stride 1, in registers.
template <typename T, int R, int KT>
inline void conv_block_vec(const T* __restrict xslab, const T* __restrict wt,
                           T bias, T* __restrict out, std::size_t zo,
                           std::size_t yo0, std::size_t xo0, const ConvGeom& g) {
    using S = Simd<T>;
    using V = typename S::V;
    const int K = KT > 0 ? KT : static_cast<int>(g.K);
    V a0 = S::splat(bias), a1 = a0, a2 = a0, a3 = a0;
    const std::size_t slab = g.Dp * g.Hp * g.Wp;
    for (std::size_t ci = 0; ci < g.Ci; ++ci) {
        const T* xci = xslab + ci * slab + xo0;
        for (int dz = 0; dz < K; ++dz) {
            const T* xz = xci + (zo + dz) * g.Hp * g.Wp + yo0 * g.Wp;
            const T* wrow = wt + (ci * K + dz) * K * K;
            for (int dy = 0; dy < K; ++dy) {
                const T* r0 = xz + dy * g.Wp;
                for (int dx = 0; dx < K; ++dx) {
                    const V w = S::splat(wrow[dy * K + dx]);
                    a0 += w * S::load(r0 + dx);
                    if constexpr (R > 1) a1 += w * S::load(r0 + g.Wp + dx);
                    if constexpr (R > 2) a2 += w * S::load(r0 + 2 * g.Wp + dx);
                    if constexpr (R > 3) a3 += w * S::load(r0 + 3 * g.Wp + dx);
                }
            }
        }
    }
    T* orow = out + (zo * g.Ho + yo0) * g.Wo + xo0;
    S::store(orow, a0);
    if constexpr (R > 1) S::store(orow + g.Wo, a1);
    if constexpr (R > 2) S::store(orow + 2 * g.Wo, a2);
    if constexpr (R > 3) S::store(orow + 3 * g.Wo, a3);
}
#endif

template <typename T, int KT>
void conv_forward_core_k(const T* xp, const T* weights, const T* bias, T* out,
                         const ConvGeom& g) {
    const std::size_t k3 = g.K * g.K * g.K;
#ifdef SCAAE_VEC_EXT
    constexpr std::size_t L = Simd<T>::lanes;
    const bool vec_ok = (g.stride == 1);
#endif
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (std::size_t b = 0; b < g.B; ++b)
        for (std::size_t co = 0; co < g.Co; ++co) {
            const T* wt = weights + co * g.Ci * k3;
            const T bv = bias ? bias[co] : T(0);
            const T* xslab = xp + b * g.Ci * g.Dp * g.Hp * g.Wp;
            T* op = out + (b * g.Co + co) * g.Do * g.Ho * g.Wo;
            for (std::size_t zo = 0; zo < g.Do; ++zo) {
                std::size_t yo = 0;
#ifdef SCAAE_VEC_EXT
                if (vec_ok) {
                    for (; yo + 4 <= g.Ho; yo += 4) {
                        std::size_t xo = 0;
                        for (; xo + L <= g.Wo; xo += L)
                            conv_block_vec<T, 4, KT>(xslab, wt, bv, op, zo, yo, xo, g);
                        for (; xo < g.Wo; xo += 16)
                            for (int r = 0; r < 4; ++r)
                                conv_block_scalar(xslab, wt, bv, op, zo, yo + r, xo,
                                                  std::min<std::size_t>(16, g.Wo - xo), g);
                    }
                    for (; yo < g.Ho; ++yo) {
                        std::size_t xo = 0;
                        for (; xo + L <= g.Wo; xo += L)
                            conv_block_vec<T, 1, KT>(xslab, wt, bv, op, zo, yo, xo, g);
                        for (; xo < g.Wo; xo += 16)
                            conv_block_scalar(xslab, wt, bv, op, zo, yo, xo,
                                              std::min<std::size_t>(16, g.Wo - xo), g);
                    }
                    continue;
                }
#endif
                for (; yo < g.Ho; ++yo)
                    for (std::size_t xo = 0; xo < g.Wo; xo += 16)
                        conv_block_scalar(xslab, wt, bv, op, zo, yo, xo,
                                          std::min<std::size_t>(16, g.Wo - xo), g);
            }
        }
}

// out[b,co,:] = bias[co] + cross_correlation(xp, weights); bias may be null.
template <typename T>
void conv_forward_core(const T* xp, const T* weights, const T* bias, T* out,
                       const ConvGeom& g) {
    switch (g.K) {
        case 1: conv_forward_core_k<T, 1>(xp, weights, bias, out, g); break;
        case 3: conv_forward_core_k<T, 3>(xp, weights, bias, out, g); break;
        case 5: conv_forward_core_k<T, 5>(xp, weights, bias, out, g); break;
        default: conv_forward_core_k<T, 0>(xp, weights, bias, out, g); break;
    }
}

// out_row[x * stride] += w * in_row[x] (scatter form used by adjoint paths)
template <typename T>
inline void axpy_row_scatter(T* __restrict out, const T* __restrict in, T w,
                             std::size_t n, std::size_t out_stride) {
    if (out_stride == 1) {
        for (std::size_t x = 0; x < n; ++x) out[x] += w * in[x];
    } else {
        for (std::size_t x = 0; x < n; ++x) out[x * out_stride] += w * in[x];
    }
}

// Scatter adjoint: ypad[ci, zo*s+dz, yo*s+dy, xo*s+dx] += w * src[co, zo, yo, xo]
// for one (b, ci); used by the strided grad-input path and transposed conv.
template <typename T>
void conv_adjoint_slab(const T* __restrict src, const T* __restrict weights,
                       T* __restrict ypad, std::size_t ci, std::size_t Ci,
                       std::size_t Co, std::size_t K, std::size_t s,
                       std::size_t Do, std::size_t Ho, std::size_t Wo,
                       std::size_t Hp, std::size_t Wp) {
    const std::size_t k3 = K * K * K;
    for (std::size_t co = 0; co < Co; ++co) {
        const T* wt = weights + (co * Ci + ci) * k3;
        const T* sp = src + co * Do * Ho * Wo;
        for (std::size_t dz = 0; dz < K; ++dz)
            for (std::size_t dy = 0; dy < K; ++dy)
                for (std::size_t dx = 0; dx < K; ++dx) {
                    const T w = wt[(dz * K + dy) * K + dx];
                    for (std::size_t zo = 0; zo < Do; ++zo) {
                        T* yz = ypad + (zo * s + dz) * Hp * Wp;
                        for (std::size_t yo = 0; yo < Ho; ++yo)
                            axpy_row_scatter(yz + (yo * s + dy) * Wp + dx,
                                             sp + (zo * Ho + yo) * Wo, w, Wo, s);
                    }
                }
    }
}

// gw[co,ci,dz,dy,dx] += sum over (b, output positions) of gout * shifted
// input. Stride-1 path keeps one vector accumulator per dx tap in registers
// across the whole row loop and folds once at the end (fixed order).
template <typename T, int KT>
void conv_grad_weights_k(const T* xp, const T* gout, T* gw, const ConvGeom& g) {
    const int K = KT > 0 ? KT : static_cast<int>(g.K);
    const std::size_t k3 = g.K * g.K * g.K;
    const std::size_t s = g.stride;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (std::size_t co = 0; co < g.Co; ++co)
        for (std::size_t ci = 0; ci < g.Ci; ++ci) {
            T* gwc = gw + (co * g.Ci + ci) * k3;
            for (int dz = 0; dz < K; ++dz)
                for (int dy = 0; dy < K; ++dy) {
#ifdef SCAAE_VEC_EXT
                    if constexpr (KT > 0) {
                        using S = Simd<T>;
                        using V = typename S::V;
                        constexpr std::size_t L = S::lanes;
                        V l0{}, l1{}, l2{}, l3{}, l4{};
                        T tails[KT] = {};
                        for (std::size_t b = 0; b < g.B; ++b) {
                            const T* go = gout + ((b * g.Co + co) * g.Do) * g.Ho * g.Wo;
                            const T* xc = xp + ((b * g.Ci + ci) * g.Dp) * g.Hp * g.Wp;
                            for (std::size_t zo = 0; zo < g.Do; ++zo) {
                                const T* xz = xc + (zo + dz) * g.Hp * g.Wp;
                                for (std::size_t yo = 0; yo < g.Ho; ++yo) {
                                    const T* gr = go + (zo * g.Ho + yo) * g.Wo;
                                    const T* xr = xz + (yo + dy) * g.Wp;
                                    std::size_t xo = 0;
                                    for (; xo + L <= g.Wo; xo += L) {
                                        const V gv = S::load(gr + xo);
                                        l0 += gv * S::load(xr + xo);
                                        if constexpr (KT > 1) {
                                            l1 += gv * S::load(xr + xo + 1);
                                            l2 += gv * S::load(xr + xo + 2);
                                        }
                                        if constexpr (KT > 3) {
                                            l3 += gv * S::load(xr + xo + 3);
                                            l4 += gv * S::load(xr + xo + 4);
                                        }
                                    }
                                    for (; xo < g.Wo; ++xo)
                                        for (int dx = 0; dx < K; ++dx)
                                            tails[dx] += gr[xo] * xr[xo + dx];
                                }
                            }
                        }
                        T* gwrow = gwc + (dz * K + dy) * K;
                        gwrow[0] += S::hsum(l0) + tails[0];
                        if constexpr (KT > 1) {
                            gwrow[1] += S::hsum(l1) + tails[1];
                            gwrow[2] += S::hsum(l2) + tails[2];
                        }
                        if constexpr (KT > 3) {
                            gwrow[3] += S::hsum(l3) + tails[3];
                            gwrow[4] += S::hsum(l4) + tails[4];
                        }
                        continue;
                    }
#endif
                    // generic path: scalar, any stride
                    for (int dx = 0; dx < K; ++dx) {
                        T acc = T(0);
                        for (std::size_t b = 0; b < g.B; ++b) {
                            const T* go = gout + ((b * g.Co + co) * g.Do) * g.Ho * g.Wo;
                            const T* xc = xp + ((b * g.Ci + ci) * g.Dp) * g.Hp * g.Wp;
                            for (std::size_t zo = 0; zo < g.Do; ++zo) {
                                const T* xz = xc + (zo * s + dz) * g.Hp * g.Wp;
                                for (std::size_t yo = 0; yo < g.Ho; ++yo)
                                    acc += dot_fixed_order(
                                        go + (zo * g.Ho + yo) * g.Wo,
                                        xz + (yo * s + dy) * g.Wp + dx, g.Wo, s);
                            }
                        }
                        gwc[(dz * K + dy) * K + dx] += acc;
                    }
                }
        }
}

template <typename T>
void conv_grad_weights(const T* xp, const T* gout, T* gw, const ConvGeom& g) {
    if (g.stride == 1) {
        switch (g.K) {
            case 1: conv_grad_weights_k<T, 1>(xp, gout, gw, g); return;
            case 3: conv_grad_weights_k<T, 3>(xp, gout, gw, g); return;
            case 5: conv_grad_weights_k<T, 5>(xp, gout, gw, g); return;
            default: break;
        }
    }
    conv_grad_weights_k<T, 0>(xp, gout, gw, g);
}

}  // namespace detail

// Forward strided cross-correlation. Gradients flow through conv3d_backward.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const ConvKernel<T>& ker) {
    const auto g = detail::conv_geom(x.shape, ker);
    require(ker.bias.numel() == g.Co,
            "conv3d: bias length " + std::to_string(ker.bias.numel()) +
                " != out_channels " + std::to_string(g.Co));
    Tensor<T> out({g.B, g.Co, g.Do, g.Ho, g.Wo});
    const auto xp = detail::pad_batch(x.data.data(), g.B, g.Ci, g.D, g.H, g.W, g.pad);
    detail::conv_forward_core(xp.data(), ker.weights.data.data(),
                              ker.bias.data.data(), out.data.data(), g);
    return out;
}

// Accumulates gradients of conv3d into x.grad (if x.requires_grad) and into
// ker.weights.grad / ker.bias.grad (if those require grad).
template <typename T>
void conv3d_backward(Tensor<T>& x, ConvKernel<T>& ker, const Tensor<T>& gout) {
    const auto g = detail::conv_geom(x.shape, ker);
    require(gout.shape == Shape({g.B, g.Co, g.Do, g.Ho, g.Wo}),
            "conv3d_backward: gout shape " + shape_str(gout.shape) + " inconsistent");
    const std::size_t k3 = g.K * g.K * g.K;

    if (ker.bias.requires_grad) {
        T* gb = ker.bias.grad.data();
        const std::size_t plane = g.Do * g.Ho * g.Wo;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (std::size_t co = 0; co < g.Co; ++co) {
            T acc = T(0);
            for (std::size_t b = 0; b < g.B; ++b)
                acc += sum_fixed_order(gout.data.data() + (b * g.Co + co) * plane, plane);
            gb[co] += acc;
        }
    }

    if (ker.weights.requires_grad) {
        const auto xp = detail::pad_batch(x.data.data(), g.B, g.Ci, g.D, g.H, g.W, g.pad);
        detail::conv_grad_weights(xp.data(), gout.data.data(),
                                  ker.weights.grad.data(), g);
    }

    if (x.requires_grad) {
        const long flip_pad = static_cast<long>(g.K) - 1 - g.pad;
        if (g.stride == 1 && flip_pad >= 0) {
            // gx = cross_correlation(gout, weights flipped and transposed),
            // with padding K-1-p.
            std::vector<T> wflip(k3 * g.Ci * g.Co);
            for (std::size_t co = 0; co < g.Co; ++co)
                for (std::size_t ci = 0; ci < g.Ci; ++ci) {
                    const T* src = ker.weights.data.data() + (co * g.Ci + ci) * k3;
                    T* dst = wflip.data() + (ci * g.Co + co) * k3;
                    for (std::size_t t = 0; t < k3; ++t) dst[t] = src[k3 - 1 - t];
                }
            detail::ConvGeom gi;
            gi.B = g.B; gi.Ci = g.Co; gi.D = g.Do; gi.H = g.Ho; gi.W = g.Wo;
            gi.Co = g.Ci; gi.K = g.K; gi.stride = 1;
            gi.pad = static_cast<int>(flip_pad);
            gi.Do = g.D; gi.Ho = g.H; gi.Wo = g.W;
            gi.Dp = gi.D + 2 * gi.pad; gi.Hp = gi.H + 2 * gi.pad; gi.Wp = gi.W + 2 * gi.pad;
            const auto gp = detail::pad_batch(gout.data.data(), g.B, g.Co,
                                              g.Do, g.Ho, g.Wo, gi.pad);
            std::vector<T> gx(x.numel());
            detail::conv_forward_core(gp.data(), wflip.data(),
                                      static_cast<const T*>(nullptr), gx.data(), gi);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (std::size_t i = 0; i < gx.size(); ++i) x.grad[i] += gx[i];
        } else {
            // strided case: scatter into a padded gradient slab, then crop
            const std::size_t slab = g.Dp * g.Hp * g.Wp;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
            for (std::size_t b = 0; b < g.B; ++b)
                for (std::size_t ci = 0; ci < g.Ci; ++ci) {
                    std::vector<T> gip(slab, T(0));
                    detail::conv_adjoint_slab(
                        gout.data.data() + b * g.Co * g.Do * g.Ho * g.Wo,
                        ker.weights.data.data(), gip.data(), ci, g.Ci, g.Co, g.K,
                        g.stride, g.Do, g.Ho, g.Wo, g.Hp, g.Wp);
                    T* gx = x.grad.data() + ((b * g.Ci + ci) * g.D) * g.H * g.W;
                    for (std::size_t z = 0; z < g.D; ++z)
                        for (std::size_t y = 0; y < g.H; ++y) {
                            const T* src = gip.data() +
                                           ((z + g.pad) * g.Hp + (y + g.pad)) * g.Wp + g.pad;
                            T* dst = gx + (z * g.H + y) * g.W;
                            for (std::size_t xw = 0; xw < g.W; ++xw) dst[xw] += src[xw];
                        }
                }
        }
    }
}

// Transposed convolution: the exact adjoint of the matching strided conv3d,
// plus a per-output-channel bias. A kernel with weights [Co, Ci, k, k, k]
// maps Co input planes to Ci output planes here, so `bias` must have Ci
// entries. output_padding extends the far edge, resolving the stride
// ambiguity of the inverse shape map.
template <typename T>
Tensor<T> conv3d_transposed(const Tensor<T>& x, const ConvKernel<T>& ker,
                            int output_padding = 0) {
    ker.validate();
    require(x.shape.size() == 5,
            "conv3d_transposed: input must be [B,C,D,H,W], got " + shape_str(x.shape));
    require(x.shape[1] == ker.out_channels(),
            "conv3d_transposed: input channels " + std::to_string(x.shape[1]) +
                " != kernel out_channels " + std::to_string(ker.out_channels()));
    require(output_padding >= 0 && output_padding < ker.stride,
            "conv3d_transposed: output_padding must be in [0, stride)");
    require(ker.bias.numel() == ker.in_channels(),
            "conv3d_transposed: bias length " + std::to_string(ker.bias.numel()) +
                " != in_channels " + std::to_string(ker.in_channels()));

    const std::size_t B = x.shape[0], Co = x.shape[1];
    const std::size_t Do = x.shape[2], Ho = x.shape[3], Wo = x.shape[4];
    const std::size_t Ci = ker.in_channels(), K = ker.ksize();
    const std::size_t s = static_cast<std::size_t>(ker.stride);
    const int pad = ker.padding;
    const std::size_t op = static_cast<std::size_t>(output_padding);
    // inverse of Do = (Di + 2p - K) / s + 1; the padded extent before cropping
    const std::size_t Di = (Do - 1) * s + K + op;
    require(Di >= 2 * static_cast<std::size_t>(pad) + 1,
            "conv3d_transposed: padding too large for input extent");
    const std::size_t D = Di - 2 * pad;
    const std::size_t Hi = (Ho - 1) * s + K + op, H = Hi - 2 * pad;
    const std::size_t Wi = (Wo - 1) * s + K + op, W = Wi - 2 * pad;

    Tensor<T> out({B, Ci, D, H, W});
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t ci = 0; ci < Ci; ++ci) {
            std::vector<T> yp(Di * Hi * Wi, T(0));
            detail::conv_adjoint_slab(x.data.data() + b * Co * Do * Ho * Wo,
                                      ker.weights.data.data(), yp.data(), ci, Ci, Co,
                                      K, s, Do, Ho, Wo, Hi, Wi);
            const T bias = ker.bias.data[ci];
            T* dst = out.data.data() + ((b * Ci + ci) * D) * H * W;
            for (std::size_t z = 0; z < D; ++z)
                for (std::size_t y = 0; y < H; ++y) {
                    const T* src = yp.data() + ((z + pad) * Hi + (y + pad)) * Wi + pad;
                    T* row = dst + (z * H + y) * W;
                    for (std::size_t xw = 0; xw < W; ++xw) row[xw] = src[xw] + bias;
                }
        }
    return out;
}

// Gradients of conv3d_transposed. The op is the adjoint of conv3d, so the
// input gradient is a plain forward conv of gout with the same kernel, and
// the weight gradient is the conv3d weight gradient with input/gout roles
// swapped.
template <typename T>
void conv3d_transposed_backward(Tensor<T>& x, ConvKernel<T>& ker,
                                const Tensor<T>& gout, int output_padding = 0) {
    (void)output_padding;
    const std::size_t B = x.shape[0], Co = x.shape[1];
    const std::size_t Ci = ker.in_channels(), K = ker.ksize();

    if (ker.bias.requires_grad) {
        const std::size_t plane = gout.shape[2] * gout.shape[3] * gout.shape[4];
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (std::size_t ci = 0; ci < Ci; ++ci) {
            T acc = T(0);
            for (std::size_t b = 0; b < B; ++b)
                acc += sum_fixed_order(gout.data.data() + (b * Ci + ci) * plane, plane);
            ker.bias.grad[ci] += acc;
        }
    }

    if (x.requires_grad) {
        ConvKernel<T> nb;
        nb.weights = ker.weights;
        nb.weights.set_requires_grad(false);
        nb.bias = Tensor<T>({ker.out_channels()});
        nb.stride = ker.stride;
        nb.padding = ker.padding;
        Tensor<T> gx = conv3d(gout, nb);
        require(gx.shape == x.shape,
                "conv3d_transposed_backward: shape mismatch " + shape_str(gx.shape) +
                    " vs " + shape_str(x.shape));
        for (std::size_t i = 0; i < gx.numel(); ++i) x.grad[i] += gx.data[i];
    }

    if (ker.weights.requires_grad) {
        detail::ConvGeom g;
        g.B = B; g.Ci = Ci;
        g.D = gout.shape[2]; g.H = gout.shape[3]; g.W = gout.shape[4];
        g.Co = Co; g.K = K;
        g.stride = static_cast<std::size_t>(ker.stride);
        g.pad = ker.padding;
        g.Do = x.shape[2]; g.Ho = x.shape[3]; g.Wo = x.shape[4];
        g.Dp = g.D + 2 * g.pad; g.Hp = g.H + 2 * g.pad; g.Wp = g.W + 2 * g.pad;
        const auto gp = detail::pad_batch(gout.data.data(), B, Ci, g.D, g.H, g.W, g.pad);
        detail::conv_grad_weights(gp.data(), x.data.data(), ker.weights.grad.data(), g);
    }
}

}  // namespace scaae
