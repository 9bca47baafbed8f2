#pragma once

// Independent reference implementations used only by tests. Nothing here
// shares code with the library's compute paths.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "delta/tensor.hpp"

namespace delta::oracle {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = dist(rng);
    return Tensor::from_data(shape, std::move(v), requires_grad);
}

/// Direct sextuple-loop cross-correlation with zero padding.
inline std::vector<double> naive_conv2d(const Tensor& in, const Tensor& w, const Tensor& b, std::size_t stride,
                                        std::size_t pad) {
    const auto B = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
    const auto O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    const auto HO = (H + 2 * pad - KH) / stride + 1, WO = (W + 2 * pad - KW) / stride + 1;
    std::vector<double> out(B * O * HO * WO);
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t y = 0; y < HO; ++y)
                for (std::size_t x = 0; x < WO; ++x) {
                    double acc = b.data()[o];
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t ky = 0; ky < KH; ++ky)
                            for (std::size_t kx = 0; kx < KW; ++kx) {
                                const long iy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
                                const long ix = static_cast<long>(x * stride + kx) - static_cast<long>(pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W))
                                    continue;
                                acc += w.data()[((o * C + c) * KH + ky) * KW + kx] *
                                       in.data()[((n * C + c) * H + iy) * W + ix];
                            }
                    out[((n * O + o) * HO + y) * WO + x] = acc;
                }
    return out;
}

/// y = x W^T + b by the textbook triple loop.
inline std::vector<double> naive_gemm(const Tensor& x, const Tensor& w, const Tensor& b) {
    const auto B = x.dim(0), I = x.dim(1), O = w.dim(0);
    std::vector<double> out(B * O, 0.0);
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t o = 0; o < O; ++o) {
            double acc = 0.0;
            for (std::size_t i = 0; i < I; ++i) acc += x.data()[n * I + i] * w.data()[o * I + i];
            out[n * O + o] = acc + b.data()[o];
        }
    return out;
}

/// Mean cross-entropy in long double without max subtraction.
inline long double extended_cross_entropy(const Tensor& logits, const std::vector<std::uint32_t>& labels) {
    const auto B = logits.dim(0), K = logits.dim(1);
    long double total = 0.0L;
    for (std::size_t n = 0; n < B; ++n) {
        long double z = 0.0L;
        for (std::size_t k = 0; k < K; ++k) z += std::exp(static_cast<long double>(logits.data()[n * K + k]));
        total += -std::log(std::exp(static_cast<long double>(logits.data()[n * K + labels[n]])) / z);
    }
    return total / static_cast<long double>(B);
}

}  // namespace delta::oracle
