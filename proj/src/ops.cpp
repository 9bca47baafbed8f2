#include "delta/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include "delta/errors.hpp"

namespace delta {

namespace {

void check_finite(const std::vector<double>& values, const char* op) {
    for (double v : values) {
        if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
    }
}

/// Wraps freshly computed values as a tensor and records a graph node when
/// any input participates in differentiation.
template <typename Backward>
Tensor record(Shape shape, std::vector<double> values, std::vector<Tensor> inputs, const char* name,
              Backward&& backward) {
    check_finite(values, name);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
        auto node = std::make_shared<GraphNode>();
        for (const auto& in : inputs) node->inputs.push_back(in.impl());
        node->backward = std::forward<Backward>(backward);
        node->name = name;
        impl->requires_grad = true;
        impl->grad_fn = std::move(node);
    }
    return Tensor(std::move(impl));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto ai = a.impl(), bi = b.impl();
    return record(a.shape(), std::move(out), {a, b}, "add", [ai, bi](const TensorImpl& o) {
        for (auto* t : {ai.get(), bi.get()}) {
            if (!t->requires_grad) continue;
            for (std::size_t i = 0; i < o.grad.size(); ++i) t->grad[i] += o.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    auto ai = a.impl(), bi = b.impl();
    return record(a.shape(), std::move(out), {a, b}, "sub", [ai, bi](const TensorImpl& o) {
        if (ai->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += o.grad[i];
        if (bi->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) bi->grad[i] -= o.grad[i];
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto ai = a.impl(), bi = b.impl();
    return record(a.shape(), std::move(out), {a, b}, "mul", [ai, bi](const TensorImpl& o) {
        if (ai->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += o.grad[i] * bi->data[i];
        if (bi->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) bi->grad[i] += o.grad[i] * ai->data[i];
    });
}

Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
    auto ai = a.impl();
    return record(a.shape(), std::move(out), {a}, "scale", [ai, factor](const TensorImpl& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += o.grad[i] * factor;
    });
}

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    auto ai = a.impl();
    return record({1}, {total}, {a}, "sum", [ai](const TensorImpl& o) {
        const double g = o.grad[0];
        for (auto& v : ai->grad) v += g;
    });
}

Tensor sum_squares(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v * v;
    auto ai = a.impl();
    return record({1}, {total}, {a}, "sum_squares", [ai](const TensorImpl& o) {
        const double g = 2.0 * o.grad[0];
        for (std::size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += g * ai->data[i];
    });
}

Tensor squared_distance(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "squared_distance");
    double total = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        total += d * d;
    }
    auto ai = a.impl(), bi = b.impl();
    return record({1}, {total}, {a, b}, "squared_distance", [ai, bi](const TensorImpl& o) {
        const double g = 2.0 * o.grad[0];
        for (std::size_t i = 0; i < ai->data.size(); ++i) {
            const double d = g * (ai->data[i] - bi->data[i]);
            if (ai->requires_grad) ai->grad[i] += d;
            if (bi->requires_grad) bi->grad[i] -= d;
        }
    });
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
    if (stride == 0) throw ConfigError("conv2d: stride must be positive");
    const std::size_t padded = in + 2 * padding;
    if (kernel == 0 || padded < kernel) {
        throw ConfigError("conv2d: kernel " + std::to_string(kernel) + " does not fit padded extent " +
                          std::to_string(padded));
    }
    if ((padded - kernel) % stride != 0) {
        throw ConfigError("conv2d: (extent + 2*padding - kernel) = " + std::to_string(padded - kernel) +
                          " is not divisible by stride " + std::to_string(stride));
    }
    return (padded - kernel) / stride + 1;
}

namespace {

struct ConvGeometry {
    std::size_t batch, c_in, h, w, c_out, kh, kw, stride, pad, h_out, w_out;
    std::size_t cols_rows() const { return c_in * kh * kw; }
    std::size_t positions() const { return h_out * w_out; }
};

void im2col(const double* image, const ConvGeometry& g, double* cols) {
    const std::size_t positions = g.positions();
    for (std::size_t ci = 0; ci < g.c_in; ++ci) {
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                double* row = cols + ((ci * g.kh + ky) * g.kw + kx) * positions;
                for (std::size_t oy = 0; oy < g.h_out; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    for (std::size_t ox = 0; ox < g.w_out; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                            ix < static_cast<long>(g.w);
                        row[oy * g.w_out + ox] = inside ? image[(ci * g.h + iy) * g.w + ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* image_grad) {
    const std::size_t positions = g.positions();
    for (std::size_t ci = 0; ci < g.c_in; ++ci) {
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const double* row = cols + ((ci * g.kh + ky) * g.kw + kx) * positions;
                for (std::size_t oy = 0; oy < g.h_out; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                    for (std::size_t ox = 0; ox < g.w_out; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                        image_grad[(ci * g.h + iy) * g.w + ix] += row[oy * g.w_out + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& input, const ConvKernel& kernel) {
    require_rank(input, 4, "conv2d", "input");
    require_rank(kernel.weight, 4, "conv2d", "weight");
    require_rank(kernel.bias, 1, "conv2d", "bias");
    const auto& is = input.shape();
    const auto& ws = kernel.weight.shape();
    if (is[1] != ws[1]) {
        throw ShapeError("conv2d: input has " + std::to_string(is[1]) + " channels but kernel expects " +
                         std::to_string(ws[1]) + " (input " + shape_str(is) + ", weight " + shape_str(ws) + ")");
    }
    if (kernel.bias.dim(0) != ws[0]) {
        throw ShapeError("conv2d: bias " + shape_str(kernel.bias.shape()) + " does not match " +
                         std::to_string(ws[0]) + " output channels");
    }
    ConvGeometry g{is[0], is[1], is[2], is[3], ws[0], ws[2], ws[3], kernel.stride, kernel.padding, 0, 0};
    g.h_out = conv_output_extent(g.h, g.kh, g.stride, g.pad);
    g.w_out = conv_output_extent(g.w, g.kw, g.stride, g.pad);

    const std::size_t rows = g.cols_rows();
    const std::size_t positions = g.positions();
    const std::size_t in_stride = g.c_in * g.h * g.w;
    const std::size_t out_stride = g.c_out * positions;
    const double* weight = kernel.weight.data().data();
    const double* bias = kernel.bias.data().data();

    const bool will_record =
        grad_enabled() && (input.requires_grad() || kernel.weight.requires_grad() || kernel.bias.requires_grad());
    auto cols = std::make_shared<std::vector<double>>((will_record ? g.batch : 1) * rows * positions);
    std::vector<double> out(g.batch * out_stride);
    for (std::size_t b = 0; b < g.batch; ++b) {
        double* col = cols->data() + (will_record ? b * rows * positions : 0);
        im2col(input.data().data() + b * in_stride, g, col);
        double* dst = out.data() + b * out_stride;
        for (std::size_t co = 0; co < g.c_out; ++co) {
            double* row_out = dst + co * positions;
            std::fill(row_out, row_out + positions, bias[co]);
            const double* wrow = weight + co * rows;
            for (std::size_t k = 0; k < rows; ++k) {
                const double wv = wrow[k];
                const double* crow = col + k * positions;
                for (std::size_t p = 0; p < positions; ++p) row_out[p] += wv * crow[p];
            }
        }
    }
    if (!will_record) cols.reset();

    auto xi = input.impl(), wi = kernel.weight.impl(), bi = kernel.bias.impl();
    return record({g.batch, g.c_out, g.h_out, g.w_out}, std::move(out), {input, kernel.weight, kernel.bias},
                  "conv2d", [xi, wi, bi, g, cols](const TensorImpl& o) {
                      const std::size_t rows = g.cols_rows();
                      const std::size_t positions = g.positions();
                      const std::size_t in_stride = g.c_in * g.h * g.w;
                      const std::size_t out_stride = g.c_out * positions;
                      std::vector<double> dcols(xi->requires_grad ? rows * positions : 0);
                      for (std::size_t b = 0; b < g.batch; ++b) {
                          const double* dy = o.grad.data() + b * out_stride;
                          const double* col = cols->data() + b * rows * positions;
                          if (bi->requires_grad) {
                              for (std::size_t co = 0; co < g.c_out; ++co) {
                                  double acc = 0.0;
                                  for (std::size_t p = 0; p < positions; ++p) acc += dy[co * positions + p];
                                  bi->grad[co] += acc;
                              }
                          }
                          if (wi->requires_grad) {
                              for (std::size_t co = 0; co < g.c_out; ++co) {
                                  const double* dyrow = dy + co * positions;
                                  double* dw = wi->grad.data() + co * rows;
                                  for (std::size_t k = 0; k < rows; ++k) {
                                      const double* crow = col + k * positions;
                                      double acc = 0.0;
                                      for (std::size_t p = 0; p < positions; ++p) acc += dyrow[p] * crow[p];
                                      dw[k] += acc;
                                  }
                              }
                          }
                          if (xi->requires_grad) {
                              std::fill(dcols.begin(), dcols.end(), 0.0);
                              for (std::size_t co = 0; co < g.c_out; ++co) {
                                  const double* dyrow = dy + co * positions;
                                  const double* wrow = wi->data.data() + co * rows;
                                  for (std::size_t k = 0; k < rows; ++k) {
                                      const double wv = wrow[k];
                                      double* drow = dcols.data() + k * positions;
                                      for (std::size_t p = 0; p < positions; ++p) drow[p] += wv * dyrow[p];
                                  }
                              }
                              col2im_add(dcols.data(), g, xi->grad.data() + b * in_stride);
                          }
                      }
                  });
}

Tensor relu(const Tensor& input) {
    std::vector<double> out(input.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = input.data()[i] > 0.0 ? input.data()[i] : 0.0;
    auto xi = input.impl();
    return record(input.shape(), std::move(out), {input}, "relu", [xi](const TensorImpl& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            if (xi->data[i] > 0.0) xi->grad[i] += o.grad[i];
        }
    });
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    require_rank(input, 2, "linear", "input");
    require_rank(weight, 2, "linear", "weight");
    require_rank(bias, 1, "linear", "bias");
    const std::size_t batch = input.dim(0), in = input.dim(1), outf = weight.dim(0);
    if (weight.dim(1) != in || bias.dim(0) != outf) {
        throw ShapeError("linear: input " + shape_str(input.shape()) + ", weight " + shape_str(weight.shape()) +
                         ", bias " + shape_str(bias.shape()) + " are incompatible");
    }
    std::vector<double> out(batch * outf);
    const double* x = input.data().data();
    const double* w = weight.data().data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t o = 0; o < outf; ++o) {
            double acc = bias.data()[o];
            for (std::size_t i = 0; i < in; ++i) acc += x[b * in + i] * w[o * in + i];
            out[b * outf + o] = acc;
        }
    }
    auto xi = input.impl(), wi = weight.impl(), bi = bias.impl();
    return record({batch, outf}, std::move(out), {input, weight, bias}, "linear",
                  [xi, wi, bi, batch, in, outf](const TensorImpl& o) {
                      for (std::size_t b = 0; b < batch; ++b) {
                          for (std::size_t j = 0; j < outf; ++j) {
                              const double g = o.grad[b * outf + j];
                              if (bi->requires_grad) bi->grad[j] += g;
                              if (wi->requires_grad) {
                                  for (std::size_t i = 0; i < in; ++i) wi->grad[j * in + i] += g * xi->data[b * in + i];
                              }
                              if (xi->requires_grad) {
                                  for (std::size_t i = 0; i < in; ++i) xi->grad[b * in + i] += g * wi->data[j * in + i];
                              }
                          }
                      }
                  });
}

Tensor max_pool2d(const Tensor& input, std::size_t size, std::size_t stride) {
    require_rank(input, 4, "max_pool2d", "input");
    if (size == 0 || stride == 0) throw ConfigError("max_pool2d: size and stride must be positive");
    const auto& s = input.shape();
    if (s[2] < size || s[3] < size) {
        throw ShapeError("max_pool2d: window " + std::to_string(size) + " larger than input " + shape_str(s));
    }
    const std::size_t ho = (s[2] - size) / stride + 1, wo = (s[3] - size) / stride + 1;
    const std::size_t planes = s[0] * s[1];
    std::vector<double> out(planes * ho * wo);
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    const double* x = input.data().data();
    for (std::size_t p = 0; p < planes; ++p) {
        const double* plane = x + p * s[2] * s[3];
        for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
                std::size_t best = (oy * stride) * s[3] + ox * stride;
                for (std::size_t ky = 0; ky < size; ++ky) {
                    for (std::size_t kx = 0; kx < size; ++kx) {
                        const std::size_t idx = (oy * stride + ky) * s[3] + ox * stride + kx;
                        if (plane[idx] > plane[best]) best = idx;
                    }
                }
                const std::size_t o = (p * ho + oy) * wo + ox;
                out[o] = plane[best];
                (*argmax)[o] = p * s[2] * s[3] + best;
            }
        }
    }
    auto xi = input.impl();
    return record({s[0], s[1], ho, wo}, std::move(out), {input}, "max_pool2d", [xi, argmax](const TensorImpl& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) xi->grad[(*argmax)[i]] += o.grad[i];
    });
}

Tensor global_avg_pool(const Tensor& input) {
    require_rank(input, 4, "global_avg_pool", "input");
    const auto& s = input.shape();
    const std::size_t area = s[2] * s[3];
    std::vector<double> out(s[0] * s[1]);
    for (std::size_t p = 0; p < out.size(); ++p) {
        double acc = 0.0;
        for (std::size_t k = 0; k < area; ++k) acc += input.data()[p * area + k];
        out[p] = acc / static_cast<double>(area);
    }
    auto xi = input.impl();
    return record({s[0], s[1]}, std::move(out), {input}, "global_avg_pool", [xi, area](const TensorImpl& o) {
        const double inv = 1.0 / static_cast<double>(area);
        for (std::size_t p = 0; p < o.grad.size(); ++p) {
            for (std::size_t k = 0; k < area; ++k) xi->grad[p * area + k] += o.grad[p] * inv;
        }
    });
}

Tensor flatten(const Tensor& input) {
    if (input.rank() < 2) throw ShapeError("flatten: input must have a batch axis, got " + shape_str(input.shape()));
    const std::size_t batch = input.dim(0);
    std::vector<double> out(input.values());
    auto xi = input.impl();
    return record({batch, input.numel() / batch}, std::move(out), {input}, "flatten", [xi](const TensorImpl& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) xi->grad[i] += o.grad[i];
    });
}

namespace {

void check_logits(const Tensor& logits, std::span<const Label> labels, const char* op) {
    require_rank(logits, 2, op, "logits");
    if (logits.dim(1) < 2) throw ShapeError(std::string(op) + ": need at least 2 classes");
    if (labels.size() != logits.dim(0)) {
        throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(logits.dim(0)));
    }
    for (auto y : labels) {
        if (y >= logits.dim(1)) {
            throw IndexError(std::string(op) + ": label " + std::to_string(y) + " out of range for " +
                             std::to_string(logits.dim(1)) + " classes");
        }
    }
}

// log-sum-exp of a row after subtracting its max; returns (max, lse_shifted).
// The max term contributes exactly 1, so the rest goes through log1p.
std::pair<double, double> row_lse(const double* row, std::size_t k) {
    const auto arg = static_cast<std::size_t>(std::max_element(row, row + k) - row);
    const double mx = row[arg];
    double rest = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        if (j != arg) rest += std::exp(row[j] - mx);
    }
    return {mx, std::log1p(rest)};
}

}  // namespace

std::vector<double> per_sample_cross_entropy(const Tensor& logits, std::span<const Label> labels) {
    check_logits(logits, labels, "per_sample_cross_entropy");
    const std::size_t batch = logits.dim(0), k = logits.dim(1);
    std::vector<double> out(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        const double* row = logits.data().data() + b * k;
        auto [mx, lse] = row_lse(row, k);
        out[b] = lse - (row[labels[b]] - mx);
    }
    return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const Label> labels) {
    const auto losses = per_sample_cross_entropy(logits, labels);
    double total = 0.0;
    for (double l : losses) total += l;
    const std::size_t batch = logits.dim(0), k = logits.dim(1);
    auto li = logits.impl();
    std::vector<Label> ys(labels.begin(), labels.end());
    return record({1}, {total / static_cast<double>(batch)}, {logits}, "softmax_cross_entropy",
                  [li, ys = std::move(ys), batch, k](const TensorImpl& o) {
                      const double g = o.grad[0] / static_cast<double>(batch);
                      for (std::size_t b = 0; b < batch; ++b) {
                          const double* row = li->data.data() + b * k;
                          auto [mx, lse] = row_lse(row, k);
                          for (std::size_t j = 0; j < k; ++j) {
                              const double p = std::exp(row[j] - mx - lse);
                              li->grad[b * k + j] += g * (p - (j == ys[b] ? 1.0 : 0.0));
                          }
                      }
                  });
}

std::vector<double> softmax(std::span<const double> values) {
    if (values.empty()) return {};
    const double mx = *std::max_element(values.begin(), values.end());
    std::vector<double> out(values.size());
    double s = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        out[i] = std::exp(values[i] - mx);
        s += out[i];
    }
    for (auto& v : out) v /= s;
    return out;
}

std::vector<double> softmax_rows(const Tensor& logits) {
    require_rank(logits, 2, "softmax_rows", "logits");
    const std::size_t batch = logits.dim(0), k = logits.dim(1);
    std::vector<double> out;
    out.reserve(batch * k);
    for (std::size_t b = 0; b < batch; ++b) {
        auto row = softmax(logits.data().subspan(b * k, k));
        out.insert(out.end(), row.begin(), row.end());
    }
    return out;
}

Tensor select_feature_map(const Tensor& input, std::size_t sample, std::size_t channel) {
    require_rank(input, 4, "select_feature_map", "input");
    const auto& s = input.shape();
    if (sample >= s[0] || channel >= s[1]) {
        throw IndexError("select_feature_map: (" + std::to_string(sample) + ", " + std::to_string(channel) +
                         ") out of range for " + shape_str(s));
    }
    const std::size_t area = s[2] * s[3];
    const std::size_t offset = (sample * s[1] + channel) * area;
    std::vector<double> out(input.data().begin() + offset, input.data().begin() + offset + area);
    auto xi = input.impl();
    return record({area}, std::move(out), {input}, "select_feature_map", [xi, offset](const TensorImpl& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) xi->grad[offset + i] += o.grad[i];
    });
}

Tensor weighted_channel_sq_distance(const Tensor& act, const Tensor& ref, std::span<const double> weights,
                                    double channel_scale) {
    require_rank(act, 4, "weighted_channel_sq_distance", "activation");
    require_same_shape(act, ref, "weighted_channel_sq_distance");
    const auto& s = act.shape();
    const std::size_t channels = s[0] * s[1], area = s[2] * s[3];
    if (weights.size() != channels) {
        throw ShapeError("weighted_channel_sq_distance: " + std::to_string(weights.size()) + " weights for " +
                         std::to_string(channels) + " (sample, channel) pairs");
    }
    double total = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
        double d2 = 0.0;
        for (std::size_t k = 0; k < area; ++k) {
            const double d = act.data()[c * area + k] - ref.data()[c * area + k];
            d2 += d * d;
        }
        total += weights[c] * channel_scale * d2;
    }
    auto ai = act.impl(), ri = ref.impl();
    std::vector<double> w(weights.begin(), weights.end());
    return record({1}, {total}, {act}, "weighted_channel_sq_distance",
                  [ai, ri, w = std::move(w), channel_scale, area](const TensorImpl& o) {
                      const double g = 2.0 * o.grad[0] * channel_scale;
                      for (std::size_t c = 0; c < w.size(); ++c) {
                          const double f = g * w[c];
                          for (std::size_t k = 0; k < area; ++k) {
                              const std::size_t i = c * area + k;
                              ai->grad[i] += f * (ai->data[i] - ri->data[i]);
                          }
                      }
                  });
}

}  // namespace delta
