#include "ddpe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "ddpe/errors.hpp"

namespace ddpe {
namespace {

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op, const char* what) {
    if (!t.defined() || t.rank() != rank) {
        throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                             (t.defined() ? ", got " + shape_str(t.shape()) : ", got undefined tensor"));
    }
}

template <typename T>
bool wants_grad(const Node<T>& self, std::size_t i) {
    return i < self.inputs.size() && self.inputs[i]->requires_grad;
}

// im2col for one instance: rows are (c, i, j) kernel taps, columns are
// output positions.
template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t height, std::size_t width, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, T* col) {
    const std::size_t positions = out_h * out_w;
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
                T* row = col + ((c * k + i) * k + j) * positions;
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + i) -
                                              static_cast<std::ptrdiff_t>(pad);
                    T* dst = row + oy * out_w;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) {
                        std::fill(dst, dst + out_w, T(0));
                        continue;
                    }
                    const T* src = x + (c * height + static_cast<std::size_t>(iy)) * width;
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + j) -
                                                  static_cast<std::ptrdiff_t>(pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width))
                                      ? T(0)
                                      : src[static_cast<std::size_t>(ix)];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, std::size_t channels, std::size_t height, std::size_t width, std::size_t k,
                std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w, T* dx) {
    const std::size_t positions = out_h * out_w;
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t i = 0; i < k; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
                const T* row = col + ((c * k + i) * k + j) * positions;
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + i) -
                                              static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) {
                        continue;
                    }
                    T* dst = dx + (c * height + static_cast<std::size_t>(iy)) * width;
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + j) -
                                                  static_cast<std::ptrdiff_t>(pad);
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(width)) {
                            dst[ix] += row[oy * out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

} // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<T> out(a.numel());
    const auto da = a.data();
    const auto db = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = da[i] + db[i];
    }
    return Tensor<T>::make_result("add", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            if (wants_grad(self, k)) {
                auto g = self.inputs[k]->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += self.grad[i];
                }
            }
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (auto& v : out) {
        v *= factor;
    }
    return Tensor<T>::make_result("scale", a.shape(), std::move(out), {a}, [factor](Node<T>& self) {
        auto g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += factor * self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.data().begin(), x.data().end());
    for (auto& v : out) {
        v = v > T(0) ? v : T(0);
    }
    return Tensor<T>::make_result("relu", x.shape(), std::move(out), {x}, [](Node<T>& self) {
        auto g = self.inputs[0]->ensure_grad();
        const auto& in = self.inputs[0]->data;
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (in[i] > T(0)) {
                g[i] += self.grad[i];
            }
        }
    });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    require_rank(x, 2, "linear", "input");
    require_rank(weight, 2, "linear", "weight");
    const std::size_t batch = x.dim(0);
    const std::size_t in = x.dim(1);
    const std::size_t out_features = weight.dim(0);
    if (weight.dim(1) != in) {
        throw DimensionError("linear: weight " + shape_str(weight.shape()) + " does not accept input " +
                             shape_str(x.shape()));
    }
    const bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.dim(0) != out_features)) {
        throw DimensionError("linear: bias shape " + shape_str(bias.shape()));
    }
    std::vector<T> out(batch * out_features);
    const auto dx = x.data();
    const auto dw = weight.data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t o = 0; o < out_features; ++o) {
            T acc = has_bias ? bias.data()[o] : T(0);
            for (std::size_t i = 0; i < in; ++i) {
                acc += dx[b * in + i] * dw[o * in + i];
            }
            out[b * out_features + o] = acc;
        }
    }
    std::vector<Tensor<T>> inputs{x, weight};
    if (has_bias) {
        inputs.push_back(bias);
    }
    return Tensor<T>::make_result(
        "linear", {batch, out_features}, std::move(out), std::move(inputs),
        [batch, in, out_features](Node<T>& self) {
            const auto& g = self.grad;
            const auto& xv = self.inputs[0]->data;
            const auto& wv = self.inputs[1]->data;
            if (wants_grad(self, 0)) {
                auto gx = self.inputs[0]->ensure_grad();
                for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t o = 0; o < out_features; ++o) {
                        const T go = g[b * out_features + o];
                        for (std::size_t i = 0; i < in; ++i) {
                            gx[b * in + i] += go * wv[o * in + i];
                        }
                    }
                }
            }
            if (wants_grad(self, 1)) {
                auto gw = self.inputs[1]->ensure_grad();
                for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t o = 0; o < out_features; ++o) {
                        const T go = g[b * out_features + o];
                        for (std::size_t i = 0; i < in; ++i) {
                            gw[o * in + i] += go * xv[b * in + i];
                        }
                    }
                }
            }
            if (wants_grad(self, 2)) {
                auto gb = self.inputs[2]->ensure_grad();
                for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t o = 0; o < out_features; ++o) {
                        gb[o] += g[b * out_features + o];
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> conv2d_per_instance(const Tensor<T>& input, const Tensor<T>& kernels, std::size_t stride,
                              std::size_t pad) {
    require_rank(input, 4, "conv2d_per_instance", "input");
    require_rank(kernels, 5, "conv2d_per_instance", "kernels");
    const std::size_t batch = input.dim(0);
    const std::size_t channels = input.dim(1);
    const std::size_t height = input.dim(2);
    const std::size_t width = input.dim(3);
    const std::size_t out_channels = kernels.dim(1);
    const std::size_t k = kernels.dim(3);
    if (kernels.dim(0) != batch || kernels.dim(2) != channels || kernels.dim(4) != k) {
        throw DimensionError("conv2d_per_instance: kernels " + shape_str(kernels.shape()) +
                             " incompatible with input " + shape_str(input.shape()));
    }
    if (stride == 0) {
        throw DimensionError("conv2d_per_instance: stride must be positive");
    }
    if (height + 2 * pad < k || width + 2 * pad < k) {
        throw DimensionError("conv2d_per_instance: padded input smaller than kernel");
    }
    check_finite(input.data(), "conv2d_per_instance input");
    check_finite(kernels.data(), "conv2d_per_instance kernels");

    const std::size_t out_h = (height + 2 * pad - k) / stride + 1;
    const std::size_t out_w = (width + 2 * pad - k) / stride + 1;
    const std::size_t taps = channels * k * k;
    const std::size_t positions = out_h * out_w;
    const std::size_t in_stride = channels * height * width;
    const std::size_t k_stride = out_channels * taps;

    std::vector<T> out(batch * out_channels * positions, T(0));
    std::vector<T> col(taps * positions);
    const T* xv = input.data().data();
    const T* kv = kernels.data().data();
    for (std::size_t b = 0; b < batch; ++b) {
        im2col(xv + b * in_stride, channels, height, width, k, stride, pad, out_h, out_w, col.data());
        const T* kb = kv + b * k_stride;
        T* ob = out.data() + b * out_channels * positions;
        for (std::size_t o = 0; o < out_channels; ++o) {
            T* orow = ob + o * positions;
            for (std::size_t r = 0; r < taps; ++r) {
                const T w = kb[o * taps + r];
                const T* crow = col.data() + r * positions;
                for (std::size_t p = 0; p < positions; ++p) {
                    orow[p] += w * crow[p];
                }
            }
        }
    }

    return Tensor<T>::make_result(
        "conv2d_per_instance", {batch, out_channels, out_h, out_w}, std::move(out), {input, kernels},
        [=](Node<T>& self) {
            const bool grad_x = wants_grad(self, 0);
            const bool grad_k = wants_grad(self, 1);
            const T* x = self.inputs[0]->data.data();
            const T* kk = self.inputs[1]->data.data();
            T* gx = grad_x ? self.inputs[0]->ensure_grad().data() : nullptr;
            T* gk = grad_k ? self.inputs[1]->ensure_grad().data() : nullptr;
            std::vector<T> cols(taps * positions);
            std::vector<T> dcol(grad_x ? taps * positions : 0);
            for (std::size_t b = 0; b < batch; ++b) {
                const T* gb = self.grad.data() + b * out_channels * positions;
                if (grad_k) {
                    im2col(x + b * in_stride, channels, height, width, k, stride, pad, out_h, out_w, cols.data());
                    T* gkb = gk + b * k_stride;
                    for (std::size_t o = 0; o < out_channels; ++o) {
                        const T* grow = gb + o * positions;
                        for (std::size_t r = 0; r < taps; ++r) {
                            const T* crow = cols.data() + r * positions;
                            T acc = T(0);
                            for (std::size_t p = 0; p < positions; ++p) {
                                acc += grow[p] * crow[p];
                            }
                            gkb[o * taps + r] += acc;
                        }
                    }
                }
                if (grad_x) {
                    std::fill(dcol.begin(), dcol.end(), T(0));
                    const T* kb = kk + b * k_stride;
                    for (std::size_t o = 0; o < out_channels; ++o) {
                        const T* grow = gb + o * positions;
                        for (std::size_t r = 0; r < taps; ++r) {
                            const T w = kb[o * taps + r];
                            T* drow = dcol.data() + r * positions;
                            for (std::size_t p = 0; p < positions; ++p) {
                                drow[p] += w * grow[p];
                            }
                        }
                    }
                    col2im_add(dcol.data(), channels, height, width, k, stride, pad, out_h, out_w,
                               gx + b * in_stride);
                }
            }
        });
}

template <typename T>
Tensor<T> broadcast_batch(const Tensor<T>& x, std::size_t batch) {
    const std::size_t n = x.numel();
    std::vector<T> out;
    out.reserve(batch * n);
    for (std::size_t b = 0; b < batch; ++b) {
        out.insert(out.end(), x.data().begin(), x.data().end());
    }
    Shape shape{batch};
    shape.insert(shape.end(), x.shape().begin(), x.shape().end());
    return Tensor<T>::make_result("broadcast_batch", std::move(shape), std::move(out), {x},
                                  [batch, n](Node<T>& self) {
                                      auto g = self.inputs[0]->ensure_grad();
                                      for (std::size_t b = 0; b < batch; ++b) {
                                          for (std::size_t i = 0; i < n; ++i) {
                                              g[i] += self.grad[b * n + i];
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& scale_param, const Tensor<T>& shift, T eps) {
    require_rank(x, 4, "instance_norm", "input");
    const std::size_t batch = x.dim(0);
    const std::size_t channels = x.dim(1);
    const std::size_t area = x.dim(2) * x.dim(3);
    if (scale_param.numel() != channels || shift.numel() != channels) {
        throw DimensionError("instance_norm: scale/shift must have " + std::to_string(channels) + " entries");
    }
    const auto xv = x.data();
    const auto gamma = scale_param.data();
    const auto beta = shift.data();
    auto normalized = std::make_shared<std::vector<T>>(x.numel());
    auto inv_std = std::make_shared<std::vector<T>>(batch * channels);
    std::vector<T> out(x.numel());
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (b * channels + c) * area;
            T mean = T(0);
            for (std::size_t i = 0; i < area; ++i) {
                mean += xv[base + i];
            }
            mean /= static_cast<T>(area);
            T var = T(0);
            for (std::size_t i = 0; i < area; ++i) {
                const T d = xv[base + i] - mean;
                var += d * d;
            }
            var /= static_cast<T>(area);
            const T inv = T(1) / std::sqrt(var + eps);
            (*inv_std)[b * channels + c] = inv;
            for (std::size_t i = 0; i < area; ++i) {
                const T xh = (xv[base + i] - mean) * inv;
                (*normalized)[base + i] = xh;
                out[base + i] = xh * gamma[c] + beta[c];
            }
        }
    }
    return Tensor<T>::make_result(
        "instance_norm", x.shape(), std::move(out), {x, scale_param, shift},
        [=](Node<T>& self) {
            const auto& g = self.grad;
            const auto& xh = *normalized;
            const auto& gam = self.inputs[1]->data;
            if (wants_grad(self, 1) || wants_grad(self, 2)) {
                T* gg = wants_grad(self, 1) ? self.inputs[1]->ensure_grad().data() : nullptr;
                T* gbeta = wants_grad(self, 2) ? self.inputs[2]->ensure_grad().data() : nullptr;
                for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t c = 0; c < channels; ++c) {
                        const std::size_t base = (b * channels + c) * area;
                        T sg = T(0);
                        T sgx = T(0);
                        for (std::size_t i = 0; i < area; ++i) {
                            sg += g[base + i];
                            sgx += g[base + i] * xh[base + i];
                        }
                        if (gg) {
                            gg[c] += sgx;
                        }
                        if (gbeta) {
                            gbeta[c] += sg;
                        }
                    }
                }
            }
            if (wants_grad(self, 0)) {
                auto gx = self.inputs[0]->ensure_grad();
                const T n = static_cast<T>(area);
                for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t c = 0; c < channels; ++c) {
                        const std::size_t base = (b * channels + c) * area;
                        T sum_d = T(0);
                        T sum_dx = T(0);
                        for (std::size_t i = 0; i < area; ++i) {
                            const T d = g[base + i] * gam[c];
                            sum_d += d;
                            sum_dx += d * xh[base + i];
                        }
                        const T inv = (*inv_std)[b * channels + c];
                        for (std::size_t i = 0; i < area; ++i) {
                            const T d = g[base + i] * gam[c];
                            gx[base + i] += inv * (d - sum_d / n - xh[base + i] * sum_dx / n);
                        }
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t window) {
    require_rank(x, 4, "avg_pool2d", "input");
    if (window == 0 || x.dim(2) < window || x.dim(3) < window) {
        throw DimensionError("avg_pool2d: window " + std::to_string(window) + " does not fit " +
                             shape_str(x.shape()));
    }
    const std::size_t planes = x.dim(0) * x.dim(1);
    const std::size_t height = x.dim(2);
    const std::size_t width = x.dim(3);
    const std::size_t out_h = height / window;
    const std::size_t out_w = width / window;
    const T inv = T(1) / static_cast<T>(window * window);
    std::vector<T> out(planes * out_h * out_w);
    const auto xv = x.data();
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                T acc = T(0);
                for (std::size_t i = 0; i < window; ++i) {
                    for (std::size_t j = 0; j < window; ++j) {
                        acc += xv[(p * height + oy * window + i) * width + ox * window + j];
                    }
                }
                out[(p * out_h + oy) * out_w + ox] = acc * inv;
            }
        }
    }
    return Tensor<T>::make_result(
        "avg_pool2d", {x.dim(0), x.dim(1), out_h, out_w}, std::move(out), {x}, [=](Node<T>& self) {
            auto gx = self.inputs[0]->ensure_grad();
            for (std::size_t p = 0; p < planes; ++p) {
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const T g = self.grad[(p * out_h + oy) * out_w + ox] * inv;
                        for (std::size_t i = 0; i < window; ++i) {
                            for (std::size_t j = 0; j < window; ++j) {
                                gx[(p * height + oy * window + i) * width + ox * window + j] += g;
                            }
                        }
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    require_rank(x, 4, "global_avg_pool", "input");
    const std::size_t planes = x.dim(0) * x.dim(1);
    const std::size_t area = x.dim(2) * x.dim(3);
    if (area == 0) {
        throw DimensionError("global_avg_pool: empty spatial extent");
    }
    std::vector<T> out(planes);
    const auto xv = x.data();
    for (std::size_t p = 0; p < planes; ++p) {
        T acc = T(0);
        for (std::size_t i = 0; i < area; ++i) {
            acc += xv[p * area + i];
        }
        out[p] = acc / static_cast<T>(area);
    }
    return Tensor<T>::make_result("global_avg_pool", {x.dim(0), x.dim(1)}, std::move(out), {x},
                                  [planes, area](Node<T>& self) {
                                      auto gx = self.inputs[0]->ensure_grad();
                                      const T inv = T(1) / static_cast<T>(area);
                                      for (std::size_t p = 0; p < planes; ++p) {
                                          const T g = self.grad[p] * inv;
                                          for (std::size_t i = 0; i < area; ++i) {
                                              gx[p * area + i] += g;
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
    if (!logits.defined() || logits.rank() == 0) {
        throw DimensionError("softmax: needs at least one axis");
    }
    check_finite(logits.data(), "softmax input");
    const std::size_t cols = logits.shape().back();
    const std::size_t rows = cols == 0 ? 0 : logits.numel() / cols;
    std::vector<T> out(logits.numel());
    const auto z = logits.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* zr = z.data() + r * cols;
        T* yr = out.data() + r * cols;
        const T mx = *std::max_element(zr, zr + cols);
        T sum = T(0);
        for (std::size_t c = 0; c < cols; ++c) {
            yr[c] = std::exp(zr[c] - mx);
            sum += yr[c];
        }
        for (std::size_t c = 0; c < cols; ++c) {
            yr[c] /= sum;
        }
    }
    auto saved = std::make_shared<std::vector<T>>(out);
    return Tensor<T>::make_result("softmax", logits.shape(), std::move(out), {logits},
                                  [rows, cols, saved](Node<T>& self) {
                                      auto gz = self.inputs[0]->ensure_grad();
                                      const auto& y = *saved;
                                      for (std::size_t r = 0; r < rows; ++r) {
                                          T dot = T(0);
                                          for (std::size_t c = 0; c < cols; ++c) {
                                              dot += self.grad[r * cols + c] * y[r * cols + c];
                                          }
                                          for (std::size_t c = 0; c < cols; ++c) {
                                              const std::size_t i = r * cols + c;
                                              gz[i] += y[i] * (self.grad[i] - dot);
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, std::span<const int> labels) {
    require_rank(logits, 2, "cross_entropy_loss", "logits");
    const std::size_t batch = logits.dim(0);
    const std::size_t classes = logits.dim(1);
    if (labels.size() != batch) {
        throw DimensionError("cross_entropy_loss: " + std::to_string(labels.size()) + " labels for batch of " +
                             std::to_string(batch));
    }
    if (batch == 0) {
        throw DimensionError("cross_entropy_loss: empty batch");
    }
    for (const int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= classes) {
            throw IndexError("cross_entropy_loss: label " + std::to_string(y) + " outside [0, " +
                             std::to_string(classes) + ")");
        }
    }
    check_finite(logits.data(), "cross_entropy_loss input");
    const auto z = logits.data();
    auto probs = std::make_shared<std::vector<T>>(logits.numel());
    T total = T(0);
    for (std::size_t b = 0; b < batch; ++b) {
        const T* zr = z.data() + b * classes;
        const T mx = *std::max_element(zr, zr + classes);
        T sum = T(0);
        for (std::size_t c = 0; c < classes; ++c) {
            const T e = std::exp(zr[c] - mx);
            (*probs)[b * classes + c] = e;
            sum += e;
        }
        for (std::size_t c = 0; c < classes; ++c) {
            (*probs)[b * classes + c] /= sum;
        }
        total += std::log(sum) + mx - zr[labels[b]];
    }
    std::vector<int> label_copy(labels.begin(), labels.end());
    return Tensor<T>::make_result(
        "cross_entropy_loss", {}, {total / static_cast<T>(batch)}, {logits},
        [batch, classes, probs, label_copy = std::move(label_copy)](Node<T>& self) {
            auto gz = self.inputs[0]->ensure_grad();
            const T g = self.grad[0] / static_cast<T>(batch);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t c = 0; c < classes; ++c) {
                    const T target = static_cast<int>(c) == label_copy[b] ? T(1) : T(0);
                    gz[b * classes + c] += g * ((*probs)[b * classes + c] - target);
                }
            }
        });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index) {
    require_rank(x, 2, "gather_rows", "input");
    const std::size_t rows = x.dim(0);
    const std::size_t cols = x.dim(1);
    if (index.size() != rows) {
        throw DimensionError("gather_rows: index length " + std::to_string(index.size()) + " for " +
                             std::to_string(rows) + " rows");
    }
    for (const auto i : index) {
        if (i >= rows) {
            throw ContractError("gather_rows: source row " + std::to_string(i) + " out of range");
        }
    }
    std::vector<T> out(rows * cols);
    const auto xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(index[r] * cols), cols,
                    out.begin() + static_cast<std::ptrdiff_t>(r * cols));
    }
    std::vector<std::size_t> idx(index.begin(), index.end());
    return Tensor<T>::make_result("gather_rows", x.shape(), std::move(out), {x},
                                  [cols, idx = std::move(idx)](Node<T>& self) {
                                      auto gx = self.inputs[0]->ensure_grad();
                                      for (std::size_t r = 0; r < idx.size(); ++r) {
                                          for (std::size_t c = 0; c < cols; ++c) {
                                              gx[idx[r] * cols + c] += self.grad[r * cols + c];
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> permute_within_rows(const Tensor<T>& x, const std::vector<std::vector<std::size_t>>& perms) {
    require_rank(x, 2, "permute_within_rows", "input");
    const std::size_t rows = x.dim(0);
    const std::size_t cols = x.dim(1);
    if (perms.size() != rows) {
        throw DimensionError("permute_within_rows: need one permutation per row");
    }
    for (const auto& p : perms) {
        std::vector<bool> seen(cols, false);
        if (p.size() != cols) {
            throw ContractError("permute_within_rows: permutation length mismatch");
        }
        for (const auto v : p) {
            if (v >= cols || seen[v]) {
                throw ContractError("permute_within_rows: not a permutation of 0.." + std::to_string(cols - 1));
            }
            seen[v] = true;
        }
    }
    std::vector<T> out(rows * cols);
    const auto xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = xv[r * cols + perms[r][c]];
        }
    }
    return Tensor<T>::make_result("permute_within_rows", x.shape(), std::move(out), {x},
                                  [cols, perms](Node<T>& self) {
                                      auto gx = self.inputs[0]->ensure_grad();
                                      for (std::size_t r = 0; r < perms.size(); ++r) {
                                          for (std::size_t c = 0; c < cols; ++c) {
                                              gx[r * cols + perms[r][c]] += self.grad[r * cols + c];
                                          }
                                      }
                                  });
}

#define DDPE_INSTANTIATE_OPS(T)                                                                          \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                         \
    template Tensor<T> scale(const Tensor<T>&, T);                                                      \
    template Tensor<T> relu(const Tensor<T>&);                                                          \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                    \
    template Tensor<T> conv2d_per_instance(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t); \
    template Tensor<T> broadcast_batch(const Tensor<T>&, std::size_t);                                  \
    template Tensor<T> instance_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);          \
    template Tensor<T> avg_pool2d(const Tensor<T>&, std::size_t);                                       \
    template Tensor<T> global_avg_pool(const Tensor<T>&);                                               \
    template Tensor<T> softmax(const Tensor<T>&);                                                       \
    template Tensor<T> cross_entropy_loss(const Tensor<T>&, std::span<const int>);                      \
    template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);                     \
    template Tensor<T> permute_within_rows(const Tensor<T>&, const std::vector<std::vector<std::size_t>>&);

DDPE_INSTANTIATE_OPS(float)
DDPE_INSTANTIATE_OPS(double)

} // namespace ddpe
