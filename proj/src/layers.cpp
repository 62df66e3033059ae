#include "octcvd/layers.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace octcvd {

std::string layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::conv_transpose2d: return "conv_transpose2d";
        case LayerKind::batchnorm2d: return "batchnorm2d";
        case LayerKind::relu: return "relu";
        case LayerKind::leaky_relu: return "leaky_relu";
        case LayerKind::linear: return "linear";
    }
    throw std::logic_error("unknown layer kind");
}

LayerKind layer_kind_from_name(const std::string& name) {
    if (name == "conv2d") return LayerKind::conv2d;
    if (name == "conv_transpose2d") return LayerKind::conv_transpose2d;
    if (name == "batchnorm2d") return LayerKind::batchnorm2d;
    if (name == "relu") return LayerKind::relu;
    if (name == "leaky_relu") return LayerKind::leaky_relu;
    if (name == "linear") return LayerKind::linear;
    throw std::invalid_argument("unknown layer kind: " + name);
}

void LayerSpec::validate() const {
    switch (kind) {
        case LayerKind::conv2d:
        case LayerKind::conv_transpose2d:
            if (in_channels <= 0 || out_channels <= 0)
                throw std::invalid_argument(layer_kind_name(kind) + ": channel counts must be positive");
            if (kernel <= 0 || stride <= 0 || padding < 0 || output_padding < 0)
                throw std::invalid_argument(layer_kind_name(kind) + ": kernel/stride must be positive, padding nonnegative");
            if (kind == LayerKind::conv_transpose2d && output_padding >= stride)
                throw std::invalid_argument("conv_transpose2d: output_padding must be smaller than stride");
            break;
        case LayerKind::batchnorm2d:
            if (in_channels <= 0) throw std::invalid_argument("batchnorm2d: channel count must be positive");
            if (epsilon <= 0) throw std::invalid_argument("batchnorm2d: epsilon must be positive");
            if (momentum <= 0 || momentum > 1) throw std::invalid_argument("batchnorm2d: momentum must be in (0,1]");
            break;
        case LayerKind::linear:
            if (in_features <= 0 || out_features <= 0)
                throw std::invalid_argument("linear: feature counts must be positive");
            break;
        case LayerKind::relu:
        case LayerKind::leaky_relu:
            break;
    }
}

LayerSpec LayerSpec::conv2d(std::int64_t in_ch, std::int64_t out_ch, std::int64_t k, std::int64_t stride,
                            std::int64_t pad) {
    LayerSpec s;
    s.kind = LayerKind::conv2d;
    s.in_channels = in_ch;
    s.out_channels = out_ch;
    s.kernel = k;
    s.stride = stride;
    s.padding = pad;
    return s;
}

LayerSpec LayerSpec::conv_transpose2d(std::int64_t in_ch, std::int64_t out_ch, std::int64_t k,
                                      std::int64_t stride, std::int64_t pad, std::int64_t output_pad) {
    LayerSpec s;
    s.kind = LayerKind::conv_transpose2d;
    s.in_channels = in_ch;
    s.out_channels = out_ch;
    s.kernel = k;
    s.stride = stride;
    s.padding = pad;
    s.output_padding = output_pad;
    return s;
}

LayerSpec LayerSpec::batchnorm2d(std::int64_t channels, double momentum, double eps) {
    LayerSpec s;
    s.kind = LayerKind::batchnorm2d;
    s.in_channels = channels;
    s.out_channels = channels;
    s.momentum = momentum;
    s.epsilon = eps;
    return s;
}

LayerSpec LayerSpec::relu() {
    LayerSpec s;
    s.kind = LayerKind::relu;
    return s;
}

LayerSpec LayerSpec::leaky_relu(double slope) {
    LayerSpec s;
    s.kind = LayerKind::leaky_relu;
    s.negative_slope = slope;
    return s;
}

LayerSpec LayerSpec::linear(std::int64_t in_features, std::int64_t out_features) {
    LayerSpec s;
    s.kind = LayerKind::linear;
    s.in_features = in_features;
    s.out_features = out_features;
    return s;
}

Parameter::Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor(value.shape);
    adam_m = Tensor(value.shape);
    adam_v = Tensor(value.shape);
}

namespace {

void check_4d(const Tensor& x, const char* op) {
    if (x.ndim() != 4) {
        std::ostringstream os;
        os << op << ": expected 4-d input [N,C,H,W], got " << x.shape_str();
        throw std::invalid_argument(os.str());
    }
}

std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, std::int64_t s, std::int64_t p, const char* op,
                             const char* axis) {
    std::int64_t num = in + 2 * p - k;
    if (num < 0) {
        std::ostringstream os;
        os << op << ": spatial extent " << axis << "=" << in << " smaller than kernel " << k
           << " under padding " << p;
        throw std::invalid_argument(os.str());
    }
    return num / s + 1;
}

// y[n,co,i,j] = bias[co] + sum_{ci,u,v} w[co,ci,u,v] * x[n,ci, i*s-p+u, j*s-p+v]
Tensor conv2d_core_forward(const Tensor& x, const Tensor& w, const Tensor* bias, std::int64_t s,
                           std::int64_t p, const char* op) {
    check_4d(x, op);
    const std::int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Co = w.dim(0), k = w.dim(2);
    if (w.dim(1) != Ci) {
        std::ostringstream os;
        os << op << ": input channels (" << Ci << ") do not match weight in_channels (" << w.dim(1) << ")";
        throw std::invalid_argument(os.str());
    }
    const std::int64_t Ho = conv_out_extent(H, k, s, p, op, "H");
    const std::int64_t Wo = conv_out_extent(W, k, s, p, op, "W");
    Tensor y({N, Co, Ho, Wo});

    parallel_for(N * Co, [&](std::int64_t nc) {
        const std::int64_t n = nc / Co, co = nc % Co;
        double* yplane = &y.data[static_cast<std::size_t>((n * Co + co) * Ho * Wo)];
        if (bias) {
            const double b = bias->data[static_cast<std::size_t>(co)];
            for (std::int64_t i = 0; i < Ho * Wo; ++i) yplane[i] = b;
        }
        for (std::int64_t ci = 0; ci < Ci; ++ci) {
            const double* xplane = &x.data[static_cast<std::size_t>((n * Ci + ci) * H * W)];
            const double* wk = &w.data[static_cast<std::size_t>((co * Ci + ci) * k * k)];
            for (std::int64_t u = 0; u < k; ++u) {
                for (std::int64_t v = 0; v < k; ++v) {
                    const double wv = wk[u * k + v];
                    if (wv == 0.0) continue;
                    // valid output rows: 0 <= i*s - p + u < H
                    std::int64_t i0 = std::max<std::int64_t>(0, (p - u + s - 1) / s);
                    std::int64_t i1 = std::min(Ho, (H - 1 - u + p) / s + 1);
                    std::int64_t j0 = std::max<std::int64_t>(0, (p - v + s - 1) / s);
                    std::int64_t j1 = std::min(Wo, (W - 1 - v + p) / s + 1);
                    for (std::int64_t i = i0; i < i1; ++i) {
                        const double* xrow = xplane + (i * s - p + u) * W - p + v;
                        double* yrow = yplane + i * Wo;
                        for (std::int64_t j = j0; j < j1; ++j) yrow[j] += wv * xrow[j * s];
                    }
                }
            }
        }
    });
    return y;
}

// gx[n,ci,a,b] = sum_{co,u,v} gy[n,co,i,j] * w[co,ci,u,v] with a=i*s-p+u, b=j*s-p+v
Tensor conv2d_core_input_grad(const Tensor& gy, const Tensor& w, std::int64_t s, std::int64_t p,
                              std::int64_t Hin, std::int64_t Win) {
    const std::int64_t N = gy.dim(0), Co = gy.dim(1), Ho = gy.dim(2), Wo = gy.dim(3);
    const std::int64_t Ci = w.dim(1), k = w.dim(2);
    Tensor gx({N, Ci, Hin, Win});

    parallel_for(N * Ci, [&](std::int64_t nc) {
        const std::int64_t n = nc / Ci, ci = nc % Ci;
        double* gxplane = &gx.data[static_cast<std::size_t>((n * Ci + ci) * Hin * Win)];
        for (std::int64_t co = 0; co < Co; ++co) {
            const double* gyplane = &gy.data[static_cast<std::size_t>((n * Co + co) * Ho * Wo)];
            const double* wk = &w.data[static_cast<std::size_t>((co * Ci + ci) * k * k)];
            for (std::int64_t u = 0; u < k; ++u) {
                for (std::int64_t v = 0; v < k; ++v) {
                    const double wv = wk[u * k + v];
                    if (wv == 0.0) continue;
                    std::int64_t i0 = std::max<std::int64_t>(0, (p - u + s - 1) / s);
                    std::int64_t i1 = std::min(Ho, (Hin - 1 - u + p) / s + 1);
                    std::int64_t j0 = std::max<std::int64_t>(0, (p - v + s - 1) / s);
                    std::int64_t j1 = std::min(Wo, (Win - 1 - v + p) / s + 1);
                    for (std::int64_t i = i0; i < i1; ++i) {
                        double* gxrow = gxplane + (i * s - p + u) * Win - p + v;
                        const double* gyrow = gyplane + i * Wo;
                        for (std::int64_t j = j0; j < j1; ++j) gxrow[j * s] += wv * gyrow[j];
                    }
                }
            }
        }
    });
    return gx;
}

// gw[co,ci,u,v] += sum_{n,i,j} gy[n,co,i,j] * x[n,ci, i*s-p+u, j*s-p+v]
void conv2d_core_weight_grad(const Tensor& x, const Tensor& gy, std::int64_t s, std::int64_t p,
                             Tensor& gw) {
    const std::int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Co = gy.dim(1), Ho = gy.dim(2), Wo = gy.dim(3);
    const std::int64_t k = gw.dim(2);

    parallel_for(Co, [&](std::int64_t co) {
        for (std::int64_t ci = 0; ci < Ci; ++ci) {
            double* gwk = &gw.data[static_cast<std::size_t>((co * Ci + ci) * k * k)];
            for (std::int64_t u = 0; u < k; ++u) {
                for (std::int64_t v = 0; v < k; ++v) {
                    std::int64_t i0 = std::max<std::int64_t>(0, (p - u + s - 1) / s);
                    std::int64_t i1 = std::min(Ho, (H - 1 - u + p) / s + 1);
                    std::int64_t j0 = std::max<std::int64_t>(0, (p - v + s - 1) / s);
                    std::int64_t j1 = std::min(Wo, (W - 1 - v + p) / s + 1);
                    double acc = 0.0;
                    for (std::int64_t n = 0; n < N; ++n) {
                        const double* xplane = &x.data[static_cast<std::size_t>((n * Ci + ci) * H * W)];
                        const double* gyplane = &gy.data[static_cast<std::size_t>((n * Co + co) * Ho * Wo)];
                        for (std::int64_t i = i0; i < i1; ++i) {
                            const double* xrow = xplane + (i * s - p + u) * W - p + v;
                            const double* gyrow = gyplane + i * Wo;
                            for (std::int64_t j = j0; j < j1; ++j) acc += gyrow[j] * xrow[j * s];
                        }
                    }
                    gwk[u * k + v] += acc;
                }
            }
        }
    });
}

Tensor he_normal_init(std::vector<std::int64_t> shape, std::int64_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.data) v = rng.normal(0.0, sd);
    return t;
}

}  // namespace

Conv2d::Conv2d(LayerSpec s, std::string name)
    : Layer(std::move(s)),
      weight(name + ".weight", Tensor({spec_.out_channels, spec_.in_channels, spec_.kernel, spec_.kernel})),
      bias(name + ".bias", Tensor({spec_.out_channels})) {}

Conv2d::Conv2d(LayerSpec s, Rng& init_rng, std::string name) : Conv2d(std::move(s), std::move(name)) {
    weight.value = he_normal_init(weight.value.shape, spec_.in_channels * spec_.kernel * spec_.kernel, init_rng);
}

Tensor Conv2d::forward(const Tensor& x, bool) {
    cached_input_ = x;
    Tensor y = conv2d_core_forward(x, weight.value, &bias.value, spec_.stride, spec_.padding, "conv2d");
    y.require_finite("conv2d.forward");
    return y;
}

Tensor Conv2d::backward(const Tensor& gy) {
    const Tensor& x = cached_input_;
    conv2d_core_weight_grad(x, gy, spec_.stride, spec_.padding, weight.grad);
    const std::int64_t N = gy.dim(0), Co = gy.dim(1), plane = gy.dim(2) * gy.dim(3);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t co = 0; co < Co; ++co) {
            const double* g = &gy.data[static_cast<std::size_t>((n * Co + co) * plane)];
            double acc = 0.0;
            for (std::int64_t i = 0; i < plane; ++i) acc += g[i];
            bias.grad.data[static_cast<std::size_t>(co)] += acc;
        }
    Tensor gx = conv2d_core_input_grad(gy, weight.value, spec_.stride, spec_.padding, x.dim(2), x.dim(3));
    gx.require_finite("conv2d.backward");
    return gx;
}

ConvTranspose2d::ConvTranspose2d(LayerSpec s, std::string name)
    : Layer(std::move(s)),
      weight(name + ".weight", Tensor({spec_.in_channels, spec_.out_channels, spec_.kernel, spec_.kernel})),
      bias(name + ".bias", Tensor({spec_.out_channels})) {}

ConvTranspose2d::ConvTranspose2d(LayerSpec s, Rng& init_rng, std::string name)
    : ConvTranspose2d(std::move(s), std::move(name)) {
    weight.value = he_normal_init(weight.value.shape, spec_.in_channels * spec_.kernel * spec_.kernel, init_rng);
}

Tensor ConvTranspose2d::forward(const Tensor& x, bool) {
    check_4d(x, "conv_transpose2d");
    if (x.dim(1) != spec_.in_channels) {
        std::ostringstream os;
        os << "conv_transpose2d: input channels (" << x.dim(1) << ") do not match weight in_channels ("
           << spec_.in_channels << ")";
        throw std::invalid_argument(os.str());
    }
    cached_input_ = x;
    const std::int64_t Hout = (x.dim(2) - 1) * spec_.stride - 2 * spec_.padding + spec_.kernel + spec_.output_padding;
    const std::int64_t Wout = (x.dim(3) - 1) * spec_.stride - 2 * spec_.padding + spec_.kernel + spec_.output_padding;
    if (Hout <= 0 || Wout <= 0)
        throw std::invalid_argument("conv_transpose2d: non-positive output extent");
    // The scatter form of the transposed convolution is exactly the conv2d
    // input-gradient kernel with the roles of the channel axes swapped.
    Tensor y = conv2d_core_input_grad(x, weight.value, spec_.stride, spec_.padding, Hout, Wout);
    const std::int64_t N = y.dim(0), Co = y.dim(1), plane = Hout * Wout;
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t co = 0; co < Co; ++co) {
            double* out = &y.data[static_cast<std::size_t>((n * Co + co) * plane)];
            const double b = bias.value.data[static_cast<std::size_t>(co)];
            for (std::int64_t i = 0; i < plane; ++i) out[i] += b;
        }
    y.require_finite("conv_transpose2d.forward");
    return y;
}

Tensor ConvTranspose2d::backward(const Tensor& gy) {
    const Tensor& x = cached_input_;
    conv2d_core_weight_grad(gy, x, spec_.stride, spec_.padding, weight.grad);
    const std::int64_t N = gy.dim(0), Co = gy.dim(1), plane = gy.dim(2) * gy.dim(3);
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t co = 0; co < Co; ++co) {
            const double* g = &gy.data[static_cast<std::size_t>((n * Co + co) * plane)];
            double acc = 0.0;
            for (std::int64_t i = 0; i < plane; ++i) acc += g[i];
            bias.grad.data[static_cast<std::size_t>(co)] += acc;
        }
    Tensor gx = conv2d_core_forward(gy, weight.value, nullptr, spec_.stride, spec_.padding, "conv_transpose2d");
    gx.require_finite("conv_transpose2d.backward");
    return gx;
}

BatchNorm2d::BatchNorm2d(LayerSpec s, std::string name)
    : Layer(std::move(s)),
      gamma(name + ".gamma", Tensor::full({spec_.in_channels}, 1.0)),
      beta(name + ".beta", Tensor({spec_.in_channels})),
      running_mean(Tensor({spec_.in_channels})),
      running_var(Tensor::full({spec_.in_channels}, 1.0)),
      name_(std::move(name)) {}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) {
    check_4d(x, "batchnorm2d");
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (C != spec_.in_channels) {
        std::ostringstream os;
        os << "batchnorm2d: input channels (" << C << ") do not match configured channels ("
           << spec_.in_channels << ")";
        throw std::invalid_argument(os.str());
    }
    Tensor y(x.shape);
    trained_mode_ = training;
    if (training) {
        if (N < 2)
            throw std::runtime_error("batchnorm2d: batch size must be >= 2 in train mode (variance undefined)");
        cached_xhat_ = Tensor(x.shape);
        cached_invstd_.assign(static_cast<std::size_t>(C), 0.0);
        const std::int64_t M = N * H * W;
        parallel_for(C, [&](std::int64_t c) {
            double mean = 0.0;
            for (std::int64_t n = 0; n < N; ++n) {
                const double* p = &x.data[static_cast<std::size_t>(((n * C + c) * H) * W)];
                for (std::int64_t i = 0; i < H * W; ++i) mean += p[i];
            }
            mean /= static_cast<double>(M);
            double var = 0.0;
            for (std::int64_t n = 0; n < N; ++n) {
                const double* p = &x.data[static_cast<std::size_t>(((n * C + c) * H) * W)];
                for (std::int64_t i = 0; i < H * W; ++i) {
                    const double d = p[i] - mean;
                    var += d * d;
                }
            }
            var /= static_cast<double>(M);
            const double invstd = 1.0 / std::sqrt(var + spec_.epsilon);
            cached_invstd_[static_cast<std::size_t>(c)] = invstd;
            const double g = gamma.value.data[static_cast<std::size_t>(c)];
            const double b = beta.value.data[static_cast<std::size_t>(c)];
            for (std::int64_t n = 0; n < N; ++n) {
                const double* p = &x.data[static_cast<std::size_t>(((n * C + c) * H) * W)];
                double* xh = &cached_xhat_.data[static_cast<std::size_t>(((n * C + c) * H) * W)];
                double* yo = &y.data[static_cast<std::size_t>(((n * C + c) * H) * W)];
                for (std::int64_t i = 0; i < H * W; ++i) {
                    xh[i] = (p[i] - mean) * invstd;
                    yo[i] = g * xh[i] + b;
                }
            }
            // Running stats use the unbiased variance, matching the usual
            // train/eval convention.
            const double unbiased = M > 1 ? var * static_cast<double>(M) / static_cast<double>(M - 1) : var;
            running_mean.data[static_cast<std::size_t>(c)] =
                (1.0 - spec_.momentum) * running_mean.data[static_cast<std::size_t>(c)] + spec_.momentum * mean;
            running_var.data[static_cast<std::size_t>(c)] =
                (1.0 - spec_.momentum) * running_var.data[static_cast<std::size_t>(c)] + spec_.momentum * unbiased;
        });
    } else {
        parallel_for(C, [&](std::int64_t c) {
            const double mean = running_mean.data[static_cast<std::size_t>(c)];
            const double invstd = 1.0 / std::sqrt(running_var.data[static_cast<std::size_t>(c)] + spec_.epsilon);
            const double g = gamma.value.data[static_cast<std::size_t>(c)];
            const double b = beta.value.data[static_cast<std::size_t>(c)];
            for (std::int64_t n = 0; n < N; ++n) {
                const double* p = &x.data[static_cast<std::size_t>(((n * C + c) * H) * W)];
                double* yo = &y.data[static_cast<std::size_t>(((n * C + c) * H) * W)];
                for (std::int64_t i = 0; i < H * W; ++i) yo[i] = (p[i] - mean) * invstd * g + b;
            }
        });
        cached_invstd_.assign(static_cast<std::size_t>(C), 0.0);
        for (std::int64_t c = 0; c < C; ++c)
            cached_invstd_[static_cast<std::size_t>(c)] =
                1.0 / std::sqrt(running_var.data[static_cast<std::size_t>(c)] + spec_.epsilon);
    }
    y.require_finite("batchnorm2d.forward");
    return y;
}

Tensor BatchNorm2d::backward(const Tensor& gy) {
    const std::int64_t N = gy.dim(0), C = gy.dim(1), H = gy.dim(2), W = gy.dim(3);
    Tensor gx(gy.shape);
    if (trained_mode_) {
        const double M = static_cast<double>(N * H * W);
        parallel_for(C, [&](std::int64_t c) {
            const double g = gamma.value.data[static_cast<std::size_t>(c)];
            const double invstd = cached_invstd_[static_cast<std::size_t>(c)];
            double sum_gy = 0.0, sum_gy_xhat = 0.0;
            for (std::int64_t n = 0; n < N; ++n) {
                const double* gp = &gy.data[static_cast<std::size_t>(((n * C + c) * H) * W)];
                const double* xh = &cached_xhat_.data[static_cast<std::size_t>(((n * C + c) * H) * W)];
                for (std::int64_t i = 0; i < H * W; ++i) {
                    sum_gy += gp[i];
                    sum_gy_xhat += gp[i] * xh[i];
                }
            }
            gamma.grad.data[static_cast<std::size_t>(c)] += sum_gy_xhat;
            beta.grad.data[static_cast<std::size_t>(c)] += sum_gy;
            const double k1 = g * invstd / M;
            for (std::int64_t n = 0; n < N; ++n) {
                const double* gp = &gy.data[static_cast<std::size_t>(((n * C + c) * H) * W)];
                const double* xh = &cached_xhat_.data[static_cast<std::size_t>(((n * C + c) * H) * W)];
                double* gxo = &gx.data[static_cast<std::size_t>(((n * C + c) * H) * W)];
                for (std::int64_t i = 0; i < H * W; ++i)
                    gxo[i] = k1 * (M * gp[i] - sum_gy - xh[i] * sum_gy_xhat);
            }
        });
    } else {
        parallel_for(C, [&](std::int64_t c) {
            const double g = gamma.value.data[static_cast<std::size_t>(c)];
            const double invstd = cached_invstd_[static_cast<std::size_t>(c)];
            for (std::int64_t n = 0; n < N; ++n) {
                const double* gp = &gy.data[static_cast<std::size_t>(((n * C + c) * H) * W)];
                double* gxo = &gx.data[static_cast<std::size_t>(((n * C + c) * H) * W)];
                for (std::int64_t i = 0; i < H * W; ++i) gxo[i] = gp[i] * g * invstd;
            }
        });
    }
    gx.require_finite("batchnorm2d.backward");
    return gx;
}

Activation::Activation(LayerSpec s) : Layer(std::move(s)) {
    if (spec_.kind != LayerKind::relu && spec_.kind != LayerKind::leaky_relu)
        throw std::invalid_argument("activation layer requires relu or leaky_relu kind");
}

Tensor Activation::forward(const Tensor& x, bool) {
    cached_input_ = x;
    Tensor y(x.shape);
    const double slope = spec_.kind == LayerKind::relu ? 0.0 : spec_.negative_slope;
    for (std::size_t i = 0; i < x.data.size(); ++i)
        y.data[i] = x.data[i] >= 0.0 ? x.data[i] : slope * x.data[i];
    y.require_finite("activation.forward");
    return y;
}

Tensor Activation::backward(const Tensor& gy) {
    Tensor gx(gy.shape);
    const double slope = spec_.kind == LayerKind::relu ? 0.0 : spec_.negative_slope;
    for (std::size_t i = 0; i < gy.data.size(); ++i)
        gx.data[i] = cached_input_.data[i] >= 0.0 ? gy.data[i] : slope * gy.data[i];
    return gx;
}

Linear::Linear(LayerSpec s, std::string name)
    : Layer(std::move(s)),
      weight(name + ".weight", Tensor({spec_.in_features, spec_.out_features})),
      bias(name + ".bias", Tensor({spec_.out_features})) {}

Linear::Linear(LayerSpec s, Rng& init_rng, std::string name) : Linear(std::move(s), std::move(name)) {
    weight.value = he_normal_init(weight.value.shape, spec_.in_features, init_rng);
}

Tensor Linear::forward(const Tensor& x, bool) {
    // 4-d activations are flattened to [N, C*H*W]; backward restores the shape.
    Tensor flat = x;
    if (x.ndim() == 4) {
        flat.shape = {x.dim(0), x.dim(1) * x.dim(2) * x.dim(3)};
    } else if (x.ndim() != 2) {
        std::ostringstream os;
        os << "linear: expected 2-d or 4-d input, got " << x.shape_str();
        throw std::invalid_argument(os.str());
    }
    if (flat.dim(1) != spec_.in_features) {
        std::ostringstream os;
        os << "linear: input feature dim (" << flat.dim(1) << ") does not match weight in_features ("
           << spec_.in_features << ")";
        throw std::invalid_argument(os.str());
    }
    cached_orig_shape_ = x.shape;
    const Tensor& xr = flat;
    cached_input_ = xr;
    const std::int64_t N = x.dim(0), D = spec_.in_features, K = spec_.out_features;
    Tensor y({N, K});
    for (std::int64_t n = 0; n < N; ++n) {
        double* yrow = &y.data[static_cast<std::size_t>(n * K)];
        for (std::int64_t k = 0; k < K; ++k) yrow[k] = bias.value.data[static_cast<std::size_t>(k)];
        const double* xrow = &x.data[static_cast<std::size_t>(n * D)];
        for (std::int64_t d = 0; d < D; ++d) {
            const double xv = xrow[d];
            if (xv == 0.0) continue;
            const double* wrow = &weight.value.data[static_cast<std::size_t>(d * K)];
            for (std::int64_t k = 0; k < K; ++k) yrow[k] += xv * wrow[k];
        }
    }
    y.require_finite("linear.forward");
    return y;
}

Tensor Linear::backward(const Tensor& gy) {
    const std::int64_t N = gy.dim(0), D = spec_.in_features, K = spec_.out_features;
    Tensor gx({N, D});
    for (std::int64_t n = 0; n < N; ++n) {
        const double* grow = &gy.data[static_cast<std::size_t>(n * K)];
        const double* xrow = &cached_input_.data[static_cast<std::size_t>(n * D)];
        for (std::int64_t k = 0; k < K; ++k) bias.grad.data[static_cast<std::size_t>(k)] += grow[k];
        double* gxrow = &gx.data[static_cast<std::size_t>(n * D)];
        for (std::int64_t d = 0; d < D; ++d) {
            const double* wrow = &weight.value.data[static_cast<std::size_t>(d * K)];
            double* gwrow = &weight.grad.data[static_cast<std::size_t>(d * K)];
            double acc = 0.0;
            const double xv = xrow[d];
            for (std::int64_t k = 0; k < K; ++k) {
                acc += grow[k] * wrow[k];
                gwrow[k] += xv * grow[k];
            }
            gxrow[d] = acc;
        }
    }
    gx.shape = cached_orig_shape_;
    gx.require_finite("linear.backward");
    return gx;
}

std::unique_ptr<Layer> make_layer(const LayerSpec& spec, Rng& init_rng, const std::string& name) {
    switch (spec.kind) {
        case LayerKind::conv2d: return std::make_unique<Conv2d>(spec, init_rng, name);
        case LayerKind::conv_transpose2d: return std::make_unique<ConvTranspose2d>(spec, init_rng, name);
        case LayerKind::batchnorm2d: return std::make_unique<BatchNorm2d>(spec, name);
        case LayerKind::relu:
        case LayerKind::leaky_relu: return std::make_unique<Activation>(spec);
        case LayerKind::linear: return std::make_unique<Linear>(spec, init_rng, name);
    }
    throw std::logic_error("make_layer: unknown kind");
}

double mse_loss(const Tensor& x, const Tensor& xhat, Tensor* grad_xhat) {
    if (!x.same_shape(xhat)) {
        std::ostringstream os;
        os << "mse_loss: shape mismatch " << x.shape_str() << " vs " << xhat.shape_str();
        throw std::invalid_argument(os.str());
    }
    const double n = static_cast<double>(x.numel());
    if (n == 0) throw std::invalid_argument("mse_loss: empty tensors");
    double acc = 0.0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const double d = x.data[i] - xhat.data[i];
        acc += d * d;
    }
    const double loss = acc / n;
    if (!std::isfinite(loss)) throw std::runtime_error("mse_loss: non-finite loss");
    if (grad_xhat) {
        *grad_xhat = Tensor(xhat.shape);
        for (std::size_t i = 0; i < x.data.size(); ++i)
            grad_xhat->data[i] = 2.0 * (xhat.data[i] - x.data[i]) / n;
    }
    return loss;
}

double kl_loss(const Tensor& mu, const Tensor& logvar, Tensor* grad_mu, Tensor* grad_logvar) {
    if (!mu.same_shape(logvar)) {
        std::ostringstream os;
        os << "kl_loss: shape mismatch " << mu.shape_str() << " vs " << logvar.shape_str();
        throw std::invalid_argument(os.str());
    }
    logvar.require_finite("kl_loss.logvar");
    mu.require_finite("kl_loss.mu");
    const double batch = mu.ndim() >= 2 ? static_cast<double>(mu.dim(0)) : 1.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < mu.data.size(); ++i) {
        const double lv = logvar.data[i];
        const double m = mu.data[i];
        acc += -0.5 * (1.0 + lv - std::exp(lv) - m * m);
    }
    const double loss = acc / batch;
    if (!std::isfinite(loss)) throw std::runtime_error("kl_loss: non-finite loss");
    if (grad_mu) {
        *grad_mu = Tensor(mu.shape);
        for (std::size_t i = 0; i < mu.data.size(); ++i) grad_mu->data[i] = mu.data[i] / batch;
    }
    if (grad_logvar) {
        *grad_logvar = Tensor(logvar.shape);
        for (std::size_t i = 0; i < logvar.data.size(); ++i)
            grad_logvar->data[i] = 0.5 * (std::exp(logvar.data[i]) - 1.0) / batch;
    }
    return loss;
}

void AdamOptimizer::step(const std::vector<Parameter*>& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (Parameter* p : params) {
        for (std::size_t i = 0; i < p->value.data.size(); ++i) {
            const double g = p->grad.data[i];
            if (!std::isfinite(g)) {
                std::ostringstream os;
                os << "optimizer_step: non-finite gradient in parameter '" << p->name << "' at index " << i;
                throw std::runtime_error(os.str());
            }
            double& m = p->adam_m.data[i];
            double& v = p->adam_v.data[i];
            m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
            v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            p->value.data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
        p->value.require_finite("optimizer_step");
    }
}

void AdamOptimizer::zero_grad(const std::vector<Parameter*>& params) {
    for (Parameter* p : params) p->zero_grad();
}

Tensor Sequential::forward(const Tensor& x, bool training) {
    Tensor out = x;
    for (auto& l : layers_) out = l->forward(out, training);
    return out;
}

Tensor Sequential::backward(const Tensor& grad_out) {
    Tensor g = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
}

std::vector<Parameter*> Sequential::parameters() {
    std::vector<Parameter*> out;
    for (auto& l : layers_)
        for (Parameter* p : l->parameters()) out.push_back(p);
    return out;
}

std::vector<Layer*> Sequential::layers() {
    std::vector<Layer*> out;
    for (auto& l : layers_) out.push_back(l.get());
    return out;
}

namespace {

// Fixed synthetic target so the mse grad-check loss has a well-defined
// reference point independent of the network.
Tensor synth_target(const std::vector<std::int64_t>& shape) {
    Tensor t(shape);
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = 0.5 * std::sin(static_cast<double>(i) * 0.7);
    return t;
}

double eval_loss(Sequential& net, const Tensor& input, GradCheckLoss kind, const Tensor& target) {
    Tensor out = net.forward(input, true);
    if (kind == GradCheckLoss::mse_to_target) return mse_loss(target, out);
    const std::int64_t N = out.dim(0), two_d = out.dim(1);
    const std::int64_t D = two_d / 2;
    Tensor mu({N, D}), logvar({N, D});
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t d = 0; d < D; ++d) {
            mu.at2(n, d) = out.at2(n, d);
            logvar.at2(n, d) = out.at2(n, D + d);
        }
    return kl_loss(mu, logvar);
}

}  // namespace

double grad_check(Sequential& net, const Tensor& input, GradCheckLoss loss, double h) {
    std::vector<Parameter*> params = net.parameters();
    std::int64_t n_params = 0;
    for (Parameter* p : params) n_params += p->value.numel();
    if (n_params > 10000)
        throw std::invalid_argument("grad_check: network too large (> 1e4 parameters)");

    Tensor out = net.forward(input, true);
    Tensor target = synth_target(out.shape);

    // Analytic pass.
    AdamOptimizer::zero_grad(params);
    Tensor grad_out;
    if (loss == GradCheckLoss::mse_to_target) {
        mse_loss(target, out, &grad_out);
    } else {
        const std::int64_t N = out.dim(0), D = out.dim(1) / 2;
        if (out.dim(1) % 2 != 0)
            throw std::invalid_argument("grad_check: kl_split needs an even output width");
        Tensor mu({N, D}), logvar({N, D});
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t d = 0; d < D; ++d) {
                mu.at2(n, d) = out.at2(n, d);
                logvar.at2(n, d) = out.at2(n, D + d);
            }
        Tensor gmu, glv;
        kl_loss(mu, logvar, &gmu, &glv);
        grad_out = Tensor(out.shape);
        for (std::int64_t n = 0; n < N; ++n)
            for (std::int64_t d = 0; d < D; ++d) {
                grad_out.at2(n, d) = gmu.at2(n, d);
                grad_out.at2(n, D + d) = glv.at2(n, d);
            }
    }
    Tensor input_grad = net.backward(grad_out);

    std::vector<std::vector<double>> analytic_param_grads;
    for (Parameter* p : params) analytic_param_grads.push_back(p->grad.data);

    double max_rel = 0.0;
    auto update = [&max_rel](double analytic, double numeric) {
        const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
        max_rel = std::max(max_rel, std::fabs(analytic - numeric) / denom);
    };

    Tensor probe = input;
    for (std::size_t i = 0; i < probe.data.size(); ++i) {
        const double keep = probe.data[i];
        probe.data[i] = keep + h;
        const double lp = eval_loss(net, probe, loss, target);
        probe.data[i] = keep - h;
        const double lm = eval_loss(net, probe, loss, target);
        probe.data[i] = keep;
        update(input_grad.data[i], (lp - lm) / (2.0 * h));
    }
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter* p = params[pi];
        for (std::size_t i = 0; i < p->value.data.size(); ++i) {
            const double keep = p->value.data[i];
            p->value.data[i] = keep + h;
            const double lp = eval_loss(net, input, loss, target);
            p->value.data[i] = keep - h;
            const double lm = eval_loss(net, input, loss, target);
            p->value.data[i] = keep;
            update(analytic_param_grads[pi][i], (lp - lm) / (2.0 * h));
        }
    }
    return max_rel;
}

}  // namespace octcvd
